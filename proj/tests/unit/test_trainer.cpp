#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "marf/error.hpp"
#include "marf/trainer.hpp"

using namespace marf;
using ad::Mat;

namespace {

const Dataset& small_sphere() {
  static const Dataset ds = [] {
    DatasetOptions o;
    o.views = 4;
    o.width = 16;
    o.height = 16;
    const Shape s = Shape::parse("sphere:0.8");
    return generate_dataset(std::span<const Shape>(&s, 1), o);
  }();
  return ds;
}

TrainSetup tiny_setup(std::uint64_t seed) {
  TrainSetup s;
  s.network.hidden_layers = 2;
  s.network.width = 32;
  s.network.n_atoms = 4;
  s.train.epochs = 20;
  s.train.hold_epochs = 10;
  s.train.decay_epochs = 10;
  s.train.warmup_steps = 8;
  s.train.peak_lr = 2e-3;
  s.train.batch_size = 4;
  s.train.seed = seed;
  s.train.schedule_time_scale = 5.0;
  return s;
}

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("marf_trainer_" + name)).string();
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

bool same_params(NetworkParams a, NetworkParams b) {
  auto ta = a.tensors();
  auto tb = b.tensors();
  if (ta.size() != tb.size()) return false;
  for (std::size_t k = 0; k < ta.size(); ++k) {
    if (ta[k].tensor->rows() != tb[k].tensor->rows() || ta[k].tensor->cols() != tb[k].tensor->cols()) return false;
    if (std::memcmp(ta[k].tensor->data(), tb[k].tensor->data(), sizeof(double) * ta[k].tensor->size()) != 0) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("learning-rate checkpoints") {
    const TrainConfig c = TrainConfig::paper();
    CHECK(std::abs(lr_at(50, 0.0, c) - 2.5e-4) < 1e-12);
    CHECK(std::abs(lr_at(0, 0.0, c)) < 1e-12);
    CHECK(std::abs(lr_at(100000, 30.0, c) - 5e-4) < 1e-12);
    CHECK(std::abs(lr_at(100000, 115.0, c) - 3e-4) < 1e-12);
    CHECK(std::abs(lr_at(100000, 200.0, c) - 1e-4) < 1e-12);
    CHECK(std::abs(lr_at(100000, 250.0, c) - 1e-4) < 1e-12);
    // The desk preset keeps the same shape over its own epoch count.
    const TrainConfig d = TrainConfig::desk();
    CHECK_NOTHROW(d.validate());
    CHECK(std::abs(lr_at(1000000, d.epochs, d) - d.final_lr) < 1e-12);
  }

  TEST_CASE("config validation") {
    TrainConfig c;
    c.hold_epochs = 31;
    CHECK_THROWS_AS(c.validate(), InvalidInputError);
    c = TrainConfig{};
    c.peak_lr = 0.0;
    CHECK_THROWS_AS(c.validate(), InvalidInputError);
    c = TrainConfig{};
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), InvalidInputError);
  }

  TEST_CASE("gradient clipping") {
    std::vector<Mat> g{Mat::Constant(2, 2, 3.0), Mat::Constant(1, 4, 4.0)};
    // |g| = sqrt(4*9 + 4*16) = 10
    CHECK(std::abs(clip_global_norm(g, 1.0) - 10.0) < 1e-12);
    double n = 0.0;
    for (const auto& m : g) n += m.squaredNorm();
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-9);

    std::vector<Mat> small{Mat::Constant(1, 1, 0.5)};
    clip_global_norm(small, 1.0);
    CHECK(small[0](0, 0) == 0.5);
  }

  TEST_CASE("adam step with zero learning rate leaves parameters unchanged") {
    Mat p = Mat::Random(3, 3);
    const Mat before = p;
    std::vector<Mat*> ptrs{&p};
    AdamState st;
    adam_update(ptrs, {Mat::Ones(3, 3)}, {true}, st, 0.0, 5e-6);
    CHECK((p.array() == before.array()).all());
    CHECK(st.t == 1);
  }

  TEST_CASE("adam first step moves by lr against the gradient sign") {
    Mat p = Mat::Zero(1, 2);
    std::vector<Mat*> ptrs{&p};
    AdamState st;
    Mat g(1, 2);
    g << 2.0, -0.5;
    adam_update(ptrs, {g}, {false}, st, 1e-3, 0.0);
    CHECK(std::abs(p(0, 0) + 1e-3) < 1e-9);
    CHECK(std::abs(p(0, 1) - 1e-3) < 1e-9);
  }

  TEST_CASE("weight decay applies only to flagged tensors") {
    Mat w = Mat::Ones(1, 1), b = Mat::Ones(1, 1);
    std::vector<Mat*> ptrs{&w, &b};
    AdamState st;
    adam_update(ptrs, {Mat::Zero(1, 1), Mat::Zero(1, 1)}, {true, false}, st, 0.1, 0.5);
    CHECK(std::abs(w(0, 0) - 0.95) < 1e-12);
    CHECK(b(0, 0) == 1.0);
  }

  TEST_CASE("single-batch overfit drives the intersection loss below 1e-3") {
    const TrainingItems data = split_dataset(small_sphere(), 2);
    TrainSetup setup = tiny_setup(0);
    setup.network.hidden_layers = 4;
    setup.network.width = 64;
    setup.network.dropout_rate = 0.0;
    setup.train.warmup_steps = 20;
    setup.train.peak_lr = 1e-3;
    setup.train.final_lr = 1e-5;
    setup.train.hold_epochs = 5;
    setup.train.decay_epochs = 15;
    TrainState st = init_train_state(setup);
    const std::vector<int> batch{0, 1, 2, 3};
    EpochStats s;
    // L1 gradients keep their magnitude at the optimum, so the cosine decay
    // runs over the 500 steps (one "epoch" per 25 steps).
    for (int i = 0; i < 500; ++i) {
      st.epoch = i / 25;
      s = train_step(st, data, batch);
    }
    MESSAGE("final L_p " << s.marf.value[term_index(Term::P)]);
    CHECK(s.marf.value[term_index(Term::P)] < 1e-3);
    CHECK(std::isfinite(s.total));
  }

  TEST_CASE("checkpoint round trip is bit exact") {
    const TrainingItems data = split_dataset(small_sphere(), 2);
    TrainState st = init_train_state(tiny_setup(3));
    train_epoch(st, data);
    const std::string path = tmp_path("roundtrip.ckpt");
    save_checkpoint(st, path);
    const TrainState back = load_checkpoint(path);
    CHECK(back.epoch == st.epoch);
    CHECK(back.step == st.step);
    CHECK(back.adam.t == st.adam.t);
    CHECK(back.setup.train.seed == 3);
    CHECK(back.setup.network.width == 32);
    CHECK(back.setup.train.schedule_time_scale == 5.0);
    CHECK(same_params(back.params, st.params));
    REQUIRE(back.adam.m.size() == st.adam.m.size());
    for (std::size_t k = 0; k < st.adam.m.size(); ++k) {
      CHECK((back.adam.m[k].array() == st.adam.m[k].array()).all());
      CHECK((back.adam.v[k].array() == st.adam.v[k].array()).all());
    }
    save_checkpoint(back, path + "2");
    CHECK(slurp(path) == slurp(path + "2"));
    std::filesystem::remove(path + "2");

    SUBCASE("flipped body byte") {
      std::string bytes = slurp(path);
      bytes[bytes.size() - 5] ^= 0x40;
      std::ofstream(path, std::ios::binary) << bytes;
      CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    }
    SUBCASE("truncated") {
      const std::string bytes = slurp(path);
      std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
      CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    }
    SUBCASE("bad magic") {
      std::string bytes = slurp(path);
      bytes[0] = 'X';
      std::ofstream(path, std::ios::binary) << bytes;
      CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    }
    SUBCASE("absent") {
      std::filesystem::remove(path);
      CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    }
    std::filesystem::remove(path);
  }

  TEST_CASE("resume reproduces the uninterrupted run") {
    const TrainingItems data = split_dataset(small_sphere(), 2);
    TrainSetup setup = tiny_setup(1);
    setup.train.epochs = 3;
    setup.train.hold_epochs = 1;
    setup.train.decay_epochs = 2;

    TrainState full = init_train_state(setup);
    const auto a = train(full, data);

    TrainState part = init_train_state(setup);
    train_epoch(part, data);
    const std::string path = tmp_path("resume.ckpt");
    save_checkpoint(part, path);
    TrainState resumed = load_checkpoint(path);
    const auto b = train(resumed, data);
    std::filesystem::remove(path);

    REQUIRE(a.size() == 3);
    REQUIRE(b.size() == 2);
    for (int e = 0; e < 2; ++e) {
      CHECK(a[e + 1].epoch == b[e].epoch);
      CHECK(a[e + 1].total == b[e].total);
      CHECK(a[e + 1].grad_norm == b[e].grad_norm);
    }
    CHECK(same_params(full.params, resumed.params));
  }

  TEST_CASE("metrics CSV is identical across reruns") {
    const TrainingItems data = split_dataset(small_sphere(), 2);
    TrainSetup setup = tiny_setup(2);
    setup.train.epochs = 2;
    setup.train.hold_epochs = 1;
    setup.train.decay_epochs = 1;
    std::string csv[2];
    for (int run = 0; run < 2; ++run) {
      TrainState st = init_train_state(setup);
      TrainRunOptions o;
      o.metrics_path = tmp_path("metrics" + std::to_string(run) + ".csv");
      train(st, data, o);
      csv[run] = slurp(o.metrics_path);
      CHECK(std::filesystem::exists(o.metrics_path + ".timing.csv"));
      std::filesystem::remove(o.metrics_path);
      std::filesystem::remove(o.metrics_path + ".timing.csv");
    }
    CHECK(csv[0] == csv[1]);
    CHECK(csv[0].rfind("epoch,lr,total,L_p,", 0) == 0);
    CHECK(std::count(csv[0].begin(), csv[0].end(), '\n') == 3);
  }

  TEST_CASE("epoch-20 loss is below epoch-1 loss for seeds 0..2") {
    const TrainingItems data = split_dataset(small_sphere(), 2);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      TrainState st = init_train_state(tiny_setup(seed));
      const auto stats = train(st, data);
      REQUIRE(stats.size() == 20);
      MESSAGE("seed " << seed << ": epoch 1 " << stats[0].total << ", epoch 20 " << stats[19].total);
      CHECK(stats[19].total < stats[0].total);
    }
  }

  TEST_CASE("PRIF head trains") {
    const TrainingItems data = split_dataset(small_sphere(), 2);
    TrainSetup setup = tiny_setup(0);
    setup.network.head = Head::Prif;
    setup.train.epochs = 4;
    setup.train.hold_epochs = 2;
    setup.train.decay_epochs = 2;
    TrainState st = init_train_state(setup);
    const auto stats = train(st, data);
    CHECK(stats.back().total < stats.front().total);
    CHECK(stats.back().prif.bce > 0.0);
  }

  TEST_CASE("non-finite loss raises NumericalError and writes a dump") {
    const TrainingItems data = split_dataset(small_sphere(), 2);
    TrainState st = init_train_state(tiny_setup(0));
    st.params.weights[0](0, 0) = std::nan("");
    const std::string dir = tmp_path("dump");
    EpochOptions o;
    o.dump_dir = dir;
    CHECK_THROWS_AS(train_step(st, data, {0}, o), NumericalError);
    CHECK(std::filesystem::exists(std::filesystem::path(dir) / "nonfinite_dump.json"));
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("dataset shapes beyond the latent table are rejected") {
    TrainingItems data = split_dataset(small_sphere(), 2);
    data.items[0].shape_id = 1;
    TrainState st = init_train_state(tiny_setup(0));
    CHECK_THROWS_AS(train(st, data), InvalidInputError);
  }
}

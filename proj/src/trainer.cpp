#include "marf/trainer.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "marf/error.hpp"

namespace marf {

using ad::Mat;
using nlohmann::json;

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.epochs = 40;
  c.warmup_steps = 40;
  c.peak_lr = 1e-3;
  c.hold_epochs = 8;
  c.final_lr = 1e-4;
  c.decay_epochs = 32;
  c.batch_size = 2;
  c.schedule_time_scale = 5.0;
  return c;
}

void TrainConfig::validate() const {
  if (epochs <= 0) throw InvalidInputError("epochs must be positive");
  if (hold_epochs < 0 || decay_epochs < 0 || hold_epochs + decay_epochs != epochs) {
    throw InvalidInputError("hold_epochs + decay_epochs must equal epochs");
  }
  if (warmup_steps < 0) throw InvalidInputError("warmup_steps must be non-negative");
  if (!(peak_lr > 0.0) || !(final_lr > 0.0)) throw InvalidInputError("learning rates must be positive");
  if (!(weight_decay >= 0.0)) throw InvalidInputError("weight_decay must be non-negative");
  if (!(grad_clip_norm > 0.0)) throw InvalidInputError("grad_clip_norm must be positive");
  if (batch_size <= 0) throw InvalidInputError("batch_size must be positive");
  if (!(schedule_time_scale > 0.0)) throw InvalidInputError("schedule_time_scale must be positive");
}

double lr_at(std::int64_t step, double epoch, const TrainConfig& c) {
  if (step < c.warmup_steps) return c.peak_lr * static_cast<double>(step) / c.warmup_steps;
  if (epoch < c.hold_epochs) return c.peak_lr;
  if (c.decay_epochs <= 0) return c.final_lr;
  const double x = std::min(1.0, (epoch - c.hold_epochs) / c.decay_epochs);
  return c.final_lr + (c.peak_lr - c.final_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * x));
}

double clip_global_norm(std::vector<Mat>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) g *= s;
  }
  return norm;
}

void adam_update(std::vector<Mat*>& params, const std::vector<Mat>& grads, const std::vector<bool>& decay,
                 AdamState& st, double lr, double weight_decay) {
  if (st.m.size() != params.size()) {
    st.m.clear();
    st.v.clear();
    for (const Mat* p : params) {
      st.m.push_back(Mat::Zero(p->rows(), p->cols()));
      st.v.push_back(Mat::Zero(p->rows(), p->cols()));
    }
  }
  ++st.t;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Mat& p = *params[k];
    st.m[k] = st.beta1 * st.m[k] + (1.0 - st.beta1) * grads[k];
    st.v[k] = st.beta2 * st.v[k] + (1.0 - st.beta2) * grads[k].cwiseProduct(grads[k]);
    if (decay[k]) p -= (lr * weight_decay) * p;
    p.array() -= lr * (st.m[k].array() / c1) / ((st.v[k].array() / c2).sqrt() + st.eps);
  }
}

TrainState init_train_state(const TrainSetup& setup) {
  setup.network.validate();
  setup.train.validate();
  TrainState s;
  s.setup = setup;
  s.params = init_params(setup.network, setup.train.seed);
  return s;
}

namespace {

constexpr std::uint64_t kBatchStream = 0x7A11000000ULL;

void write_dump(const std::string& dir, const TrainState& state, const TrainingItems& data,
                const std::vector<int>& batch, double total, const std::string& what) {
  json j;
  j["epoch"] = state.epoch;
  j["step"] = state.step;
  j["reason"] = what;
  j["total"] = std::isfinite(total) ? json(total) : json(std::to_string(total));
  j["items"] = json::array();
  for (int i : batch) {
    const auto& r = data.refs[static_cast<std::size_t>(i)];
    const auto& b = data.items[static_cast<std::size_t>(i)];
    j["items"].push_back({{"index", i},
                          {"shape", r.shape_id},
                          {"view", r.view},
                          {"a", r.a},
                          {"b", r.b},
                          {"rays", b.size()},
                          {"hits", b.hit_gt.sum()},
                          {"misses", b.miss_gt.sum()}});
  }
  j["params_finite"] = state.params.all_finite();
  std::filesystem::create_directories(dir);
  std::ofstream(std::filesystem::path(dir) / "nonfinite_dump.json") << j.dump(2) << '\n';
}

std::vector<bool> decay_mask(NetworkParams& p) {
  std::vector<bool> out;
  for (const auto& t : p.tensors()) out.push_back(t.kind == NetworkParams::Kind::Weight);
  return out;
}

}  // namespace

EpochStats train_step(TrainState& state, const TrainingItems& data, const std::vector<int>& batch,
                      const EpochOptions& opts) {
  const TrainSetup& su = state.setup;
  const double epoch = static_cast<double>(state.epoch);
  const double lr = lr_at(state.step, epoch, su.train);
  // Dropout masks and partner permutations depend only on (seed, step).
  CounterRng rng(su.train.seed, kBatchStream + static_cast<std::uint64_t>(state.step));

  std::vector<RayBatch> items;
  std::vector<ItemRandom> random;
  for (int i : batch) {
    const RayBatch& b = data.items[static_cast<std::size_t>(i)];
    items.push_back(b);
    random.push_back(sample_item_random(su.network, b.size(), true, rng));
  }

  ad::Tape tape;
  const BoundParams bound = bind_params(tape, state.params, true);
  EpochStats st;
  st.epoch = state.epoch;
  st.lr = lr;
  st.batches = 1;
  ad::Var total;
  if (su.network.head == Head::Marf) {
    const LossWeights w = su.schedule.at(epoch * su.train.schedule_time_scale);
    const LossResult res = marf_loss(tape, su.network, bound, items, random, w, su.loss);
    total = res.total;
    st.marf = res.breakdown;
    st.degenerate_normals = res.breakdown.degenerate_normals;
  } else {
    const PrifLossResult res = prif_loss(tape, su.network, bound, items, random, su.prif);
    total = res.total;
    st.prif = res.breakdown;
  }
  st.total = total.scalar();
  if (!std::isfinite(st.total)) {
    write_dump(opts.dump_dir, state, data, batch, st.total, "non-finite loss");
    throw NumericalError("non-finite loss at epoch " + std::to_string(state.epoch) + ", step " +
                         std::to_string(state.step) + " (dump in " + opts.dump_dir + "/nonfinite_dump.json)");
  }
  std::vector<Mat> grads = tape.gradient(total, bound.all);
  st.grad_norm = clip_global_norm(grads, su.train.grad_clip_norm);
  if (!std::isfinite(st.grad_norm)) {
    write_dump(opts.dump_dir, state, data, batch, st.total, "non-finite gradient");
    throw NumericalError("non-finite gradient at epoch " + std::to_string(state.epoch) + ", step " +
                         std::to_string(state.step) + " (dump in " + opts.dump_dir + "/nonfinite_dump.json)");
  }
  std::vector<Mat*> ptrs;
  for (auto& t : state.params.tensors()) ptrs.push_back(t.tensor);
  adam_update(ptrs, grads, decay_mask(state.params), state.adam, lr, su.train.weight_decay);
  ++state.step;
  return st;
}

EpochStats train_epoch(TrainState& state, const TrainingItems& data, const EpochOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto batches = make_batches(data.items.size(), state.setup.train.batch_size, state.setup.train.seed,
                                    state.epoch);
  EpochStats acc;
  acc.epoch = state.epoch;
  for (const auto& batch : batches) {
    const EpochStats s = train_step(state, data, batch, opts);
    if (acc.batches == 0) acc.lr = s.lr;
    acc.total += s.total;
    for (std::size_t i = 0; i < kTermCount; ++i) acc.marf.value[i] += s.marf.value[i];
    acc.marf.weight = s.marf.weight;
    acc.marf.hit_fraction += s.marf.hit_fraction;
    acc.prif.bce += s.prif.bce;
    acc.prif.displacement += s.prif.displacement;
    acc.prif.normal += s.prif.normal;
    acc.prif.multiview += s.prif.multiview;
    acc.grad_norm += s.grad_norm;
    acc.degenerate_normals += s.degenerate_normals;
    ++acc.batches;
  }
  const double n = std::max(1, acc.batches);
  acc.total /= n;
  for (auto& v : acc.marf.value) v /= n;
  acc.marf.total = acc.total;
  acc.marf.hit_fraction /= n;
  acc.prif.bce /= n;
  acc.prif.displacement /= n;
  acc.prif.normal /= n;
  acc.prif.multiview /= n;
  acc.prif.total = acc.total;
  acc.grad_norm /= n;
  ++state.epoch;
  acc.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return acc;
}

// Checkpoints.

namespace {

constexpr char kCkptMagic[10] = {'M', 'A', 'R', 'F', 'C', 'K', 'P', 'T', '1', '\0'};
constexpr int kCkptVersion = 1;

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

json network_json(const NetworkConfig& c) {
  return {{"hidden_layers", c.hidden_layers}, {"width", c.width},           {"n_atoms", c.n_atoms},
          {"leaky_slope", c.leaky_slope},     {"dropout_rate", c.dropout_rate}, {"latent_dim", c.latent_dim},
          {"n_shapes", c.n_shapes},           {"head", head_name(c.head)},  {"medial_init", c.medial_init}};
}

NetworkConfig network_from(const json& j) {
  NetworkConfig c;
  c.hidden_layers = j.at("hidden_layers").get<int>();
  c.width = j.at("width").get<int>();
  c.n_atoms = j.at("n_atoms").get<int>();
  c.leaky_slope = j.at("leaky_slope").get<double>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.latent_dim = j.at("latent_dim").get<int>();
  c.n_shapes = j.at("n_shapes").get<int>();
  c.head = parse_head(j.at("head").get<std::string>());
  c.medial_init = j.at("medial_init").get<bool>();
  return c;
}

json train_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"warmup_steps", c.warmup_steps},
          {"peak_lr", c.peak_lr},
          {"hold_epochs", c.hold_epochs},
          {"final_lr", c.final_lr},
          {"decay_epochs", c.decay_epochs},
          {"weight_decay", c.weight_decay},
          {"grad_clip_norm", c.grad_clip_norm},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"schedule_time_scale", c.schedule_time_scale}};
}

TrainConfig train_from(const json& j) {
  TrainConfig c;
  c.epochs = j.at("epochs").get<int>();
  c.warmup_steps = j.at("warmup_steps").get<int>();
  c.peak_lr = j.at("peak_lr").get<double>();
  c.hold_epochs = j.at("hold_epochs").get<int>();
  c.final_lr = j.at("final_lr").get<double>();
  c.decay_epochs = j.at("decay_epochs").get<int>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.grad_clip_norm = j.at("grad_clip_norm").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.schedule_time_scale = j.at("schedule_time_scale").get<double>();
  return c;
}

json schedule_json(const LossSchedule& s) {
  json terms = json::object();
  for (std::size_t i = 0; i < kTermCount; ++i) {
    const Schedule& l = s.lambda[i];
    terms[std::string(kTermNames[i])] = {{"base", l.base},           {"slope", l.slope},
                                         {"divisor", l.divisor},     {"ease", static_cast<int>(l.ease)},
                                         {"duration", l.duration},   {"offset", l.offset},
                                         {"scale", s.scale[i]}};
  }
  return terms;
}

LossSchedule schedule_from(const json& j) {
  LossSchedule s;
  for (std::size_t i = 0; i < kTermCount; ++i) {
    const json& t = j.at(std::string(kTermNames[i]));
    Schedule& l = s.lambda[i];
    l.base = t.at("base").get<double>();
    l.slope = t.at("slope").get<double>();
    l.divisor = t.at("divisor").get<double>();
    const int ease = t.at("ease").get<int>();
    if (ease < 0 || ease > 2) throw FormatError("bad ease kind in checkpoint");
    l.ease = static_cast<Schedule::Ease>(ease);
    l.duration = t.at("duration").get<double>();
    l.offset = t.at("offset").get<double>();
    s.scale[i] = t.at("scale").get<double>();
  }
  return s;
}

}  // namespace

void save_checkpoint(const TrainState& state, const std::string& path) {
  NetworkParams params = state.params;
  auto refs = params.tensors();
  json manifest = json::array();
  std::vector<const Mat*> blobs;
  for (const auto& r : refs) {
    manifest.push_back({{"name", r.name}, {"rows", r.tensor->rows()}, {"cols", r.tensor->cols()}});
    blobs.push_back(r.tensor);
  }
  const bool has_moments = state.adam.m.size() == refs.size();
  if (has_moments) {
    for (std::size_t k = 0; k < refs.size(); ++k) {
      manifest.push_back({{"name", "adam.m." + refs[k].name}, {"rows", state.adam.m[k].rows()}, {"cols", state.adam.m[k].cols()}});
      blobs.push_back(&state.adam.m[k]);
    }
    for (std::size_t k = 0; k < refs.size(); ++k) {
      manifest.push_back({{"name", "adam.v." + refs[k].name}, {"rows", state.adam.v[k].rows()}, {"cols", state.adam.v[k].cols()}});
      blobs.push_back(&state.adam.v[k]);
    }
  }
  std::string body;
  for (const Mat* m : blobs) {
    // Eigen storage is column-major; doubles are written little-endian.
    const auto* p = reinterpret_cast<const char*>(m->data());
    body.append(p, static_cast<std::size_t>(m->size()) * sizeof(double));
  }
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");

  json header;
  header["version"] = kCkptVersion;
  header["network"] = network_json(state.setup.network);
  header["train"] = train_json(state.setup.train);
  header["schedule"] = schedule_json(state.setup.schedule);
  header["loss"] = {{"multiview_mode", state.setup.loss.multiview.mode == MultiviewMode::Analytic ? "analytic" : "fd"},
                    {"fd_step", state.setup.loss.multiview.fd_step},
                    {"skip_zero_weight", state.setup.loss.skip_zero_weight}};
  header["prif"] = {{"bce", state.setup.prif.bce},
                    {"displacement", state.setup.prif.displacement},
                    {"normal", state.setup.prif.normal},
                    {"multiview", state.setup.prif.multiview}};
  header["epoch"] = state.epoch;
  header["step"] = state.step;
  header["rng"] = {{"seed", state.setup.train.seed}, {"stream_base", kBatchStream}, {"next_stream", kBatchStream + static_cast<std::uint64_t>(state.step)}};
  header["adam"] = {{"t", state.adam.t}, {"beta1", state.adam.beta1}, {"beta2", state.adam.beta2}, {"eps", state.adam.eps}, {"moments", has_moments}};
  header["tensors"] = manifest;
  header["checksum"] = fnv1a(body.data(), body.size());
  const std::string h = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw FormatError("cannot write checkpoint '" + path + "'");
    f.write(kCkptMagic, sizeof(kCkptMagic));
    const std::uint64_t n = h.size();
    f.write(reinterpret_cast<const char*>(&n), sizeof(n));
    f.write(h.data(), static_cast<std::streamsize>(h.size()));
    f.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!f) throw FormatError("cannot write checkpoint '" + path + "'");
  }
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open checkpoint '" + path + "'");
  const std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (data.size() < sizeof(kCkptMagic) + 8 || std::memcmp(data.data(), kCkptMagic, sizeof(kCkptMagic)) != 0) {
    throw FormatError("'" + path + "' is not a MARFCKPT1 checkpoint");
  }
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, data.data() + sizeof(kCkptMagic), 8);
  const std::size_t hstart = sizeof(kCkptMagic) + 8;
  if (hlen > data.size() - hstart) throw FormatError("truncated checkpoint header in '" + path + "'");
  TrainState s;
  try {
    const json h = json::parse(data.substr(hstart, hlen));
    const int version = h.at("version").get<int>();
    if (version != kCkptVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    s.setup.network = network_from(h.at("network"));
    s.setup.train = train_from(h.at("train"));
    s.setup.schedule = schedule_from(h.at("schedule"));
    const json& loss = h.at("loss");
    s.setup.loss.multiview.mode = loss.at("multiview_mode").get<std::string>() == "analytic"
                                      ? MultiviewMode::Analytic
                                      : MultiviewMode::FiniteDifference;
    s.setup.loss.multiview.fd_step = loss.at("fd_step").get<double>();
    s.setup.loss.skip_zero_weight = loss.at("skip_zero_weight").get<bool>();
    const json& prif = h.at("prif");
    s.setup.prif = {prif.at("bce").get<double>(), prif.at("displacement").get<double>(),
                    prif.at("normal").get<double>(), prif.at("multiview").get<double>()};
    s.setup.network.validate();
    s.epoch = h.at("epoch").get<int>();
    s.step = h.at("step").get<std::int64_t>();
    const json& adam = h.at("adam");
    s.adam.t = adam.at("t").get<std::int64_t>();
    s.adam.beta1 = adam.at("beta1").get<double>();
    s.adam.beta2 = adam.at("beta2").get<double>();
    s.adam.eps = adam.at("eps").get<double>();
    const bool moments = adam.at("moments").get<bool>();

    s.params = init_params(s.setup.network, 0);
    auto refs = s.params.tensors();
    const json& manifest = h.at("tensors");
    const std::size_t expected = refs.size() * (moments ? 3 : 1);
    if (manifest.size() != expected) throw FormatError("checkpoint tensor manifest does not match the network");
    const std::string body = data.substr(hstart + hlen);
    if (fnv1a(body.data(), body.size()) != h.at("checksum").get<std::uint64_t>()) {
      throw FormatError("checkpoint '" + path + "' is corrupted (checksum mismatch)");
    }
    std::size_t offset = 0;
    auto read_into = [&](Mat& m, const json& entry, const std::string& name) {
      if (entry.at("name").get<std::string>() != name || entry.at("rows").get<Eigen::Index>() != m.rows() ||
          entry.at("cols").get<Eigen::Index>() != m.cols()) {
        throw FormatError("checkpoint tensor '" + name + "' does not match the network");
      }
      const std::size_t bytes = static_cast<std::size_t>(m.size()) * sizeof(double);
      if (offset + bytes > body.size()) throw FormatError("truncated checkpoint body");
      std::memcpy(m.data(), body.data() + offset, bytes);
      offset += bytes;
    };
    for (std::size_t k = 0; k < refs.size(); ++k) read_into(*refs[k].tensor, manifest[k], refs[k].name);
    if (moments) {
      for (std::size_t k = 0; k < refs.size(); ++k) {
        s.adam.m.push_back(Mat(refs[k].tensor->rows(), refs[k].tensor->cols()));
        read_into(s.adam.m.back(), manifest[refs.size() + k], "adam.m." + refs[k].name);
      }
      for (std::size_t k = 0; k < refs.size(); ++k) {
        s.adam.v.push_back(Mat(refs[k].tensor->rows(), refs[k].tensor->cols()));
        read_into(s.adam.v.back(), manifest[2 * refs.size() + k], "adam.v." + refs[k].name);
      }
    }
    if (offset != body.size()) throw FormatError("checkpoint body has trailing bytes");
  } catch (const json::exception& e) {
    throw FormatError("bad checkpoint header in '" + path + "': " + e.what());
  } catch (const InvalidInputError& e) {
    throw FormatError("bad checkpoint header in '" + path + "': " + e.what());
  }
  return s;
}

// Metrics.

namespace {

std::string exact(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

}  // namespace

MetricsLog::MetricsLog(const std::string& path, Head head, bool append) : path_(path), head_(head) {
  if (append && std::filesystem::exists(path)) return;
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write metrics '" + path + "'");
  f << "epoch,lr,total";
  if (head == Head::Marf) {
    for (auto n : kTermNames) f << ",L_" << n;
    for (auto n : kTermNames) f << ",w_" << n;
    f << ",hit_fraction,degenerate_normals";
  } else {
    f << ",bce,displacement,normal,multiview";
  }
  f << ",grad_norm,batches\n";
  std::ofstream(path + ".timing.csv") << "epoch,wall_seconds\n";
}

void MetricsLog::write(const EpochStats& s) {
  if (path_.empty()) return;
  std::ofstream f(path_, std::ios::app);
  f << s.epoch << ',' << exact(s.lr) << ',' << exact(s.total);
  if (head_ == Head::Marf) {
    for (double v : s.marf.value) f << ',' << exact(v);
    for (double w : s.marf.weight) f << ',' << exact(w);
    f << ',' << exact(s.marf.hit_fraction) << ',' << s.degenerate_normals;
  } else {
    f << ',' << exact(s.prif.bce) << ',' << exact(s.prif.displacement) << ',' << exact(s.prif.normal) << ','
      << exact(s.prif.multiview);
  }
  f << ',' << exact(s.grad_norm) << ',' << s.batches << '\n';
  std::ofstream(path_ + ".timing.csv", std::ios::app) << s.epoch << ',' << s.wall_seconds << '\n';
}

std::vector<EpochStats> train(TrainState& state, const TrainingItems& data, const TrainRunOptions& opts) {
  if (data.items.empty()) throw InvalidInputError("no training items");
  for (const auto& b : data.items) {
    if (b.shape_id >= state.setup.network.n_shapes) {
      throw InvalidInputError("dataset has more shapes than the network's latent table");
    }
  }
  MetricsLog log;
  if (!opts.metrics_path.empty()) log = MetricsLog(opts.metrics_path, state.setup.network.head, state.epoch > 0);
  std::vector<EpochStats> out;
  const int end = opts.stop_epoch >= 0 ? std::min(opts.stop_epoch, state.setup.train.epochs) : state.setup.train.epochs;
  while (state.epoch < end) {
    out.push_back(train_epoch(state, data, opts.epoch));
    log.write(out.back());
    if (opts.on_epoch) opts.on_epoch(out.back());
    const bool last = state.epoch == end;
    if (!opts.checkpoint_path.empty() && (last || state.epoch % std::max(1, opts.checkpoint_every) == 0)) {
      save_checkpoint(state, opts.checkpoint_path);
    }
  }
  return out;
}

}  // namespace marf

#include "doctest.h"
#include "marf/error.hpp"
#include "marf/run_config.hpp"

using namespace marf;

TEST_SUITE("cli") {
  TEST_CASE("presets validate") {
    CHECK_NOTHROW(RunConfig::desk().validate());
    CHECK_NOTHROW(RunConfig::paper().validate());
    CHECK_THROWS_AS(RunConfig::preset("laptop"), InvalidInputError);

    const RunConfig p = RunConfig::paper();
    CHECK(p.network.hidden_layers == 8);
    CHECK(p.network.width == 512);
    CHECK(p.network.n_atoms == 16);
    CHECK(p.network.dropout_rate == 0.01);
    CHECK(p.train.epochs == 200);
    CHECK(p.train.batch_size == 8);
    CHECK(p.data.views == 50);
    CHECK(p.data.width == 200);
    CHECK(p.stride == 4);
    CHECK(p.eval.viewpoints == 4000);

    const RunConfig d = RunConfig::desk();
    CHECK(d.network.hidden_layers == 4);
    CHECK(d.network.width == 128);
    CHECK(d.network.n_atoms == 8);
    CHECK(d.network.dropout_rate == 0.0);
    CHECK(d.data.views == 20);
    CHECK(d.data.width == 64);
    CHECK(d.stride == 2);
    CHECK(d.train.epochs <= 50);
  }

  TEST_CASE("empty document is the base preset") {
    CHECK(parse_run_config("{}").to_json() == RunConfig::desk().to_json());
    CHECK(parse_run_config("{}", "paper").to_json() == RunConfig::paper().to_json());
    CHECK(parse_run_config(R"({"preset": "paper"})").to_json() == RunConfig::paper().to_json());
  }

  TEST_CASE("overrides apply on top of the preset") {
    const RunConfig c = parse_run_config(R"({
      "network": {"width": 64, "head": "prif"},
      "train": {"seed": 7},
      "loss": {"scale": {"mv": 0}, "schedule": {"n": {"ease": "linear", "duration": 10}}, "multiview_mode": "fd"},
      "render": {"mode": "ward", "view": [0, 0, 1]}
    })");
    CHECK(c.network.width == 64);
    CHECK(c.network.hidden_layers == 4);
    CHECK(c.network.head == Head::Prif);
    CHECK(c.train.seed == 7);
    CHECK(c.schedule.scale[term_index(Term::Mv)] == 0.0);
    CHECK(c.schedule.lambda[term_index(Term::N)].ease == Schedule::Ease::Linear);
    CHECK(c.schedule.lambda[term_index(Term::N)].duration == 10.0);
    CHECK(c.loss.multiview.mode == MultiviewMode::FiniteDifference);
    CHECK(c.render.mode == RenderMode::Ward);
    CHECK(c.render.view == Vec3(0, 0, 1));
  }

  TEST_CASE("resolved document round-trips") {
    RunConfig c = RunConfig::paper();
    c.train.seed = 12345678901234ULL;
    c.train.peak_lr = 0.1 + 0.2;
    c.render.params.light = Vec3(0.3, -1.0 / 3.0, 2.0);
    const std::string j = c.to_json();
    CHECK(parse_run_config(j).to_json() == j);
  }

  TEST_CASE("unknown keys and bad values are rejected") {
    CHECK_THROWS_AS(parse_run_config(R"({"netwrok": {}})"), InvalidInputError);
    CHECK_THROWS_AS(parse_run_config(R"({"network": {"widht": 3}})"), InvalidInputError);
    CHECK_THROWS_AS(parse_run_config(R"({"loss": {"scale": {"q": 1}}})"), InvalidInputError);
    CHECK_THROWS_AS(parse_run_config(R"({"data": {"silhouette": {"step": 1}}})"), InvalidInputError);
    CHECK_THROWS_AS(parse_run_config(R"({"render": {"ward": {"a3": 1}}})"), InvalidInputError);
    CHECK_THROWS_AS(parse_run_config(R"({"network": {"width": "wide"}})"), InvalidInputError);
    CHECK_THROWS_AS(parse_run_config(R"({"render": {"mode": "sketch"}})"), InvalidInputError);
    CHECK_THROWS_AS(parse_run_config(R"({"render": {"view": [1, 2]}})"), InvalidInputError);
    CHECK_THROWS_AS(parse_run_config(R"({"network": {"hidden_layers": 3}})"), InvalidInputError);
    CHECK_THROWS_AS(parse_run_config(R"({"data": {"stride": 3}})"), InvalidInputError);
    CHECK_THROWS_AS(parse_run_config(R"({"train": {"epochs": 10}})"), InvalidInputError);
    CHECK_THROWS_AS(parse_run_config("[1, 2]"), InvalidInputError);
    CHECK_THROWS_AS(parse_run_config("{"), InvalidInputError);
    CHECK_THROWS_AS(load_run_config("/nonexistent/run.json"), FormatError);
  }
}

#pragma once

#include <string>

#include "marf/evaluation.hpp"
#include "marf/render.hpp"
#include "marf/trainer.hpp"

namespace marf {

struct RenderConfig {
  int width = 128;
  int height = 128;
  RenderMode mode = RenderMode::Lambertian;
  /// Direction the camera looks along.
  Vec3 view = Vec3(-1.0, -0.6, -0.4);
  /// Orbit elevation in degrees.
  double elevation = 20.0;
  RenderParams params;
};

/// Every tunable of a run. JSON sections: network, train, data, loss, eval,
/// render, plus an optional top-level "preset" that selects the base values.
struct RunConfig {
  NetworkConfig network;
  TrainConfig train;
  int checkpoint_every = 1;
  DatasetOptions data;
  int stride = 2;
  LossSchedule schedule;
  LossOptions loss;
  PrifLossWeights prif;
  ProtocolConfig eval;
  RenderConfig render;

  static RunConfig desk();
  static RunConfig paper();
  /// "desk" or "paper"; InvalidInputError otherwise.
  static RunConfig preset(const std::string& name);

  void validate() const;
  TrainSetup setup() const;
  /// Fully resolved document; parse_run_config(to_json()) reproduces it.
  std::string to_json() const;
};

/// Unknown keys and mistyped values raise InvalidInputError. A "preset" key in
/// the document replaces `base_preset`.
RunConfig parse_run_config(const std::string& text, const std::string& base_preset = "desk");
/// FormatError when the file cannot be read.
RunConfig load_run_config(const std::string& path, const std::string& base_preset = "desk");

}  // namespace marf

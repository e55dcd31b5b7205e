#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <string_view>

namespace marf {

/// Linear ease-in from 0 to 1 over `duration` epochs starting at `offset`.
inline double ease_linear(double epoch, double duration, double offset = 0.0) {
  if (duration <= 0.0) return epoch >= offset ? 1.0 : 0.0;
  return std::clamp((epoch - offset) / duration, 0.0, 1.0);
}

/// Sinusoidal ease-in: -0.5 * (cos(pi * e_l) - 1).
inline double ease_sine(double epoch, double duration, double offset = 0.0) {
  return -0.5 * (std::cos(std::numbers::pi * ease_linear(epoch, duration, offset)) - 1.0);
}

/// lambda(epoch) = (base + slope * ease(epoch)) / divisor.
struct Schedule {
  enum class Ease { None, Linear, Sine };
  double base = 0.0;
  double slope = 0.0;
  double divisor = 1.0;
  Ease ease = Ease::None;
  double duration = 0.0;
  double offset = 0.0;

  static Schedule constant(double v) { return {v, 0.0, 1.0, Ease::None, 0.0, 0.0}; }

  double at(double epoch) const {
    double e = 0.0;
    switch (ease) {
      case Ease::None: break;
      case Ease::Linear: e = ease_linear(epoch, duration, offset); break;
      case Ease::Sine: e = ease_sine(epoch, duration, offset); break;
    }
    return (base + slope * e) / divisor;
  }
};

enum class Term { P, N, S, H, R, Ih, Im, Sigma, Mv, Z };
inline constexpr std::size_t kTermCount = 10;
inline constexpr std::array<std::string_view, kTermCount> kTermNames{"p", "n", "s", "h", "r",
                                                                      "ih", "im", "sigma", "mv", "z"};

inline std::size_t term_index(Term t) { return static_cast<std::size_t>(t); }

/// Returns kTermCount for an unknown name.
inline std::size_t term_index(std::string_view name) {
  for (std::size_t i = 0; i < kTermCount; ++i) {
    if (kTermNames[i] == name) return i;
  }
  return kTermCount;
}

using LossWeights = std::array<double, kTermCount>;

struct LossSchedule {
  std::array<Schedule, kTermCount> lambda{};
  /// Per-term multipliers applied on top of the schedule (ablations).
  std::array<double, kTermCount> scale{};

  LossSchedule() {
    using E = Schedule::Ease;
    lambda[term_index(Term::P)] = Schedule::constant(2.0);
    lambda[term_index(Term::N)] = {0.0, 1.0, 4.0, E::Sine, 85.0, 15.0};
    lambda[term_index(Term::S)] = Schedule::constant(10.0);
    lambda[term_index(Term::H)] = Schedule::constant(100.0);
    lambda[term_index(Term::R)] = Schedule::constant(5e-4);
    lambda[term_index(Term::Ih)] = Schedule::constant(20.0);
    lambda[term_index(Term::Im)] = Schedule::constant(300.0);
    lambda[term_index(Term::Sigma)] = {10.0, -9.0, 100.0, E::Linear, 40.0, 0.0};
    lambda[term_index(Term::Mv)] = {0.0, 1.0, 10.0, E::Linear, 50.0, 0.0};
    lambda[term_index(Term::Z)] = {0.0, 0.01 * 0.01, 1.0, E::Linear, 30.0, 0.0};
    scale.fill(1.0);
  }

  LossWeights at(double epoch) const {
    LossWeights w{};
    for (std::size_t i = 0; i < kTermCount; ++i) w[i] = scale[i] * lambda[i].at(epoch);
    return w;
  }
};

}  // namespace marf

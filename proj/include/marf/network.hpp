#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "marf/dual.hpp"
#include "marf/geometry.hpp"
#include "marf/rng.hpp"

namespace marf {

enum class Head { Marf, Prif };

const char* head_name(Head head);
Head parse_head(const std::string& name);

struct NetworkConfig {
  int hidden_layers = 4;
  int width = 128;
  int n_atoms = 8;
  double leaky_slope = 0.01;
  double dropout_rate = 0.01;
  int latent_dim = 0;
  int n_shapes = 1;
  Head head = Head::Marf;
  /// Scaled final layer and atom-shaped final bias; off gives the plain fan-in init.
  bool medial_init = true;

  /// No dropout: over a 40-epoch run its noise biases the surface inward.
  static NetworkConfig desk() {
    NetworkConfig c;
    c.dropout_rate = 0.0;
    return c;
  }
  static NetworkConfig paper() {
    NetworkConfig c;
    c.dropout_rate = 0.01;
    c.hidden_layers = 8;
    c.width = 512;
    c.n_atoms = 16;
    return c;
  }

  void validate() const;
  int input_dim() const { return 9; }
  int output_dim() const { return head == Head::Marf ? 4 * n_atoms : 2; }
  int middle_layer() const { return hidden_layers / 2; }
  int last_hidden() const { return hidden_layers - 1; }
  bool is_skip_layer(int i) const { return i == middle_layer() || i == last_hidden(); }
  /// Input width of hidden layer i (skip layers take the input and latent again).
  int layer_input_dim(int i) const;
  int final_input_dim() const { return width + input_dim(); }
};

/// Weights of the hidden stack, the final linear layer and the latent table.
/// Index hidden_layers in `weights`/`biases` is the final linear layer.
struct NetworkParams {
  NetworkConfig config;
  std::vector<ad::Mat> weights;
  std::vector<ad::Mat> biases;
  std::vector<ad::Mat> gains;
  std::vector<ad::Mat> offsets;
  /// latent_dim x n_shapes (empty when unconditioned).
  ad::Mat latents;

  enum class Kind { Weight, Bias, Gain, Offset, Latent };
  struct TensorRef {
    std::string name;
    Kind kind;
    ad::Mat* tensor;
  };
  /// Every trainable tensor in a fixed order (also the checkpoint order).
  std::vector<TensorRef> tensors();
  std::vector<std::pair<std::string, const ad::Mat*>> tensors() const;

  bool all_finite() const;
  std::size_t parameter_count() const;
};

NetworkParams init_params(const NetworkConfig& config, std::uint64_t seed);

/// A MARF whose every ray predicts the given atoms: zero final weights, the
/// atoms in the final bias. Needs a MARF head with n_atoms == atoms.size().
NetworkParams constant_atom_params(const NetworkConfig& config, const std::vector<MedialAtom>& atoms);

/// Ray columns pushed through forward_raw since the last reset.
std::uint64_t forward_ray_count();
void reset_forward_ray_count();

/// Parameters recorded on one tape. `tensors` follows NetworkParams::tensors().
struct BoundParams {
  std::vector<ad::Var> weights, biases, gains, offsets;
  std::optional<ad::Var> latents;
  std::vector<ad::Var> all;
};

BoundParams bind_params(ad::Tape& tape, const NetworkParams& params, bool differentiable);

/// One inverted-dropout mask (0 or 1/(1-p)) per hidden layer, width x N.
using DropoutMasks = std::vector<ad::Mat>;
DropoutMasks sample_dropout(const NetworkConfig& config, Eigen::Index n, CounterRng& rng);

/// Raw network output (output_dim x N) for the 9 x N ray embedding `x`.
/// `latent` is latent_dim x N (or absent when unconditioned).
template <class T>
T forward_raw(const NetworkConfig& config, const BoundParams& p, const T& x, const std::optional<ad::Var>& latent,
              const DropoutMasks* masks);

template <class T>
struct AtomBlock {
  T centers;  // 3n x N
  T radii;    // n x N, already |.|
  T center(int i) const { return ad::rows(centers, 3 * i, 3); }
  T radius(int i) const { return ad::rows(radii, i, 1); }
};

template <class T>
AtomBlock<T> split_atoms(const T& raw, int n_atoms) {
  return {ad::rows(raw, 0, 3 * n_atoms), ad::abs(ad::rows(raw, 3 * n_atoms, n_atoms))};
}

/// Latent block for a batch: the table column of each ray's shape (differentiable in the table).
ad::Var latent_columns(const BoundParams& p, const std::vector<int>& shape_ids);
/// Latent block from explicit vectors (interpolation / rendering).
ad::Var latent_constant(ad::Tape& tape, const Eigen::VectorXd& z, Eigen::Index n);

/// Single-ray evaluation.
std::vector<MedialAtom> forward(const NetworkParams& params, const CanonicalRay& ray,
                                const std::optional<Eigen::VectorXd>& latent = std::nullopt,
                                const DropoutMasks* masks = nullptr);

struct PrifOutput {
  double displacement = 0.0;
  double hit_logit = 0.0;
  /// foot + displacement * q_hat
  Vec3 point = Vec3::Zero();
  bool hit() const { return hit_logit > 0.0; }
};

PrifOutput prif_forward(const NetworkParams& params, const CanonicalRay& ray,
                        const std::optional<Eigen::VectorXd>& latent = std::nullopt);

/// Batched primal evaluation without differentiation: origins/directions 3 x N
/// (directions unit). Returns output_dim x N raw outputs.
ad::Mat predict_raw(const NetworkParams& params, const ad::Mat& origins, const ad::Mat& directions,
                    const std::optional<Eigen::VectorXd>& latent = std::nullopt);

}  // namespace marf

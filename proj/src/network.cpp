#include "marf/network.hpp"

#include <atomic>
#include <cmath>

#include "marf/error.hpp"
#include "marf/ray_batch.hpp"

namespace marf {

using ad::Mat;
using ad::Var;

const char* head_name(Head head) { return head == Head::Marf ? "marf" : "prif"; }

Head parse_head(const std::string& name) {
  if (name == "marf") return Head::Marf;
  if (name == "prif") return Head::Prif;
  throw InvalidInputError("unknown head '" + name + "' (expected marf or prif)");
}

void NetworkConfig::validate() const {
  if (hidden_layers < 2 || hidden_layers % 2 != 0) {
    throw InvalidInputError("hidden_layers must be even and >= 2");
  }
  if (width < 1 || n_atoms < 1) throw InvalidInputError("width and n_atoms must be positive");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw InvalidInputError("dropout_rate must lie in [0, 1)");
  if (latent_dim < 0 || n_shapes < 1) throw InvalidInputError("latent_dim >= 0 and n_shapes >= 1 required");
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw InvalidInputError("leaky_slope must lie in [0, 1)");
}

int NetworkConfig::layer_input_dim(int i) const {
  if (i == 0) return input_dim() + latent_dim;
  return is_skip_layer(i) ? width + input_dim() + latent_dim : width;
}

std::vector<NetworkParams::TensorRef> NetworkParams::tensors() {
  std::vector<TensorRef> out;
  const int k = config.hidden_layers;
  for (int i = 0; i < k; ++i) {
    const auto s = std::to_string(i);
    out.push_back({"layer" + s + ".weight", Kind::Weight, &weights[static_cast<std::size_t>(i)]});
    out.push_back({"layer" + s + ".bias", Kind::Bias, &biases[static_cast<std::size_t>(i)]});
    out.push_back({"layer" + s + ".norm_gain", Kind::Gain, &gains[static_cast<std::size_t>(i)]});
    out.push_back({"layer" + s + ".norm_offset", Kind::Offset, &offsets[static_cast<std::size_t>(i)]});
  }
  out.push_back({"final.weight", Kind::Weight, &weights[static_cast<std::size_t>(k)]});
  out.push_back({"final.bias", Kind::Bias, &biases[static_cast<std::size_t>(k)]});
  if (config.latent_dim > 0) out.push_back({"latents", Kind::Latent, &latents});
  return out;
}

std::vector<std::pair<std::string, const Mat*>> NetworkParams::tensors() const {
  std::vector<std::pair<std::string, const Mat*>> out;
  for (auto& t : const_cast<NetworkParams*>(this)->tensors()) out.emplace_back(t.name, t.tensor);
  return out;
}

bool NetworkParams::all_finite() const {
  for (const auto& [name, m] : tensors()) {
    if (!m->allFinite()) return false;
  }
  return true;
}

std::size_t NetworkParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, m] : tensors()) n += static_cast<std::size_t>(m->size());
  return n;
}

namespace {

Mat uniform_mat(Eigen::Index r, Eigen::Index c, double bound, CounterRng& rng) {
  Mat m(r, c);
  for (Eigen::Index j = 0; j < c; ++j) {
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = rng.uniform(-bound, bound);
  }
  return m;
}

}  // namespace

NetworkParams init_params(const NetworkConfig& config, std::uint64_t seed) {
  config.validate();
  NetworkParams p;
  p.config = config;
  CounterRng rng(seed, /*stream=*/1);

  // He-uniform for leaky rectifiers; biases as the usual 1/sqrt(fan_in) uniform.
  const double gain = std::sqrt(2.0 / (1.0 + config.leaky_slope * config.leaky_slope));
  auto add_linear = [&](int out, int in) {
    const double fan_in = static_cast<double>(in);
    p.weights.push_back(uniform_mat(out, in, gain * std::sqrt(3.0 / fan_in), rng));
    p.biases.push_back(uniform_mat(out, 1, 1.0 / std::sqrt(fan_in), rng));
  };
  for (int i = 0; i < config.hidden_layers; ++i) {
    add_linear(config.width, config.layer_input_dim(i));
    p.gains.push_back(Mat::Ones(config.width, 1));
    p.offsets.push_back(Mat::Zero(config.width, 1));
  }
  add_linear(config.output_dim(), config.final_input_dim());

  if (config.head == Head::Marf && config.medial_init) {
    const int n = config.n_atoms;
    p.weights.back() *= 0.05;
    Mat& b = p.biases.back();
    for (int i = 0; i < n; ++i) {
      Vec3 d;
      do {
        d = Vec3(rng.normal(), rng.normal(), rng.normal());
      } while (d.norm() < 1e-12);
      b.middleRows(3 * i, 3) = 0.6 * d.normalized();
      b(3 * n + i, 0) = 0.1;
    }
  }

  if (config.latent_dim > 0) {
    p.latents.resize(config.latent_dim, config.n_shapes);
    for (Eigen::Index j = 0; j < p.latents.cols(); ++j) {
      for (Eigen::Index i = 0; i < p.latents.rows(); ++i) p.latents(i, j) = 0.01 * rng.normal();
    }
  }
  return p;
}

BoundParams bind_params(ad::Tape& tape, const NetworkParams& params, bool differentiable) {
  auto put = [&](const Mat& m) { return differentiable ? tape.leaf(m) : tape.constant(m); };
  BoundParams b;
  const int k = params.config.hidden_layers;
  for (int i = 0; i < k; ++i) {
    b.weights.push_back(put(params.weights[static_cast<std::size_t>(i)]));
    b.biases.push_back(put(params.biases[static_cast<std::size_t>(i)]));
    b.gains.push_back(put(params.gains[static_cast<std::size_t>(i)]));
    b.offsets.push_back(put(params.offsets[static_cast<std::size_t>(i)]));
    b.all.insert(b.all.end(), {b.weights.back(), b.biases.back(), b.gains.back(), b.offsets.back()});
  }
  b.weights.push_back(put(params.weights[static_cast<std::size_t>(k)]));
  b.biases.push_back(put(params.biases[static_cast<std::size_t>(k)]));
  b.all.insert(b.all.end(), {b.weights.back(), b.biases.back()});
  if (params.config.latent_dim > 0) {
    b.latents = put(params.latents);
    b.all.push_back(*b.latents);
  }
  return b;
}

DropoutMasks sample_dropout(const NetworkConfig& config, Eigen::Index n, CounterRng& rng) {
  DropoutMasks masks;
  const double p = config.dropout_rate;
  const double keep = 1.0 / (1.0 - p);
  for (int i = 0; i < config.hidden_layers; ++i) {
    Mat m(config.width, n);
    for (Eigen::Index j = 0; j < m.size(); ++j) m.data()[j] = rng.uniform() < p ? 0.0 : keep;
    masks.push_back(std::move(m));
  }
  return masks;
}

namespace {
std::atomic<std::uint64_t> g_forward_rays{0};
}  // namespace

std::uint64_t forward_ray_count() { return g_forward_rays.load(); }
void reset_forward_ray_count() { g_forward_rays.store(0); }

NetworkParams constant_atom_params(const NetworkConfig& config, const std::vector<MedialAtom>& atoms) {
  if (config.head != Head::Marf) throw InvalidInputError("constant atoms need a MARF head");
  if (static_cast<int>(atoms.size()) != config.n_atoms) throw InvalidInputError("atom count must equal n_atoms");
  NetworkParams p = init_params(config, 0);
  const auto k = static_cast<std::size_t>(config.hidden_layers);
  p.weights[k].setZero();
  const int n = config.n_atoms;
  for (int i = 0; i < n; ++i) {
    const MedialAtom& a = atoms[static_cast<std::size_t>(i)];
    p.biases[k].block(3 * i, 0, 3, 1) = a.center;
    p.biases[k](3 * n + i, 0) = a.radius;
  }
  return p;
}

template <class T>
T forward_raw(const NetworkConfig& config, const BoundParams& p, const T& x, const std::optional<Var>& latent,
              const DropoutMasks* masks) {
  g_forward_rays.fetch_add(static_cast<std::uint64_t>(x.cols()), std::memory_order_relaxed);
  if (x.rows() != config.input_dim()) throw InvalidInputError("ray embedding must have 9 rows");
  if ((config.latent_dim > 0) != latent.has_value()) {
    throw InvalidInputError("latent must be given exactly when latent_dim > 0");
  }
  if (latent && (latent->rows() != config.latent_dim || latent->cols() != x.cols())) {
    throw InvalidInputError("latent block shape mismatch");
  }
  if (masks && static_cast<int>(masks->size()) != config.hidden_layers) {
    throw InvalidInputError("one dropout mask per hidden layer required");
  }

  T conditioned = x;
  if (latent) conditioned = ad::concat_rows({x, ad::lift_as<T>(*latent, x)});

  T h = conditioned;
  for (int i = 0; i < config.hidden_layers; ++i) {
    const auto s = static_cast<std::size_t>(i);
    if (i > 0 && config.is_skip_layer(i)) h = ad::concat_rows({h, conditioned});
    T z = ad::matmul(p.weights[s], h) + p.biases[s];
    z = ad::layer_norm(z, p.gains[s], p.offsets[s]);
    z = ad::leaky_relu(z, config.leaky_slope);
    if (masks) z = ad::mask_mul(z, (*masks)[s]);
    h = z;
  }
  const auto k = static_cast<std::size_t>(config.hidden_layers);
  return ad::matmul(p.weights[k], ad::concat_rows({h, x})) + p.biases[k];
}

template Var forward_raw<Var>(const NetworkConfig&, const BoundParams&, const Var&, const std::optional<Var>&,
                              const DropoutMasks*);
template ad::Dual forward_raw<ad::Dual>(const NetworkConfig&, const BoundParams&, const ad::Dual&,
                                        const std::optional<Var>&, const DropoutMasks*);

Var latent_columns(const BoundParams& p, const std::vector<int>& shape_ids) {
  if (!p.latents) throw InvalidInputError("network has no latent table");
  const Var& table = *p.latents;
  Mat onehot = Mat::Zero(table.cols(), static_cast<Eigen::Index>(shape_ids.size()));
  for (std::size_t j = 0; j < shape_ids.size(); ++j) {
    if (shape_ids[j] < 0 || shape_ids[j] >= table.cols()) throw InvalidInputError("shape id out of range");
    onehot(shape_ids[j], static_cast<Eigen::Index>(j)) = 1.0;
  }
  return ad::matmul(table, table.tape()->constant(std::move(onehot)));
}

Var latent_constant(ad::Tape& tape, const Eigen::VectorXd& z, Eigen::Index n) {
  return tape.constant(z.replicate(1, n));
}

namespace {

std::optional<Var> bind_latent(ad::Tape& tape, const NetworkParams& params,
                               const std::optional<Eigen::VectorXd>& latent, Eigen::Index n) {
  if (params.config.latent_dim == 0) {
    if (latent) throw InvalidInputError("unconditioned network given a latent");
    return std::nullopt;
  }
  if (!latent) throw InvalidInputError("conditioned network needs a latent");
  if (latent->size() != params.config.latent_dim) throw InvalidInputError("latent dimension mismatch");
  return latent_constant(tape, *latent, n);
}

Mat raw_single(const NetworkParams& params, const CanonicalRay& ray, const std::optional<Eigen::VectorXd>& latent,
               const DropoutMasks* masks) {
  ad::Tape tape;
  const BoundParams p = bind_params(tape, params, false);
  const Var x = tape.constant(ray.embedding());
  return forward_raw(params.config, p, x, bind_latent(tape, params, latent, 1), masks).value();
}

}  // namespace

std::vector<MedialAtom> forward(const NetworkParams& params, const CanonicalRay& ray,
                                const std::optional<Eigen::VectorXd>& latent, const DropoutMasks* masks) {
  if (params.config.head != Head::Marf) throw InvalidInputError("forward() needs a MARF head");
  const Mat raw = raw_single(params, ray, latent, masks);
  const int n = params.config.n_atoms;
  std::vector<MedialAtom> atoms(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    atoms[static_cast<std::size_t>(i)].center = raw.block(3 * i, 0, 3, 1);
    atoms[static_cast<std::size_t>(i)].radius = std::abs(raw(3 * n + i, 0));
  }
  return atoms;
}

PrifOutput prif_forward(const NetworkParams& params, const CanonicalRay& ray,
                        const std::optional<Eigen::VectorXd>& latent) {
  if (params.config.head != Head::Prif) throw InvalidInputError("prif_forward() needs a PRIF head");
  const Mat raw = raw_single(params, ray, latent, nullptr);
  PrifOutput out;
  out.displacement = raw(0, 0);
  out.hit_logit = raw(1, 0);
  out.point = ray.foot + out.displacement * ray.q_hat;
  return out;
}

Mat predict_raw(const NetworkParams& params, const Mat& origins, const Mat& directions,
                const std::optional<Eigen::VectorXd>& latent) {
  constexpr Eigen::Index kChunk = 4096;
  const Eigen::Index n = origins.cols();
  Mat out(params.config.output_dim(), n);
  for (Eigen::Index start = 0; start < n; start += kChunk) {
    const Eigen::Index m = std::min(kChunk, n - start);
    ad::Tape tape;
    const BoundParams p = bind_params(tape, params, false);
    const Var x = embed_rays(tape.constant(origins.middleCols(start, m)), tape.constant(directions.middleCols(start, m)));
    out.middleCols(start, m) = forward_raw(params.config, p, x, bind_latent(tape, params, latent, m), nullptr).value();
  }
  return out;
}

}  // namespace marf

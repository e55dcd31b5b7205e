#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "marf/dataset.hpp"
#include "marf/losses.hpp"
#include "marf/network.hpp"

namespace marf {

struct TrainConfig {
  int epochs = 200;
  int warmup_steps = 100;
  double peak_lr = 5e-4;
  int hold_epochs = 30;
  double final_lr = 1e-4;
  int decay_epochs = 170;
  double weight_decay = 5e-6;
  double grad_clip_norm = 1.0;
  int batch_size = 8;
  std::uint64_t seed = 0;
  /// Loss-weight schedules are evaluated at epoch * schedule_time_scale, so a
  /// shorter run still traverses the full ease-in curves.
  double schedule_time_scale = 1.0;

  static TrainConfig paper() { return {}; }
  /// 40 epochs with the hold/decay split and the loss schedules compressed 5x.
  static TrainConfig desk();

  /// Throws InvalidInputError unless hold + decay = epochs and all rates are positive.
  void validate() const;
};

/// Linear warmup over the first warmup_steps optimizer steps, then held at the
/// peak until hold_epochs, then cosine to final_lr over decay_epochs.
double lr_at(std::int64_t step, double epoch, const TrainConfig& config);

/// Scales `grads` in place so that their joint Frobenius norm is at most
/// `max_norm`; returns the norm before clipping.
double clip_global_norm(std::vector<ad::Mat>& grads, double max_norm);

struct AdamState {
  std::vector<ad::Mat> m, v;
  std::int64_t t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

/// One Adam step with decoupled weight decay on the `decay` tensors only.
void adam_update(std::vector<ad::Mat*>& params, const std::vector<ad::Mat>& grads, const std::vector<bool>& decay,
                 AdamState& state, double lr, double weight_decay);

struct TrainSetup {
  NetworkConfig network;
  TrainConfig train;
  LossSchedule schedule;
  LossOptions loss;
  PrifLossWeights prif;
};

struct TrainState {
  TrainSetup setup;
  NetworkParams params;
  AdamState adam;
  int epoch = 0;  // completed epochs
  std::int64_t step = 0;
};

/// Fresh parameters (seeded from train.seed) and zero optimizer moments.
TrainState init_train_state(const TrainSetup& setup);

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double total = 0.0;
  LossBreakdown marf;         // means over the epoch's batches
  PrifLossBreakdown prif;
  double grad_norm = 0.0;     // mean pre-clip norm
  int degenerate_normals = 0;
  int batches = 0;
  double wall_seconds = 0.0;
};

struct EpochOptions {
  /// Directory for the diagnostic dump written before a NumericalError.
  std::string dump_dir = ".";
};

/// One pass over the shuffled sub-images. Throws NumericalError on a
/// non-finite loss or gradient after writing `nonfinite_dump.json`.
EpochStats train_epoch(TrainState& state, const TrainingItems& data, const EpochOptions& opts = {});

/// One optimizer step on an explicit list of items at the current schedule.
EpochStats train_step(TrainState& state, const TrainingItems& data, const std::vector<int>& batch,
                      const EpochOptions& opts = {});

/// Bit-exact round trip of every field. Throws FormatError on a bad file.
void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path);

/// Metrics CSV: one row per epoch, every loss term, weights, lr. Values are
/// printed round-trip exact so reruns can be compared byte for byte. Wall
/// times go to a separate `<path>.timing.csv`.
class MetricsLog {
 public:
  MetricsLog() = default;
  /// Appends when `append` and the file exists; otherwise writes a header.
  MetricsLog(const std::string& path, Head head, bool append);
  void write(const EpochStats& stats);

 private:
  std::string path_;
  Head head_ = Head::Marf;
};

struct TrainRunOptions {
  std::string checkpoint_path;  // empty: no checkpoints
  std::string metrics_path;     // empty: no CSV
  int checkpoint_every = 1;
  /// Stop (with a checkpoint) once this many epochs are complete; -1 runs to the end.
  int stop_epoch = -1;
  EpochOptions epoch;
  /// Called after every epoch (progress output).
  std::function<void(const EpochStats&)> on_epoch;
};

/// Trains until state.epoch == train.epochs; resumes transparently from a
/// loaded state. Returns the per-epoch stats of this call.
std::vector<EpochStats> train(TrainState& state, const TrainingItems& data, const TrainRunOptions& opts = {});

}  // namespace marf

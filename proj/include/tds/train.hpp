#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "tds/data.hpp"
#include "tds/network.hpp"
#include "tds/tensor.hpp"

namespace tds {

struct TrainConfig {
  double base_lr = 1e-3;
  double weight_decay = 0.15;
  double beta1 = 0.9, beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs = 30;
  int warmup_epochs = 4;
  int batch_size = 8;
  std::uint64_t seed = 1024;
  double flip_prob = 0.5;
  bool jitter_sampling = false;
  int threads = 0;             // 0 = hardware concurrency
  bool cache_frozen = true;    // reuse frozen features per (clip, flip, indices)
  double stop_train_top1 = -1.0;  // early stop once both thresholds hold (if >= 0)
  double stop_val_top1 = -1.0;
  std::string checkpoint_path;    // written each epoch when non-empty

  void validate() const;
};

// Optimizer state, one slot per parameter in registration order.
struct AdamState {
  std::vector<std::vector<double>> m, v;
  long step = 0;
};

AdamState make_adam_state(const std::vector<Tensor>& params);

// Decoupled weight decay, then the bias-corrected Adam update. Parameters
// missing from the gradient map are treated as zero-gradient.
void adamw_step(std::vector<Tensor>& params, const GradientMap& grads, AdamState& state,
                double lr, double weight_decay, double beta1, double beta2, double eps = 1e-8);

// Linear warmup to base_lr, then cosine decay to zero.
double lr_at(long step, long total_steps, long warmup_steps, double base_lr);

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;
  double top1 = 0.0, top5 = 0.0;          // train split
  double val_top1 = 0.0, val_top5 = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct Metrics {
  std::vector<EpochStats> epochs;
  std::int64_t trainable_params = 0;
  std::int64_t frozen_params = 0;
  double total_seconds = 0.0;
  bool stopped_early = false;

  // One JSON object per epoch; timing excluded in canonical form so the
  // determinism contract is byte-comparable.
  std::string to_jsonl(bool include_time = true) const;
};

struct EvalResult {
  double top1 = 0.0, top5 = 0.0;
  double mean_loss = 0.0;
  int count = 0;
};

EvalResult evaluate(const TdsModel& model, const std::vector<VideoClip>& clips,
                    double smoothing = 0.0, int threads = 0);

Metrics train(TdsModel& model, const TrainConfig& cfg, const std::vector<VideoClip>& train_clips,
              const std::vector<VideoClip>& val_clips, const DatasetSpec& spec,
              std::ostream* metrics_stream = nullptr);

}  // namespace tds

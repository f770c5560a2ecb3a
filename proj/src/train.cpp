#include "tds/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <future>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "tds/checkpoint.hpp"
#include "tds/ops.hpp"
#include "tds/rng.hpp"

namespace tds {

void TrainConfig::validate() const {
  if (base_lr < 0.0) throw std::invalid_argument("train: base_lr must be >= 0");
  if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs >= epochs) {
    throw std::invalid_argument("train: need 0 <= warmup_epochs < epochs");
  }
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (flip_prob < 0.0 || flip_prob > 1.0) throw std::invalid_argument("train: bad flip_prob");
}

AdamState make_adam_state(const std::vector<Tensor>& params) {
  AdamState state;
  state.m.reserve(params.size());
  state.v.reserve(params.size());
  for (const Tensor& p : params) {
    state.m.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    state.v.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
  }
  return state;
}

void adamw_step(std::vector<Tensor>& params, const GradientMap& grads, AdamState& state,
                double lr, double weight_decay, double beta1, double beta2, double eps) {
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("adamw: state has " + std::to_string(state.m.size()) +
                                " slots for " + std::to_string(params.size()) + " parameters");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    auto& data = p.mutable_values();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != data.size()) {
      throw std::invalid_argument("adamw: state shape mismatch on parameter " +
                                  std::to_string(i));
    }
    const Tensor* g = grads.contains(p) ? &grads.at(p) : nullptr;
    if (g && g->numel() != p.numel()) {
      throw std::invalid_argument("adamw: gradient shape mismatch on parameter " +
                                  std::to_string(i));
    }
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double grad = g ? g->values()[j] : 0.0;
      data[j] -= lr * weight_decay * data[j];  // decoupled decay on the pre-update value
      m[j] = beta1 * m[j] + (1.0 - beta1) * grad;
      v[j] = beta2 * v[j] + (1.0 - beta2) * grad * grad;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      data[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

double lr_at(long step, long total_steps, long warmup_steps, double base_lr) {
  if (total_steps <= warmup_steps) {
    throw std::invalid_argument("lr_at: total_steps must exceed warmup_steps");
  }
  if (step < 0) step = 0;
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (step >= total_steps) return 0.0;
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

namespace {

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

struct ClipOutcome {
  double loss = 0.0;
  bool top1 = false, top5 = false;
  GradientMap grads;
};

bool in_topk(const std::vector<double>& logits, int label, int k) {
  const double target = logits[static_cast<std::size_t>(label)];
  int better = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits[i] > target ||
        (logits[i] == target && static_cast<int>(i) < label)) {
      ++better;
    }
  }
  return better < k;
}

// Frozen features keyed by (clip index, flip, sample indices); values are
// identical no matter which thread computes them.
class FrozenCache {
 public:
  std::vector<Tensor> get(const TdsModel& model, const Tensor& video, int clip_index, bool flip,
                          const std::vector<int>& indices) {
    std::ostringstream key;
    key << clip_index << '|' << flip;
    for (int i : indices) key << ',' << i;
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = map_.find(key.str());
      if (it != map_.end()) return it->second;
    }
    std::vector<Tensor> feats;
    {
      NoGradGuard no_grad;
      feats = compute_frozen_features(model, video, indices);
    }
    std::lock_guard<std::mutex> lock(mu_);
    return map_.emplace(key.str(), std::move(feats)).first->second;
  }

 private:
  std::mutex mu_;
  std::map<std::string, std::vector<Tensor>> map_;
};

}  // namespace

EvalResult evaluate(const TdsModel& model, const std::vector<VideoClip>& clips, double smoothing,
                    int threads) {
  if (clips.empty()) throw std::invalid_argument("evaluate: empty dataset");
  const int k = std::min(5, model.cfg.classes);
  const int nthreads = std::min<int>(resolve_threads(threads), static_cast<int>(clips.size()));

  auto eval_clip = [&](const VideoClip& clip) {
    NoGradGuard no_grad;
    Tensor logits = network_forward(model, clip.frames);
    ClipOutcome out;
    out.loss = ops::cross_entropy_ls(logits, clip.label, smoothing).item();
    out.top1 = in_topk(logits.values(), clip.label, 1);
    out.top5 = in_topk(logits.values(), clip.label, k);
    return out;
  };

  EvalResult result;
  result.count = static_cast<int>(clips.size());
  std::vector<ClipOutcome> outcomes(clips.size());
  if (nthreads <= 1) {
    for (std::size_t i = 0; i < clips.size(); ++i) outcomes[i] = eval_clip(clips[i]);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    for (int w = 0; w < nthreads; ++w) {
      workers.emplace_back([&]() {
        while (true) {
          const std::size_t i = next.fetch_add(1);
          if (i >= clips.size()) break;
          outcomes[i] = eval_clip(clips[i]);
        }
      });
    }
    for (auto& w : workers) w.join();
  }
  for (const ClipOutcome& o : outcomes) {
    result.mean_loss += o.loss;
    result.top1 += o.top1 ? 1.0 : 0.0;
    result.top5 += o.top5 ? 1.0 : 0.0;
  }
  result.mean_loss /= static_cast<double>(clips.size());
  result.top1 *= 100.0 / static_cast<double>(clips.size());
  result.top5 *= 100.0 / static_cast<double>(clips.size());
  return result;
}

std::string Metrics::to_jsonl(bool include_time) const {
  std::ostringstream os;
  os.precision(17);
  for (const EpochStats& e : epochs) {
    os << "{\"epoch\":" << e.epoch << ",\"loss\":" << e.loss << ",\"top1\":" << e.top1
       << ",\"top5\":" << e.top5 << ",\"val_top1\":" << e.val_top1
       << ",\"val_top5\":" << e.val_top5 << ",\"lr\":" << e.lr;
    if (include_time) os << ",\"seconds\":" << e.seconds;
    os << "}\n";
  }
  return os.str();
}

Metrics train(TdsModel& model, const TrainConfig& cfg, const std::vector<VideoClip>& train_clips,
              const std::vector<VideoClip>& val_clips, const DatasetSpec& spec,
              std::ostream* metrics_stream) {
  cfg.validate();
  if (train_clips.empty()) throw std::invalid_argument("train: empty dataset");
  const bool spatial_sme = model.has_spatial_sme;
  const bool use_cache = cfg.cache_frozen && !spatial_sme && !cfg.jitter_sampling;

  std::vector<Tensor> trainable = model.params.trainable();
  AdamState state = make_adam_state(trainable);

  const std::uint64_t frozen_before = model.params.checksum_frozen();
  const long steps_per_epoch =
      (static_cast<long>(train_clips.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const long total_steps = steps_per_epoch * cfg.epochs;
  const long warmup_steps = steps_per_epoch * cfg.warmup_epochs;
  if (total_steps <= warmup_steps) throw std::invalid_argument("train: schedule has no decay");

  const int t_raw = train_clips.front().frames.dim(1);
  const int nthreads = std::min<int>(resolve_threads(cfg.threads), cfg.batch_size);

  Metrics metrics;
  metrics.trainable_params = model.params.trainable_count();
  metrics.frozen_params = model.params.frozen_count();

  FrozenCache cache;
  std::mt19937_64 shuffle_gen(mix_seed(cfg.seed, 0x5467FFull));
  std::vector<std::size_t> order(train_clips.size());
  std::iota(order.begin(), order.end(), 0);

  const auto run_start = std::chrono::steady_clock::now();
  long global_step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_gen);

    double loss_sum = 0.0;
    long hit1 = 0, hit5 = 0;
    double last_lr = 0.0;

    for (std::size_t pos = 0; pos < order.size(); pos += cfg.batch_size) {
      const std::size_t batch_end = std::min(order.size(), pos + cfg.batch_size);
      const std::size_t batch_n = batch_end - pos;

      auto run_clip = [&](std::size_t slot) {
        const std::size_t clip_idx = order[pos + slot];
        const VideoClip& base = train_clips[clip_idx];
        const bool flip =
            cfg.flip_prob > 0.0 &&
            (static_cast<double>(mix_seed(cfg.seed, epoch, clip_idx, 0xF11Bull) >> 11) *
             0x1.0p-53) < cfg.flip_prob;
        const std::vector<int> indices =
            sparse_sample(t_raw, model.cfg.frames, cfg.jitter_sampling,
                          mix_seed(cfg.seed, epoch, clip_idx, 0x5A3Dull));
        VideoClip clip = flip ? hflip_clip(base, spec) : base;

        std::vector<Tensor> feats;
        const std::vector<Tensor>* feats_ptr = nullptr;
        if (use_cache) {
          feats = cache.get(model, clip.frames, static_cast<int>(clip_idx), flip, indices);
          feats_ptr = &feats;
        }
        Tensor logits = network_forward(model, clip.frames, indices, feats_ptr, nullptr);
        Tensor loss =
            ops::cross_entropy_ls(logits, clip.label, model.cfg.label_smoothing);
        ClipOutcome out;
        out.loss = loss.item();
        out.top1 = in_topk(logits.values(), clip.label, 1);
        out.top5 = in_topk(logits.values(), clip.label, std::min(5, model.cfg.classes));
        out.grads = backward(loss);
        return out;
      };

      std::vector<ClipOutcome> outcomes(batch_n);
      if (nthreads <= 1 || batch_n == 1) {
        for (std::size_t s = 0; s < batch_n; ++s) outcomes[s] = run_clip(s);
      } else {
        std::vector<std::future<ClipOutcome>> futures;
        futures.reserve(batch_n);
        for (std::size_t s = 0; s < batch_n; ++s) {
          futures.push_back(std::async(std::launch::async, run_clip, s));
        }
        for (std::size_t s = 0; s < batch_n; ++s) outcomes[s] = futures[s].get();
      }

      // Mean gradient over the batch, accumulated in slot order.
      GradientMap mean_grads;
      for (std::size_t pi = 0; pi < trainable.size(); ++pi) {
        const Tensor& p = trainable[pi];
        std::vector<double> acc(static_cast<std::size_t>(p.numel()), 0.0);
        bool any = false;
        for (const ClipOutcome& o : outcomes) {
          if (!o.grads.contains(p)) continue;
          any = true;
          const auto& g = o.grads.at(p).values();
          for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += g[j];
        }
        if (!any) continue;
        const double inv = 1.0 / static_cast<double>(batch_n);
        for (double& v : acc) v *= inv;
        mean_grads.grads.emplace(p.id(), Tensor::from_data(p.shape(), std::move(acc)));
      }

      for (const ClipOutcome& o : outcomes) {
        if (!std::isfinite(o.loss)) {
          throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   " step " + std::to_string(global_step));
        }
        loss_sum += o.loss;
        hit1 += o.top1 ? 1 : 0;
        hit5 += o.top5 ? 1 : 0;
      }

      last_lr = lr_at(global_step, total_steps, warmup_steps, cfg.base_lr);
      adamw_step(trainable, mean_grads, state, last_lr, cfg.weight_decay, cfg.beta1, cfg.beta2,
                 cfg.adam_eps);
      ++global_step;
    }

    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.loss = loss_sum / static_cast<double>(train_clips.size());
    stats.top1 = 100.0 * static_cast<double>(hit1) / static_cast<double>(train_clips.size());
    stats.top5 = 100.0 * static_cast<double>(hit5) / static_cast<double>(train_clips.size());
    stats.lr = last_lr;
    if (!val_clips.empty()) {
      EvalResult val = evaluate(model, val_clips, 0.0, cfg.threads);
      stats.val_top1 = val.top1;
      stats.val_top5 = val.top5;
    }
    stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start)
                        .count();
    metrics.epochs.push_back(stats);

    if (metrics_stream) {
      std::ostringstream os;
      os.precision(17);
      os << "{\"epoch\":" << stats.epoch << ",\"loss\":" << stats.loss
         << ",\"top1\":" << stats.top1 << ",\"top5\":" << stats.top5
         << ",\"val_top1\":" << stats.val_top1 << ",\"val_top5\":" << stats.val_top5
         << ",\"lr\":" << stats.lr << ",\"seconds\":" << stats.seconds << "}\n";
      (*metrics_stream) << os.str() << std::flush;
    }

    if (!cfg.checkpoint_path.empty()) save_checkpoint(cfg.checkpoint_path, model.params);

    const bool train_ok = cfg.stop_train_top1 < 0.0 || stats.top1 >= cfg.stop_train_top1;
    const bool val_ok = cfg.stop_val_top1 < 0.0 || stats.val_top1 >= cfg.stop_val_top1;
    if ((cfg.stop_train_top1 >= 0.0 || cfg.stop_val_top1 >= 0.0) && train_ok && val_ok) {
      metrics.stopped_early = true;
      break;
    }
  }

  metrics.total_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - run_start).count();

  if (model.params.checksum_frozen() != frozen_before) {
    throw std::runtime_error("train: frozen parameters changed during training");
  }
  return metrics;
}

}  // namespace tds

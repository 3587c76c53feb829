#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmseg/data.hpp"
#include "mmseg/evaluation.hpp"
#include "mmseg/model.hpp"
#include "mmseg/numerics.hpp"

namespace mmseg {

struct OhemConfig {
  double prob_threshold = 0.7;
  std::size_t divisor = 16;
  std::uint8_t ignore_label = kIgnoreLabel;
};

/// Cross-entropy averaged over the hardest pixels.
///
/// Valid pixels are ranked by CE (ties by pixel index). The kept count is
/// max(#{p_correct < p_th}, floor(n_total/divisor)) clipped to [1, n_total],
/// and the loss is their CE sum divided by that count. When every pixel is
/// ignored the loss is 0 and `all_ignored` is set.
template <typename T>
Tensor<T> ohem_cross_entropy(const Tensor<T>& logits, std::span<const std::uint8_t> labels,
                             const OhemConfig& cfg = {}, bool* all_ignored = nullptr) {
  if (logits.rank() != 3) throw DimensionError("ohem: logits must be [C×H×W], got " + shape_str(logits.shape()));
  const std::size_t c = logits.dim(0), hw = logits.dim(1) * logits.dim(2);
  if (labels.size() != hw) {
    throw DimensionError("ohem: " + std::to_string(labels.size()) + " labels for " + std::to_string(hw) + " pixels");
  }
  if (!(cfg.prob_threshold > 0.0 && cfg.prob_threshold <= 1.0)) throw ArgumentError("ohem: p_th must be in (0, 1]");
  if (cfg.divisor == 0) throw ArgumentError("ohem: divisor must be positive");
  const auto x = logits.data();
  std::vector<std::size_t> valid;
  std::vector<T> ce(hw, T(0));
  for (std::size_t p = 0; p < hw; ++p) {
    const std::uint8_t y = labels[p];
    if (y == cfg.ignore_label) continue;
    if (y >= c) throw ArgumentError("ohem: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    T mx = x[p];
    for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, x[k * hw + p]);
    T s = T(0);
    for (std::size_t k = 0; k < c; ++k) s += std::exp(x[k * hw + p] - mx);
    ce[p] = mx + std::log(s) - x[y * hw + p];
    valid.push_back(p);
  }
  if (all_ignored) *all_ignored = valid.empty();
  if (valid.empty()) {
    return Tensor<T>::from_op({1}, {T(0)}, {logits}, [](std::span<const T>) {});
  }
  const std::size_t n_total = valid.size();
  std::size_t n_hard = 0;
  for (std::size_t p : valid) {
    if (std::exp(-static_cast<double>(ce[p])) < cfg.prob_threshold) ++n_hard;
  }
  const std::size_t n_keep = std::clamp<std::size_t>(std::max(n_hard, n_total / cfg.divisor), 1, n_total);
  std::stable_sort(valid.begin(), valid.end(), [&](std::size_t a, std::size_t b) { return ce[a] > ce[b]; });
  valid.resize(n_keep);
  T total = T(0);
  for (std::size_t p : valid) total += ce[p];
  const T inv = T(1) / static_cast<T>(n_keep);
  std::vector<std::uint8_t> kept_labels;
  for (std::size_t p : valid) kept_labels.push_back(labels[p]);
  return Tensor<T>::from_op({1}, {total * inv}, {logits},
                            [logits, valid = std::move(valid), kept_labels = std::move(kept_labels), c, hw,
                             inv](std::span<const T> g) {
                              auto* sink = logits.grad_sink();
                              if (!sink) return;
                              const auto x = logits.data();
                              const T scale = g[0] * inv;
                              for (std::size_t j = 0; j < valid.size(); ++j) {
                                const std::size_t p = valid[j];
                                T mx = x[p];
                                for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, x[k * hw + p]);
                                T s = T(0);
                                for (std::size_t k = 0; k < c; ++k) s += std::exp(x[k * hw + p] - mx);
                                for (std::size_t k = 0; k < c; ++k) {
                                  const T prob = std::exp(x[k * hw + p] - mx) / s;
                                  (*sink)[k * hw + p] += scale * (prob - (k == kept_labels[j] ? T(1) : T(0)));
                                }
                              }
                            });
}

template <typename T>
struct LossTerms {
  Tensor<T> total;
  Tensor<T> s0;  // OHEM loss of pathway 1
  Tensor<T> s1;  // OHEM loss of pathway 2
  bool all_ignored = false;
};

/// w0·L(up(s0)) + w1·L(up(s1)) with both heads upsampled to the label grid.
template <typename T>
LossTerms<T> total_loss(const DualLogits<T>& dual, const LabelMap& labels, double w0, double w1,
                        const OhemConfig& cfg = {}) {
  if (w0 < 0.0 || w1 < 0.0) throw ArgumentError("total_loss: loss weights must be non-negative");
  if (w0 == 0.0 && w1 == 0.0) throw ArgumentError("total_loss: both loss weights are zero");
  LossTerms<T> out;
  bool ignored0 = false, ignored1 = false;
  out.s0 = ohem_cross_entropy(upsample_bilinear(dual.s0, labels.height, labels.width),
                              std::span<const std::uint8_t>(labels.ids), cfg, &ignored0);
  out.s1 = ohem_cross_entropy(upsample_bilinear(dual.s1, labels.height, labels.width),
                              std::span<const std::uint8_t>(labels.ids), cfg, &ignored1);
  out.all_ignored = ignored0 && ignored1;
  out.total = add(scale(out.s0, static_cast<T>(w0)), scale(out.s1, static_cast<T>(w1)));
  return out;
}

// ---------------------------------------------------------------------------
// Optimisation

struct AdamWConfig {
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with decoupled weight decay. Only trainable parameters get moment
/// buffers; frozen ones are never touched.
template <typename T>
class AdamW {
 public:
  struct Moments {
    std::vector<double> m, v;
  };

  AdamW(ParameterStore<T>& store, AdamWConfig config) : store_(store), config_(config) {
    if (config.beta1 < 0 || config.beta1 >= 1 || config.beta2 < 0 || config.beta2 >= 1) {
      throw ArgumentError("adamw: betas must be in [0, 1)");
    }
    if (config.weight_decay < 0 || config.eps <= 0) throw ArgumentError("adamw: bad weight decay or epsilon");
    for (const auto& p : store_.all()) {
      if (!p.frozen) state_[p.name] = {std::vector<double>(p.value.numel(), 0.0), std::vector<double>(p.value.numel(), 0.0)};
    }
  }

  /// One update at learning rate `lr`. Parameters without a gradient count
  /// as having a zero gradient. Rejects the whole step, before touching any
  /// parameter, if a gradient is non-finite.
  void step(double lr) {
    for (const auto& p : store_.all()) {
      if (p.frozen || !p.value.has_grad()) continue;
      for (T g : p.value.grad()) {
        if (!std::isfinite(static_cast<double>(g))) {
          throw NumericError("adamw: non-finite gradient in '" + p.name + "'; step rejected");
        }
      }
    }
    ++steps_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    const double decay = 1.0 - lr * config_.weight_decay;
    for (auto& p : store_.all()) {
      if (p.frozen) continue;
      auto& st = state_.at(p.name);
      const bool has = p.value.has_grad();
      const auto grad = has ? p.value.grad() : std::span<const T>();
      auto values = p.value.mutable_data();
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double g = has ? static_cast<double>(grad[i]) : 0.0;
        st.m[i] = config_.beta1 * st.m[i] + (1.0 - config_.beta1) * g;
        st.v[i] = config_.beta2 * st.v[i] + (1.0 - config_.beta2) * g * g;
        const double m_hat = st.m[i] / bc1, v_hat = st.v[i] / bc2;
        double q = static_cast<double>(values[i]) * decay;
        q -= lr * m_hat / (std::sqrt(v_hat) + config_.eps);
        values[i] = static_cast<T>(q);
      }
    }
  }

  std::size_t step_count() const { return steps_; }
  bool has_state(const std::string& name) const { return state_.count(name) != 0; }
  const Moments& moments(const std::string& name) const { return state_.at(name); }
  const AdamWConfig& config() const { return config_; }

 private:
  ParameterStore<T>& store_;
  AdamWConfig config_;
  std::map<std::string, Moments> state_;
  std::size_t steps_ = 0;
};

struct Schedule {
  double base_lr = 3e-4;
  double total_epochs = 100;
  double warmup_epochs = 10;
  double warmup_ratio = 0.1;
  double power = 0.9;
};

/// Linear warmup from base·ratio to base, then polynomial decay to 0 at
/// total_epochs, measured over the post-warmup span.
inline double lr_at(double epoch, const Schedule& s) {
  if (s.warmup_epochs < 0 || s.warmup_epochs > s.total_epochs) {
    throw ArgumentError("lr_at: warmup must lie within [0, total_epochs]");
  }
  if (!(epoch >= 0.0 && epoch <= s.total_epochs)) {
    throw ArgumentError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(s.total_epochs) + "]");
  }
  if (epoch < s.warmup_epochs) {
    return s.base_lr * (s.warmup_ratio + (1.0 - s.warmup_ratio) * epoch / s.warmup_epochs);
  }
  const double span = s.total_epochs - s.warmup_epochs;
  if (span <= 0.0) return 0.0;
  return s.base_lr * std::pow(1.0 - (epoch - s.warmup_epochs) / span, s.power);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainOptions {
  std::size_t batch = 4;
  std::size_t epochs = 50;
  Schedule schedule{3e-4, 50, 5, 0.1, 0.9};
  AdamWConfig optimizer;
  OhemConfig ohem;
  double w0 = 1.0;
  double w1 = 1.0;
  std::uint64_t seed = 0;
  bool augment = true;
  std::size_t crop_height = 0;  // 0 keeps the full extent
  std::size_t crop_width = 0;
  std::size_t checkpoint_interval = 0;  // epochs between numbered checkpoints; 0 disables
  std::size_t threads = 1;              // workers for the per-epoch train mIoU pass
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double loss_s0 = 0;
  double loss_s1 = 0;
  double loss_total = 0;
  double train_miou = 0;
};

inline std::string format_epoch_record(const EpochRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu, %.6g, %.6g, %.6g, %.6g, %.6g", r.epoch, r.lr, r.loss_s0, r.loss_s1,
                r.loss_total, r.train_miou);
  return buf;
}

inline constexpr const char* kMetricsHeader = "epoch, lr, loss_s0, loss_s1, loss_total, train_miou";

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t steps = 0;
  double best_miou = -1.0;
};

/// Called with a checkpoint tag ("last", "best" or "epoch_<n>") and the
/// optimiser step count. "last" is also written once before training starts.
using CheckpointHook = std::function<void(const std::string& tag, std::size_t step)>;

/// Mean total loss over `samples` in evaluation mode.
template <typename T>
double dataset_loss(const Model<T>& model, const std::vector<ModalitySample>& samples, double w0, double w1,
                    const OhemConfig& ohem = {}) {
  NoGradGuard guard;
  double sum = 0;
  for (const auto& s : samples) {
    sum += static_cast<double>(total_loss(model.forward(s).logits, s.label, w0, w1, ohem).total.item());
  }
  return sum / static_cast<double>(samples.size());
}

/// mIoU of the model over `samples` with the configured inference head.
template <typename T>
double dataset_miou(const Model<T>& model, const std::vector<ModalitySample>& samples, std::size_t threads = 1) {
  return run_scenarios(model, samples, {Scenario{}}, threads).front().miou;
}

/// Seeded mini-batch training. Each sample's loss is scaled by 1/B before
/// its backward pass so a batch accumulates the mean gradient; the optimiser
/// steps once per batch with the learning rate at the fractional epoch.
///
/// A non-finite loss or gradient raises DivergenceError before any further
/// checkpoint is written, so the previous one survives.
template <typename T>
TrainResult train_loop(Model<T>& model, const std::vector<ModalitySample>& samples, const TrainOptions& opt,
                       std::ostream* metrics = nullptr, const CheckpointHook& checkpoint = {}) {
  if (samples.empty()) throw ArgumentError("train: dataset is empty");
  if (opt.batch == 0) throw ArgumentError("train: batch must be positive");
  if (opt.schedule.total_epochs < static_cast<double>(opt.epochs)) {
    throw ArgumentError("train: schedule shorter than the number of epochs");
  }
  AdamW<T> optimizer(model.parameters(), opt.optimizer);
  TrainResult result;
  if (metrics) *metrics << kMetricsHeader << "\n";
  if (checkpoint) checkpoint("last", 0);

  const std::size_t n = samples.size();
  const std::size_t steps_per_epoch = (n + opt.batch - 1) / opt.batch;
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(mix_seed(opt.seed, 0x5000 + epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    EpochRecord rec;
    rec.epoch = epoch + 1;
    double sum0 = 0, sum1 = 0, sum_total = 0;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      const std::size_t begin = step * opt.batch, end = std::min(n, begin + opt.batch);
      const T inv_batch = T(1) / static_cast<T>(end - begin);
      model.parameters().zero_grad();
      for (std::size_t j = begin; j < end; ++j) {
        const std::size_t idx = order[j];
        const std::uint64_t key = mix_seed(opt.seed, (epoch + 1) * 0x100000 + idx);
        ModalitySample sample = samples[idx];
        if (opt.augment) {
          AugmentOptions aug;
          aug.seed = key;
          aug.crop_height = opt.crop_height;
          aug.crop_width = opt.crop_width;
          sample = augment(sample, aug);
        }
        const std::string where = "epoch " + std::to_string(epoch + 1) + ", step " + std::to_string(result.steps + 1);
        try {
          Rng drop_rng(mix_seed(key, 1));
          const auto out = model.forward(sample, true, &drop_rng);
          const auto loss = total_loss(out.logits, sample.label, opt.w0, opt.w1, opt.ohem);
          const double value = static_cast<double>(loss.total.item());
          if (!std::isfinite(value)) throw DivergenceError("non-finite loss at " + where);
          sum0 += static_cast<double>(loss.s0.item());
          sum1 += static_cast<double>(loss.s1.item());
          sum_total += value;
          backward(scale(loss.total, inv_batch));
        } catch (const DivergenceError&) {
          throw;
        } catch (const NumericError& e) {
          throw DivergenceError(std::string(e.what()) + " at " + where);
        }
      }
      const double frac = static_cast<double>(epoch) + static_cast<double>(step) / static_cast<double>(steps_per_epoch);
      rec.lr = lr_at(frac, opt.schedule);
      try {
        optimizer.step(rec.lr);
      } catch (const NumericError& e) {
        throw DivergenceError(e.what());
      }
      ++result.steps;
    }
    rec.loss_s0 = sum0 / static_cast<double>(n);
    rec.loss_s1 = sum1 / static_cast<double>(n);
    rec.loss_total = sum_total / static_cast<double>(n);
    rec.train_miou = dataset_miou(model, samples, opt.threads);
    result.history.push_back(rec);
    if (metrics) *metrics << format_epoch_record(rec) << "\n" << std::flush;
    if (checkpoint) {
      checkpoint("last", result.steps);
      if (rec.train_miou > result.best_miou) checkpoint("best", result.steps);
      if (opt.checkpoint_interval && rec.epoch % opt.checkpoint_interval == 0) {
        checkpoint("epoch_" + std::to_string(rec.epoch), result.steps);
      }
    }
    result.best_miou = std::max(result.best_miou, rec.train_miou);
  }
  model.parameters().zero_grad();
  return result;
}

}  // namespace mmseg

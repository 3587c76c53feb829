#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "mmseg/data.hpp"
#include "mmseg/model.hpp"

namespace mmseg {

/// Pixel counts with rows = ground truth and columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes) : classes_(num_classes), counts_(num_classes * num_classes, 0) {
    if (num_classes == 0) throw ArgumentError("confusion matrix: need at least one class");
  }

  /// Adds one prediction/ground-truth pair; ground-truth pixels equal to
  /// kIgnoreLabel are skipped.
  void accumulate(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
    if (pred.size() != gt.size()) {
      throw DimensionError("accumulate: " + std::to_string(pred.size()) + " predictions for " +
                           std::to_string(gt.size()) + " labels");
    }
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == kIgnoreLabel) continue;
      if (gt[i] >= classes_ || pred[i] >= classes_) {
        throw ArgumentError("accumulate: class id " + std::to_string(std::max(gt[i], pred[i])) + " outside [0, " +
                            std::to_string(classes_) + ")");
      }
    }
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] != kIgnoreLabel) ++counts_[gt[i] * classes_ + pred[i]];
    }
  }

  void accumulate(const LabelMap& pred, const LabelMap& gt) {
    if (pred.height != gt.height || pred.width != gt.width) throw DimensionError("accumulate: label map extents differ");
    accumulate(std::span<const std::uint8_t>(pred.ids), std::span<const std::uint8_t>(gt.ids));
  }

  void merge(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) throw DimensionError("merge: class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_.at(gt * classes_ + pred); }
  std::size_t num_classes() const { return classes_; }
  const std::vector<std::uint64_t>& counts() const { return counts_; }

  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (auto c : counts_) n += c;
    return n;
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

struct IouResult {
  std::vector<double> per_class;  // NaN for classes with zero union
  double miou = 0.0;              // mean over classes with nonzero union
};

inline IouResult miou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ArgumentError("miou: confusion matrix is empty");
  const std::size_t c = cm.num_classes();
  IouResult out;
  double sum = 0;
  std::size_t counted = 0;
  for (std::size_t k = 0; k < c; ++k) {
    std::uint64_t fp = 0, fn = 0;
    for (std::size_t j = 0; j < c; ++j) {
      if (j == k) continue;
      fp += cm.at(j, k);
      fn += cm.at(k, j);
    }
    const std::uint64_t tp = cm.at(k, k);
    const std::uint64_t uni = tp + fp + fn;
    if (uni == 0) {
      out.per_class.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const double iou = static_cast<double>(tp) / static_cast<double>(uni);
    out.per_class.push_back(iou);
    sum += iou;
    ++counted;
  }
  out.miou = sum / static_cast<double>(counted);
  return out;
}

struct Scenario {
  std::vector<std::string> keep;  // empty keeps every trained modality
  std::optional<NoiseSpec> noise;
};

struct ScenarioResult {
  std::string name;
  std::vector<std::string> kept;
  std::string noise = "none";
  std::vector<double> iou;
  double miou = 0.0;
  std::size_t samples = 0;
  ConfusionMatrix confusion{1};
};

/// Every nonempty subset of `modalities`, ordered by size and then
/// lexicographically by sorted member names.
inline std::vector<std::vector<std::string>> modality_subsets(std::vector<std::string> modalities) {
  std::sort(modalities.begin(), modalities.end());
  modalities.erase(std::unique(modalities.begin(), modalities.end()), modalities.end());
  const std::size_t m = modalities.size();
  if (m == 0 || m > 16) throw ArgumentError("modality_subsets: need 1..16 modalities");
  std::vector<std::vector<std::string>> out;
  for (std::uint32_t mask = 1; mask < (1u << m); ++mask) {
    std::vector<std::string> s;
    for (std::size_t i = 0; i < m; ++i) {
      if (mask & (1u << i)) s.push_back(modalities[i]);
    }
    out.push_back(std::move(s));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.size() != b.size() ? a.size() < b.size() : a < b;
  });
  return out;
}

namespace detail {

template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, std::max<std::size_t>(n, 1));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i, 0);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i, t);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace detail

/// Evaluates each scenario over `samples`: drop to the kept modalities,
/// optionally add noise (seeded per sample), predict, accumulate. Confusion
/// counts are integers, so the result is independent of `threads`.
template <typename T>
std::vector<ScenarioResult> run_scenarios(const Model<T>& model, const std::vector<ModalitySample>& samples,
                                          const std::vector<Scenario>& scenarios, std::size_t threads = 1,
                                          std::optional<InferenceHead> head = std::nullopt) {
  if (samples.empty()) throw ArgumentError("run_scenarios: no samples");
  const auto& trained = model.config().modalities;
  const std::set<std::string> trained_set(trained.begin(), trained.end());
  std::vector<ScenarioResult> results;
  for (const auto& scenario : scenarios) {
    std::set<std::string> keep(scenario.keep.begin(), scenario.keep.end());
    if (keep.empty()) keep = trained_set;
    for (const auto& m : keep) {
      if (!trained_set.count(m)) {
        throw ArgumentError("scenario keeps modality '" + m + "' which is not in the trained set {" +
                            join(trained, ",") + "}");
      }
    }
    if (scenario.noise && !keep.count(scenario.noise->modality)) {
      throw ArgumentError("noise targets modality '" + scenario.noise->modality + "' which the scenario drops");
    }
    ScenarioResult r;
    for (const auto& m : trained) {
      if (keep.count(m)) r.kept.push_back(m);
    }
    r.name = join(r.kept, "+");
    if (scenario.noise) {
      r.noise = scenario.noise->label();
      r.name += "|" + r.noise;
    }
    const std::size_t classes = model.config().num_classes;
    const std::size_t workers = threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : threads;
    std::vector<ConfusionMatrix> partial(std::min(workers, samples.size()), ConfusionMatrix(classes));
    detail::parallel_for(samples.size(), partial.size(), [&](std::size_t i, std::size_t t) {
      auto s = drop_modalities(samples[i], keep);
      if (scenario.noise) {
        NoiseSpec spec = *scenario.noise;
        spec.seed = mix_seed(scenario.noise->seed, i);
        s = inject_noise(s, spec);
      }
      partial[t].accumulate(model.predict(s, head), s.label);
    });
    r.confusion = ConfusionMatrix(classes);
    for (const auto& p : partial) r.confusion.merge(p);
    const auto scores = miou(r.confusion);
    r.iou = scores.per_class;
    r.miou = scores.miou;
    r.samples = samples.size();
    results.push_back(std::move(r));
  }
  return results;
}

/// Results grid: one row per scenario, per-class IoU then mIoU. Classes with
/// zero union print as "nan" and are left out of the mean.
inline void write_results_csv(std::ostream& out, const std::vector<ScenarioResult>& results, std::size_t num_classes) {
  out << "scenario,kept_modalities,noise";
  for (std::size_t c = 0; c < num_classes; ++c) out << ",class_" << c;
  out << ",miou,samples\n";
  auto fixed4 = [](double v) {
    if (std::isnan(v)) return std::string("nan");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };
  for (const auto& r : results) {
    out << r.name << "," << join(r.kept, "+") << "," << r.noise;
    for (double v : r.iou) out << "," << fixed4(v);
    out << "," << fixed4(r.miou) << "," << r.samples << "\n";
  }
}

}  // namespace mmseg

// mmseg: synthetic data generation, training and robustness evaluation.
//
//   mmseg gen-data --out data --count 32 --classes 3 --modalities rgb,depth
//   mmseg train --config configs/overfit.ini --out runs/overfit
//   mmseg eval --checkpoint runs/overfit/checkpoints/last --noise gaussian --noise-modality rgb
//   mmseg matrix --checkpoint runs/overfit/checkpoints/last --out grid.csv

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mmseg/mmseg.hpp"

namespace fs = std::filesystem;
using namespace mmseg;

namespace {

enum ExitCode { kOk = 0, kInternal = 1, kUsage = 2, kConfig = 3, kIo = 4, kDivergence = 5 };

enum class LogLevel { error = 0, info = 1, debug = 2 };

LogLevel log_level() {
  const char* env = std::getenv("MMSEG_LOG");
  const std::string v = env ? env : "info";
  if (v == "error") return LogLevel::error;
  if (v == "debug") return LogLevel::debug;
  return LogLevel::info;
}

void log(LogLevel level, const std::string& message) {
  if (level > log_level()) return;
  std::cerr << "mmseg: " << (level == LogLevel::debug ? "debug: " : "") << message << "\n";
}

/// Usage problem detected after CLI11 parsing (bad value combinations).
struct UsageError : Error {
  using Error::Error;
};

std::pair<std::size_t, std::size_t> parse_size(const std::string& text) {
  const auto x = text.find('x');
  try {
    std::size_t pos = 0;
    if (x == std::string::npos) {
      const auto n = std::stoul(text, &pos);
      if (pos == text.size() && n > 0) return {n, n};
    } else {
      const auto h = std::stoul(text.substr(0, x), &pos);
      std::size_t pos2 = 0;
      const auto w = std::stoul(text.substr(x + 1), &pos2);
      if (pos == x && pos2 == text.size() - x - 1 && h > 0 && w > 0) return {h, w};
    }
  } catch (const std::exception&) {
  }
  throw UsageError("--size expects N or HxW with positive extents, got '" + text + "'");
}

struct LoadedModel {
  RunConfig config;
  std::unique_ptr<Model<float>> model;
};

LoadedModel load_model(const fs::path& checkpoint) {
  LoadedModel out{read_checkpoint_config(checkpoint), nullptr};
  out.model = std::make_unique<Model<float>>(out.config.model_config());
  const auto info = load_checkpoint(checkpoint, *out.model);
  log(LogLevel::debug, "loaded " + checkpoint.string() + " at step " + std::to_string(info.step));
  return out;
}

std::vector<ModalitySample> load_samples(const fs::path& root, const std::string& split,
                                         const std::vector<std::string>& modalities, std::size_t classes) {
  auto manifest = read_manifest(root);
  const std::set<std::string> available(manifest.modalities.begin(), manifest.modalities.end());
  for (const auto& m : modalities) {
    if (!available.count(m)) {
      throw IoError("dataset '" + root.string() + "' has no modality '" + m + "' (has " +
                    join(manifest.modalities, ",") + ")");
    }
  }
  if (manifest.num_classes > classes) {
    throw ConfigError("dataset has " + std::to_string(manifest.num_classes) + " classes, model " +
                      std::to_string(classes));
  }
  manifest.modalities = modalities;
  return load_split(root, split, manifest);
}

std::vector<std::string> resolve_modalities(const std::string& text, const std::vector<std::string>& trained) {
  if (text.empty() || text == "all") return trained;
  auto keep = split_list(text);
  const std::set<std::string> known(trained.begin(), trained.end());
  for (const auto& m : keep) {
    if (!known.count(m)) {
      throw UsageError("modality '" + m + "' is not in the checkpoint's trained set {" + join(trained, ",") + "}");
    }
  }
  return keep;
}

void write_csv(const std::string& path, const std::vector<ScenarioResult>& results, std::size_t classes) {
  if (path.empty()) {
    write_results_csv(std::cout, results, classes);
    return;
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  write_results_csv(out, results, classes);
  if (!out) throw IoError("write failed for '" + path + "'");
}

int run(int argc, char** argv) {
  CLI::App app{"Multi-modal semantic segmentation with routed LoRA experts"};
  app.require_subcommand(1);
  std::size_t threads = 1;
  app.add_option("--threads", threads, "Worker threads for evaluation (0 = all cores, 1 = bit-deterministic)")
      ->capture_default_str();

  auto* gen = app.add_subcommand("gen-data", "Write a seeded synthetic dataset");
  std::string gen_out, gen_size = "64", gen_modalities = "rgb,depth";
  std::uint64_t gen_seed = 0;
  std::size_t gen_count = 32, gen_classes = 5;
  gen->add_option("--out", gen_out, "Dataset root")->required();
  gen->add_option("--seed", gen_seed)->capture_default_str();
  gen->add_option("--count", gen_count, "Training samples; val/test get count/4")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  gen->add_option("--classes", gen_classes)->check(CLI::Range(1, 255))->capture_default_str();
  gen->add_option("--size", gen_size, "N or HxW")->capture_default_str();
  gen->add_option("--modalities", gen_modalities, "Comma list of rgb, depth, event, lidar")->capture_default_str();

  auto* train = app.add_subcommand("train", "Train from a config file");
  std::string train_config, train_out;
  train->add_option("--config", train_config)->required();
  train->add_option("--out", train_out, "Run directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate one scenario");
  std::string eval_ckpt, eval_data, eval_modalities, eval_noise, eval_noise_modality, eval_out, eval_split = "test";
  std::uint64_t eval_seed = 0;
  eval->add_option("--checkpoint", eval_ckpt)->required();
  eval->add_option("--data", eval_data, "Dataset root (default: the config's root)");
  eval->add_option("--split", eval_split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  eval->add_option("--modalities", eval_modalities, "Kept modalities, comma list or 'all'");
  eval->add_option("--noise", eval_noise)->check(CLI::IsMember({"gaussian", "uniform"}));
  eval->add_option("--noise-modality", eval_noise_modality);
  eval->add_option("--seed", eval_seed, "Noise seed")->capture_default_str();
  eval->add_option("--out", eval_out, "Results CSV (default: stdout)");

  auto* matrix = app.add_subcommand("matrix", "Evaluate every nonempty modality subset");
  std::string mx_ckpt, mx_data, mx_out, mx_split = "test";
  matrix->add_option("--checkpoint", mx_ckpt)->required();
  matrix->add_option("--data", mx_data, "Dataset root (default: the config's root)");
  matrix->add_option("--split", mx_split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  matrix->add_option("--out", mx_out, "Results CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "mmseg: error[usage]: " << e.what() << "\n";
    return kUsage;
  }

  if (*gen) {
    SyntheticSpec spec;
    spec.seed = gen_seed;
    spec.count = gen_count;
    spec.num_classes = gen_classes;
    std::tie(spec.height, spec.width) = parse_size(gen_size);
    spec.modalities = split_list(gen_modalities);
    for (const auto& m : spec.modalities) modality_channels(m);
    const auto m = gen_synthetic(spec, gen_out);
    std::cout << "wrote " << gen_out << ": modalities=" << join(m.modalities, ",") << " classes=" << m.num_classes
              << " size=" << m.height << "x" << m.width << " train=" << m.count << " val=" << m.val_count
              << " test=" << m.test_count << " seed=" << m.seed << "\n";
    return kOk;
  }

  if (*train) {
    const auto config = load_config(train_config);
    const fs::path out = train_out;
    std::error_code ec;
    fs::create_directories(out / "checkpoints", ec);
    if (ec) throw IoError("cannot create '" + out.string() + "': " + ec.message());
    {
      std::ofstream snapshot(out / "config.ini", std::ios::trunc);
      snapshot << serialize_config(config);
    }
    const auto samples = load_samples(config.root, "train", config.modalities, config.classes);
    log(LogLevel::info, "training on " + std::to_string(samples.size()) + " samples from " + config.root);
    Model<float> model(config.model_config());
    auto options = config.train_options();
    options.threads = threads;
    std::ofstream metrics(out / "metrics.csv", std::ios::trunc);
    if (!metrics) throw IoError("cannot write '" + (out / "metrics.csv").string() + "'");
    const auto hook = [&](const std::string& tag, std::size_t step) {
      save_checkpoint(out / "checkpoints" / tag, model, config, step);
      log(LogLevel::debug, "checkpoint " + tag + " at step " + std::to_string(step));
    };
    const auto result = train_loop(model, samples, options, &metrics, hook);
    if (!result.history.empty()) {
      const auto& last = result.history.back();
      log(LogLevel::info, "done: " + std::to_string(result.steps) + " steps, loss " +
                              std::to_string(last.loss_total) + ", train mIoU " + std::to_string(last.train_miou));
    } else {
      log(LogLevel::info, "done: 0 epochs, checkpoint holds the initialisation");
    }
    return kOk;
  }

  if (*eval) {
    auto loaded = load_model(eval_ckpt);
    const auto& trained = loaded.config.modalities;
    const auto keep = resolve_modalities(eval_modalities, trained);
    Scenario scenario{keep, std::nullopt};
    if (!eval_noise.empty() || !eval_noise_modality.empty()) {
      if (eval_noise.empty() || eval_noise_modality.empty()) {
        throw UsageError("--noise and --noise-modality must be given together");
      }
      resolve_modalities(eval_noise_modality, trained);
      NoiseSpec noise;
      noise.kind = parse_noise_kind(eval_noise);
      noise.modality = eval_noise_modality;
      noise.seed = eval_seed;
      scenario.noise = noise;
    }
    const auto samples =
        load_samples(eval_data.empty() ? loaded.config.root : eval_data, eval_split, trained, loaded.config.classes);
    const auto results = run_scenarios(*loaded.model, samples, {scenario}, threads);
    write_csv(eval_out, results, loaded.config.classes);
    if (!eval_out.empty()) std::cout << "miou = " << detail::format_double(results.front().miou) << "\n";
    return kOk;
  }

  if (*matrix) {
    auto loaded = load_model(mx_ckpt);
    const auto& trained = loaded.config.modalities;
    std::vector<Scenario> scenarios;
    for (auto& subset : modality_subsets(trained)) scenarios.push_back({subset, std::nullopt});
    const auto samples =
        load_samples(mx_data.empty() ? loaded.config.root : mx_data, mx_split, trained, loaded.config.classes);
    const auto results = run_scenarios(*loaded.model, samples, scenarios, threads);
    write_csv(mx_out, results, loaded.config.classes);
    std::cout << "wrote " << results.size() << " scenarios to " << mx_out << "\n";
    return kOk;
  }
  return kUsage;
}

}  // namespace

int main(int argc, char** argv) {
  auto fail = [](const char* kind, const std::string& what, int code) {
    std::cerr << "mmseg: error[" << kind << "]: " << what << "\n";
    return code;
  };
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    return fail("usage", e.what(), kUsage);
  } catch (const ConfigError& e) {
    return fail("config", e.what(), kConfig);
  } catch (const IoError& e) {
    return fail("io", e.what(), kIo);
  } catch (const FormatError& e) {
    return fail("io", e.what(), kIo);
  } catch (const DivergenceError& e) {
    return fail("divergence", std::string(e.what()) + "; last good checkpoint kept", kDivergence);
  } catch (const NumericError& e) {
    return fail("divergence", e.what(), kDivergence);
  } catch (const ArgumentError& e) {
    return fail("usage", e.what(), kUsage);
  } catch (const DimensionError& e) {
    return fail("usage", e.what(), kUsage);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), kInternal);
  }
}

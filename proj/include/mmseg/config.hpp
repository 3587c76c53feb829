#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "mmseg/data.hpp"
#include "mmseg/model.hpp"
#include "mmseg/training.hpp"

namespace mmseg {

/// Everything a run needs, grouped as the [model], [data] and [optim]
/// sections of the config file.
struct RunConfig {
  // [model]
  std::size_t d = 32;
  std::size_t stages = 3;
  std::size_t window = 4;
  std::vector<std::size_t> heads{1, 2, 4};
  std::size_t r = 32;
  std::size_t k = 0;  // 0 = ceil(M/2)
  bool renormalize_topk = false;
  double dropout = 0.1;
  std::size_t classes = 5;
  InferenceHead inference_head = InferenceHead::combined;
  double w0 = 1.0;
  double w1 = 1.0;
  double p_th = 0.7;
  bool per_modality_neck = false;
  bool freeze_neck = false;

  // [data]
  std::string root;
  std::vector<std::string> modalities{"rgb", "depth"};
  std::size_t height = 64;  // training crop; must not exceed the dataset extent
  std::size_t width = 64;
  bool augment = true;

  // [optim]
  double base_lr = 3e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::size_t batch = 4;
  std::size_t epochs = 50;
  double warmup_epochs = 5;
  double warmup_ratio = 0.1;
  double poly_power = 0.9;
  std::uint64_t seed = 0;
  std::size_t checkpoint_interval = 0;

  ModelConfig model_config() const {
    ModelConfig m;
    m.encoder.embed_dim = d;
    m.encoder.num_stages = stages;
    m.encoder.window = window;
    m.encoder.heads = heads;
    m.encoder.lora_rank = r;
    m.num_classes = classes;
    m.top_k = k;
    m.renormalize_topk = renormalize_topk;
    m.dropout = dropout;
    m.inference_head = inference_head;
    m.per_modality_neck = per_modality_neck;
    m.freeze_neck = freeze_neck;
    m.modalities = modalities;
    m.seed = mix_seed(seed, 0x4D4F44454CULL);
    return m;
  }

  TrainOptions train_options() const {
    TrainOptions t;
    t.batch = batch;
    t.epochs = epochs;
    t.schedule = {base_lr, static_cast<double>(epochs), warmup_epochs, warmup_ratio, poly_power};
    t.optimizer = {weight_decay, beta1, beta2, 1e-8};
    t.ohem.prob_threshold = p_th;
    t.w0 = w0;
    t.w1 = w1;
    t.seed = seed;
    t.augment = augment;
    t.crop_height = height;
    t.crop_width = width;
    t.checkpoint_interval = checkpoint_interval;
    return t;
  }

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string format_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

class ConfigReader {
 public:
  ConfigReader(std::size_t line, std::string key, std::string value)
      : line_(line), key_(std::move(key)), value_(std::move(value)) {}

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError("config line " + std::to_string(line_) + ": " + key_ + ": " + what);
  }

  template <typename U>
  U integer(const std::string& text) const {
    U v{};
    auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size()) fail("expected an integer, got '" + text + "'");
    return v;
  }

  std::size_t size() const { return integer<std::size_t>(value_); }
  std::uint64_t u64() const { return integer<std::uint64_t>(value_); }

  double real(const std::string& text) const {
    double v = 0;
    auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size() || !std::isfinite(v)) {
      fail("expected a finite number, got '" + text + "'");
    }
    return v;
  }
  double real() const { return real(value_); }

  bool boolean() const {
    if (value_ == "true") return true;
    if (value_ == "false") return false;
    fail("expected true or false, got '" + value_ + "'");
  }

  std::vector<std::string> list() const {
    auto items = split_list(value_);
    if (items.empty()) fail("empty list");
    return items;
  }

  std::vector<std::size_t> size_list() const {
    std::vector<std::size_t> out;
    for (const auto& item : list()) out.push_back(integer<std::size_t>(item));
    return out;
  }

  const std::string& text() const { return value_; }

 private:
  std::size_t line_;
  std::string key_;
  std::string value_;
};

}  // namespace detail

/// Parses `[section]` / `key = value` text. '#' starts a comment. Unknown
/// sections or keys, duplicates and malformed values raise ConfigError
/// naming the line.
inline RunConfig parse_config(const std::string& text) {
  RunConfig c;
  std::string section;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    auto fail = [&](const std::string& what) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + what);
    };
    if (line.front() == '[') {
      if (line.back() != ']') fail("unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section != "model" && section != "data" && section != "optim") fail("unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected 'key = value'");
    if (section.empty()) fail("key outside of a section");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (!seen.insert(section + "." + key).second) fail("duplicate key '" + key + "' in [" + section + "]");
    const detail::ConfigReader v(line_no, section + "." + key, value);
    bool known = true;
    if (section == "model") {
      if (key == "d") c.d = v.size();
      else if (key == "stages") c.stages = v.size();
      else if (key == "window") c.window = v.size();
      else if (key == "heads") c.heads = v.size_list();
      else if (key == "r") c.r = v.size();
      else if (key == "k") c.k = value == "auto" ? 0 : v.size();
      else if (key == "renormalize_topk") c.renormalize_topk = v.boolean();
      else if (key == "dropout") c.dropout = v.real();
      else if (key == "classes") c.classes = v.size();
      else if (key == "inference_head") {
        try {
          c.inference_head = parse_inference_head(value);
        } catch (const ArgumentError& e) {
          v.fail(e.what());
        }
      }
      else if (key == "w0") c.w0 = v.real();
      else if (key == "w1") c.w1 = v.real();
      else if (key == "p_th") c.p_th = v.real();
      else if (key == "per_modality_neck") c.per_modality_neck = v.boolean();
      else if (key == "freeze_neck") c.freeze_neck = v.boolean();
      else known = false;
    } else if (section == "data") {
      if (key == "root") c.root = value;
      else if (key == "modalities") {
        c.modalities = v.list();
        for (const auto& m : c.modalities) {
          try {
            modality_channels(m);
          } catch (const ArgumentError& e) {
            v.fail(e.what());
          }
        }
      }
      else if (key == "height") c.height = v.size();
      else if (key == "width") c.width = v.size();
      else if (key == "augment") c.augment = v.boolean();
      else known = false;
    } else {
      if (key == "base_lr") c.base_lr = v.real();
      else if (key == "weight_decay") c.weight_decay = v.real();
      else if (key == "betas") {
        const auto items = v.list();
        if (items.size() != 2) v.fail("expected two comma-separated values");
        c.beta1 = v.real(items[0]);
        c.beta2 = v.real(items[1]);
      }
      else if (key == "batch") c.batch = v.size();
      else if (key == "epochs") c.epochs = v.size();
      else if (key == "warmup_epochs") c.warmup_epochs = v.real();
      else if (key == "warmup_ratio") c.warmup_ratio = v.real();
      else if (key == "poly_power") c.poly_power = v.real();
      else if (key == "seed") c.seed = v.u64();
      else if (key == "checkpoint_interval") c.checkpoint_interval = v.size();
      else known = false;
    }
    if (!known) fail("unknown key '" + key + "' in [" + section + "]");
  }
  if (c.root.empty()) throw ConfigError("config: [data] root is required");
  try {
    c.model_config().validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (c.batch == 0) throw ConfigError("config: [optim] batch must be positive");
  if (c.warmup_epochs < 0 || c.warmup_epochs > static_cast<double>(c.epochs)) {
    throw ConfigError("config: [optim] warmup_epochs must lie within [0, epochs]");
  }
  if (c.w0 < 0 || c.w1 < 0 || (c.w0 == 0 && c.w1 == 0)) {
    throw ConfigError("config: [model] w0 and w1 must be non-negative and not both zero");
  }
  if (!(c.p_th > 0 && c.p_th <= 1)) throw ConfigError("config: [model] p_th must be in (0, 1]");
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

/// Normal form: every key, fixed order, shortest round-trip numbers.
inline std::string serialize_config(const RunConfig& c) {
  using detail::format_double;
  std::ostringstream out;
  auto b = [](bool v) { return v ? "true" : "false"; };
  out << "[model]\n"
      << "d = " << c.d << "\n"
      << "stages = " << c.stages << "\n"
      << "window = " << c.window << "\n"
      << "heads = " << detail::format_list(c.heads) << "\n"
      << "r = " << c.r << "\n"
      << "k = " << (c.k ? std::to_string(c.k) : std::string("auto")) << "\n"
      << "renormalize_topk = " << b(c.renormalize_topk) << "\n"
      << "dropout = " << format_double(c.dropout) << "\n"
      << "classes = " << c.classes << "\n"
      << "inference_head = " << inference_head_name(c.inference_head) << "\n"
      << "w0 = " << format_double(c.w0) << "\n"
      << "w1 = " << format_double(c.w1) << "\n"
      << "p_th = " << format_double(c.p_th) << "\n"
      << "per_modality_neck = " << b(c.per_modality_neck) << "\n"
      << "freeze_neck = " << b(c.freeze_neck) << "\n"
      << "\n[data]\n"
      << "root = " << c.root << "\n"
      << "modalities = " << join(c.modalities, ",") << "\n"
      << "height = " << c.height << "\n"
      << "width = " << c.width << "\n"
      << "augment = " << b(c.augment) << "\n"
      << "\n[optim]\n"
      << "base_lr = " << format_double(c.base_lr) << "\n"
      << "weight_decay = " << format_double(c.weight_decay) << "\n"
      << "betas = " << format_double(c.beta1) << "," << format_double(c.beta2) << "\n"
      << "batch = " << c.batch << "\n"
      << "epochs = " << c.epochs << "\n"
      << "warmup_epochs = " << format_double(c.warmup_epochs) << "\n"
      << "warmup_ratio = " << format_double(c.warmup_ratio) << "\n"
      << "poly_power = " << format_double(c.poly_power) << "\n"
      << "seed = " << c.seed << "\n"
      << "checkpoint_interval = " << c.checkpoint_interval << "\n";
  return out.str();
}

}  // namespace mmseg

#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "mmseg/config.hpp"
#include "mmseg/data.hpp"
#include "mmseg/model.hpp"

namespace mmseg {

inline constexpr int kCheckpointVersion = 1;

struct CheckpointInfo {
  int format_version = 0;
  std::size_t step = 0;
  std::size_t parameters = 0;
};

/// Writes dir/{manifest, config.ini, params/<name>.mmt}. The directory is
/// assembled next to its final location and swapped in at the end, so an
/// interrupted save leaves the previous checkpoint intact.
inline void save_checkpoint(const std::filesystem::path& dir, const Model<float>& model, const RunConfig& config,
                            std::size_t step) {
  namespace fs = std::filesystem;
  std::error_code ec;
  const fs::path staging = dir.string() + ".tmp";
  fs::remove_all(staging, ec);
  fs::create_directories(staging / "params", ec);
  if (ec) throw IoError("cannot create '" + staging.string() + "': " + ec.message());
  for (const auto& p : model.parameters().all()) write_tensor(staging / "params" / (p.name + ".mmt"), p.value);
  {
    std::ofstream cfg(staging / "config.ini", std::ios::trunc);
    cfg << serialize_config(config);
    std::ofstream manifest(staging / "manifest", std::ios::trunc);
    manifest << "format_version = " << kCheckpointVersion << "\n"
             << "step = " << step << "\n"
             << "parameters = " << model.parameters().all().size() << "\n";
    if (!cfg || !manifest) throw IoError("cannot write checkpoint files under '" + staging.string() + "'");
  }
  fs::remove_all(dir, ec);
  fs::rename(staging, dir, ec);
  if (ec) throw IoError("cannot move checkpoint into '" + dir.string() + "': " + ec.message());
}

inline CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest");
  if (!in) throw IoError("no checkpoint manifest under '" + dir.string() + "'");
  CheckpointInfo info;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    try {
      if (key == "format_version") info.format_version = std::stoi(value);
      else if (key == "step") info.step = std::stoul(value);
      else if (key == "parameters") info.parameters = std::stoul(value);
    } catch (const std::exception&) {
      throw IoError("checkpoint manifest under '" + dir.string() + "': bad value for '" + key + "'");
    }
  }
  if (info.format_version != kCheckpointVersion) {
    throw IoError("checkpoint under '" + dir.string() + "' has format version " +
                  std::to_string(info.format_version) + ", expected " + std::to_string(kCheckpointVersion));
  }
  return info;
}

inline RunConfig read_checkpoint_config(const std::filesystem::path& dir) { return load_config(dir / "config.ini"); }

/// Copies stored values into the live model's parameters, bit for bit.
/// Rejects checkpoints whose class count, width or depth differ from the
/// live config, and any missing, extra or mis-shaped parameter.
inline CheckpointInfo load_checkpoint(const std::filesystem::path& dir, Model<float>& model) {
  namespace fs = std::filesystem;
  const auto info = read_checkpoint_info(dir);
  const auto stored = read_checkpoint_config(dir);
  const auto& live = model.config();
  auto mismatch = [&](const std::string& what, std::size_t a, std::size_t b) {
    if (a != b) {
      throw ConfigError("checkpoint " + what + " " + std::to_string(a) + " does not match live config " +
                        std::to_string(b));
    }
  };
  mismatch("classes", stored.classes, live.num_classes);
  mismatch("d", stored.d, live.encoder.embed_dim);
  mismatch("stages", stored.stages, live.encoder.num_stages);
  if (info.parameters != model.parameters().all().size()) {
    throw ConfigError("checkpoint holds " + std::to_string(info.parameters) + " parameters, model has " +
                      std::to_string(model.parameters().all().size()));
  }
  for (auto& p : model.parameters().all()) {
    const auto path = dir / "params" / (p.name + ".mmt");
    if (!fs::exists(path)) throw ConfigError("checkpoint lacks parameter '" + p.name + "'");
    const auto t = read_tensor(path);
    if (t.shape() != p.value.shape()) {
      throw ConfigError("checkpoint parameter '" + p.name + "' has shape " + shape_str(t.shape()) + ", expected " +
                        shape_str(p.value.shape()));
    }
    auto dst = p.value.mutable_data();
    std::copy(t.data().begin(), t.data().end(), dst.begin());
  }
  return info;
}

}  // namespace mmseg

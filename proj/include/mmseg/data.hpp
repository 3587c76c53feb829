#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mmseg/numerics.hpp"

namespace mmseg {

inline constexpr std::uint8_t kIgnoreLabel = 255;

struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> ids;  // row-major, class id or kIgnoreLabel
};

/// Co-registered rasters of one scene plus its label map.
struct ModalitySample {
  std::string id;
  std::map<std::string, Tensor<float>> rasters;  // [C×H×W], values in [0, 255]
  LabelMap label;

  std::size_t height() const { return label.height; }
  std::size_t width() const { return label.width; }
  bool has(const std::string& modality) const { return rasters.count(modality) != 0; }

  std::vector<std::string> modalities() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : rasters) out.push_back(name);
    return out;
  }

  void validate(std::size_t num_classes) const {
    if (label.ids.size() != label.height * label.width) throw ArgumentError("sample " + id + ": label size mismatch");
    for (const auto& [name, r] : rasters) {
      if (r.rank() != 3 || r.dim(1) != label.height || r.dim(2) != label.width) {
        throw DimensionError("sample " + id + ": raster '" + name + "' " + shape_str(r.shape()) +
                             " does not match label " + std::to_string(label.height) + "x" +
                             std::to_string(label.width));
      }
      for (float v : r.data()) {
        if (!(v >= 0.0f && v <= 255.0f)) throw ArgumentError("sample " + id + ": raster '" + name + "' outside [0, 255]");
      }
    }
    for (auto v : label.ids) {
      if (v != kIgnoreLabel && v >= num_classes) {
        throw ArgumentError("sample " + id + ": label " + std::to_string(v) + " outside [0, " +
                            std::to_string(num_classes) + ")");
      }
    }
  }
};

/// Event and LiDAR rasters are mostly zeros; everything else is dense.
inline bool is_sparse_modality(const std::string& modality) { return modality == "event" || modality == "lidar"; }

inline std::size_t modality_channels(const std::string& modality) {
  if (modality == "rgb") return 3;
  if (modality == "depth" || modality == "event" || modality == "lidar") return 1;
  throw ArgumentError("unknown modality '" + modality + "' (expected rgb, depth, event or lidar)");
}

// ---------------------------------------------------------------------------
// Tensor files: "MMT1" | u8 dtype | u8 rank | u32 LE extents | row-major payload

enum class DType : std::uint8_t { f32 = 0, u8 = 1 };

struct MmtArray {
  DType dtype = DType::f32;
  std::vector<std::uint32_t> shape;
  std::vector<float> f32;
  std::vector<std::uint8_t> u8;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
  }
};

inline std::vector<std::uint8_t> encode_mmt(const MmtArray& array) {
  if (array.shape.empty() || array.shape.size() > 255) throw FormatError(FormatError::Kind::bad_shape, "mmt: rank must be 1..255");
  const std::size_t n = array.numel();
  if (n == 0) throw FormatError(FormatError::Kind::bad_shape, "mmt: zero extent");
  if ((array.dtype == DType::f32 && array.f32.size() != n) || (array.dtype == DType::u8 && array.u8.size() != n)) {
    throw FormatError(FormatError::Kind::bad_shape, "mmt: payload does not match shape");
  }
  std::vector<std::uint8_t> out{'M', 'M', 'T', '1', static_cast<std::uint8_t>(array.dtype),
                                static_cast<std::uint8_t>(array.shape.size())};
  auto put_u32 = [&out](std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  };
  for (auto e : array.shape) put_u32(e);
  if (array.dtype == DType::f32) {
    out.reserve(out.size() + 4 * n);
    for (float v : array.f32) put_u32(std::bit_cast<std::uint32_t>(v));
  } else {
    out.insert(out.end(), array.u8.begin(), array.u8.end());
  }
  return out;
}

/// Parses an .mmt byte image. Every malformed input raises FormatError.
inline MmtArray decode_mmt(std::span<const std::uint8_t> bytes) {
  using K = FormatError::Kind;
  if (bytes.size() < 4) throw FormatError(K::truncated, "mmt: file shorter than its magic");
  if (!(bytes[0] == 'M' && bytes[1] == 'M' && bytes[2] == 'T' && bytes[3] == '1')) {
    throw FormatError(K::bad_magic, "mmt: bad magic");
  }
  if (bytes.size() < 6) throw FormatError(K::truncated, "mmt: missing header");
  MmtArray array;
  const std::uint8_t dtype = bytes[4];
  if (dtype > 1) throw FormatError(K::unsupported_dtype, "mmt: unsupported dtype code " + std::to_string(dtype));
  array.dtype = static_cast<DType>(dtype);
  const std::size_t rank = bytes[5];
  if (rank == 0) throw FormatError(K::bad_shape, "mmt: rank 0");
  std::size_t pos = 6;
  if (bytes.size() < pos + 4 * rank) throw FormatError(K::truncated, "mmt: truncated extents");
  const std::size_t elem = array.dtype == DType::f32 ? 4 : 1;
  const std::size_t payload = bytes.size() - pos - 4 * rank;
  std::size_t n = 1;
  for (std::size_t i = 0; i < rank; ++i, pos += 4) {
    const std::uint32_t e = std::uint32_t(bytes[pos]) | std::uint32_t(bytes[pos + 1]) << 8 |
                            std::uint32_t(bytes[pos + 2]) << 16 | std::uint32_t(bytes[pos + 3]) << 24;
    if (e == 0) throw FormatError(K::bad_shape, "mmt: zero extent");
    array.shape.push_back(e);
    if (n > payload / elem / e + 1) throw FormatError(K::truncated, "mmt: payload shorter than shape requires");
    n *= e;
  }
  if (n * elem > payload) throw FormatError(K::truncated, "mmt: payload shorter than shape requires");
  if (n * elem < payload) throw FormatError(K::trailing_bytes, "mmt: payload longer than shape requires");
  if (array.dtype == DType::f32) {
    array.f32.resize(n);
    for (std::size_t i = 0; i < n; ++i, pos += 4) {
      const std::uint32_t bits = std::uint32_t(bytes[pos]) | std::uint32_t(bytes[pos + 1]) << 8 |
                                 std::uint32_t(bytes[pos + 2]) << 16 | std::uint32_t(bytes[pos + 3]) << 24;
      array.f32[i] = std::bit_cast<float>(bits);
    }
  } else {
    array.u8.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  }
  return array;
}

inline void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_mmt(const std::filesystem::path& path, const MmtArray& array) { write_bytes(path, encode_mmt(array)); }

inline MmtArray read_mmt(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  try {
    return decode_mmt(bytes);
  } catch (const FormatError& e) {
    throw FormatError(e.kind(), path.string() + ": " + e.what());
  }
}

inline void write_tensor(const std::filesystem::path& path, const Tensor<float>& t) {
  MmtArray array;
  array.dtype = DType::f32;
  for (auto e : t.shape()) array.shape.push_back(static_cast<std::uint32_t>(e));
  array.f32.assign(t.data().begin(), t.data().end());
  write_mmt(path, array);
}

inline Tensor<float> read_tensor(const std::filesystem::path& path) {
  auto array = read_mmt(path);
  Shape shape(array.shape.begin(), array.shape.end());
  if (array.dtype == DType::f32) return Tensor<float>(std::move(shape), std::move(array.f32));
  return Tensor<float>(std::move(shape), std::vector<float>(array.u8.begin(), array.u8.end()));
}

inline void write_label(const std::filesystem::path& path, const LabelMap& label) {
  MmtArray array;
  array.dtype = DType::u8;
  array.shape = {static_cast<std::uint32_t>(label.height), static_cast<std::uint32_t>(label.width)};
  array.u8 = label.ids;
  write_mmt(path, array);
}

inline LabelMap read_label(const std::filesystem::path& path) {
  auto array = read_mmt(path);
  if (array.dtype != DType::u8 || array.shape.size() != 2) {
    throw FormatError(FormatError::Kind::bad_shape, path.string() + ": label must be a rank-2 u8 tensor");
  }
  return {array.shape[0], array.shape[1], std::move(array.u8)};
}

// ---------------------------------------------------------------------------
// Synthetic scenes

struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t count = 32;  // training samples; val and test get max(1, count/4) each
  std::size_t num_classes = 5;
  std::size_t height = 64;
  std::size_t width = 64;
  std::vector<std::string> modalities{"rgb", "depth"};

  std::size_t split_count(const std::string& split) const {
    return split == "train" ? count : std::max<std::size_t>(1, count / 4);
  }
};

inline const std::vector<std::string>& dataset_splits() {
  static const std::vector<std::string> splits{"train", "val", "test"};
  return splits;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

struct Shape2d {
  bool ellipse = false;
  double cy = 0, cx = 0, hy = 0, hx = 0;
  std::uint8_t cls = 0;
  double depth = 0;
  std::array<double, 3> color{};

  bool contains(double y, double x) const {
    const double dy = (y - cy) / hy, dx = (x - cx) / hx;
    return ellipse ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
  }
};

inline std::array<double, 3> class_color(std::size_t cls) {
  static const std::array<std::array<double, 3>, 8> palette{{{110, 110, 110},
                                                              {200, 60, 50},
                                                              {50, 170, 70},
                                                              {60, 80, 200},
                                                              {210, 190, 60},
                                                              {170, 70, 190},
                                                              {60, 190, 200},
                                                              {230, 140, 40}}};
  if (cls < palette.size()) return palette[cls];
  const std::uint64_t h = mix_seed(0xC0105EEDULL, cls);
  return {double(40 + h % 180), double(40 + (h >> 16) % 180), double(40 + (h >> 32) % 180)};
}

inline std::uint64_t split_key(const std::string& split) {
  return split == "train" ? 1 : split == "val" ? 2 : 3;
}

/// Zeroes random non-zero pixels until at most `max_density` of them remain.
inline void cap_density(std::vector<float>& values, double max_density, Rng& rng) {
  std::vector<std::size_t> on;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] != 0.0f) on.push_back(i);
  }
  const auto limit = static_cast<std::size_t>(max_density * static_cast<double>(values.size()));
  while (on.size() > limit) {
    const std::size_t pick = rng.below(on.size());
    values[on[pick]] = 0.0f;
    on[pick] = on.back();
    on.pop_back();
  }
}

}  // namespace detail

/// Deterministic scene for (spec.seed, split, index).
///
/// Background is class 0; 2-4 rectangles or ellipses of foreground classes
/// are painted in order. rgb carries class colour plus texture, depth a
/// per-shape distance ramp, event a sparse edge map and lidar sparse
/// ring-sampled depth.
inline ModalitySample generate_sample(const SyntheticSpec& spec, const std::string& split, std::size_t index) {
  if (spec.num_classes == 0 || spec.num_classes > 255) throw ArgumentError("synthetic: classes must be in [1, 255]");
  if (spec.height == 0 || spec.width == 0) throw ArgumentError("synthetic: zero image extent");
  Rng rng(mix_seed(mix_seed(spec.seed, detail::split_key(split)), index));
  const std::size_t h = spec.height, w = spec.width;
  const double dim = static_cast<double>(std::min(h, w));

  std::vector<detail::Shape2d> shapes;
  if (spec.num_classes > 1) {
    const std::size_t n = 2 + rng.below(3);
    for (std::size_t s = 0; s < n; ++s) {
      detail::Shape2d shape;
      shape.ellipse = rng.bernoulli(0.5);
      shape.hy = rng.uniform(0.12, 0.25) * dim;
      shape.hx = rng.uniform(0.12, 0.25) * dim;
      shape.cy = rng.uniform(0.0, static_cast<double>(h));
      shape.cx = rng.uniform(0.0, static_cast<double>(w));
      shape.cls = static_cast<std::uint8_t>(1 + rng.below(spec.num_classes - 1));
      shape.depth = rng.uniform(30.0, 150.0);
      const auto base = detail::class_color(shape.cls);
      for (int c = 0; c < 3; ++c) shape.color[c] = base[c] + rng.uniform(-15.0, 15.0);
      shapes.push_back(shape);
    }
  }
  const auto bg = detail::class_color(0);
  const double bg_shift = rng.uniform(-15.0, 15.0);

  // Topmost shape owning each pixel (-1 for background).
  std::vector<int> owner(h * w, -1);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t s = 0; s < shapes.size(); ++s) {
        if (shapes[s].contains(double(y) + 0.5, double(x) + 0.5)) owner[y * w + x] = static_cast<int>(s);
      }
    }
  }

  ModalitySample sample;
  std::ostringstream id;
  id << std::setw(6) << std::setfill('0') << index;
  sample.id = id.str();
  sample.label = {h, w, std::vector<std::uint8_t>(h * w, 0)};
  for (std::size_t i = 0; i < h * w; ++i) {
    if (owner[i] >= 0) sample.label.ids[i] = shapes[owner[i]].cls;
  }

  auto depth_at = [&](std::size_t y, std::size_t x) {
    const int o = owner[y * w + x];
    if (o < 0) return 220.0 - 60.0 * static_cast<double>(y) / static_cast<double>(h);
    const auto& s = shapes[o];
    return s.depth + 20.0 * (static_cast<double>(y) - s.cy) / s.hy;
  };
  auto clip = [](double v) { return static_cast<float>(std::clamp(v, 0.0, 255.0)); };

  for (const auto& modality : spec.modalities) {
    const std::size_t channels = modality_channels(modality);
    std::vector<float> values(channels * h * w, 0.0f);
    Rng mrng(mix_seed(rng.next_u64(), std::hash<std::string>{}(modality) & 0xFFFF));
    if (modality == "rgb") {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const int o = owner[y * w + x];
          for (std::size_t c = 0; c < 3; ++c) {
            const double base = o < 0 ? bg[c] + bg_shift : shapes[o].color[c];
            values[(c * h + y) * w + x] = clip(base + mrng.normal(0.0, 10.0));
          }
        }
      }
    } else if (modality == "depth") {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) values[y * w + x] = clip(depth_at(y, x) + mrng.normal(0.0, 2.0));
      }
    } else if (modality == "event") {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const int o = owner[y * w + x];
          const bool edge = (x + 1 < w && owner[y * w + x + 1] != o) || (y + 1 < h && owner[(y + 1) * w + x] != o);
          if (edge && mrng.bernoulli(0.7)) values[y * w + x] = o >= 0 ? 255.0f : 127.0f;
        }
      }
      detail::cap_density(values, 0.10, mrng);
    } else if (modality == "lidar") {
      for (std::size_t y = 0; y < h; y += 4) {
        for (std::size_t x = 0; x < w; ++x) {
          if (mrng.bernoulli(0.15)) values[y * w + x] = std::max(1.0f, clip(depth_at(y, x)));
        }
      }
      detail::cap_density(values, 0.05, mrng);
    }
    sample.rasters.emplace(modality, Tensor<float>({channels, h, w}, std::move(values)));
  }
  return sample;
}

struct DatasetManifest {
  std::vector<std::string> modalities;
  std::size_t num_classes = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t count = 0;
  std::size_t val_count = 0;
  std::size_t test_count = 0;
  std::uint64_t seed = 0;
};

inline std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

inline std::vector<std::string> split_list(const std::string& text, char sep = ',') {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, sep)) {
    item = detail::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline void write_manifest(const std::filesystem::path& root, const DatasetManifest& m) {
  std::ofstream out(root / "manifest", std::ios::trunc);
  if (!out) throw IoError("cannot write manifest under '" + root.string() + "'");
  out << "modalities = " << join(m.modalities, ",") << "\n"
      << "classes = " << m.num_classes << "\n"
      << "height = " << m.height << "\n"
      << "width = " << m.width << "\n"
      << "count = " << m.count << "\n"
      << "val_count = " << m.val_count << "\n"
      << "test_count = " << m.test_count << "\n"
      << "seed = " << m.seed << "\n";
}

inline DatasetManifest read_manifest(const std::filesystem::path& root) {
  std::ifstream in(root / "manifest");
  if (!in) throw IoError("no manifest under '" + root.string() + "'");
  DatasetManifest m;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string k = detail::trim(line.substr(0, eq));
    const std::string v = detail::trim(line.substr(eq + 1));
    try {
      if (k == "modalities") m.modalities = split_list(v);
      else if (k == "classes") m.num_classes = std::stoul(v);
      else if (k == "height") m.height = std::stoul(v);
      else if (k == "width") m.width = std::stoul(v);
      else if (k == "count") m.count = std::stoul(v);
      else if (k == "val_count") m.val_count = std::stoul(v);
      else if (k == "test_count") m.test_count = std::stoul(v);
      else if (k == "seed") m.seed = std::stoull(v);
    } catch (const std::exception&) {
      throw IoError("manifest under '" + root.string() + "': bad value for '" + k + "'");
    }
  }
  return m;
}

/// Writes root/{train,val,test}/{id}/{modality}.mmt + label.mmt and root/manifest.
inline DatasetManifest gen_synthetic(const SyntheticSpec& spec, const std::filesystem::path& root) {
  if (spec.count == 0) throw ArgumentError("synthetic: count must be at least 1");
  if (spec.modalities.empty()) throw ArgumentError("synthetic: no modalities requested");
  for (const auto& m : spec.modalities) modality_channels(m);
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create '" + root.string() + "': " + ec.message());
  for (const auto& split : dataset_splits()) {
    for (std::size_t i = 0; i < spec.split_count(split); ++i) {
      const auto sample = generate_sample(spec, split, i);
      const auto dir = root / split / sample.id;
      fs::create_directories(dir, ec);
      if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
      for (const auto& [name, raster] : sample.rasters) write_tensor(dir / (name + ".mmt"), raster);
      write_label(dir / "label.mmt", sample.label);
    }
  }
  DatasetManifest m{spec.modalities, spec.num_classes, spec.height, spec.width, spec.count,
                    spec.split_count("val"), spec.split_count("test"), spec.seed};
  write_manifest(root, m);
  return m;
}

/// Loads every sample of a split, in sample-id order.
inline std::vector<ModalitySample> load_split(const std::filesystem::path& root, const std::string& split,
                                              const DatasetManifest& manifest) {
  namespace fs = std::filesystem;
  const auto dir = root / split;
  if (!fs::is_directory(dir)) throw IoError("missing split directory '" + dir.string() + "'");
  std::vector<fs::path> entries;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) entries.push_back(e.path());
  }
  std::sort(entries.begin(), entries.end());
  std::vector<ModalitySample> samples;
  for (const auto& path : entries) {
    ModalitySample s;
    s.id = path.filename().string();
    s.label = read_label(path / "label.mmt");
    for (const auto& m : manifest.modalities) s.rasters.emplace(m, read_tensor(path / (m + ".mmt")));
    s.validate(manifest.num_classes);
    samples.push_back(std::move(s));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Robustness transforms

enum class NoiseKind { gaussian, uniform };

inline std::string noise_kind_name(NoiseKind k) { return k == NoiseKind::gaussian ? "gaussian" : "uniform"; }

inline NoiseKind parse_noise_kind(const std::string& text) {
  if (text == "gaussian") return NoiseKind::gaussian;
  if (text == "uniform") return NoiseKind::uniform;
  throw ArgumentError("unknown noise kind '" + text + "' (expected gaussian or uniform)");
}

struct NoiseSpec {
  NoiseKind kind = NoiseKind::gaussian;
  double gaussian_scale = 50.0;
  double uniform_low = -100.0;
  double uniform_high = 100.0;
  std::string modality;
  std::uint64_t seed = 0;

  std::string label() const { return noise_kind_name(kind) + ":" + modality; }
};

/// Adds seeded noise to one raster and clips to [0, 255]. Everything else is
/// shared with the input sample.
inline ModalitySample inject_noise(const ModalitySample& sample, const NoiseSpec& spec) {
  auto it = sample.rasters.find(spec.modality);
  if (it == sample.rasters.end()) throw ArgumentError("inject_noise: modality '" + spec.modality + "' not present");
  Rng rng(spec.seed);
  std::vector<float> values(it->second.data().begin(), it->second.data().end());
  for (auto& v : values) {
    const double draw = spec.kind == NoiseKind::gaussian ? spec.gaussian_scale * rng.normal()
                                                         : rng.uniform(spec.uniform_low, spec.uniform_high);
    v = static_cast<float>(std::clamp(static_cast<double>(v) + draw, 0.0, 255.0));
  }
  ModalitySample out = sample;
  out.rasters[spec.modality] = Tensor<float>(it->second.shape(), std::move(values));
  return out;
}

inline ModalitySample drop_modalities(const ModalitySample& sample, const std::set<std::string>& keep) {
  if (keep.empty()) throw ArgumentError("drop_modalities: keep set is empty");
  ModalitySample out;
  out.id = sample.id;
  out.label = sample.label;
  for (const auto& m : keep) {
    auto it = sample.rasters.find(m);
    if (it == sample.rasters.end()) throw ArgumentError("drop_modalities: modality '" + m + "' not present");
    out.rasters.emplace(m, it->second);
  }
  return out;
}

struct AugmentOptions {
  std::uint64_t seed = 0;
  std::size_t crop_height = 0;  // 0 keeps the full extent
  std::size_t crop_width = 0;
  double flip_probability = 0.5;
  std::optional<bool> force_flip;
  bool color_jitter = true;  // 3-channel modalities only
  bool blur = true;          // dense modalities only
};

namespace detail {

inline std::vector<float> flip_plane(std::span<const float> v, std::size_t channels, std::size_t h, std::size_t w) {
  std::vector<float> out(v.size());
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) out[(c * h + y) * w + x] = v[(c * h + y) * w + (w - 1 - x)];
    }
  }
  return out;
}

template <typename V>
std::vector<V> crop_plane(std::span<const V> v, std::size_t channels, std::size_t h, std::size_t w, std::size_t y0,
                          std::size_t x0, std::size_t ch, std::size_t cw) {
  std::vector<V> out(channels * ch * cw);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < ch; ++y) {
      for (std::size_t x = 0; x < cw; ++x) out[(c * ch + y) * cw + x] = v[(c * h + y0 + y) * w + x0 + x];
    }
  }
  return out;
}

inline std::vector<float> gaussian_blur(std::span<const float> v, std::size_t channels, std::size_t h, std::size_t w,
                                        double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(2.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0;
  for (int i = -radius; i <= radius; ++i) total += kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& k : kernel) k /= total;
  auto at = [](long i, long n) { return static_cast<std::size_t>(std::clamp(i, 0L, n - 1)); };
  std::vector<float> tmp(v.size()), out(v.size());
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * v[(c * h + y) * w + at(long(x) + i, long(w))];
        tmp[(c * h + y) * w + x] = static_cast<float>(acc);
      }
    }
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * tmp[(c * h + at(long(y) + i, long(h))) * w + x];
        out[(c * h + y) * w + x] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

}  // namespace detail

/// Seeded training augmentation: joint horizontal flip, colour jitter,
/// Gaussian blur, and a joint random crop. Geometry is shared by every
/// raster and the label; labels are only ever copied, never interpolated.
inline ModalitySample augment(const ModalitySample& sample, const AugmentOptions& options) {
  const std::size_t h = sample.height(), w = sample.width();
  const std::size_t ch = options.crop_height ? options.crop_height : h;
  const std::size_t cw = options.crop_width ? options.crop_width : w;
  if (ch > h || cw > w) {
    throw ArgumentError("augment: crop " + std::to_string(ch) + "x" + std::to_string(cw) + " larger than image " +
                        std::to_string(h) + "x" + std::to_string(w));
  }
  Rng rng(options.seed);
  const bool flip = options.force_flip.value_or(rng.bernoulli(options.flip_probability));
  const std::size_t y0 = rng.below(h - ch + 1);
  const std::size_t x0 = rng.below(w - cw + 1);

  ModalitySample out;
  out.id = sample.id;
  std::vector<std::uint8_t> label = sample.label.ids;
  if (flip) {
    for (std::size_t y = 0; y < h; ++y) std::reverse(label.begin() + y * w, label.begin() + (y + 1) * w);
  }
  out.label = {ch, cw, detail::crop_plane<std::uint8_t>(label, 1, h, w, y0, x0, ch, cw)};

  for (const auto& [name, raster] : sample.rasters) {
    const std::size_t c = raster.dim(0);
    std::vector<float> values(raster.data().begin(), raster.data().end());
    if (flip) values = detail::flip_plane(values, c, h, w);
    if (options.color_jitter && c == 3) {
      const double brightness = rng.uniform(0.8, 1.2);
      const double contrast = rng.uniform(0.8, 1.2);
      double mean = 0;
      for (float v : values) mean += v;
      mean /= static_cast<double>(values.size());
      for (auto& v : values) {
        v = static_cast<float>(std::clamp(((v - mean) * contrast + mean) * brightness, 0.0, 255.0));
      }
    }
    if (options.blur && !is_sparse_modality(name) && rng.bernoulli(0.5)) {
      values = detail::gaussian_blur(values, c, h, w, rng.uniform(0.3, 1.0));
    }
    out.rasters.emplace(name, Tensor<float>({c, ch, cw}, detail::crop_plane<float>(values, c, h, w, y0, x0, ch, cw)));
  }
  return out;
}

}  // namespace mmseg

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "msda/box.hpp"
#include "msda/loss.hpp"
#include "msda/random.hpp"
#include "msda/tensor.hpp"

namespace msda {

namespace fs = std::filesystem;

/// Raised for filesystem and file-format failures; the message names the path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Planar RGB image, 3 x size x size, values in [0, 1].
struct Image {
  std::size_t size = 0;
  std::vector<double> pixels;

  Image() = default;
  explicit Image(std::size_t s, double fill = 0.0)
      : size(s), pixels(3 * s * s, fill) {}

  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return pixels[(c * size + y) * size + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * size + y) * size + x];
  }
  friend bool operator==(const Image&, const Image&) = default;
};

struct Scene {
  Image image;
  std::vector<GroundTruthBox> boxes;
  Domain domain = Domain::kSource;
  std::uint64_t scene_seed = 0;
};

inline constexpr double kAirlight = 0.8;
inline constexpr double kFogMin = 0.4;
inline constexpr double kFogMax = 0.8;
inline constexpr int kGeneratorVersion = 1;

/// Depth-weighted convex blend toward the airlight; rows lower in the image
/// get denser fog, reaching full intensity `t` on the bottom row.
inline Image fog_blend(const Image& in, double t, double airlight) {
  Image out = in;
  const double denom = in.size > 1 ? static_cast<double>(in.size - 1) : 1.0;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < in.size; ++y) {
      const double t_eff = t * (0.5 + 0.5 * static_cast<double>(y) / denom);
      for (std::size_t x = 0; x < in.size; ++x) {
        out.at(c, y, x) = in.at(c, y, x) * (1.0 - t_eff) + airlight * t_eff;
      }
    }
  }
  return out;
}

/// 3x3 mean filter with edge replication.
inline Image box_blur(const Image& in) {
  Image out(in.size);
  const auto last = static_cast<std::ptrdiff_t>(in.size) - 1;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < in.size; ++y) {
      for (std::size_t x = 0; x < in.size; ++x) {
        double acc = 0.0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            auto yy = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(y) + dy, 0, last);
            auto xx = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(x) + dx, 0, last);
            acc += in.at(c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
          }
        }
        out.at(c, y, x) = acc / 9.0;
      }
    }
  }
  return out;
}

inline Image fog_transform(const Image& in, double t, double airlight = kAirlight) {
  if (!(t >= 0.0 && t <= 1.0) || !(airlight >= 0.0 && airlight <= 1.0)) {
    throw std::invalid_argument("fog_transform: intensity and airlight must lie in [0, 1]");
  }
  Image out = fog_blend(in, t, airlight);
  const int passes = static_cast<int>(std::ceil(3.0 * t));
  for (int i = 0; i < passes; ++i) out = box_blur(out);
  for (auto& v : out.pixels) v = std::clamp(v, 0.0, 1.0);
  return out;
}

namespace detail {

// Rasterizes one shape into a mask over the box [x0, x0+w) x [y0, y0+h).
inline std::vector<unsigned char> shape_mask(int class_id, std::size_t size,
                                             double x0, double y0, double w,
                                             double h) {
  std::vector<unsigned char> mask(size * size, 0);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double px = static_cast<double>(x) + 0.5;
      const double py = static_cast<double>(y) + 0.5;
      bool inside = false;
      if (class_id == 0) {
        const double dx = (px - (x0 + 0.5 * w)) / (0.5 * w);
        const double dy = (py - (y0 + 0.5 * h)) / (0.5 * h);
        inside = dx * dx + dy * dy <= 1.0;
      } else if (class_id == 1) {
        inside = px > x0 && px < x0 + w && py > y0 && py < y0 + h;
      } else {
        // apex at top center, base on the bottom edge
        if (py > y0 && py < y0 + h) {
          const double half = 0.5 * w * (py - y0) / h;
          inside = std::abs(px - (x0 + 0.5 * w)) <= half;
        }
      }
      mask[y * size + x] = inside;
    }
  }
  return mask;
}

inline std::optional<Box> mask_bounds(const std::vector<unsigned char>& mask,
                                      std::size_t size) {
  std::size_t x_min = size, y_min = size, x_max = 0, y_max = 0;
  bool any = false;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      if (!mask[y * size + x]) continue;
      any = true;
      x_min = std::min(x_min, x);
      y_min = std::min(y_min, y);
      x_max = std::max(x_max, x + 1);
      y_max = std::max(y_max, y + 1);
    }
  }
  if (!any) return std::nullopt;
  return Box{static_cast<double>(x_min), static_cast<double>(y_min),
             static_cast<double>(x_max), static_cast<double>(y_max)};
}

}  // namespace detail

/// Deterministic synthetic scene. Layout depends only on `scene_seed`; the
/// target domain additionally receives seeded fog.
inline Scene gen_scene(std::uint64_t scene_seed, Domain domain, std::size_t size,
                       std::size_t num_classes) {
  if (size < 16) throw std::invalid_argument("gen_scene: size must be >= 16");
  if (num_classes == 0 || num_classes > 3) {
    throw std::invalid_argument("gen_scene: num_classes must be 1..3");
  }
  Rng rng(Rng::derive(scene_seed, 0));
  const double s = static_cast<double>(size);
  const double unit = s / 64.0;

  Scene scene;
  scene.domain = domain;
  scene.scene_seed = scene_seed;
  scene.image = Image(size);

  // background: vertical luminance gradient plus bilinear low-frequency noise
  std::array<double, 3> base{};
  for (auto& b : base) b = rng.uniform(0.25, 0.75);
  const double slope = rng.uniform(-0.3, 0.3);
  constexpr std::size_t kCoarse = 5;
  std::array<std::array<double, kCoarse * kCoarse>, 3> coarse{};
  for (auto& ch : coarse) {
    for (auto& v : ch) v = rng.uniform(-0.08, 0.08);
  }
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < size; ++y) {
      const double fy = static_cast<double>(y) / (s - 1.0) * (kCoarse - 1);
      const auto iy = std::min<std::size_t>(static_cast<std::size_t>(fy), kCoarse - 2);
      const double ty = fy - static_cast<double>(iy);
      for (std::size_t x = 0; x < size; ++x) {
        const double fx = static_cast<double>(x) / (s - 1.0) * (kCoarse - 1);
        const auto ix = std::min<std::size_t>(static_cast<std::size_t>(fx), kCoarse - 2);
        const double tx = fx - static_cast<double>(ix);
        const auto& g = coarse[c];
        const double noise =
            (1 - ty) * ((1 - tx) * g[iy * kCoarse + ix] + tx * g[iy * kCoarse + ix + 1]) +
            ty * ((1 - tx) * g[(iy + 1) * kCoarse + ix] + tx * g[(iy + 1) * kCoarse + ix + 1]);
        const double lum = slope * (static_cast<double>(y) / (s - 1.0) - 0.5);
        scene.image.at(c, y, x) = std::clamp(base[c] + lum + noise, 0.0, 1.0);
      }
    }
  }

  const auto count = rng.uniform_int(1, 5);
  const auto min_edge = static_cast<std::int64_t>(std::round(8 * unit));
  const auto max_edge = static_cast<std::int64_t>(std::round(56 * unit));
  constexpr int kAttempts = 64;
  for (std::int64_t k = 0; k < count; ++k) {
    const auto cls = static_cast<int>(
        rng.uniform_int(0, static_cast<std::int64_t>(num_classes) - 1));
    std::array<double, 3> fill{};
    for (auto& f : fill) f = rng.uniform(0.0, 1.0);
    for (int attempt = 0; attempt < kAttempts; ++attempt) {
      const auto w = rng.uniform_int(min_edge, max_edge);
      const auto h = cls == 2 ? rng.uniform_int(min_edge, max_edge) : w;
      const auto x0 = rng.uniform_int(0, static_cast<std::int64_t>(size) - w);
      const auto y0 = rng.uniform_int(0, static_cast<std::int64_t>(size) - h);
      auto mask = detail::shape_mask(cls, size, static_cast<double>(x0),
                                     static_cast<double>(y0), static_cast<double>(w),
                                     static_cast<double>(h));
      auto bounds = detail::mask_bounds(mask, size);
      if (!bounds || bounds->width() < static_cast<double>(min_edge) ||
          bounds->height() < static_cast<double>(min_edge)) {
        continue;
      }
      bool clash = false;
      for (const auto& other : scene.boxes) clash |= iou(other.box, *bounds) >= 0.3;
      if (clash) continue;
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          if (!mask[y * size + x]) continue;
          const bool edge = x == 0 || y == 0 || x + 1 == size || y + 1 == size ||
                            !mask[y * size + x - 1] || !mask[y * size + x + 1] ||
                            !mask[(y - 1) * size + x] || !mask[(y + 1) * size + x];
          for (std::size_t c = 0; c < 3; ++c) {
            scene.image.at(c, y, x) = edge ? 0.5 * fill[c] : fill[c];
          }
        }
      }
      scene.boxes.push_back({cls, *bounds});
      break;
    }
  }

  if (domain == Domain::kTarget) {
    Rng fog_rng(Rng::derive(scene_seed, 1));
    scene.image = fog_transform(scene.image, fog_rng.uniform(kFogMin, kFogMax));
  }
  return scene;
}

// ---------------------------------------------------------------------------
// File formats

inline std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// 8-bit binary PPM (P6), interleaved RGB, row-major.
inline void write_ppm(const fs::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P6\n" << img.size << ' ' << img.size << "\n255\n";
  std::vector<char> buf(3 * img.size * img.size);
  for (std::size_t y = 0; y < img.size; ++y) {
    for (std::size_t x = 0; x < img.size; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        buf[(y * img.size + x) * 3 + c] = static_cast<char>(quantize(img.at(c, y, x)));
      }
    }
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

/// Reads a square P6 image as planar 8-bit samples (3 x size x size).
inline std::vector<std::uint8_t> read_ppm_bytes(const fs::path& path,
                                                std::size_t* size_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || w == 0 || w != h || maxval != 255) {
    throw IoError(path.string() + ": expected square 8-bit P6 image");
  }
  in.get();
  std::vector<char> buf(3 * w * h);
  in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) {
    throw IoError(path.string() + ": truncated pixel data");
  }
  std::vector<std::uint8_t> planar(buf.size());
  for (std::size_t p = 0; p < w * h; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      planar[c * w * h + p] = static_cast<std::uint8_t>(buf[p * 3 + c]);
    }
  }
  *size_out = w;
  return planar;
}

inline Image read_ppm(const fs::path& path) {
  std::size_t size = 0;
  auto bytes = read_ppm_bytes(path, &size);
  Image img(size);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = bytes[i] / 255.0;
  return img;
}

/// One line per box: `class x_min y_min x_max y_max` in integer pixels.
inline void write_annotations(const fs::path& path,
                              const std::vector<GroundTruthBox>& boxes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& b : boxes) {
    out << b.class_id << ' ' << std::lround(b.box.x_min) << ' '
        << std::lround(b.box.y_min) << ' ' << std::lround(b.box.x_max) << ' '
        << std::lround(b.box.y_max) << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::vector<GroundTruthBox> read_annotations(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<GroundTruthBox> boxes;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    GroundTruthBox b;
    long x0, y0, x1, y1;
    if (!(ls >> b.class_id >> x0 >> y0 >> x1 >> y1)) {
      throw IoError(path.string() + ":" + std::to_string(lineno) +
                    ": malformed annotation");
    }
    b.box = {static_cast<double>(x0), static_cast<double>(y0),
             static_cast<double>(x1), static_cast<double>(y1)};
    if (!b.box.valid()) {
      throw IoError(path.string() + ":" + std::to_string(lineno) +
                    ": degenerate box");
    }
    boxes.push_back(b);
  }
  return boxes;
}

// ---------------------------------------------------------------------------
// Manifest

enum class Split { kSourceTrain, kTargetTrain, kTargetTest, kSourceTest };

inline constexpr std::array<Split, 4> kAllSplits = {
    Split::kSourceTrain, Split::kTargetTrain, Split::kTargetTest,
    Split::kSourceTest};

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kSourceTrain: return "source_train";
    case Split::kTargetTrain: return "target_train";
    case Split::kTargetTest: return "target_test";
    case Split::kSourceTest: return "source_test";
  }
  return "?";
}

inline Split parse_split(std::string name) {
  std::replace(name.begin(), name.end(), '-', '_');
  for (auto s : kAllSplits) {
    if (name == split_name(s)) return s;
  }
  throw std::invalid_argument("unknown split '" + name + "'");
}

inline Domain split_domain(Split s) {
  return s == Split::kSourceTrain || s == Split::kSourceTest ? Domain::kSource
                                                             : Domain::kTarget;
}

/// Whether the manifest exposes annotations for the split. Target-train
/// labels exist only in the quarantine directory.
inline bool split_annotated(Split s) { return s != Split::kTargetTrain; }

struct LabeledRecord {
  Split split;
  fs::path image;
  fs::path annotation;
  std::uint64_t scene_seed;
};

/// Record for unlabeled target-train images; carries no annotation path.
struct UnlabeledRecord {
  fs::path image;
  std::uint64_t scene_seed;
};

struct DatasetManifest {
  fs::path root;
  std::uint64_t global_seed = 0;
  int generator_version = kGeneratorVersion;
  std::size_t image_size = 64;
  std::vector<LabeledRecord> labeled;
  std::vector<UnlabeledRecord> unlabeled;

  std::vector<LabeledRecord> split(Split s) const {
    std::vector<LabeledRecord> out;
    for (const auto& r : labeled) {
      if (r.split == s) out.push_back(r);
    }
    return out;
  }
  std::size_t record_count() const { return labeled.size() + unlabeled.size(); }
};

struct SplitCounts {
  std::size_t source_train = 2000;
  std::size_t target_train = 2000;
  std::size_t target_test = 200;
  std::size_t source_test = 0;
};

inline constexpr const char* kManifestName = "manifest.tsv";

inline std::uint64_t split_scene_seed(std::uint64_t global_seed, Split s,
                                      std::size_t index) {
  return (global_seed << 32) | (static_cast<std::uint64_t>(s) << 28) |
         static_cast<std::uint64_t>(index);
}

/// Writes the manifest (TSV: split, domain, image, annotation or '-', seed)
/// preceded by `#` metadata lines.
inline void write_manifest(const DatasetManifest& m) {
  const fs::path path = m.root / kManifestName;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "# generator_version " << m.generator_version << '\n'
      << "# global_seed " << m.global_seed << '\n'
      << "# image_size " << m.image_size << '\n';
  auto line = [&](Split s, const fs::path& img, const std::string& ann,
                  std::uint64_t seed) {
    out << split_name(s) << '\t' << domain_name(split_domain(s)) << '\t'
        << img.generic_string() << '\t' << ann << '\t' << seed << '\n';
  };
  for (auto s : kAllSplits) {
    if (s == Split::kTargetTrain) {
      for (const auto& r : m.unlabeled) line(s, r.image, "-", r.scene_seed);
      continue;
    }
    for (const auto& r : m.labeled) {
      if (r.split == s) line(s, r.image, r.annotation.generic_string(), r.scene_seed);
    }
  }
  if (!out) throw IoError("write failed for " + path.string());
}

/// Accepts either the dataset directory or the manifest file itself.
inline DatasetManifest load_manifest(const fs::path& where) {
  const fs::path path = fs::is_directory(where) ? where / kManifestName : where;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream ls(line.substr(1));
      std::string key;
      ls >> key;
      if (key == "generator_version") ls >> m.generator_version;
      else if (key == "global_seed") ls >> m.global_seed;
      else if (key == "image_size") ls >> m.image_size;
      continue;
    }
    std::array<std::string, 5> f;
    std::istringstream ls(line);
    for (auto& field : f) {
      if (!std::getline(ls, field, '\t')) {
        throw IoError(path.string() + ":" + std::to_string(lineno) +
                      ": expected 5 tab-separated fields");
      }
    }
    const Split s = parse_split(f[0]);
    const std::uint64_t seed = std::stoull(f[4]);
    if (f[1] != domain_name(split_domain(s))) {
      throw IoError(path.string() + ":" + std::to_string(lineno) +
                    ": domain does not match split");
    }
    if (s == Split::kTargetTrain) {
      if (f[3] != "-") {
        throw IoError(path.string() + ":" + std::to_string(lineno) +
                      ": target_train records must not carry annotations");
      }
      m.unlabeled.push_back({f[2], seed});
    } else {
      if (f[3] == "-") {
        throw IoError(path.string() + ":" + std::to_string(lineno) +
                      ": annotated split without annotation path");
      }
      m.labeled.push_back({s, f[2], f[3], seed});
    }
  }
  return m;
}

/// Generates and writes all splits under `out_dir`, returning the manifest.
inline DatasetManifest make_split(std::uint64_t global_seed, SplitCounts counts,
                                  const fs::path& out_dir, std::size_t image_size = 64,
                                  std::size_t num_classes = 3) {
  if (counts.source_train == 0 || counts.target_train == 0 || counts.target_test == 0) {
    throw std::invalid_argument("make_split: source_train, target_train and "
                                "target_test counts must be >= 1");
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  DatasetManifest m;
  m.root = out_dir;
  m.global_seed = global_seed;
  m.image_size = image_size;
  auto count_of = [&](Split s) {
    switch (s) {
      case Split::kSourceTrain: return counts.source_train;
      case Split::kTargetTrain: return counts.target_train;
      case Split::kTargetTest: return counts.target_test;
      case Split::kSourceTest: return counts.source_test;
    }
    return std::size_t{0};
  };
  for (auto s : kAllSplits) {
    const std::size_t n = count_of(s);
    if (n == 0) continue;
    const fs::path img_dir = fs::path("images") / split_name(s);
    const fs::path ann_dir = split_annotated(s)
                                 ? fs::path("labels") / split_name(s)
                                 : fs::path("quarantine") / split_name(s);
    for (const auto& d : {img_dir, ann_dir}) {
      fs::create_directories(out_dir / d, ec);
      if (ec) throw IoError("cannot create " + (out_dir / d).string() + ": " + ec.message());
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto seed = split_scene_seed(global_seed, s, i);
      Scene scene = gen_scene(seed, split_domain(s), image_size, num_classes);
      char stem[32];
      std::snprintf(stem, sizeof stem, "%06zu", i);
      const fs::path img = img_dir / (std::string(stem) + ".ppm");
      const fs::path ann = ann_dir / (std::string(stem) + ".txt");
      write_ppm(out_dir / img, scene.image);
      write_annotations(out_dir / ann, scene.boxes);
      if (split_annotated(s)) m.labeled.push_back({s, img, ann, seed});
      else m.unlabeled.push_back({img, seed});
    }
  }
  write_manifest(m);
  return m;
}

// ---------------------------------------------------------------------------
// In-memory datasets and batching

struct LabeledImage {
  std::vector<std::uint8_t> pixels;  // planar 3 x S x S
  std::vector<GroundTruthBox> boxes;
  std::uint64_t scene_seed = 0;
};

/// Unlabeled image; the type deliberately has nowhere to hold boxes.
struct UnlabeledImage {
  std::vector<std::uint8_t> pixels;
  std::uint64_t scene_seed = 0;
};

inline std::vector<LabeledImage> load_labeled(const DatasetManifest& m, Split s) {
  if (!split_annotated(s)) {
    throw std::invalid_argument(std::string("split ") + split_name(s) +
                                " is not annotated");
  }
  std::vector<LabeledImage> out;
  for (const auto& r : m.split(s)) {
    std::size_t size = 0;
    LabeledImage li;
    li.pixels = read_ppm_bytes(m.root / r.image, &size);
    if (size != m.image_size) {
      throw IoError((m.root / r.image).string() + ": unexpected image size");
    }
    li.boxes = read_annotations(m.root / r.annotation);
    li.scene_seed = r.scene_seed;
    out.push_back(std::move(li));
  }
  return out;
}

inline std::vector<UnlabeledImage> load_unlabeled(const DatasetManifest& m) {
  std::vector<UnlabeledImage> out;
  for (const auto& r : m.unlabeled) {
    std::size_t size = 0;
    UnlabeledImage ui;
    ui.pixels = read_ppm_bytes(m.root / r.image, &size);
    if (size != m.image_size) {
      throw IoError((m.root / r.image).string() + ": unexpected image size");
    }
    ui.scene_seed = r.scene_seed;
    out.push_back(std::move(ui));
  }
  return out;
}

struct TrainingData {
  std::size_t image_size = 64;
  std::vector<LabeledImage> source;
  std::vector<UnlabeledImage> target;
};

inline TrainingData load_training_data(const DatasetManifest& m, bool with_target) {
  TrainingData d;
  d.image_size = m.image_size;
  d.source = load_labeled(m, Split::kSourceTrain);
  if (with_target) d.target = load_unlabeled(m);
  return d;
}

/// Row k of a batch: which domain pool, and which index within it.
struct BatchRow {
  Domain domain;
  std::size_t index;
};

/// Epoch-based sampler without replacement. A batch is a pure function of
/// (seed, epoch, batch index), so resuming needs only the iteration count.
class BatchSampler {
 public:
  BatchSampler(std::size_t n_source, std::size_t n_target, std::size_t batch_size,
               std::uint64_t seed, bool mixed = true)
      : n_source_(n_source), n_target_(n_target), half_(batch_size / 2),
        seed_(seed), mixed_(mixed) {
    if (batch_size == 0 || batch_size % 2 != 0) {
      throw std::invalid_argument("batch_size must be a positive even number");
    }
    if (n_source < half_ || (mixed && n_target < half_)) {
      throw std::invalid_argument("not enough images for one batch per domain");
    }
  }

  std::size_t batches_per_epoch() const {
    return mixed_ ? std::min(n_source_, n_target_) / half_ : n_source_ / half_;
  }

  std::vector<BatchRow> plan(std::uint64_t epoch, std::size_t index) const {
    if (index >= batches_per_epoch()) {
      throw std::out_of_range("batch index beyond epoch end");
    }
    auto perm = [&](std::size_t n, std::uint64_t stream) {
      std::vector<std::size_t> p(n);
      for (std::size_t i = 0; i < n; ++i) p[i] = i;
      Rng r(Rng::derive(seed_, epoch, stream));
      r.shuffle(p);
      return p;
    };
    std::vector<BatchRow> rows;
    const auto src = perm(n_source_, 0);
    for (std::size_t i = 0; i < half_; ++i) {
      rows.push_back({Domain::kSource, src[index * half_ + i]});
    }
    if (mixed_) {
      const auto tgt = perm(n_target_, 1);
      for (std::size_t i = 0; i < half_; ++i) {
        rows.push_back({Domain::kTarget, tgt[index * half_ + i]});
      }
    }
    Rng order(Rng::derive(seed_, epoch, 2 + index));
    order.shuffle(rows);
    return rows;
  }

  /// Next batch of the current epoch, or nullopt once the epoch is exhausted
  /// (the following call starts the next epoch).
  std::optional<std::vector<BatchRow>> next() {
    if (cursor_ >= batches_per_epoch()) {
      cursor_ = 0;
      ++epoch_;
      return std::nullopt;
    }
    return plan(epoch_, cursor_++);
  }

  /// Batch used at 0-based training step `step`, wrapping across epochs.
  std::vector<BatchRow> plan_for_step(std::uint64_t step) const {
    const auto per = batches_per_epoch();
    return plan(step / per, static_cast<std::size_t>(step % per));
  }

  std::uint64_t epoch() const { return epoch_; }

 private:
  std::size_t n_source_;
  std::size_t n_target_;
  std::size_t half_;
  std::uint64_t seed_;
  bool mixed_;
  std::uint64_t epoch_ = 0;
  std::size_t cursor_ = 0;
};

inline Tensor pixels_to_tensor(const std::vector<const std::vector<std::uint8_t>*>& images,
                               std::size_t size) {
  const std::size_t per = 3 * size * size;
  Tensor t = Tensor::zeros({images.size(), 3, size, size});
  auto v = t.mutable_values();
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (std::size_t j = 0; j < per; ++j) v[i * per + j] = (*images[i])[j] / 255.0;
  }
  return t;
}

/// Materializes a planned batch as an image tensor plus domain labels.
inline std::pair<Tensor, BatchLabels> make_batch(const TrainingData& data,
                                                 const std::vector<BatchRow>& rows) {
  std::vector<const std::vector<std::uint8_t>*> imgs;
  BatchLabels labels;
  for (const auto& r : rows) {
    if (r.domain == Domain::kSource) {
      imgs.push_back(&data.source.at(r.index).pixels);
      labels.add_source(data.source[r.index].boxes, data.image_size);
    } else {
      imgs.push_back(&data.target.at(r.index).pixels);
      labels.add_target();
    }
  }
  return {pixels_to_tensor(imgs, data.image_size), std::move(labels)};
}

}  // namespace msda

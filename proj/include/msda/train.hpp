#pragma once

#include <array>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "msda/data.hpp"
#include "msda/loss.hpp"
#include "msda/model.hpp"
#include "msda/ops.hpp"

namespace msda {

struct TrainConfig {
  ModelConfig model;
  std::string data;
  std::size_t batch_size = 16;
  std::size_t iterations = 3000;
  double learning_rate = 0.005;
  double momentum = 0.9;
  double lr_decay_at = 0.8;
  double lr_decay_factor = 0.1;
  std::size_t burn_in = 200;  // lr ramps as (step/burn_in)^4 over these steps
  double grad_clip = 10.0;    // global gradient-norm ceiling; 0 disables
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 500;
  std::size_t log_every = 10;
  std::string out_dir = "run";

  void validate() const {
    model.validate();
    if (iterations == 0) throw std::invalid_argument("TrainConfig.iterations must be > 0");
    if (!(learning_rate > 0.0)) {
      throw std::invalid_argument("TrainConfig.learning_rate must be > 0");
    }
    if (batch_size == 0 || batch_size % 2 != 0) {
      throw std::invalid_argument("TrainConfig.batch_size must be a positive even number");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw std::invalid_argument("TrainConfig.momentum must lie in [0, 1)");
    }
    if (!(lr_decay_at >= 0.0 && lr_decay_at <= 1.0)) {
      throw std::invalid_argument("TrainConfig.lr_decay_at must lie in [0, 1]");
    }
    if (!(grad_clip >= 0.0)) throw std::invalid_argument("TrainConfig.grad_clip must be >= 0");
    if (log_every == 0) throw std::invalid_argument("TrainConfig.log_every must be > 0");
  }

  std::size_t decay_step() const {
    return static_cast<std::size_t>(std::floor(lr_decay_at * static_cast<double>(iterations)));
  }
  double lr_at(std::size_t step) const {
    if (step < burn_in) {
      return learning_rate * std::pow(static_cast<double>(step + 1) / static_cast<double>(burn_in), 4);
    }
    return step < decay_step() ? learning_rate : learning_rate * lr_decay_factor;
  }
};

namespace detail {

// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("config key '" + key + "': expected a boolean, got '" + v + "'");
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) {
    throw std::invalid_argument("config key '" + key + "': expected a number, got '" + v + "'");
  }
  return d;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  std::uint64_t u = 0;
  try {
    if (!v.empty() && v[0] != '-') u = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) {
    throw std::invalid_argument("config key '" + key +
                                "': expected a nonnegative integer, got '" + v + "'");
  }
  return u;
}

}  // namespace detail

/// Canonical `key = value` rendering; also the checkpoint's config echo.
/// `with_out_dir` false leaves out the output directory, which checkpoints
/// do not record (a run's bytes should not depend on where it was written).
inline std::string config_to_text(const TrainConfig& c, bool with_out_dir = true) {
  std::ostringstream os;
  const auto& m = c.model;
  os << "input_size = " << m.input_size << '\n'
     << "base_channels = " << m.base_channels << '\n'
     << "num_classes = " << m.num_classes << '\n'
     << "adaptation_enabled = " << (m.adapt ? "true" : "false") << '\n'
     << "scales_adapted = " << m.scales_adapted.str() << '\n'
     << "grl_lambda = " << detail::fmt_double(m.grl_lambda) << '\n'
     << "anchor_sizes = " << detail::fmt_double(m.anchors[0]) << ','
     << detail::fmt_double(m.anchors[1]) << ',' << detail::fmt_double(m.anchors[2]) << '\n'
     << "data = " << c.data << '\n'
     << "batch_size = " << c.batch_size << '\n'
     << "iterations = " << c.iterations << '\n'
     << "learning_rate = " << detail::fmt_double(c.learning_rate) << '\n'
     << "momentum = " << detail::fmt_double(c.momentum) << '\n'
     << "lr_decay_at = " << detail::fmt_double(c.lr_decay_at) << '\n'
     << "lr_decay_factor = " << detail::fmt_double(c.lr_decay_factor) << '\n'
     << "burn_in = " << c.burn_in << '\n'
     << "grad_clip = " << detail::fmt_double(c.grad_clip) << '\n'
     << "seed = " << c.seed << '\n'
     << "checkpoint_every = " << c.checkpoint_every << '\n'
     << "log_every = " << c.log_every << '\n';
  if (with_out_dir) os << "out_dir = " << c.out_dir << '\n';
  return os.str();
}

/// Applies `key = value` lines onto `base`. Unknown keys are rejected.
inline TrainConfig parse_config(const std::string& text, TrainConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected 'key = value'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string v = detail::trim(line.substr(eq + 1));
    auto& m = base.model;
    if (key == "input_size") m.input_size = detail::parse_uint(key, v);
    else if (key == "base_channels") m.base_channels = detail::parse_uint(key, v);
    else if (key == "num_classes") m.num_classes = detail::parse_uint(key, v);
    else if (key == "adaptation_enabled") m.adapt = detail::parse_bool(key, v);
    else if (key == "scales_adapted") m.scales_adapted = ScaleSet::parse(v);
    else if (key == "grl_lambda") m.grl_lambda = detail::parse_double(key, v);
    else if (key == "anchor_sizes") {
      std::istringstream ls(v);
      std::string item;
      std::size_t i = 0;
      while (std::getline(ls, item, ',')) {
        if (i >= kNumScales) throw std::invalid_argument("anchor_sizes: expected 3 values");
        m.anchors[i++] = detail::parse_double(key, detail::trim(item));
      }
      if (i != kNumScales) throw std::invalid_argument("anchor_sizes: expected 3 values");
    } else if (key == "data") base.data = v;
    else if (key == "batch_size") base.batch_size = detail::parse_uint(key, v);
    else if (key == "iterations") base.iterations = detail::parse_uint(key, v);
    else if (key == "learning_rate") base.learning_rate = detail::parse_double(key, v);
    else if (key == "momentum") base.momentum = detail::parse_double(key, v);
    else if (key == "lr_decay_at") base.lr_decay_at = detail::parse_double(key, v);
    else if (key == "lr_decay_factor") base.lr_decay_factor = detail::parse_double(key, v);
    else if (key == "burn_in") base.burn_in = detail::parse_uint(key, v);
    else if (key == "grad_clip") base.grad_clip = detail::parse_double(key, v);
    else if (key == "seed") base.seed = detail::parse_uint(key, v);
    else if (key == "checkpoint_every") base.checkpoint_every = detail::parse_uint(key, v);
    else if (key == "log_every") base.log_every = detail::parse_uint(key, v);
    else if (key == "out_dir") base.out_dir = v;
    else throw std::invalid_argument("config line " + std::to_string(lineno) +
                                     ": unknown key '" + key + "'");
  }
  return base;
}

inline TrainConfig load_config_file(const fs::path& path, TrainConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

// ---------------------------------------------------------------------------
// Optimizer

/// v <- momentum * v + g; p <- p - lr * v.
inline void sgd_step(std::span<double> param, std::span<const double> grad,
                     std::span<double> velocity, double lr, double momentum) {
  if (param.size() != grad.size() || param.size() != velocity.size()) {
    throw ShapeError("sgd_step: parameter, gradient and buffer sizes differ (" +
                     std::to_string(param.size()) + ", " + std::to_string(grad.size()) +
                     ", " + std::to_string(velocity.size()) + ")");
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i];
    param[i] -= lr * velocity[i];
  }
}

/// Momentum buffers keyed by parameter name, in parameter order.
using MomentumBuffers = std::vector<std::pair<std::string, std::vector<double>>>;

inline MomentumBuffers zero_buffers(const ModelParams& params) {
  MomentumBuffers b;
  for (const auto& e : params.entries()) {
    b.emplace_back(e.name, std::vector<double>(e.tensor.numel(), 0.0));
  }
  return b;
}

inline void sgd_step(ModelParams& params, MomentumBuffers& buffers, double lr,
                     double momentum) {
  auto& entries = params.entries();
  if (entries.size() != buffers.size()) {
    throw ShapeError("sgd_step: " + std::to_string(entries.size()) + " parameters but " +
                     std::to_string(buffers.size()) + " momentum buffers");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& t = entries[i].tensor;
    if (buffers[i].first != entries[i].name) {
      throw ShapeError("sgd_step: buffer '" + buffers[i].first +
                       "' does not match parameter '" + entries[i].name + "'");
    }
    std::vector<double> zero;
    std::span<const double> grad = t.grad();
    if (!t.has_grad()) {
      zero.assign(t.numel(), 0.0);
      grad = zero;
    }
    sgd_step(t.mutable_values(), grad, buffers[i].second, lr, momentum);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kIo, kBadMagic, kBadVersion, kTruncated, kShapeMismatch, kConfig };
  CheckpointError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::array<char, 4> kCheckpointMagic = {'M', 'S', 'D', 'A'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kMomentumPrefix = "momentum/";

struct Checkpoint {
  TrainConfig config;
  std::uint64_t iteration = 0;
  ModelParams params;
  MomentumBuffers momentum;
};

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

class ByteWriter {
 public:
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f64(double v) { raw(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void raw(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    bytes_.insert(bytes_.end(), c, c + n);
  }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}
  void raw(void* p, std::size_t n) {
    if (pos_ + n > bytes_.size()) {
      throw CheckpointError(CheckpointError::Kind::kTruncated,
                            "checkpoint truncated at byte " + std::to_string(bytes_.size()));
    }
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() { std::uint32_t v; raw(&v, 4); return v; }
  std::uint64_t u64() { std::uint64_t v; raw(&v, 8); return v; }
  double f64() { double v; raw(&v, 8); return v; }
  std::string str() {
    const auto n = u32();
    if (pos_ + n > bytes_.size()) {
      throw CheckpointError(CheckpointError::Kind::kTruncated,
                            "checkpoint truncated inside a string");
    }
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

inline void write_tensor(ByteWriter& w, const std::string& name, const Shape& shape,
                         std::span<const double> values) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) w.u64(d);
  for (double v : values) w.f64(v);
}

}  // namespace detail

inline std::vector<char> serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic.data(), 4);
  w.u32(kCheckpointVersion);
  w.str(config_to_text(ck.config, false));
  w.u64(ck.iteration);
  w.u32(static_cast<std::uint32_t>(ck.params.entries().size() + ck.momentum.size()));
  for (const auto& e : ck.params.entries()) {
    detail::write_tensor(w, e.name, e.tensor.shape(), e.tensor.values());
  }
  for (const auto& [name, buf] : ck.momentum) {
    detail::write_tensor(w, kMomentumPrefix + name, ck.params.at(name).shape(), buf);
  }
  return w.bytes();
}

inline void save_checkpoint(const Checkpoint& ck, const fs::path& path) {
  const auto bytes = serialize_checkpoint(ck);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) {
      throw CheckpointError(CheckpointError::Kind::kIo,
                            "cannot open " + tmp.string() + " for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    throw CheckpointError(CheckpointError::Kind::kIo,
                          "cannot move checkpoint into " + path.string() + ": " + ec.message());
  }
}

inline Checkpoint parse_checkpoint(std::vector<char> bytes) {
  using Kind = CheckpointError::Kind;
  detail::ByteReader r(std::move(bytes));
  std::array<char, 4> magic{};
  r.raw(magic.data(), 4);
  if (magic != kCheckpointMagic) throw CheckpointError(Kind::kBadMagic, "not an MSDA checkpoint");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::kBadVersion,
                          "unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  try {
    ck.config = parse_config(r.str());
    ck.config.model.validate();
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(Kind::kConfig, std::string("checkpoint config: ") + e.what());
  }
  ck.iteration = r.u64();
  const auto count = r.u32();

  std::map<std::string, Tensor> found;
  std::vector<std::string> order;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const auto rank = r.u32();
    if (rank > 8) throw CheckpointError(Kind::kShapeMismatch, name + ": implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    const std::size_t n = shape_numel(shape);
    std::vector<double> values(n);
    for (auto& v : values) v = r.f64();
    if (found.count(name)) throw CheckpointError(Kind::kShapeMismatch, "duplicate tensor " + name);
    order.push_back(name);
    found.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!r.at_end()) throw CheckpointError(Kind::kShapeMismatch, "trailing bytes after tensors");

  ck.params = ModelParams(ck.config.model);
  std::size_t used = 0;
  for (const auto& spec : param_specs(ck.config.model)) {
    auto it = found.find(spec.name);
    if (it == found.end()) {
      throw CheckpointError(Kind::kShapeMismatch, "missing tensor " + spec.name);
    }
    if (it->second.shape() != spec.shape) {
      throw CheckpointError(Kind::kShapeMismatch,
                            spec.name + ": stored shape " + shape_str(it->second.shape()) +
                                " but config implies " + shape_str(spec.shape));
    }
    ck.params.add(spec.name, spec.group, it->second.clone(true));
    ++used;
    auto mit = found.find(kMomentumPrefix + spec.name);
    if (mit != found.end()) {
      if (mit->second.shape() != spec.shape) {
        throw CheckpointError(Kind::kShapeMismatch, "momentum buffer shape mismatch for " + spec.name);
      }
      ck.momentum.emplace_back(spec.name, std::vector<double>(mit->second.values().begin(),
                                                              mit->second.values().end()));
      ++used;
    }
  }
  if (used != found.size()) {
    throw CheckpointError(Kind::kShapeMismatch, "checkpoint holds tensors the config does not define");
  }
  if (!ck.momentum.empty() && ck.momentum.size() != ck.params.entries().size()) {
    throw CheckpointError(Kind::kShapeMismatch, "momentum buffers cover only some parameters");
  }
  return ck;
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::kIo, "cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto ck = parse_checkpoint(std::move(bytes));
  // A resumed run writes next to the checkpoint unless told otherwise.
  ck.config.out_dir = path.has_parent_path() ? path.parent_path().string() : ".";
  return ck;
}

/// Drops every DAN tensor and its momentum buffer; the result describes a
/// plain detector. Idempotent.
inline Checkpoint strip_dan(const Checkpoint& ck) {
  Checkpoint out;
  out.config = ck.config;
  out.config.model.adapt = false;
  out.iteration = ck.iteration;
  out.params = ModelParams(out.config.model);
  for (const auto& e : ck.params.entries()) {
    if (e.group != Group::kDan) out.params.add(e.name, e.group, e.tensor.clone(true));
  }
  for (const auto& [name, buf] : ck.momentum) {
    if (!name.starts_with("dan/")) out.momentum.emplace_back(name, buf);
  }
  return out;
}

/// Gradient-free copy of the parameters for inference.
inline ModelParams frozen_copy(const ModelParams& params) {
  ModelParams out(params.config());
  for (const auto& e : params.entries()) out.add(e.name, e.group, e.tensor.clone(false));
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t iteration, const std::string& what)
      : std::runtime_error(what), iteration_(iteration) {}
  std::size_t iteration() const { return iteration_; }

 private:
  std::size_t iteration_;
};

struct MetricsRow {
  std::size_t iter = 0;
  double l_det = 0.0;
  std::array<double, kNumScales> l_dc{};
  double l_total = 0.0;
  double gnorm_backbone = 0.0;
  double gnorm_dan = 0.0;
  double dan_acc = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "iter,l_det,l_dc_f1,l_dc_f2,l_dc_f3,l_total,gnorm_backbone,gnorm_dan,dan_acc";

inline std::string metrics_csv_row(const MetricsRow& m) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g",
                m.iter, m.l_det, m.l_dc[0], m.l_dc[1], m.l_dc[2], m.l_total,
                m.gnorm_backbone, m.gnorm_dan, m.dan_acc);
  return buf;
}

/// Fraction of map locations classified correctly by thresholding p at 0.5,
/// averaged over the given scales; p == 0.5 earns half credit.
inline double domain_accuracy(const DomainMaps& maps, const std::vector<Domain>& tags,
                              ScaleSet scales) {
  double acc = 0.0;
  std::size_t used = 0;
  for (std::size_t s = 0; s < kNumScales; ++s) {
    if (!scales.contains(s) || !maps.maps[s].defined()) continue;
    const auto& m = maps.maps[s];
    const std::size_t plane = m.dim(2) * m.dim(3);
    double hits = 0.0;
    for (std::size_t i = 0; i < tags.size(); ++i) {
      for (std::size_t c = 0; c < plane; ++c) {
        const double p = m.values()[i * plane + c];
        const bool src = tags[i] == Domain::kSource;
        hits += p == 0.5 ? 0.5 : ((p > 0.5) == src ? 1.0 : 0.0);
      }
    }
    acc += hits / static_cast<double>(tags.size() * plane);
    ++used;
  }
  return used ? acc / static_cast<double>(used) : 0.0;
}

inline double group_grad_norm(const ModelParams& params, Group g) {
  double s = 0.0;
  for (const auto& e : params.entries()) {
    if (e.group != g || !e.tensor.has_grad()) continue;
    for (double v : e.tensor.grad()) s += v * v;
  }
  return std::sqrt(s);
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`
/// (no-op when max_norm is 0). Returns the norm before clipping.
inline double clip_grad_norm(ModelParams& params, double max_norm) {
  double s = 0.0;
  for (const auto& e : params.entries()) {
    if (!e.tensor.has_grad()) continue;
    for (double v : e.tensor.grad()) s += v * v;
  }
  const double norm = std::sqrt(s);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& e : params.entries()) {
      if (!e.tensor.has_grad()) continue;
      for (double& v : e.tensor.mutable_grad()) v *= f;
    }
  }
  return norm;
}

/// Output of one forward pass over a training batch.
struct StepForward {
  Features features;
  HeadOutput head;
  DomainMaps maps;
  LossBreakdown loss;
};

/// Builds the full training objective for one batch: detection on the source
/// rows, domain classification on every row.
inline StepForward forward_training_step(Graph& g, const ModelParams& params,
                                         const Tensor& images, const BatchLabels& labels,
                                         DanCoupling coupling = DanCoupling::kReversed) {
  const auto& cfg = params.config();
  StepForward out;
  out.features = forward_backbone(g, params, images);
  Features det_features = out.features;
  BatchLabels det_labels = labels;
  if (labels.source_count() != labels.size()) {
    const auto rows = labels.source_rows();
    for (auto& m : det_features.maps) m = select_rows(g, m, rows);
    det_labels = labels.source_only(cfg.input_size);
  }
  out.head = forward_neck_head(g, params, det_features);
  out.loss.l_det = detection_loss(g, out.head, det_labels, cfg.anchors, cfg.input_size);
  if (cfg.adapt) {
    out.maps = forward_dan(g, params, out.features, cfg.scales_adapted, cfg.grl_lambda, coupling);
    out.loss.l_dc_per_scale = domain_loss_per_scale(g, out.maps, labels.tags(), cfg.scales_adapted);
    for (const auto& l : out.loss.l_dc_per_scale) {
      if (!l.defined()) continue;
      out.loss.l_dc = out.loss.l_dc.defined() ? add(g, out.loss.l_dc, l) : l;
    }
  }
  out.loss.l_total = total_loss(g, out.loss.l_det, out.loss.l_dc);
  return out;
}

struct TrainResult {
  Checkpoint final;
  std::vector<MetricsRow> log;
  double seconds = 0.0;
};

/// Called after every optimizer step with the 1-based iteration and its row.
using StepObserver = std::function<void(const MetricsRow&)>;

struct TrainOptions {
  bool write_files = true;
  bool verbose = false;
  StepObserver observer;
};

inline Checkpoint fresh_checkpoint(const TrainConfig& cfg) {
  cfg.validate();
  Checkpoint ck;
  ck.config = cfg;
  ck.params = build_model(cfg.model, cfg.seed);
  ck.momentum = zero_buffers(ck.params);
  return ck;
}

namespace detail {

// Keeps the header and rows with iter <= keep_through from an existing log.
inline void rewrite_metrics_prefix(const fs::path& path, std::uint64_t keep_through) {
  std::vector<std::string> kept;
  if (std::ifstream in(path); in) {
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line == kMetricsHeader) continue;
      const auto comma = line.find(',');
      if (std::stoull(line.substr(0, comma)) <= keep_through) kept.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << kMetricsHeader << '\n';
  for (const auto& l : kept) out << l << '\n';
}

inline std::string checkpoint_name(std::uint64_t iteration) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "ckpt_%06llu.msda", static_cast<unsigned long long>(iteration));
  return buf;
}

}  // namespace detail

/// Adversarial training from `start` (a fresh or resumed checkpoint) up to
/// start.config.iterations. Writes metrics.csv and checkpoints into out_dir.
inline TrainResult train(Checkpoint start, const TrainingData& data, TrainOptions opts = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const TrainConfig cfg = start.config;
  cfg.validate();
  const bool adapt = cfg.model.adapt;
  if (adapt && data.target.empty()) {
    throw std::invalid_argument("train: adaptation enabled but target_train split is empty");
  }
  if (data.image_size != cfg.model.input_size) {
    throw std::invalid_argument("train: data image size does not match model input_size");
  }
  if (start.momentum.empty()) start.momentum = zero_buffers(start.params);

  const fs::path out_dir = cfg.out_dir;
  const fs::path metrics_path = out_dir / "metrics.csv";
  std::ofstream metrics;
  if (opts.write_files) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
    detail::rewrite_metrics_prefix(metrics_path, start.iteration);
    metrics.open(metrics_path, std::ios::binary | std::ios::app);
  }

  BatchSampler sampler(data.source.size(), data.target.size(), cfg.batch_size, cfg.seed, adapt);
  TrainResult result;
  Checkpoint& state = start;

  for (std::size_t step = state.iteration; step < cfg.iterations; ++step) {
    const auto [images, labels] = make_batch(data, sampler.plan_for_step(step));
    Graph g;
    StepForward fwd = forward_training_step(g, state.params, images, labels);
    const auto& loss = fwd.loss;
    if (!std::isfinite(loss.total_value()) || !std::isfinite(loss.det_value())) {
      if (opts.write_files) save_checkpoint(state, out_dir / "last_good.msda");
      throw DivergenceError(step + 1, "non-finite loss at iteration " + std::to_string(step + 1));
    }
    state.params.zero_grad();
    g.backward(loss.l_total);

    MetricsRow row;
    row.iter = step + 1;
    row.l_det = loss.det_value();
    for (std::size_t s = 0; s < kNumScales; ++s) row.l_dc[s] = loss.dc_value(s);
    row.l_total = loss.total_value();
    row.gnorm_backbone = group_grad_norm(state.params, Group::kBackbone);
    row.gnorm_dan = group_grad_norm(state.params, Group::kDan);
    row.dan_acc = adapt ? domain_accuracy(fwd.maps, labels.tags(), cfg.model.scales_adapted) : 0.0;

    clip_grad_norm(state.params, cfg.grad_clip);
    sgd_step(state.params, state.momentum, cfg.lr_at(step), cfg.momentum);
    state.iteration = step + 1;

    if (opts.observer) opts.observer(row);
    if (row.iter % cfg.log_every == 0) {
      result.log.push_back(row);
      if (opts.write_files) metrics << metrics_csv_row(row) << '\n' << std::flush;
      if (opts.verbose) {
        std::fprintf(stderr, "iter %zu l_det %.4f l_dc %.4f acc %.3f\n", row.iter, row.l_det,
                     loss.dc_total(), row.dan_acc);
      }
    }
    if (opts.write_files && cfg.checkpoint_every > 0 && row.iter % cfg.checkpoint_every == 0) {
      save_checkpoint(state, out_dir / detail::checkpoint_name(row.iter));
    }
  }
  if (opts.write_files) save_checkpoint(state, out_dir / "final.msda");
  result.final = std::move(state);
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

/// Loads the manifest named by cfg.data and trains from scratch.
inline TrainResult train(const TrainConfig& cfg, TrainOptions opts = {}) {
  cfg.validate();
  const auto manifest = load_manifest(cfg.data);
  const auto data = load_training_data(manifest, cfg.model.adapt);
  return train(fresh_checkpoint(cfg), data, std::move(opts));
}

}  // namespace msda

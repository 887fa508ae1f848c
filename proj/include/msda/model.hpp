#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "msda/box.hpp"
#include "msda/ops.hpp"
#include "msda/random.hpp"
#include "msda/tensor.hpp"

namespace msda {

inline constexpr std::size_t kNumScales = 3;
inline constexpr std::array<std::size_t, kNumScales> kScaleStrides = {8, 16, 32};

enum class Group { kBackbone, kNeck, kHead, kDan };

inline const char* group_name(Group g) {
  switch (g) {
    case Group::kBackbone: return "backbone";
    case Group::kNeck: return "neck";
    case Group::kHead: return "head";
    case Group::kDan: return "dan";
  }
  return "?";
}

/// Subset of the three backbone taps F1 (stride 8), F2 (16), F3 (32).
class ScaleSet {
 public:
  constexpr ScaleSet() = default;
  static constexpr ScaleSet all() { return ScaleSet(0b111); }
  static constexpr ScaleSet only(std::size_t scale) {
    return ScaleSet(static_cast<std::uint8_t>(1u << scale));
  }

  constexpr bool contains(std::size_t scale) const {
    return scale < kNumScales && (bits_ >> scale) & 1u;
  }
  constexpr void insert(std::size_t scale) {
    bits_ |= static_cast<std::uint8_t>(1u << scale);
  }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr std::size_t size() const {
    return ((bits_ >> 0) & 1u) + ((bits_ >> 1) & 1u) + ((bits_ >> 2) & 1u);
  }
  constexpr std::uint8_t bits() const { return bits_; }

  /// Parses "F1,F3" (also accepts '+' separators); "" or "none" is empty.
  static ScaleSet parse(const std::string& text) {
    ScaleSet s;
    if (text.empty() || text == "none") return s;
    std::string token;
    auto flush = [&]() {
      if (token == "F1" || token == "f1") s.insert(0);
      else if (token == "F2" || token == "f2") s.insert(1);
      else if (token == "F3" || token == "f3") s.insert(2);
      else throw std::invalid_argument("unknown feature scale '" + token +
                                       "' (expected F1, F2 or F3)");
      token.clear();
    };
    for (char c : text) {
      if (c == ',' || c == '+') flush();
      else if (c != ' ') token.push_back(c);
    }
    flush();
    return s;
  }

  std::string str(char sep = ',') const {
    std::string out;
    for (std::size_t i = 0; i < kNumScales; ++i) {
      if (!contains(i)) continue;
      if (!out.empty()) out.push_back(sep);
      out += "F" + std::to_string(i + 1);
    }
    return out.empty() ? "none" : out;
  }

  friend constexpr bool operator==(ScaleSet, ScaleSet) = default;

 private:
  constexpr explicit ScaleSet(std::uint8_t bits) : bits_(bits) {}
  std::uint8_t bits_ = 0;
};

struct ModelConfig {
  std::size_t input_size = 64;
  std::size_t base_channels = 8;
  std::size_t num_classes = 3;
  bool adapt = true;
  ScaleSet scales_adapted = ScaleSet::all();
  double grl_lambda = 0.1;
  std::array<double, kNumScales> anchors = {12.0, 24.0, 48.0};

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw std::invalid_argument("ModelConfig." + field + ": " + why);
    };
    if (input_size == 0 || input_size % 32 != 0) {
      fail("input_size", "must be a positive multiple of 32, got " +
                             std::to_string(input_size));
    }
    if (base_channels < 2 || base_channels % 2 != 0) {
      fail("base_channels", "must be an even number >= 2");
    }
    if (num_classes == 0) fail("num_classes", "must be positive");
    if (adapt && scales_adapted.empty()) {
      fail("scales_adapted", "must be nonempty when adaptation is enabled");
    }
    if (!(grl_lambda >= 0.0) || !std::isfinite(grl_lambda)) {
      fail("grl_lambda", "must be finite and nonnegative");
    }
    for (double a : anchors) {
      if (!(a > 0.0)) fail("anchors", "anchor sizes must be positive");
    }
  }

  /// Scales that carry a DAN branch.
  ScaleSet dan_scales() const { return adapt ? scales_adapted : ScaleSet{}; }

  std::size_t stage_channels(std::size_t stage) const {
    // stage in 1..5; doubling from C, capped at 8C
    std::size_t c = base_channels << (stage - 1);
    return std::min(c, 8 * base_channels);
  }
  std::size_t feature_channels(std::size_t scale) const {
    return stage_channels(scale + 3);
  }
  std::size_t neck_channels(std::size_t scale) const {
    return scale == 0 ? 2 * base_channels : 4 * base_channels;
  }
  std::size_t grid_size(std::size_t scale) const {
    return input_size / kScaleStrides[scale];
  }
  std::size_t head_channels() const { return 5 + num_classes; }
};

struct ParamSpec {
  std::string name;
  Group group;
  Shape shape;
};

/// Every learnable tensor of the architecture, in initialization order.
inline std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> specs;
  auto conv = [&](const std::string& prefix, Group g, std::size_t cin,
                  std::size_t cout, std::size_t k) {
    specs.push_back({prefix + "/weight", g, {cout, cin, k, k}});
    specs.push_back({prefix + "/bias", g, {cout}});
  };
  const std::size_t c = cfg.base_channels;
  conv("backbone/stem/conv", Group::kBackbone, 3, c, 3);
  std::size_t prev = c;
  for (std::size_t s = 1; s <= 5; ++s) {
    const std::size_t ch = cfg.stage_channels(s);
    const std::string p = "backbone/stage" + std::to_string(s);
    conv(p + "/down", Group::kBackbone, prev, ch, 3);
    conv(p + "/res/conv1", Group::kBackbone, ch, ch, 3);
    conv(p + "/res/conv2", Group::kBackbone, ch, ch, 3);
    prev = ch;
  }
  conv("neck/p3", Group::kNeck, cfg.feature_channels(2), cfg.neck_channels(2), 3);
  conv("neck/p2", Group::kNeck, cfg.neck_channels(2) + cfg.feature_channels(1),
       cfg.neck_channels(1), 3);
  conv("neck/p1", Group::kNeck, cfg.neck_channels(1) + cfg.feature_channels(0),
       cfg.neck_channels(0), 3);
  for (std::size_t s = 0; s < kNumScales; ++s) {
    const std::string p = "head/s" + std::to_string(s + 1);
    conv(p + "/conv", Group::kHead, cfg.neck_channels(s), cfg.neck_channels(s), 3);
    conv(p + "/pred", Group::kHead, cfg.neck_channels(s), cfg.head_channels(), 1);
  }
  for (std::size_t s = 0; s < kNumScales; ++s) {
    if (!cfg.dan_scales().contains(s)) continue;
    const std::string p = "dan/f" + std::to_string(s + 1);
    const std::size_t ch = cfg.feature_channels(s);
    conv(p + "/conv1", Group::kDan, ch, ch / 2, 1);
    conv(p + "/conv2", Group::kDan, ch / 2, 1, 1);
  }
  return specs;
}

/// Named learnable tensors, each tagged with the group it belongs to.
class ModelParams {
 public:
  struct Entry {
    std::string name;
    Group group;
    Tensor tensor;
  };

  ModelParams() = default;
  explicit ModelParams(ModelConfig cfg) : config_(std::move(cfg)) {}

  const ModelConfig& config() const { return config_; }

  void add(std::string name, Group group, Tensor tensor) {
    if (index_.count(name)) {
      throw std::invalid_argument("duplicate parameter '" + name + "'");
    }
    index_[name] = entries_.size();
    entries_.push_back({std::move(name), group, std::move(tensor)});
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw std::out_of_range("no parameter named '" + name + "'");
    }
    return entries_[it->second].tensor;
  }
  Tensor& at(const std::string& name) {
    return const_cast<Tensor&>(std::as_const(*this).at(name));
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  std::size_t count(Group g) const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.group == g;
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  ModelConfig config_;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline constexpr double kObjectnessPrior = 0.01;
// Damping on the second conv of each residual branch and on prediction
// layers, relative to the He bound.
inline constexpr double kResidualInitScale = 0.1;
inline constexpr double kPredInitScale = 0.1 / 2.4373;

/// He-uniform weights for leaky units, U(-b, b) with
/// b = sqrt(6 / ((1 + slope^2) fan_in)); residual-branch outputs and prediction
/// layers are scaled down. Biases are zero except the objectness channel of
/// each prediction layer, set to logit(0.01).
inline ModelParams build_model(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams params(cfg);
  Rng rng(seed);
  for (auto& spec : param_specs(cfg)) {
    Tensor t = Tensor::zeros(spec.shape, true);
    auto v = t.mutable_values();
    if (spec.shape.size() == 4) {
      const double fan_in =
          static_cast<double>(spec.shape[1] * spec.shape[2] * spec.shape[3]);
      double bound =
          std::sqrt(6.0 / ((1.0 + kLeakySlope * kLeakySlope) * fan_in));
      if (spec.name.ends_with("/res/conv2/weight")) bound *= kResidualInitScale;
      if (spec.name.ends_with("/pred/weight")) bound *= kPredInitScale;
      for (auto& x : v) x = rng.uniform(-bound, bound);
    } else if (spec.name.ends_with("/pred/bias")) {
      v[4] = std::log(kObjectnessPrior / (1.0 - kObjectnessPrior));
    }
    params.add(spec.name, spec.group, std::move(t));
  }
  return params;
}

struct Features {
  std::array<Tensor, kNumScales> maps;  // F1, F2, F3
};

struct HeadOutput {
  // N x (5 + classes) x Hs x Ws; channels tx, ty, tw, th, obj, class logits
  std::array<Tensor, kNumScales> grids;
};

struct DomainMaps {
  // N x 1 x Hs x Ws probabilities; undefined for scales without a DAN branch
  std::array<Tensor, kNumScales> maps;
};

namespace detail {

inline Tensor conv_layer(Graph& g, const ModelParams& p, const std::string& name,
                         const Tensor& x, Conv2dOptions opt) {
  return conv2d(g, x, p.at(name + "/weight"), p.at(name + "/bias"), opt);
}

inline Tensor conv3x3_leaky(Graph& g, const ModelParams& p,
                            const std::string& name, const Tensor& x) {
  return leaky_relu(g, conv_layer(g, p, name, x, {.stride = 1, .pad = 1}));
}

}  // namespace detail

inline Features forward_backbone(Graph& g, const ModelParams& params,
                                 const Tensor& images) {
  const auto& cfg = params.config();
  if (images.rank() != 4 || images.dim(1) != 3 ||
      images.dim(2) != cfg.input_size || images.dim(3) != cfg.input_size) {
    throw ShapeError("forward_backbone: expected N x 3 x " +
                     std::to_string(cfg.input_size) + " x " +
                     std::to_string(cfg.input_size) + " images, got " +
                     shape_str(images.shape()));
  }
  Features f;
  Tensor x = detail::conv3x3_leaky(g, params, "backbone/stem/conv", images);
  for (std::size_t s = 1; s <= 5; ++s) {
    const std::string p = "backbone/stage" + std::to_string(s);
    x = leaky_relu(g, downsample_conv(g, x, params.at(p + "/down/weight"),
                                      params.at(p + "/down/bias")));
    Tensor r = detail::conv3x3_leaky(g, params, p + "/res/conv1", x);
    r = detail::conv3x3_leaky(g, params, p + "/res/conv2", r);
    x = add(g, x, r);
    if (s >= 3) f.maps[s - 3] = x;
  }
  return f;
}

inline HeadOutput forward_neck_head(Graph& g, const ModelParams& params,
                                    const Features& f) {
  const auto& cfg = params.config();
  for (std::size_t s = 0; s < kNumScales; ++s) {
    const auto& m = f.maps[s];
    if (!m.defined() || m.rank() != 4 || m.dim(1) != cfg.feature_channels(s) ||
        m.dim(2) != cfg.grid_size(s) || m.dim(3) != cfg.grid_size(s)) {
      throw ShapeError("forward_neck_head: feature F" + std::to_string(s + 1) +
                       " has shape " +
                       (m.defined() ? shape_str(m.shape()) : "<none>"));
    }
  }
  std::array<Tensor, kNumScales> pyramid;
  pyramid[2] = detail::conv3x3_leaky(g, params, "neck/p3", f.maps[2]);
  pyramid[1] = detail::conv3x3_leaky(
      g, params, "neck/p2",
      concat_channels(g, upsample_nearest(g, pyramid[2], 2), f.maps[1]));
  pyramid[0] = detail::conv3x3_leaky(
      g, params, "neck/p1",
      concat_channels(g, upsample_nearest(g, pyramid[1], 2), f.maps[0]));
  HeadOutput out;
  for (std::size_t s = 0; s < kNumScales; ++s) {
    const std::string p = "head/s" + std::to_string(s + 1);
    Tensor h = detail::conv3x3_leaky(g, params, p + "/conv", pyramid[s]);
    out.grids[s] = detail::conv_layer(g, params, p + "/pred", h, {});
  }
  return out;
}

/// How the DAN branch couples back into the backbone. Only kReversed is used
/// for training; the others exist for diagnostics and tests.
enum class DanCoupling { kReversed, kIdentity, kDetached };

inline DomainMaps forward_dan(Graph& g, const ModelParams& params,
                              const Features& f, ScaleSet scales, double lambda,
                              DanCoupling coupling = DanCoupling::kReversed) {
  const auto& cfg = params.config();
  if (lambda < 0.0) throw std::invalid_argument("forward_dan: lambda < 0");
  DomainMaps out;
  for (std::size_t s = 0; s < kNumScales; ++s) {
    if (!scales.contains(s)) continue;
    if (!cfg.dan_scales().contains(s)) {
      throw std::invalid_argument("forward_dan: scale F" + std::to_string(s + 1) +
                                  " is not in scales_adapted (" +
                                  cfg.dan_scales().str() + ")");
    }
    if (!f.maps[s].defined()) {
      throw std::invalid_argument("forward_dan: feature F" +
                                  std::to_string(s + 1) + " was not produced");
    }
    Tensor x;
    if (coupling == DanCoupling::kIdentity) x = identity(g, f.maps[s]);
    else if (coupling == DanCoupling::kDetached || lambda == 0.0)
      x = stop_gradient(f.maps[s]);
    else x = grl(g, f.maps[s], lambda);
    const std::string p = "dan/f" + std::to_string(s + 1);
    x = leaky_relu(g, detail::conv_layer(g, params, p + "/conv1", x, {}));
    x = detail::conv_layer(g, params, p + "/conv2", x, {});
    out.maps[s] = sigmoid(g, x);
  }
  return out;
}

/// Closed-form activation shapes keyed by layer name, for shape audits.
inline std::map<std::string, Shape> expected_shapes(const ModelConfig& cfg,
                                                    std::size_t batch) {
  std::map<std::string, Shape> table;
  std::size_t ext = cfg.input_size;
  table["backbone/stem"] = {batch, cfg.base_channels, ext, ext};
  for (std::size_t s = 1; s <= 5; ++s) {
    ext /= 2;
    table["backbone/stage" + std::to_string(s)] = {batch, cfg.stage_channels(s),
                                                   ext, ext};
  }
  for (std::size_t s = 0; s < kNumScales; ++s) {
    const auto n = cfg.grid_size(s);
    const auto tag = std::to_string(s + 1);
    table["F" + tag] = {batch, cfg.feature_channels(s), n, n};
    table["neck/p" + tag] = {batch, cfg.neck_channels(s), n, n};
    table["head/s" + tag] = {batch, cfg.head_channels(), n, n};
    if (cfg.dan_scales().contains(s)) {
      table["dan/f" + tag + "/hidden"] = {batch, cfg.feature_channels(s) / 2, n, n};
      table["dan/f" + tag] = {batch, 1, n, n};
    }
  }
  return table;
}

/// Greedy per-class non-maximum suppression; keeps the higher score of any
/// pair with IoU above `iou_thresh`.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) {
                     if (a.score != b.score) return a.score > b.score;
                     return a.box < b.box;
                   });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.class_id == d.class_id && iou(k.box, d.box) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

inline constexpr double kMaxLogSize = 4.0;

/// Turns raw head grids into scored boxes, one list per image.
inline std::vector<std::vector<Detection>> decode_predictions(
    const HeadOutput& head, double conf_thresh, double nms_iou,
    const std::array<double, kNumScales>& anchors, std::size_t image_size) {
  if (!(conf_thresh > 0.0 && conf_thresh < 1.0) ||
      !(nms_iou > 0.0 && nms_iou < 1.0)) {
    throw std::invalid_argument("decode_predictions: thresholds must lie in (0,1)");
  }
  const std::size_t n = head.grids[0].dim(0);
  const std::size_t channels = head.grids[0].dim(1);
  const std::size_t classes = channels - 5;
  const double limit = static_cast<double>(image_size);
  std::vector<std::vector<Detection>> out(n);
  for (std::size_t b = 0; b < n; ++b) {
    std::vector<Detection> cand;
    for (std::size_t s = 0; s < kNumScales; ++s) {
      const auto& grid = head.grids[s];
      const std::size_t hs = grid.dim(2), ws = grid.dim(3), plane = hs * ws;
      const double stride = limit / static_cast<double>(hs);
      auto v = grid.values();
      const double* base = v.data() + b * channels * plane;
      for (std::size_t i = 0; i < hs; ++i) {
        for (std::size_t j = 0; j < ws; ++j) {
          const std::size_t cell = i * ws + j;
          auto at = [&](std::size_t c) { return base[c * plane + cell]; };
          const double obj = stable_sigmoid(at(4));
          double best = -1.0;
          int best_class = 0;
          for (std::size_t c = 0; c < classes; ++c) {
            const double pc = stable_sigmoid(at(5 + c));
            if (pc > best) {
              best = pc;
              best_class = static_cast<int>(c);
            }
          }
          const double score = obj * best;
          if (!(score >= conf_thresh)) continue;
          const double cx = (static_cast<double>(j) + stable_sigmoid(at(0))) * stride;
          const double cy = (static_cast<double>(i) + stable_sigmoid(at(1))) * stride;
          const double bw = anchors[s] * std::exp(std::min(at(2), kMaxLogSize));
          const double bh = anchors[s] * std::exp(std::min(at(3), kMaxLogSize));
          Box box{std::max(0.0, cx - 0.5 * bw), std::max(0.0, cy - 0.5 * bh),
                  std::min(limit, cx + 0.5 * bw), std::min(limit, cy + 0.5 * bh)};
          if (!box.valid()) continue;
          cand.push_back({best_class, box, score, b});
        }
      }
    }
    out[b] = nms(std::move(cand), nms_iou);
  }
  return out;
}

}  // namespace msda

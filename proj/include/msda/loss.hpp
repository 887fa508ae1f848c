#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "msda/box.hpp"
#include "msda/model.hpp"
#include "msda/ops.hpp"

namespace msda {

enum class Domain { kTarget = 0, kSource = 1 };

inline const char* domain_name(Domain d) {
  return d == Domain::kSource ? "source" : "target";
}

/// Domain tags for a mixed batch; boxes only exist for source images.
class BatchLabels {
 public:
  void add_source(std::vector<GroundTruthBox> boxes, std::size_t image_size) {
    for (const auto& b : boxes) {
      const double s = static_cast<double>(image_size);
      if (!b.box.valid() || b.box.x_min < 0.0 || b.box.y_min < 0.0 ||
          b.box.x_max > s || b.box.y_max > s) {
        throw std::invalid_argument("BatchLabels: box outside image bounds or "
                                    "degenerate");
      }
    }
    tags_.push_back(Domain::kSource);
    boxes_.push_back(std::move(boxes));
  }
  void add_target() {
    tags_.push_back(Domain::kTarget);
    boxes_.emplace_back();
  }

  std::size_t size() const { return tags_.size(); }
  Domain tag(std::size_t i) const { return tags_.at(i); }
  const std::vector<Domain>& tags() const { return tags_; }
  const std::vector<GroundTruthBox>& boxes(std::size_t i) const {
    return boxes_.at(i);
  }
  std::size_t source_count() const {
    std::size_t n = 0;
    for (auto t : tags_) n += t == Domain::kSource;
    return n;
  }
  std::vector<std::size_t> source_rows() const {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < tags_.size(); ++i) {
      if (tags_[i] == Domain::kSource) rows.push_back(i);
    }
    return rows;
  }
  /// Labels of the source rows only, in batch order.
  BatchLabels source_only(std::size_t image_size) const {
    BatchLabels out;
    for (auto r : source_rows()) out.add_source(boxes_[r], image_size);
    return out;
  }

 private:
  std::vector<Domain> tags_;
  std::vector<std::vector<GroundTruthBox>> boxes_;
};

/// Per-scale domain BCE, averaged over the N*Hs*Ws locations of each map.
inline std::array<Tensor, kNumScales> domain_loss_per_scale(
    Graph& g, const DomainMaps& maps, const std::vector<Domain>& tags,
    ScaleSet scales) {
  std::array<Tensor, kNumScales> out;
  for (std::size_t s = 0; s < kNumScales; ++s) {
    if (!scales.contains(s)) continue;
    const Tensor& m = maps.maps[s];
    if (!m.defined()) {
      throw std::invalid_argument("domain_loss: missing map for scale F" +
                                  std::to_string(s + 1));
    }
    if (m.rank() != 4 || m.dim(0) != tags.size() || m.dim(1) != 1) {
      throw ShapeError("domain_loss: map " + shape_str(m.shape()) +
                       " does not cover " + std::to_string(tags.size()) +
                       " images");
    }
    const std::size_t plane = m.dim(2) * m.dim(3);
    std::vector<double> t(m.numel());
    for (std::size_t i = 0; i < tags.size(); ++i) {
      const double v = tags[i] == Domain::kSource ? 1.0 : 0.0;
      std::fill_n(t.begin() + static_cast<std::ptrdiff_t>(i * plane), plane, v);
    }
    out[s] = bce(g, m, Tensor(m.shape(), std::move(t)), Reduction::kMean);
  }
  return out;
}

inline Tensor domain_loss(Graph& g, const DomainMaps& maps,
                          const std::vector<Domain>& tags, ScaleSet scales) {
  if (scales.empty()) throw std::invalid_argument("domain_loss: no scales");
  auto per = domain_loss_per_scale(g, maps, tags, scales);
  Tensor total;
  for (const auto& l : per) {
    if (!l.defined()) continue;
    total = total.defined() ? add(g, total, l) : l;
  }
  return total;
}

struct DetectionLossWeights {
  double box = 5.0;
  double obj = 1.0;
  double cls = 1.0;
};

/// One ground-truth box bound to the grid cell responsible for it.
struct Assignment {
  std::size_t image = 0;
  std::size_t scale = 0;
  std::size_t row = 0;
  std::size_t col = 0;
  int class_id = 0;
  double x_frac = 0.0;
  double y_frac = 0.0;
  double log_w = 0.0;
  double log_h = 0.0;
};

/// Picks the scale whose anchor is nearest (in log space) to the box's
/// geometric-mean edge, then the cell containing the box center. A cell
/// already claimed by an earlier box keeps that box.
inline std::vector<Assignment> assign_targets(
    const BatchLabels& labels, const std::array<double, kNumScales>& anchors,
    std::size_t image_size) {
  std::vector<Assignment> out;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels.tag(n) != Domain::kSource) continue;
    for (const auto& gt : labels.boxes(n)) {
      const double edge = std::sqrt(gt.box.width() * gt.box.height());
      std::size_t scale = 0;
      double best = INFINITY;
      for (std::size_t s = 0; s < kNumScales; ++s) {
        const double d = std::abs(std::log(edge / anchors[s]));
        if (d < best) {
          best = d;
          scale = s;
        }
      }
      const auto stride = static_cast<double>(kScaleStrides[scale]);
      const std::size_t grid = image_size / kScaleStrides[scale];
      const double gx = gt.box.center_x() / stride;
      const double gy = gt.box.center_y() / stride;
      const auto col = std::min(grid - 1, static_cast<std::size_t>(gx));
      const auto row = std::min(grid - 1, static_cast<std::size_t>(gy));
      bool taken = false;
      for (const auto& a : out) {
        taken |= a.image == n && a.scale == scale && a.row == row && a.col == col;
      }
      if (taken) continue;
      out.push_back({n, scale, row, col, gt.class_id,
                     gx - static_cast<double>(col), gy - static_cast<double>(row),
                     std::log(gt.box.width() / anchors[scale]),
                     std::log(gt.box.height() / anchors[scale])});
    }
  }
  return out;
}

namespace detail {

// Clamped-BCE of sigmoid(logit) against t, with its derivative wrt the logit
// (zero where the probability is clamped, matching the bce operator).
inline double bce_logit(double logit, double t, double* dlogit) {
  const double p = stable_sigmoid(logit);
  const double pc = std::clamp(p, kBceEps, 1.0 - kBceEps);
  *dlogit = (p < kBceEps || p > 1.0 - kBceEps) ? 0.0 : p - t;
  return -(t * std::log(pc) + (1.0 - t) * std::log(1.0 - pc));
}

}  // namespace detail

/// Single-anchor YOLO-style loss over source images, normalized by the number
/// of source images. Target rows contribute nothing.
inline Tensor detection_loss(Graph& g, const HeadOutput& head,
                             const BatchLabels& labels,
                             const std::array<double, kNumScales>& anchors,
                             std::size_t image_size,
                             DetectionLossWeights w = {}) {
  const std::size_t n_src = labels.source_count();
  if (n_src == 0) {
    throw std::invalid_argument("detection_loss: batch has no source images");
  }
  const std::size_t n = head.grids[0].dim(0);
  if (n != labels.size()) {
    throw ShapeError("detection_loss: head covers " + std::to_string(n) +
                     " images but labels cover " + std::to_string(labels.size()));
  }
  const std::size_t channels = head.grids[0].dim(1);
  const std::size_t classes = channels - 5;
  const double norm = 1.0 / static_cast<double>(n_src);

  auto assignments = assign_targets(labels, anchors, image_size);
  std::array<std::vector<double>, kNumScales> grads;
  double total = 0.0;

  for (std::size_t s = 0; s < kNumScales; ++s) {
    const Tensor& grid = head.grids[s];
    const std::size_t hs = grid.dim(2), ws = grid.dim(3), plane = hs * ws;
    auto v = grid.values();
    auto& gr = grads[s];
    gr.assign(grid.numel(), 0.0);
    std::vector<unsigned char> positive(n * plane, 0);
    for (const auto& a : assignments) {
      if (a.scale == s) positive[a.image * plane + a.row * ws + a.col] = 1;
    }
    for (std::size_t b = 0; b < n; ++b) {
      if (labels.tag(b) != Domain::kSource) continue;
      const std::size_t obj_off = (b * channels + 4) * plane;
      for (std::size_t c = 0; c < plane; ++c) {
        double d;
        total += w.obj * norm *
                 detail::bce_logit(v[obj_off + c], positive[b * plane + c], &d);
        gr[obj_off + c] += w.obj * norm * d;
      }
    }
    for (const auto& a : assignments) {
      if (a.scale != s) continue;
      const std::size_t cell = a.row * ws + a.col;
      auto idx = [&](std::size_t ch) {
        return (a.image * channels + ch) * plane + cell;
      };
      const double sx = stable_sigmoid(v[idx(0)]);
      const double sy = stable_sigmoid(v[idx(1)]);
      const double ex = sx - a.x_frac, ey = sy - a.y_frac;
      const double ew = v[idx(2)] - a.log_w, eh = v[idx(3)] - a.log_h;
      total += w.box * norm * (ex * ex + ey * ey + ew * ew + eh * eh);
      gr[idx(0)] += w.box * norm * 2.0 * ex * sx * (1.0 - sx);
      gr[idx(1)] += w.box * norm * 2.0 * ey * sy * (1.0 - sy);
      gr[idx(2)] += w.box * norm * 2.0 * ew;
      gr[idx(3)] += w.box * norm * 2.0 * eh;
      for (std::size_t c = 0; c < classes; ++c) {
        double d;
        const double t = static_cast<int>(c) == a.class_id ? 1.0 : 0.0;
        total += w.cls * norm * detail::bce_logit(v[idx(5 + c)], t, &d);
        gr[idx(5 + c)] += w.cls * norm * d;
      }
    }
  }

  Tensor out = Tensor::scalar(total);
  if (!Graph::any_requires_grad(
          {&head.grids[0], &head.grids[1], &head.grids[2]})) {
    return out;
  }
  auto shared = std::make_shared<std::array<std::vector<double>, kNumScales>>(
      std::move(grads));
  std::vector<Tensor> inputs(head.grids.begin(), head.grids.end());
  g.record("detection_loss", inputs, out, [inputs, out, shared]() mutable {
    const double up = out.grad()[0];
    for (std::size_t s = 0; s < kNumScales; ++s) {
      if (!inputs[s].requires_grad()) continue;
      auto gx = inputs[s].mutable_grad();
      const auto& local = (*shared)[s];
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += up * local[i];
    }
  });
  return out;
}

/// L_det + L_dc as a graph sum. The domain-loss weight lives inside the GRL,
/// so no extra factor is applied here. An undefined l_dc means no adaptation.
inline Tensor total_loss(Graph& g, const Tensor& l_det, const Tensor& l_dc) {
  if (!l_dc.defined()) return l_det;
  return add(g, l_det, l_dc);
}

struct LossBreakdown {
  Tensor l_det;
  std::array<Tensor, kNumScales> l_dc_per_scale;
  Tensor l_dc;
  Tensor l_total;

  double det_value() const { return l_det.item(); }
  double dc_value(std::size_t s) const {
    return l_dc_per_scale[s].defined() ? l_dc_per_scale[s].item() : 0.0;
  }
  double dc_total() const { return l_dc.defined() ? l_dc.item() : 0.0; }
  double total_value() const { return l_total.item(); }
};

}  // namespace msda

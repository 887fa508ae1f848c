#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "msda/grad_check.hpp"
#include "msda/loss.hpp"
#include "msda/ops.hpp"
#include "msda/random.hpp"

namespace msda {

struct AuditEntry {
  std::string op;
  double max_error = 0.0;
  double tolerance = 1e-4;
  bool passed() const { return max_error < tolerance; }
};

namespace detail {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo, double hi,
                            bool requires_grad = true) {
  const auto n = shape_numel(shape);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from zero so a central difference never straddles the
// leaky_relu kink.
inline Tensor kink_free_tensor(Rng& rng, Shape shape) {
  Tensor t = random_tensor(rng, std::move(shape), 0.05, 1.0);
  for (auto& x : t.mutable_values()) {
    if (rng.uniform() < 0.5) x = -x;
  }
  return t;
}

// Weighted sum with a fixed random projection, so every output entry gets a
// distinct upstream gradient.
inline Tensor project(Graph& g, const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w = random_tensor(rng, y.shape(), -1.0, 1.0, false);
  return sum(g, mul(g, y, w));
}

}  // namespace detail

/// Central-difference check of every differentiable operator over `seeds`
/// random instances. Smooth operators get the tighter tolerance.
inline std::vector<AuditEntry> run_grad_audit(std::size_t seeds = 20, double eps = 1e-5) {
  using detail::kink_free_tensor;
  using detail::project;
  using detail::random_tensor;
  std::vector<AuditEntry> table = {
      {"conv2d", 0.0, 1e-6},          {"downsample_conv", 0.0, 1e-6},
      {"sigmoid", 0.0, 1e-6},         {"upsample_nearest", 0.0, 1e-6},
      {"concat_channels", 0.0, 1e-6}, {"leaky_relu", 0.0, 1e-4},
      {"bce", 0.0, 1e-4},             {"grl", 0.0, 1e-4},
      {"add", 0.0, 1e-4},             {"mul", 0.0, 1e-4},
      {"scale", 0.0, 1e-4},           {"sum", 0.0, 1e-4},
      {"select_rows", 0.0, 1e-4},     {"domain_loss", 0.0, 1e-4},
      {"detection_loss", 0.0, 1e-4},  {"conv_leaky_sigmoid_bce", 0.0, 1e-4},
  };
  auto record = [&](const std::string& op, double err) {
    for (auto& e : table) {
      if (e.op == op) e.max_error = std::max(e.max_error, err);
    }
  };
  const GradCheckOptions opt{eps, 1.0};

  for (std::size_t seed = 0; seed < seeds; ++seed) {
    Rng rng(Rng::derive(0xA0D17, seed, 0));
    const std::uint64_t ps = seed * 7919 + 1;
    {
      const std::size_t stride = 1 + seed % 2, pad = seed % 2;
      std::vector<Tensor> in = {random_tensor(rng, {2, 2, 5, 5}, -1, 1),
                                random_tensor(rng, {3, 2, 3, 3}, -1, 1),
                                random_tensor(rng, {3}, -1, 1)};
      record("conv2d", grad_check(
                           [&](Graph& g, std::span<const Tensor> x) {
                             return project(g, conv2d(g, x[0], x[1], x[2], {stride, pad}), ps);
                           },
                           in, opt));
    }
    {
      std::vector<Tensor> in = {random_tensor(rng, {1, 2, 4, 4}, -1, 1),
                                random_tensor(rng, {2, 2, 3, 3}, -1, 1),
                                random_tensor(rng, {2}, -1, 1)};
      record("downsample_conv", grad_check(
                                    [&](Graph& g, std::span<const Tensor> x) {
                                      return project(g, downsample_conv(g, x[0], x[1], x[2]), ps);
                                    },
                                    in, opt));
    }
    {
      std::vector<Tensor> in = {random_tensor(rng, {2, 3, 2, 2}, -4, 4)};
      record("sigmoid", grad_check(
                            [&](Graph& g, std::span<const Tensor> x) {
                              return project(g, sigmoid(g, x[0]), ps);
                            },
                            in, opt));
    }
    {
      std::vector<Tensor> in = {random_tensor(rng, {1, 2, 2, 3}, -1, 1)};
      const std::size_t factor = 1 + seed % 3;
      record("upsample_nearest", grad_check(
                                     [&](Graph& g, std::span<const Tensor> x) {
                                       return project(g, upsample_nearest(g, x[0], factor), ps);
                                     },
                                     in, opt));
    }
    {
      std::vector<Tensor> in = {random_tensor(rng, {2, 2, 2, 2}, -1, 1),
                                random_tensor(rng, {2, 3, 2, 2}, -1, 1)};
      record("concat_channels", grad_check(
                                    [&](Graph& g, std::span<const Tensor> x) {
                                      return project(g, concat_channels(g, x[0], x[1]), ps);
                                    },
                                    in, opt));
    }
    {
      std::vector<Tensor> in = {kink_free_tensor(rng, {2, 2, 3, 3})};
      record("leaky_relu", grad_check(
                               [&](Graph& g, std::span<const Tensor> x) {
                                 return project(g, leaky_relu(g, x[0]), ps);
                               },
                               in, opt));
    }
    {
      std::vector<Tensor> in = {random_tensor(rng, {2, 1, 2, 2}, 0.05, 0.95)};
      Tensor t = Tensor::zeros({2, 1, 2, 2});
      for (auto& v : t.mutable_values()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
      const auto red = seed % 2 ? Reduction::kMean : Reduction::kSum;
      record("bce", grad_check(
                        [&](Graph& g, std::span<const Tensor> x) { return bce(g, x[0], t, red); },
                        in, opt));
    }
    {
      const double lambda = std::array{0.01, 0.1, 1.0}[seed % 3];
      std::vector<Tensor> in = {random_tensor(rng, {1, 2, 2, 2}, -1, 1)};
      record("grl", grad_check(
                        [&](Graph& g, std::span<const Tensor> x) {
                          return project(g, sigmoid(g, grl(g, x[0], lambda)), ps);
                        },
                        in, {eps, -lambda}));
    }
    {
      std::vector<Tensor> in = {random_tensor(rng, {2, 3}, -1, 1),
                                random_tensor(rng, {2, 3}, -1, 1)};
      record("add", grad_check(
                        [&](Graph& g, std::span<const Tensor> x) {
                          return project(g, add(g, x[0], x[1]), ps);
                        },
                        in, opt));
      record("mul", grad_check(
                        [&](Graph& g, std::span<const Tensor> x) {
                          return project(g, mul(g, x[0], x[1]), ps);
                        },
                        in, opt));
      const double f = rng.uniform(-2, 2);
      record("scale", grad_check(
                          [&](Graph& g, std::span<const Tensor> x) {
                            return project(g, scale(g, x[0], f), ps);
                          },
                          in, opt));
      record("sum", grad_check(
                        [&](Graph& g, std::span<const Tensor> x) {
                          return sum(g, mul(g, x[0], x[0]));
                        },
                        in, opt));
    }
    {
      std::vector<Tensor> in = {random_tensor(rng, {4, 2, 2, 2}, -1, 1)};
      const std::vector<std::size_t> rows = {3, 1, seed % 4};
      record("select_rows", grad_check(
                                [&](Graph& g, std::span<const Tensor> x) {
                                  return project(g, select_rows(g, x[0], rows), ps);
                                },
                                in, opt));
    }
    {
      std::vector<Tensor> in = {random_tensor(rng, {2, 1, 4, 4}, 0.05, 0.95),
                                random_tensor(rng, {2, 1, 2, 2}, 0.05, 0.95)};
      const std::vector<Domain> tags = {Domain::kSource, Domain::kTarget};
      record("domain_loss", grad_check(
                                [&](Graph& g, std::span<const Tensor> x) {
                                  DomainMaps m;
                                  m.maps[1] = x[0];
                                  m.maps[2] = x[1];
                                  return domain_loss(g, m, tags, ScaleSet::parse("F2,F3"));
                                },
                                in, opt));
    }
    {
      // 32x32 image: grids 4x4, 2x2, 1x1 with 6 channels (one class).
      const std::size_t size = 32;
      const std::array<double, kNumScales> anchors = {6.0, 12.0, 24.0};
      std::vector<Tensor> in = {random_tensor(rng, {2, 6, 4, 4}, -2, 2),
                                random_tensor(rng, {2, 6, 2, 2}, -2, 2),
                                random_tensor(rng, {2, 6, 1, 1}, -2, 2)};
      BatchLabels labels;
      std::vector<GroundTruthBox> boxes;
      const double x0 = rng.uniform(0, 12), y0 = rng.uniform(0, 12);
      boxes.push_back({0, Box{x0, y0, x0 + rng.uniform(4, 18), y0 + rng.uniform(4, 18)}});
      labels.add_source(boxes, size);
      labels.add_target();
      record("detection_loss", grad_check(
                                   [&](Graph& g, std::span<const Tensor> x) {
                                     HeadOutput h;
                                     for (std::size_t s = 0; s < kNumScales; ++s) h.grids[s] = x[s];
                                     return detection_loss(g, h, labels, anchors, size);
                                   },
                                   in, opt));
    }
    {
      std::vector<Tensor> in = {random_tensor(rng, {2, 2, 3, 3}, -1, 1),
                                random_tensor(rng, {1, 2, 1, 1}, -1, 1),
                                random_tensor(rng, {1}, -1, 1)};
      Tensor t = Tensor::zeros({2, 1, 3, 3});
      for (auto& v : t.mutable_values()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
      // Keep the conv output away from the leaky kink at this seed.
      auto kink_free = [&]() {
        Graph g;
        for (double v : conv2d(g, in[0], in[1], in[2]).values()) {
          if (std::abs(v) < 1e-3) return false;
        }
        return true;
      };
      while (!kink_free()) in[2].mutable_values()[0] += 0.01;
      record("conv_leaky_sigmoid_bce",
             grad_check(
                 [&](Graph& g, std::span<const Tensor> x) {
                   return bce(g, sigmoid(g, leaky_relu(g, conv2d(g, x[0], x[1], x[2]))), t);
                 },
                 in, opt));
    }
  }
  return table;
}

}  // namespace msda

#pragma once

// Shared fixtures for the unit and acceptance tests: random tiny networks,
// an independent reference forward pass and finite-difference helpers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mpq/mpq.hpp"
#include "mpq/synthetic.hpp"

namespace mpq::testing {

/// Tiny classifier with at most ~500 parameters. Even seeds give an MLP,
/// odd seeds a small conv net (with global average pooling every fourth).
inline NetworkSpec random_tiny_net(std::uint64_t seed) {
  std::mt19937_64 rng(seed * 7919 + 17);
  std::uniform_int_distribution<std::size_t> pick(2, 5);
  auto layer = [&](Shape s, double scale) { return synthetic::random_tensor(std::move(s), rng, scale); };
  std::vector<LayerSpec> layers;
  const std::size_t classes = pick(rng);
  if (seed % 2 == 0) {
    const std::size_t in = pick(rng) + 1, hidden = pick(rng) + 2;
    layers.push_back(LayerSpec::dense("fc1", layer({hidden, in}, 0.8)));
    layers.push_back(LayerSpec::relu("relu1"));
    layers.push_back(LayerSpec::dense("fc2", layer({hidden, hidden}, 0.6)));
    layers.push_back(LayerSpec::relu("relu2"));
    layers.push_back(LayerSpec::dense("fc3", layer({classes, hidden}, 0.6)));
    layers.push_back(LayerSpec::softmax("softmax"));
    return NetworkSpec(std::move(layers), {in}, classes);
  }
  const std::size_t side = 5, c1 = 2 + seed % 3;
  const std::size_t stride = seed % 3 == 0 ? 2 : 1;
  layers.push_back(LayerSpec::conv2d("conv1", layer({c1, 1, 3, 3}, 0.6), 1, 1));
  layers.push_back(LayerSpec::relu("relu1"));
  layers.push_back(LayerSpec::conv2d("conv2", layer({3, c1, 3, 3}, 0.5), stride, 0));
  layers.push_back(LayerSpec::relu("relu2"));
  const std::size_t o = (side - 3) / stride + 1;
  if (seed % 4 == 3) {
    layers.push_back(LayerSpec::global_avg_pool("gap"));
    layers.push_back(LayerSpec::dense("fc", layer({classes, 3}, 0.8)));
  } else {
    layers.push_back(LayerSpec::flatten("flatten"));
    layers.push_back(LayerSpec::dense("fc", layer({classes, 3 * o * o}, 0.4)));
  }
  layers.push_back(LayerSpec::softmax("softmax"));
  return NetworkSpec(std::move(layers), {1, side, side}, classes);
}

inline std::vector<Sample> random_samples(const NetworkSpec& net, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> label(0, net.classes() - 1);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto x = synthetic::random_tensor(net.input_shape(), rng, 1.0);
    out.push_back({std::move(x), label(rng)});
  }
  return out;
}

/// Straightforward forward evaluation written independently of netcore:
/// explicit index arithmetic, no shared kernels.
inline std::vector<double> reference_forward(const NetworkSpec& net, const WeightSet& weights, const Tensor& input) {
  std::vector<double> x = input.to_doubles();
  Shape shape = input.shape();
  std::size_t w = 0;
  for (const auto& layer : net.layers()) {
    switch (layer.kind) {
      case LayerKind::Dense: {
        const auto& W = weights[w++];
        const auto& s = layer.weight->shape();
        std::vector<double> y(s[0], 0.0);
        for (std::size_t o = 0; o < s[0]; ++o)
          for (std::size_t i = 0; i < s[1]; ++i) y[o] += W[o * s[1] + i] * x[i];
        x = y;
        shape = {s[0]};
        break;
      }
      case LayerKind::Conv2d: {
        const auto& W = weights[w++];
        const auto& s = layer.weight->shape();
        const long C = static_cast<long>(shape[0]), H = static_cast<long>(shape[1]), Wd = static_cast<long>(shape[2]);
        const long k = static_cast<long>(s[2]), st = static_cast<long>(layer.conv.stride),
                   p = static_cast<long>(layer.conv.padding);
        const long Ho = (H + 2 * p - k) / st + 1, Wo = (Wd + 2 * p - k) / st + 1;
        std::vector<double> y(s[0] * Ho * Wo, 0.0);
        for (long co = 0; co < static_cast<long>(s[0]); ++co)
          for (long oy = 0; oy < Ho; ++oy)
            for (long ox = 0; ox < Wo; ++ox) {
              double acc = 0.0;
              for (long ci = 0; ci < C; ++ci)
                for (long ky = 0; ky < k; ++ky)
                  for (long kx = 0; kx < k; ++kx) {
                    const long iy = oy * st + ky - p, ix = ox * st + kx - p;
                    if (iy < 0 || iy >= H || ix < 0 || ix >= Wd) continue;
                    acc += W[((co * C + ci) * k + ky) * k + kx] * x[(ci * H + iy) * Wd + ix];
                  }
              y[(co * Ho + oy) * Wo + ox] = acc;
            }
        x = y;
        shape = {s[0], static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo)};
        break;
      }
      case LayerKind::Relu:
        for (auto& v : x) v = v > 0.0 ? v : 0.0;
        break;
      case LayerKind::Flatten:
        shape = {x.size()};
        break;
      case LayerKind::GlobalAvgPool: {
        const std::size_t hw = shape[1] * shape[2];
        std::vector<double> y(shape[0], 0.0);
        for (std::size_t c = 0; c < shape[0]; ++c) {
          for (std::size_t i = 0; i < hw; ++i) y[c] += x[c * hw + i];
          y[c] /= static_cast<double>(hw);
        }
        x = y;
        shape = {shape[0]};
        break;
      }
      case LayerKind::Softmax: {
        double m = x[0];
        for (double v : x) m = std::max(m, v);
        double z = 0.0;
        for (auto& v : x) z += (v = std::exp(v - m));
        for (auto& v : x) v /= z;
        break;
      }
    }
  }
  return x;
}

inline double reference_loss(const NetworkSpec& net, const WeightSet& weights, const Sample& s) {
  return -std::log(reference_forward(net, weights, s.input)[s.label]);
}

/// Central differences of the single-sample loss over every weight.
inline std::vector<double> fd_loss_gradient(const NetworkSpec& net, const Sample& s, double h = 1e-4) {
  const auto base = net.weights();
  auto flat = base.flatten();
  std::vector<double> g(flat.size());
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const double w0 = flat[i];
    flat[i] = w0 + h;
    const double lp = sample_loss(net, base.unflatten(flat), s);
    flat[i] = w0 - h;
    const double lm = sample_loss(net, base.unflatten(flat), s);
    flat[i] = w0;
    g[i] = (lp - lm) / (2.0 * h);
  }
  return g;
}

inline double rel_err(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

/// Seeded random MCKP instance: 1..max_classes classes of 1..max_items items
/// with increasing bit-widths, random sizes and random (not necessarily
/// monotone) perturbations. Capacity lies between the all-min and all-max
/// weights.
inline MckpInstance random_instance(std::mt19937_64& rng, std::size_t max_classes, std::size_t max_items,
                                    std::int64_t max_params = 100) {
  std::uniform_int_distribution<std::size_t> ncls(1, max_classes), nitems(1, max_items);
  std::uniform_int_distribution<std::int64_t> params(1, max_params);
  std::uniform_int_distribution<int> bit_step(1, 3);
  std::uniform_real_distribution<double> loss(0.0, 1.0), frac(0.0, 1.0);
  MckpInstance inst;
  const auto k = ncls(rng);
  std::int64_t lo = 0, hi = 0;
  for (std::size_t c = 0; c < k; ++c) {
    MckpClass cls{"L" + std::to_string(c), params(rng), {}};
    const auto m = nitems(rng);
    int bit = 0;
    for (std::size_t j = 0; j < m; ++j) {
      bit += bit_step(rng);
      // mostly decreasing losses with occasional dominated items
      const double l = loss(rng) / static_cast<double>(bit) * (frac(rng) < 0.2 ? 3.0 : 1.0);
      cls.items.push_back({bit, cls.params * bit, -l});
    }
    lo += cls.items.front().weight;
    hi += cls.items.back().weight;
    inst.classes.push_back(std::move(cls));
  }
  inst.capacity = lo + static_cast<std::int64_t>(frac(rng) * static_cast<double>(hi - lo));
  return inst;
}

}  // namespace mpq::testing

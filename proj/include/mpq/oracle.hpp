#pragma once

// Ground-truth computations used to validate the approximations: the true
// loss change under quantization, finite-difference Hessian quadratic forms
// for tiny nets, the literal Jacobian/Sigma Gauss-Newton form and rank
// correlation between a proxy and the true perturbation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mpq/error.hpp"
#include "mpq/netcore.hpp"
#include "mpq/perturbation.hpp"
#include "mpq/quantizer.hpp"

namespace mpq {

using LayerBits = std::vector<std::pair<std::string, int>>;

/// Base network plus a partial bit assignment, with the quantized weights
/// materialized. Layers absent from the assignment keep full precision.
class QuantizedNetView {
 public:
  QuantizedNetView(const NetworkSpec& base, LayerBits assignment)
      : base_(&base), assignment_(std::move(assignment)), weights_(base.weights()) {
    for (const auto& [name, bit] : assignment_) {
      const auto i = weights_.find(name);
      if (i == WeightSet::npos) throw std::invalid_argument("assignment names unknown weighted layer '" + name + "'");
      const auto grid = solve_step_size(std::span<const double>(weights_[i]), bit);
      weights_[i] = quantize(std::span<const double>(weights_[i]), grid);
    }
  }

  const NetworkSpec& base() const noexcept { return *base_; }
  const LayerBits& assignment() const noexcept { return assignment_; }
  const WeightSet& weights() const noexcept { return weights_; }
  NetworkSpec materialize() const { return base_->with_weights(weights_); }

 private:
  const NetworkSpec* base_;
  LayerBits assignment_;
  WeightSet weights_;
};

/// mean_loss(quantized) - mean_loss(original), both in double precision.
inline double exact_loss_perturbation(const NetworkSpec& net, std::span<const Sample> samples,
                                      const LayerBits& assignment) {
  const QuantizedNetView view(net, assignment);
  if (assignment.empty()) return 0.0;
  return mean_loss(net, view.weights(), samples) - mean_loss(net, samples);
}

/// Exact loss change for every single-layer, single-bit perturbation, laid
/// out like a PerturbationTable. Entries may be negative.
inline PerturbationTable exact_perturbation_table(const NetworkSpec& net, std::span<const Sample> samples,
                                                  std::span<const int> bits) {
  check_bits(bits);
  PerturbationTable t;
  t.layers = net.weighted_names();
  t.bits.assign(bits.begin(), bits.end());
  t.samples = samples.size();
  const auto weights = net.weights();
  const double base = mean_loss(net, weights, samples);
  for (std::size_t l = 0; l < t.layers.size(); ++l) {
    std::vector<double> row;
    for (int b : bits) {
      auto w = weights;
      const auto grid = solve_step_size(std::span<const double>(w[l]), b);
      w[l] = quantize(std::span<const double>(w[l]), grid);
      row.push_back(mean_loss(net, w, samples) - base);
    }
    t.values.push_back(std::move(row));
  }
  return t;
}

inline constexpr std::size_t kHessianParameterBudget = 500;
inline constexpr double kHessianStep = 1e-5;  // small enough not to straddle ReLU kinks

struct FdHessian {
  std::size_t n = 0;
  std::vector<double> h;     // symmetrized, row-major n x n
  double asymmetry = 0.0;    // max |H_ij - H_ji| / max |H_ij| before symmetrization

  double operator()(std::size_t i, std::size_t j) const { return h[i * n + j]; }

  double quadratic(std::span<const double> v) const {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < n; ++j) row += h[i * n + j] * v[j];
      s += v[i] * row;
    }
    return s;
  }
};

/// Central-difference Hessian of a function given through its gradient:
/// column j is (grad(x + h e_j) - grad(x - h e_j)) / 2h, then (H + H^T) / 2.
inline FdHessian fd_hessian(const std::function<std::vector<double>(std::span<const double>)>& grad,
                            std::span<const double> x0, double step = kHessianStep) {
  FdHessian out;
  out.n = x0.size();
  const std::size_t n = out.n;
  std::vector<double> raw(n * n);
  std::vector<double> x(x0.begin(), x0.end());
  for (std::size_t j = 0; j < n; ++j) {
    x[j] = x0[j] + step;
    const auto gp = grad(x);
    x[j] = x0[j] - step;
    const auto gm = grad(x);
    x[j] = x0[j];
    for (std::size_t i = 0; i < n; ++i) raw[i * n + j] = (gp[i] - gm[i]) / (2.0 * step);
  }
  double max_abs = 0.0, max_asym = 0.0;
  out.h.resize(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      max_abs = std::max(max_abs, std::abs(raw[i * n + j]));
      max_asym = std::max(max_asym, std::abs(raw[i * n + j] - raw[j * n + i]));
      out.h[i * n + j] = 0.5 * (raw[i * n + j] + raw[j * n + i]);
    }
  }
  out.asymmetry = max_abs > 0.0 ? max_asym / max_abs : 0.0;
  return out;
}

/// Gradient of mean_loss over all weighted layers, flattened in layer order.
inline std::vector<double> mean_loss_gradient(const NetworkSpec& net, const WeightSet& weights,
                                              std::span<const Sample> samples) {
  if (samples.empty()) throw std::invalid_argument("mean loss gradient needs at least one sample");
  std::vector<double> g(weights.total_size(), 0.0);
  for (const auto& s : samples) {
    const auto flat = per_sample_loss_grad(net, weights, s).flatten();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += flat[i];
  }
  for (auto& v : g) v /= static_cast<double>(samples.size());
  return g;
}

inline FdHessian loss_hessian(const NetworkSpec& net, std::span<const Sample> samples, double step = kHessianStep) {
  if (net.parameter_count() > kHessianParameterBudget) {
    throw BudgetError("finite-difference Hessian limited to " + std::to_string(kHessianParameterBudget) +
                      " parameters, network has " + std::to_string(net.parameter_count()));
  }
  const auto weights = net.weights();
  const auto x0 = weights.flatten();
  return fd_hessian(
      [&](std::span<const double> x) { return mean_loss_gradient(net, weights.unflatten(x), samples); }, x0, step);
}

/// 1/2 dw^T H dw with H the finite-difference Hessian of the mean loss.
inline double exact_hessian_quadratic(const NetworkSpec& net, std::span<const Sample> samples,
                                      std::span<const double> dw) {
  if (dw.size() != net.parameter_count()) throw ShapeError("perturbation length does not match parameter count");
  if (std::all_of(dw.begin(), dw.end(), [](double v) { return v == 0.0; })) return 0.0;
  return 0.5 * loss_hessian(net, samples).quadratic(dw);
}

inline constexpr std::size_t kJacobianBudget = 10'000'000;

/// Literal Gauss-Newton form 1/(2N) sum_n [J_n dw]^T Sigma_n [J_n dw] with the
/// full softmax-output Jacobian J_n (p rows) and Sigma_n = diag(y_k / f_k^2)
/// for one-hot labels y.
inline double ggn_reference(const NetworkSpec& net, std::span<const Sample> samples, std::span<const double> dw) {
  if (samples.empty()) throw std::invalid_argument("ggn_reference needs at least one sample");
  if (dw.size() != net.parameter_count()) throw ShapeError("perturbation length does not match parameter count");
  if (net.parameter_count() * net.classes() > kJacobianBudget) {
    throw BudgetError("full Jacobian of " + std::to_string(net.classes()) + " x " +
                      std::to_string(net.parameter_count()) + " exceeds the budget");
  }
  const auto weights = net.weights();
  const std::size_t p = net.classes();
  double total = 0.0;
  for (const auto& s : samples) {
    check_label(net, s);
    const auto trace = forward_trace(net, weights, s.input.data());
    const auto& f = trace.probs;
    std::vector<double> jdw(p);
    std::vector<double> seed(p);
    for (std::size_t k = 0; k < p; ++k) {
      // d f_k / d z_j = f_k (delta_kj - f_j)
      for (std::size_t j = 0; j < p; ++j) seed[j] = f[k] * ((k == j ? 1.0 : 0.0) - f[j]);
      jdw[k] = dot(backprop_logits(net, weights, trace, seed).flatten(), dw);
    }
    double q = 0.0;
    for (std::size_t k = 0; k < p; ++k) {
      const double y = k == s.label ? 1.0 : 0.0;
      if (y == 0.0) continue;
      if (!(f[k] > 0.0)) throw NumericError("zero predicted probability for the true class");
      q += jdw[k] * (y / (f[k] * f[k])) * jdw[k];
    }
    total += q;
  }
  return total / (2.0 * static_cast<double>(samples.size()));
}

/// Flattened full-network perturbation that is dw in layer `layer` and zero
/// elsewhere.
inline std::vector<double> single_layer_perturbation(const NetworkSpec& net, std::size_t layer,
                                                     std::span<const double> dw) {
  auto blocks = net.weights().zeros_like();
  if (blocks[layer].size() != dw.size()) throw ShapeError("perturbation length does not match layer size");
  blocks[layer].assign(dw.begin(), dw.end());
  return blocks.flatten();
}

/// Average ranks (1-based), ties sharing the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t m = i; m <= j; ++m) r[idx[m]] = rank;
    i = j + 1;
  }
  return r;
}

/// Spearman rank correlation; empty when fewer than 3 points or either side
/// is constant.
inline std::optional<double> spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman needs equal-length inputs");
  if (x.size() < 3) return std::nullopt;
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

struct RankingReport {
  struct Row {
    std::string layer;
    int bit = 0;
    double proxy = 0.0;
    double exact = 0.0;
  };
  std::vector<Row> rows;
  std::vector<std::pair<int, std::optional<double>>> per_bit;  // correlation across layers at each bit
  std::optional<double> pooled;                               // across all (layer, bit) pairs
  bool skipped = false;                                       // fewer than 3 weighted layers
};

/// Rank agreement between a proxy table and the exact single-layer
/// perturbations. Both tables must share layers and bits.
inline RankingReport ranking_fidelity(const PerturbationTable& proxy, const PerturbationTable& exact) {
  if (proxy.layers != exact.layers || proxy.bits != exact.bits) {
    throw std::invalid_argument("proxy and exact tables cover different layers or bits");
  }
  RankingReport r;
  for (std::size_t l = 0; l < proxy.layers.size(); ++l) {
    for (std::size_t j = 0; j < proxy.bits.size(); ++j) {
      r.rows.push_back({proxy.layers[l], proxy.bits[j], proxy.values[l][j], exact.values[l][j]});
    }
  }
  if (proxy.layers.size() < 3) {
    r.skipped = true;
    return r;
  }
  std::vector<double> px, ex;
  for (std::size_t j = 0; j < proxy.bits.size(); ++j) {
    std::vector<double> a, b;
    for (std::size_t l = 0; l < proxy.layers.size(); ++l) {
      a.push_back(proxy.values[l][j]);
      b.push_back(exact.values[l][j]);
    }
    r.per_bit.emplace_back(proxy.bits[j], spearman(a, b));
  }
  for (const auto& row : r.rows) {
    px.push_back(row.proxy);
    ex.push_back(row.exact);
  }
  r.pooled = spearman(px, ex);
  return r;
}

inline RankingReport ranking_fidelity(const NetworkSpec& net, std::span<const Sample> samples,
                                      std::span<const int> bits, const PerturbationOptions& opt = {}) {
  return ranking_fidelity(perturbation_table(net, samples, bits, opt), exact_perturbation_table(net, samples, bits));
}

/// Diagnostic CSV: `layer,bit,proxy,exact`.
inline void write_diagnostic_csv(std::ostream& os, const RankingReport& r) {
  os << "layer,bit,proxy,exact\n";
  for (const auto& row : r.rows) {
    os << row.layer << ',' << row.bit << ',' << format_double(row.proxy) << ',' << format_double(row.exact) << '\n';
  }
}

}  // namespace mpq

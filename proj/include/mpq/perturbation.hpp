#pragma once

// Per-layer, per-bit loss perturbation estimates.
//
// The second-order proxy is the block-diagonal Gauss-Newton form
//   dL[l][b] = 1/(2N) * sum_n (g_n^(l) . dw_b^(l))^2
// where g_n^(l) is the per-sample cross-entropy gradient of layer l. Since
// g_n = -(1/f_t) grad f_t for the true class t, this equals the one-row
// Jacobian form (grad f_t . dw)^2 / f_t^2 without materialising f's Jacobian.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mpq/error.hpp"
#include "mpq/netcore.hpp"
#include "mpq/parallel.hpp"
#include "mpq/quantizer.hpp"
#include "mpq/tensor.hpp"

namespace mpq {

enum class ProxyKind { SecondOrder, FirstOrder, HessianFree, Combined };

inline std::string_view to_string(ProxyKind kind) {
  switch (kind) {
    case ProxyKind::SecondOrder: return "second-order";
    case ProxyKind::FirstOrder: return "first-order";
    case ProxyKind::HessianFree: return "hessian-free";
    case ProxyKind::Combined: return "combined";
  }
  return "unknown";
}

inline std::optional<ProxyKind> parse_proxy_kind(std::string_view s) {
  for (auto k : {ProxyKind::SecondOrder, ProxyKind::FirstOrder, ProxyKind::HessianFree, ProxyKind::Combined}) {
    if (to_string(k) == s) return k;
  }
  return std::nullopt;
}

struct PerturbationTable {
  std::vector<std::string> layers;
  std::vector<int> bits;
  std::vector<std::vector<double>> values;  // [layer][bit index]
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  ProxyKind proxy = ProxyKind::SecondOrder;

  std::size_t layer_index(std::string_view name) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i] == name) return i;
    }
    throw std::out_of_range("table has no layer '" + std::string(name) + "'");
  }
  std::size_t bit_index(int bit) const {
    for (std::size_t j = 0; j < bits.size(); ++j) {
      if (bits[j] == bit) return j;
    }
    throw std::out_of_range("table has no bit-width " + std::to_string(bit));
  }
  double value(std::string_view layer, int bit) const { return values[layer_index(layer)][bit_index(bit)]; }
};

struct PerturbationOptions {
  ProxyKind proxy = ProxyKind::SecondOrder;
  // Deterministic mode reduces per-sample terms in sample order regardless
  // of thread count. Off: per-chunk partial sums merge in completion order.
  bool deterministic = true;
  unsigned threads = 0;  // 0: MPQ_THREADS or hardware concurrency
  std::uint64_t seed = 0;
};

/// Quantization perturbations dw = Q(w, b) - w for every weighted layer and
/// candidate bit, computed once up front. [layer][bit index][parameter].
using DeltaSet = std::vector<std::vector<std::vector<double>>>;

inline void check_bits(std::span<const int> bits) {
  if (bits.empty()) throw std::invalid_argument("candidate bit set is empty");
  for (int b : bits) {
    if (b < 1 || b > 32) throw std::invalid_argument("candidate bit-width " + std::to_string(b) + " outside [1, 32]");
  }
}

inline DeltaSet quantization_deltas(const WeightSet& weights, std::span<const int> bits) {
  check_bits(bits);
  DeltaSet out(weights.size());
  for (std::size_t l = 0; l < weights.size(); ++l) {
    for (int b : bits) out[l].push_back(delta_w(std::span<const double>(weights[l]), b));
  }
  return out;
}

/// Seeded shuffle of [0, count); the first n entries form a calibration
/// subset drawn uniformly without replacement.
inline std::vector<std::size_t> shuffled_indices(std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

namespace detail {

// Per-sample projections g_n^(l) . dw_b^(l), laid out [sample][layer * B + bit].
class Projections {
 public:
  Projections(std::size_t samples, std::size_t layers, std::size_t bits)
      : layers_(layers), bits_(bits), data_(samples * layers * bits) {}

  std::span<double> row(std::size_t n) { return {data_.data() + n * width(), width()}; }
  std::span<const double> row(std::size_t n) const { return {data_.data() + n * width(), width()}; }
  std::size_t width() const noexcept { return layers_ * bits_; }

 private:
  std::size_t layers_, bits_;
  std::vector<double> data_;
};

inline void project_sample(const NetworkSpec& net, const WeightSet& weights, const Sample& sample,
                           const DeltaSet& deltas, std::span<double> out) {
  const auto grad = per_sample_loss_grad(net, weights, sample);
  std::size_t k = 0;
  for (std::size_t l = 0; l < deltas.size(); ++l) {
    for (const auto& d : deltas[l]) out[k++] = dot(grad[l], d);
  }
}

// Sums of d and d^2 over a set of samples, width L*B each.
struct Moments {
  std::vector<double> sum, sum_sq;
  explicit Moments(std::size_t width = 0) : sum(width, 0.0), sum_sq(width, 0.0) {}
  void add(std::span<const double> row) {
    for (std::size_t k = 0; k < row.size(); ++k) {
      sum[k] += row[k];
      sum_sq[k] += row[k] * row[k];
    }
  }
  void merge(const Moments& o) {
    for (std::size_t k = 0; k < sum.size(); ++k) {
      sum[k] += o.sum[k];
      sum_sq[k] += o.sum_sq[k];
    }
  }
};

inline PerturbationTable make_table(const NetworkSpec& net, std::span<const int> bits, const DeltaSet& deltas,
                                    const Moments& m, std::size_t n, const PerturbationOptions& opt) {
  PerturbationTable t;
  t.layers = net.weighted_names();
  t.bits.assign(bits.begin(), bits.end());
  t.samples = n;
  t.seed = opt.seed;
  t.proxy = opt.proxy;
  const std::size_t B = bits.size();
  const double inv_n = n > 0 ? 1.0 / static_cast<double>(n) : 0.0;
  t.values.assign(deltas.size(), std::vector<double>(B, 0.0));
  for (std::size_t l = 0; l < deltas.size(); ++l) {
    for (std::size_t j = 0; j < B; ++j) {
      const std::size_t k = l * B + j;
      double v = 0.0;
      switch (opt.proxy) {
        case ProxyKind::SecondOrder:
          v = 0.5 * m.sum_sq[k] * inv_n;
          break;
        case ProxyKind::FirstOrder:
          v = std::abs(m.sum[k] * inv_n);
          break;
        case ProxyKind::Combined:
          v = std::abs(m.sum[k] * inv_n) + 0.5 * m.sum_sq[k] * inv_n;
          break;
        case ProxyKind::HessianFree:
          v = 0.5 * dot(deltas[l][j], deltas[l][j]);
          break;
      }
      t.values[l][j] = v;
    }
  }
  return t;
}

// Projections for samples[order[i]], i < n, stored in i order.
inline Projections project_all(const NetworkSpec& net, const WeightSet& weights, std::span<const Sample> samples,
                               std::span<const std::size_t> order, const DeltaSet& deltas, std::size_t bits,
                               unsigned threads) {
  Projections p(order.size(), deltas.size(), bits);
  parallel_chunks(order.size(), resolve_thread_count(threads), 16, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) project_sample(net, weights, samples[order[i]], deltas, p.row(i));
  });
  return p;
}

}  // namespace detail

/// Loss perturbation table over the given calibration samples (all of them,
/// in order). Throws on an empty sample or bit set.
inline PerturbationTable perturbation_table(const NetworkSpec& net, const WeightSet& weights, const DeltaSet& deltas,
                                            std::span<const Sample> samples, std::span<const int> bits,
                                            const PerturbationOptions& opt = {}) {
  if (samples.empty()) throw std::invalid_argument("perturbation table needs at least one calibration sample");
  check_bits(bits);
  if (deltas.size() != weights.size()) throw ShapeError("perturbation set does not match the weighted layers");
  const std::size_t width = deltas.size() * bits.size();
  detail::Moments total(width);

  if (opt.proxy == ProxyKind::HessianFree) {
    // Sample independent; labels are still validated.
    for (const auto& s : samples) check_label(net, s);
  } else if (opt.deterministic) {
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto proj = detail::project_all(net, weights, samples, order, deltas, bits.size(), opt.threads);
    for (std::size_t n = 0; n < samples.size(); ++n) total.add(proj.row(n));
  } else {
    std::mutex m;
    parallel_chunks(samples.size(), resolve_thread_count(opt.threads), 16, [&](std::size_t begin, std::size_t end) {
      detail::Moments local(width);
      std::vector<double> row(width);
      for (std::size_t i = begin; i < end; ++i) {
        detail::project_sample(net, weights, samples[i], deltas, row);
        local.add(row);
      }
      std::lock_guard lock(m);
      total.merge(local);
    });
  }
  return detail::make_table(net, bits, deltas, total, samples.size(), opt);
}

inline PerturbationTable perturbation_table(const NetworkSpec& net, std::span<const Sample> samples,
                                            std::span<const int> bits, const PerturbationOptions& opt = {}) {
  const auto weights = net.weights();
  return perturbation_table(net, weights, quantization_deltas(weights, bits), samples, bits, opt);
}

inline PerturbationTable perturbation_table(const NetworkSpec& net, std::span<const Sample> samples,
                                            std::initializer_list<int> bits, const PerturbationOptions& opt = {}) {
  return perturbation_table(net, samples, std::span<const int>(bits.begin(), bits.size()), opt);
}

struct ConvergenceProfile {
  std::vector<std::size_t> checkpoints;
  std::vector<PerturbationTable> tables;  // one per checkpoint, same order
};

struct ProfileOptions {
  PerturbationOptions perturbation;
  bool shuffle = true;  // off: prefixes of the samples in their given order
};

/// Tables on nested prefixes of a seeded shuffle of `samples`, one per
/// checkpoint (ascending sample counts). Gradients are computed once for the
/// largest prefix.
inline ConvergenceProfile convergence_profile(const NetworkSpec& net, std::span<const Sample> samples,
                                              std::span<const int> bits, std::span<const std::size_t> checkpoints,
                                              const ProfileOptions& opt = {}) {
  check_bits(bits);
  if (checkpoints.empty()) throw std::invalid_argument("convergence profile needs at least one checkpoint");
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    if (checkpoints[i] == 0) throw std::invalid_argument("checkpoint sample counts must be positive");
    if (i > 0 && checkpoints[i] < checkpoints[i - 1]) throw std::invalid_argument("checkpoints must be ascending");
  }
  if (checkpoints.back() > samples.size()) {
    throw std::invalid_argument("checkpoint " + std::to_string(checkpoints.back()) + " exceeds the " +
                                std::to_string(samples.size()) + " available samples");
  }
  const auto& popt = opt.perturbation;
  const auto weights = net.weights();
  const auto deltas = quantization_deltas(weights, bits);
  const std::size_t width = deltas.size() * bits.size();

  std::vector<std::size_t> order;
  if (opt.shuffle) {
    order = shuffled_indices(samples.size(), popt.seed);
  } else {
    order.resize(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
  }
  order.resize(checkpoints.back());

  ConvergenceProfile out;
  out.checkpoints.assign(checkpoints.begin(), checkpoints.end());
  if (popt.proxy == ProxyKind::HessianFree) {
    for (auto n : checkpoints) out.tables.push_back(detail::make_table(net, bits, deltas, detail::Moments(width), n, popt));
    return out;
  }
  const auto proj = detail::project_all(net, weights, samples, order, deltas, bits.size(), popt.threads);
  detail::Moments running(width);
  std::size_t consumed = 0;
  for (auto n : checkpoints) {
    for (; consumed < n; ++consumed) running.add(proj.row(consumed));
    out.tables.push_back(detail::make_table(net, bits, deltas, running, n, popt));
  }
  return out;
}

// CSV: header `layer,bit,delta_loss`, one row per (layer, bit) in table
// order, values with 17 significant digits.

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_table_csv(std::ostream& os, const PerturbationTable& t) {
  os << "layer,bit,delta_loss\n";
  for (std::size_t l = 0; l < t.layers.size(); ++l) {
    for (std::size_t j = 0; j < t.bits.size(); ++j) {
      os << t.layers[l] << ',' << t.bits[j] << ',' << format_double(t.values[l][j]) << '\n';
    }
  }
}

/// Parses the CSV written by write_table_csv. Every layer must list the same
/// bit set; sample count and seed are not part of the file.
inline PerturbationTable read_table_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "layer,bit,delta_loss") {
    throw IoError("perturbation CSV must start with header 'layer,bit,delta_loss'");
  }
  PerturbationTable t;
  std::map<std::pair<std::size_t, int>, double> cells;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto c1 = line.find(','), c2 = line.rfind(',');
    if (c1 == std::string::npos || c1 == c2) throw IoError("malformed CSV row " + std::to_string(lineno));
    const std::string layer = line.substr(0, c1);
    int bit = 0;
    double value = 0.0;
    try {
      bit = std::stoi(line.substr(c1 + 1, c2 - c1 - 1));
      value = std::stod(line.substr(c2 + 1));
    } catch (const std::exception&) {
      throw IoError("malformed number on CSV row " + std::to_string(lineno));
    }
    auto it = std::find(t.layers.begin(), t.layers.end(), layer);
    if (it == t.layers.end()) {
      t.layers.push_back(layer);
      it = t.layers.end() - 1;
    }
    if (std::find(t.bits.begin(), t.bits.end(), bit) == t.bits.end()) t.bits.push_back(bit);
    if (!cells.emplace(std::pair{static_cast<std::size_t>(it - t.layers.begin()), bit}, value).second) {
      throw IoError("duplicate CSV entry for layer '" + layer + "' bit " + std::to_string(bit));
    }
  }
  t.values.assign(t.layers.size(), std::vector<double>(t.bits.size()));
  for (std::size_t l = 0; l < t.layers.size(); ++l) {
    for (std::size_t j = 0; j < t.bits.size(); ++j) {
      auto it = cells.find({l, t.bits[j]});
      if (it == cells.end()) {
        throw IoError("CSV has no entry for layer '" + t.layers[l] + "' bit " + std::to_string(t.bits[j]));
      }
      t.values[l][j] = it->second;
    }
  }
  return t;
}

}  // namespace mpq

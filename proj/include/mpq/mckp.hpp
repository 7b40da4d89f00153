#pragma once

// Bit-width assignment as a Multiple-Choice Knapsack Problem: one class per
// weighted layer, one item per candidate bit-width with weight params * bit
// (in bits) and profit -dL. Provides dominance filtering, the greedy
// allocator and two exact solvers used as oracles.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mpq/error.hpp"
#include "mpq/perturbation.hpp"

namespace mpq {

struct MckpItem {
  int bit = 0;
  std::int64_t weight = 0;  // params * bit
  double profit = 0.0;      // -dL

  double delta_loss() const noexcept { return -profit; }
};

struct MckpClass {
  std::string name;
  std::int64_t params = 0;
  std::vector<MckpItem> items;  // ascending bit
};

struct MckpInstance {
  std::vector<MckpClass> classes;
  std::int64_t capacity = 0;

  std::int64_t min_weight() const {
    std::int64_t w = 0;
    for (const auto& c : classes) w += c.items.front().weight;
    return w;
  }
  std::int64_t total_params() const {
    std::int64_t n = 0;
    for (const auto& c : classes) n += c.params;
    return n;
  }
};

struct LayerSize {
  std::string name;
  std::int64_t params = 0;
};

/// Chosen bit per layer with derived size statistics.
struct BitAssignment {
  struct Entry {
    std::string layer;
    int bit = 0;
    std::int64_t params = 0;
    double delta_loss = 0.0;
  };
  std::vector<Entry> entries;
  std::int64_t capacity_bits = 0;
  std::int64_t used_bits = 0;
  double total_delta_loss = 0.0;
  double avg_bits = 0.0;
  double w_ratio = 0.0;  // 32 * sum|w| / sum |w| * b

  int bit_of(std::string_view layer) const {
    for (const auto& e : entries) {
      if (e.layer == layer) return e.bit;
    }
    throw std::out_of_range("assignment has no layer '" + std::string(layer) + "'");
  }
  std::vector<int> bits() const {
    std::vector<int> out;
    for (const auto& e : entries) out.push_back(e.bit);
    return out;
  }
};

inline void validate_instance(const MckpInstance& inst) {
  if (inst.classes.empty()) throw std::invalid_argument("MCKP instance has no classes");
  for (const auto& c : inst.classes) {
    if (c.items.empty()) throw std::invalid_argument("MCKP class '" + c.name + "' is empty");
    if (c.params <= 0) throw std::invalid_argument("MCKP class '" + c.name + "' has no parameters");
    for (std::size_t j = 0; j < c.items.size(); ++j) {
      const auto& it = c.items[j];
      if (it.weight != c.params * it.bit) throw std::invalid_argument("MCKP item weight must equal params * bit");
      if (j > 0 && !(it.weight > c.items[j - 1].weight)) {
        throw std::invalid_argument("MCKP class '" + c.name + "' items must have strictly increasing weight");
      }
    }
  }
}

inline std::int64_t capacity_for(std::int64_t total_params, double b_target) {
  // The product is floored; a relative slack of a few ulps absorbs
  // representation error such as 4.35 * 100 = 434.99999999999994.
  const double exact = b_target * static_cast<double>(total_params);
  return static_cast<std::int64_t>(std::floor(exact * (1.0 + 4.0 * std::numeric_limits<double>::epsilon())));
}

/// Instance for `table` with capacity floor(b_target * sum params). Throws
/// InfeasibleError when even the all-minimum-bit assignment does not fit.
inline MckpInstance build_instance(const PerturbationTable& table, std::span<const LayerSize> sizes, double b_target) {
  if (!(b_target > 0.0) || !std::isfinite(b_target)) throw std::invalid_argument("target bit-width must be positive");
  if (table.layers.empty() || table.bits.empty()) throw std::invalid_argument("perturbation table is empty");
  std::vector<std::size_t> order(table.bits.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return table.bits[a] < table.bits[b]; });

  MckpInstance inst;
  for (std::size_t l = 0; l < table.layers.size(); ++l) {
    const auto& name = table.layers[l];
    auto s = std::find_if(sizes.begin(), sizes.end(), [&](const LayerSize& x) { return x.name == name; });
    if (s == sizes.end()) throw std::invalid_argument("no parameter count for layer '" + name + "'");
    MckpClass c{name, s->params, {}};
    for (auto j : order) {
      const double dl = table.values[l][j];
      if (!std::isfinite(dl)) throw NumericError("non-finite loss perturbation for layer '" + name + "'");
      c.items.push_back({table.bits[j], s->params * table.bits[j], -dl});
    }
    inst.classes.push_back(std::move(c));
  }
  validate_instance(inst);
  inst.capacity = capacity_for(inst.total_params(), b_target);
  if (inst.capacity < inst.min_weight()) {
    throw InfeasibleError("target average bit-width " + format_double(b_target) + " gives capacity " +
                          std::to_string(inst.capacity) + " bits, below the " + std::to_string(inst.min_weight()) +
                          " bits needed with every layer at its minimum bit-width");
  }
  return inst;
}

/// Removes every item dominated by another item of its class: s goes when
/// some r has weight <= and profit >= s's. Equal profits keep the lower bit.
/// Survivors have strictly increasing weight and strictly increasing profit.
inline MckpInstance dominance_filter(const MckpInstance& inst) {
  MckpInstance out = inst;
  for (auto& c : out.classes) {
    std::vector<MckpItem> kept;
    for (const auto& it : c.items) {
      if (kept.empty() || it.profit > kept.back().profit) kept.push_back(it);
    }
    c.items = std::move(kept);
  }
  return out;
}

inline bool is_filtered(const MckpInstance& inst) {
  for (const auto& c : inst.classes) {
    for (std::size_t j = 1; j < c.items.size(); ++j) {
      if (!(c.items[j].weight > c.items[j - 1].weight) || !(c.items[j].profit > c.items[j - 1].profit)) return false;
    }
  }
  return true;
}

/// Assignment from one chosen item index per class.
inline BitAssignment make_assignment(const MckpInstance& inst, std::span<const std::size_t> choice) {
  BitAssignment a;
  a.capacity_bits = inst.capacity;
  std::int64_t params = 0;
  for (std::size_t i = 0; i < inst.classes.size(); ++i) {
    const auto& c = inst.classes[i];
    const auto& it = c.items.at(choice[i]);
    a.entries.push_back({c.name, it.bit, c.params, it.delta_loss()});
    a.used_bits += it.weight;
    a.total_delta_loss += it.delta_loss();
    params += c.params;
  }
  a.avg_bits = static_cast<double>(a.used_bits) / static_cast<double>(params);
  a.w_ratio = 32.0 * static_cast<double>(params) / static_cast<double>(a.used_bits);
  return a;
}

enum class GreedyCriterion {
  Original,  // largest loss reduction per added bit of model size
  Reversed,  // smallest
  Random,    // uniformly random among promotions that fit
};

struct Promotion {
  std::size_t cls = 0;
  int from_bit = 0;
  int to_bit = 0;
  double priority = 0.0;
};

struct GreedyResult {
  BitAssignment assignment;
  std::vector<Promotion> promotions;
};

/// Greedy allocation on a dominance-filtered instance. Every class starts at
/// its cheapest item; each round promotes one class to its next item, chosen
/// among the promotions that keep the total within capacity. The priority of
/// a promotion b -> b' is (dL_b - dL_b') / ((b' - b) * params). Ties go to
/// the lowest class index. Stops when no promotion fits.
inline GreedyResult greedy_search(const MckpInstance& inst, GreedyCriterion criterion = GreedyCriterion::Original,
                                  std::uint64_t seed = 0) {
  validate_instance(inst);
  if (!is_filtered(inst)) throw std::invalid_argument("greedy assignment requires a dominance-filtered instance");
  std::int64_t used = inst.min_weight();
  if (used > inst.capacity) {
    throw InfeasibleError("capacity " + std::to_string(inst.capacity) + " bits is below the minimum assignment (" +
                          std::to_string(used) + " bits)");
  }
  const std::size_t k = inst.classes.size();
  std::vector<std::size_t> pos(k, 0);
  std::mt19937_64 rng(seed);
  GreedyResult out;
  std::vector<std::size_t> fitting;
  std::vector<double> priority(k);
  for (;;) {
    fitting.clear();
    for (std::size_t i = 0; i < k; ++i) {
      const auto& c = inst.classes[i];
      if (pos[i] + 1 >= c.items.size()) continue;
      const auto& cur = c.items[pos[i]];
      const auto& next = c.items[pos[i] + 1];
      if (used + (next.weight - cur.weight) > inst.capacity) continue;
      priority[i] = (cur.delta_loss() - next.delta_loss()) /
                    (static_cast<double>(next.bit - cur.bit) * static_cast<double>(c.params));
      fitting.push_back(i);
    }
    if (fitting.empty()) break;
    std::size_t pick = fitting.front();
    switch (criterion) {
      case GreedyCriterion::Original:
        for (auto i : fitting) {
          if (priority[i] > priority[pick]) pick = i;
        }
        break;
      case GreedyCriterion::Reversed:
        for (auto i : fitting) {
          if (priority[i] < priority[pick]) pick = i;
        }
        break;
      case GreedyCriterion::Random:
        pick = fitting[std::uniform_int_distribution<std::size_t>(0, fitting.size() - 1)(rng)];
        break;
    }
    const auto& c = inst.classes[pick];
    out.promotions.push_back({pick, c.items[pos[pick]].bit, c.items[pos[pick] + 1].bit, priority[pick]});
    used += c.items[pos[pick] + 1].weight - c.items[pos[pick]].weight;
    ++pos[pick];
  }
  out.assignment = make_assignment(inst, pos);
  return out;
}

inline BitAssignment greedy_assign(const MckpInstance& inst) { return greedy_search(inst).assignment; }

inline constexpr std::size_t kDpCellBudget = 10'000'000;
inline constexpr std::size_t kExhaustiveBudget = 1'000'000;

/// Optimal assignment by dynamic programming over (class, residual capacity).
/// Weights and capacity are first divided by the gcd of all item weights.
inline BitAssignment dp_exact(const MckpInstance& inst) {
  validate_instance(inst);
  std::int64_t g = 0;
  std::int64_t max_total = 0;
  for (const auto& c : inst.classes) {
    for (const auto& it : c.items) g = std::gcd(g, it.weight);
    max_total += c.items.back().weight;
  }
  if (g <= 0) g = 1;
  if (inst.capacity < inst.min_weight()) throw InfeasibleError("no assignment fits the capacity");
  const std::int64_t cap = std::min(inst.capacity, max_total) / g;
  const std::size_t k = inst.classes.size();
  const std::size_t width = static_cast<std::size_t>(cap) + 1;
  if (width > kDpCellBudget / k) {
    throw BudgetError("DP table of " + std::to_string(k) + " x " + std::to_string(width) +
                      " cells exceeds the budget; use the greedy or exhaustive solver");
  }
  constexpr double kNone = -std::numeric_limits<double>::infinity();
  std::vector<double> prev(width, 0.0), cur(width);
  std::vector<std::uint16_t> choice(k * width);
  for (std::size_t i = 0; i < k; ++i) {
    const auto& items = inst.classes[i].items;
    for (std::size_t c = 0; c < width; ++c) {
      double best = kNone;
      std::uint16_t arg = 0;
      for (std::size_t j = 0; j < items.size(); ++j) {
        const auto w = static_cast<std::size_t>(items[j].weight / g);
        if (w > c || prev[c - w] == kNone) continue;
        const double v = prev[c - w] + items[j].profit;
        if (v > best) {
          best = v;
          arg = static_cast<std::uint16_t>(j);
        }
      }
      cur[c] = best;
      choice[i * width + c] = arg;
    }
    std::swap(prev, cur);
  }
  if (prev[width - 1] == kNone) throw InfeasibleError("no assignment fits the capacity");
  std::vector<std::size_t> pick(k);
  std::size_t c = width - 1;
  for (std::size_t i = k; i-- > 0;) {
    pick[i] = choice[i * width + c];
    c -= static_cast<std::size_t>(inst.classes[i].items[pick[i]].weight / g);
  }
  return make_assignment(inst, pick);
}

/// Optimal assignment by enumerating every combination. Ties keep the first
/// combination in lexicographic (class, bit) order.
inline BitAssignment exhaustive(const MckpInstance& inst) {
  validate_instance(inst);
  const std::size_t k = inst.classes.size();
  double combos = 1.0;
  for (const auto& c : inst.classes) combos *= static_cast<double>(c.items.size());
  if (combos > static_cast<double>(kExhaustiveBudget)) {
    throw BudgetError("exhaustive search over " + format_double(combos) + " combinations exceeds the budget");
  }
  std::vector<std::size_t> idx(k, 0), best_idx;
  double best = -std::numeric_limits<double>::infinity();
  for (;;) {
    std::int64_t w = 0;
    double p = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      w += inst.classes[i].items[idx[i]].weight;
      p += inst.classes[i].items[idx[i]].profit;
    }
    if (w <= inst.capacity && (best_idx.empty() || p > best)) {
      best = p;
      best_idx = idx;
    }
    std::size_t i = k;
    while (i-- > 0) {
      if (++idx[i] < inst.classes[i].items.size()) break;
      idx[i] = 0;
    }
    if (i == static_cast<std::size_t>(-1)) break;
  }
  if (best_idx.empty()) throw InfeasibleError("no assignment fits the capacity");
  return make_assignment(inst, best_idx);
}

}  // namespace mpq

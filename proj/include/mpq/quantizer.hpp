#pragma once

// Uniform symmetric fixed-point quantization with an MSE-optimal step size.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mpq/error.hpp"

namespace mpq {

enum class Signedness { Signed, Unsigned };

/// Grid s * {lo, ..., hi}: lo = -2^(b-1), hi = 2^(b-1) - 1 when signed,
/// lo = 0, hi = 2^b - 1 when unsigned.
struct QuantGrid {
  int bits = 8;
  Signedness signedness = Signedness::Signed;
  double step = 1.0;

  double lo() const noexcept { return signedness == Signedness::Signed ? -std::ldexp(1.0, bits - 1) : 0.0; }
  double hi() const noexcept {
    return signedness == Signedness::Signed ? std::ldexp(1.0, bits - 1) - 1.0 : std::ldexp(1.0, bits) - 1.0;
  }
  /// Largest level magnitude, used to scale the step-size search range.
  double max_level() const noexcept { return signedness == Signedness::Signed ? -lo() : hi(); }
};

struct QuantResult {
  std::vector<double> quantized;
  QuantGrid grid;
  double mse = 0.0;
};

namespace detail {

inline void check_bits(int bits) {
  if (bits < 1 || bits > 32) throw std::invalid_argument("bit-width must be in [1, 32], got " + std::to_string(bits));
}

inline void check_grid(const QuantGrid& grid) {
  check_bits(grid.bits);
  if (!(grid.step > 0.0) || !std::isfinite(grid.step)) throw std::invalid_argument("quantization step must be positive");
}

// Integer level for one value: round half away from zero, then clip.
inline double level(double v, double inv_step, double lo, double hi) {
  return std::clamp(std::round(v * inv_step), lo, hi);
}

template <std::floating_point T>
double mse_at(std::span<const T> w, double step, double lo, double hi) {
  const double inv = 1.0 / step;
  double sum = 0.0;
  for (T x : w) {
    const double e = static_cast<double>(x) - level(x, inv, lo, hi) * step;
    sum += e * e;
  }
  return sum / static_cast<double>(w.size());
}

// Search-only error kernel. Clamps before rounding (same thing for integer
// bounds) and rounds with the 2^52 + 2^51 trick, i.e. ties to even rather than
// away from zero; exact ties cannot move the search. Branch-free with four
// accumulators so it vectorises.
inline double search_mse(std::span<const double> w, double step, double lo, double hi) {
  constexpr double kMagic = 6755399441055744.0;
  const double inv = 1.0 / step;
  const std::size_t n = w.size();
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  auto term = [&](double x) {
    const double t = std::min(std::max(x * inv, lo), hi);
    const double r = (t + kMagic) - kMagic;
    const double e = x - r * step;
    return e * e;
  };
  for (; i + 4 <= n; i += 4)
    for (int k = 0; k < 4; ++k) acc[k] += term(w[i + k]);
  for (; i < n; ++i) acc[0] += term(w[i]);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) / static_cast<double>(n);
}

// Step size minimising the squared error with the integer levels held fixed:
// s = <w, q> / <q, q>.
template <std::floating_point T>
double refit_step(std::span<const T> w, double step, double lo, double hi) {
  const double inv = 1.0 / step;
  double wq = 0.0, qq = 0.0;
  for (T x : w) {
    const double q = level(x, inv, lo, hi);
    wq += static_cast<double>(x) * q;
    qq += q * q;
  }
  return (qq > 0.0 && wq > 0.0) ? wq / qq : step;
}

}  // namespace detail

/// clip(round(w / s), lo, hi) * s for every entry, ties away from zero.
template <std::floating_point T>
std::vector<T> quantize(std::span<const T> w, const QuantGrid& grid) {
  detail::check_grid(grid);
  const double inv = 1.0 / grid.step, lo = grid.lo(), hi = grid.hi();
  std::vector<T> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!std::isfinite(w[i])) throw NumericError("cannot quantize a non-finite value");
    out[i] = static_cast<T>(detail::level(w[i], inv, lo, hi) * grid.step);
  }
  return out;
}

template <std::floating_point T>
std::vector<T> quantize(const std::vector<T>& w, const QuantGrid& grid) {
  return quantize(std::span<const T>(w), grid);
}

template <std::floating_point T>
double quantization_mse(std::span<const T> w, const QuantGrid& grid) {
  detail::check_grid(grid);
  if (w.empty()) return 0.0;
  return detail::mse_at(w, grid.step, grid.lo(), grid.hi());
}

/// Step size minimising ||w - Q(w, b)||^2.
///
/// The error as a function of s is piecewise smooth with many local minima
/// (jagged at fine scale once there are many levels), so a coarse sweep over
/// (0, 2 max|w| / max_level] picks the most promising basins, a dense local
/// sweep resolves each basin, golden-section search polishes the best local
/// point, and a final fixed-code refit (s = <w,q>/<q,q>, repeated until the
/// codes settle) lands on the basin's exact minimum. The naive max-scaling
/// step is always a candidate.
template <std::floating_point T>
QuantGrid solve_step_size(std::span<const T> w, int bits, Signedness signedness = Signedness::Signed) {
  detail::check_bits(bits);
  if (w.empty()) throw std::invalid_argument("cannot fit a quantization step to an empty vector");
  double max_abs = 0.0;
  std::vector<double> x(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!std::isfinite(w[i])) throw NumericError("cannot quantize a non-finite value");
    x[i] = static_cast<double>(w[i]);
    max_abs = std::max(max_abs, std::abs(x[i]));
  }
  QuantGrid grid{bits, signedness, 1.0};
  if (max_abs == 0.0) return grid;

  const double lo = grid.lo(), hi = grid.hi();
  const double upper = 2.0 * max_abs / grid.max_level();
  auto mse = [&](double s) { return detail::search_mse(x, s, lo, hi); };

  constexpr int kSweep = 256;
  constexpr int kBasins = 4;
  constexpr int kLocal = 32;  // points across two coarse cells
  std::vector<double> sweep(kSweep + 2);
  auto s_at = [&](int i) { return upper * static_cast<double>(i) / kSweep; };
  sweep[0] = std::numeric_limits<double>::infinity();
  for (int i = 1; i <= kSweep + 1; ++i) sweep[i] = mse(s_at(i));

  std::vector<int> minima;
  for (int i = 1; i <= kSweep; ++i) {
    if (sweep[i] <= sweep[i - 1] && sweep[i] <= sweep[i + 1]) minima.push_back(i);
  }
  std::sort(minima.begin(), minima.end(), [&](int a, int b) { return sweep[a] < sweep[b]; });
  if (minima.size() > static_cast<std::size_t>(kBasins)) minima.resize(kBasins);

  double best_s = max_abs / grid.max_level();
  double best = mse(best_s);
  auto consider = [&](double s, double e) {
    if (e < best) {
      best = e;
      best_s = s;
    }
  };

  // Dense sweep of each basin, then golden section around its best point.
  double polish_s = 0.0, polish_e = std::numeric_limits<double>::infinity();
  const double fine = 2.0 * upper / kSweep / kLocal;
  for (int i : minima) {
    consider(s_at(i), sweep[i]);
    for (int k = 1; k < kLocal; ++k) {
      const double s = s_at(i - 1) + fine * k;
      const double e = mse(s);
      consider(s, e);
      if (e < polish_e) {
        polish_e = e;
        polish_s = s;
      }
    }
  }
  if (polish_s > 0.0) {
    constexpr double kInvPhi = 0.6180339887498949;
    double a = polish_s - fine, b = polish_s + fine;
    double c = b - kInvPhi * (b - a), d = a + kInvPhi * (b - a);
    double fc = mse(c), fd = mse(d);
    for (int it = 0; it < 16; ++it) {
      if (fc < fd) {
        b = d;
        d = c;
        fd = fc;
        c = b - kInvPhi * (b - a);
        fc = mse(c);
      } else {
        a = c;
        c = d;
        fc = fd;
        d = a + kInvPhi * (b - a);
        fd = mse(d);
      }
    }
    if (fc < fd) consider(c, fc); else consider(d, fd);
  }

  // Exact error from here on: the refit must not be fooled by the search
  // kernel's tie handling.
  best = detail::mse_at(w, best_s, lo, hi);
  for (int it = 0; it < 32; ++it) {
    const double s = detail::refit_step(w, best_s, lo, hi);
    if (s == best_s) break;
    const double e = detail::mse_at(w, s, lo, hi);
    if (!(e < best)) break;
    best = e;
    best_s = s;
  }
  grid.step = best_s;
  return grid;
}

template <std::floating_point T>
QuantGrid solve_step_size(const std::vector<T>& w, int bits, Signedness signedness = Signedness::Signed) {
  return solve_step_size(std::span<const T>(w), bits, signedness);
}

template <std::floating_point T>
QuantResult quantize_optimal(std::span<const T> w, int bits, Signedness signedness = Signedness::Signed) {
  QuantResult r;
  r.grid = solve_step_size(w, bits, signedness);
  auto q = quantize(w, r.grid);
  r.quantized.assign(q.begin(), q.end());
  r.mse = quantization_mse(w, r.grid);
  return r;
}

/// Q(w, b) - w with the MSE-optimal step for bit-width b.
template <std::floating_point T>
std::vector<double> delta_w(std::span<const T> w, int bits, Signedness signedness = Signedness::Signed) {
  const auto grid = solve_step_size(w, bits, signedness);
  const auto q = quantize(w, grid);
  std::vector<double> d(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) d[i] = static_cast<double>(q[i]) - static_cast<double>(w[i]);
  return d;
}

template <std::floating_point T>
std::vector<double> delta_w(const std::vector<T>& w, int bits, Signedness signedness = Signedness::Signed) {
  return delta_w(std::span<const T>(w), bits, signedness);
}

}  // namespace mpq

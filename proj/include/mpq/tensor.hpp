#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mpq/error.hpp"

namespace mpq {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

/// Dense row-major array of single precision values. Immutable once built:
/// construction validates that the extents match the payload and that every
/// value is finite.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto extent : shape_) {
      if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
    }
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("tensor shape " + shape_string(shape_) + " needs " + std::to_string(shape_size(shape_)) +
                       " values, got " + std::to_string(data_.size()));
    }
    for (float v : data_) {
      if (!std::isfinite(v)) throw NumericError("tensor contains a non-finite value");
    }
  }

  static Tensor from_doubles(Shape shape, std::span<const double> values) {
    std::vector<float> data(values.begin(), values.end());
    return Tensor(std::move(shape), std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::span<const float> data() const noexcept { return data_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::vector<double> to_doubles() const { return {data_.begin(), data_.end()}; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

/// Ordered collection of flat per-layer blocks keyed by layer name. Used for
/// weights, gradients and perturbation vectors of the weighted layers.
template <class T>
class LayerBlocks {
 public:
  LayerBlocks() = default;

  void push_back(std::string name, std::vector<T> values) {
    names_.push_back(std::move(name));
    blocks_.push_back(std::move(values));
  }

  std::size_t size() const noexcept { return blocks_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }

  std::vector<T>& operator[](std::size_t i) { return blocks_[i]; }
  const std::vector<T>& operator[](std::size_t i) const { return blocks_[i]; }

  bool contains(std::string_view name) const { return find(name) != npos; }

  const std::vector<T>& at(std::string_view name) const {
    auto i = find(name);
    if (i == npos) throw std::out_of_range("no layer block named '" + std::string(name) + "'");
    return blocks_[i];
  }
  std::vector<T>& at(std::string_view name) {
    return const_cast<std::vector<T>&>(std::as_const(*this).at(name));
  }

  std::size_t find(std::string_view name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return i;
    }
    return npos;
  }

  /// Same names and block sizes, all values zero.
  LayerBlocks zeros_like() const {
    LayerBlocks out;
    for (std::size_t i = 0; i < size(); ++i) out.push_back(names_[i], std::vector<T>(blocks_[i].size(), T{}));
    return out;
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& b : blocks_) n += b.size();
    return n;
  }

  std::vector<T> flatten() const {
    std::vector<T> out;
    out.reserve(total_size());
    for (const auto& b : blocks_) out.insert(out.end(), b.begin(), b.end());
    return out;
  }

  /// Inverse of flatten(): splits `flat` using this object's block sizes.
  LayerBlocks unflatten(std::span<const T> flat) const {
    if (flat.size() != total_size()) {
      throw ShapeError("flat vector of length " + std::to_string(flat.size()) + " does not match " +
                       std::to_string(total_size()) + " parameters");
    }
    LayerBlocks out;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < size(); ++i) {
      out.push_back(names_[i], std::vector<T>(flat.begin() + offset, flat.begin() + offset + blocks_[i].size()));
      offset += blocks_[i].size();
    }
    return out;
  }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

 private:
  std::vector<std::string> names_;
  std::vector<std::vector<T>> blocks_;
};

using WeightSet = LayerBlocks<double>;
using GradientSet = LayerBlocks<double>;

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace mpq

#pragma once

// Forward evaluation and per-sample cross-entropy gradients for small
// feed-forward classifiers built from a fixed layer vocabulary.
//
// Weights are stored single precision inside the network description; every
// evaluation runs in double precision on a WeightSet, either the network's
// own weights (converted once) or an explicit override used by the oracles
// to perturb parameters without float rounding.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mpq/error.hpp"
#include "mpq/tensor.hpp"

namespace mpq {

enum class LayerKind { Dense, Conv2d, Relu, Flatten, GlobalAvgPool, Softmax };

inline std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::Relu: return "relu";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::GlobalAvgPool: return "global-avg-pool";
    case LayerKind::Softmax: return "softmax";
  }
  return "unknown";
}

inline std::optional<LayerKind> parse_layer_kind(std::string_view s) {
  for (auto k : {LayerKind::Dense, LayerKind::Conv2d, LayerKind::Relu, LayerKind::Flatten, LayerKind::GlobalAvgPool,
                 LayerKind::Softmax}) {
    if (to_string(k) == s) return k;
  }
  return std::nullopt;
}

struct ConvParams {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  friend bool operator==(const ConvParams&, const ConvParams&) = default;
};

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::Relu;
  std::optional<Tensor> weight;  // dense: (out, in); conv2d: (c_o, c_i, k, k)
  ConvParams conv;

  static LayerSpec dense(std::string name, Tensor weight) {
    return {std::move(name), LayerKind::Dense, std::move(weight), {}};
  }
  static LayerSpec conv2d(std::string name, Tensor weight, std::size_t stride = 1, std::size_t padding = 0) {
    std::size_t k = weight.shape().size() == 4 ? weight.shape()[2] : 0;
    return {std::move(name), LayerKind::Conv2d, std::move(weight), {k, stride, padding}};
  }
  static LayerSpec relu(std::string name) { return {std::move(name), LayerKind::Relu, std::nullopt, {}}; }
  static LayerSpec flatten(std::string name) { return {std::move(name), LayerKind::Flatten, std::nullopt, {}}; }
  static LayerSpec global_avg_pool(std::string name) {
    return {std::move(name), LayerKind::GlobalAvgPool, std::nullopt, {}};
  }
  static LayerSpec softmax(std::string name) { return {std::move(name), LayerKind::Softmax, std::nullopt, {}}; }

  bool weighted() const noexcept { return kind == LayerKind::Dense || kind == LayerKind::Conv2d; }
  std::size_t parameter_count() const noexcept { return weight ? weight->size() : 0; }
};

struct Sample {
  Tensor input;
  std::size_t label = 0;
};

/// Ordered, validated layer graph. Shapes are inferred on construction and
/// any incompatibility is reported with the offending layer's name.
class NetworkSpec {
 public:
  NetworkSpec(std::vector<LayerSpec> layers, Shape input_shape, std::size_t classes)
      : layers_(std::move(layers)), input_shape_(std::move(input_shape)), classes_(classes) {
    validate();
  }

  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  const Shape& input_shape() const noexcept { return input_shape_; }
  std::size_t classes() const noexcept { return classes_; }
  /// Shape of the value entering layer i; index layers().size() is the output.
  const Shape& shape_before(std::size_t i) const { return shapes_.at(i); }
  const std::vector<std::size_t>& weighted_indices() const noexcept { return weighted_; }

  std::vector<std::string> weighted_names() const {
    std::vector<std::string> out;
    for (auto i : weighted_) out.push_back(layers_[i].name);
    return out;
  }

  std::vector<std::size_t> layer_sizes() const {
    std::vector<std::size_t> out;
    for (auto i : weighted_) out.push_back(layers_[i].parameter_count());
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto i : weighted_) n += layers_[i].parameter_count();
    return n;
  }

  /// Double precision copy of the weighted layers' flattened weights.
  WeightSet weights() const {
    WeightSet out;
    for (auto i : weighted_) out.push_back(layers_[i].name, layers_[i].weight->to_doubles());
    return out;
  }

  /// New network with the given weights rounded to single precision storage.
  NetworkSpec with_weights(const WeightSet& weights) const {
    check_weights(weights);
    auto layers = layers_;
    for (std::size_t w = 0; w < weighted_.size(); ++w) {
      auto& layer = layers[weighted_[w]];
      layer.weight = Tensor::from_doubles(layer.weight->shape(), weights[w]);
    }
    return NetworkSpec(std::move(layers), input_shape_, classes_);
  }

  void check_weights(const WeightSet& weights) const {
    if (weights.size() != weighted_.size()) {
      throw ShapeError("weight set has " + std::to_string(weights.size()) + " blocks, network has " +
                       std::to_string(weighted_.size()) + " weighted layers");
    }
    for (std::size_t w = 0; w < weighted_.size(); ++w) {
      const auto& layer = layers_[weighted_[w]];
      if (weights[w].size() != layer.parameter_count()) {
        throw ShapeError("weight block for layer '" + layer.name + "' has " + std::to_string(weights[w].size()) +
                         " values, expected " + std::to_string(layer.parameter_count()));
      }
    }
  }

 private:
  void validate() {
    if (layers_.empty()) throw ShapeError("network has no layers");
    if (classes_ == 0) throw ShapeError("class count must be positive");
    for (auto e : input_shape_) {
      if (e == 0) throw ShapeError("input shape " + shape_string(input_shape_) + " has a zero extent");
    }
    std::unordered_set<std::string> seen;
    shapes_.clear();
    shapes_.push_back(input_shape_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& layer = layers_[i];
      if (layer.name.empty()) throw ShapeError("layer " + std::to_string(i) + " has an empty name");
      if (!seen.insert(layer.name).second) throw ShapeError("duplicate layer name '" + layer.name + "'");
      if (layer.weighted() != layer.weight.has_value()) {
        throw ShapeError("layer '" + layer.name + "': " + std::string(to_string(layer.kind)) +
                         (layer.weighted() ? " requires a weight tensor" : " must not carry weights"));
      }
      if (layer.kind == LayerKind::Softmax && i + 1 != layers_.size()) {
        throw ShapeError("layer '" + layer.name + "': softmax is only supported as the final layer");
      }
      shapes_.push_back(infer(layer, shapes_.back()));
      if (layer.weighted()) weighted_.push_back(i);
    }
    if (layers_.back().kind != LayerKind::Softmax) throw ShapeError("final layer must be softmax");
    if (shapes_.back() != Shape{classes_}) {
      throw ShapeError("network output shape " + shape_string(shapes_.back()) + " does not match " +
                       std::to_string(classes_) + " classes");
    }
    if (weighted_.empty()) throw ShapeError("network has no weighted layer");
  }

  static Shape infer(const LayerSpec& layer, const Shape& in) {
    auto fail = [&](const std::string& why) -> ShapeError {
      return ShapeError("layer '" + layer.name + "' (" + std::string(to_string(layer.kind)) + "): " + why +
                        "; input shape " + shape_string(in));
    };
    switch (layer.kind) {
      case LayerKind::Dense: {
        const auto& ws = layer.weight->shape();
        if (ws.size() != 2) throw fail("dense weight must be (out_features, in_features), got " + shape_string(ws));
        if (in.size() != 1 || in[0] != ws[1]) throw fail("expects a vector of length " + std::to_string(ws[1]));
        return {ws[0]};
      }
      case LayerKind::Conv2d: {
        const auto& ws = layer.weight->shape();
        if (ws.size() != 4 || ws[2] != ws[3]) throw fail("conv2d weight must be (c_o, c_i, k, k), got " + shape_string(ws));
        if (layer.conv.kernel != ws[2]) throw fail("kernel size metadata disagrees with weight shape");
        if (layer.conv.stride == 0) throw fail("stride must be positive");
        if (in.size() != 3 || in[0] != ws[1]) throw fail("expects (" + std::to_string(ws[1]) + ", H, W)");
        const auto k = ws[2], s = layer.conv.stride, p = layer.conv.padding;
        if (in[1] + 2 * p < k || in[2] + 2 * p < k) throw fail("kernel larger than padded input");
        return {ws[0], (in[1] + 2 * p - k) / s + 1, (in[2] + 2 * p - k) / s + 1};
      }
      case LayerKind::Relu:
        return in;
      case LayerKind::Flatten:
        return {shape_size(in)};
      case LayerKind::GlobalAvgPool:
        if (in.size() != 3) throw fail("expects (C, H, W)");
        return {in[0]};
      case LayerKind::Softmax:
        if (in.size() != 1) throw fail("expects a vector of logits");
        return in;
    }
    throw fail("unknown layer kind");
  }

  std::vector<LayerSpec> layers_;
  Shape input_shape_;
  std::size_t classes_;
  std::vector<Shape> shapes_;
  std::vector<std::size_t> weighted_;
};

/// Values entering each layer during one forward pass. `inputs[i]` feeds
/// layer i; `logits` feeds the final softmax and `probs` is the output.
struct ForwardTrace {
  std::vector<std::vector<double>> inputs;
  std::vector<double> logits;
  std::vector<double> probs;
};

namespace detail {

inline void dense_forward(std::span<const double> w, std::size_t out, std::size_t in, std::span<const double> x,
                          std::vector<double>& y) {
  y.assign(out, 0.0);
  for (std::size_t o = 0; o < out; ++o) {
    const double* row = w.data() + o * in;
    double s = 0.0;
    for (std::size_t i = 0; i < in; ++i) s += row[i] * x[i];
    y[o] = s;
  }
}

struct ConvGeometry {
  std::size_t co, ci, k, stride, pad, h, w, ho, wo;

  ConvGeometry(const LayerSpec& layer, const Shape& in, const Shape& out)
      : co(out[0]),
        ci(in[0]),
        k(layer.conv.kernel),
        stride(layer.conv.stride),
        pad(layer.conv.padding),
        h(in[1]),
        w(in[2]),
        ho(out[1]),
        wo(out[2]) {}
};

inline void conv_forward(const ConvGeometry& g, std::span<const double> wt, std::span<const double> x,
                         std::vector<double>& y) {
  y.assign(g.co * g.ho * g.wo, 0.0);
  for (std::size_t o = 0; o < g.co; ++o) {
    double* yo = y.data() + o * g.ho * g.wo;
    for (std::size_t c = 0; c < g.ci; ++c) {
      const double* xc = x.data() + c * g.h * g.w;
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const double wv = wt[((o * g.ci + c) * g.k + ky) * g.k + kx];
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
              yo[oy * g.wo + ox] += wv * xc[iy * g.w + ix];
            }
          }
        }
      }
    }
  }
}

// Accumulates dL/dW into dw and, when dx is non-null, writes dL/dx.
inline void conv_backward(const ConvGeometry& g, std::span<const double> wt, std::span<const double> x,
                          std::span<const double> dy, std::span<double> dw, std::vector<double>* dx) {
  if (dx) dx->assign(g.ci * g.h * g.w, 0.0);
  for (std::size_t o = 0; o < g.co; ++o) {
    const double* dyo = dy.data() + o * g.ho * g.wo;
    for (std::size_t c = 0; c < g.ci; ++c) {
      const double* xc = x.data() + c * g.h * g.w;
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const std::size_t widx = ((o * g.ci + c) * g.k + ky) * g.k + kx;
          const double wv = wt[widx];
          double acc = 0.0;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
              const double d = dyo[oy * g.wo + ox];
              acc += d * xc[iy * g.w + ix];
              if (dx) (*dx)[c * g.h * g.w + iy * g.w + ix] += d * wv;
            }
          }
          dw[widx] += acc;
        }
      }
    }
  }
}

inline void softmax(std::span<const double> z, std::vector<double>& p) {
  const double m = *std::max_element(z.begin(), z.end());
  p.resize(z.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - m);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
}

}  // namespace detail

inline ForwardTrace forward_trace(const NetworkSpec& net, const WeightSet& weights, std::span<const float> input) {
  if (input.size() != shape_size(net.input_shape())) {
    throw ShapeError("input has " + std::to_string(input.size()) + " values, network '" + net.layers().front().name +
                     "' expects shape " + shape_string(net.input_shape()));
  }
  ForwardTrace trace;
  const auto& layers = net.layers();
  trace.inputs.reserve(layers.size());
  std::vector<double> x(input.begin(), input.end());
  std::size_t w = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& layer = layers[i];
    std::vector<double> y;
    switch (layer.kind) {
      case LayerKind::Dense: {
        const auto& ws = layer.weight->shape();
        detail::dense_forward(weights[w++], ws[0], ws[1], x, y);
        break;
      }
      case LayerKind::Conv2d: {
        detail::ConvGeometry g(layer, net.shape_before(i), net.shape_before(i + 1));
        detail::conv_forward(g, weights[w++], x, y);
        break;
      }
      case LayerKind::Relu:
        y = x;
        for (auto& v : y) v = v > 0.0 ? v : 0.0;
        break;
      case LayerKind::Flatten:
        y = x;
        break;
      case LayerKind::GlobalAvgPool: {
        const auto& s = net.shape_before(i);
        const std::size_t hw = s[1] * s[2];
        y.assign(s[0], 0.0);
        for (std::size_t c = 0; c < s[0]; ++c) {
          double acc = 0.0;
          for (std::size_t j = 0; j < hw; ++j) acc += x[c * hw + j];
          y[c] = acc / static_cast<double>(hw);
        }
        break;
      }
      case LayerKind::Softmax:
        trace.logits = x;
        detail::softmax(x, y);
        break;
    }
    trace.inputs.push_back(std::move(x));
    x = std::move(y);
  }
  trace.probs = std::move(x);
  return trace;
}

inline ForwardTrace forward_trace(const NetworkSpec& net, std::span<const float> input) {
  return forward_trace(net, net.weights(), input);
}

/// Probability vector of length classes() for one input.
inline std::vector<double> forward(const NetworkSpec& net, const WeightSet& weights, const Tensor& input) {
  if (input.shape() != net.input_shape()) {
    throw ShapeError("input shape " + shape_string(input.shape()) + " does not match network input " +
                     shape_string(net.input_shape()) + " at layer '" + net.layers().front().name + "'");
  }
  return forward_trace(net, weights, input.data()).probs;
}

inline std::vector<double> forward(const NetworkSpec& net, const Tensor& input) {
  return forward(net, net.weights(), input);
}

/// Pulls a cotangent on the logits (the value entering the final softmax)
/// back to every weighted layer. Returns dS/dw per weighted layer for the
/// scalar S whose logit gradient is `dlogits`.
inline GradientSet backprop_logits(const NetworkSpec& net, const WeightSet& weights, const ForwardTrace& trace,
                                   std::span<const double> dlogits) {
  const auto& layers = net.layers();
  GradientSet grads;
  for (auto i : net.weighted_indices()) grads.push_back(layers[i].name, std::vector<double>(layers[i].parameter_count()));

  const std::size_t first_weighted = net.weighted_indices().front();
  std::vector<double> dy(dlogits.begin(), dlogits.end());
  std::size_t w = weights.size();
  for (std::size_t i = layers.size() - 1; i-- > 0;) {
    const auto& layer = layers[i];
    const auto& x = trace.inputs[i];
    const bool need_dx = i > first_weighted;
    std::vector<double> dx;
    switch (layer.kind) {
      case LayerKind::Dense: {
        --w;
        const auto& ws = layer.weight->shape();
        const std::size_t out = ws[0], in = ws[1];
        auto& dw = grads[w];
        const auto& wt = weights[w];
        for (std::size_t o = 0; o < out; ++o) {
          const double d = dy[o];
          if (d == 0.0) continue;
          double* row = dw.data() + o * in;
          for (std::size_t j = 0; j < in; ++j) row[j] += d * x[j];
        }
        if (need_dx) {
          dx.assign(in, 0.0);
          for (std::size_t o = 0; o < out; ++o) {
            const double d = dy[o];
            if (d == 0.0) continue;
            const double* row = wt.data() + o * in;
            for (std::size_t j = 0; j < in; ++j) dx[j] += d * row[j];
          }
        }
        break;
      }
      case LayerKind::Conv2d: {
        --w;
        detail::ConvGeometry g(layer, net.shape_before(i), net.shape_before(i + 1));
        detail::conv_backward(g, weights[w], x, dy, grads[w], need_dx ? &dx : nullptr);
        break;
      }
      case LayerKind::Relu:
        dx = dy;
        for (std::size_t j = 0; j < dx.size(); ++j) {
          if (!(x[j] > 0.0)) dx[j] = 0.0;
        }
        break;
      case LayerKind::Flatten:
        dx = std::move(dy);
        break;
      case LayerKind::GlobalAvgPool: {
        const auto& s = net.shape_before(i);
        const std::size_t hw = s[1] * s[2];
        dx.assign(s[0] * hw, 0.0);
        for (std::size_t c = 0; c < s[0]; ++c) {
          const double v = dy[c] / static_cast<double>(hw);
          for (std::size_t j = 0; j < hw; ++j) dx[c * hw + j] = v;
        }
        break;
      }
      case LayerKind::Softmax:
        break;  // only ever the last layer, which is excluded from this loop
    }
    if (!need_dx) break;
    dy = std::move(dx);
  }
  return grads;
}

inline void check_label(const NetworkSpec& net, const Sample& sample) {
  if (sample.label >= net.classes()) {
    throw ShapeError("label " + std::to_string(sample.label) + " out of range for " + std::to_string(net.classes()) +
                     " classes");
  }
}

struct LossGrad {
  double loss = 0.0;
  ForwardTrace trace;
  GradientSet grad;
};

/// Cross-entropy loss of one sample with its gradient with respect to every
/// weighted layer. Equivalent to -(1/f_t) * d f_t / dw for the true class t.
inline LossGrad loss_and_grad(const NetworkSpec& net, const WeightSet& weights, const Sample& sample) {
  check_label(net, sample);
  LossGrad out;
  out.trace = forward_trace(net, weights, sample.input.data());
  const auto& p = out.trace.probs;
  const double pt = p[sample.label];
  if (!(pt > 0.0)) throw NumericError("predicted probability of the true class is zero (log of zero)");
  out.loss = -std::log(pt);
  std::vector<double> dlogits = p;
  dlogits[sample.label] -= 1.0;
  out.grad = backprop_logits(net, weights, out.trace, dlogits);
  return out;
}

inline GradientSet per_sample_loss_grad(const NetworkSpec& net, const WeightSet& weights, const Sample& sample) {
  return loss_and_grad(net, weights, sample).grad;
}

inline GradientSet per_sample_loss_grad(const NetworkSpec& net, const Sample& sample) {
  return per_sample_loss_grad(net, net.weights(), sample);
}

inline double sample_loss(const NetworkSpec& net, const WeightSet& weights, const Sample& sample) {
  check_label(net, sample);
  auto p = forward_trace(net, weights, sample.input.data()).probs;
  const double pt = p[sample.label];
  if (!(pt > 0.0)) throw NumericError("predicted probability of the true class is zero (log of zero)");
  return -std::log(pt);
}

inline double mean_loss(const NetworkSpec& net, const WeightSet& weights, std::span<const Sample> samples) {
  if (samples.empty()) throw std::invalid_argument("mean_loss needs at least one sample");
  double sum = 0.0;
  for (const auto& s : samples) sum += sample_loss(net, weights, s);
  return sum / static_cast<double>(samples.size());
}

inline double mean_loss(const NetworkSpec& net, std::span<const Sample> samples) {
  return mean_loss(net, net.weights(), samples);
}

}  // namespace mpq

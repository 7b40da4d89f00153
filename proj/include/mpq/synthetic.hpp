#pragma once

// Seeded synthetic classification data and a plain SGD trainer, used to
// produce desk-scale fixture networks that sit near a loss minimum.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mpq/netcore.hpp"
#include "mpq/perturbation.hpp"

namespace mpq::synthetic {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<float> data(shape_size(shape));
  for (auto& v : data) v = static_cast<float>(dist(rng));
  return Tensor(std::move(shape), std::move(data));
}

/// He-normal weights for a layer with `fan_in` inputs per output.
inline Tensor he_tensor(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  return random_tensor(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

/// Class-prototype images: each class is a sum of a few signed Gaussian
/// blobs. Samples are their prototype shifted by up to one pixel plus noise.
class BlobDataset {
 public:
  BlobDataset(std::size_t classes, std::size_t side, std::uint64_t seed, double noise = 0.9)
      : classes_(classes), side_(side), noise_(noise) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> pos(1.0, static_cast<double>(side) - 2.0);
    std::uniform_real_distribution<double> width(0.8, 2.0);
    std::bernoulli_distribution sign(0.5);
    for (std::size_t c = 0; c < classes; ++c) {
      std::vector<double> img(side * side, 0.0);
      for (int blob = 0; blob < 3; ++blob) {
        const double cy = pos(rng), cx = pos(rng), w = width(rng), s = sign(rng) ? 1.0 : -1.0;
        for (std::size_t y = 0; y < side; ++y) {
          for (std::size_t x = 0; x < side; ++x) {
            const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
            img[y * side + x] += s * std::exp(-(dy * dy + dx * dx) / (2.0 * w * w));
          }
        }
      }
      prototypes_.push_back(std::move(img));
    }
  }

  Shape input_shape() const { return {1, side_, side_}; }

  std::vector<Sample> draw(std::size_t count, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> label(0, classes_ - 1);
    std::uniform_int_distribution<int> shift(-1, 1);
    std::normal_distribution<double> noise(0.0, noise_);
    std::vector<Sample> out;
    out.reserve(count);
    const auto n = static_cast<int>(side_);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t c = label(rng);
      const int sy = shift(rng), sx = shift(rng);
      std::vector<float> img(side_ * side_);
      for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
          const int py = std::clamp(y - sy, 0, n - 1), px = std::clamp(x - sx, 0, n - 1);
          img[y * n + x] = static_cast<float>(prototypes_[c][py * n + px] + noise(rng));
        }
      }
      out.push_back({Tensor(input_shape(), std::move(img)), c});
    }
    return out;
  }

 private:
  std::size_t classes_, side_;
  double noise_;
  std::vector<std::vector<double>> prototypes_;
};

/// conv(6, 3x3, pad 1) - relu - conv(12, 3x3, stride 2, pad 1) - relu -
/// flatten - dense(32) - relu - dense(classes) - softmax on 1 x side x side.
inline NetworkSpec desk_network(std::size_t side, std::size_t classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t half = (side + 2 - 3) / 2 + 1;
  std::vector<LayerSpec> layers;
  layers.push_back(LayerSpec::conv2d("conv1", he_tensor({6, 1, 3, 3}, 9, rng), 1, 1));
  layers.push_back(LayerSpec::relu("relu1"));
  layers.push_back(LayerSpec::conv2d("conv2", he_tensor({12, 6, 3, 3}, 54, rng), 2, 1));
  layers.push_back(LayerSpec::relu("relu2"));
  layers.push_back(LayerSpec::flatten("flatten"));
  layers.push_back(LayerSpec::dense("fc1", he_tensor({32, 12 * half * half}, 12 * half * half, rng)));
  layers.push_back(LayerSpec::relu("relu3"));
  layers.push_back(LayerSpec::dense("fc2", he_tensor({classes, 32}, 32, rng)));
  layers.push_back(LayerSpec::softmax("softmax"));
  return NetworkSpec(std::move(layers), {1, side, side}, classes);
}

struct SgdOptions {
  std::size_t epochs = 12;
  std::size_t batch = 32;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double lr_decay = 0.8;  // per epoch
  std::uint64_t seed = 0;
};

/// Mini-batch SGD with momentum on the mean cross-entropy loss.
inline NetworkSpec train_sgd(const NetworkSpec& net, std::span<const Sample> samples, const SgdOptions& opt) {
  auto weights = net.weights();
  auto velocity = weights.zeros_like();
  double lr = opt.learning_rate;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    const auto order = shuffled_indices(samples.size(), opt.seed + epoch);
    for (std::size_t b = 0; b < order.size(); b += opt.batch) {
      const std::size_t e = std::min(order.size(), b + opt.batch);
      auto grad = weights.zeros_like();
      for (std::size_t i = b; i < e; ++i) {
        const auto g = per_sample_loss_grad(net, weights, samples[order[i]]);
        for (std::size_t l = 0; l < g.size(); ++l) {
          for (std::size_t k = 0; k < g[l].size(); ++k) grad[l][k] += g[l][k];
        }
      }
      const double scale = 1.0 / static_cast<double>(e - b);
      for (std::size_t l = 0; l < weights.size(); ++l) {
        for (std::size_t k = 0; k < weights[l].size(); ++k) {
          velocity[l][k] = opt.momentum * velocity[l][k] - lr * grad[l][k] * scale;
          weights[l][k] += velocity[l][k];
        }
      }
    }
    lr *= opt.lr_decay;
  }
  return net.with_weights(weights);
}

inline double accuracy(const NetworkSpec& net, std::span<const Sample> samples) {
  const auto weights = net.weights();
  std::size_t hit = 0;
  for (const auto& s : samples) {
    const auto p = forward_trace(net, weights, s.input.data()).probs;
    if (static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin()) == s.label) ++hit;
  }
  return samples.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(samples.size());
}

struct DeskFixture {
  NetworkSpec net;
  std::vector<Sample> calibration;
  double train_accuracy = 0.0;
  double holdout_accuracy = 0.0;
};

struct DeskFixtureOptions {
  std::size_t side = 10;
  std::size_t classes = 10;
  std::size_t samples = 4096;
  double noise = 0.9;
  std::uint64_t seed = 2021;
  SgdOptions sgd;
};

/// Trained desk network. Calibration samples are the training set itself,
/// the data the network has converged on.
inline DeskFixture make_desk_fixture(const DeskFixtureOptions& opt = {}) {
  const BlobDataset data(opt.classes, opt.side, opt.seed, opt.noise);
  auto train = data.draw(opt.samples, opt.seed + 1);
  auto sgd = opt.sgd;
  sgd.seed = opt.seed + 2;
  auto net = train_sgd(desk_network(opt.side, opt.classes, opt.seed + 3), train, sgd);
  DeskFixture f{std::move(net), std::move(train)};
  f.train_accuracy = accuracy(f.net, f.calibration);
  f.holdout_accuracy = accuracy(f.net, data.draw(opt.samples, opt.seed + 4));
  return f;
}

}  // namespace mpq::synthetic

#pragma once

// Run manifest: model description, calibration data and solver settings.
//
// JSON layout (paths relative to the manifest's directory):
//
//   {
//     "model": {
//       "input_shape": [1, 10, 10],
//       "classes": 10,
//       "layers": [
//         {"name": "conv1", "kind": "conv2d", "shape": [6, 1, 3, 3],
//          "stride": 1, "padding": 1, "weights": "weights/conv1.f32"},
//         {"name": "relu1", "kind": "relu"},
//         ...
//         {"name": "softmax", "kind": "softmax"}
//       ]
//     },
//     "calibration": {"inputs": "calib.f32", "labels": "labels.u32", "count": 4096},
//     "bits": [1, 2, 3, 4, 5, 6, 7, 8],
//     "target_bits": 4.0,
//     "samples": 1024,
//     "seed": 0,
//     "proxy": "second-order",
//     "deterministic": true,
//     "output_dir": "out",
//     "checkpoints": [128, 256, 512, 1024]      (optional)
//   }

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mpq/error.hpp"
#include "mpq/io.hpp"
#include "mpq/netcore.hpp"
#include "mpq/perturbation.hpp"

namespace mpq {

struct ManifestLayer {
  std::string name;
  LayerKind kind = LayerKind::Relu;
  Shape shape;  // weighted layers only
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::filesystem::path weights;  // weighted layers only, absolute once loaded

  friend bool operator==(const ManifestLayer&, const ManifestLayer&) = default;
};

struct Manifest {
  Shape input_shape;
  std::size_t classes = 0;
  std::vector<ManifestLayer> layers;
  std::filesystem::path calibration_inputs;
  std::filesystem::path calibration_labels;
  std::size_t calibration_count = 0;
  std::vector<int> bits;
  double target_bits = 0.0;
  std::size_t samples = 1024;
  std::uint64_t seed = 0;
  ProxyKind proxy = ProxyKind::SecondOrder;
  bool deterministic = true;
  std::filesystem::path output_dir;
  std::vector<std::size_t> checkpoints;

  friend bool operator==(const Manifest&, const Manifest&) = default;
};

namespace detail {

using nlohmann::json;

inline ManifestError field_error(const std::string& field, const std::string& why) {
  return ManifestError("manifest field '" + field + "': " + why);
}

template <class T>
T get_field(const json& obj, const std::string& key, const std::string& path) {
  if (!obj.contains(key)) throw field_error(path, "missing");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw field_error(path, "has the wrong type");
  }
}

template <class T>
T get_field_or(const json& obj, const std::string& key, const std::string& path, T fallback) {
  return obj.contains(key) ? get_field<T>(obj, key, path) : fallback;
}

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return (path.is_absolute() ? path : base / path).lexically_normal();
}

inline void check_file(const std::filesystem::path& path, std::uintmax_t bytes, const std::string& field) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) throw field_error(field, "file '" + path.string() + "' not found");
  const auto size = std::filesystem::file_size(path, ec);
  if (ec) throw field_error(field, "cannot stat '" + path.string() + "'");
  if (size != bytes) {
    throw field_error(field, "size mismatch: '" + path.string() + "' has " + std::to_string(size) + " bytes, expected " +
                                 std::to_string(bytes));
  }
}

}  // namespace detail

/// Builds a manifest from parsed JSON; relative paths resolve against
/// `base_dir`. Only structural checks happen here, see validate_manifest.
inline Manifest parse_manifest(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  using detail::field_error;
  using detail::get_field;
  using detail::get_field_or;
  if (!j.is_object()) throw ManifestError("manifest must be a JSON object");
  Manifest m;
  if (!j.contains("model") || !j["model"].is_object()) throw field_error("model", "missing");
  const auto& model = j["model"];
  m.input_shape = get_field<Shape>(model, "input_shape", "model.input_shape");
  m.classes = get_field<std::size_t>(model, "classes", "model.classes");
  if (!model.contains("layers") || !model["layers"].is_array()) throw field_error("model.layers", "missing");
  for (std::size_t i = 0; i < model["layers"].size(); ++i) {
    const auto& lj = model["layers"][i];
    const std::string at = "model.layers[" + std::to_string(i) + "]";
    if (!lj.is_object()) throw field_error(at, "must be an object");
    ManifestLayer layer;
    layer.name = get_field<std::string>(lj, "name", at + ".name");
    const auto kind = parse_layer_kind(get_field<std::string>(lj, "kind", at + ".kind"));
    if (!kind) throw field_error(at + ".kind", "unknown layer kind");
    layer.kind = *kind;
    const bool weighted = layer.kind == LayerKind::Dense || layer.kind == LayerKind::Conv2d;
    if (weighted) {
      layer.shape = get_field<Shape>(lj, "shape", at + ".shape");
      layer.weights = detail::resolve(base_dir, get_field<std::string>(lj, "weights", at + ".weights"));
    } else if (lj.contains("weights") || lj.contains("shape")) {
      throw field_error(at, "layer kind '" + std::string(to_string(layer.kind)) + "' takes no weights");
    }
    if (layer.kind == LayerKind::Conv2d) {
      layer.stride = get_field_or<std::size_t>(lj, "stride", at + ".stride", 1);
      layer.padding = get_field_or<std::size_t>(lj, "padding", at + ".padding", 0);
    }
    m.layers.push_back(std::move(layer));
  }
  if (!j.contains("calibration") || !j["calibration"].is_object()) throw field_error("calibration", "missing");
  const auto& cal = j["calibration"];
  m.calibration_inputs = detail::resolve(base_dir, get_field<std::string>(cal, "inputs", "calibration.inputs"));
  m.calibration_labels = detail::resolve(base_dir, get_field<std::string>(cal, "labels", "calibration.labels"));
  m.calibration_count = get_field<std::size_t>(cal, "count", "calibration.count");
  m.bits = get_field<std::vector<int>>(j, "bits", "bits");
  m.target_bits = get_field<double>(j, "target_bits", "target_bits");
  m.samples = get_field_or<std::size_t>(j, "samples", "samples", 1024);
  m.seed = get_field_or<std::uint64_t>(j, "seed", "seed", 0);
  const auto proxy = parse_proxy_kind(get_field_or<std::string>(j, "proxy", "proxy", "second-order"));
  if (!proxy) throw field_error("proxy", "unknown proxy kind");
  m.proxy = *proxy;
  m.deterministic = get_field_or<bool>(j, "deterministic", "deterministic", true);
  m.output_dir = detail::resolve(base_dir, get_field_or<std::string>(j, "output_dir", "output_dir", "out"));
  m.checkpoints = get_field_or<std::vector<std::size_t>>(j, "checkpoints", "checkpoints", {});
  return m;
}

/// Network assembled from the manifest. With `with_weights` false every
/// weight is zero and no file is read (used for shape validation).
inline NetworkSpec build_network(const Manifest& m, bool with_weights = true) {
  std::vector<LayerSpec> layers;
  for (const auto& ml : m.layers) {
    std::optional<Tensor> weight;
    if (ml.kind == LayerKind::Dense || ml.kind == LayerKind::Conv2d) {
      const auto n = shape_size(ml.shape);
      weight = Tensor(ml.shape, with_weights ? io::read_f32(ml.weights, n) : std::vector<float>(n, 0.0f));
    }
    ConvParams conv;
    if (ml.kind == LayerKind::Conv2d) conv = {ml.shape.size() == 4 ? ml.shape[2] : 0, ml.stride, ml.padding};
    layers.push_back({ml.name, ml.kind, std::move(weight), conv});
  }
  return NetworkSpec(std::move(layers), m.input_shape, m.classes);
}

/// Checks every invariant eagerly: value ranges, network shape
/// compatibility, file existence and sizes, label range.
inline void validate_manifest(const Manifest& m) {
  using detail::field_error;
  if (m.bits.empty()) throw field_error("bits", "candidate bit set is empty");
  std::set<int> unique;
  for (int b : m.bits) {
    if (b < 1 || b > 32) throw field_error("bits", "bit-width " + std::to_string(b) + " outside [1, 32]");
    if (!unique.insert(b).second) throw field_error("bits", "duplicate bit-width " + std::to_string(b));
  }
  const int lo = *unique.begin(), hi = *unique.rbegin();
  if (!(m.target_bits >= lo && m.target_bits <= hi)) {
    throw field_error("target_bits", "target " + format_double(m.target_bits) + " outside [" + std::to_string(lo) +
                                         ", " + std::to_string(hi) + "]");
  }
  if (m.calibration_count == 0) throw field_error("calibration.count", "must be positive");
  if (m.samples == 0 || m.samples > m.calibration_count) {
    throw field_error("samples", "must be in [1, " + std::to_string(m.calibration_count) + "]");
  }
  for (std::size_t i = 0; i < m.checkpoints.size(); ++i) {
    if (m.checkpoints[i] == 0 || m.checkpoints[i] > m.calibration_count) {
      throw field_error("checkpoints", "sample counts must be in [1, " + std::to_string(m.calibration_count) + "]");
    }
    if (i > 0 && m.checkpoints[i] < m.checkpoints[i - 1]) throw field_error("checkpoints", "must be ascending");
  }
  try {
    build_network(m, false);
  } catch (const Error& e) {
    throw field_error("model", e.what());
  }
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    if (l.kind == LayerKind::Dense || l.kind == LayerKind::Conv2d) {
      detail::check_file(l.weights, shape_size(l.shape) * 4, "model.layers[" + std::to_string(i) + "].weights");
    }
  }
  const auto per_sample = shape_size(m.input_shape);
  detail::check_file(m.calibration_inputs, m.calibration_count * per_sample * 4, "calibration.inputs");
  detail::check_file(m.calibration_labels, m.calibration_count * 4, "calibration.labels");
  const auto labels = io::read_u32(m.calibration_labels, m.calibration_count);
  for (auto label : labels) {
    if (label >= m.classes) {
      throw field_error("calibration.labels", "label " + std::to_string(label) + " out of range for " +
                                                   std::to_string(m.classes) + " classes");
    }
  }
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) throw ManifestError("manifest '" + path.string() + "' not found");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError("manifest '" + path.string() + "' is not valid JSON: " + e.what());
  }
  auto m = parse_manifest(j, std::filesystem::absolute(path).parent_path());
  validate_manifest(m);
  return m;
}

/// Resolved manifest with absolute paths; loading it back yields an equal
/// Manifest.
inline nlohmann::ordered_json manifest_to_json(const Manifest& m) {
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (const auto& l : m.layers) {
    nlohmann::ordered_json lj;
    lj["name"] = l.name;
    lj["kind"] = std::string(to_string(l.kind));
    if (l.kind == LayerKind::Dense || l.kind == LayerKind::Conv2d) {
      lj["shape"] = l.shape;
      if (l.kind == LayerKind::Conv2d) {
        lj["stride"] = l.stride;
        lj["padding"] = l.padding;
      }
      lj["weights"] = l.weights.string();
    }
    layers.push_back(std::move(lj));
  }
  nlohmann::ordered_json j;
  j["model"]["input_shape"] = m.input_shape;
  j["model"]["classes"] = m.classes;
  j["model"]["layers"] = std::move(layers);
  j["calibration"]["inputs"] = m.calibration_inputs.string();
  j["calibration"]["labels"] = m.calibration_labels.string();
  j["calibration"]["count"] = m.calibration_count;
  j["bits"] = m.bits;
  j["target_bits"] = m.target_bits;
  j["samples"] = m.samples;
  j["seed"] = m.seed;
  j["proxy"] = std::string(to_string(m.proxy));
  j["deterministic"] = m.deterministic;
  j["output_dir"] = m.output_dir.string();
  if (!m.checkpoints.empty()) j["checkpoints"] = m.checkpoints;
  return j;
}

inline std::vector<Sample> load_calibration(const Manifest& m) {
  const auto per_sample = shape_size(m.input_shape);
  const auto inputs = io::read_f32(m.calibration_inputs, m.calibration_count * per_sample);
  const auto labels = io::read_u32(m.calibration_labels, m.calibration_count);
  std::vector<Sample> out;
  out.reserve(m.calibration_count);
  for (std::size_t i = 0; i < m.calibration_count; ++i) {
    std::vector<float> x(inputs.begin() + static_cast<std::ptrdiff_t>(i * per_sample),
                         inputs.begin() + static_cast<std::ptrdiff_t>((i + 1) * per_sample));
    out.push_back({Tensor(m.input_shape, std::move(x)), labels[i]});
  }
  return out;
}

/// Writes `net` and `samples` as raw binaries under `dir` and returns a
/// manifest referencing them (paths relative to `dir`, suitable for writing
/// to `dir`/manifest.json). Solver settings are taken from `settings`.
inline nlohmann::ordered_json save_bundle(const std::filesystem::path& dir, const NetworkSpec& net,
                                          std::span<const Sample> samples, const Manifest& settings) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "weights");
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (const auto& l : net.layers()) {
    nlohmann::ordered_json lj;
    lj["name"] = l.name;
    lj["kind"] = std::string(to_string(l.kind));
    if (l.weighted()) {
      lj["shape"] = l.weight->shape();
      if (l.kind == LayerKind::Conv2d) {
        lj["stride"] = l.conv.stride;
        lj["padding"] = l.conv.padding;
      }
      const auto rel = fs::path("weights") / (l.name + ".f32");
      io::write_f32(dir / rel, l.weight->data());
      lj["weights"] = rel.generic_string();
    }
    layers.push_back(std::move(lj));
  }
  std::vector<float> inputs;
  std::vector<std::uint32_t> labels;
  for (const auto& s : samples) {
    if (s.input.shape() != net.input_shape()) throw ShapeError("calibration sample shape does not match the network");
    const auto d = s.input.data();
    inputs.insert(inputs.end(), d.begin(), d.end());
    labels.push_back(static_cast<std::uint32_t>(s.label));
  }
  io::write_f32(dir / "calibration.f32", inputs);
  io::write_u32(dir / "labels.u32", labels);

  nlohmann::ordered_json j;
  j["model"]["input_shape"] = net.input_shape();
  j["model"]["classes"] = net.classes();
  j["model"]["layers"] = std::move(layers);
  j["calibration"]["inputs"] = "calibration.f32";
  j["calibration"]["labels"] = "labels.u32";
  j["calibration"]["count"] = samples.size();
  j["bits"] = settings.bits;
  j["target_bits"] = settings.target_bits;
  j["samples"] = settings.samples;
  j["seed"] = settings.seed;
  j["proxy"] = std::string(to_string(settings.proxy));
  j["deterministic"] = settings.deterministic;
  j["output_dir"] = settings.output_dir.empty() ? std::string("out") : settings.output_dir.generic_string();
  if (!settings.checkpoints.empty()) j["checkpoints"] = settings.checkpoints;
  return j;
}

}  // namespace mpq

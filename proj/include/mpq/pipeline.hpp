#pragma once

// End-to-end allocation: quantization perturbations, loss perturbation
// table over the calibration subset, dominance filter, greedy search.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mpq/error.hpp"
#include "mpq/io.hpp"
#include "mpq/manifest.hpp"
#include "mpq/mckp.hpp"
#include "mpq/netcore.hpp"
#include "mpq/perturbation.hpp"
#include "mpq/version.hpp"

namespace mpq {

struct StepTiming {
  std::string step;
  double seconds = 0.0;
};

struct RunReport {
  BitAssignment assignment;
  PerturbationTable table;
  std::optional<ConvergenceProfile> profile;
  std::vector<StepTiming> timing;
  std::string version = std::string(kVersion);
  Manifest manifest;
};

/// Failure inside a pipeline step; keeps the original error category.
template <class E>
[[noreturn]] void rethrow_with_step(const std::string& step, const E& e) {
  throw E("step " + step + ": " + e.what());
}

namespace detail {

class Stopwatch {
 public:
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - last_).count();
    last_ = now;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

template <class F>
auto in_step(const std::string& step, F&& fn) {
  try {
    return fn();
  } catch (const InfeasibleError& e) {
    rethrow_with_step(step, e);
  } catch (const NumericError& e) {
    rethrow_with_step(step, e);
  } catch (const ShapeError& e) {
    rethrow_with_step(step, e);
  } catch (const IoError& e) {
    rethrow_with_step(step, e);
  } catch (const BudgetError& e) {
    rethrow_with_step(step, e);
  }
}

}  // namespace detail

inline std::vector<LayerSize> layer_sizes(const NetworkSpec& net) {
  std::vector<LayerSize> out;
  for (const auto& l : net.layers()) {
    if (l.weighted()) out.push_back({l.name, static_cast<std::int64_t>(l.parameter_count())});
  }
  return out;
}

/// The calibration subset: the first `n` samples of a seeded shuffle.
inline std::vector<Sample> select_samples(std::span<const Sample> all, std::size_t n, std::uint64_t seed) {
  if (n > all.size()) throw std::invalid_argument("requested more samples than the calibration set holds");
  const auto order = shuffled_indices(all.size(), seed);
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(all[order[i]]);
  return out;
}

inline PerturbationOptions perturbation_options(const Manifest& m, unsigned threads = 0) {
  return {m.proxy, m.deterministic, threads, m.seed};
}

/// Steps 1 and 2 only.
inline PerturbationTable compute_table(const NetworkSpec& net, std::span<const Sample> calibration, const Manifest& m,
                                       unsigned threads = 0, std::vector<StepTiming>* timing = nullptr) {
  detail::Stopwatch sw;
  const auto weights = net.weights();
  const auto deltas = detail::in_step("1 (quantization perturbation)", [&] { return quantization_deltas(weights, m.bits); });
  if (timing) timing->push_back({"quantization_perturbation", sw.lap()});
  const auto subset = select_samples(calibration, m.samples, m.seed);
  auto table = detail::in_step("2 (loss perturbation)", [&] {
    return perturbation_table(net, weights, deltas, subset, m.bits, perturbation_options(m, threads));
  });
  if (timing) timing->push_back({"loss_perturbation", sw.lap()});
  return table;
}

/// Steps 3.1 and 3.2 on an existing table.
inline BitAssignment solve_table(const PerturbationTable& table, std::span<const LayerSize> sizes, double target_bits,
                                 std::vector<StepTiming>* timing = nullptr) {
  detail::Stopwatch sw;
  const auto filtered = detail::in_step("3.1 (dominance filter)", [&] {
    return dominance_filter(build_instance(table, sizes, target_bits));
  });
  if (timing) timing->push_back({"dominance_filter", sw.lap()});
  auto assignment = detail::in_step("3.2 (greedy search)", [&] { return greedy_assign(filtered); });
  if (timing) timing->push_back({"greedy_search", sw.lap()});
  return assignment;
}

inline RunReport run_pipeline(const Manifest& m, unsigned threads = 0) {
  detail::Stopwatch sw;
  RunReport r;
  r.manifest = m;
  const auto net = build_network(m);
  const auto calibration = load_calibration(m);
  r.timing.push_back({"load", sw.lap()});
  r.table = compute_table(net, calibration, m, threads, &r.timing);
  const auto sizes = layer_sizes(net);
  r.assignment = solve_table(r.table, sizes, m.target_bits, &r.timing);
  if (!m.checkpoints.empty()) {
    sw.lap();
    ProfileOptions popt{perturbation_options(m, threads), true};
    r.profile = detail::in_step("convergence profile", [&] {
      return convergence_profile(net, calibration, m.bits, m.checkpoints, popt);
    });
    r.timing.push_back({"convergence_profile", sw.lap()});
  }
  return r;
}

inline nlohmann::ordered_json assignment_json(const RunReport& r) {
  nlohmann::ordered_json j;
  j["version"] = r.version;
  j["proxy"] = std::string(to_string(r.table.proxy));
  j["samples"] = r.table.samples;
  j["seed"] = r.table.seed;
  j["target_bits"] = r.manifest.target_bits;
  j["layers"] = nlohmann::ordered_json::array();
  for (const auto& e : r.assignment.entries) {
    nlohmann::ordered_json lj;
    lj["name"] = e.layer;
    lj["bit"] = e.bit;
    lj["params"] = e.params;
    lj["delta_loss"] = e.delta_loss;
    j["layers"].push_back(std::move(lj));
  }
  auto& t = j["totals"];
  t["avg_bits"] = r.assignment.avg_bits;
  t["capacity_bits"] = r.assignment.capacity_bits;
  t["used_bits"] = r.assignment.used_bits;
  t["w_ratio"] = r.assignment.w_ratio;
  t["delta_loss"] = r.assignment.total_delta_loss;
  return j;
}

inline void write_convergence_csv(std::ostream& os, const ConvergenceProfile& p) {
  os << "samples,layer,bit,delta_loss\n";
  for (std::size_t i = 0; i < p.checkpoints.size(); ++i) {
    const auto& t = p.tables[i];
    for (std::size_t l = 0; l < t.layers.size(); ++l) {
      for (std::size_t j = 0; j < t.bits.size(); ++j) {
        os << p.checkpoints[i] << ',' << t.layers[l] << ',' << t.bits[j] << ',' << format_double(t.values[l][j])
           << '\n';
      }
    }
  }
}

inline std::string table_csv(const PerturbationTable& t) {
  std::ostringstream os;
  write_table_csv(os, t);
  return os.str();
}

/// Writes assignment.json, perturbation.csv, convergence.csv (profiled runs
/// only), manifest.json (resolved echo) and timing.json into `dir`. All but
/// timing.json are byte-identical across deterministic reruns.
inline void emit_reports(const RunReport& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create output directory '" + dir.string() + "'");
  io::write_text(dir / "assignment.json", assignment_json(r).dump(2) + "\n");
  io::write_text(dir / "perturbation.csv", table_csv(r.table));
  const auto conv = dir / "convergence.csv";
  if (r.profile) {
    std::ostringstream os;
    write_convergence_csv(os, *r.profile);
    io::write_text(conv, os.str());
  } else {
    std::filesystem::remove(conv, ec);
  }
  io::write_text(dir / "manifest.json", manifest_to_json(r.manifest).dump(2) + "\n");
  nlohmann::ordered_json timing;
  double total = 0.0;
  for (const auto& s : r.timing) {
    timing[s.step] = s.seconds;
    total += s.seconds;
  }
  timing["total"] = total;
  io::write_text(dir / "timing.json", timing.dump(2) + "\n");
}

}  // namespace mpq

// Acceptance suite: one PASS/FAIL line per criterion, details indented
// underneath. Exit status is non-zero when any criterion fails.
//
//   acceptance <mpq-cli> <fixture-dir> <work-dir>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "support.hpp"

using namespace mpq;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Pinned tolerances and sizes.
constexpr double kStepMseRatio = 1.001;
constexpr double kStepSecondsAt4096 = 5e-3;
constexpr int kStepVectors = 100;
constexpr int kGradNets = 20;
constexpr double kGradRelTol = 1e-5;
constexpr double kGradFloor = 1e-8;
constexpr double kGradStep = 1e-4;
constexpr double kGgnRelTol = 1e-10;
// Entries below this are products of float-storage residuals; two exact
// summation orders only agree to round-off there, so they are compared
// against the floor instead of their own magnitude.
constexpr double kGgnFloor = 1e-12;
constexpr int kMckpInstances = 500;
constexpr double kSolverTol = 1e-12;
constexpr double kAblationShare = 0.95;
constexpr double kGoldenRelTol = 1e-9;
constexpr double kPlanSeconds = 10.0;

int failures = 0;

void verdict(int id, bool ok, const std::string& what) {
  std::printf("[%s] criterion %d: %s\n", ok ? "PASS" : "FAIL", id, what.c_str());
  if (!ok) ++failures;
}

[[gnu::format(printf, 1, 2)]] void detail(const char* fmt, ...) {
  std::va_list args;
  va_start(args, fmt);
  std::printf("       ");
  std::vprintf(fmt, args);
  std::printf("\n");
  va_end(args);
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  return v[static_cast<std::size_t>(q * static_cast<double>(v.size() - 1) + 0.5)];
}

// 1 ---------------------------------------------------------------------------

double grid_oracle_mse(std::span<const double> w, int bits) {
  double m = 0.0;
  for (double x : w) m = std::max(m, std::abs(x));
  QuantGrid g{bits, Signedness::Signed, 1.0};
  const double upper = 2.0 * m / g.max_level();
  double best = INFINITY;
  for (int i = 1; i <= 2048; ++i) {
    g.step = upper * i / 2048.0;
    best = std::min(best, quantization_mse(w, g));
  }
  return best;
}

void quantizer_optimality() {
  std::mt19937_64 rng(1001);
  std::uniform_real_distribution<double> log_len(std::log(16.0), std::log(4096.0));
  std::uniform_int_distribution<int> bit(1, 8);
  int ok = 0;
  double worst_ratio = 0.0, worst_time = 0.0;
  for (int v = 0; v < kStepVectors; ++v) {
    // every tenth vector is full length so the timing bound is exercised
    const std::size_t n = v % 10 == 0 ? 4096 : static_cast<std::size_t>(std::exp(log_len(rng)));
    std::vector<double> w(n);
    if (v % 2 == 0) {
      std::normal_distribution<double> d(0.0, 0.05);
      for (auto& x : w) x = d(rng);
    } else {
      std::uniform_real_distribution<double> d(-0.3, 0.3);
      for (auto& x : w) x = d(rng);
    }
    const int b = bit(rng);
    auto t0 = Clock::now();
    const auto g = solve_step_size(std::span<const double>(w), b);
    double dt = seconds_since(t0);
    for (int rep = 0; rep < 2; ++rep) {  // best of three against scheduler noise
      t0 = Clock::now();
      (void)solve_step_size(std::span<const double>(w), b);
      dt = std::min(dt, seconds_since(t0));
    }
    const double mse = quantization_mse(std::span<const double>(w), g);
    const double oracle = grid_oracle_mse(w, b);
    const double ratio = oracle > 0.0 ? mse / oracle : (mse == 0.0 ? 1.0 : INFINITY);
    worst_ratio = std::max(worst_ratio, ratio);
    if (n == 4096) worst_time = std::max(worst_time, dt);
    if (ratio <= kStepMseRatio) ++ok;
  }
  const bool pass = ok == kStepVectors && worst_time < kStepSecondsAt4096;
  verdict(1, pass, "step-size MSE within 1.001x of the 2048-point grid oracle, < 5 ms at length 4096");
  detail("%d/%d vectors within bound, worst MSE ratio %.6f", ok, kStepVectors, worst_ratio);
  detail("slowest length-4096 solve %.3f ms", worst_time * 1e3);
}

// 2 ---------------------------------------------------------------------------

void gradient_fidelity() {
  std::size_t checked = 0, passed = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < kGradNets; ++seed) {
    const auto net = mpq::testing::random_tiny_net(1000 + seed);
    const auto s = mpq::testing::random_samples(net, 1, 2000 + seed).front();
    const auto g = per_sample_loss_grad(net, s).flatten();
    const auto fd = mpq::testing::fd_loss_gradient(net, s, kGradStep);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (std::abs(g[i]) <= kGradFloor && std::abs(fd[i]) <= kGradFloor) continue;
      ++checked;
      const double e = mpq::testing::rel_err(g[i], fd[i]);
      worst = std::max(worst, e);
      if (e < kGradRelTol) ++passed;
    }
  }
  verdict(2, checked > 0 && passed == checked, "per-sample gradients match central differences within 1e-5 relative");
  detail("%zu/%zu entries above 1e-8 pass on %d nets, worst relative error %.3g", passed, checked, kGradNets, worst);
}

// 3 ---------------------------------------------------------------------------

void gauss_newton_identity() {
  const std::vector<int> bits{1, 2, 3, 4, 6, 8};
  std::size_t checked = 0, passed = 0, floored = 0;
  double worst = 0.0;
  auto check = [&](const NetworkSpec& net, std::span<const Sample> samples) {
    const auto t = perturbation_table(net, samples, bits);
    const auto deltas = quantization_deltas(net.weights(), bits);
    for (std::size_t l = 0; l < deltas.size(); ++l) {
      for (std::size_t j = 0; j < bits.size(); ++j) {
        const double ref = ggn_reference(net, samples, single_layer_perturbation(net, l, deltas[l][j]));
        const double e = std::abs(t.values[l][j] - ref) / std::max(std::abs(ref), kGgnFloor);
        if (std::abs(ref) < kGgnFloor) ++floored;
        worst = std::max(worst, e);
        ++checked;
        if (e <= kGgnRelTol) ++passed;
      }
    }
  };
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto net = mpq::testing::random_tiny_net(3000 + seed);
    check(net, mpq::testing::random_samples(net, 8, 4000 + seed));
  }
  const NetworkSpec hand({LayerSpec::dense("fc", Tensor({2, 2}, {0.3f, -0.7f, 0.9f, 0.2f})), LayerSpec::softmax("sm")},
                         {2}, 2);
  check(hand, std::vector<Sample>{{Tensor({2}, {0.5f, -1.5f}), 0}});
  verdict(3, passed == checked, "streamed Gauss-Newton table equals the literal Jacobian/Sigma form within 1e-10");
  detail("%zu/%zu (net, layer, bit) entries agree, worst relative error %.3g (%zu entries below %.0e compared "
         "against the floor)",
         passed, checked, worst, floored, kGgnFloor);
}

// 4, 5 -----------------------------------------------------------------------

void mckp_criteria() {
  std::mt19937_64 rng(5005);
  int prop1 = 0, dp_vs_enum = 0, within_budget = 0, feasible = 0, ablation = 0;
  std::vector<double> gaps;
  int optimal = 0;
  for (int i = 0; i < kMckpInstances; ++i) {
    const auto raw = mpq::testing::random_instance(rng, 8, 4, 60);
    const auto filtered = dominance_filter(raw);
    const auto opt_raw = dp_exact(raw), opt_f = dp_exact(filtered);
    if (opt_raw.total_delta_loss == opt_f.total_delta_loss) ++prop1;
    try {
      const auto e = exhaustive(raw);
      ++within_budget;
      if (std::abs(e.total_delta_loss - opt_raw.total_delta_loss) <= kSolverTol) ++dp_vs_enum;
    } catch (const BudgetError&) {
    }
    const auto g = greedy_search(filtered);
    if (g.assignment.used_bits <= filtered.capacity && g.assignment.entries.size() == filtered.classes.size()) {
      ++feasible;
    }
    const double gap = g.assignment.total_delta_loss - opt_raw.total_delta_loss;
    gaps.push_back(gap);
    if (gap <= kSolverTol) ++optimal;
    const auto rev = greedy_search(filtered, GreedyCriterion::Reversed);
    const auto rnd = greedy_search(filtered, GreedyCriterion::Random, 7000 + i);
    if (g.assignment.total_delta_loss <= rev.assignment.total_delta_loss + kSolverTol &&
        g.assignment.total_delta_loss <= rnd.assignment.total_delta_loss + kSolverTol) {
      ++ablation;
    }
  }
  verdict(4, prop1 == kMckpInstances && dp_vs_enum == within_budget,
          "DP optimum unchanged by the dominance filter; DP equals exhaustive enumeration");
  detail("filter: %d/%d identical optima; exhaustive: %d/%d agree (%d within budget)", prop1, kMckpInstances,
         dp_vs_enum, within_budget, within_budget);

  const double share = static_cast<double>(ablation) / kMckpInstances;
  verdict(5, feasible == kMckpInstances && share >= kAblationShare,
          "greedy always feasible; original criterion <= reversed and random on >= 95%");
  detail("feasible %d/%d; original best-or-equal on %.1f%%", feasible, kMckpInstances, 100.0 * share);
  detail("gap to DP optimum: optimal on %d/%d, median %.3g, p90 %.3g, p99 %.3g, max %.3g", optimal, kMckpInstances,
         percentile(gaps, 0.5), percentile(gaps, 0.9), percentile(gaps, 0.99), percentile(gaps, 1.0));
}

// 6 ---------------------------------------------------------------------------

void convergence(const NetworkSpec& net, std::span<const Sample> calibration, const std::vector<int>& bits) {
  const std::vector<std::size_t> cps{128, 1024, 4096};
  ProfileOptions opt;
  opt.perturbation.threads = 1;
  const auto p = convergence_profile(net, calibration, bits, cps, opt);
  const auto& ref = p.tables[2];
  double max128 = 0.0, max1024 = 0.0;
  std::size_t pairs = 0, pair_ok = 0;
  for (std::size_t l = 0; l < ref.layers.size(); ++l) {
    for (std::size_t j = 0; j < bits.size(); ++j) {
      const double r = ref.values[l][j];
      const double d128 = std::abs(p.tables[0].values[l][j] - r) / r;
      const double d1024 = std::abs(p.tables[1].values[l][j] - r) / r;
      max128 = std::max(max128, d128);
      max1024 = std::max(max1024, d1024);
      ++pairs;
      if (d1024 < d128) ++pair_ok;
    }
  }
  verdict(6, max1024 < max128, "max relative table deviation (N=1024 vs 4096) below (N=128 vs 4096)");
  detail("max deviation: N=128 %.4f, N=1024 %.4f (nested prefixes of one seeded shuffle)", max128, max1024);
  detail("per-pair reading (informational): %zu/%zu layer/bit pairs have the smaller deviation at N=1024", pair_ok,
         pairs);
}

// 7 ---------------------------------------------------------------------------

void ranking(const NetworkSpec& net, std::span<const Sample> subset, const std::vector<int>& bits,
             const fs::path& golden) {
  const auto exact = exact_perturbation_table(net, subset, bits);
  PerturbationOptions opt;
  opt.threads = 1;
  const auto so = ranking_fidelity(perturbation_table(net, subset, bits, opt), exact);
  opt.proxy = ProxyKind::HessianFree;
  const auto hf = ranking_fidelity(perturbation_table(net, subset, bits, opt), exact);

  bool golden_ok = false;
  double worst = INFINITY;
  std::string note = "golden diagnostic missing";
  if (fs::exists(golden)) {
    std::istringstream in(io::read_text(golden));
    std::string line;
    std::getline(in, line);
    std::size_t row = 0;
    worst = 0.0;
    golden_ok = line == "layer,bit,proxy,exact";
    while (golden_ok && std::getline(in, line)) {
      if (row >= so.rows.size()) {
        golden_ok = false;
        break;
      }
      std::istringstream ls(line);
      std::string layer, bit, proxy, ex;
      std::getline(ls, layer, ',');
      std::getline(ls, bit, ',');
      std::getline(ls, proxy, ',');
      std::getline(ls, ex, ',');
      const auto& r = so.rows[row++];
      golden_ok = layer == r.layer && std::stoi(bit) == r.bit;
      worst = std::max({worst, mpq::testing::rel_err(std::stod(proxy), r.proxy), mpq::testing::rel_err(std::stod(ex), r.exact)});
    }
    golden_ok = golden_ok && row == so.rows.size() && worst <= kGoldenRelTol;
    note = golden_ok ? "matches golden diagnostic" : "golden diagnostic mismatch";
  }
  const bool ok = so.pooled && hf.pooled && *so.pooled >= *hf.pooled && golden_ok;
  verdict(7, ok, "Spearman(second-order, exact) >= Spearman(hessian-free, exact) on the desk fixture");
  detail("pooled over %zu layer/bit pairs: second-order %.4f, hessian-free %.4f", so.rows.size(),
         so.pooled.value_or(NAN), hf.pooled.value_or(NAN));
  for (std::size_t j = 0; j < so.per_bit.size(); ++j) {
    detail("  %d-bit across layers: second-order %.3f, hessian-free %.3f", so.per_bit[j].first,
           so.per_bit[j].second.value_or(NAN), hf.per_bit[j].second.value_or(NAN));
  }
  detail("%s (worst relative difference %.3g)", note.c_str(), worst);
}

// 8, 9 -----------------------------------------------------------------------

int run(const std::string& cmd) {
  const int rc = std::system(cmd.c_str());
  return rc;
}

void plan_criteria(const fs::path& cli, const fs::path& manifest, const fs::path& work, const Manifest& m,
                   std::size_t params) {
  fs::remove_all(work);
  fs::create_directories(work);
  const fs::path out = work / "plan";
  const std::string cmd = "MPQ_THREADS=1 \"" + cli.string() + "\" plan \"" + manifest.string() + "\" --out \"" +
                          out.string() + "\" > \"" + (work / "plan.log").string() + "\" 2>&1";
  auto t0 = Clock::now();
  const int rc1 = run(cmd);
  const double secs = seconds_since(t0);
  const bool shape_ok = params <= 100000 && m.samples == 1024 && m.bits.size() == 8;
  verdict(8, rc1 == 0 && shape_ok && secs < kPlanSeconds, "single-threaded plan on the desk fixture under 10 s");
  detail("%zu parameters, %zu samples, %zu candidate bits: %.2f s wall clock (exit %d)", params, m.samples,
         m.bits.size(), secs, rc1);

  const fs::path first = work / "plan_first";
  fs::rename(out, first);
  const int rc2 = run(cmd);
  bool same = rc1 == 0 && rc2 == 0;
  for (const auto* f : {"assignment.json", "perturbation.csv", "manifest.json"}) {
    const bool eq = same && fs::exists(out / f) && io::read_text(first / f) == io::read_text(out / f);
    detail("%-17s %s", f, eq ? "byte-identical" : "DIFFERS");
    same = same && eq;
  }
  verdict(9, same, "two deterministic plan runs produce byte-identical reports");
  detail("timing.json is excluded: it records wall-clock durations");
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 4) {
    std::fprintf(stderr, "usage: %s <mpq-cli> <fixture-dir> <work-dir>\n", argv[0]);
    return 2;
  }
  const fs::path cli = fs::absolute(argv[1]), fixture = fs::absolute(argv[2]), work = fs::absolute(argv[3]);
  std::setvbuf(stdout, nullptr, _IOLBF, 0);

  quantizer_optimality();
  gradient_fidelity();
  gauss_newton_identity();
  mckp_criteria();

  const auto manifest_path = fixture / "manifest.json";
  const auto m = load_manifest(manifest_path);
  const auto net = build_network(m);
  const auto calibration = load_calibration(m);
  convergence(net, calibration, m.bits);
  ranking(net, select_samples(calibration, m.samples, m.seed), m.bits, fixture / "golden" / "diagnostic.csv");
  plan_criteria(cli, manifest_path, work, m, net.parameter_count());

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}

// mpq: mixed-precision bit allocation from the command line.
//
//   mpq plan     <manifest>              full pipeline, writes all reports
//   mpq table    <manifest>              loss perturbation table only
//   mpq solve    <manifest> --table CSV  allocation from a saved table
//   mpq validate <manifest>              proxy vs exact perturbation ranking
//   mpq converge <manifest> --checkpoints 128,256,...
//   mpq make-fixture <dir>               train and write the desk fixture
//
// Exit codes: 0 ok, 1 other failure, 2 manifest, 3 infeasible budget,
// 4 numeric failure, 5 I/O.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mpq/mpq.hpp"
#include "mpq/synthetic.hpp"

namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kOther = 1, kManifest = 2, kInfeasible = 3, kNumeric = 4, kIo = 5 };

struct Overrides {
  std::vector<int> bits;
  std::optional<double> target;
  std::optional<std::size_t> samples;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> proxy;
  std::optional<bool> deterministic;
  std::optional<std::string> out;
  std::vector<std::size_t> checkpoints;
  unsigned threads = 0;
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--bits", o.bits, "Candidate bit-widths")->delimiter(',');
  cmd->add_option("--target", o.target, "Target average bit-width");
  cmd->add_option("--samples", o.samples, "Calibration sample count N");
  cmd->add_option("--seed", o.seed, "Sampling seed");
  cmd->add_option("--proxy", o.proxy, "second-order | first-order | hessian-free | combined");
  cmd->add_flag("--deterministic,!--nondeterministic", o.deterministic, "Order-independent reduction");
  cmd->add_option("--out", o.out, "Output directory (relative to the working directory)");
  cmd->add_option("--threads", o.threads, "Worker threads (default: MPQ_THREADS or all cores)");
}

mpq::Manifest resolve(const std::string& path, const Overrides& o) {
  auto m = mpq::load_manifest(path);
  if (!o.bits.empty()) m.bits = o.bits;
  if (o.target) m.target_bits = *o.target;
  if (o.samples) m.samples = *o.samples;
  if (o.seed) m.seed = *o.seed;
  if (o.proxy) {
    const auto p = mpq::parse_proxy_kind(*o.proxy);
    if (!p) throw mpq::ManifestError("manifest field 'proxy': unknown proxy kind '" + *o.proxy + "'");
    m.proxy = *p;
  }
  if (o.deterministic) m.deterministic = *o.deterministic;
  if (o.out) m.output_dir = fs::absolute(*o.out).lexically_normal();
  if (!o.checkpoints.empty()) m.checkpoints = o.checkpoints;
  mpq::validate_manifest(m);
  return m;
}

void summary(const mpq::BitAssignment& a) {
  for (const auto& e : a.entries) std::printf("  %-16s %2d bit  %10lld params\n", e.layer.c_str(), e.bit,
                                              static_cast<long long>(e.params));
  std::printf("avg bits %.4f  w-ratio %.3f  predicted dL %.6g\n", a.avg_bits, a.w_ratio, a.total_delta_loss);
}

int cmd_plan(const std::string& manifest, const Overrides& o) {
  const auto m = resolve(manifest, o);
  const auto report = mpq::run_pipeline(m, o.threads);
  mpq::emit_reports(report, m.output_dir);
  summary(report.assignment);
  std::printf("reports written to %s\n", m.output_dir.string().c_str());
  return kOk;
}

int cmd_table(const std::string& manifest, const Overrides& o) {
  const auto m = resolve(manifest, o);
  const auto net = mpq::build_network(m);
  const auto table = mpq::compute_table(net, mpq::load_calibration(m), m, o.threads);
  fs::create_directories(m.output_dir);
  mpq::io::write_text(m.output_dir / "perturbation.csv", mpq::table_csv(table));
  std::printf("table written to %s\n", (m.output_dir / "perturbation.csv").string().c_str());
  return kOk;
}

int cmd_solve(const std::string& manifest, const std::string& table_path, const Overrides& o) {
  const auto m = resolve(manifest, o);
  std::istringstream in(mpq::io::read_text(table_path));
  mpq::RunReport r;
  r.manifest = m;
  r.table = mpq::read_table_csv(in);
  r.table.samples = m.samples;
  r.table.seed = m.seed;
  r.table.proxy = m.proxy;
  const auto sizes = mpq::layer_sizes(mpq::build_network(m, false));
  r.assignment = mpq::solve_table(r.table, sizes, m.target_bits, &r.timing);
  fs::create_directories(m.output_dir);
  mpq::io::write_text(m.output_dir / "assignment.json", mpq::assignment_json(r).dump(2) + "\n");
  summary(r.assignment);
  return kOk;
}

nlohmann::ordered_json ranking_json(const mpq::RankingReport& r) {
  nlohmann::ordered_json j;
  j["skipped"] = r.skipped;
  j["pooled"] = r.pooled ? nlohmann::ordered_json(*r.pooled) : nlohmann::ordered_json(nullptr);
  j["per_bit"] = nlohmann::ordered_json::array();
  for (const auto& [bit, rho] : r.per_bit) {
    j["per_bit"].push_back({{"bit", bit}, {"spearman", rho ? nlohmann::ordered_json(*rho) : nullptr}});
  }
  return j;
}

// Proxy table vs exact single-layer loss perturbation over the calibration
// subset, for the manifest's proxy and the hessian-free baseline.
int cmd_validate(const std::string& manifest, const Overrides& o) {
  const auto m = resolve(manifest, o);
  const auto net = mpq::build_network(m);
  const auto subset = mpq::select_samples(mpq::load_calibration(m), m.samples, m.seed);
  const auto exact = mpq::exact_perturbation_table(net, subset, m.bits);
  auto opt = mpq::perturbation_options(m, o.threads);
  const auto proxy = mpq::ranking_fidelity(mpq::perturbation_table(net, subset, m.bits, opt), exact);
  opt.proxy = mpq::ProxyKind::HessianFree;
  const auto baseline = mpq::ranking_fidelity(mpq::perturbation_table(net, subset, m.bits, opt), exact);

  fs::create_directories(m.output_dir);
  std::ostringstream csv;
  mpq::write_diagnostic_csv(csv, proxy);
  mpq::io::write_text(m.output_dir / "diagnostic.csv", csv.str());
  nlohmann::ordered_json j;
  j["samples"] = m.samples;
  j["seed"] = m.seed;
  j[std::string(mpq::to_string(m.proxy))] = ranking_json(proxy);
  j["hessian-free"] = ranking_json(baseline);
  mpq::io::write_text(m.output_dir / "validation.json", j.dump(2) + "\n");
  if (proxy.skipped) {
    std::printf("fewer than 3 weighted layers: ranking correlation skipped\n");
  } else {
    std::printf("spearman %s %.4f  hessian-free %.4f\n", std::string(mpq::to_string(m.proxy)).c_str(),
                proxy.pooled.value_or(0.0), baseline.pooled.value_or(0.0));
  }
  return kOk;
}

int cmd_converge(const std::string& manifest, const Overrides& o) {
  const auto m = resolve(manifest, o);
  if (m.checkpoints.empty()) throw mpq::ManifestError("manifest field 'checkpoints': none given");
  const auto net = mpq::build_network(m);
  const mpq::ProfileOptions popt{mpq::perturbation_options(m, o.threads), true};
  const auto profile = mpq::convergence_profile(net, mpq::load_calibration(m), m.bits, m.checkpoints, popt);
  fs::create_directories(m.output_dir);
  std::ostringstream csv;
  mpq::write_convergence_csv(csv, profile);
  mpq::io::write_text(m.output_dir / "convergence.csv", csv.str());
  std::printf("profile written to %s\n", (m.output_dir / "convergence.csv").string().c_str());
  return kOk;
}

int cmd_make_fixture(const std::string& dir, std::uint64_t seed, std::size_t count) {
  mpq::synthetic::DeskFixtureOptions opt;
  opt.seed = seed;
  opt.samples = count;
  const auto f = mpq::synthetic::make_desk_fixture(opt);
  mpq::Manifest settings;
  settings.bits = {1, 2, 3, 4, 5, 6, 7, 8};
  settings.target_bits = 4.0;
  settings.samples = std::min<std::size_t>(1024, count);
  settings.output_dir = "out";
  const auto j = mpq::save_bundle(dir, f.net, f.calibration, settings);
  mpq::io::write_text(fs::path(dir) / "manifest.json", j.dump(2) + "\n");
  std::printf("fixture: %zu params, train acc %.4f, holdout acc %.4f\n", f.net.parameter_count(), f.train_accuracy,
              f.holdout_accuracy);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixed-precision quantization bit allocator"};
  app.set_version_flag("--version", std::string(mpq::kVersion));
  app.require_subcommand(1);

  std::string manifest, table, fixture_dir;
  Overrides o;
  std::uint64_t fixture_seed = 2021;
  std::size_t fixture_count = 4096;

  auto* plan = app.add_subcommand("plan", "Run the full allocation pipeline");
  auto* tbl = app.add_subcommand("table", "Compute the loss perturbation table");
  auto* solve = app.add_subcommand("solve", "Allocate bits from a saved table");
  auto* validate = app.add_subcommand("validate", "Compare proxy rankings against exact perturbations");
  auto* converge = app.add_subcommand("converge", "Profile the table against the sample count");
  for (auto* cmd : {plan, tbl, solve, validate, converge}) {
    cmd->add_option("manifest", manifest, "Manifest JSON")->required();
    add_overrides(cmd, o);
  }
  solve->add_option("--table", table, "Perturbation CSV")->required();
  plan->add_option("--checkpoints", o.checkpoints, "Also profile at these sample counts")->delimiter(',');
  converge->add_option("--checkpoints", o.checkpoints, "Ascending sample counts")->delimiter(',');

  auto* fixture = app.add_subcommand("make-fixture", "Train the synthetic desk network and write it as a bundle");
  fixture->add_option("dir", fixture_dir, "Output directory")->required();
  fixture->add_option("--seed", fixture_seed, "Data and training seed");
  fixture->add_option("--count", fixture_count, "Calibration samples");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*plan) return cmd_plan(manifest, o);
    if (*tbl) return cmd_table(manifest, o);
    if (*solve) return cmd_solve(manifest, table, o);
    if (*validate) return cmd_validate(manifest, o);
    if (*converge) return cmd_converge(manifest, o);
    if (*fixture) return cmd_make_fixture(fixture_dir, fixture_seed, fixture_count);
  } catch (const mpq::ManifestError& e) {
    std::cerr << "manifest error: " << e.what() << '\n';
    return kManifest;
  } catch (const mpq::InfeasibleError& e) {
    std::cerr << "infeasible: " << e.what() << '\n';
    return kInfeasible;
  } catch (const mpq::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const mpq::IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
  return kOther;
}

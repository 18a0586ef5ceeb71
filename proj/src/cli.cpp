#include "kfacsched/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "kfacsched/emulator.hpp"
#include "kfacsched/error.hpp"
#include "kfacsched/perf_models.hpp"
#include "kfacsched/planner.hpp"
#include "kfacsched/profile.hpp"
#include "kfacsched/sim.hpp"

namespace kfacsched {

namespace {

constexpr double kEmulateTolerance = 1e-8;

struct Options {
  std::string profile;
  std::string params;
  std::string out;
  std::string fusion = "optimal";
  std::uint64_t threshold_bytes = kDefaultFusionThresholdBytes;
  std::string placement = "lbp";
  std::string load_metric = "dim2";
  std::size_t world_size = 0;  // 0: the params file's fitted_world_size

  // fit
  std::string allreduce_csv;
  std::string bcast_csv;
  std::string inverse_csv;
  std::string label = "fitted";

  // simulate / compare
  std::string scheme = "spdkfac";
  std::optional<std::string> sim_fusion;
  std::optional<std::string> sim_placement;
  std::optional<bool> after_backward;
  std::size_t interval = 1;
  std::size_t iteration = 0;
  std::string timeline_csv;
  std::string breakdown_csv;
  std::string schemes = "dkfac,mpdkfac,spdkfac";

  // emulate
  std::size_t workers = 4;
  std::uint64_t seed = 0;
  std::string fixture;
  std::string write_fixture;

  // export-profile
  std::string model;
};

// Writes to `path`, or to `out` when the path is empty or "-".
template <typename Fn>
void emit(const std::string& path, std::ostream& out, Fn&& write) {
  if (path.empty() || path == "-") {
    write(out);
    return;
  }
  std::ofstream file(path);
  if (!file) throw IoError("cannot write " + path);
  write(file);
  if (!file) throw IoError("failed writing " + path);
}

LoadMetric parse_load_metric(const std::string& text) {
  if (text == "dim") return LoadMetric::Dim;
  if (text == "dim2") return LoadMetric::DimSquared;
  throw ValidationError("unknown load metric '" + text + "'");
}

FusionPolicy make_fusion(const std::string& name, std::uint64_t threshold) {
  FusionPolicy p{parse_fusion_policy(name)};
  p.threshold_bytes = threshold;
  return p;
}

std::size_t world_size(const Options& o, const PerfParams& perf) {
  return o.world_size > 0 ? o.world_size : perf.fitted_world_size;
}

std::vector<std::string> split(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) parts.push_back(item);
  }
  return parts;
}

// Scheme names plus the four ablation variants, e.g. "+pipe-lbp".
SchemeConfig named_config(const std::string& name, std::size_t p) {
  if (name.size() == 9 && (name[0] == '+' || name[0] == '-') &&
      name.substr(1, 4) == "pipe" && (name[5] == '+' || name[5] == '-') &&
      name.substr(6) == "lbp") {
    return SchemeConfig::ablation(name[0] == '+', name[5] == '+', p);
  }
  return SchemeConfig::defaults(parse_scheme(name), p);
}

std::uint64_t seed_from_env(std::uint64_t fallback) {
  const char* env = std::getenv("KFACSCHED_SEED");
  if (env == nullptr || *env == '\0') return fallback;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (*end != '\0' || env[0] == '-') {
    throw ValidationError("KFACSCHED_SEED must be a non-negative integer");
  }
  return v;
}

void run_fit(const Options& o, std::ostream& out) {
  const auto ar = fit_linear(load_samples_csv(o.allreduce_csv));
  const auto bc_samples = load_samples_csv(o.bcast_csv);
  const auto inv_samples = load_samples_csv(o.inverse_csv);
  PerfParams p;
  p.allreduce = {ar.alpha, ar.beta};
  p.bcast = fit_bcast(bc_samples);
  p.inverse = fit_exponential(inv_samples);
  p.fitted_world_size = o.world_size > 0 ? o.world_size : 1;
  p.label = o.label;
  validate(p);
  save_params(o.out, p);
  out << "allreduce r2=" << ar.r_squared << "\n";
}

void run_plan_fusion(const Options& o, std::ostream& out) {
  const auto profile = load_profile(o.profile);
  const auto perf = load_params(o.params);
  const auto policy = make_fusion(o.fusion, o.threshold_bytes);
  auto plan = [&](Pass pass) {
    return plan_fusion(factor_tasks(profile, pass), layer_times(profile, pass),
                       perf.allreduce, policy);
  };
  const auto doc = fusion_plan_to_json(plan(Pass::Forward), plan(Pass::Backward));
  emit(o.out, out, [&](std::ostream& s) { s << doc.dump(2) << "\n"; });
}

void run_plan_placement(const Options& o, std::ostream& out) {
  const auto profile = load_profile(o.profile);
  const auto perf = load_params(o.params);
  const std::size_t p = world_size(o, perf);
  const auto tasks = inverse_tasks(profile);
  PlacementPlan plan;
  switch (parse_placement(o.placement)) {
    case PlacementMode::None: plan = local_place(tasks, p); break;
    case PlacementMode::Seq: plan = seq_place(tasks, p); break;
    case PlacementMode::Lbp:
      plan = lbp_place(tasks, p, perf.inverse, perf.bcast,
                       parse_load_metric(o.load_metric));
      break;
  }
  auto doc = placement_plan_to_json(plan, tasks);
  doc["makespan"] = placement_makespan(plan, tasks, perf.inverse, perf.bcast);
  emit(o.out, out, [&](std::ostream& s) { s << doc.dump(2) << "\n"; });
}

void run_simulate(const Options& o, std::ostream& out) {
  const auto profile = load_profile(o.profile);
  const auto perf = load_params(o.params);
  SchemeConfig cfg = named_config(o.scheme, world_size(o, perf));
  if (o.sim_fusion) cfg.fusion = make_fusion(*o.sim_fusion, o.threshold_bytes);
  if (o.sim_placement) cfg.placement = parse_placement(*o.sim_placement);
  if (o.after_backward) cfg.factor_comm_after_backward = *o.after_backward;
  cfg.load_metric = parse_load_metric(o.load_metric);
  cfg.kfac_update_interval = o.interval;
  const auto plans = build_plans(profile, cfg, perf);
  const auto tl = simulate_iteration(profile, cfg, perf, plans, o.iteration);
  if (!o.timeline_csv.empty()) {
    emit(o.timeline_csv, out, [&](std::ostream& s) { write_timeline_csv(s, tl); });
  }
  emit(o.breakdown_csv, out,
       [&](std::ostream& s) { write_breakdown_csv(s, tl.breakdown); });
}

void run_compare(const Options& o, std::ostream& out) {
  const auto profile = load_profile(o.profile);
  const auto perf = load_params(o.params);
  const std::size_t p = world_size(o, perf);
  std::vector<NamedScheme> schemes;
  for (const auto& name : split(o.schemes)) {
    schemes.push_back({name, named_config(name, p)});
  }
  const auto rows = compare_schemes(profile, perf, schemes);
  emit(o.out, out, [&](std::ostream& s) { write_comparison_csv(s, rows); });
}

int run_emulate(const Options& o, std::ostream& out, std::ostream& err) {
  EmulatorFixture f = o.fixture.empty()
                          ? make_fixture(seed_from_env(o.seed), o.workers)
                          : load_fixture(o.fixture);
  if (!o.write_fixture.empty()) save_fixture(o.write_fixture, f);

  const TinyMLP central = kfac_step_centralized(f.model, concatenate(f.batches),
                                                f.gamma, f.learning_rate);
  const TinyMLP distributed = dkfac_step(f.model, f.batches, f.gamma, f.learning_rate);
  const double deviation = std::max(max_weight_diff(distributed, central),
                                    max_weight_diff(distributed, f.expected));
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3e", deviation);
  out << "workers=" << f.batches.size() << " max_deviation=" << buf << "\n";
  if (!(deviation < kEmulateTolerance)) {
    err << "error: distributed step deviates from the centralized step by " << buf
        << "\n";
    return 1;
  }
  return 0;
}

void run_export_profile(const Options& o) {
  const auto dims = architecture(o.model);
  save_profile(o.out, generate_synthetic_timings(dims, bundled_targets(o.model)));
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out,
             std::ostream& err) {
  CLI::App app{"K-FAC communication and inversion scheduling toolkit", "kfacsched"};
  app.require_subcommand(1);
  Options o;

  auto profile_opts = [&](CLI::App* sub) {
    sub->add_option("--profile", o.profile, "Model profile JSON")->required();
    sub->add_option("--params", o.params, "Performance parameter file")->required();
  };
  auto world_opt = [&](CLI::App* sub) {
    sub->add_option("--world-size", o.world_size,
                    "Number of workers (default: fitted_world_size)")
        ->check(CLI::PositiveNumber);
  };
  const std::vector<std::string> fusion_names{"naive", "layerwise", "threshold",
                                              "optimal"};
  const std::vector<std::string> placement_names{"none", "seq", "lbp"};
  const std::vector<std::string> metric_names{"dim", "dim2"};

  auto* fit = app.add_subcommand("fit", "Fit cost models to benchmark samples");
  fit->add_option("--allreduce", o.allreduce_csv, "All-reduce samples CSV")->required();
  fit->add_option("--bcast", o.bcast_csv, "Broadcast samples CSV (size = dim)")
      ->required();
  fit->add_option("--inverse", o.inverse_csv, "Inversion samples CSV")->required();
  fit->add_option("--out", o.out, "Output parameter file")->required();
  fit->add_option("--label", o.label, "Label stored in the parameter file");
  world_opt(fit);

  auto* pf = app.add_subcommand("plan-fusion", "Group factor all-reduces");
  profile_opts(pf);
  pf->add_option("--fusion", o.fusion)->check(CLI::IsMember(fusion_names));
  pf->add_option("--threshold-bytes", o.threshold_bytes)->check(CLI::PositiveNumber);
  pf->add_option("--out", o.out, "Output JSON (default: stdout)");

  auto* pp = app.add_subcommand("plan-placement", "Place inverse computations");
  profile_opts(pp);
  pp->add_option("--placement", o.placement)->check(CLI::IsMember(placement_names));
  pp->add_option("--load-metric", o.load_metric)->check(CLI::IsMember(metric_names));
  world_opt(pp);
  pp->add_option("--out", o.out, "Output JSON (default: stdout)");

  auto* sim = app.add_subcommand("simulate", "Simulate one training iteration");
  profile_opts(sim);
  sim->add_option("--scheme", o.scheme,
                  "dkfac, mpdkfac, spdkfac or an ablation such as +pipe-lbp");
  sim->add_option("--fusion", o.sim_fusion)->check(CLI::IsMember(fusion_names));
  sim->add_option("--threshold-bytes", o.threshold_bytes)->check(CLI::PositiveNumber);
  sim->add_option("--placement", o.sim_placement)
      ->check(CLI::IsMember(placement_names));
  sim->add_option("--load-metric", o.load_metric)->check(CLI::IsMember(metric_names));
  sim->add_option("--after-backward", o.after_backward,
                  "Hold factor all-reduces until backward ends (true/false)");
  sim->add_option("--interval", o.interval, "K-FAC update interval")
      ->check(CLI::PositiveNumber);
  sim->add_option("--iteration", o.iteration, "Iteration index");
  world_opt(sim);
  sim->add_option("--timeline", o.timeline_csv, "Timeline CSV output");
  sim->add_option("--breakdown", o.breakdown_csv, "Breakdown CSV (default: stdout)");

  auto* cmp = app.add_subcommand("compare", "Compare schemes");
  profile_opts(cmp);
  cmp->add_option("--schemes", o.schemes, "Comma-separated scheme names");
  world_opt(cmp);
  cmp->add_option("--out", o.out, "Output CSV (default: stdout)");

  auto* emu = app.add_subcommand("emulate", "Check distributed K-FAC against a "
                                            "single-worker step");
  emu->add_option("--workers", o.workers)->check(CLI::Range(1, 64));
  emu->add_option("--seed", o.seed, "Random seed (KFACSCHED_SEED overrides)");
  emu->add_option("--fixture", o.fixture, "Run a JSON fixture instead");
  emu->add_option("--write-fixture", o.write_fixture, "Save the fixture used");

  auto* exp = app.add_subcommand("export-profile", "Write a bundled model profile");
  exp->add_option("--model", o.model)->required()->check(
      CLI::IsMember(bundled_models()));
  exp->add_option("--out", o.out, "Output JSON")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(std::move(reversed));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (fit->parsed()) run_fit(o, out);
    if (pf->parsed()) run_plan_fusion(o, out);
    if (pp->parsed()) run_plan_placement(o, out);
    if (sim->parsed()) run_simulate(o, out);
    if (cmp->parsed()) run_compare(o, out);
    if (emu->parsed()) return run_emulate(o, out, err);
    if (exp->parsed()) run_export_profile(o);
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

int cli_main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cli_main(args, std::cout, std::cerr);
}

}  // namespace kfacsched

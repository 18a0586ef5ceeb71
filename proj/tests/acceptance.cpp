// Acceptance run: one [PASS]/[FAIL] line per criterion. Exit status is the
// number of failed criteria (capped at 1 for ctest).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "kfacsched/emulator.hpp"
#include "kfacsched/linalg.hpp"
#include "kfacsched/perf_models.hpp"
#include "kfacsched/planner.hpp"
#include "kfacsched/profile.hpp"
#include "kfacsched/sim.hpp"

using namespace kfacsched;

namespace {

constexpr double kKronTol = 1e-9;
constexpr double kKronSeconds = 5.0;
constexpr double kPrecondTol = 1e-10;
constexpr double kWorkerTol = 1e-8;
constexpr double kWorkerSeconds = 30.0;
constexpr double kFdStep = 1e-6;
constexpr double kFdTol = 1e-5;
constexpr double kLptBound = 4.0 / 3.0;
constexpr double kFitNoiselessTol = 0.01;
constexpr double kFitNoisyTol = 0.05;
constexpr double kFitNoise = 0.02;
constexpr double kProfileTol = 0.02;
constexpr double kLargeAlphaAr = 1e-2;
constexpr std::size_t kWorld = 64;

std::string data(const std::string& rel) { return std::string(KFACSCHED_DATA_DIR) + "/" + rel; }

int failures = 0;

void report(int id, bool ok, const std::string& what, const std::string& detail) {
  std::printf("[%s] %d %s: %s\n", ok ? "PASS" : "FAIL", id, what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

DenseMatrix random_dense(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  DenseMatrix m(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) m(i, j) = u(rng);
  }
  return m;
}

SymMatrix random_spd(std::mt19937_64& rng, std::size_t d) {
  const DenseMatrix b = random_dense(rng, d, d);
  SymMatrix m(d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += b(i, k) * b(j, k);
      m.set(i, j, acc / static_cast<double>(d) + (i == j ? 0.1 : 0.0));
    }
  }
  return m;
}

double log_uniform(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
  return std::exp(u(rng));
}

struct Recorded {
  std::string tag;
  const ModelProfile* profile;
  SchemeConfig cfg;
  PerfParams perf;
  SimPlans plans;
  Timeline timeline;
};

std::vector<Recorded> recorded;

const Timeline& run(const std::string& tag, const ModelProfile& profile,
                    const SchemeConfig& cfg, const PerfParams& perf) {
  SimPlans plans = build_plans(profile, cfg, perf);
  Timeline tl = simulate_iteration(profile, cfg, perf, plans);
  recorded.push_back({tag, &profile, cfg, perf, std::move(plans), std::move(tl)});
  return recorded.back().timeline;
}

// ---------------------------------------------------------------------------

void criterion1() {
  std::mt19937_64 rng(1001);
  std::uniform_int_distribution<std::size_t> dim(1, 6);
  const double gamma = 0.05;
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto a = random_spd(rng, dim(rng));
    const auto g = random_spd(rng, dim(rng));
    const auto lhs = kron(damped_inverse(a, Damping(gamma)), damped_inverse(g, Damping(gamma)));
    const auto rhs =
        damped_inverse(kron(add_identity(a, gamma), add_identity(g, gamma)), Damping(0.0));
    worst = std::max(worst, max_abs_diff(lhs, rhs));
  }
  const double secs = seconds_since(t0);
  report(1, worst <= kKronTol && secs < kKronSeconds, "Kronecker identity",
         "100 pairs, max diff " + fmt("%.2e", worst) + ", " + fmt("%.3f", secs) + " s");
}

void criterion2() {
  std::mt19937_64 rng(1002);
  std::uniform_int_distribution<std::size_t> dim(1, 6);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t out = dim(rng), in = dim(rng);
    const auto grad = random_dense(rng, out, in);
    const auto a_inv = damped_inverse(random_spd(rng, in), Damping(0.1));
    const auto g_inv = damped_inverse(random_spd(rng, out), Damping(0.1));
    const auto got = precondition(grad, a_inv, g_inv);
    // (A^-1 kron G^-1) vec(grad), column-major, indexed entry by entry.
    DenseMatrix want(out, in);
    for (std::size_t row = 0; row < out * in; ++row) {
      double acc = 0.0;
      for (std::size_t col = 0; col < out * in; ++col) {
        acc += a_inv(row / out, col / out) * g_inv(row % out, col % out) *
               grad(col % out, col / out);
      }
      want(row % out, row / out) = acc;
    }
    worst = std::max(worst, max_abs_diff(got, want));
  }
  report(2, worst <= kPrecondTol, "Preconditioning equivalence",
         "100 shapes, max diff " + fmt("%.2e", worst));
}

void criterion3() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    for (std::size_t p : {1u, 2u, 4u}) {
      const auto f = make_fixture(seed, p);
      const auto dist = dkfac_step(f.model, f.batches, f.gamma, f.learning_rate);
      const auto cent =
          kfac_step_centralized(f.model, concatenate(f.batches), f.gamma, f.learning_rate);
      worst = std::max(worst, max_weight_diff(dist, cent));
    }
  }
  const double secs = seconds_since(t0);
  report(3, worst <= kWorkerTol && secs < kWorkerSeconds, "Worker-count invariance",
         "50 seeds x P in {1,2,4}, max diff " + fmt("%.2e", worst) + ", " +
             fmt("%.3f", secs) + " s");
}

void criterion4() {
  std::mt19937_64 rng(1004);
  std::uniform_int_distribution<std::size_t> depth(2, 3);
  std::uniform_int_distribution<std::size_t> width(1, 8);
  double worst = 0.0;
  for (int net = 0; net < 20; ++net) {
    std::vector<std::size_t> dims(depth(rng) + 1);
    for (auto& d : dims) d = width(rng);
    const auto model = random_mlp(rng, dims);
    const auto batch = random_batch(rng, 4, dims.front(), dims.back());
    const auto fb = forward_backward(model, batch);
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      const auto& grad = fb.layers[l].weight_grad;
      double scale = 0.0, diff = 0.0;
      for (std::size_t r = 0; r < grad.rows(); ++r) {
        for (std::size_t c = 0; c < grad.cols(); ++c) {
          TinyMLP plus = model, minus = model;
          plus.layers[l].weight(r, c) += kFdStep;
          minus.layers[l].weight(r, c) -= kFdStep;
          const double fd = (loss(plus, batch) - loss(minus, batch)) / (2 * kFdStep);
          diff = std::max(diff, std::abs(fd - grad(r, c)));
          scale = std::max(scale, std::abs(grad(r, c)));
        }
      }
      // Relative to the layer's largest gradient entry; floor for all-zero
      // layers behind dead ReLUs.
      worst = std::max(worst, diff / std::max(scale, 1e-3));
    }
  }
  report(4, worst <= kFdTol, "Gradient correctness",
         "20 nets, max relative diff " + fmt("%.2e", worst));
}

double brute_force_d2(const std::vector<std::size_t>& dims, std::size_t p) {
  std::vector<std::size_t> owner(dims.size(), 0);
  std::vector<double> load(p);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    std::fill(load.begin(), load.end(), 0.0);
    for (std::size_t i = 0; i < dims.size(); ++i) {
      load[owner[i]] += static_cast<double>(dims[i] * dims[i]);
    }
    best = std::min(best, *std::max_element(load.begin(), load.end()));
    std::size_t k = 0;
    while (k < owner.size() && ++owner[k] == p) owner[k++] = 0;
    if (k == owner.size()) break;
  }
  return best;
}

void criterion5(const std::vector<ModelProfile>& profiles, const PerfParams& synth) {
  // (a) LPT bound on all-CT instances.
  std::mt19937_64 rng(1005);
  std::uniform_int_distribution<std::size_t> n_dist(1, 10), p_dist(1, 4), d_dist(1, 256);
  const InverseParams slow{1.0, 1e-3};
  const BcastParams free_bc{0.0, 1e-30};
  double worst_ratio = 0.0;
  bool all_ct = true;
  for (int i = 0; i < 200; ++i) {
    const std::size_t n = n_dist(rng), p = p_dist(rng);
    std::vector<std::size_t> dims(n);
    std::vector<InvTask> tasks;
    for (std::size_t k = 0; k < n; ++k) {
      dims[k] = d_dist(rng);
      tasks.push_back({k, dims[k], k / 2 + 1, k % 2 ? FactorKind::G : FactorKind::A});
    }
    const auto plan = lbp_place(tasks, p, slow, free_bc);
    if (p > 1 && !plan.nct_indices().empty()) all_ct = false;
    const double greedy = *std::max_element(plan.loads.begin(), plan.loads.end());
    worst_ratio = std::max(worst_ratio, greedy / brute_force_d2(dims, p));
  }
  const bool lpt_ok = all_ct && worst_ratio <= kLptBound + 1e-12;

  // (b) makespan(LBP) <= makespan(Seq) under random positive parameters.
  // Each coefficient is drawn log-uniformly within 10x of the synthetic
  // calibration (2x for the inverse exponent, which overflows beyond that).
  std::mt19937_64 prng(2005);
  std::size_t held = 0, total = 0;
  double worst_makespan = 0.0;
  for (int draw = 0; draw < 10; ++draw) {
    PerfParams perf = synth;
    perf.inverse.alpha = log_uniform(prng, synth.inverse.alpha / 10, synth.inverse.alpha * 10);
    perf.inverse.beta = log_uniform(prng, synth.inverse.beta / 10, synth.inverse.beta * 2);
    perf.bcast.alpha = log_uniform(prng, synth.bcast.alpha / 10, synth.bcast.alpha * 10);
    perf.bcast.beta = log_uniform(prng, synth.bcast.beta / 10, synth.bcast.beta * 10);
    for (const auto& prof : profiles) {
      const auto tasks = inverse_tasks(prof);
      const double lbp = placement_makespan(
          lbp_place(tasks, kWorld, perf.inverse, perf.bcast), tasks, perf.inverse, perf.bcast);
      const double seq =
          placement_makespan(seq_place(tasks, kWorld), tasks, perf.inverse, perf.bcast);
      ++total;
      if (lbp <= seq) ++held;
      worst_makespan = std::max(worst_makespan, lbp / seq);
    }
  }
  const bool makespan_ok = held == total;

  // (c) simulated inverse phase: LBP strictly below both baselines.
  bool phase_ok = true;
  std::string phase_detail;
  for (const auto& prof : profiles) {
    double t[3];
    const PlacementMode modes[3] = {PlacementMode::None, PlacementMode::Seq, PlacementMode::Lbp};
    for (int m = 0; m < 3; ++m) {
      auto cfg = SchemeConfig::defaults(Scheme::SPDKFAC, kWorld);
      cfg.placement = modes[m];
      const auto& tl = run("c5 " + prof.model + " " + std::string(to_string(modes[m])), prof,
                           cfg, synth);
      t[m] = tl.total_time - tl.inverse_phase_start;
    }
    const double best_baseline = std::min(t[0], t[1]);
    if (!(t[2] < best_baseline)) phase_ok = false;
    phase_detail += " " + prof.model + " " + fmt("%.1f%%", 100.0 * (1.0 - t[2] / best_baseline));
  }

  report(5, lpt_ok && makespan_ok && phase_ok, "LBP quality",
         "LPT 200 instances worst ratio " + fmt("%.4f", worst_ratio) +
             (all_ct ? "" : " (non-CT instance!)") + "; makespan LBP<=Seq " +
             std::to_string(held) + "/" + std::to_string(total) + " (worst LBP/Seq " +
             fmt("%.2f", worst_makespan) + "); inverse-phase gain over best baseline:" +
             phase_detail);
}

void criterion6(const std::vector<ModelProfile>& profiles, const PerfParams& synth) {
  auto factor_comm = [&](const ModelProfile& prof, const PerfParams& perf, FusionPolicy f,
                         const std::string& tag) {
    auto cfg = SchemeConfig::defaults(Scheme::SPDKFAC, kWorld);
    cfg.fusion = f;
    return run("c6 " + prof.model + " " + tag, prof, cfg, perf).breakdown[Category::FactorComm];
  };
  bool order_ok = true, lw_ok = true;
  std::string detail;
  PerfParams slow_start = synth;
  slow_start.allreduce.alpha = kLargeAlphaAr;
  for (const auto& prof : profiles) {
    const double opt = factor_comm(prof, synth, FusionPolicy::optimal(), "optimal");
    const double thr = factor_comm(prof, synth, FusionPolicy::threshold(), "threshold");
    const double nai = factor_comm(prof, synth, FusionPolicy::naive(), "naive");
    const double lw = factor_comm(prof, synth, FusionPolicy::layer_wise(), "layerwise");
    if (!(opt <= thr && thr <= nai && opt <= lw)) order_ok = false;
    const double nai_big = factor_comm(prof, slow_start, FusionPolicy::naive(), "naive big-alpha");
    const double lw_big = factor_comm(prof, slow_start, FusionPolicy::layer_wise(), "lw big-alpha");
    if (!(lw_big >= nai_big)) lw_ok = false;
    detail += " " + prof.model + " opt/thr/naive/lw=" + fmt("%.4f", opt) + "/" + fmt("%.4f", thr) +
              "/" + fmt("%.4f", nai) + "/" + fmt("%.4f", lw) + " bigalpha lw/naive=" +
              fmt("%.3f", lw_big) + "/" + fmt("%.3f", nai_big) + ";";
  }
  report(6, order_ok && lw_ok, "Fusion ordering", detail);
}

void criterion7(const std::vector<ModelProfile>& profiles, const PerfParams& synth,
                const PerfParams& heavy) {
  bool scheme_ok = true, ablation_ok = true;
  std::string detail;
  for (const auto& prof : profiles) {
    const double d = run("c7 " + prof.model + " dkfac", prof,
                         SchemeConfig::defaults(Scheme::DKFAC, kWorld), synth).total_time;
    const double mpd = run("c7 " + prof.model + " mpdkfac", prof,
                           SchemeConfig::defaults(Scheme::MPDKFAC, kWorld), synth).total_time;
    const double spd = run("c7 " + prof.model + " spdkfac", prof,
                           SchemeConfig::defaults(Scheme::SPDKFAC, kWorld), synth).total_time;
    if (!(spd <= std::min(d, mpd))) scheme_ok = false;
    double abl[2][2];
    for (int pipe = 0; pipe < 2; ++pipe) {
      for (int lbp = 0; lbp < 2; ++lbp) {
        abl[pipe][lbp] = run("c7 " + prof.model + " ablation", prof,
                             SchemeConfig::ablation(pipe, lbp, kWorld), synth).total_time;
      }
    }
    const double both = abl[1][1], none = abl[0][0];
    if (!(both <= abl[1][0] && both <= abl[0][1] && abl[1][0] <= none && abl[0][1] <= none)) {
      ablation_ok = false;
    }
    detail += " " + prof.model + " D/MPD/SPD=" + fmt("%.3f", d) + "/" + fmt("%.3f", mpd) + "/" +
              fmt("%.3f", spd) + ";";
  }
  const ModelProfile* dense = nullptr;
  for (const auto& p : profiles) {
    if (p.model == "densenet201") dense = &p;
  }
  const double d = run("c7 densenet201 dkfac bcast-heavy", *dense,
                       SchemeConfig::defaults(Scheme::DKFAC, kWorld), heavy).total_time;
  const double mpd = run("c7 densenet201 mpdkfac bcast-heavy", *dense,
                         SchemeConfig::defaults(Scheme::MPDKFAC, kWorld), heavy).total_time;
  const bool heavy_ok = mpd > d;
  detail += " broadcast-heavy densenet201 MPD/D=" + fmt("%.3f", mpd) + "/" + fmt("%.3f", d);
  report(7, scheme_ok && heavy_ok && ablation_ok, "Scheme ordering",
         detail + (ablation_ok ? "; ablation order holds" : "; ablation order broken"));
}

void criterion8() {
  std::mt19937_64 rng(1008);
  std::normal_distribution<double> noise(0.0, kFitNoise);
  double lin_clean = 0.0, lin_noisy = 0.0, exp_clean = 0.0, exp_noisy = 0.0;
  auto rel = [](double got, double want) { return std::abs(got - want) / want; };
  for (int trial = 0; trial < 100; ++trial) {
    const double alpha = log_uniform(rng, 1e-5, 1e-2);
    const double beta = log_uniform(rng, 1e-11, 1e-8);
    // Message sizes where the bandwidth term runs from 1% to 10x of the
    // startup term, so both coefficients shape the curve.
    std::vector<BenchSample> clean, noisy;
    for (int k = 0; k < 64; ++k) {
      const double m = std::round(alpha / beta * std::pow(10.0, -2.0 + 3.0 * k / 63.0));
      const double t = alpha + beta * m;
      clean.push_back({m, t});
      noisy.push_back({m, t * (1.0 + noise(rng))});
    }
    const auto fc = fit_linear(clean);
    const auto fn = fit_linear(noisy);
    lin_clean = std::max({lin_clean, rel(fc.alpha, alpha), rel(fc.beta, beta)});
    lin_noisy = std::max({lin_noisy, rel(fn.alpha, alpha), rel(fn.beta, beta)});

    const InverseParams inv{log_uniform(rng, 1e-5, 1e-2), log_uniform(rng, 1e-4, 1e-3)};
    std::vector<BenchSample> ec, en;
    for (std::size_t d = 64; d <= 8192; d += 128) {
      const double t = inverse_time(d, inv);
      ec.push_back({static_cast<double>(d), t});
      en.push_back({static_cast<double>(d), t * (1.0 + noise(rng))});
    }
    const auto gc = fit_exponential(ec);
    const auto gn = fit_exponential(en);
    exp_clean = std::max({exp_clean, rel(gc.alpha, inv.alpha), rel(gc.beta, inv.beta)});
    exp_noisy = std::max({exp_noisy, rel(gn.alpha, inv.alpha), rel(gn.beta, inv.beta)});
  }
  const bool ok = lin_clean <= kFitNoiselessTol && exp_clean <= kFitNoiselessTol &&
                  lin_noisy <= kFitNoisyTol && exp_noisy <= kFitNoisyTol;
  report(8, ok, "Performance-model fitting",
         "max relative error linear " + fmt("%.2e", lin_clean) + " clean / " +
             fmt("%.2e", lin_noisy) + " noisy, exponential " + fmt("%.2e", exp_clean) +
             " clean / " + fmt("%.2e", exp_noisy) + " noisy (100 trials each)");
}

void criterion9(const ModelProfile& r50) {
  const auto t = r50.totals();
  auto within = [](double got, double want) { return std::abs(got - want) / want <= kProfileTol; };
  std::uint64_t lo = std::numeric_limits<std::uint64_t>::max(), hi = 0;
  for (const auto& l : r50.layers) {
    for (std::size_t d : {l.a_dim, l.g_dim}) {
      lo = std::min(lo, packed_size(d));
      hi = std::max(hi, packed_size(d));
    }
  }
  const bool ok = r50.num_layers() == 54 && within(t.a_elements / 1e6, 62.3) &&
                  within(t.g_elements / 1e6, 14.6) && within(t.params / 1e6, 25.6) &&
                  lo == 2080 && hi == 10619136;
  report(9, ok, "Profile fidelity",
         std::to_string(r50.num_layers()) + " layers, A " + fmt("%.2fM", t.a_elements / 1e6) +
             ", G " + fmt("%.2fM", t.g_elements / 1e6) + ", params " +
             fmt("%.2fM", t.params / 1e6) + ", packed sizes " + std::to_string(lo) + ".." +
             std::to_string(hi));
}

void criterion10() {
  std::size_t bad = 0;
  std::string first;
  for (const auto& r : recorded) {
    const auto errors =
        validate_timeline(r.timeline, *r.profile, r.cfg, r.perf, r.plans);
    if (!errors.empty()) {
      if (bad == 0) first = " first: " + r.tag + ": " + errors.front();
      ++bad;
    }
  }
  report(10, bad == 0 && !recorded.empty(), "Simulator validity",
         std::to_string(recorded.size()) + " timelines, " + std::to_string(bad) + " invalid" +
             first);
}

}  // namespace

int main() {
  std::vector<ModelProfile> profiles;
  for (const auto& m : bundled_models()) profiles.push_back(load_profile(data("profiles/" + m + ".json")));
  const PerfParams synth = load_params(data("params/synthetic.params"));
  const PerfParams heavy = load_params(data("params/bcast_heavy.params"));

  criterion1();
  criterion2();
  criterion3();
  criterion4();
  criterion5(profiles, synth);
  criterion6(profiles, synth);
  criterion7(profiles, synth, heavy);
  criterion8();
  criterion9(profiles.front());
  criterion10();

  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}

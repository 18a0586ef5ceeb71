#include "kfacsched/sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>

#include "kfacsched/error.hpp"

namespace kfacsched {

namespace {

struct CommRequest {
  double ready = 0.0;
  double duration = 0.0;
  SimEvent proto;
};

// Single FCFS server: requests are served in order of readiness, ties in
// submission order.
double serve(std::vector<CommRequest>& requests, double free_at,
             std::vector<SimEvent>& out) {
  std::stable_sort(requests.begin(), requests.end(),
                   [](const CommRequest& a, const CommRequest& b) {
                     return a.ready < b.ready;
                   });
  for (auto& r : requests) {
    const double start = std::max(r.ready, free_at);
    free_at = start + r.duration;
    if (r.duration > 0.0) {
      SimEvent ev = std::move(r.proto);
      ev.start = start;
      ev.end = free_at;
      ev.ready = r.ready;
      out.push_back(std::move(ev));
    }
  }
  return free_at;
}

std::string layer_label(std::size_t layer) { return "l" + std::to_string(layer); }

std::string group_name(const FusionGroup& g) {
  std::string name = "FactorComm " + std::string(to_string(g.members.front().kind)) +
                     " " + layer_label(g.members.front().layer);
  if (g.members.size() > 1) name += "-" + layer_label(g.members.back().layer);
  return name;
}

std::string inverse_name(const InvTask& t) {
  return "Inverse " + std::string(to_string(t.kind)) + " " + layer_label(t.layer);
}

void check_plans(const ModelProfile& profile, const SchemeConfig& cfg,
                 const SimPlans& plans) {
  validate(plans.forward, factor_tasks(profile, Pass::Forward));
  validate(plans.backward, factor_tasks(profile, Pass::Backward));
  validate(plans.placement, 2 * profile.layers.size());
  if (plans.placement.world_size != cfg.world_size) {
    throw ValidationError("placement plan world size does not match config");
  }
}

std::vector<double> worker_loads(std::span<const InvTask> tasks,
                                 const PlacementPlan& plan,
                                 const InverseParams& inv) {
  std::vector<double> loads(plan.world_size, 0.0);
  for (std::size_t w = 0; w < plan.world_size; ++w) {
    for (std::size_t i : plan.sets[w]) loads[w] += inverse_time(tasks[i].dim, inv);
  }
  return loads;
}

std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) -
                                  v.begin());
}

void sort_events(std::vector<SimEvent>& events) {
  std::stable_sort(events.begin(), events.end(),
                   [](const SimEvent& a, const SimEvent& b) {
                     if (a.start != b.start) return a.start < b.start;
                     return a.resource < b.resource;
                   });
}

}  // namespace

std::string_view to_string(Scheme s) {
  switch (s) {
    case Scheme::DKFAC: return "dkfac";
    case Scheme::MPDKFAC: return "mpdkfac";
    case Scheme::SPDKFAC: return "spdkfac";
  }
  return "?";
}

std::string_view to_string(PlacementMode m) {
  switch (m) {
    case PlacementMode::None: return "none";
    case PlacementMode::Seq: return "seq";
    case PlacementMode::Lbp: return "lbp";
  }
  return "?";
}

Scheme parse_scheme(std::string_view text) {
  if (text == "dkfac") return Scheme::DKFAC;
  if (text == "mpdkfac") return Scheme::MPDKFAC;
  if (text == "spdkfac") return Scheme::SPDKFAC;
  throw ValidationError("unknown scheme '" + std::string(text) + "'");
}

PlacementMode parse_placement(std::string_view text) {
  if (text == "none") return PlacementMode::None;
  if (text == "seq") return PlacementMode::Seq;
  if (text == "lbp") return PlacementMode::Lbp;
  throw ValidationError("unknown placement '" + std::string(text) + "'");
}

std::string_view to_string(Category c) {
  switch (c) {
    case Category::FFBP: return "FF&BP";
    case Category::GradComm: return "GradComm";
    case Category::FactorComp: return "FactorComp";
    case Category::FactorComm: return "FactorComm";
    case Category::InverseComp: return "InverseComp";
    case Category::InverseComm: return "InverseComm";
  }
  return "?";
}

std::string_view to_string(Resource r) {
  return r == Resource::Compute ? "compute" : "comm";
}

SchemeConfig SchemeConfig::defaults(Scheme scheme, std::size_t world_size) {
  SchemeConfig cfg;
  cfg.scheme = scheme;
  cfg.world_size = world_size;
  switch (scheme) {
    case Scheme::DKFAC:
      cfg.fusion = FusionPolicy::naive();
      cfg.placement = PlacementMode::None;
      cfg.factor_comm_after_backward = true;
      break;
    case Scheme::MPDKFAC:
      cfg.fusion = FusionPolicy::naive();
      cfg.placement = PlacementMode::Seq;
      cfg.factor_comm_after_backward = true;
      break;
    case Scheme::SPDKFAC:
      cfg.fusion = FusionPolicy::optimal();
      cfg.placement = PlacementMode::Lbp;
      cfg.factor_comm_after_backward = false;
      break;
  }
  return cfg;
}

SchemeConfig SchemeConfig::ablation(bool pipelining, bool lbp,
                                    std::size_t world_size) {
  SchemeConfig cfg = defaults(Scheme::SPDKFAC, world_size);
  if (!pipelining) {
    cfg.fusion = FusionPolicy::naive();
    cfg.factor_comm_after_backward = true;
  }
  cfg.placement = lbp ? PlacementMode::Lbp : PlacementMode::Seq;
  return cfg;
}

void validate(const SchemeConfig& cfg) {
  if (cfg.world_size < 1) throw ValidationError("world size must be >= 1");
  if (cfg.kfac_update_interval < 1) {
    throw ValidationError("kfac update interval must be >= 1");
  }
  if (cfg.scheme == Scheme::DKFAC && cfg.placement != PlacementMode::None) {
    throw ValidationError("D-KFAC computes every inverse locally; placement "
                          "must be none");
  }
}

double Breakdown::total() const {
  double t = 0.0;
  for (double s : seconds) t += s;
  return t;
}

Breakdown breakdown(std::span<const SimEvent> events) {
  std::vector<std::pair<double, double>> busy;
  for (const auto& e : events) {
    if (e.resource == Resource::Compute) busy.emplace_back(e.start, e.end);
  }
  std::sort(busy.begin(), busy.end());
  std::vector<std::pair<double, double>> merged;
  for (const auto& iv : busy) {
    if (!merged.empty() && iv.first <= merged.back().second) {
      merged.back().second = std::max(merged.back().second, iv.second);
    } else {
      merged.push_back(iv);
    }
  }

  Breakdown b;
  for (const auto& e : events) {
    double t = e.duration();
    if (e.resource == Resource::Comm) {
      auto it = std::lower_bound(
          merged.begin(), merged.end(), e.start,
          [](const auto& iv, double s) { return iv.second <= s; });
      for (; it != merged.end() && it->first < e.end; ++it) {
        t -= std::min(e.end, it->second) - std::max(e.start, it->first);
      }
      t = std::max(t, 0.0);
    }
    b.seconds[static_cast<std::size_t>(e.category)] += t;
  }
  return b;
}

SimPlans build_plans(const ModelProfile& profile, const SchemeConfig& cfg,
                     const PerfParams& perf) {
  validate(cfg);
  validate(profile);
  SimPlans plans;
  for (Pass pass : {Pass::Forward, Pass::Backward}) {
    const auto tasks = factor_tasks(profile, pass);
    const auto times = layer_times(profile, pass);
    (pass == Pass::Forward ? plans.forward : plans.backward) =
        plan_fusion(tasks, times, perf.allreduce, cfg.fusion);
  }
  const auto inv = inverse_tasks(profile);
  switch (cfg.placement) {
    case PlacementMode::None:
      plans.placement = local_place(inv, cfg.world_size);
      break;
    case PlacementMode::Seq:
      plans.placement = seq_place(inv, cfg.world_size);
      break;
    case PlacementMode::Lbp:
      plans.placement = lbp_place(inv, cfg.world_size, perf.inverse, perf.bcast,
                                  cfg.load_metric);
      break;
  }
  return plans;
}

InversePhase simulate_inverse_phase(std::span<const InvTask> tasks,
                                    const PlacementPlan& plan,
                                    const PerfParams& perf, double start,
                                    double comm_free) {
  validate(plan, tasks.size());
  InversePhase phase;
  const auto loads = worker_loads(tasks, plan, perf.inverse);
  phase.representative_worker = argmax(loads);

  double t = start;
  for (std::size_t i : plan.sets[phase.representative_worker]) {
    const double d = inverse_time(tasks[i].dim, perf.inverse);
    if (d > 0.0) {
      SimEvent ev;
      ev.name = inverse_name(tasks[i]);
      ev.category = Category::InverseComp;
      ev.resource = Resource::Compute;
      ev.start = t;
      ev.end = t + d;
      ev.ready = t;
      ev.layer = tasks[i].layer;
      ev.tensor = i;
      phase.events.push_back(std::move(ev));
    }
    t += d;
  }
  phase.compute_end = t;

  std::vector<CommRequest> requests;
  if (plan.world_size > 1) {
    for (std::size_t w = 0; w < plan.world_size; ++w) {
      double done = start;
      for (std::size_t i : plan.sets[w]) {
        done += inverse_time(tasks[i].dim, perf.inverse);
        if (plan.types[i] != TensorType::CT) continue;
        CommRequest r;
        r.ready = done;
        r.duration = bcast_time(tasks[i].dim, perf.bcast);
        r.proto.name = "Bcast " + std::string(to_string(tasks[i].kind)) + " " +
                       layer_label(tasks[i].layer) + " w" + std::to_string(w);
        r.proto.category = Category::InverseComm;
        r.proto.resource = Resource::Comm;
        r.proto.layer = tasks[i].layer;
        r.proto.tensor = i;
        r.proto.worker = w;
        requests.push_back(std::move(r));
      }
    }
  }
  phase.comm_end = serve(requests, comm_free, phase.events);
  return phase;
}

Timeline simulate_iteration(const ModelProfile& profile,
                            const SchemeConfig& cfg, const PerfParams& perf,
                            const SimPlans& plans, std::size_t iteration) {
  validate(cfg);
  validate(profile);
  check_plans(profile, cfg, plans);

  const bool refresh = iteration % cfg.kfac_update_interval == 0;
  const std::size_t n = profile.layers.size();
  std::vector<SimEvent> events;
  double t = 0.0;

  auto compute = [&](std::string name, Category cat, std::size_t layer,
                     double dur) {
    if (dur > 0.0) {
      SimEvent ev;
      ev.name = std::move(name);
      ev.category = cat;
      ev.resource = Resource::Compute;
      ev.start = t;
      ev.end = t + dur;
      ev.ready = t;
      ev.layer = layer;
      events.push_back(std::move(ev));
    }
    t += dur;
    return t;
  };

  std::vector<double> ready_a(n + 1, 0.0);
  std::vector<double> ready_g(n + 1, 0.0);
  for (std::size_t l = 1; l <= n; ++l) {
    const auto& lp = profile.layers[l - 1];
    if (refresh) {
      ready_a[l] = compute("FactorA " + layer_label(l), Category::FactorComp, l,
                           lp.t_factorA);
    }
    compute("FF " + layer_label(l), Category::FFBP, l, lp.t_ff);
  }

  std::vector<CommRequest> requests;
  auto request = [&](std::string name, Category cat, std::size_t layer,
                     double ready, double duration, std::size_t group) {
    CommRequest r;
    r.ready = ready;
    r.duration = duration;
    r.proto.name = std::move(name);
    r.proto.category = cat;
    r.proto.resource = Resource::Comm;
    r.proto.layer = layer;
    r.proto.group = group;
    requests.push_back(std::move(r));
  };

  std::vector<std::pair<double, double>> grad_requests;  // (ready, duration)
  for (std::size_t l = n; l >= 1; --l) {
    const auto& lp = profile.layers[l - 1];
    const double bp_end = compute("BP " + layer_label(l), Category::FFBP, l, lp.t_bp);
    grad_requests.emplace_back(bp_end,
                               allreduce_time(lp.grad_elements, perf.allreduce));
    if (refresh) {
      ready_g[l] = compute("FactorG " + layer_label(l), Category::FactorComp, l,
                           lp.t_factorG);
    }
  }
  const double backward_end = t;

  double factor_comm_end = 0.0;
  auto factor_requests = [&](const FusionPlan& plan,
                             const std::vector<double>& ready) {
    for (std::size_t g = 0; g < plan.groups.size(); ++g) {
      const auto& group = plan.groups[g];
      double r = 0.0;
      for (const auto& m : group.members) r = std::max(r, ready[m.layer]);
      if (cfg.factor_comm_after_backward) r = std::max(r, backward_end);
      request(group_name(group), Category::FactorComm,
              group.members.front().layer, r,
              allreduce_time(group.elements, perf.allreduce), g);
    }
  };

  if (refresh) factor_requests(plans.forward, ready_a);
  for (std::size_t k = 0; k < grad_requests.size(); ++k) {
    const std::size_t l = n - k;
    request("GradComm " + layer_label(l), Category::GradComm, l,
            grad_requests[k].first, grad_requests[k].second, kNoIndex);
  }
  if (refresh) factor_requests(plans.backward, ready_g);

  // Factor all-reduces may have zero duration under zero-cost parameters,
  // so their completion is tracked separately from emitted events.
  {
    std::vector<CommRequest> ordered = requests;
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const CommRequest& a, const CommRequest& b) {
                       return a.ready < b.ready;
                     });
    double free_at = 0.0;
    for (const auto& r : ordered) {
      free_at = std::max(r.ready, free_at) + r.duration;
      if (r.proto.category == Category::FactorComm) {
        factor_comm_end = std::max(factor_comm_end, free_at);
      }
    }
  }
  const double comm_free = serve(requests, 0.0, events);

  Timeline tl;
  tl.inverse_phase_start = std::max(backward_end, comm_free);
  if (refresh) {
    const double phase_start = std::max(backward_end, factor_comm_end);
    const auto inv = inverse_tasks(profile);
    InversePhase phase =
        simulate_inverse_phase(inv, plans.placement, perf, phase_start, comm_free);
    tl.inverse_phase_start = phase_start;
    tl.representative_worker = phase.representative_worker;
    for (auto& ev : phase.events) events.push_back(std::move(ev));
  }

  sort_events(events);
  tl.total_time = 0.0;
  for (const auto& e : events) tl.total_time = std::max(tl.total_time, e.end);
  if (!refresh) tl.inverse_phase_start = tl.total_time;
  tl.breakdown = breakdown(events);
  tl.events = std::move(events);
  return tl;
}

Timeline simulate_iteration(const ModelProfile& profile,
                            const SchemeConfig& cfg, const PerfParams& perf) {
  return simulate_iteration(profile, cfg, perf, build_plans(profile, cfg, perf));
}

std::vector<std::string> validate_timeline(const Timeline& timeline,
                                           const ModelProfile& profile,
                                           const SchemeConfig& cfg,
                                           const PerfParams& perf,
                                           const SimPlans& plans,
                                           std::size_t iteration) {
  std::vector<std::string> errors;
  const double eps = 1e-12 * std::max(1.0, timeline.total_time);
  const bool refresh = iteration % cfg.kfac_update_interval == 0;
  const std::size_t n = profile.layers.size();
  auto fail = [&](std::string msg) { errors.push_back(std::move(msg)); };

  // Durations and readiness.
  for (const auto& e : timeline.events) {
    if (!(e.end > e.start)) fail(e.name + ": nonpositive duration");
    if (e.start < e.ready - eps) fail(e.name + ": starts before it is ready");
  }

  // Resource exclusivity.
  for (Resource res : {Resource::Compute, Resource::Comm}) {
    std::vector<const SimEvent*> on;
    for (const auto& e : timeline.events) {
      if (e.resource == res) on.push_back(&e);
    }
    std::stable_sort(on.begin(), on.end(), [](const SimEvent* a, const SimEvent* b) {
      return a->start < b->start;
    });
    for (std::size_t i = 1; i < on.size(); ++i) {
      if (on[i]->start < on[i - 1]->end - eps) {
        fail("overlap on " + std::string(to_string(res)) + ": " + on[i - 1]->name +
             " and " + on[i]->name);
      }
    }
  }

  // Compute order: forward, backward, then the representative's inverses.
  std::vector<std::string> expected;
  for (std::size_t l = 1; l <= n; ++l) {
    if (refresh) expected.push_back("FactorA " + layer_label(l));
    expected.push_back("FF " + layer_label(l));
  }
  for (std::size_t l = n; l >= 1; --l) {
    expected.push_back("BP " + layer_label(l));
    if (refresh) expected.push_back("FactorG " + layer_label(l));
  }
  const auto inv = inverse_tasks(profile);
  const std::size_t rep = timeline.representative_worker;
  if (refresh) {
    if (rep >= plans.placement.sets.size()) {
      fail("representative worker out of range");
      return errors;
    }
    for (std::size_t i : plans.placement.sets[rep]) {
      expected.push_back(inverse_name(inv[i]));
    }
  }
  std::vector<const SimEvent*> compute_events;
  std::map<std::string, const SimEvent*> by_name;
  for (const auto& e : timeline.events) {
    if (e.resource == Resource::Compute) {
      compute_events.push_back(&e);
      by_name[e.name] = &e;
    }
  }
  std::stable_sort(compute_events.begin(), compute_events.end(),
                   [](const SimEvent* a, const SimEvent* b) {
                     return a->start < b->start;
                   });
  if (compute_events.size() != expected.size()) {
    fail("expected " + std::to_string(expected.size()) +
         " compute events, found " + std::to_string(compute_events.size()));
  } else {
    for (std::size_t i = 0; i < expected.size(); ++i) {
      if (compute_events[i]->name != expected[i]) {
        fail("compute event " + std::to_string(i) + " is " +
             compute_events[i]->name + ", expected " + expected[i]);
        break;
      }
    }
  }

  auto end_of = [&](const std::string& name) -> double {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      fail("missing compute event " + name);
      return 0.0;
    }
    return it->second->end;
  };
  const double backward_end = end_of(refresh ? "FactorG l1" : "BP l1");

  // Factor all-reduces wait for every member; gradients wait for BP.
  double factor_comm_end = 0.0;
  std::size_t factor_events = 0;
  std::size_t grad_events = 0;
  for (const auto& e : timeline.events) {
    if (e.category == Category::FactorComm) {
      ++factor_events;
      factor_comm_end = std::max(factor_comm_end, e.end);
      const bool is_a = e.name.rfind("FactorComm A", 0) == 0;
      const FusionPlan& plan = is_a ? plans.forward : plans.backward;
      if (e.group >= plan.groups.size()) {
        fail(e.name + ": unknown fusion group");
        continue;
      }
      for (const auto& m : plan.groups[e.group].members) {
        const std::string member =
            std::string(is_a ? "FactorA " : "FactorG ") + layer_label(m.layer);
        if (e.start < end_of(member) - eps) {
          fail(e.name + ": starts before " + member + " is computed");
        }
      }
      if (cfg.factor_comm_after_backward && e.start < backward_end - eps) {
        fail(e.name + ": starts before the backward pass ends");
      }
    } else if (e.category == Category::GradComm) {
      ++grad_events;
      if (e.start < end_of("BP " + layer_label(e.layer)) - eps) {
        fail(e.name + ": starts before its backward computation");
      }
    }
  }
  if (refresh && perf.allreduce.beta > 0.0 &&
      factor_events != plans.forward.groups.size() + plans.backward.groups.size()) {
    fail("factor all-reduce count does not match the fusion plans");
  }
  if (perf.allreduce.beta > 0.0 && grad_events != n) {
    fail("expected one gradient all-reduce per layer");
  }

  if (refresh) {
    const double phase_start = std::max(backward_end, factor_comm_end);
    for (const auto& e : timeline.events) {
      if (e.category == Category::InverseComp && e.start < phase_start - eps) {
        fail(e.name + ": starts before factor aggregation completes");
      }
    }
    // Each broadcast follows the inversion on its source worker.
    std::size_t bcasts = 0;
    for (const auto& e : timeline.events) {
      if (e.category != Category::InverseComm) continue;
      ++bcasts;
      if (e.worker >= plans.placement.world_size || e.tensor >= inv.size()) {
        fail(e.name + ": bad source reference");
        continue;
      }
      if (plans.placement.types[e.tensor] != TensorType::CT) {
        fail(e.name + ": broadcast of a non-communicated tensor");
      }
      double done = phase_start;
      bool found = false;
      for (std::size_t i : plans.placement.sets[e.worker]) {
        done += inverse_time(inv[i].dim, perf.inverse);
        if (i == e.tensor) {
          found = true;
          break;
        }
      }
      if (!found) fail(e.name + ": tensor not placed on its source worker");
      if (e.start < done - eps) fail(e.name + ": starts before the inverse exists");
      if (e.worker == rep && e.start < end_of(inverse_name(inv[e.tensor])) - eps) {
        fail(e.name + ": starts before its InverseComp event ends");
      }
    }
    std::size_t ct = 0;
    for (auto type : plans.placement.types) ct += type == TensorType::CT;
    if (plans.placement.world_size > 1 && perf.bcast.beta > 0.0 && bcasts != ct) {
      fail("expected one broadcast per communicated tensor");
    }
  }

  double max_end = 0.0;
  for (const auto& e : timeline.events) max_end = std::max(max_end, e.end);
  if (max_end != timeline.total_time) fail("total_time is not the last event end");
  const double sum = timeline.breakdown.total();
  if (std::abs(sum - timeline.total_time) > 1e-9 * std::max(1.0, timeline.total_time)) {
    fail("breakdown sums to " + std::to_string(sum) + " but total is " +
         std::to_string(timeline.total_time));
  }
  return errors;
}

std::vector<ComparisonRow> compare_schemes(const ModelProfile& profile,
                                           const PerfParams& perf,
                                           std::span<const NamedScheme> schemes) {
  if (schemes.size() < 2) {
    throw ValidationError("compare_schemes: need at least two schemes");
  }
  std::vector<ComparisonRow> rows;
  std::optional<double> d_time;
  std::optional<double> mpd_time;
  for (const auto& s : schemes) {
    const Timeline tl = simulate_iteration(profile, s.config, perf);
    rows.push_back({s.label, tl.total_time, std::nullopt, std::nullopt});
    if (s.config.scheme == Scheme::DKFAC && !d_time) d_time = tl.total_time;
    if (s.config.scheme == Scheme::MPDKFAC && !mpd_time) mpd_time = tl.total_time;
  }
  for (auto& r : rows) {
    if (d_time) r.sp1 = *d_time / r.time;
    if (mpd_time) r.sp2 = *mpd_time / r.time;
  }
  return rows;
}

namespace {

std::string seconds9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9f", v);
  return buf;
}

}  // namespace

void write_timeline_csv(std::ostream& out, const Timeline& timeline) {
  out << "event,category,resource,start,end,layer\n";
  for (const auto& e : timeline.events) {
    out << e.name << ',' << to_string(e.category) << ',' << to_string(e.resource)
        << ',' << seconds9(e.start) << ',' << seconds9(e.end) << ',' << e.layer
        << '\n';
  }
}

void write_breakdown_csv(std::ostream& out, const Breakdown& b) {
  out << "category,seconds\n";
  for (std::size_t c = 0; c < kNumCategories; ++c) {
    out << to_string(static_cast<Category>(c)) << ',' << seconds9(b.seconds[c])
        << '\n';
  }
}

void write_comparison_csv(std::ostream& out,
                          std::span<const ComparisonRow> rows) {
  out << "scheme,time,SP1,SP2\n";
  for (const auto& r : rows) {
    out << r.label << ',' << seconds9(r.time) << ','
        << (r.sp1 ? seconds9(*r.sp1) : "") << ','
        << (r.sp2 ? seconds9(*r.sp2) : "") << '\n';
  }
}

}  // namespace kfacsched

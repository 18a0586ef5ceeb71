#include "kfacsched/planner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kfacsched/error.hpp"
#include "kfacsched/linalg.hpp"

namespace kfacsched {

namespace {

void check_pass_inputs(std::span<const FactorTask> tasks,
                       std::span<const double> layer_times) {
  if (tasks.empty()) throw ValidationError("fusion planning: no factor tasks");
  if (layer_times.size() != tasks.size()) {
    throw ValidationError("fusion planning: " + std::to_string(tasks.size()) +
                          " tasks but " + std::to_string(layer_times.size()) +
                          " layer times");
  }
  const Pass pass = tasks.front().pass;
  for (const auto& t : tasks) {
    if (t.pass != pass) {
      throw ValidationError("fusion planning: tasks span both passes");
    }
    if ((t.kind == FactorKind::A) != (t.pass == Pass::Forward)) {
      throw ValidationError("fusion planning: A factors belong to the forward "
                            "pass and G factors to the backward pass");
    }
    if (t.dim < 1) throw ValidationError("fusion planning: zero dimension");
    if (!(t.compute_time > 0.0) || !std::isfinite(t.compute_time)) {
      throw ValidationError("fusion planning: compute times must be positive");
    }
  }
  for (double t : layer_times) {
    if (!(t > 0.0) || !std::isfinite(t)) {
      throw ValidationError("fusion planning: layer times must be positive");
    }
  }
}

FactorRef ref_of(const FactorTask& t) { return {t.layer, t.kind}; }

class GroupBuilder {
 public:
  explicit GroupBuilder(FusionPlan& plan) : plan_(plan) {}

  void add(const FactorTask& t) {
    pending_.members.push_back(ref_of(t));
    pending_.elements += t.elements();
  }
  bool empty() const { return pending_.members.empty(); }
  std::uint64_t elements() const { return pending_.elements; }
  void flush() {
    if (empty()) return;
    plan_.groups.push_back(std::move(pending_));
    pending_ = {};
  }

 private:
  FusionPlan& plan_;
  FusionGroup pending_;
};

}  // namespace

std::string_view to_string(FactorKind kind) {
  return kind == FactorKind::A ? "A" : "G";
}

std::string_view to_string(Pass pass) {
  return pass == Pass::Forward ? "forward" : "backward";
}

std::string_view to_string(FusionPolicyKind kind) {
  switch (kind) {
    case FusionPolicyKind::Naive: return "naive";
    case FusionPolicyKind::LayerWise: return "layerwise";
    case FusionPolicyKind::Threshold: return "threshold";
    case FusionPolicyKind::Optimal: return "optimal";
  }
  return "?";
}

FusionPolicyKind parse_fusion_policy(std::string_view text) {
  if (text == "naive") return FusionPolicyKind::Naive;
  if (text == "layerwise") return FusionPolicyKind::LayerWise;
  if (text == "threshold") return FusionPolicyKind::Threshold;
  if (text == "optimal") return FusionPolicyKind::Optimal;
  throw ValidationError("unknown fusion policy '" + std::string(text) + "'");
}

std::uint64_t FactorTask::elements() const { return packed_size(dim); }

std::vector<FactorTask> factor_tasks(const ModelProfile& profile, Pass pass) {
  std::vector<FactorTask> out;
  const std::size_t n = profile.layers.size();
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    if (pass == Pass::Forward) {
      const auto& l = profile.layers[k];
      out.push_back({k + 1, FactorKind::A, l.a_dim, l.t_factorA, pass});
    } else {
      const std::size_t layer = n - k;
      const auto& l = profile.layers[layer - 1];
      out.push_back({layer, FactorKind::G, l.g_dim, l.t_factorG, pass});
    }
  }
  return out;
}

std::vector<double> layer_times(const ModelProfile& profile, Pass pass) {
  std::vector<double> out;
  const std::size_t n = profile.layers.size();
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    out.push_back(pass == Pass::Forward ? profile.layers[k].t_ff
                                        : profile.layers[n - 1 - k].t_bp);
  }
  return out;
}

std::vector<double> factor_ready_times(std::span<const FactorTask> tasks,
                                       std::span<const double> layer_times) {
  check_pass_inputs(tasks, layer_times);
  std::vector<double> ready(tasks.size());
  double t = 0.0;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    if (tasks[k].pass == Pass::Forward) {
      ready[k] = t + tasks[k].compute_time;
      t = ready[k] + layer_times[k];
    } else {
      t += layer_times[k];
      ready[k] = t + tasks[k].compute_time;
      t = ready[k];
    }
  }
  return ready;
}

FusionPlan plan_fusion(std::span<const FactorTask> tasks,
                       std::span<const double> layer_times,
                       const AllReduceParams& allreduce, FusionPolicy policy) {
  check_pass_inputs(tasks, layer_times);
  FusionPlan plan{policy, tasks.front().pass, {}};
  GroupBuilder group(plan);

  switch (policy.kind) {
    case FusionPolicyKind::Naive:
      for (const auto& t : tasks) group.add(t);
      break;

    case FusionPolicyKind::LayerWise:
      for (const auto& t : tasks) {
        group.add(t);
        group.flush();
      }
      break;

    case FusionPolicyKind::Threshold: {
      if (policy.threshold_bytes == 0) {
        throw ValidationError("threshold fusion needs a positive byte size");
      }
      for (const auto& t : tasks) {
        group.add(t);
        if (group.elements() * kBytesPerElement >= policy.threshold_bytes) {
          group.flush();
        }
      }
      break;
    }

    case FusionPolicyKind::Optimal: {
      const std::vector<double> ready = factor_ready_times(tasks, layer_times);
      double comm_free = 0.0;
      double pending_ready = ready[0];
      group.add(tasks[0]);
      for (std::size_t k = 1; k < tasks.size(); ++k) {
        const double comm_start = std::max(pending_ready, comm_free);
        if (ready[k] < comm_start + allreduce.alpha) {
          group.add(tasks[k]);
          pending_ready = ready[k];
          continue;
        }
        comm_free = comm_start + allreduce_time(group.elements(), allreduce);
        group.flush();
        group.add(tasks[k]);
        pending_ready = ready[k];
      }
      break;
    }
  }
  group.flush();
  return plan;
}

void validate(const FusionPlan& plan, std::span<const FactorTask> tasks) {
  std::size_t k = 0;
  for (const auto& g : plan.groups) {
    if (g.members.empty()) throw ValidationError("fusion plan: empty group");
    std::uint64_t elements = 0;
    for (const auto& m : g.members) {
      if (k >= tasks.size() || !(m == ref_of(tasks[k]))) {
        throw ValidationError("fusion plan: groups do not follow task order");
      }
      elements += tasks[k].elements();
      ++k;
    }
    if (elements != g.elements) {
      throw ValidationError("fusion plan: group element count is wrong");
    }
  }
  if (k != tasks.size()) {
    throw ValidationError("fusion plan: not every task is covered");
  }
}

std::vector<InvTask> inverse_tasks(const ModelProfile& profile) {
  std::vector<InvTask> out;
  out.reserve(2 * profile.layers.size());
  for (std::size_t k = 0; k < profile.layers.size(); ++k) {
    const auto& l = profile.layers[k];
    out.push_back({out.size(), l.a_dim, k + 1, FactorKind::A});
    out.push_back({out.size(), l.g_dim, k + 1, FactorKind::G});
  }
  return out;
}

std::vector<std::size_t> PlacementPlan::nct_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < types.size(); ++i) {
    if (types[i] == TensorType::NCT) out.push_back(i);
  }
  return out;
}

void validate(const PlacementPlan& plan, std::size_t num_tensors) {
  if (plan.world_size < 1 || plan.sets.size() != plan.world_size) {
    throw ValidationError("placement: one set per worker required");
  }
  if (plan.types.size() != num_tensors) {
    throw ValidationError("placement: tensor type list has wrong length");
  }
  std::vector<std::size_t> seen(num_tensors, 0);
  for (const auto& set : plan.sets) {
    std::vector<bool> in_this(num_tensors, false);
    for (std::size_t i : set) {
      if (i >= num_tensors) throw ValidationError("placement: bad tensor index");
      if (in_this[i]) throw ValidationError("placement: duplicate in one set");
      in_this[i] = true;
      ++seen[i];
    }
  }
  for (std::size_t i = 0; i < num_tensors; ++i) {
    const std::size_t want =
        plan.types[i] == TensorType::NCT ? plan.world_size : 1;
    if (seen[i] != want) {
      throw ValidationError("placement: tensor " + std::to_string(i) +
                            " appears in " + std::to_string(seen[i]) +
                            " sets, expected " + std::to_string(want));
    }
  }
}

PlacementPlan lbp_place(std::span<const InvTask> tasks, std::size_t world_size,
                        const InverseParams& inv, const BcastParams& bc,
                        LoadMetric metric) {
  if (world_size < 1) throw ValidationError("lbp_place: world size must be >= 1");
  if (tasks.empty()) throw ValidationError("lbp_place: no tensors");

  PlacementPlan plan;
  plan.world_size = world_size;
  plan.sets.resize(world_size);
  plan.types.assign(tasks.size(), TensorType::CT);
  plan.loads.assign(world_size, 0.0);

  std::vector<std::size_t> order(tasks.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return tasks[a].dim > tasks[b].dim;
  });

  for (std::size_t i : order) {
    const double d = static_cast<double>(tasks[i].dim);
    const double load = metric == LoadMetric::Dim ? d : d * d;
    const auto p = static_cast<std::size_t>(
        std::min_element(plan.loads.begin(), plan.loads.end()) -
        plan.loads.begin());
    const bool nct = world_size == 1 ||
                     inverse_time(tasks[i].dim, inv) < bcast_time(tasks[i].dim, bc);
    if (nct) {
      plan.types[i] = TensorType::NCT;
      for (std::size_t w = 0; w < world_size; ++w) {
        plan.sets[w].push_back(i);
        plan.loads[w] += load;
      }
    } else {
      plan.sets[p].push_back(i);
      plan.loads[p] += load;
    }
  }
  return plan;
}

PlacementPlan seq_place(std::span<const InvTask> tasks, std::size_t world_size) {
  if (world_size < 1) throw ValidationError("seq_place: world size must be >= 1");
  PlacementPlan plan;
  plan.world_size = world_size;
  plan.sets.resize(world_size);
  plan.types.assign(tasks.size(), TensorType::CT);
  plan.loads.assign(world_size, 0.0);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const std::size_t w = i % world_size;
    const double d = static_cast<double>(tasks[i].dim);
    plan.sets[w].push_back(i);
    plan.loads[w] += d * d;
  }
  return plan;
}

PlacementPlan local_place(std::span<const InvTask> tasks,
                          std::size_t world_size) {
  if (world_size < 1) {
    throw ValidationError("local_place: world size must be >= 1");
  }
  PlacementPlan plan;
  plan.world_size = world_size;
  plan.types.assign(tasks.size(), TensorType::NCT);
  std::vector<std::size_t> all(tasks.size());
  std::iota(all.begin(), all.end(), 0);
  double load = 0.0;
  for (const auto& t : tasks) load += static_cast<double>(t.dim) * t.dim;
  plan.sets.assign(world_size, all);
  plan.loads.assign(world_size, load);
  return plan;
}

double placement_makespan(const PlacementPlan& plan,
                          std::span<const InvTask> tasks,
                          const InverseParams& inv, const BcastParams& bc) {
  validate(plan, tasks.size());
  double worst = 0.0;
  for (const auto& set : plan.sets) {
    double t = 0.0;
    for (std::size_t i : set) {
      t += inverse_time(tasks[i].dim, inv);
      if (plan.types[i] == TensorType::CT && plan.world_size > 1) {
        t += bcast_time(tasks[i].dim, bc);
      }
    }
    worst = std::max(worst, t);
  }
  return worst;
}

nlohmann::json fusion_plan_to_json(const FusionPlan& forward,
                                   const FusionPlan& backward) {
  auto groups = [](const FusionPlan& plan) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& g : plan.groups) {
      nlohmann::json members = nlohmann::json::array();
      for (const auto& m : g.members) {
        members.push_back({{"layer", m.layer}, {"kind", to_string(m.kind)}});
      }
      out.push_back(std::move(members));
    }
    return out;
  };
  nlohmann::json doc = {{"policy", to_string(forward.policy.kind)},
                        {"forward", groups(forward)},
                        {"backward", groups(backward)}};
  if (forward.policy.kind == FusionPolicyKind::Threshold) {
    doc["threshold_bytes"] = forward.policy.threshold_bytes;
  }
  return doc;
}

nlohmann::json placement_plan_to_json(const PlacementPlan& plan,
                                      std::span<const InvTask> tasks) {
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : tasks) {
    tensors.push_back({{"index", t.index},
                       {"layer", t.layer},
                       {"kind", to_string(t.kind)},
                       {"dim", t.dim}});
  }
  return {{"world_size", plan.world_size},
          {"workers", plan.sets},
          {"nct", plan.nct_indices()},
          {"tensors", std::move(tensors)}};
}

}  // namespace kfacsched

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "kfacsched/perf_models.hpp"
#include "kfacsched/profile.hpp"

namespace kfacsched {

enum class FactorKind { A, G };
enum class Pass { Forward, Backward };

std::string_view to_string(FactorKind kind);
std::string_view to_string(Pass pass);

// Computing one Kronecker factor. Layers are numbered 1..L; the A task of
// layer l is the factor of its input activations and runs in the forward
// pass, the G task runs in the backward pass.
struct FactorTask {
  std::size_t layer = 0;
  FactorKind kind = FactorKind::A;
  std::size_t dim = 0;
  double compute_time = 0.0;
  Pass pass = Pass::Forward;

  std::uint64_t elements() const;
};

// Tasks of one pass in computation order: A of layers 1..L for the forward
// pass, G of layers L..1 for the backward pass.
std::vector<FactorTask> factor_tasks(const ModelProfile& profile, Pass pass);
// Layer compute times aligned with factor_tasks(profile, pass): t_ff of
// the same layer in the forward pass, t_bp in the backward pass.
std::vector<double> layer_times(const ModelProfile& profile, Pass pass);

// Times at which each task's factor is computed, assuming the compute
// stream runs without stalls from t = 0. The forward pass runs
// [factor A_l, FF_l] per layer; the backward pass runs [BP_l, factor G_l].
std::vector<double> factor_ready_times(std::span<const FactorTask> tasks,
                                       std::span<const double> layer_times);

enum class FusionPolicyKind { Naive, LayerWise, Threshold, Optimal };

inline constexpr std::uint64_t kDefaultFusionThresholdBytes = 64ull << 20;
inline constexpr std::uint64_t kBytesPerElement = 8;

struct FusionPolicy {
  FusionPolicyKind kind = FusionPolicyKind::Optimal;
  std::uint64_t threshold_bytes = kDefaultFusionThresholdBytes;

  static FusionPolicy naive() { return {FusionPolicyKind::Naive}; }
  static FusionPolicy layer_wise() { return {FusionPolicyKind::LayerWise}; }
  static FusionPolicy threshold(
      std::uint64_t bytes = kDefaultFusionThresholdBytes) {
    return {FusionPolicyKind::Threshold, bytes};
  }
  static FusionPolicy optimal() { return {FusionPolicyKind::Optimal}; }

  friend bool operator==(const FusionPolicy&, const FusionPolicy&) = default;
};

std::string_view to_string(FusionPolicyKind kind);
// Accepts naive, layerwise, threshold, optimal.
FusionPolicyKind parse_fusion_policy(std::string_view text);

struct FactorRef {
  std::size_t layer = 0;
  FactorKind kind = FactorKind::A;

  friend bool operator==(const FactorRef&, const FactorRef&) = default;
};

// Factors all-reduced together as one message.
struct FusionGroup {
  std::vector<FactorRef> members;  // consecutive in computation order
  std::uint64_t elements = 0;      // sum of packed sizes
};

struct FusionPlan {
  FusionPolicy policy;
  Pass pass = Pass::Forward;
  std::vector<FusionGroup> groups;
};

// Groups the factor all-reduces of one pass.
//
// Naive puts the whole pass in one message; LayerWise sends each factor on
// its own; Threshold accumulates consecutive factors until the message
// reaches threshold_bytes (8 bytes per element); Optimal replays the pass
// and keeps appending the next factor while it finishes computing before
// the pending message could start and pay its all-reduce startup.
FusionPlan plan_fusion(std::span<const FactorTask> tasks,
                       std::span<const double> layer_times,
                       const AllReduceParams& allreduce, FusionPolicy policy);

// Throws ValidationError unless the groups partition `tasks` in order.
void validate(const FusionPlan& plan, std::span<const FactorTask> tasks);

// Inverting one Kronecker factor. Index is the position in the list
// produced by inverse_tasks: A of layer 1, G of layer 1, A of layer 2, ...
struct InvTask {
  std::size_t index = 0;
  std::size_t dim = 0;
  std::size_t layer = 0;
  FactorKind kind = FactorKind::A;
};

std::vector<InvTask> inverse_tasks(const ModelProfile& profile);

// Communicated tensors are inverted on one worker and broadcast;
// non-communicated tensors are inverted on every worker.
enum class TensorType { CT, NCT };

enum class LoadMetric { Dim, DimSquared };

struct PlacementPlan {
  std::size_t world_size = 0;
  // Per worker, tensor indices in execution order.
  std::vector<std::vector<std::size_t>> sets;
  std::vector<TensorType> types;
  // Bucket array: accumulated load per worker in the placement metric.
  std::vector<double> loads;

  std::vector<std::size_t> nct_indices() const;
};

// Throws ValidationError if CT tensors are not in exactly one set, NCT
// tensors are not in all sets, or some tensor is missing.
void validate(const PlacementPlan& plan, std::size_t num_tensors);

// Load-balancing placement. Visits tensors by descending dimension (ties by
// index), marks a tensor NCT when inverting it is cheaper than
// broadcasting it, and otherwise assigns it to the least-loaded worker
// (ties to the lowest index). With one worker every tensor is NCT, since a
// broadcast to nobody is free.
PlacementPlan lbp_place(std::span<const InvTask> tasks, std::size_t world_size,
                        const InverseParams& inv, const BcastParams& bc,
                        LoadMetric metric = LoadMetric::DimSquared);

// Round-robin placement in task order; all tensors CT.
PlacementPlan seq_place(std::span<const InvTask> tasks, std::size_t world_size);

// Every worker inverts every tensor; nothing is broadcast.
PlacementPlan local_place(std::span<const InvTask> tasks,
                          std::size_t world_size);

// max over workers of (sum of inverse times of its set + sum of broadcast
// times of its CT members). Broadcasts are free when world_size == 1.
double placement_makespan(const PlacementPlan& plan,
                          std::span<const InvTask> tasks,
                          const InverseParams& inv, const BcastParams& bc);

nlohmann::json fusion_plan_to_json(const FusionPlan& forward,
                                   const FusionPlan& backward);
nlohmann::json placement_plan_to_json(const PlacementPlan& plan,
                                      std::span<const InvTask> tasks);

}  // namespace kfacsched

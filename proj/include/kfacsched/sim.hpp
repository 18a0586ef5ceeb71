#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kfacsched/perf_models.hpp"
#include "kfacsched/planner.hpp"
#include "kfacsched/profile.hpp"

namespace kfacsched {

enum class Scheme { DKFAC, MPDKFAC, SPDKFAC };
enum class PlacementMode { None, Seq, Lbp };

std::string_view to_string(Scheme s);
std::string_view to_string(PlacementMode m);
Scheme parse_scheme(std::string_view text);           // dkfac, mpdkfac, spdkfac
PlacementMode parse_placement(std::string_view text);  // none, seq, lbp

struct SchemeConfig {
  Scheme scheme = Scheme::SPDKFAC;
  FusionPolicy fusion = FusionPolicy::optimal();
  PlacementMode placement = PlacementMode::Lbp;
  std::size_t world_size = 1;
  std::size_t kfac_update_interval = 1;
  // Hold every factor all-reduce until the backward pass has finished
  // instead of overlapping it with the remaining computation.
  bool factor_comm_after_backward = false;
  LoadMetric load_metric = LoadMetric::DimSquared;

  // D-KFAC: naive fusion after backward, inverses computed locally.
  // MPD-KFAC: naive fusion after backward, sequential placement.
  // SPD-KFAC: pipelined optimal fusion, load-balancing placement.
  static SchemeConfig defaults(Scheme scheme, std::size_t world_size);
  // Ablation variants: pipelining toggles pipelined optimal fusion versus
  // naive-after-backward; lbp toggles LBP versus sequential placement.
  static SchemeConfig ablation(bool pipelining, bool lbp,
                               std::size_t world_size);
};

// D-KFAC must not distribute inverses; every knob must be in range.
void validate(const SchemeConfig& cfg);

enum class Category {
  FFBP,
  GradComm,
  FactorComp,
  FactorComm,
  InverseComp,
  InverseComm,
};
inline constexpr std::size_t kNumCategories = 6;
std::string_view to_string(Category c);

enum class Resource { Compute, Comm };
std::string_view to_string(Resource r);

inline constexpr std::size_t kNoIndex = std::numeric_limits<std::size_t>::max();

struct SimEvent {
  std::string name;
  Category category = Category::FFBP;
  Resource resource = Resource::Compute;
  double start = 0.0;
  double end = 0.0;
  std::size_t layer = 0;          // 0 when the event has no single layer
  double ready = 0.0;             // earliest start its dependencies allow
  std::size_t tensor = kNoIndex;  // inverse events
  std::size_t group = kNoIndex;   // factor all-reduce events
  std::size_t worker = kNoIndex;  // source worker of a broadcast

  double duration() const { return end - start; }
  friend bool operator==(const SimEvent&, const SimEvent&) = default;
};

// Per-category seconds. Computation categories are plain sums; the
// communication categories count only time not covered by any computation.
struct Breakdown {
  std::array<double, kNumCategories> seconds{};

  double operator[](Category c) const {
    return seconds[static_cast<std::size_t>(c)];
  }
  double total() const;
};

Breakdown breakdown(std::span<const SimEvent> events);

struct Timeline {
  std::vector<SimEvent> events;  // ordered by (start, resource, insertion)
  double total_time = 0.0;
  Breakdown breakdown;
  // Start of the inverse phase; equals total_time when no factors update.
  double inverse_phase_start = 0.0;
  // Worker whose inverse computations the compute resource shows.
  std::size_t representative_worker = 0;
};

struct SimPlans {
  FusionPlan forward;
  FusionPlan backward;
  PlacementPlan placement;
};

SimPlans build_plans(const ModelProfile& profile, const SchemeConfig& cfg,
                     const PerfParams& perf);

// One iteration of one representative worker: a serial compute resource
// and a serial communication resource. `iteration` selects whether factors
// are refreshed (iteration % kfac_update_interval == 0).
Timeline simulate_iteration(const ModelProfile& profile,
                            const SchemeConfig& cfg, const PerfParams& perf,
                            const SimPlans& plans, std::size_t iteration = 0);

// Convenience: build_plans + simulate_iteration.
Timeline simulate_iteration(const ModelProfile& profile,
                            const SchemeConfig& cfg, const PerfParams& perf);

struct InversePhase {
  std::vector<SimEvent> events;
  double compute_end = 0.0;
  double comm_end = 0.0;
  std::size_t representative_worker = 0;

  double end() const { return std::max(compute_end, comm_end); }
};

// The inversion phase alone: every worker inverts its set serially from
// `start`; broadcasts of CT results share one communication resource that
// is free from `comm_free` on.
InversePhase simulate_inverse_phase(std::span<const InvTask> tasks,
                                    const PlacementPlan& plan,
                                    const PerfParams& perf, double start = 0.0,
                                    double comm_free = 0.0);

// Post-hoc check of resource exclusivity, dependency edges and breakdown
// consistency. Returns one message per violation; empty means valid.
std::vector<std::string> validate_timeline(const Timeline& timeline,
                                           const ModelProfile& profile,
                                           const SchemeConfig& cfg,
                                           const PerfParams& perf,
                                           const SimPlans& plans,
                                           std::size_t iteration = 0);

struct NamedScheme {
  std::string label;
  SchemeConfig config;
};

struct ComparisonRow {
  std::string label;
  double time = 0.0;
  std::optional<double> sp1;  // D-KFAC time / this time
  std::optional<double> sp2;  // MPD-KFAC time / this time
};

// Simulates each scheme. The speedup references are the first D-KFAC and
// MPD-KFAC entries; a missing reference leaves that column empty.
std::vector<ComparisonRow> compare_schemes(const ModelProfile& profile,
                                           const PerfParams& perf,
                                           std::span<const NamedScheme> schemes);

void write_timeline_csv(std::ostream& out, const Timeline& timeline);
void write_breakdown_csv(std::ostream& out, const Breakdown& b);
void write_comparison_csv(std::ostream& out,
                          std::span<const ComparisonRow> rows);

}  // namespace kfacsched

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace kfacsched {

// One preconditioned layer. a_dim is the dimension of its input factor A
// (in_channels * kh * kw for a convolution), g_dim the dimension of its
// output factor G (out_channels).
struct LayerProfile {
  std::string name;
  std::size_t a_dim = 0;
  std::size_t g_dim = 0;
  std::uint64_t grad_elements = 0;
  double t_ff = 0.0;
  double t_bp = 0.0;
  double t_factorA = 0.0;
  double t_factorG = 0.0;

  friend bool operator==(const LayerProfile&, const LayerProfile&) = default;
};

struct ProfileTotals {
  std::uint64_t params = 0;
  std::uint64_t a_elements = 0;  // sum of packed A sizes
  std::uint64_t g_elements = 0;  // sum of packed G sizes

  friend bool operator==(const ProfileTotals&, const ProfileTotals&) = default;
};

struct ModelProfile {
  std::string model;
  std::size_t batch_size = 0;
  std::vector<LayerProfile> layers;
  std::string timing_source = "synthetic";

  std::size_t num_layers() const noexcept { return layers.size(); }
  ProfileTotals totals() const;

  friend bool operator==(const ModelProfile&, const ModelProfile&) = default;
};

// Throws ValidationError on nonpositive dims or times or an empty model.
void validate(const ModelProfile& profile);

nlohmann::json profile_to_json(const ModelProfile& profile);
// Validates the schema. If the document carries a "totals" object its
// entries must agree with the recomputed sums within 0.1%.
ModelProfile profile_from_json(const nlohmann::json& doc);

ModelProfile load_profile(const std::filesystem::path& path);
void save_profile(const std::filesystem::path& path,
                  const ModelProfile& profile);

// Layer dimensions plus the cost weights used to spread synthetic timings.
struct LayerDims {
  std::string name;
  std::size_t a_dim = 0;
  std::size_t g_dim = 0;
  std::uint64_t grad_elements = 0;
  // Output spatial positions (H * W); 1 for fully-connected layers.
  std::uint64_t spatial = 1;
};

struct ArchitectureDims {
  std::string model;
  std::size_t batch_size = 0;
  std::vector<LayerDims> layers;
};

// Bundled architectures: "resnet50", "resnet152", "densenet201",
// "inception_v4". Throws ValidationError for unknown names.
ArchitectureDims architecture(std::string_view name);
std::vector<std::string> bundled_models();

struct TimingTargets {
  double ffbp_seconds = 0.0;         // sum of t_ff + t_bp over layers
  double factor_comp_seconds = 0.0;  // sum of t_factorA + t_factorG
  double bp_over_ff = 2.0;
};

// Spreads the targets over layers in proportion to per-layer cost
// heuristics: ff/bp by weight-elements * spatial, factor A/G by
// spatial * dim^2. Throws ValidationError for nonpositive targets or an
// empty architecture.
ModelProfile generate_synthetic_timings(const ArchitectureDims& dims,
                                        const TimingTargets& targets);

// Targets used to build the bundled profiles.
TimingTargets bundled_targets(std::string_view model);

}  // namespace kfacsched

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "kfacsched/linalg.hpp"
#include "kfacsched/planner.hpp"

namespace kfacsched {

enum class Activation { Identity, Relu };

std::string_view to_string(Activation a);
Activation parse_activation(std::string_view text);

struct MlpLayer {
  DenseMatrix weight;  // d_out x d_in, no bias
  Activation activation = Activation::Identity;
};

struct TinyMLP {
  std::vector<MlpLayer> layers;

  std::size_t input_dim() const { return layers.front().weight.cols(); }
  std::size_t output_dim() const { return layers.back().weight.rows(); }
};

// Throws ValidationError on an empty net or dims that do not chain.
void validate(const TinyMLP& model);

// One worker's samples, one per row.
struct WorkerBatch {
  DenseMatrix inputs;   // b x d_0
  DenseMatrix targets;  // b x d_L
};

void validate(const WorkerBatch& batch, const TinyMLP& model);

// Rows of every batch stacked in order.
WorkerBatch concatenate(std::span<const WorkerBatch> batches);

struct LayerTrace {
  DenseMatrix activations;   // b x d_in: input of the layer, a_{l-1}
  DenseMatrix output_grads;  // b x d_out: per-sample dLoss_s/dz_l
  DenseMatrix weight_grad;   // d_out x d_in: (1/b) sum_s g_s a_s^T
};

struct ForwardBackward {
  double loss = 0.0;
  std::vector<LayerTrace> layers;
};

// Loss is the squared error averaged over samples and output dims. g is the
// gradient of one sample's loss w.r.t. the pre-activation output, so it
// does not depend on the batch size.
ForwardBackward forward_backward(const TinyMLP& model, const WorkerBatch& batch);
double loss(const TinyMLP& model, const WorkerBatch& batch);

// Aggregated curvature of one step.
struct KfacState {
  std::vector<SymMatrix> a;  // per layer, d_in
  std::vector<SymMatrix> g;  // per layer, d_out
  double gamma = 0.0;
  double learning_rate = 0.0;
};

// Inversion tasks of the net in the planner's order: A1, G1, A2, G2, ...
std::vector<InvTask> inverse_tasks(const TinyMLP& model);

// Preconditioned averaged gradients of a synchronous step over equal-sized
// worker batches. With a plan, every worker inverts the factors of its set
// and the owner's copy is used; without one, each factor is inverted once.
std::vector<DenseMatrix> dkfac_directions(const TinyMLP& model,
                                          std::span<const WorkerBatch> batches,
                                          double gamma,
                                          const PlacementPlan* plan = nullptr);

TinyMLP dkfac_step(const TinyMLP& model, std::span<const WorkerBatch> batches,
                   double gamma, double learning_rate,
                   const PlacementPlan* plan = nullptr);

// Single-worker step on one batch; the reference for dkfac_step.
TinyMLP kfac_step_centralized(const TinyMLP& model, const WorkerBatch& batch,
                              double gamma, double learning_rate);

// Largest absolute weight difference over all layers.
double max_weight_diff(const TinyMLP& a, const TinyMLP& b);

TinyMLP random_mlp(std::mt19937_64& rng, std::span<const std::size_t> dims,
                   Activation hidden = Activation::Relu);
WorkerBatch random_batch(std::mt19937_64& rng, std::size_t batch_size,
                         std::size_t input_dim, std::size_t output_dim);

struct EmulatorFixture {
  TinyMLP model;
  std::vector<WorkerBatch> batches;
  double gamma = 0.0;
  double learning_rate = 0.0;
  TinyMLP expected;  // centralized step on the union batch
};

// Random net with 2 or 3 layers and dims up to 8, split over `workers`
// batches of equal size; `expected` comes from kfac_step_centralized.
EmulatorFixture make_fixture(std::uint64_t seed, std::size_t workers);

nlohmann::json fixture_to_json(const EmulatorFixture& f);
EmulatorFixture fixture_from_json(const nlohmann::json& doc);
EmulatorFixture load_fixture(const std::filesystem::path& path);
void save_fixture(const std::filesystem::path& path, const EmulatorFixture& f);

}  // namespace kfacsched

#include "kfacsched/emulator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>

#include "kfacsched/error.hpp"

namespace kfacsched {

namespace {

using nlohmann::json;

double activate(Activation a, double z) {
  return a == Activation::Relu ? std::max(z, 0.0) : z;
}

double slope(Activation a, double z) {
  return a == Activation::Relu ? (z > 0.0 ? 1.0 : 0.0) : 1.0;
}

// Forward pass keeping each layer's input and pre-activation.
struct Forward {
  std::vector<DenseMatrix> inputs;
  std::vector<DenseMatrix> pre;
  DenseMatrix output;
};

Forward run_forward(const TinyMLP& model, const DenseMatrix& x) {
  Forward f;
  DenseMatrix a = x;
  for (const auto& layer : model.layers) {
    const auto& w = layer.weight;
    DenseMatrix z(a.rows(), w.rows());
    DenseMatrix out(a.rows(), w.rows());
    for (std::size_t s = 0; s < a.rows(); ++s) {
      for (std::size_t o = 0; o < w.rows(); ++o) {
        double acc = 0.0;
        for (std::size_t i = 0; i < w.cols(); ++i) acc += w(o, i) * a(s, i);
        z(s, o) = acc;
        out(s, o) = activate(layer.activation, acc);
      }
    }
    f.inputs.push_back(std::move(a));
    f.pre.push_back(std::move(z));
    a = std::move(out);
  }
  f.output = std::move(a);
  return f;
}

double squared_error(const DenseMatrix& y, const DenseMatrix& t) {
  double sum = 0.0;
  for (std::size_t s = 0; s < y.rows(); ++s) {
    for (std::size_t j = 0; j < y.cols(); ++j) {
      const double e = y(s, j) - t(s, j);
      sum += e * e;
    }
  }
  return sum / static_cast<double>(y.rows() * y.cols());
}

DenseMatrix json_matrix(const json& rows, const std::string& where) {
  if (!rows.is_array() || rows.empty()) {
    throw ValidationError(where + ": expected a non-empty array of rows");
  }
  std::vector<std::vector<double>> v;
  try {
    v = rows.get<std::vector<std::vector<double>>>();
  } catch (const json::exception&) {
    throw ValidationError(where + ": rows must be arrays of numbers");
  }
  return DenseMatrix::from_rows(v);
}

json matrix_json(const DenseMatrix& m) {
  json rows = json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return rows;
}

json model_json(const TinyMLP& model) {
  json layers = json::array();
  for (const auto& l : model.layers) {
    layers.push_back({{"activation", to_string(l.activation)},
                      {"weight", matrix_json(l.weight)}});
  }
  return layers;
}

TinyMLP model_from_json(const json& layers, const std::string& where) {
  if (!layers.is_array()) throw ValidationError(where + ": expected an array");
  TinyMLP m;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string at = where + "[" + std::to_string(i) + "]";
    if (!l.is_object() || !l.contains("weight") || !l.contains("activation") ||
        !l["activation"].is_string()) {
      throw ValidationError(at + ": needs 'weight' and 'activation'");
    }
    m.layers.push_back({json_matrix(l["weight"], at + ".weight"),
                        parse_activation(l["activation"].get<std::string>())});
  }
  validate(m);
  return m;
}

double number(const json& doc, const char* key) {
  if (!doc.contains(key) || !doc[key].is_number()) {
    throw ValidationError(std::string("fixture: '") + key + "' must be a number");
  }
  return doc[key].get<double>();
}

TinyMLP apply_update(const TinyMLP& model, std::span<const DenseMatrix> dirs,
                     double learning_rate) {
  TinyMLP next = model;
  for (std::size_t l = 0; l < next.layers.size(); ++l) {
    auto& w = next.layers[l].weight;
    for (std::size_t r = 0; r < w.rows(); ++r) {
      for (std::size_t c = 0; c < w.cols(); ++c) {
        w(r, c) -= learning_rate * dirs[l](r, c);
      }
    }
  }
  return next;
}

}  // namespace

std::string_view to_string(Activation a) {
  return a == Activation::Relu ? "relu" : "identity";
}

Activation parse_activation(std::string_view text) {
  if (text == "identity") return Activation::Identity;
  if (text == "relu") return Activation::Relu;
  throw ValidationError("unknown activation '" + std::string(text) + "'");
}

void validate(const TinyMLP& model) {
  if (model.layers.empty()) throw ValidationError("model has no layers");
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& w = model.layers[l].weight;
    if (w.rows() == 0 || w.cols() == 0) {
      throw ValidationError("layer " + std::to_string(l + 1) + " is empty");
    }
    if (l > 0 && w.cols() != model.layers[l - 1].weight.rows()) {
      throw ValidationError("layer " + std::to_string(l + 1) +
                            " input dim does not match the previous output");
    }
  }
}

void validate(const WorkerBatch& batch, const TinyMLP& model) {
  if (batch.inputs.rows() == 0 || batch.inputs.rows() != batch.targets.rows()) {
    throw ValidationError("batch inputs and targets need the same sample count");
  }
  if (batch.inputs.cols() != model.input_dim()) {
    throw ValidationError("batch input dim does not match the model");
  }
  if (batch.targets.cols() != model.output_dim()) {
    throw ValidationError("batch target dim does not match the model");
  }
}

WorkerBatch concatenate(std::span<const WorkerBatch> batches) {
  if (batches.empty()) throw ValidationError("no batches to concatenate");
  std::vector<double> x;
  std::vector<double> t;
  std::size_t rows = 0;
  for (const auto& b : batches) {
    if (b.inputs.cols() != batches[0].inputs.cols() ||
        b.targets.cols() != batches[0].targets.cols()) {
      throw ValidationError("batches have different dims");
    }
    x.insert(x.end(), b.inputs.values().begin(), b.inputs.values().end());
    t.insert(t.end(), b.targets.values().begin(), b.targets.values().end());
    rows += b.inputs.rows();
  }
  return {DenseMatrix(rows, batches[0].inputs.cols(), std::move(x)),
          DenseMatrix(rows, batches[0].targets.cols(), std::move(t))};
}

ForwardBackward forward_backward(const TinyMLP& model, const WorkerBatch& batch) {
  validate(model);
  validate(batch, model);
  Forward f = run_forward(model, batch.inputs);
  const std::size_t b = batch.inputs.rows();
  const std::size_t n = model.layers.size();

  ForwardBackward out;
  out.loss = squared_error(f.output, batch.targets);
  out.layers.resize(n);

  // Per-sample loss is mean over outputs, so dLoss_s/dy = 2 (y - t) / d_L.
  const double scale = 2.0 / static_cast<double>(model.output_dim());
  DenseMatrix g(b, model.output_dim());
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t j = 0; j < g.cols(); ++j) {
      g(s, j) = scale * (f.output(s, j) - batch.targets(s, j)) *
                slope(model.layers[n - 1].activation, f.pre[n - 1](s, j));
    }
  }

  for (std::size_t l = n; l-- > 0;) {
    const auto& w = model.layers[l].weight;
    const auto& a = f.inputs[l];
    DenseMatrix grad(w.rows(), w.cols());
    for (std::size_t s = 0; s < b; ++s) {
      for (std::size_t o = 0; o < w.rows(); ++o) {
        for (std::size_t i = 0; i < w.cols(); ++i) grad(o, i) += g(s, o) * a(s, i);
      }
    }
    for (std::size_t o = 0; o < w.rows(); ++o) {
      for (std::size_t i = 0; i < w.cols(); ++i) grad(o, i) /= static_cast<double>(b);
    }

    DenseMatrix below;
    if (l > 0) {
      below = DenseMatrix(b, w.cols());
      for (std::size_t s = 0; s < b; ++s) {
        for (std::size_t i = 0; i < w.cols(); ++i) {
          double acc = 0.0;
          for (std::size_t o = 0; o < w.rows(); ++o) acc += g(s, o) * w(o, i);
          below(s, i) = acc * slope(model.layers[l - 1].activation, f.pre[l - 1](s, i));
        }
      }
    }
    out.layers[l] = {a, std::move(g), std::move(grad)};
    g = std::move(below);
  }
  return out;
}

double loss(const TinyMLP& model, const WorkerBatch& batch) {
  validate(model);
  validate(batch, model);
  return squared_error(run_forward(model, batch.inputs).output, batch.targets);
}

std::vector<InvTask> inverse_tasks(const TinyMLP& model) {
  std::vector<InvTask> tasks;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& w = model.layers[l].weight;
    tasks.push_back({tasks.size(), w.cols(), l + 1, FactorKind::A});
    tasks.push_back({tasks.size(), w.rows(), l + 1, FactorKind::G});
  }
  return tasks;
}

std::vector<DenseMatrix> dkfac_directions(const TinyMLP& model,
                                          std::span<const WorkerBatch> batches,
                                          double gamma,
                                          const PlacementPlan* plan) {
  if (batches.empty()) throw ValidationError("dkfac: no worker batches");
  for (const auto& b : batches) {
    if (b.inputs.rows() != batches[0].inputs.rows()) {
      throw ValidationError("dkfac: worker batch sizes differ");
    }
  }
  const Damping damping(gamma);
  const std::size_t n = model.layers.size();

  // Worker-local statistics, reduced in worker order.
  std::vector<std::vector<SymMatrix>> a(n), g(n);
  std::vector<std::vector<DenseMatrix>> grads(n);
  for (const auto& batch : batches) {
    ForwardBackward fb = forward_backward(model, batch);
    for (std::size_t l = 0; l < n; ++l) {
      a[l].push_back(compute_factor_A(fb.layers[l].activations));
      g[l].push_back(compute_factor_G(fb.layers[l].output_grads));
      grads[l].push_back(std::move(fb.layers[l].weight_grad));
    }
  }
  KfacState state;
  state.gamma = gamma;
  std::vector<const SymMatrix*> factors;
  for (std::size_t l = 0; l < n; ++l) {
    state.a.push_back(average(a[l]));
    state.g.push_back(average(g[l]));
  }
  for (std::size_t l = 0; l < n; ++l) {
    factors.push_back(&state.a[l]);
    factors.push_back(&state.g[l]);
  }

  std::vector<std::optional<SymMatrix>> inverses(factors.size());
  if (plan == nullptr) {
    for (std::size_t i = 0; i < factors.size(); ++i) {
      inverses[i] = damped_inverse(*factors[i], damping);
    }
  } else {
    validate(*plan, factors.size());
    for (const auto& set : plan->sets) {
      for (std::size_t i : set) {
        SymMatrix inv = damped_inverse(*factors[i], damping);
        if (!inverses[i]) {
          inverses[i] = std::move(inv);
        } else if (!(*inverses[i] == inv)) {
          throw std::logic_error("replicated inverse differs between workers");
        }
      }
    }
  }

  std::vector<DenseMatrix> dirs;
  for (std::size_t l = 0; l < n; ++l) {
    dirs.push_back(precondition(average(grads[l]), *inverses[2 * l],
                                *inverses[2 * l + 1]));
  }
  return dirs;
}

TinyMLP dkfac_step(const TinyMLP& model, std::span<const WorkerBatch> batches,
                   double gamma, double learning_rate, const PlacementPlan* plan) {
  const auto dirs = dkfac_directions(model, batches, gamma, plan);
  return apply_update(model, dirs, learning_rate);
}

TinyMLP kfac_step_centralized(const TinyMLP& model, const WorkerBatch& batch,
                              double gamma, double learning_rate) {
  const Damping damping(gamma);
  ForwardBackward fb = forward_backward(model, batch);
  std::vector<DenseMatrix> dirs;
  for (const auto& layer : fb.layers) {
    dirs.push_back(precondition(
        layer.weight_grad,
        damped_inverse(compute_factor_A(layer.activations), damping),
        damped_inverse(compute_factor_G(layer.output_grads), damping)));
  }
  return apply_update(model, dirs, learning_rate);
}

double max_weight_diff(const TinyMLP& a, const TinyMLP& b) {
  if (a.layers.size() != b.layers.size()) {
    throw ValidationError("models have different depths");
  }
  double d = 0.0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    d = std::max(d, max_abs_diff(a.layers[l].weight, b.layers[l].weight));
  }
  return d;
}

TinyMLP random_mlp(std::mt19937_64& rng, std::span<const std::size_t> dims,
                   Activation hidden) {
  if (dims.size() < 2) throw ValidationError("random_mlp: need at least two dims");
  TinyMLP m;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(dims[l]));
    std::uniform_real_distribution<double> u(-bound, bound);
    DenseMatrix w(dims[l + 1], dims[l]);
    for (std::size_t r = 0; r < w.rows(); ++r) {
      for (std::size_t c = 0; c < w.cols(); ++c) w(r, c) = u(rng);
    }
    const bool last = l + 2 == dims.size();
    m.layers.push_back({std::move(w), last ? Activation::Identity : hidden});
  }
  return m;
}

WorkerBatch random_batch(std::mt19937_64& rng, std::size_t batch_size,
                         std::size_t input_dim, std::size_t output_dim) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  DenseMatrix x(batch_size, input_dim);
  DenseMatrix t(batch_size, output_dim);
  for (std::size_t s = 0; s < batch_size; ++s) {
    for (std::size_t i = 0; i < input_dim; ++i) x(s, i) = u(rng);
    for (std::size_t j = 0; j < output_dim; ++j) t(s, j) = u(rng);
  }
  return {std::move(x), std::move(t)};
}

EmulatorFixture make_fixture(std::uint64_t seed, std::size_t workers) {
  if (workers < 1) throw ValidationError("need at least one worker");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> depth(2, 3);
  std::uniform_int_distribution<std::size_t> width(2, 8);
  std::uniform_int_distribution<std::size_t> per_worker(2, 6);
  std::vector<std::size_t> dims(depth(rng) + 1);
  for (auto& d : dims) d = width(rng);

  EmulatorFixture f;
  f.model = random_mlp(rng, dims);
  const std::size_t b = per_worker(rng);
  for (std::size_t p = 0; p < workers; ++p) {
    f.batches.push_back(random_batch(rng, b, dims.front(), dims.back()));
  }
  f.gamma = 0.1;
  f.learning_rate = 0.05;
  f.expected = kfac_step_centralized(f.model, concatenate(f.batches), f.gamma,
                                     f.learning_rate);
  return f;
}

json fixture_to_json(const EmulatorFixture& f) {
  json workers = json::array();
  for (const auto& b : f.batches) {
    workers.push_back({{"inputs", matrix_json(b.inputs)},
                       {"targets", matrix_json(b.targets)}});
  }
  return {{"layers", model_json(f.model)},
          {"workers", workers},
          {"gamma", f.gamma},
          {"learning_rate", f.learning_rate},
          {"expected", model_json(f.expected)}};
}

EmulatorFixture fixture_from_json(const json& doc) {
  if (!doc.is_object()) throw ValidationError("fixture: expected an object");
  for (const char* key : {"layers", "workers", "expected"}) {
    if (!doc.contains(key)) {
      throw ValidationError(std::string("fixture: missing '") + key + "'");
    }
  }
  EmulatorFixture f;
  f.model = model_from_json(doc["layers"], "layers");
  f.expected = model_from_json(doc["expected"], "expected");
  if (f.expected.layers.size() != f.model.layers.size()) {
    throw ValidationError("fixture: expected weights do not match the model");
  }
  for (std::size_t l = 0; l < f.model.layers.size(); ++l) {
    const auto& w = f.model.layers[l].weight;
    const auto& e = f.expected.layers[l].weight;
    if (w.rows() != e.rows() || w.cols() != e.cols()) {
      throw ValidationError("fixture: expected weights do not match the model");
    }
  }
  const json& workers = doc["workers"];
  if (!workers.is_array() || workers.empty()) {
    throw ValidationError("fixture: 'workers' must be a non-empty array");
  }
  for (std::size_t p = 0; p < workers.size(); ++p) {
    const std::string at = "workers[" + std::to_string(p) + "]";
    if (!workers[p].is_object() || !workers[p].contains("inputs") ||
        !workers[p].contains("targets")) {
      throw ValidationError(at + ": needs 'inputs' and 'targets'");
    }
    WorkerBatch b{json_matrix(workers[p]["inputs"], at + ".inputs"),
                  json_matrix(workers[p]["targets"], at + ".targets")};
    validate(b, f.model);
    f.batches.push_back(std::move(b));
  }
  f.gamma = number(doc, "gamma");
  f.learning_rate = number(doc, "learning_rate");
  static_cast<void>(Damping(f.gamma));
  return f;
}

EmulatorFixture load_fixture(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open fixture " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("fixture " + path.string() + ": " + e.what());
  }
  return fixture_from_json(doc);
}

void save_fixture(const std::filesystem::path& path, const EmulatorFixture& f) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write fixture " + path.string());
  out << fixture_to_json(f).dump(2) << "\n";
  if (!out) throw IoError("failed writing fixture " + path.string());
}

}  // namespace kfacsched

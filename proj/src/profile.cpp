#include "kfacsched/profile.hpp"

#include <cmath>
#include <fstream>

#include "kfacsched/error.hpp"
#include "kfacsched/linalg.hpp"

namespace kfacsched {

namespace {

using nlohmann::json;

const json& field(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw ValidationError(where + ": missing field '" + key + "'");
  }
  return *it;
}

std::uint64_t positive_int(const json& obj, const char* key,
                           const std::string& where) {
  const json& v = field(obj, key, where);
  if (!v.is_number_integer() || v.get<std::int64_t>() < 1) {
    throw ValidationError(where + ": '" + key + "' must be a positive integer");
  }
  return v.get<std::uint64_t>();
}

double positive_real(const json& obj, const char* key,
                     const std::string& where) {
  const json& v = field(obj, key, where);
  if (!v.is_number()) {
    throw ValidationError(where + ": '" + key + "' must be a number");
  }
  const double d = v.get<double>();
  if (!(d > 0.0) || !std::isfinite(d)) {
    throw ValidationError(where + ": '" + key + "' must be positive");
  }
  return d;
}

std::string string_field(const json& obj, const char* key,
                         const std::string& where) {
  const json& v = field(obj, key, where);
  if (!v.is_string()) {
    throw ValidationError(where + ": '" + key + "' must be a string");
  }
  return v.get<std::string>();
}

void check_total(const json& totals, const char* key, std::uint64_t actual) {
  auto it = totals.find(key);
  if (it == totals.end()) return;
  if (!it->is_number()) {
    throw ValidationError(std::string("totals.") + key + " must be a number");
  }
  const double stated = it->get<double>();
  const double a = static_cast<double>(actual);
  if (std::abs(stated - a) > 1e-3 * std::max(std::abs(a), 1.0)) {
    throw ValidationError(std::string("totals.") + key + " is " +
                          std::to_string(stated) + " but layers sum to " +
                          std::to_string(actual));
  }
}

}  // namespace

ProfileTotals ModelProfile::totals() const {
  ProfileTotals t;
  for (const auto& l : layers) {
    t.params += l.grad_elements;
    t.a_elements += packed_size(l.a_dim);
    t.g_elements += packed_size(l.g_dim);
  }
  return t;
}

void validate(const ModelProfile& profile) {
  if (profile.layers.empty()) {
    throw ValidationError("profile '" + profile.model + "' has no layers");
  }
  if (profile.batch_size < 1) {
    throw ValidationError("profile batch_size must be >= 1");
  }
  for (std::size_t i = 0; i < profile.layers.size(); ++i) {
    const auto& l = profile.layers[i];
    const std::string where = "layer " + std::to_string(i + 1) + " (" +
                              l.name + ")";
    if (l.a_dim < 1 || l.g_dim < 1 || l.grad_elements < 1) {
      throw ValidationError(where + ": dimensions must be >= 1");
    }
    for (double t : {l.t_ff, l.t_bp, l.t_factorA, l.t_factorG}) {
      if (!(t > 0.0) || !std::isfinite(t)) {
        throw ValidationError(where + ": times must be positive");
      }
    }
  }
}

nlohmann::json profile_to_json(const ModelProfile& profile) {
  json layers = json::array();
  for (const auto& l : profile.layers) {
    layers.push_back({{"name", l.name},
                      {"a_dim", l.a_dim},
                      {"g_dim", l.g_dim},
                      {"grad_elements", l.grad_elements},
                      {"t_ff", l.t_ff},
                      {"t_bp", l.t_bp},
                      {"t_factorA", l.t_factorA},
                      {"t_factorG", l.t_factorG}});
  }
  const ProfileTotals t = profile.totals();
  return {{"model", profile.model},
          {"batch_size", profile.batch_size},
          {"timing_source", profile.timing_source},
          {"totals",
           {{"params", t.params},
            {"a_elements", t.a_elements},
            {"g_elements", t.g_elements}}},
          {"layers", std::move(layers)}};
}

ModelProfile profile_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ValidationError("profile must be a JSON object");
  ModelProfile p;
  p.model = string_field(doc, "model", "profile");
  p.batch_size = positive_int(doc, "batch_size", "profile");
  p.timing_source = string_field(doc, "timing_source", "profile");
  const json& layers = field(doc, "layers", "profile");
  if (!layers.is_array() || layers.empty()) {
    throw ValidationError("profile: 'layers' must be a nonempty array");
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const json& l = layers[i];
    const std::string where = "profile layer " + std::to_string(i + 1);
    if (!l.is_object()) throw ValidationError(where + ": must be an object");
    LayerProfile lp;
    lp.name = string_field(l, "name", where);
    lp.a_dim = positive_int(l, "a_dim", where);
    lp.g_dim = positive_int(l, "g_dim", where);
    lp.grad_elements = positive_int(l, "grad_elements", where);
    lp.t_ff = positive_real(l, "t_ff", where);
    lp.t_bp = positive_real(l, "t_bp", where);
    lp.t_factorA = positive_real(l, "t_factorA", where);
    lp.t_factorG = positive_real(l, "t_factorG", where);
    p.layers.push_back(std::move(lp));
  }
  if (auto it = doc.find("totals"); it != doc.end()) {
    if (!it->is_object()) throw ValidationError("profile: 'totals' must be an object");
    const ProfileTotals t = p.totals();
    check_total(*it, "params", t.params);
    check_total(*it, "a_elements", t.a_elements);
    check_total(*it, "g_elements", t.g_elements);
  }
  validate(p);
  return p;
}

ModelProfile load_profile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open profile " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("profile " + path.string() + ": " + e.what());
  }
  return profile_from_json(doc);
}

void save_profile(const std::filesystem::path& path,
                  const ModelProfile& profile) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write profile " + path.string());
  out << profile_to_json(profile).dump(2) << "\n";
  if (!out) throw IoError("failed writing profile " + path.string());
}

ModelProfile generate_synthetic_timings(const ArchitectureDims& dims,
                                        const TimingTargets& targets) {
  if (dims.layers.empty()) {
    throw ValidationError("generate_synthetic_timings: no layers");
  }
  if (!(targets.ffbp_seconds > 0.0) || !(targets.factor_comp_seconds > 0.0) ||
      !(targets.bp_over_ff > 0.0)) {
    throw ValidationError("generate_synthetic_timings: targets must be positive");
  }

  double ff_weight = 0.0;
  double factor_weight = 0.0;
  for (const auto& l : dims.layers) {
    const double s = static_cast<double>(l.spatial);
    ff_weight += static_cast<double>(l.grad_elements) * s;
    factor_weight += s * (static_cast<double>(l.a_dim) * l.a_dim +
                          static_cast<double>(l.g_dim) * l.g_dim);
  }

  const double ff_total = targets.ffbp_seconds / (1.0 + targets.bp_over_ff);
  ModelProfile p;
  p.model = dims.model;
  p.batch_size = dims.batch_size;
  p.timing_source = "synthetic";
  for (const auto& l : dims.layers) {
    const double s = static_cast<double>(l.spatial);
    LayerProfile lp;
    lp.name = l.name;
    lp.a_dim = l.a_dim;
    lp.g_dim = l.g_dim;
    lp.grad_elements = l.grad_elements;
    lp.t_ff = ff_total * static_cast<double>(l.grad_elements) * s / ff_weight;
    lp.t_bp = lp.t_ff * targets.bp_over_ff;
    lp.t_factorA = targets.factor_comp_seconds * s *
                   static_cast<double>(l.a_dim) * l.a_dim / factor_weight;
    lp.t_factorG = targets.factor_comp_seconds * s *
                   static_cast<double>(l.g_dim) * l.g_dim / factor_weight;
    p.layers.push_back(std::move(lp));
  }
  validate(p);
  return p;
}

}  // namespace kfacsched

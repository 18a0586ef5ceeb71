#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "kfacsched/error.hpp"
#include "kfacsched/linalg.hpp"
#include "kfacsched/profile.hpp"
#include "kfacsched/sim.hpp"
#include "test_support.hpp"

using namespace kfacsched;
using kfacsched::testing::data_path;

namespace {

ModelProfile bundled(const std::string& name) {
  return load_profile(data_path("profiles/" + name + ".json"));
}

struct Published {
  const char* model;
  std::size_t layers;
  std::size_t batch;
  double params_m, a_m, g_m;
};

// Per-model reference sizes in millions. DenseNet-201 is held to 1.8M of G
// elements, which is what its 201 conv and fc layers (at most 1920 output
// channels each) add up to.
const Published kPublished[] = {
    {"resnet50", 54, 32, 25.6, 62.3, 14.6},
    {"resnet152", 156, 8, 60.2, 162.0, 32.9},
    {"densenet201", 201, 16, 20.0, 131.0, 1.8},
    {"inception_v4", 150, 16, 42.7, 116.4, 4.7},
};

nlohmann::json minimal_doc() {
  return {{"model", "tiny"},
          {"batch_size", 4},
          {"timing_source", "synthetic"},
          {"layers",
           {{{"name", "fc"},
             {"a_dim", 3},
             {"g_dim", 2},
             {"grad_elements", 6},
             {"t_ff", 0.1},
             {"t_bp", 0.2},
             {"t_factorA", 0.05},
             {"t_factorG", 0.04}}}}};
}

double rel(double got, double want) { return std::abs(got - want) / want; }

}  // namespace

TEST(Profile, MinimalLayerTotals) {
  const auto p = profile_from_json(minimal_doc());
  ASSERT_EQ(p.num_layers(), 1u);
  EXPECT_EQ(p.totals(), (ProfileTotals{6, 6, 3}));
}

TEST(Profile, RoundTripIsIdentity) {
  for (const auto& m : bundled_models()) {
    const auto p = bundled(m);
    EXPECT_EQ(profile_from_json(profile_to_json(p)), p) << m;
  }
  const auto path = std::filesystem::temp_directory_path() / "kfacsched_profile.json";
  save_profile(path, bundled("resnet50"));
  EXPECT_EQ(load_profile(path), bundled("resnet50"));
  std::filesystem::remove(path);
}

TEST(Profile, SchemaViolations) {
  auto missing = minimal_doc();
  missing["layers"][0].erase("t_bp");
  EXPECT_THROW(profile_from_json(missing), ValidationError);

  auto negative = minimal_doc();
  negative["layers"][0]["a_dim"] = -3;
  EXPECT_THROW(profile_from_json(negative), ValidationError);

  auto zero_time = minimal_doc();
  zero_time["layers"][0]["t_factorG"] = 0.0;
  EXPECT_THROW(profile_from_json(zero_time), ValidationError);

  auto wrong_type = minimal_doc();
  wrong_type["layers"][0]["name"] = 5;
  EXPECT_THROW(profile_from_json(wrong_type), ValidationError);

  auto empty = minimal_doc();
  empty["layers"] = nlohmann::json::array();
  EXPECT_THROW(profile_from_json(empty), ValidationError);

  EXPECT_THROW(load_profile("/nonexistent/p.json"), IoError);
}

TEST(Profile, TotalsMustAgree) {
  auto doc = minimal_doc();
  doc["totals"] = {{"params", 6}, {"a_elements", 6}, {"g_elements", 3}};
  EXPECT_NO_THROW(profile_from_json(doc));
  doc["totals"]["a_elements"] = 7;
  EXPECT_THROW(profile_from_json(doc), ValidationError);
}

TEST(Profile, BundledMatchPublishedSizes) {
  for (const auto& ref : kPublished) {
    const auto p = bundled(ref.model);
    const auto t = p.totals();
    EXPECT_EQ(p.num_layers(), ref.layers) << ref.model;
    EXPECT_EQ(p.batch_size, ref.batch) << ref.model;
    EXPECT_LT(rel(t.params / 1e6, ref.params_m), 0.02) << ref.model;
    EXPECT_LT(rel(t.a_elements / 1e6, ref.a_m), 0.02) << ref.model;
    EXPECT_LT(rel(t.g_elements / 1e6, ref.g_m), 0.02) << ref.model;
    EXPECT_EQ(p.timing_source, "synthetic");
  }
}

TEST(Profile, ResNet50FactorExtremes) {
  const auto p = bundled("resnet50");
  std::uint64_t lo = UINT64_MAX, hi = 0;
  for (const auto& l : p.layers) {
    lo = std::min(lo, packed_size(l.a_dim));
    hi = std::max(hi, packed_size(l.a_dim));
  }
  EXPECT_EQ(hi, 10619136u);
  EXPECT_EQ(lo, 2080u);
}

TEST(Profile, BundledFilesAreRegenerable) {
  for (const auto& m : bundled_models()) {
    EXPECT_EQ(generate_synthetic_timings(architecture(m), bundled_targets(m)), bundled(m))
        << m;
  }
  EXPECT_THROW(architecture("vgg16"), ValidationError);
}

TEST(SyntheticTimings, SingleLayerSplitsTarget) {
  ArchitectureDims dims{"one", 1, {{"fc", 3, 5, 15, 1}}};
  const auto p = generate_synthetic_timings(dims, {0.3, 0.1, 2.0});
  EXPECT_NEAR(p.layers[0].t_factorA + p.layers[0].t_factorG, 0.1, 1e-15);
  EXPECT_NEAR(p.layers[0].t_ff, 0.1, 1e-15);
  EXPECT_NEAR(p.layers[0].t_bp, 0.2, 1e-15);
}

TEST(SyntheticTimings, LinearInTargets) {
  const auto dims = architecture("resnet50");
  const auto base = generate_synthetic_timings(dims, {0.2, 0.3, 2.0});
  const auto twice = generate_synthetic_timings(dims, {0.4, 0.6, 2.0});
  for (std::size_t i = 0; i < base.layers.size(); ++i) {
    const auto& a = base.layers[i];
    const auto& b = twice.layers[i];
    EXPECT_NEAR(b.t_ff, 2 * a.t_ff, 1e-15);
    EXPECT_NEAR(b.t_bp, 2 * a.t_bp, 1e-15);
    EXPECT_NEAR(b.t_factorA, 2 * a.t_factorA, 1e-15);
    EXPECT_NEAR(b.t_factorG, 2 * a.t_factorG, 1e-15);
  }
}

TEST(SyntheticTimings, RejectsBadTargets) {
  EXPECT_THROW(generate_synthetic_timings(architecture("resnet50"), {0.0, 0.1, 2.0}),
               ValidationError);
  EXPECT_THROW(generate_synthetic_timings(ArchitectureDims{"none", 1, {}}, {0.1, 0.1, 2.0}),
               ValidationError);
}

TEST(SyntheticTimings, DkfacBreakdownHitsTargets) {
  const auto perf = load_params(data_path("params/synthetic.params"));
  for (const auto& m : bundled_models()) {
    const auto target = bundled_targets(m);
    const auto tl =
        simulate_iteration(bundled(m), SchemeConfig::defaults(Scheme::DKFAC, 64), perf);
    EXPECT_LT(rel(tl.breakdown[Category::FFBP], target.ffbp_seconds), 0.01) << m;
    EXPECT_LT(rel(tl.breakdown[Category::FactorComp], target.factor_comp_seconds), 0.01) << m;
  }
}

TEST(SyntheticTimings, ResNet50InversionDominatesCompute) {
  const auto perf = load_params(data_path("params/synthetic.params"));
  const auto tl = simulate_iteration(bundled("resnet50"),
                                     SchemeConfig::defaults(Scheme::DKFAC, 64), perf);
  const double inv = tl.breakdown[Category::InverseComp];
  EXPECT_NEAR(inv, 0.292, 0.292 * 0.05);
  EXPECT_GT(inv, tl.breakdown[Category::FactorComp]);
  EXPECT_GT(inv, tl.breakdown[Category::FFBP]);
}

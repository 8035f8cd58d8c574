#include <gtest/gtest.h>

#include "idvlm/gradcheck.hpp"
#include "idvlm/id_former.hpp"

using namespace idvlm;

namespace {

VisualFeatures random_feats(std::size_t n_patches, std::size_t width, Rng& rng,
                            ImageRole role = ImageRole::kTest, std::size_t index = 0) {
  Tensor t({n_patches, width});
  for (double& v : t.values()) v = rng.normal();
  return {t, role, index};
}

IDFormerConfig small_config(ModulationMode mode = ModulationMode::kTestAsQuery) {
  IDFormerConfig c;
  c.n_queries = 8;
  c.d_model = 32;
  c.d_visual = 12;
  c.n_heads = 2;
  c.modulation_mode = mode;
  return c;
}

// Quadratic-plus-linear probe loss over every output, with its gradient.
struct ProbeLoss {
  std::vector<Tensor> directions;

  double value(const std::vector<CompressedImage>& outs) const {
    long double loss = 0.0;
    for (std::size_t i = 0; i < outs.size(); ++i)
      for (std::size_t j = 0; j < outs[i].tokens.size(); ++j) {
        const double o = outs[i].tokens[j];
        loss += directions[i][j] * o + 0.25 * o * o;
      }
    return static_cast<double>(loss);
  }

  std::vector<Tensor> grad(const std::vector<CompressedImage>& outs) const {
    std::vector<Tensor> g;
    for (std::size_t i = 0; i < outs.size(); ++i) {
      Tensor t(outs[i].tokens.shape());
      for (std::size_t j = 0; j < t.size(); ++j) t[j] = directions[i][j] + 0.5 * outs[i].tokens[j];
      g.push_back(std::move(t));
    }
    return g;
  }
};

GradCheckReport check_id_former(const IDFormerConfig& cfg, std::uint64_t seed,
                                std::size_t n_ids, std::size_t n_tests,
                                const BackwardOptions& opt = {},
                                const FiniteDiffOptions& fd = {}) {
  Rng rng(seed);
  IDFormerParams params = init_params(cfg, seed);
  // Move away from the near-symmetric init so every path carries gradient.
  for (double& v : params.query_bank.values()) v = rng.normal();
  for (double& v : params.norm1.gamma.values()) v = rng.uniform(0.5, 1.5);
  for (double& v : params.out_norm.beta.values()) v = 0.1 * rng.normal();
  std::vector<VisualFeatures> ids, tests;
  for (std::size_t i = 0; i < n_ids; ++i)
    ids.push_back(random_feats(3 + i, cfg.d_visual, rng, ImageRole::kId, i));
  for (std::size_t i = 0; i < n_tests; ++i)
    tests.push_back(random_feats(5 + 2 * i, cfg.d_visual, rng, ImageRole::kTest, i));
  ProbeLoss probe;
  for (std::size_t i = 0; i < n_ids + n_tests; ++i) {
    Tensor d({cfg.n_queries, cfg.d_model});
    for (double& v : d.values()) v = rng.normal();
    probe.directions.push_back(d);
  }
  auto fwd_bwd = [&](bool with_grad) {
    IDFormerCache cache;
    const auto outs = forward(cfg, params, ids, tests, with_grad ? &cache : nullptr);
    if (!with_grad) return std::make_pair(probe.value(outs), GradientBundle{});
    const auto up = probe.grad(outs);
    return std::make_pair(probe.value(outs), backward(cfg, params, cache, up, opt));
  };
  return grad_check(fwd_bwd, params, kIdFormerPrefix, 1e-4, fd);
}

}  // namespace

TEST(IdFormerInit, SeedDeterminism) {
  const auto cfg = small_config();
  const auto a = init_params(cfg, 5);
  const auto b = init_params(cfg, 5);
  const auto c = init_params(cfg, 6);
  const auto na = named_tensors(a, "idf");
  const auto nb = named_tensors(b, "idf");
  ASSERT_EQ(na.size(), nb.size());
  for (std::size_t i = 0; i < na.size(); ++i) EXPECT_EQ(*na[i].second, *nb[i].second);
  EXPECT_NE(a.query_bank, c.query_bank);
}

TEST(IdFormerInit, InvalidConfigRejected) {
  IDFormerConfig cfg = small_config();
  cfg.n_heads = 3;
  EXPECT_THROW(init_params(cfg, 1), ConfigError);
  cfg = small_config();
  cfg.n_queries = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(IdFormerInit, FreshParamsPassGradCheck) {
  const auto cfg = small_config();
  IDFormerParams params = init_params(cfg, 3);
  Rng rng(3);
  std::vector<VisualFeatures> ids{random_feats(4, cfg.d_visual, rng, ImageRole::kId)};
  std::vector<VisualFeatures> tests{random_feats(6, cfg.d_visual, rng)};
  ProbeLoss probe;
  for (int i = 0; i < 2; ++i) {
    Tensor d({cfg.n_queries, cfg.d_model});
    for (double& v : d.values()) v = rng.normal();
    probe.directions.push_back(d);
  }
  auto fwd_bwd = [&](bool with_grad) {
    IDFormerCache cache;
    const auto outs = forward(cfg, params, ids, tests, with_grad ? &cache : nullptr);
    if (!with_grad) return std::make_pair(probe.value(outs), GradientBundle{});
    return std::make_pair(probe.value(outs), backward(cfg, params, cache, probe.grad(outs)));
  };
  // attn2 query/key gradients are ~1e-5 here, so use a wider step.
  const auto report = grad_check(fwd_bwd, params, kIdFormerPrefix, 1e-4, FiniteDiffOptions{1e-4});
  EXPECT_TRUE(report.passed) << report.max_rel_error << " at " << report.worst_param;
}

TEST(Compress, FixedLengthForAnyPatchCount) {
  const auto cfg = small_config();
  const auto params = init_params(cfg, 1);
  Rng rng(1);
  for (std::size_t n : {1u, 7u, 49u}) {
    const auto out = compress(cfg, params, random_feats(n, cfg.d_visual, rng));
    EXPECT_EQ(out.tokens.shape(), (Shape{cfg.n_queries, cfg.d_model}));
  }
}

TEST(Compress, SinglePatchGivesNormOfItsProjectedValue) {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 2);
  Rng rng(2);
  const auto feats = random_feats(1, cfg.d_visual, rng);
  const auto out = compress(cfg, p, feats);
  const Tensor value = linear_forward(p.attn1.w_v, linear_forward(p.in_proj, feats.patches));
  const Tensor expect_row = layer_norm(linear_forward(p.attn1.w_o, value), p.norm1);
  for (std::size_t q = 0; q < cfg.n_queries; ++q)
    for (std::size_t j = 0; j < cfg.d_model; ++j)
      EXPECT_NEAR(out.tokens.at(q, j), expect_row.at(0, j), 1e-12);
}

TEST(Compress, InvariantToPatchPermutation) {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 4);
  Rng rng(4);
  const auto feats = random_feats(9, cfg.d_visual, rng);
  VisualFeatures reversed = feats;
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < cfg.d_visual; ++j)
      reversed.patches.at(i, j) = feats.patches.at(8 - i, j);
  EXPECT_LE(max_abs_diff(compress(cfg, p, feats).tokens, compress(cfg, p, reversed).tokens), 1e-12);
  EXPECT_THROW(compress(cfg, p, random_feats(3, cfg.d_visual + 1, rng)), DimensionError);
}

TEST(Modulate, EmptyIdsIsResidualNorm) {
  for (auto mode : {ModulationMode::kTestAsQuery, ModulationMode::kIdAsQuery}) {
    const auto cfg = small_config(mode);
    const auto p = init_params(cfg, 8);
    Rng rng(8);
    const auto test = compress(cfg, p, random_feats(5, cfg.d_visual, rng));
    const auto out = modulate(cfg, p, test, {});
    EXPECT_EQ(out.tokens, layer_norm(test.tokens, p.out_norm));
  }
}

TEST(Modulate, InvariantToIdOrder) {
  for (auto mode : {ModulationMode::kTestAsQuery, ModulationMode::kIdAsQuery}) {
    const auto cfg = small_config(mode);
    const auto p = init_params(cfg, 12);
    Rng rng(12);
    const auto test = compress(cfg, p, random_feats(5, cfg.d_visual, rng));
    const auto a = compress(cfg, p, random_feats(3, cfg.d_visual, rng, ImageRole::kId, 0));
    const auto b = compress(cfg, p, random_feats(4, cfg.d_visual, rng, ImageRole::kId, 1));
    const auto c = compress(cfg, p, random_feats(2, cfg.d_visual, rng, ImageRole::kId, 2));
    const std::vector<CompressedImage> abc{a, b, c}, cab{c, a, b};
    EXPECT_LE(max_abs_diff(modulate(cfg, p, test, abc).tokens, modulate(cfg, p, test, cab).tokens),
              1e-12);
  }
}

TEST(Modulate, NoneModeIsIdentity) {
  const auto cfg = small_config(ModulationMode::kNone);
  const auto p = init_params(cfg, 13);
  Rng rng(13);
  const auto test = compress(cfg, p, random_feats(5, cfg.d_visual, rng));
  const auto id = compress(cfg, p, random_feats(5, cfg.d_visual, rng, ImageRole::kId));
  EXPECT_EQ(modulate(cfg, p, test, std::vector<CompressedImage>{id}).tokens, test.tokens);
}

TEST(Forward, ShapesAndOrdering) {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 14);
  Rng rng(14);
  std::vector<VisualFeatures> ids{random_feats(3, cfg.d_visual, rng, ImageRole::kId, 0),
                                  random_feats(5, cfg.d_visual, rng, ImageRole::kId, 1)};
  std::vector<VisualFeatures> tests{random_feats(7, cfg.d_visual, rng)};
  const auto outs = forward(cfg, p, ids, tests);
  ASSERT_EQ(outs.size(), 3u);
  for (const auto& o : outs) EXPECT_EQ(o.tokens.shape(), (Shape{cfg.n_queries, cfg.d_model}));
  EXPECT_EQ(outs[0].role, ImageRole::kId);
  EXPECT_EQ(outs[1].index, 1u);
  EXPECT_EQ(outs[2].role, ImageRole::kTest);
  EXPECT_EQ(outs[0].tokens, compress(cfg, p, ids[0]).tokens);
}

TEST(Forward, NoIdsMatchesEmptyModulation) {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 15);
  Rng rng(15);
  std::vector<VisualFeatures> tests{random_feats(7, cfg.d_visual, rng)};
  const auto outs = forward(cfg, p, {}, tests);
  ASSERT_EQ(outs.size(), 1u);
  EXPECT_EQ(outs[0].tokens, modulate(cfg, p, compress(cfg, p, tests[0]), {}).tokens);
}

TEST(Forward, CapacityLimit) {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 16);
  Rng rng(16);
  std::vector<VisualFeatures> ids, tests;
  for (int i = 0; i < 5; ++i) ids.push_back(random_feats(2, cfg.d_visual, rng, ImageRole::kId));
  for (int i = 0; i < 4; ++i) tests.push_back(random_feats(2, cfg.d_visual, rng));
  EXPECT_THROW(forward(cfg, p, ids, tests), CapacityError);
  tests.pop_back();
  EXPECT_NO_THROW(forward(cfg, p, ids, tests));
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 17);
  Rng rng(17);
  std::vector<VisualFeatures> ids{random_feats(3, cfg.d_visual, rng, ImageRole::kId)};
  std::vector<VisualFeatures> tests{random_feats(4, cfg.d_visual, rng)};
  IDFormerCache cache;
  forward(cfg, p, ids, tests, &cache);
  std::vector<Tensor> up(2, Tensor({cfg.n_queries, cfg.d_model}));
  const auto g = backward(cfg, p, cache, up);
  EXPECT_GT(g.size(), 0u);
  for (const auto& [name, t] : g.grads)
    for (double v : t.values()) EXPECT_EQ(v, 0.0) << name;
}

TEST(Backward, MissingCacheIsStateError) {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 18);
  IDFormerCache cache;
  EXPECT_THROW(backward(cfg, p, cache, {}), StateError);
}

TEST(Backward, FrozenGroupsAreExcluded) {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 19);
  Rng rng(19);
  std::vector<VisualFeatures> tests{random_feats(4, cfg.d_visual, rng)};
  IDFormerCache cache;
  forward(cfg, p, {}, tests, &cache);
  std::vector<Tensor> up{Tensor({cfg.n_queries, cfg.d_model}, 1.0)};
  const auto g = backward(cfg, p, cache, up, BackwardOptions{{"query_bank", "attn1"}});
  EXPECT_FALSE(g.contains("idf.query_bank"));
  EXPECT_FALSE(g.contains("idf.attn1.wq.w"));
  EXPECT_TRUE(g.contains("idf.in_proj.w"));
  EXPECT_TRUE(g.contains("idf.attn2.wv.w"));
}

TEST(Backward, GradCheckTestAsQuery) {
  const auto r = check_id_former(small_config(ModulationMode::kTestAsQuery), 21, 2, 2);
  EXPECT_TRUE(r.passed) << r.max_rel_error << " at " << r.worst_param;
}

TEST(Backward, GradCheckIdAsQuery) {
  const auto r = check_id_former(small_config(ModulationMode::kIdAsQuery), 22, 3, 1);
  EXPECT_TRUE(r.passed) << r.max_rel_error << " at " << r.worst_param;
}

TEST(Backward, GradCheckAblatedAndLarger) {
  EXPECT_TRUE(check_id_former(small_config(ModulationMode::kNone), 23, 1, 2).passed);
  IDFormerConfig big;
  big.n_queries = 16;
  big.d_model = 64;
  big.d_visual = 8;
  big.n_heads = 4;
  const auto r = check_id_former(big, 24, 1, 1, {}, FiniteDiffOptions{1e-6, 48, 1});
  EXPECT_TRUE(r.passed) << r.max_rel_error << " at " << r.worst_param;
}

TEST(IdFormerConfig, KeyValueRoundTrip) {
  IDFormerConfig c = small_config(ModulationMode::kIdAsQuery);
  c.max_images = 6;
  const std::string text = c.to_kv().to_string();
  for (const char* key :
       {"n_queries", "d_model", "d_visual", "n_heads", "modulation_mode", "max_images"})
    EXPECT_NE(text.find(key), std::string::npos);
  const auto back = IDFormerConfig::from_kv(KvConfig::parse(text));
  EXPECT_EQ(back.n_queries, c.n_queries);
  EXPECT_EQ(back.modulation_mode, ModulationMode::kIdAsQuery);
  EXPECT_EQ(back.max_images, 6u);
  EXPECT_THROW(IDFormerConfig::from_kv(KvConfig::parse("modulation_mode = sideways")), ConfigError);
}

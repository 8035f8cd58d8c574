#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "idvlm/kv_config.hpp"
#include "idvlm/ops.hpp"
#include "idvlm/params.hpp"
#include "idvlm/rng.hpp"

// The ID-Former projects per-image visual features into the language model's
// embedding space in two steps:
//
//   compress  : a learnable query bank cross-attends over the projected patch
//               features, giving exactly n_queries tokens per image whatever
//               the patch count.
//   modulate  : every test image's tokens cross-attend over the tokens of all
//               ID images; the result is added back residually and normed.
//
// ID images only pass through compress. Parameters are shared between ID and
// test images.

namespace idvlm {

enum class ModulationMode {
  kTestAsQuery,  // test tokens query the concatenated ID tokens (default)
  kIdAsQuery,    // each ID queries the test tokens; outputs mean-pooled back
  kNone,         // identity pass-through ("w/o ID-Former" ablation)
};

inline std::string to_string(ModulationMode m) {
  switch (m) {
    case ModulationMode::kTestAsQuery: return "test_as_query";
    case ModulationMode::kIdAsQuery: return "id_as_query";
    case ModulationMode::kNone: return "none";
  }
  return "?";
}

inline ModulationMode parse_modulation_mode(const std::string& s) {
  if (s == "test_as_query") return ModulationMode::kTestAsQuery;
  if (s == "id_as_query") return ModulationMode::kIdAsQuery;
  if (s == "none") return ModulationMode::kNone;
  throw ConfigError("unknown modulation_mode '" + s + "'");
}

inline constexpr std::size_t kDefaultMaxImages = 8;

struct IDFormerConfig {
  std::size_t n_queries = 4;
  std::size_t d_model = 64;
  std::size_t d_visual = 32;
  std::size_t n_heads = 1;
  ModulationMode modulation_mode = ModulationMode::kTestAsQuery;
  std::size_t max_images = kDefaultMaxImages;

  void validate() const {
    if (n_queries < 1) throw ConfigError("id-former: n_queries must be >= 1");
    if (d_model < 1 || d_visual < 1) throw ConfigError("id-former: widths must be >= 1");
    if (n_heads < 1 || d_model % n_heads != 0) {
      throw ConfigError("id-former: d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (max_images < 1) throw ConfigError("id-former: max_images must be >= 1");
  }

  static IDFormerConfig from_kv(const KvConfig& kv) {
    IDFormerConfig c;
    auto positive = [&](const char* key, std::size_t fallback) {
      const long long v = kv.integer_or(key, static_cast<long long>(fallback));
      if (v < 1) throw ConfigError(std::string("id-former: ") + key + " must be >= 1");
      return static_cast<std::size_t>(v);
    };
    c.n_queries = positive("n_queries", c.n_queries);
    c.d_model = positive("d_model", c.d_model);
    c.d_visual = positive("d_visual", c.d_visual);
    c.n_heads = positive("n_heads", c.n_heads);
    c.max_images = positive("max_images", c.max_images);
    if (kv.has("modulation_mode")) c.modulation_mode = parse_modulation_mode(kv.str("modulation_mode"));
    c.validate();
    return c;
  }

  KvConfig to_kv() const {
    KvConfig kv;
    kv.set("n_queries", std::to_string(n_queries));
    kv.set("d_model", std::to_string(d_model));
    kv.set("d_visual", std::to_string(d_visual));
    kv.set("n_heads", std::to_string(n_heads));
    kv.set("modulation_mode", to_string(modulation_mode));
    kv.set("max_images", std::to_string(max_images));
    return kv;
  }
};

enum class ImageRole { kId, kTest };

struct VisualFeatures {
  Tensor patches;  // (n_patches x d_visual)
  ImageRole role = ImageRole::kTest;
  std::size_t index = 0;
};

struct CompressedImage {
  Tensor tokens;  // (n_queries x d_model)
  ImageRole role = ImageRole::kTest;
  std::size_t index = 0;
};

struct IDFormerParams {
  Tensor query_bank;  // (n_queries x d_model)
  LinearMap in_proj;  // d_visual -> d_model
  AttentionParams attn1;
  NormParams norm1;
  AttentionParams attn2;
  NormParams out_norm;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".query_bank", query_bank);
    in_proj.visit(prefix + ".in_proj", f);
    attn1.visit(prefix + ".attn1", f);
    norm1.visit(prefix + ".norm1", f);
    attn2.visit(prefix + ".attn2", f);
    out_norm.visit(prefix + ".out_norm", f);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".query_bank", query_bank);
    in_proj.visit(prefix + ".in_proj", f);
    attn1.visit(prefix + ".attn1", f);
    norm1.visit(prefix + ".norm1", f);
    attn2.visit(prefix + ".attn2", f);
    out_norm.visit(prefix + ".out_norm", f);
  }

  static IDFormerParams zeros(const IDFormerConfig& c) {
    return {Tensor({c.n_queries, c.d_model}), LinearMap::zeros(c.d_model, c.d_visual),
            AttentionParams::zeros(c.d_model), NormParams::zeros(c.d_model),
            AttentionParams::zeros(c.d_model), NormParams::zeros(c.d_model)};
  }
};

inline constexpr const char* kIdFormerPrefix = "idf";

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every map.
inline void init_linear(LinearMap& m, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(m.d_in()));
  for (double& w : m.weight.values()) w = rng.uniform(-bound, bound);
  for (double& b : m.bias.values()) b = rng.uniform(-bound, bound);
}

inline void init_attention(AttentionParams& a, Rng& rng) {
  init_linear(a.w_q, rng);
  init_linear(a.w_k, rng);
  init_linear(a.w_v, rng);
  init_linear(a.w_o, rng);
}

inline IDFormerParams init_params(const IDFormerConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  IDFormerParams p = IDFormerParams::zeros(config);
  for (double& v : p.query_bank.values()) v = 0.02 * rng.normal();
  init_linear(p.in_proj, rng);
  init_attention(p.attn1, rng);
  init_attention(p.attn2, rng);
  p.norm1 = NormParams::identity(config.d_model);
  p.out_norm = NormParams::identity(config.d_model);
  return p;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

struct CompressCache {
  Tensor patches;
  AttentionCache attn;
  NormCache norm;
};

struct ModulateCache {
  std::vector<AttentionCache> attn;  // empty when there were no IDs
  NormCache norm;
};

struct IDFormerCache {
  std::size_t n_ids = 0;
  std::size_t n_tests = 0;
  std::vector<CompressCache> compress;  // IDs first, then tests
  std::vector<ModulateCache> modulate;  // one per test
  bool valid = false;
};

inline CompressedImage compress(const IDFormerConfig& cfg, const IDFormerParams& p,
                                const VisualFeatures& feats, CompressCache* cache = nullptr) {
  if (feats.patches.rank() != 2 || feats.patches.cols() != cfg.d_visual) {
    throw DimensionError("compress: patch features " + shape_str(feats.patches.shape()) +
                         " do not have width d_visual=" + std::to_string(cfg.d_visual));
  }
  const Tensor projected = linear_forward(p.in_proj, feats.patches);
  AttentionCache* ac = cache ? &cache->attn : nullptr;
  const Tensor attended = attention_forward(p.attn1, p.query_bank, projected, cfg.n_heads, false, ac);
  Tensor tokens = layer_norm(attended, p.norm1, cache ? &cache->norm : nullptr);
  if (cache) cache->patches = feats.patches;
  return {std::move(tokens), feats.role, feats.index};
}

inline void require_token_shape(const IDFormerConfig& cfg, const Tensor& t, const char* what) {
  if (t.rank() != 2 || t.rows() != cfg.n_queries || t.cols() != cfg.d_model) {
    throw DimensionError(std::string(what) + ": tokens " + shape_str(t.shape()) + " must be (" +
                         std::to_string(cfg.n_queries) + "x" + std::to_string(cfg.d_model) + ")");
  }
}

inline CompressedImage modulate(const IDFormerConfig& cfg, const IDFormerParams& p,
                                const CompressedImage& test, std::span<const CompressedImage> ids,
                                ModulateCache* cache = nullptr) {
  require_token_shape(cfg, test.tokens, "modulate");
  for (const auto& id : ids) require_token_shape(cfg, id.tokens, "modulate");
  if (cfg.modulation_mode == ModulationMode::kNone) return test;

  Tensor pre = test.tokens;
  if (!ids.empty()) {
    if (cfg.modulation_mode == ModulationMode::kTestAsQuery) {
      std::vector<Tensor> rows;
      rows.reserve(ids.size());
      for (const auto& id : ids) rows.push_back(id.tokens);
      const Tensor kv = vstack(rows);
      AttentionCache* ac = nullptr;
      if (cache) ac = &cache->attn.emplace_back();
      pre += attention_forward(p.attn2, test.tokens, kv, cfg.n_heads, false, ac);
    } else {
      Tensor pooled(test.tokens.shape());
      for (const auto& id : ids) {
        AttentionCache* ac = nullptr;
        if (cache) ac = &cache->attn.emplace_back();
        pooled += attention_forward(p.attn2, id.tokens, test.tokens, cfg.n_heads, false, ac);
      }
      pooled *= 1.0 / static_cast<double>(ids.size());
      pre += pooled;
    }
  }
  Tensor out = layer_norm(pre, p.out_norm, cache ? &cache->norm : nullptr);
  return {std::move(out), test.role, test.index};
}

// ID outputs first (compress only), then test outputs (compress + modulate).
inline std::vector<CompressedImage> forward(const IDFormerConfig& cfg, const IDFormerParams& p,
                                            std::span<const VisualFeatures> id_feats,
                                            std::span<const VisualFeatures> test_feats,
                                            IDFormerCache* cache = nullptr) {
  const std::size_t total = id_feats.size() + test_feats.size();
  if (total > cfg.max_images) {
    throw CapacityError("id-former: " + std::to_string(total) + " images exceed the limit of " +
                        std::to_string(cfg.max_images) + " per sample");
  }
  if (cache) {
    *cache = IDFormerCache{};
    cache->n_ids = id_feats.size();
    cache->n_tests = test_feats.size();
    cache->compress.resize(total);
    cache->modulate.resize(test_feats.size());
  }
  std::vector<CompressedImage> ids;
  ids.reserve(id_feats.size());
  for (std::size_t i = 0; i < id_feats.size(); ++i) {
    ids.push_back(compress(cfg, p, id_feats[i], cache ? &cache->compress[i] : nullptr));
  }
  std::vector<CompressedImage> out = ids;
  for (std::size_t i = 0; i < test_feats.size(); ++i) {
    CompressCache* cc = cache ? &cache->compress[id_feats.size() + i] : nullptr;
    const CompressedImage t = compress(cfg, p, test_feats[i], cc);
    out.push_back(modulate(cfg, p, t, ids, cache ? &cache->modulate[i] : nullptr));
  }
  if (cache) cache->valid = true;
  return out;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

// Parameter groups that can be frozen: query_bank, in_proj, attn1, norm1,
// attn2, out_norm.
struct BackwardOptions {
  std::set<std::string> frozen_groups;
};

inline std::string param_group(const std::string& name) {
  const auto first = name.find('.');
  const auto second = name.find('.', first + 1);
  return name.substr(first + 1, second == std::string::npos ? std::string::npos
                                                             : second - first - 1);
}

// `upstream` holds dL/d(tokens) for every forward output, in output order.
inline GradientBundle backward(const IDFormerConfig& cfg, const IDFormerParams& p,
                               const IDFormerCache& cache, std::span<const Tensor> upstream,
                               const BackwardOptions& opt = {}) {
  if (!cache.valid) throw StateError("id-former backward: forward was not run with caching");
  const std::size_t total = cache.n_ids + cache.n_tests;
  if (upstream.size() != total) {
    throw DimensionError("id-former backward: " + std::to_string(upstream.size()) +
                         " upstream gradients for " + std::to_string(total) + " outputs");
  }
  for (const auto& u : upstream) require_token_shape(cfg, u, "id-former backward");

  IDFormerParams g = IDFormerParams::zeros(cfg);
  std::vector<Tensor> d_tokens(upstream.begin(), upstream.end());

  for (std::size_t t = 0; t < cache.n_tests; ++t) {
    if (cfg.modulation_mode == ModulationMode::kNone) continue;
    const ModulateCache& mc = cache.modulate[t];
    Tensor& d_test = d_tokens[cache.n_ids + t];
    const Tensor d_pre = layer_norm_backward(p.out_norm, mc.norm, d_test, g.out_norm);
    Tensor d_test_in = d_pre;
    if (!mc.attn.empty()) {
      if (cfg.modulation_mode == ModulationMode::kTestAsQuery) {
        const AttentionInputGrads ag = attention_backward(p.attn2, mc.attn[0], d_pre, g.attn2);
        d_test_in += ag.d_q_in;
        for (std::size_t j = 0; j < cache.n_ids; ++j) {
          d_tokens[j] += slice_rows(ag.d_kv_in, j * cfg.n_queries, cfg.n_queries);
        }
      } else {
        Tensor d_pooled = d_pre * (1.0 / static_cast<double>(mc.attn.size()));
        for (std::size_t j = 0; j < mc.attn.size(); ++j) {
          const AttentionInputGrads ag = attention_backward(p.attn2, mc.attn[j], d_pooled, g.attn2);
          d_tokens[j] += ag.d_q_in;
          d_test_in += ag.d_kv_in;
        }
      }
    }
    d_test = std::move(d_test_in);
  }

  for (std::size_t i = 0; i < total; ++i) {
    const CompressCache& cc = cache.compress[i];
    const Tensor d_att = layer_norm_backward(p.norm1, cc.norm, d_tokens[i], g.norm1);
    const AttentionInputGrads ag = attention_backward(p.attn1, cc.attn, d_att, g.attn1);
    g.query_bank += ag.d_q_in;
    linear_backward(p.in_proj, cc.patches, ag.d_kv_in, g.in_proj);
  }

  GradientBundle bundle;
  g.visit(kIdFormerPrefix, [&](const std::string& name, const Tensor& t) {
    if (cfg.modulation_mode == ModulationMode::kNone) {
      const std::string grp = param_group(name);
      if (grp == "attn2" || grp == "out_norm") return;  // unused by the ablation
    }
    if (opt.frozen_groups.count(param_group(name))) return;
    bundle.grads.emplace(name, t);
  });
  return bundle;
}

}  // namespace idvlm

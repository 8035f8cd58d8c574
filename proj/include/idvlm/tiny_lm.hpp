#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "idvlm/kv_config.hpp"
#include "idvlm/ops.hpp"
#include "idvlm/params.hpp"
#include "idvlm/rng.hpp"

// Pre-norm causal decoder:
//   x = input + pos
//   x = x + attn(ln1(x));  x = x + fc2(gelu(fc1(ln2(x))))   per block
//   logits = head(ln_f(x))
// The input rows are already-embedded tokens, so image encodings can be
// spliced in before the first block.

namespace idvlm {

struct LMConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ff = 128;
  std::size_t max_len = 96;

  void validate() const {
    if (vocab_size < 2) throw ConfigError("lm: vocab_size must be >= 2");
    if (d_model < 1 || d_ff < 1 || max_len < 1) throw ConfigError("lm: empty extent");
    if (n_heads < 1 || d_model % n_heads != 0) {
      throw ConfigError("lm: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                        std::to_string(n_heads));
    }
  }

  // d_model is shared with the ID-Former and read from the same file.
  static LMConfig from_kv(const KvConfig& kv) {
    LMConfig c;
    auto positive = [&](const char* key, std::size_t fallback) {
      const long long v = kv.integer_or(key, static_cast<long long>(fallback));
      if (v < 1) throw ConfigError(std::string("lm: ") + key + " must be >= 1");
      return static_cast<std::size_t>(v);
    };
    c.vocab_size = positive("vocab_size", c.vocab_size);
    c.d_model = positive("d_model", c.d_model);
    c.n_layers = static_cast<std::size_t>(kv.integer_or("lm_layers", static_cast<long long>(c.n_layers)));
    c.n_heads = positive("lm_heads", c.n_heads);
    c.d_ff = positive("lm_ff", c.d_ff);
    c.max_len = positive("lm_max_len", c.max_len);
    c.validate();
    return c;
  }

  void write_kv(KvConfig& kv) const {
    kv.set("vocab_size", std::to_string(vocab_size));
    kv.set("d_model", std::to_string(d_model));
    kv.set("lm_layers", std::to_string(n_layers));
    kv.set("lm_heads", std::to_string(n_heads));
    kv.set("lm_ff", std::to_string(d_ff));
    kv.set("lm_max_len", std::to_string(max_len));
  }
};

struct LMBlock {
  NormParams ln1;
  AttentionParams attn;
  NormParams ln2;
  LinearMap fc1;  // d_model -> d_ff
  LinearMap fc2;  // d_ff -> d_model

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    ln1.visit(prefix + ".ln1", f);
    attn.visit(prefix + ".attn", f);
    ln2.visit(prefix + ".ln2", f);
    fc1.visit(prefix + ".fc1", f);
    fc2.visit(prefix + ".fc2", f);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    ln1.visit(prefix + ".ln1", f);
    attn.visit(prefix + ".attn", f);
    ln2.visit(prefix + ".ln2", f);
    fc1.visit(prefix + ".fc1", f);
    fc2.visit(prefix + ".fc2", f);
  }
};

struct TinyLMParams {
  Tensor tok_emb;  // (vocab x d_model)
  Tensor pos_emb;  // (max_len x d_model)
  std::vector<LMBlock> blocks;
  NormParams ln_f;
  LinearMap head;  // d_model -> vocab

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".tok_emb", tok_emb);
    f(prefix + ".pos_emb", pos_emb);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(prefix + ".block" + std::to_string(i), f);
    ln_f.visit(prefix + ".ln_f", f);
    head.visit(prefix + ".head", f);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".tok_emb", tok_emb);
    f(prefix + ".pos_emb", pos_emb);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(prefix + ".block" + std::to_string(i), f);
    ln_f.visit(prefix + ".ln_f", f);
    head.visit(prefix + ".head", f);
  }

  static TinyLMParams zeros(const LMConfig& c) {
    TinyLMParams p;
    p.tok_emb = Tensor({c.vocab_size, c.d_model});
    p.pos_emb = Tensor({c.max_len, c.d_model});
    for (std::size_t i = 0; i < c.n_layers; ++i) {
      p.blocks.push_back({NormParams::zeros(c.d_model), AttentionParams::zeros(c.d_model),
                          NormParams::zeros(c.d_model), LinearMap::zeros(c.d_ff, c.d_model),
                          LinearMap::zeros(c.d_model, c.d_ff)});
    }
    p.ln_f = NormParams::zeros(c.d_model);
    p.head = LinearMap::zeros(c.vocab_size, c.d_model);
    return p;
  }
};

inline constexpr const char* kLmPrefix = "lm";

inline void init_lm_linear(LinearMap& m, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(m.d_in()));
  for (double& w : m.weight.values()) w = rng.uniform(-bound, bound);
  for (double& b : m.bias.values()) b = rng.uniform(-bound, bound);
}

// Token rows unit-variance (image encodings arrive layer-normed, so text and
// image rows start at the same scale); positions 0.1-scaled.
inline TinyLMParams init_lm_params(const LMConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  TinyLMParams p = TinyLMParams::zeros(cfg);
  for (double& v : p.tok_emb.values()) v = rng.normal();
  for (double& v : p.pos_emb.values()) v = 0.1 * rng.normal();
  for (auto& b : p.blocks) {
    b.ln1 = NormParams::identity(cfg.d_model);
    b.ln2 = NormParams::identity(cfg.d_model);
    init_lm_linear(b.attn.w_q, rng);
    init_lm_linear(b.attn.w_k, rng);
    init_lm_linear(b.attn.w_v, rng);
    init_lm_linear(b.attn.w_o, rng);
    init_lm_linear(b.fc1, rng);
    init_lm_linear(b.fc2, rng);
  }
  p.ln_f = NormParams::identity(cfg.d_model);
  init_lm_linear(p.head, rng);
  return p;
}

struct LMBlockCache {
  NormCache n1;
  Tensor a;  // ln1 output
  AttentionCache attn;
  NormCache n2;
  Tensor b;  // ln2 output
  Tensor h;  // fc1 output, pre-activation
  Tensor g;  // gelu(h)
};

struct LMCache {
  std::vector<LMBlockCache> blocks;
  NormCache ln_f;
  Tensor final_hidden;
  std::size_t seq_len = 0;
  bool valid = false;
};

inline Tensor gelu_rows(const Tensor& h) {
  Tensor out(h.shape());
  for (std::size_t i = 0; i < h.size(); ++i) out[i] = gelu(h[i]);
  return out;
}

// (seq_len x d_model) embedded inputs -> (seq_len x vocab) logits.
inline Tensor lm_forward(const LMConfig& cfg, const TinyLMParams& p, const Tensor& x,
                         LMCache* cache = nullptr) {
  if (x.rank() != 2 || x.cols() != cfg.d_model) {
    throw DimensionError("lm: input " + shape_str(x.shape()) + " must have width d_model=" +
                         std::to_string(cfg.d_model));
  }
  if (x.rows() > cfg.max_len) {
    throw DimensionError("lm: sequence of " + std::to_string(x.rows()) + " rows exceeds max_len " +
                         std::to_string(cfg.max_len));
  }
  Tensor h = x;
  for (std::size_t t = 0; t < h.rows(); ++t) {
    for (std::size_t c = 0; c < h.cols(); ++c) h.at(t, c) += p.pos_emb.at(t, c);
  }
  if (cache) {
    *cache = LMCache{};
    cache->blocks.resize(p.blocks.size());
    cache->seq_len = x.rows();
  }
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    const LMBlock& b = p.blocks[l];
    LMBlockCache* bc = cache ? &cache->blocks[l] : nullptr;
    Tensor a = layer_norm(h, b.ln1, bc ? &bc->n1 : nullptr);
    h += attention_forward(b.attn, a, a, cfg.n_heads, true, bc ? &bc->attn : nullptr);
    Tensor bn = layer_norm(h, b.ln2, bc ? &bc->n2 : nullptr);
    Tensor pre = linear_forward(b.fc1, bn);
    Tensor act = gelu_rows(pre);
    h += linear_forward(b.fc2, act);
    if (bc) {
      bc->a = std::move(a);
      bc->b = std::move(bn);
      bc->h = std::move(pre);
      bc->g = std::move(act);
    }
  }
  Tensor fin = layer_norm(h, p.ln_f, cache ? &cache->ln_f : nullptr);
  Tensor logits = linear_forward(p.head, fin);
  if (cache) {
    cache->final_hidden = std::move(fin);
    cache->valid = true;
  }
  return logits;
}

struct LMGradients {
  TinyLMParams params;  // tok_emb left zero; the caller owns the lookup
  Tensor d_input;       // dL/d(embedded input rows)
};

inline LMGradients lm_backward(const LMConfig& cfg, const TinyLMParams& p, const LMCache& cache,
                               const Tensor& d_logits) {
  if (!cache.valid) throw StateError("lm backward: forward was not run with caching");
  if (d_logits.rows() != cache.seq_len || d_logits.cols() != cfg.vocab_size) {
    throw DimensionError("lm backward: logits gradient " + shape_str(d_logits.shape()) +
                         " does not match the cached forward");
  }
  LMGradients out{TinyLMParams::zeros(cfg), Tensor()};
  TinyLMParams& g = out.params;
  Tensor dh = linear_backward(p.head, cache.final_hidden, d_logits, g.head);
  dh = layer_norm_backward(p.ln_f, cache.ln_f, dh, g.ln_f);
  for (std::size_t l = p.blocks.size(); l-- > 0;) {
    const LMBlock& b = p.blocks[l];
    const LMBlockCache& bc = cache.blocks[l];
    LMBlock& gb = g.blocks[l];
    Tensor d_act = linear_backward(b.fc2, bc.g, dh, gb.fc2);
    for (std::size_t i = 0; i < d_act.size(); ++i) d_act[i] *= gelu_grad(bc.h[i]);
    Tensor d_bn = linear_backward(b.fc1, bc.b, d_act, gb.fc1);
    dh += layer_norm_backward(b.ln2, bc.n2, d_bn, gb.ln2);
    const AttentionInputGrads ag = attention_backward(b.attn, bc.attn, dh, gb.attn);
    Tensor d_a = ag.d_q_in;
    d_a += ag.d_kv_in;
    dh += layer_norm_backward(b.ln1, bc.n1, d_a, gb.ln1);
  }
  for (std::size_t t = 0; t < dh.rows(); ++t) {
    for (std::size_t c = 0; c < dh.cols(); ++c) g.pos_emb.at(t, c) += dh.at(t, c);
  }
  out.d_input = std::move(dh);
  return out;
}

}  // namespace idvlm

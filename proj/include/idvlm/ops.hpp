#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "idvlm/tensor.hpp"

namespace idvlm {

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

// Row-wise softmax with max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
  x.require_matrix("softmax_rows");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      // exp(-inf) is exactly 0, which is how masked entries drop out
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (double& v : o) v /= sum;
  }
  return out;
}

// Backward of softmax given its output p: dx = p * (dp - <dp, p>) per row.
inline Tensor softmax_rows_backward(const Tensor& p, const Tensor& dp) {
  Tensor dx(p.shape());
  for (std::size_t i = 0; i < p.rows(); ++i) {
    auto pr = p.row(i);
    auto gr = dp.row(i);
    double dot = 0.0;
    for (std::size_t j = 0; j < pr.size(); ++j) dot += pr[j] * gr[j];
    auto o = dx.row(i);
    for (std::size_t j = 0; j < pr.size(); ++j) o[j] = pr[j] * (gr[j] - dot);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Linear maps
// ---------------------------------------------------------------------------

// y = x * W^T + b with W of shape (d_out x d_in). An empty bias means the
// map has none.
struct LinearMap {
  Tensor weight;
  Tensor bias;

  std::size_t d_in() const { return weight.cols(); }
  std::size_t d_out() const { return weight.rows(); }
  bool has_bias() const { return !bias.empty(); }

  static LinearMap zeros(std::size_t d_out, std::size_t d_in, bool with_bias = true) {
    return {Tensor({d_out, d_in}), with_bias ? Tensor({d_out}) : Tensor()};
  }

  void validate(const std::string& name) const {
    if (weight.rank() != 2 || (has_bias() && (bias.rank() != 1 || bias.size() != weight.rows()))) {
      throw DimensionError(name + ": inconsistent weight " + shape_str(weight.shape()) +
                           " / bias " + shape_str(bias.shape()));
    }
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w", weight);
    if (has_bias()) f(prefix + ".b", bias);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".w", weight);
    if (has_bias()) f(prefix + ".b", bias);
  }
};

inline Tensor linear_forward(const LinearMap& map, const Tensor& x) {
  if (x.cols() != map.d_in()) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(map.weight.shape()));
  }
  Tensor y = matmul_nt(x, map.weight);
  if (!map.has_bias()) return y;
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto r = y.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += map.bias[j];
  }
  return y;
}

// Accumulates weight/bias gradients into `grad` and returns dL/dx.
inline Tensor linear_backward(const LinearMap& map, const Tensor& x, const Tensor& dy,
                              LinearMap& grad) {
  grad.weight += matmul_tn(dy, x);
  for (std::size_t i = 0; map.has_bias() && i < dy.rows(); ++i) {
    auto r = dy.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) grad.bias[j] += r[j];
  }
  return matmul(dy, map.weight);
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

struct AttentionResult {
  Tensor out;
  Tensor weights;
};

// weights = softmax(q k^T / sqrt(d)); out = weights v. With `causal`, query i
// only sees keys j <= i.
inline AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                            bool causal = false) {
  q.require_matrix("attention");
  k.require_matrix("attention");
  v.require_matrix("attention");
  if (q.cols() != k.cols()) {
    throw DimensionError("attention: query width " + shape_str(q.shape()) +
                         " does not match key width " + shape_str(k.shape()));
  }
  if (k.rows() != v.rows()) {
    throw DimensionError("attention: key rows " + shape_str(k.shape()) +
                         " do not match value rows " + shape_str(v.shape()));
  }
  Tensor logits = matmul_nt(q, k);
  logits *= 1.0 / std::sqrt(static_cast<double>(q.cols()));
  if (causal) {
    for (std::size_t i = 0; i < logits.rows(); ++i)
      for (std::size_t j = i + 1; j < logits.cols(); ++j)
        logits.at(i, j) = -std::numeric_limits<double>::infinity();
  }
  Tensor w = softmax_rows(logits);
  Tensor out = matmul(w, v);
  return {std::move(out), std::move(w)};
}

// The four projections of one attention block, all on d_model. The key
// projection has no bias: softmax is invariant to it, so its gradient is
// identically zero.
struct AttentionParams {
  LinearMap w_q, w_k, w_v, w_o;

  std::size_t d_model() const { return w_o.d_out(); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    w_q.visit(prefix + ".wq", f);
    w_k.visit(prefix + ".wk", f);
    w_v.visit(prefix + ".wv", f);
    w_o.visit(prefix + ".wo", f);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    w_q.visit(prefix + ".wq", f);
    w_k.visit(prefix + ".wk", f);
    w_v.visit(prefix + ".wv", f);
    w_o.visit(prefix + ".wo", f);
  }

  static AttentionParams zeros(std::size_t d_model) {
    return {LinearMap::zeros(d_model, d_model), LinearMap::zeros(d_model, d_model, false),
            LinearMap::zeros(d_model, d_model), LinearMap::zeros(d_model, d_model)};
  }

  void validate(const std::string& name) const {
    const std::size_t d = w_q.d_out();
    for (const LinearMap* m : {&w_q, &w_k, &w_v, &w_o}) {
      m->validate(name);
      if (m->d_out() != d || m->d_in() != d) {
        throw DimensionError(name + ": projections must all map d_model -> d_model");
      }
    }
  }
};

struct AttentionCache {
  Tensor q_in, kv_in, q, k, v, concat;
  std::vector<Tensor> weights;  // one per head
  std::size_t n_heads = 1;
  bool causal = false;
};

// Multi-head attention: queries from q_in, keys/values from kv_in.
inline Tensor attention_forward(const AttentionParams& p, const Tensor& q_in, const Tensor& kv_in,
                                std::size_t n_heads, bool causal, AttentionCache* cache) {
  const std::size_t d = p.d_model();
  if (q_in.cols() != d || kv_in.cols() != d) {
    throw DimensionError("attention block: inputs " + shape_str(q_in.shape()) + " / " +
                         shape_str(kv_in.shape()) + " must have width " + std::to_string(d));
  }
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("attention block: d_model " + std::to_string(d) +
                         " not divisible by head count " + std::to_string(n_heads));
  }
  Tensor q = linear_forward(p.w_q, q_in);
  Tensor k = linear_forward(p.w_k, kv_in);
  Tensor v = linear_forward(p.w_v, kv_in);
  Tensor concat({q_in.rows(), d});
  std::vector<Tensor> weights;
  const std::size_t dh = d / n_heads;
  for (std::size_t h = 0; h < n_heads; ++h) {
    AttentionResult r = n_heads == 1
                            ? scaled_dot_attention(q, k, v, causal)
                            : scaled_dot_attention(slice_cols(q, h * dh, dh),
                                                   slice_cols(k, h * dh, dh),
                                                   slice_cols(v, h * dh, dh), causal);
    add_cols_into(concat, r.out, h * dh);
    if (cache) weights.push_back(std::move(r.weights));
  }
  Tensor y = linear_forward(p.w_o, concat);
  if (cache) {
    *cache = {q_in, kv_in, std::move(q), std::move(k), std::move(v), std::move(concat),
              std::move(weights), n_heads, causal};
  }
  return y;
}

struct AttentionInputGrads {
  Tensor d_q_in;
  Tensor d_kv_in;
};

inline AttentionInputGrads attention_backward(const AttentionParams& p, const AttentionCache& c,
                                              const Tensor& dy, AttentionParams& grad) {
  if (c.weights.empty()) throw StateError("attention backward: forward cache is empty");
  const std::size_t d = p.d_model();
  const std::size_t dh = d / c.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor d_concat = linear_backward(p.w_o, c.concat, dy, grad.w_o);
  Tensor dq(c.q.shape()), dk(c.k.shape()), dv(c.v.shape());
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    const bool whole = c.n_heads == 1;
    Tensor qh = whole ? c.q : slice_cols(c.q, h * dh, dh);
    Tensor kh = whole ? c.k : slice_cols(c.k, h * dh, dh);
    Tensor vh = whole ? c.v : slice_cols(c.v, h * dh, dh);
    Tensor doh = whole ? d_concat : slice_cols(d_concat, h * dh, dh);
    const Tensor& w = c.weights[h];
    Tensor dw = matmul_nt(doh, vh);
    Tensor dvh = matmul_tn(w, doh);
    Tensor ds = softmax_rows_backward(w, dw);
    ds *= scale;
    Tensor dqh = matmul(ds, kh);
    Tensor dkh = matmul_tn(ds, qh);
    add_cols_into(dq, dqh, h * dh);
    add_cols_into(dk, dkh, h * dh);
    add_cols_into(dv, dvh, h * dh);
  }
  Tensor d_q_in = linear_backward(p.w_q, c.q_in, dq, grad.w_q);
  Tensor d_kv_in = linear_backward(p.w_k, c.kv_in, dk, grad.w_k);
  d_kv_in += linear_backward(p.w_v, c.kv_in, dv, grad.w_v);
  return {std::move(d_q_in), std::move(d_kv_in)};
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

struct NormParams {
  Tensor gamma;
  Tensor beta;

  static NormParams identity(std::size_t width) {
    return {Tensor({width}, 1.0), Tensor({width}, 0.0)};
  }
  static NormParams zeros(std::size_t width) { return {Tensor({width}), Tensor({width})}; }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
};

struct NormCache {
  Tensor xhat;
  std::vector<double> inv_std;
};

inline Tensor layer_norm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                 NormCache* cache) {
  x.require_matrix("layer_norm");
  const std::size_t n = x.cols();
  if (gamma.size() != n || beta.size() != n) {
    throw DimensionError("layer_norm: gamma/beta length " + std::to_string(gamma.size()) + "/" +
                         std::to_string(beta.size()) + " vs row width " + std::to_string(n));
  }
  Tensor y(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (r[j] - mean) * is;
      xhat.at(i, j) = h;
      y.at(i, j) = gamma[j] * h + beta[j];
    }
  }
  if (cache) *cache = {std::move(xhat), std::move(inv_std)};
  return y;
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  return layer_norm_forward(x, gamma, beta, nullptr);
}

inline Tensor layer_norm(const Tensor& x, const NormParams& p, NormCache* cache = nullptr) {
  return layer_norm_forward(x, p.gamma, p.beta, cache);
}

inline Tensor layer_norm_backward(const NormParams& p, const NormCache& c, const Tensor& dy,
                                  NormParams& grad) {
  const std::size_t n = dy.cols();
  const double nn = static_cast<double>(n);
  Tensor dx(dy.shape());
  std::vector<double> dxhat(n);
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    double sum_d = 0.0, sum_dh = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double g = dy.at(i, j);
      const double h = c.xhat.at(i, j);
      grad.gamma[j] += g * h;
      grad.beta[j] += g;
      dxhat[j] = g * p.gamma[j];
      sum_d += dxhat[j];
      sum_dh += dxhat[j] * h;
    }
    for (std::size_t j = 0; j < n; ++j) {
      dx.at(i, j) = c.inv_std[i] / nn * (nn * dxhat[j] - sum_d - c.xhat.at(i, j) * sum_dh);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

// tanh approximation of GELU; smooth everywhere, which keeps finite
// difference checks clean.
inline double gelu(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  constexpr double c = 0.7978845608028654;
  const double u = c * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Supervision mask over sequence positions (1 = supervised).
using Mask = std::vector<std::uint8_t>;

class EmptySupervisionError : public Error {
 public:
  EmptySupervisionError() : Error("cross entropy: mask selects no supervised positions") {}
};

struct LossAndGrad {
  double loss = 0.0;
  Tensor d_logits;
};

// Mean of -log softmax(logits[t])[targets[t]] over positions with mask[t].
// The gradient is only materialized when `want_grad`.
inline LossAndGrad cross_entropy_with_grad(const Tensor& logits, std::span<const int> targets,
                                           std::span<const std::uint8_t> mask, bool want_grad) {
  logits.require_matrix("cross_entropy");
  if (targets.size() != logits.rows() || mask.size() != logits.rows()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " with " +
                         std::to_string(targets.size()) + " targets / " +
                         std::to_string(mask.size()) + " mask entries");
  }
  const std::size_t count =
      static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }));
  if (count == 0) throw EmptySupervisionError();
  LossAndGrad out;
  if (want_grad) out.d_logits = Tensor(logits.shape());
  const std::size_t vocab = logits.cols();
  const double inv = 1.0 / static_cast<double>(count);
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    if (!mask[t]) continue;
    const int target = targets[t];
    if (target < 0 || static_cast<std::size_t>(target) >= vocab) {
      throw DimensionError("cross_entropy: target id " + std::to_string(target) +
                           " outside vocabulary of " + std::to_string(vocab));
    }
    auto r = logits.row(t);
    const double mx = *std::max_element(r.begin(), r.end());
    double sum = 0.0;
    for (double v : r) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    out.loss += (lse - r[static_cast<std::size_t>(target)]) * inv;
    if (want_grad) {
      auto g = out.d_logits.row(t);
      for (std::size_t j = 0; j < vocab; ++j) g[j] = std::exp(r[j] - lse) * inv;
      g[static_cast<std::size_t>(target)] -= inv;
    }
  }
  if (!std::isfinite(out.loss)) throw NumericError("cross_entropy: non-finite loss");
  return out;
}

inline double cross_entropy_next_token(const Tensor& logits, std::span<const int> targets,
                                       std::span<const std::uint8_t> mask) {
  return cross_entropy_with_grad(logits, targets, mask, false).loss;
}

}  // namespace idvlm

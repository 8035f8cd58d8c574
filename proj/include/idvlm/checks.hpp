#pragma once

#include <string>
#include <vector>

#include "idvlm/gradcheck.hpp"
#include "idvlm/toy_vlm.hpp"

// Gradient checks of the ID-Former, the LM and the composed toy model at
// randomized (non-symmetric) parameters.

namespace idvlm {

struct ToyGradCheckOptions {
  double tol = 1e-4;
  FiniteDiffOptions fd{1e-6, 24, 0};
  std::uint64_t seed = 1;
  std::string corrupt;  // parameter whose analytic gradient is skewed, for debugging
};

namespace detail {

inline void skew(GradientBundle& g, const std::string& name) {
  if (name.empty()) return;
  if (!g.contains(name)) throw ConfigError("gradcheck: no parameter named " + name);
  for (double& v : g.grads.at(name).values()) v = 1.5 * v + 1e-3;
}

template <typename P>
void randomize(P& params, const std::string& prefix, Rng& rng) {
  params.visit(prefix, [&](const std::string& name, Tensor& t) {
    const bool gain = name.ends_with(".gamma");
    for (double& v : t.values()) v = gain ? rng.uniform(0.5, 1.5) : v + 0.3 * rng.normal();
  });
}

inline VisualFeatures noise_feats(std::size_t n, std::size_t width, Rng& rng, ImageRole role, std::size_t index) {
  Tensor t({n, width});
  for (double& v : t.values()) v = rng.normal();
  return {std::move(t), role, index};
}

}  // namespace detail

inline GradCheckReport check_idformer_grads(const IDFormerConfig& cfg, const ToyGradCheckOptions& opt = {}) {
  Rng rng(opt.seed);
  IDFormerParams params = init_params(cfg, opt.seed);
  detail::randomize(params, kIdFormerPrefix, rng);
  const std::vector<VisualFeatures> ids = {detail::noise_feats(3, cfg.d_visual, rng, ImageRole::kId, 0),
                                           detail::noise_feats(5, cfg.d_visual, rng, ImageRole::kId, 1)};
  const std::vector<VisualFeatures> tests = {detail::noise_feats(4, cfg.d_visual, rng, ImageRole::kTest, 0)};
  std::vector<Tensor> dirs;
  for (std::size_t i = 0; i < ids.size() + tests.size(); ++i) {
    Tensor d({cfg.n_queries, cfg.d_model});
    for (double& v : d.values()) v = rng.normal();
    dirs.push_back(std::move(d));
  }
  auto fwd_bwd = [&](bool with_grad) {
    IDFormerCache cache;
    const auto outs = forward(cfg, params, ids, tests, with_grad ? &cache : nullptr);
    long double loss = 0.0L;
    std::vector<Tensor> up;
    for (std::size_t i = 0; i < outs.size(); ++i) {
      Tensor g(outs[i].tokens.shape());
      for (std::size_t j = 0; j < g.size(); ++j) {
        const double o = outs[i].tokens[j];
        loss += static_cast<long double>(dirs[i][j]) * o + 0.25L * o * o;
        g[j] = dirs[i][j] + 0.5 * o;
      }
      up.push_back(std::move(g));
    }
    GradientBundle grads;
    if (with_grad) {
      grads = backward(cfg, params, cache, up);
      detail::skew(grads, opt.corrupt);
    }
    return std::make_pair(static_cast<double>(loss), std::move(grads));
  };
  return grad_check(fwd_bwd, params, kIdFormerPrefix, opt.tol, opt.fd);
}

inline GradCheckReport check_lm_grads(const LMConfig& cfg, const ToyGradCheckOptions& opt = {}) {
  Rng rng(opt.seed);
  TinyLMParams params = init_lm_params(cfg, opt.seed);
  detail::randomize(params, kLmPrefix, rng);
  const std::size_t n = std::min<std::size_t>(7, cfg.max_len);
  Tensor x({n, cfg.d_model});
  for (double& v : x.values()) v = rng.normal();
  std::vector<int> targets(n);
  for (int& t : targets) t = static_cast<int>(rng.below(cfg.vocab_size));
  Mask mask(n, 1);
  mask[0] = 0;
  auto fwd_bwd = [&](bool with_grad) {
    LMCache cache;
    const Tensor logits = lm_forward(cfg, params, x, with_grad ? &cache : nullptr);
    const LossAndGrad lg = cross_entropy_with_grad(logits, targets, mask, with_grad);
    GradientBundle grads;
    if (with_grad) {
      LMGradients g = lm_backward(cfg, params, cache, lg.d_logits);
      g.params.visit(kLmPrefix, [&](const std::string& name, Tensor& t) { grads.grads.emplace(name, std::move(t)); });
      detail::skew(grads, opt.corrupt);
    }
    return std::make_pair(lg.loss, std::move(grads));
  };
  return grad_check(fwd_bwd, params, kLmPrefix, opt.tol, opt.fd);
}

// One synthetic qa sample through the ID-Former, the splice and the LM.
inline GradCheckReport check_toy_grads(const IDFormerConfig& idf, const LMConfig& lm, const WorldConfig& world,
                                       const ToyGradCheckOptions& opt = {}) {
  ToyModel m = init_toy_model(idf, lm, opt.seed);
  Rng rng(opt.seed);
  detail::randomize(m.idf, kIdFormerPrefix, rng);
  detail::randomize(m.lm, kLmPrefix, rng);
  const SyntheticWorld w = SyntheticWorld::create(world, opt.seed);
  DatasetOptions d;
  d.n_samples = 1;
  d.seed = opt.seed;
  const InterleavedSample sample = make_synthetic_dataset(w, Vocab::standard(idf.max_images), d).front();
  auto fwd_bwd = [&](bool with_grad) {
    SampleLoss sl = sample_loss(m, sample, with_grad);
    if (with_grad) detail::skew(sl.grads, opt.corrupt);
    return std::make_pair(sl.loss, std::move(sl.grads));
  };
  return grad_check(fwd_bwd, m, "", opt.tol, opt.fd);
}

struct ToyGradCheckSuite {
  GradCheckReport idformer;
  GradCheckReport lm;
  GradCheckReport composed;

  bool passed() const { return idformer.passed && lm.passed && composed.passed; }
};

// The corrupted parameter, when set, is applied to whichever part owns it.
inline ToyGradCheckSuite check_all_grads(const IDFormerConfig& idf, const LMConfig& lm, const WorldConfig& world,
                                         const ToyGradCheckOptions& opt = {}) {
  ToyGradCheckOptions part = opt;
  ToyGradCheckSuite s;
  part.corrupt = opt.corrupt.starts_with(std::string(kIdFormerPrefix) + ".") ? opt.corrupt : "";
  s.idformer = check_idformer_grads(idf, part);
  part.corrupt = opt.corrupt.starts_with(std::string(kLmPrefix) + ".") ? opt.corrupt : "";
  s.lm = check_lm_grads(lm, part);
  s.composed = check_toy_grads(idf, lm, world, opt);
  return s;
}

inline std::string grad_check_text(const std::string& label, const GradCheckReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-9s %s  max rel error %.3e (tol %.1e) worst %s\n", label.c_str(),
                r.passed ? "PASS" : "FAIL", r.max_rel_error, r.tolerance, r.worst_param.c_str());
  return buf;
}

}  // namespace idvlm

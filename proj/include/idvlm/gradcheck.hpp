#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "idvlm/params.hpp"
#include "idvlm/rng.hpp"

namespace idvlm {

struct FiniteDiffOptions {
  double eps = 1e-6;
  // 0 means every coordinate; otherwise a seeded subset of this many per tensor.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<std::size_t> probe_indices(std::size_t n, const FiniteDiffOptions& opt,
                                              const std::string& name) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (opt.max_coords_per_param == 0 || opt.max_coords_per_param >= n) return idx;
  Rng rng(mix_seed(opt.seed, fnv1a(name)));
  rng.shuffle(idx);
  idx.resize(opt.max_coords_per_param);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace detail

// Central differences (f(x+eps) - f(x-eps)) / (2 eps) for every coordinate of
// every tensor in `params`. `loss_fn` reads the (temporarily perturbed)
// params. Unprobed coordinates are left at 0 when sampling.
template <typename P, typename LossFn>
GradientBundle finite_diff_grad(LossFn&& loss_fn, P& params, const std::string& prefix,
                                const FiniteDiffOptions& opt = {}) {
  if (!(opt.eps > 0.0)) throw ConfigError("finite_diff_grad: eps must be positive");
  GradientBundle out;
  for (auto& [name, tensor] : named_tensors_mut(params, prefix)) {
    Tensor g(tensor->shape());
    for (std::size_t i : detail::probe_indices(tensor->size(), opt, name)) {
      const double saved = (*tensor)[i];
      (*tensor)[i] = saved + opt.eps;
      const double up = loss_fn();
      (*tensor)[i] = saved - opt.eps;
      const double down = loss_fn();
      (*tensor)[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("finite_diff_grad: non-finite loss while probing " + name + "[" +
                           std::to_string(i) + "]");
      }
      g[i] = (up - down) / (2.0 * opt.eps);
    }
    out.grads.emplace(name, std::move(g));
  }
  return out;
}

struct GradCheckEntry {
  std::string name;
  double rel_error = 0.0;
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
};

struct GradCheckReport {
  bool passed = false;
  double tolerance = 0.0;
  double max_rel_error = 0.0;
  std::string worst_param;
  std::vector<GradCheckEntry> entries;
};

inline constexpr double kGradCheckFloor = 1e-8;

// Compares an analytic gradient bundle with finite differences, tensor by
// tensor: rel = |a - n| / max(|a|, |n|, 1e-8) over the probed coordinates.
// A parameter missing from the analytic bundle is compared against zero.
//
// fwd_bwd(with_grad) returns (loss, gradients); the bundle may be left empty
// when with_grad is false.
template <typename P, typename FwdBwd>
GradCheckReport grad_check(FwdBwd&& fwd_bwd, P& params, const std::string& prefix, double tol,
                           const FiniteDiffOptions& opt = {}) {
  const GradientBundle analytic = fwd_bwd(true).second;
  const GradientBundle numeric =
      finite_diff_grad([&] { return fwd_bwd(false).first; }, params, prefix, opt);
  GradCheckReport report;
  report.tolerance = tol;
  for (auto& [name, tensor] : named_tensors_mut(params, prefix)) {
    const Tensor& n = numeric.at(name);
    const auto probed = detail::probe_indices(tensor->size(), opt, name);
    const Tensor* a = analytic.contains(name) ? &analytic.at(name) : nullptr;
    if (a && a->shape() != tensor->shape()) {
      throw DimensionError("grad_check: analytic gradient for " + name + " has shape " +
                           shape_str(a->shape()) + ", parameter " + shape_str(tensor->shape()));
    }
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i : probed) {
      const double av = a ? (*a)[i] : 0.0;
      diff2 += (av - n[i]) * (av - n[i]);
      a2 += av * av;
      n2 += n[i] * n[i];
    }
    GradCheckEntry e{name, 0.0, std::sqrt(a2), std::sqrt(n2)};
    e.rel_error = std::sqrt(diff2) / std::max({e.analytic_norm, e.numeric_norm, kGradCheckFloor});
    if (!std::isfinite(e.rel_error)) e.rel_error = std::numeric_limits<double>::infinity();
    if (report.worst_param.empty() || e.rel_error > report.max_rel_error) {
      report.max_rel_error = e.rel_error;
      report.worst_param = name;
    }
    report.entries.push_back(std::move(e));
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace idvlm

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "idvlm/tensor.hpp"

namespace idvlm {

// Parameter identifier -> gradient, one entry per trainable tensor. Missing
// entries mean "frozen" to the optimizer.
struct GradientBundle {
  std::map<std::string, Tensor> grads;

  bool contains(const std::string& name) const { return grads.count(name) != 0; }
  const Tensor& at(const std::string& name) const { return grads.at(name); }
  std::size_t size() const { return grads.size(); }

  void accumulate(const std::string& name, const Tensor& g) {
    auto it = grads.find(name);
    if (it == grads.end()) {
      grads.emplace(name, g);
    } else {
      it->second += g;
    }
  }

  void merge(const GradientBundle& other) {
    for (const auto& [name, g] : other.grads) accumulate(name, g);
  }

  void scale(double s) {
    for (auto& [_, g] : grads) g *= s;
  }
};

// Anything with visit(prefix, f(name, Tensor&)) is a parameter set.
template <typename P>
GradientBundle to_bundle(const P& grads, const std::string& prefix) {
  GradientBundle b;
  grads.visit(prefix, [&](const std::string& name, const Tensor& t) { b.grads.emplace(name, t); });
  return b;
}

template <typename P>
std::vector<std::pair<std::string, const Tensor*>> named_tensors(const P& params,
                                                                 const std::string& prefix) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  params.visit(prefix, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

template <typename P>
std::vector<std::pair<std::string, Tensor*>> named_tensors_mut(P& params,
                                                               const std::string& prefix) {
  std::vector<std::pair<std::string, Tensor*>> out;
  params.visit(prefix, [&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgd;
  double learning_rate = 1e-3;
  double momentum = 0.0;  // sgd only
  double beta1 = 0.9;     // adam only
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  std::map<std::string, Tensor> first;
  std::map<std::string, Tensor> second;
  std::uint64_t steps = 0;
};

// One first-order update over every parameter that has a gradient.
template <typename P>
void optimizer_step(P& params, const std::string& prefix, const GradientBundle& grads,
                    const OptimizerConfig& cfg, OptimizerState& state) {
  ++state.steps;
  const double t = static_cast<double>(state.steps);
  params.visit(prefix, [&](const std::string& name, Tensor& p) {
    auto it = grads.grads.find(name);
    if (it == grads.grads.end()) return;
    const Tensor& g = it->second;
    if (g.shape() != p.shape()) {
      throw DimensionError("optimizer: gradient for " + name + " has shape " +
                           shape_str(g.shape()) + ", parameter has " + shape_str(p.shape()));
    }
    switch (cfg.kind) {
      case OptimizerKind::kSgd: {
        if (cfg.momentum == 0.0) {
          for (std::size_t i = 0; i < p.size(); ++i) p[i] -= cfg.learning_rate * g[i];
          break;
        }
        auto [m, _] = state.first.try_emplace(name, p.shape());
        for (std::size_t i = 0; i < p.size(); ++i) {
          m->second[i] = cfg.momentum * m->second[i] + g[i];
          p[i] -= cfg.learning_rate * m->second[i];
        }
        break;
      }
      case OptimizerKind::kAdam: {
        auto [m, _a] = state.first.try_emplace(name, p.shape());
        auto [v, _b] = state.second.try_emplace(name, p.shape());
        const double c1 = 1.0 - std::pow(cfg.beta1, t);
        const double c2 = 1.0 - std::pow(cfg.beta2, t);
        for (std::size_t i = 0; i < p.size(); ++i) {
          m->second[i] = cfg.beta1 * m->second[i] + (1.0 - cfg.beta1) * g[i];
          v->second[i] = cfg.beta2 * v->second[i] + (1.0 - cfg.beta2) * g[i] * g[i];
          const double mh = m->second[i] / c1;
          const double vh = v->second[i] / c2;
          p[i] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.eps);
        }
        break;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
//
// Layout: one text header line
//   idvlm-checkpoint 1 <count> <name>:<d0>x<d1>... ...\n
// followed by the raw little-endian float64 values of every tensor in header
// order.

inline constexpr const char* kCheckpointMagic = "idvlm-checkpoint";
inline constexpr int kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void write_checkpoint(std::ostream& os, const NamedTensors& entries) {
  os << kCheckpointMagic << ' ' << kCheckpointVersion << ' ' << entries.size();
  for (const auto& [name, t] : entries) {
    if (name.find_first_of(" :\n") != std::string::npos) {
      throw ValidationError("checkpoint: parameter name '" + name + "' contains a separator");
    }
    os << ' ' << name << ':';
    for (std::size_t i = 0; i < t.shape().size(); ++i) {
      if (i) os << 'x';
      os << t.shape()[i];
    }
  }
  os << '\n';
  for (const auto& [name, t] : entries) {
    for (double v : t.values()) {
      std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      char bytes[8];
      std::memcpy(bytes, &bits, 8);
      os.write(bytes, 8);
    }
  }
  if (!os) throw IoError("checkpoint: write failed");
}

inline NamedTensors read_checkpoint(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw IoError("checkpoint: missing header line");
  std::istringstream hs(header);
  std::string magic;
  int version = 0;
  std::size_t count = 0;
  hs >> magic >> version >> count;
  if (magic != kCheckpointMagic || version != kCheckpointVersion) {
    throw IoError("checkpoint: unrecognized header '" + header.substr(0, 40) + "'");
  }
  NamedTensors out;
  std::string entry;
  for (std::size_t e = 0; e < count; ++e) {
    if (!(hs >> entry)) throw IoError("checkpoint: header lists fewer entries than declared");
    const auto colon = entry.rfind(':');
    if (colon == std::string::npos) throw IoError("checkpoint: malformed entry " + entry);
    Shape shape;
    std::istringstream dims(entry.substr(colon + 1));
    std::string dim;
    while (std::getline(dims, dim, 'x')) shape.push_back(std::stoul(dim));
    out.emplace_back(entry.substr(0, colon), Tensor(shape));
  }
  for (auto& [name, t] : out) {
    for (double& v : t.values()) {
      char bytes[8];
      if (!is.read(bytes, 8)) throw IoError("checkpoint: truncated data for " + name);
      std::uint64_t bits;
      std::memcpy(&bits, bytes, 8);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      v = std::bit_cast<double>(bits);
    }
  }
  return out;
}

template <typename P>
void append_params(NamedTensors& out, const P& params, const std::string& prefix) {
  params.visit(prefix, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, t); });
}

// Copies checkpoint tensors into `params`; every parameter must be present
// with a matching shape.
template <typename P>
void load_params(P& params, const std::string& prefix, const NamedTensors& entries) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : entries) by_name[name] = &t;
  params.visit(prefix, [&](const std::string& name, Tensor& t) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ValidationError("checkpoint: missing parameter " + name);
    if (it->second->shape() != t.shape()) {
      throw DimensionError("checkpoint: " + name + " has shape " +
                           shape_str(it->second->shape()) + ", expected " + shape_str(t.shape()));
    }
    t = *it->second;
  });
}

}  // namespace idvlm

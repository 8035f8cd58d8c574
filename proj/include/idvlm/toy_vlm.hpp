#pragma once

#include <cstdio>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "idvlm/id_former.hpp"
#include "idvlm/tiny_lm.hpp"
#include "idvlm/toy_world.hpp"

namespace idvlm {

// ---------------------------------------------------------------------------
// Placeholder substitution
// ---------------------------------------------------------------------------

struct ImageSpan {
  ImageRole role;
  std::size_t index;  // slot index, 0-based
  std::size_t begin;  // first row in the sequence
};

struct AssembledSequence {
  Tensor embeddings;        // (seq_len x d_model)
  std::vector<int> tokens;  // token id per row, -1 on image rows
  Mask mask;                // 1 on response rows
  std::vector<ImageSpan> images;
};

// Text rows come from the embedding table; each image slot expands to that
// image's n_queries encoding rows. With `with_response`, the response tokens
// follow the prompt and are marked in the mask.
inline AssembledSequence assemble_embeddings(const TinyLMParams& lm,
                                             std::span<const CompressedImage> id_outs,
                                             std::span<const CompressedImage> test_outs,
                                             const InterleavedSample& sample,
                                             bool with_response = true) {
  const std::size_t d = lm.tok_emb.cols();
  std::vector<const Tensor*> rows_src;
  AssembledSequence seq;
  std::size_t n_rows = 0;
  auto image_for = [&](const PromptSegment& seg) -> const Tensor& {
    const bool is_id = seg.kind == PromptSegment::Kind::kIdSlot;
    const auto outs = is_id ? id_outs : test_outs;
    if (seg.index >= outs.size()) {
      throw AssemblyError("assembly: no encoding for slot " +
                          (is_id ? id_placeholder(seg.index + 1) : test_placeholder(seg.index + 1)));
    }
    const Tensor& t = outs[seg.index].tokens;
    if (t.rank() != 2 || t.cols() != d) {
      throw DimensionError("assembly: image encoding " + shape_str(t.shape()) +
                           " does not match embedding width " + std::to_string(d));
    }
    return t;
  };
  for (const auto& seg : sample.prompt) {
    n_rows += seg.kind == PromptSegment::Kind::kText ? seg.tokens.size() : image_for(seg).rows();
  }
  if (with_response) n_rows += sample.response.size();
  if (n_rows == 0) throw AssemblyError("assembly: empty sequence");

  seq.embeddings = Tensor({n_rows, d});
  seq.tokens.reserve(n_rows);
  seq.mask.assign(n_rows, 0);
  std::size_t r = 0;
  auto put_token = [&](int id) {
    if (id < 0 || static_cast<std::size_t>(id) >= lm.tok_emb.rows()) {
      throw AssemblyError("assembly: token id " + std::to_string(id) + " outside the embedding table");
    }
    auto src = lm.tok_emb.row(static_cast<std::size_t>(id));
    std::copy(src.begin(), src.end(), seq.embeddings.row(r).begin());
    seq.tokens.push_back(id);
    ++r;
  };
  for (const auto& seg : sample.prompt) {
    if (seg.kind == PromptSegment::Kind::kText) {
      for (int id : seg.tokens) put_token(id);
      continue;
    }
    const Tensor& t = image_for(seg);
    const ImageRole role = seg.kind == PromptSegment::Kind::kIdSlot ? ImageRole::kId : ImageRole::kTest;
    seq.images.push_back({role, seg.index, r});
    for (std::size_t i = 0; i < t.rows(); ++i, ++r) {
      auto src = t.row(i);
      std::copy(src.begin(), src.end(), seq.embeddings.row(r).begin());
      seq.tokens.push_back(-1);
    }
  }
  if (with_response) {
    for (int id : sample.response) {
      seq.mask[r] = 1;
      put_token(id);
    }
  }
  return seq;
}

// Row t predicts row t+1; a row is supervised when its successor is a
// response token.
struct NextTokenTargets {
  std::vector<int> targets;
  Mask mask;
};

inline NextTokenTargets shift_targets(const AssembledSequence& seq) {
  const std::size_t n = seq.tokens.size();
  NextTokenTargets out{std::vector<int>(n, 0), Mask(n, 0)};
  for (std::size_t t = 0; t + 1 < n; ++t) {
    if (seq.tokens[t + 1] >= 0) out.targets[t] = seq.tokens[t + 1];
    out.mask[t] = seq.mask[t + 1];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Composed model
// ---------------------------------------------------------------------------

struct ToyModel {
  IDFormerConfig idf_cfg;
  LMConfig lm_cfg;
  IDFormerParams idf;
  TinyLMParams lm;

  // Parameter names are "idf.*" and "lm.*"; the prefix is not used.
  template <typename F>
  void visit(const std::string& /*prefix*/, F&& f) {
    idf.visit(kIdFormerPrefix, f);
    lm.visit(kLmPrefix, f);
  }
  template <typename F>
  void visit(const std::string& /*prefix*/, F&& f) const {
    idf.visit(kIdFormerPrefix, f);
    lm.visit(kLmPrefix, f);
  }
};

inline ToyModel init_toy_model(const IDFormerConfig& idf_cfg, const LMConfig& lm_cfg, std::uint64_t seed) {
  if (idf_cfg.d_model != lm_cfg.d_model) {
    throw ConfigError("toy model: id-former d_model " + std::to_string(idf_cfg.d_model) +
                      " differs from lm d_model " + std::to_string(lm_cfg.d_model));
  }
  return {idf_cfg, lm_cfg, init_params(idf_cfg, mix_seed(seed, 1)), init_lm_params(lm_cfg, mix_seed(seed, 2))};
}

inline NamedTensors toy_checkpoint_entries(const ToyModel& m) {
  NamedTensors out;
  append_params(out, m, "");
  return out;
}

struct SampleLoss {
  double loss = 0.0;
  GradientBundle grads;  // empty unless requested
};

inline SampleLoss sample_loss(const ToyModel& m, const InterleavedSample& sample, bool want_grad,
                              const BackwardOptions& opt = {}) {
  const auto id_feats = sample.id_features();
  IDFormerCache icache;
  const auto outs = forward(m.idf_cfg, m.idf, id_feats, sample.test_feats, want_grad ? &icache : nullptr);
  const std::span<const CompressedImage> all(outs);
  const AssembledSequence seq =
      assemble_embeddings(m.lm, all.first(id_feats.size()), all.subspan(id_feats.size()), sample);
  LMCache lcache;
  const Tensor logits = lm_forward(m.lm_cfg, m.lm, seq.embeddings, want_grad ? &lcache : nullptr);
  const NextTokenTargets tg = shift_targets(seq);
  const LossAndGrad lg = cross_entropy_with_grad(logits, tg.targets, tg.mask, want_grad);
  SampleLoss out{lg.loss, {}};
  if (!want_grad) return out;

  LMGradients lmg = lm_backward(m.lm_cfg, m.lm, lcache, lg.d_logits);
  for (std::size_t t = 0; t < seq.tokens.size(); ++t) {
    if (seq.tokens[t] < 0) continue;
    auto dst = lmg.params.tok_emb.row(static_cast<std::size_t>(seq.tokens[t]));
    auto src = lmg.d_input.row(t);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
  }
  std::vector<Tensor> upstream;
  upstream.reserve(outs.size());
  for (const auto& o : outs) upstream.emplace_back(o.tokens.shape());
  for (const auto& span : seq.images) {
    const std::size_t k = span.role == ImageRole::kId ? span.index : id_feats.size() + span.index;
    upstream[k] += slice_rows(lmg.d_input, span.begin, upstream[k].rows());
  }
  out.grads = backward(m.idf_cfg, m.idf, icache, upstream, opt);
  lmg.params.visit(kLmPrefix, [&](const std::string& name, Tensor& t) { out.grads.grads.emplace(name, std::move(t)); });
  return out;
}

// ---------------------------------------------------------------------------
// Dual-stage training
// ---------------------------------------------------------------------------

struct StageSchedule {
  double learning_rate = 3e-3;
  std::size_t epochs = 5;
  std::size_t batch_size = 16;
};

struct TrainSchedule {
  StageSchedule stage1{3e-3, 5, 16};
  StageSchedule stage2{1e-3, 5, 16};
  OptimizerKind optimizer = OptimizerKind::kAdam;
  bool run_stage1 = true;
  bool run_stage2 = true;

  void validate() const {
    for (const StageSchedule* s : {&stage1, &stage2}) {
      if (!(s->learning_rate >= 0.0) || !std::isfinite(s->learning_rate)) {
        throw ConfigError("schedule: learning rate must be finite and >= 0");
      }
      if (s->epochs < 1) throw ConfigError("schedule: epochs must be >= 1");
      if (s->batch_size < 1) throw ConfigError("schedule: batch size must be >= 1");
    }
    if (!run_stage1 && !run_stage2) throw ConfigError("schedule: both stages skipped");
  }

  static TrainSchedule from_kv(const KvConfig& kv) {
    TrainSchedule s;
    auto stage = [&](StageSchedule& st, const std::string& p) {
      st.learning_rate = kv.real_or(p + "_lr", st.learning_rate);
      const long long e = kv.integer_or(p + "_epochs", static_cast<long long>(st.epochs));
      const long long b = kv.integer_or(p + "_batch", static_cast<long long>(st.batch_size));
      if (e < 1 || b < 1) throw ConfigError("schedule: " + p + " epochs and batch must be >= 1");
      st.epochs = static_cast<std::size_t>(e);
      st.batch_size = static_cast<std::size_t>(b);
    };
    stage(s.stage1, "stage1");
    stage(s.stage2, "stage2");
    const std::string opt = kv.str_or("optimizer", "adam");
    if (opt == "adam") {
      s.optimizer = OptimizerKind::kAdam;
    } else if (opt == "sgd") {
      s.optimizer = OptimizerKind::kSgd;
    } else {
      throw ConfigError("schedule: optimizer must be adam or sgd, got " + opt);
    }
    s.validate();
    return s;
  }

  void write_kv(KvConfig& kv) const {
    for (auto [st, p] : {std::pair{&stage1, "stage1"}, std::pair{&stage2, "stage2"}}) {
      kv.set(std::string(p) + "_lr", WorldConfig::format_real(st->learning_rate));
      kv.set(std::string(p) + "_epochs", std::to_string(st->epochs));
      kv.set(std::string(p) + "_batch", std::to_string(st->batch_size));
    }
    kv.set("optimizer", optimizer == OptimizerKind::kAdam ? "adam" : "sgd");
  }
};

struct LossPoint {
  int stage = 1;
  std::size_t epoch = 0;  // 1-based
  double mean_loss = 0.0;
};

struct TrainResult {
  std::vector<LossPoint> curve;
};

inline std::string loss_curve_csv(const TrainResult& r) {
  std::string out = "stage,epoch,mean_loss\n";
  char buf[64];
  for (const auto& p : r.curve) {
    std::snprintf(buf, sizeof buf, "%d,%zu,%.17g\n", p.stage, p.epoch, p.mean_loss);
    out += buf;
  }
  return out;
}

using EpochCallback = std::function<void(const LossPoint&)>;

// Per stage: fresh optimizer state, seeded shuffle per epoch, mean gradient
// over each batch. The recorded loss of an epoch is the mean pre-update loss
// of its samples.
inline TrainResult train_dual_stage(ToyModel& m, std::span<const InterleavedSample> stage1,
                                    std::span<const InterleavedSample> stage2,
                                    const TrainSchedule& schedule, std::uint64_t seed,
                                    const EpochCallback& on_epoch = {},
                                    const BackwardOptions& opt = {}) {
  schedule.validate();
  if (schedule.run_stage1 && stage1.empty()) throw ConfigError("train: stage-1 dataset is empty");
  if (schedule.run_stage2 && stage2.empty()) throw ConfigError("train: stage-2 dataset is empty");
  TrainResult result;
  for (int stage : {1, 2}) {
    if ((stage == 1 && !schedule.run_stage1) || (stage == 2 && !schedule.run_stage2)) continue;
    const StageSchedule& st = stage == 1 ? schedule.stage1 : schedule.stage2;
    const auto data = stage == 1 ? stage1 : stage2;
    OptimizerConfig oc;
    oc.kind = schedule.optimizer;
    oc.learning_rate = st.learning_rate;
    OptimizerState state;
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t epoch = 1; epoch <= st.epochs; ++epoch) {
      Rng rng(mix_seed(seed, static_cast<std::uint64_t>(stage) * 1000003ULL + epoch));
      rng.shuffle(order);
      double epoch_loss = 0.0;
      for (std::size_t start = 0, batch = 0; start < order.size(); start += st.batch_size, ++batch) {
        const std::size_t end = std::min(order.size(), start + st.batch_size);
        GradientBundle acc;
        for (std::size_t i = start; i < end; ++i) {
          const std::string where =
              "stage " + std::to_string(stage) + ", epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch);
          SampleLoss sl;
          try {
            sl = sample_loss(m, data[order[i]], true, opt);
          } catch (const NumericError& e) {
            throw NumericError(std::string("train: ") + e.what() + " in " + where);
          }
          if (!std::isfinite(sl.loss)) throw NumericError("train: non-finite loss in " + where);
          epoch_loss += sl.loss;
          if (acc.size() == 0) {
            acc = std::move(sl.grads);
          } else {
            acc.merge(sl.grads);
          }
        }
        acc.scale(1.0 / static_cast<double>(end - start));
        optimizer_step(m, "", acc, oc, state);
      }
      LossPoint lp{stage, epoch, epoch_loss / static_cast<double>(data.size())};
      result.curve.push_back(lp);
      if (on_epoch) on_epoch(lp);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline constexpr std::size_t kMaxDecodeTokens = 16;

// Greedy continuation of the prompt; stops after <eot> (included) or the cap.
inline std::vector<int> greedy_decode(const ToyModel& m, const InterleavedSample& sample, int eot,
                                      std::size_t max_tokens = kMaxDecodeTokens) {
  const auto id_feats = sample.id_features();
  const auto outs = forward(m.idf_cfg, m.idf, id_feats, sample.test_feats);
  const std::span<const CompressedImage> all(outs);
  InterleavedSample work = sample;
  work.response.clear();
  std::vector<int> generated;
  AssembledSequence seq =
      assemble_embeddings(m.lm, all.first(id_feats.size()), all.subspan(id_feats.size()), work, false);
  Tensor x = seq.embeddings;
  while (generated.size() < max_tokens && x.rows() < m.lm_cfg.max_len) {
    const Tensor logits = lm_forward(m.lm_cfg, m.lm, x);
    auto last = logits.row(logits.rows() - 1);
    const int next = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
    generated.push_back(next);
    if (next == eot) break;
    Tensor grown({x.rows() + 1, x.cols()});
    std::copy(x.values().begin(), x.values().end(), grown.values().begin());
    auto src = m.lm.tok_emb.row(static_cast<std::size_t>(next));
    std::copy(src.begin(), src.end(), grown.row(x.rows()).begin());
    x = std::move(grown);
  }
  return generated;
}

struct TaskAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

struct ToyEvalReport {
  std::map<TaskKind, TaskAccuracy> per_task;

  bool has(TaskKind k) const { return per_task.count(k) != 0; }
  double accuracy(TaskKind k) const { return has(k) ? per_task.at(k).accuracy() : 0.0; }
};

// Exact match of the greedy continuation against the reference response.
inline ToyEvalReport evaluate_toy(const ToyModel& m, std::span<const InterleavedSample> heldout, int eot) {
  ToyEvalReport r;
  for (const auto& s : heldout) {
    TaskAccuracy& a = r.per_task[s.task];
    ++a.total;
    if (greedy_decode(m, s, eot) == s.response) ++a.correct;
  }
  return r;
}

}  // namespace idvlm

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "idvlm/checks.hpp"
#include "idvlm/toy_io.hpp"

using namespace idvlm;

namespace {

ToyConfig small_toy() {
  ToyConfig c;
  c.idf.d_model = c.lm.d_model = 16;
  c.idf.n_queries = 2;
  c.idf.n_heads = 2;
  c.lm.n_heads = 2;
  c.lm.n_layers = 1;
  c.lm.d_ff = 32;
  c.lm.max_len = 48;
  c.validate();
  return c;
}

std::vector<InterleavedSample> qa_data(const ToyConfig& c, std::size_t n, std::uint64_t seed, int stage = 2,
                                       bool heldout = false) {
  const SyntheticWorld w = SyntheticWorld::create(c.world, 11);
  DatasetOptions d;
  d.n_samples = n;
  d.seed = seed;
  d.stage = stage;
  d.heldout = heldout;
  return make_synthetic_dataset(w, Vocab::standard(), d);
}

std::vector<double> flat(const ToyModel& m) {
  std::vector<double> out;
  m.visit("", [&](const std::string&, const Tensor& t) { out.insert(out.end(), t.values().begin(), t.values().end()); });
  return out;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

std::vector<double> mean_patch(const Tensor& t) {
  std::vector<double> m(t.cols(), 0.0);
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[c] += t.row(r)[c] / static_cast<double>(t.rows());
  return m;
}

}  // namespace

TEST(Vocab, PlaceholdersAreSingleUniqueTokens) {
  const Vocab v = Vocab::standard();
  EXPECT_EQ(v.size(), kVocabSize);
  std::set<std::string> seen;
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_TRUE(seen.insert(v.token(static_cast<int>(i))).second);
  for (std::size_t i = 1; i <= 8; ++i) {
    const auto ids = v.encode(id_placeholder(i) + " " + test_placeholder(i));
    ASSERT_EQ(ids.size(), 2u);
    EXPECT_EQ(v.id_slot(ids[0]), i - 1);
    EXPECT_EQ(v.test_slot(ids[1]), i - 1);
  }
  EXPECT_EQ(v.names().size(), kNameTokens);
}

TEST(Vocab, EncodeDecodeRoundTrip) {
  const Vocab v = Vocab::standard();
  const std::string text = "Julia is <ID-Img1>. who is on the left in <Test-Img1>?";
  EXPECT_EQ(v.decode(v.encode(text)), "Julia is <ID-Img1>. who is on the left in <Test-Img1>?");
}

TEST(SynthEncode, DeterministicPerIdentityAndSeed) {
  const SyntheticWorld w = SyntheticWorld::create({}, 5);
  const auto a = synth_encode(w, 3, 77).patches;
  const auto b = synth_encode(w, 3, 77).patches;
  EXPECT_EQ(a.values(), b.values());
  EXPECT_EQ(a.rows(), 4u);
  EXPECT_EQ(a.cols(), 32u);
  EXPECT_THROW(synth_encode(w, 20, 1), Error);
  EXPECT_THROW(synth_encode(w, -1, 1), Error);
}

TEST(SynthEncode, SameIdentityIsCloserThanOtherIdentities) {
  const SyntheticWorld w = SyntheticWorld::create({}, 5);
  Rng rng(9);
  double same = 0.0, cross = 0.0;
  const int draws = 100;
  for (int i = 0; i < draws; ++i) {
    const int a = static_cast<int>(rng.below(20));
    int b = static_cast<int>(rng.below(19));
    if (b >= a) ++b;
    const auto pa = mean_patch(synth_encode(w, a, rng.next_u64()).patches);
    const auto pa2 = mean_patch(synth_encode(w, a, rng.next_u64()).patches);
    const auto pb = mean_patch(synth_encode(w, b, rng.next_u64()).patches);
    same += cosine(pa, pa2) / draws;
    cross += cosine(pa, pb) / draws;
  }
  EXPECT_GT(same, cross);
}

TEST(SynthEncode, ZeroPoseScaleDependsOnIdentityOnly) {
  WorldConfig cfg;
  cfg.pose_scale = 0.0;
  const SyntheticWorld w = SyntheticWorld::create(cfg, 5);
  EXPECT_EQ(synth_encode(w, 2, 1).patches.values(), synth_encode(w, 2, 999).patches.values());
}

TEST(SyntheticDataset, QaMixGivesOnlyQa) {
  const auto ds = qa_data(ToyConfig{}, 50, 3);
  for (const auto& s : ds) EXPECT_EQ(s.task, TaskKind::kQa);
}

TEST(SyntheticDataset, AllTasksSatisfyInvariants) {
  const SyntheticWorld w = SyntheticWorld::create({}, 2);
  DatasetOptions d;
  d.n_samples = 200;
  d.mix = TaskMix::parse("matching:1,location:1,qa:1,caption:1");
  std::set<TaskKind> kinds;
  for (const auto& s : make_synthetic_dataset(w, Vocab::standard(), d)) {
    EXPECT_NO_THROW(s.validate());
    kinds.insert(s.task);
  }
  EXPECT_EQ(kinds.size(), 4u);
}

TEST(SyntheticDataset, AnswerNamesAnIdentityInTheScene) {
  const auto ds = qa_data(ToyConfig{}, 300, 4);
  for (const auto& s : ds) {
    ASSERT_EQ(s.response.size(), 2u);
    std::size_t ref = s.id_refs.size();
    for (std::size_t i = 0; i < s.id_refs.size(); ++i)
      if (s.id_refs[i].name == s.response[0]) ref = i;
    ASSERT_LT(ref, s.id_refs.size());
    const int identity = s.trace.id_identities[ref];
    const auto& scene = s.trace.scenes[0];
    EXPECT_EQ(scene[static_cast<std::size_t>(s.trace.asked_slot)], identity);
  }
}

TEST(SyntheticDataset, HeldoutUsesUnseenIdentities) {
  const ToyConfig c;
  for (const auto& s : qa_data(c, 100, 5, 2, true))
    for (int id : s.trace.id_identities) EXPECT_GE(id, 15);
  for (const auto& s : qa_data(c, 100, 5, 2, false))
    for (int id : s.trace.id_identities) EXPECT_LT(id, 15);
}

TEST(SyntheticDataset, NegativeMixWeightIsConfigError) {
  EXPECT_THROW(TaskMix::parse("qa:-1"), ConfigError);
}

TEST(SyntheticDataset, GenerationIsDeterministic) {
  const ToyConfig c;
  EXPECT_EQ(interleaved_jsonl(qa_data(c, 20, 8)), interleaved_jsonl(qa_data(c, 20, 8)));
  EXPECT_NE(interleaved_jsonl(qa_data(c, 20, 8)), interleaved_jsonl(qa_data(c, 20, 9)));
}

TEST(Assembly, OneIdSlotSixTextTwoResponseIsTwelveRows) {
  ToyConfig c = small_toy();
  c.idf.n_queries = 4;
  const ToyModel m = init_toy_model(c.idf, c.lm, 1);
  InterleavedSample s;
  s.id_refs.push_back({10, {Tensor({3, c.idf.d_visual}, 0.5), ImageRole::kId, 0}});
  s.prompt = {PromptSegment::text({40, 41, 42}), PromptSegment::id_slot(0), PromptSegment::text({43, 44, 45})};
  s.response = {50, 0};
  const auto outs = forward(m.idf_cfg, m.idf, s.id_features(), {});
  const auto seq = assemble_embeddings(m.lm, outs, {}, s);
  EXPECT_EQ(seq.embeddings.rows(), 12u);
  EXPECT_EQ(seq.mask, (Mask{0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1}));
  for (std::size_t q = 0; q < 4; ++q) {
    EXPECT_EQ(seq.tokens[3 + q], -1);
    for (std::size_t d = 0; d < c.lm.d_model; ++d) EXPECT_EQ(seq.embeddings.row(3 + q)[d], outs[0].tokens.row(q)[d]);
  }
}

TEST(Assembly, TextOnlyIsEmbeddingLookup) {
  const ToyConfig c = small_toy();
  const ToyModel m = init_toy_model(c.idf, c.lm, 1);
  InterleavedSample s;
  s.prompt = {PromptSegment::text({5, 6})};
  s.response = {7};
  const auto seq = assemble_embeddings(m.lm, {}, {}, s);
  ASSERT_EQ(seq.embeddings.rows(), 3u);
  for (std::size_t r = 0; r < 3; ++r) {
    const auto want = m.lm.tok_emb.row(static_cast<std::size_t>(seq.tokens[r]));
    for (std::size_t d = 0; d < c.lm.d_model; ++d) EXPECT_EQ(seq.embeddings.row(r)[d], want[d]);
  }
}

TEST(Assembly, MissingSlotOutputIsNamed) {
  const ToyConfig c = small_toy();
  const ToyModel m = init_toy_model(c.idf, c.lm, 1);
  InterleavedSample s;
  s.prompt = {PromptSegment::test_slot(1)};
  s.response = {7};
  try {
    assemble_embeddings(m.lm, {}, {}, s);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("<Test-Img2>"), std::string::npos) << e.what();
  }
}

TEST(Assembly, SwappingIdImagesSwapsOnlyTheirRows) {
  const ToyConfig c = small_toy();
  const ToyModel m = init_toy_model(c.idf, c.lm, 2);
  auto s = qa_data(c, 1, 3).front();
  auto outs = forward(m.idf_cfg, m.idf, s.id_features(), s.test_feats);
  const std::size_t n_ids = s.id_refs.size();
  const std::span<const CompressedImage> all(outs);
  const auto a = assemble_embeddings(m.lm, all.first(n_ids), all.subspan(n_ids), s);
  std::swap(outs[0], outs[1]);
  const std::span<const CompressedImage> swapped(outs);
  const auto b = assemble_embeddings(m.lm, swapped.first(n_ids), swapped.subspan(n_ids), s);
  std::size_t begin0 = 0, begin1 = 0;
  for (const auto& span : a.images) {
    if (span.role == ImageRole::kId && span.index == 0) begin0 = span.begin;
    if (span.role == ImageRole::kId && span.index == 1) begin1 = span.begin;
  }
  const std::size_t nq = c.idf.n_queries;
  for (std::size_t r = 0; r < a.embeddings.rows(); ++r) {
    const bool in0 = r >= begin0 && r < begin0 + nq;
    const bool in1 = r >= begin1 && r < begin1 + nq;
    const std::size_t other = in0 ? begin1 + (r - begin0) : in1 ? begin0 + (r - begin1) : r;
    for (std::size_t d = 0; d < c.lm.d_model; ++d) EXPECT_EQ(b.embeddings.row(r)[d], a.embeddings.row(other)[d]);
  }
}

TEST(TinyLm, IsCausal) {
  const ToyConfig c = small_toy();
  const TinyLMParams p = init_lm_params(c.lm, 4);
  Rng rng(4);
  Tensor x({9, c.lm.d_model});
  for (double& v : x.values()) v = rng.normal();
  const Tensor base = lm_forward(c.lm, p, x);
  for (std::size_t t = 0; t + 1 < 9; ++t) {
    Tensor y = x;
    for (std::size_t r = t + 1; r < 9; ++r)
      for (double& v : y.row(r)) v += rng.normal();
    const Tensor out = lm_forward(c.lm, p, y);
    for (std::size_t r = 0; r <= t; ++r)
      for (std::size_t k = 0; k < c.lm.vocab_size; ++k) ASSERT_EQ(out.row(r)[k], base.row(r)[k]);
  }
}

TEST(TinyLm, SingleRowAndWidthMismatch) {
  const ToyConfig c = small_toy();
  const TinyLMParams p = init_lm_params(c.lm, 4);
  const Tensor out = lm_forward(c.lm, p, Tensor({1, c.lm.d_model}, 0.1));
  EXPECT_EQ(out.rows(), 1u);
  EXPECT_EQ(out.cols(), c.lm.vocab_size);
  EXPECT_THROW(lm_forward(c.lm, p, Tensor({2, c.lm.d_model + 1})), DimensionError);
}

TEST(GradCheck, LmAlone) {
  const auto r = check_lm_grads(small_toy().lm, {1e-4, {1e-6, 0, 0}, 3, ""});
  EXPECT_TRUE(r.passed) << r.max_rel_error << " at " << r.worst_param;
}

TEST(GradCheck, ComposedModel) {
  const ToyConfig c = small_toy();
  const auto r = check_toy_grads(c.idf, c.lm, c.world, {1e-4, {1e-6, 0, 0}, 3, ""});
  EXPECT_TRUE(r.passed) << r.max_rel_error << " at " << r.worst_param;
}

TEST(GradCheck, CorruptedParameterIsReported) {
  const ToyConfig c = small_toy();
  const auto r = check_toy_grads(c.idf, c.lm, c.world, {1e-4, {1e-6, 8, 0}, 3, "idf.attn2.wv.b"});
  EXPECT_FALSE(r.passed);
  EXPECT_EQ(r.worst_param, "idf.attn2.wv.b");
}

TEST(LossMasking, PromptTargetsDoNotAffectLoss) {
  const ToyConfig c = small_toy();
  const ToyModel m = init_toy_model(c.idf, c.lm, 6);
  const auto s = qa_data(c, 1, 6).front();
  const auto outs = forward(m.idf_cfg, m.idf, s.id_features(), s.test_feats);
  const std::span<const CompressedImage> all(outs);
  const auto seq = assemble_embeddings(m.lm, all.first(s.id_refs.size()), all.subspan(s.id_refs.size()), s);
  const Tensor logits = lm_forward(m.lm_cfg, m.lm, seq.embeddings);
  NextTokenTargets tg = shift_targets(seq);
  const double base = cross_entropy_with_grad(logits, tg.targets, tg.mask, false).loss;
  EXPECT_EQ(base, sample_loss(m, s, false).loss);
  Rng rng(6);
  for (std::size_t t = 0; t < tg.targets.size(); ++t)
    if (!tg.mask[t]) tg.targets[t] = static_cast<int>(rng.below(c.lm.vocab_size));
  EXPECT_EQ(cross_entropy_with_grad(logits, tg.targets, tg.mask, false).loss, base);
}

TEST(LossMasking, OnlyResponseTokensAreSupervised) {
  const ToyConfig c = small_toy();
  const ToyModel m = init_toy_model(c.idf, c.lm, 6);
  const auto s = qa_data(c, 1, 6).front();
  const auto outs = forward(m.idf_cfg, m.idf, s.id_features(), s.test_feats);
  const std::span<const CompressedImage> all(outs);
  const auto seq = assemble_embeddings(m.lm, all.first(s.id_refs.size()), all.subspan(s.id_refs.size()), s);
  const auto tg = shift_targets(seq);
  std::size_t supervised = 0;
  for (auto v : tg.mask) supervised += v;
  EXPECT_EQ(supervised, s.response.size());
}

TEST(Training, ZeroLearningRateKeepsParamsAndFlatCurve) {
  ToyConfig c = small_toy();
  c.schedule.stage1 = {0.0, 2, 8};
  c.schedule.stage2 = {0.0, 2, 8};
  ToyModel m = init_toy_model(c.idf, c.lm, 7);
  const auto before = flat(m);
  const auto d = qa_data(c, 24, 7);
  const auto r = train_dual_stage(m, d, d, c.schedule, 7);
  EXPECT_EQ(flat(m), before);
  ASSERT_EQ(r.curve.size(), 4u);
  for (const auto& p : r.curve) EXPECT_NEAR(p.mean_loss, r.curve.front().mean_loss, 1e-12);
}

TEST(Training, SameSeedGivesIdenticalCurvesAndParams) {
  ToyConfig c = small_toy();
  c.schedule.stage1 = {3e-3, 2, 8};
  c.schedule.stage2 = {1e-3, 2, 8};
  const auto d1 = qa_data(c, 32, 1, 1), d2 = qa_data(c, 32, 2);
  ToyModel a = init_toy_model(c.idf, c.lm, 8), b = init_toy_model(c.idf, c.lm, 8);
  const auto ra = train_dual_stage(a, d1, d2, c.schedule, 8);
  const auto rb = train_dual_stage(b, d1, d2, c.schedule, 8);
  EXPECT_EQ(loss_curve_csv(ra), loss_curve_csv(rb));
  EXPECT_EQ(checkpoint_bytes(a), checkpoint_bytes(b));
}

TEST(Training, LossDecreases) {
  ToyConfig c = small_toy();
  c.schedule.stage1 = {3e-3, 3, 8};
  c.schedule.stage2 = {1e-3, 3, 8};
  ToyModel m = init_toy_model(c.idf, c.lm, 9);
  const auto r = train_dual_stage(m, qa_data(c, 200, 1, 1), qa_data(c, 200, 2), c.schedule, 9);
  EXPECT_LT(r.curve.back().mean_loss, r.curve.front().mean_loss);
}

TEST(Training, SkippedStageRunsOnlyTheOther) {
  ToyConfig c = small_toy();
  c.schedule.stage1 = {3e-3, 2, 8};
  c.schedule.run_stage2 = false;
  ToyModel m = init_toy_model(c.idf, c.lm, 9);
  const auto r = train_dual_stage(m, qa_data(c, 16, 1, 1), {}, c.schedule, 9);
  ASSERT_EQ(r.curve.size(), 2u);
  for (const auto& p : r.curve) EXPECT_EQ(p.stage, 1);
}

TEST(Training, NonFiniteLossNamesEpochAndBatch) {
  ToyConfig c = small_toy();
  c.schedule.stage1 = {3e-3, 1, 4};
  ToyModel m = init_toy_model(c.idf, c.lm, 9);
  m.lm.head.bias[0] = std::nan("");
  const auto d = qa_data(c, 8, 1);
  try {
    train_dual_stage(m, d, d, c.schedule, 9);
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch 0"), std::string::npos) << msg;
  }
}

TEST(Training, OverfitsASingleSample) {
  ToyConfig c = small_toy();
  c.schedule.stage1 = {1e-2, 60, 1};
  c.schedule.run_stage2 = false;
  ToyModel m = init_toy_model(c.idf, c.lm, 10);
  const auto d = qa_data(c, 1, 10);
  train_dual_stage(m, d, {}, c.schedule, 10);
  const auto r = evaluate_toy(m, d, Vocab::standard().eot());
  EXPECT_EQ(r.accuracy(TaskKind::kQa), 1.0);
}

TEST(Evaluation, UntrainedModelIsNearChance) {
  const ToyConfig c;
  const ToyModel m = init_toy_model(c.idf, c.lm, 12);
  const auto r = evaluate_toy(m, qa_data(c, 200, 12, 2, true), Vocab::standard().eot());
  // Exact match needs the right name and then <eot>.
  EXPECT_LE(r.accuracy(TaskKind::kQa), 0.10);
}

TEST(ToyIo, InterleavedJsonlRoundTripsBitwise) {
  const ToyConfig c;
  const auto ds = qa_data(c, 10, 13);
  const auto text = interleaved_jsonl(ds);
  const auto back = parse_toy_data(text, c, "mem");
  EXPECT_EQ(back.converted, 0u);
  EXPECT_EQ(interleaved_jsonl(back.samples), text);
}

TEST(ToyIo, BadLineIsNamed) {
  try {
    parse_toy_data("{\"task\":\"qa\"}\n", ToyConfig{}, "data.jsonl");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("data.jsonl"), std::string::npos) << e.what();
  }
}

TEST(ToyIo, TuningSamplesConvert) {
  const ToyConfig c;
  forge::TuningSample t;
  t.id = "x";
  t.task = forge::TaskKind::kQa;
  t.source = "vcr";
  t.id_refs = {{"Julia", "img/a.jpg", BBox{0, 0, 40, 40}}};
  t.test_image_refs = {"img/a.jpg"};
  t.conversation = {{"user", "Julia is <ID-Img1>.\n<Test-Img1> who is on the left?"}, {"assistant", "Julia"}};
  const auto d = parse_toy_data(forge::samples_jsonl(std::span(&t, 1)), c, "mem");
  ASSERT_EQ(d.samples.size(), 1u);
  EXPECT_EQ(d.converted, 1u);
  const Vocab v = Vocab::standard();
  const auto& s = d.samples[0];
  EXPECT_EQ(s.response, (std::vector<int>{v.lookup("Julia"), v.eot()}));
  EXPECT_EQ(s.id_refs[0].name, v.lookup("Julia"));
  std::size_t slots = 0;
  for (const auto& seg : s.prompt) slots += seg.kind != PromptSegment::Kind::kText;
  EXPECT_EQ(slots, 2u);
}

TEST(ToyIo, OverlongSamplesAreCountedNotKept) {
  ToyConfig c = small_toy();
  c.lm.max_len = 10;
  const auto d = parse_toy_data(interleaved_jsonl(qa_data(ToyConfig{}, 5, 1)), c, "mem");
  EXPECT_EQ(d.samples.size(), 0u);
  EXPECT_EQ(d.too_long, 5u);
}

TEST(ToyIo, CheckpointRoundTripWithSidecars) {
  const ToyConfig c = small_toy();
  const ToyModel m = init_toy_model(c.idf, c.lm, 14);
  const auto dir = std::filesystem::temp_directory_path() / "idvlm_ckpt_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "model.ckpt").string();
  save_toy_checkpoint(path, m, c);
  const auto loaded = load_toy_checkpoint(path);
  EXPECT_EQ(checkpoint_bytes(loaded.model), checkpoint_bytes(m));
  EXPECT_EQ(KvConfig::load(idformer_cfg_path(path)).entries().size(), 6u);
  EXPECT_EQ(loaded.cfg.to_kv().to_string(), c.to_kv().to_string());
  std::filesystem::remove_all(dir);
}

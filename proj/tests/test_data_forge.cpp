#include <gtest/gtest.h>

#include "idvlm/data_forge.hpp"

using namespace idvlm;
using namespace idvlm::forge;

namespace {

std::vector<GroundedRecord> corpus(std::size_t n = 300, std::uint64_t seed = 7) {
  CorpusOptions o;
  o.n_records = n;
  o.seed = seed;
  return make_synthetic_corpus(o);
}

GroundedRecord two_person_qa() {
  GroundedRecord r;
  r.id = "r1";
  r.kind = RecordKind::kQa;
  r.image_ref = "img/r1.jpg";
  r.width = 640;
  r.height = 480;
  r.regions = {{{10, 10, 200, 300}, "person"}, {{300, 20, 500, 400}, "person"}, {{50, 350, 150, 450}, "chair"}};
  r.mentions = {{"p1", 0}, {"p2", 1}, {"c", 2}};
  r.question = "Why is [p1] looking at [p2]?";
  r.answer = "[p1] wants the [c] that [p2] holds.";
  return r;
}

std::vector<std::string> ordered_replies(std::size_t n, const std::string& text) {
  return std::vector<std::string>(n, text);
}

std::size_t count_kind(const std::vector<TuningSample>& s, TaskKind k) {
  return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [&](const TuningSample& x) { return x.task == k; }));
}

}  // namespace

TEST(Records, JsonRoundTripAndValidation) {
  const auto rs = corpus(40);
  const auto back = parse_records(records_jsonl(rs));
  ASSERT_EQ(back.size(), rs.size());
  for (std::size_t i = 0; i < rs.size(); ++i) EXPECT_EQ(to_json(back[i]), to_json(rs[i]));
  EXPECT_THROW(parse_records("{\"id\":\"x\"}\n", "r.jsonl"), ValidationError);
  GroundedRecord bad = two_person_qa();
  bad.regions[0].bbox = {600, 0, 700, 10};
  EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(Filter, SinglePersonAndTinyCropsAreDropped) {
  GroundedRecord r = two_person_qa();
  EXPECT_TRUE(filter_record(r).keep);
  r.regions.erase(r.regions.begin() + 1);
  const auto d = filter_record(r);
  EXPECT_FALSE(d.keep);
  EXPECT_EQ(d.reason, kDropSinglePerson);
  GroundedRecord t = two_person_qa();
  t.regions[1].bbox = {300, 20, 310, 30};
  EXPECT_EQ(filter_record(t).reason, kDropCropTooSmall);
}

TEST(Filter, PolicyFromKeyValues) {
  const auto p = CropPolicy::from_kv(KvConfig::parse("min_side = 64\nmin_area_fraction = 0.05\n"));
  EXPECT_EQ(p.min_side, 64);
  EXPECT_DOUBLE_EQ(p.min_area_fraction, 0.05);
  EXPECT_THROW(CropPolicy::from_kv(KvConfig::parse("min_sides = 64\n")), ConfigError);
  EXPECT_THROW(CropPolicy::from_kv(KvConfig::parse("min_area_fraction = 1.5\n")), ConfigError);
  EXPECT_THROW(CropPolicy::from_kv(KvConfig::parse("min_side = 0\n")), ConfigError);
}

TEST(Stage1, QaSampleNamesEveryPerson) {
  const NamePool pool;
  const auto s = build_stage1_qa(two_person_qa(), pool);
  ASSERT_EQ(s.id_refs.size(), 2u);
  EXPECT_NO_THROW(s.validate());
  EXPECT_FALSE(name_linkage_violation(s, known_names(pool)));
  const std::string& user = s.conversation[0].text;
  EXPECT_EQ(user.rfind(s.id_refs[0].name + " is <ID-Img1>. " + s.id_refs[1].name + " is <ID-Img2>.", 0), 0u) << user;
  EXPECT_NE(s.conversation[1].text.find("the chair"), std::string::npos);
  ASSERT_TRUE(s.id_refs[0].crop);
  EXPECT_EQ(*s.id_refs[0].crop, BBox({10, 10, 200, 300}));
}

TEST(Stage1, UnlinkedMentionIsBuildError) {
  GroundedRecord r = two_person_qa();
  r.question = "Where is [ghost]?";
  EXPECT_THROW(build_stage1_qa(r, NamePool()), BuildError);
}

TEST(Stage1, LinkageAuditCatchesUnreferencedNames) {
  const NamePool pool;
  TuningSample s = build_stage1_qa(two_person_qa(), pool);
  std::string stranger;
  for (const auto& n : pool.names()) {
    if (n != s.id_refs[0].name && n != s.id_refs[1].name) {
      stranger = n;
      break;
    }
  }
  s.conversation[1].text += " " + stranger + " agrees.";
  EXPECT_EQ(name_linkage_violation(s, known_names(pool)), stranger);
  TuningSample t = build_stage1_qa(two_person_qa(), pool);
  const std::string dropped = t.id_refs[1].name;
  t.conversation = {{"user", t.id_refs[0].name + " is <ID-Img1>. What now?"}, {"assistant", "Nothing."}};
  EXPECT_EQ(name_linkage_violation(t, known_names(pool)), dropped);
}

TEST(Stage1, CorpusHasNoInvariantViolations) {
  const auto rs = corpus();
  const NamePool pool;
  const auto out = forge_stage1(rs, pool, CropPolicy{}, 3);
  ASSERT_FALSE(out.samples.empty());
  const auto names = known_names(pool);
  for (const auto& s : out.samples) {
    EXPECT_NO_THROW(s.validate());
    EXPECT_FALSE(name_linkage_violation(s, names)) << s.id;
    EXPECT_GE(s.id_refs.size(), 2u) << s.id;
    EXPECT_EQ(s.stage, 1);
  }
  EXPECT_TRUE(out.report.reconciles());
  EXPECT_EQ(out.report.input(), rs.size());
  const auto reasons = out.report.drop_reasons();
  EXPECT_GT(reasons.at(kDropSinglePerson), 0u);
  EXPECT_GT(reasons.at(kDropNotStage1), 0u);
  EXPECT_EQ(reasons.count(kDropNameLinkage), 0u);
  EXPECT_EQ(reasons.count(kDropInvalidSample), 0u);
}

TEST(Stage1, EverySinglePersonRecordIsDroppedWithReason) {
  const auto rs = corpus();
  std::size_t singles = 0;
  for (const auto& r : rs) {
    if (r.kind != RecordKind::kMovieShot && r.person_regions().size() == 1) ++singles;
  }
  ASSERT_GT(singles, 0u);
  const auto out = forge_stage1(rs, NamePool(), CropPolicy{}, 3);
  EXPECT_EQ(out.report.drop_reasons().at(kDropSinglePerson), singles);
}

TEST(Stage1, DeterministicPerSeed) {
  const auto rs = corpus(120);
  const auto a = forge_stage1(rs, NamePool(), CropPolicy{}, 5);
  const auto b = forge_stage1(rs, NamePool(), CropPolicy{}, 5);
  EXPECT_EQ(samples_jsonl(a.samples), samples_jsonl(b.samples));
  EXPECT_EQ(a.report.text(), b.report.text());
}

TEST(Stage1, ReportTextAndJsonReconcile) {
  const auto out = forge_stage1(corpus(100), NamePool(), CropPolicy{}, 1);
  const Json j = out.report.json();
  EXPECT_TRUE(j["reconciles"].get<bool>());
  EXPECT_EQ(j["input"].get<std::size_t>(), j["emitted"].get<std::size_t>() + j["dropped"].get<std::size_t>());
  EXPECT_NE(out.report.text().find("total"), std::string::npos);
}

TEST(Samples, JsonRoundTrip) {
  const auto out = forge_stage1(corpus(60), NamePool(), CropPolicy{}, 2);
  const auto back = parse_samples(samples_jsonl(out.samples));
  EXPECT_EQ(samples_jsonl(back), samples_jsonl(out.samples));
}

TEST(Stage2, PartitionSplitsByCharacterCount) {
  const auto rs = corpus();
  std::size_t shots = 0;
  for (const auto& r : rs) shots += r.kind == RecordKind::kMovieShot;
  std::size_t seen = 0;
  for (const auto& m : partition_by_movie(rs)) {
    for (const auto& [name, images] : m.id_pool) {
      for (const auto& s : images) {
        ASSERT_EQ(s.regions.size(), 1u);
        EXPECT_EQ(s.regions[0].label, name);
        EXPECT_EQ(s.movie_id, m.movie_id);
      }
      seen += images.size();
    }
    for (const auto& s : m.test_pool) EXPECT_GE(s.regions.size(), 2u);
    seen += m.test_pool.size() + m.discarded.size();
  }
  EXPECT_EQ(seen, shots);
}

TEST(Stage2, MixedMoviesInOnePartitionAreRejected) {
  auto rs = corpus();
  std::vector<GroundedRecord> shots;
  for (const auto& r : rs) {
    if (r.kind == RecordKind::kMovieShot) shots.push_back(r);
  }
  EXPECT_THROW(partition_shots(shots), ValidationError);
}

TEST(Stage2, MatchingHasExactlyOnePositive) {
  Stage2Options opt;
  opt.kinds = {Stage2Kind::kMatching};
  const auto out = forge_stage2(corpus(), opt, nullptr);
  ASSERT_FALSE(out.samples.empty());
  for (const auto& s : out.samples) {
    EXPECT_FALSE(matching_violation(s)) << s.id << ": " << *matching_violation(s);
    EXPECT_EQ(s.test_image_refs.size(), 4u);
    EXPECT_EQ(std::set<std::string>(s.option_labels.begin(), s.option_labels.end()).size(), 4u);
  }
  EXPECT_TRUE(out.report.reconciles());
}

TEST(Stage2, MatchingViolationIsDetected) {
  Stage2Options opt;
  opt.kinds = {Stage2Kind::kMatching};
  auto s = forge_stage2(corpus(), opt, nullptr).samples.at(0);
  auto twice = s;
  twice.option_labels[(std::find(s.option_labels.begin(), s.option_labels.end(), s.id_refs[0].name) -
                       s.option_labels.begin() + 1) % 4] = s.id_refs[0].name;
  EXPECT_TRUE(matching_violation(twice));
  auto wrong = s;
  wrong.conversation.back().text = wrong.conversation.back().text == "A" ? "B" : "A";
  EXPECT_TRUE(matching_violation(wrong));
}

TEST(Stage2, GeneratedKindsNeedAGateway) {
  Stage2Options opt;
  opt.kinds = {Stage2Kind::kQaSingle};
  EXPECT_THROW(forge_stage2(corpus(), opt, nullptr), ConfigError);
}

TEST(Stage2, RejectionsAreCountedNotEmitted) {
  const auto rs = corpus();
  Stage2Options opt;
  opt.kinds = {Stage2Kind::kCaptionSingle};
  const std::size_t n = planned_generator_requests(rs, opt).size();
  ASSERT_GE(n, 4u);
  std::vector<std::string> replies = ordered_replies(n, "The scene is calm.");
  replies[0] = "No.";
  replies[1] = "'no'";
  auto gw = mock_gateway(MockScript::ordered_responses(replies));
  const auto out = forge_stage2(rs, opt, gw.get());
  const auto& row = out.report.rows.at(0);
  EXPECT_EQ(row.dropped.at(kRejectInappropriate), 2u);
  EXPECT_TRUE(out.report.reconciles());
  for (const auto& s : out.samples) EXPECT_EQ(s.conversation.back().text, "The scene is calm.");
}

TEST(Stage2, QaResponsesAreSplitOrRejected) {
  EXPECT_EQ(split_qa("Who waits?\nBoth of them.")->answer, "Both of them.");
  EXPECT_EQ(split_qa("Who waits?\\nBoth of them.")->question, "Who waits?");
  EXPECT_FALSE(split_qa("Just one line."));
  EXPECT_FALSE(split_qa("Question?\n   "));
  EXPECT_TRUE(is_rejection(" No. "));
  EXPECT_FALSE(is_rejection("Not at all, they talk."));

  const auto rs = corpus();
  Stage2Options opt;
  opt.kinds = {Stage2Kind::kQaMulti};
  const std::size_t n = planned_generator_requests(rs, opt).size();
  ASSERT_GE(n, 2u);
  std::vector<std::string> replies = ordered_replies(n, "What happens?\nThey talk.");
  replies[0] = "no newline here";
  auto gw = mock_gateway(MockScript::ordered_responses(replies));
  const auto out = forge_stage2(rs, opt, gw.get());
  EXPECT_EQ(out.report.rows.at(0).dropped.at(kRejectUnparseableQa), 1u);
  for (const auto& s : out.samples) {
    EXPECT_EQ(s.test_image_refs.size(), 2u);
    EXPECT_NE(s.conversation[0].text.find("What happens?"), std::string::npos);
    EXPECT_NO_THROW(s.validate());
  }
}

TEST(Stage2, GeneratorRequestLayout) {
  GroundedRecord a;
  a.id = "s1";
  a.kind = RecordKind::kMovieShot;
  a.movie_id = "m";
  a.image_ref = "m/s1.jpg";
  a.width = 640;
  a.height = 480;
  a.regions = {{{1, 2, 3, 4}, "Ann"}, {{5, 6, 7, 8}, "Bob"}};
  const auto single = render_generator_request(Stage2Kind::kCaptionSingle, std::span(&a, 1));
  EXPECT_EQ(single.system, prompts::kGenCaptionSingle);
  ASSERT_EQ(single.parts.size(), 2u);
  EXPECT_EQ(single.parts[0].value, "m/s1.jpg");
  EXPECT_EQ(single.parts[1].value, "image size: (640, 480)\nAnn: (1, 2, 3, 4)\nBob: (5, 6, 7, 8)");
  GroundedRecord b = a;
  b.id = "s2";
  b.image_ref = "m/s2.jpg";
  const std::vector<GroundedRecord> both = {a, b};
  const auto multi = render_generator_request(Stage2Kind::kQaMulti, both);
  EXPECT_EQ(multi.system, prompts::kGenQaMulti);
  ASSERT_EQ(multi.parts.size(), 7u);
  EXPECT_EQ(multi.parts[4].value, "Image 2:");
  EXPECT_EQ(multi.parts[5].value, "m/s2.jpg");
}

TEST(Stage2, LocationAnswersUseRefBoxGrammar) {
  Stage2Options opt;
  opt.kinds = {Stage2Kind::kLocation};
  const auto out = forge_stage2(corpus(), opt, nullptr);
  ASSERT_FALSE(out.samples.empty());
  for (const auto& s : out.samples) {
    EXPECT_TRUE(parse_bbox(s.conversation.back().text, BoxGrammar::kRefBox)) << s.conversation.back().text;
  }
}

TEST(Stage2, KindListParsing) {
  EXPECT_EQ(parse_stage2_kinds("all").size(), 6u);
  EXPECT_EQ(parse_stage2_kinds("location,matching,location"),
            (std::vector<Stage2Kind>{Stage2Kind::kMatching, Stage2Kind::kLocation}));
  EXPECT_THROW(parse_stage2_kinds("qa"), ConfigError);
  EXPECT_THROW(parse_stage2_kinds(","), ConfigError);
}

TEST(Mix, GeneralFractionOfFinalMixture) {
  EXPECT_EQ(general_count(900, 0.10), 100u);
  std::vector<TuningSample> ids(900);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i].id = "id" + std::to_string(i);
  const auto general = make_general_samples(150, 1);
  const auto out = mix_general(ids, general, {0.10, 4});
  ASSERT_EQ(out.size(), 1000u);
  const auto n_general = std::count_if(out.begin(), out.end(), [](const TuningSample& s) { return s.source == "general"; });
  EXPECT_EQ(n_general, 100);
}

TEST(Mix, ZeroFractionPassesThrough) {
  std::vector<TuningSample> ids(10);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i].id = "id" + std::to_string(i);
  const auto out = mix_general(ids, {}, {0.0, 4});
  EXPECT_EQ(out.size(), 10u);
}

TEST(Mix, InsufficientPoolIsValidationError) {
  std::vector<TuningSample> ids(900);
  const auto general = make_general_samples(99, 1);
  EXPECT_THROW(mix_general(ids, general, {0.10, 4}), ValidationError);
  EXPECT_THROW(mix_general(ids, general, {1.0, 4}), ConfigError);
}

TEST(Mix, DeterministicPerSeed) {
  const auto rs = corpus(200);
  const auto id = forge_stage1(rs, NamePool(), CropPolicy{}, 1).samples;
  const auto general = make_general_samples(50, 2);
  EXPECT_EQ(samples_jsonl(mix_general(id, general, {0.1, 9})), samples_jsonl(mix_general(id, general, {0.1, 9})));
  EXPECT_NE(samples_jsonl(mix_general(id, general, {0.1, 9})), samples_jsonl(mix_general(id, general, {0.1, 10})));
  EXPECT_EQ(count_kind(mix_general(id, general, {0.1, 9}), TaskKind::kLocation), count_kind(id, TaskKind::kLocation));
}

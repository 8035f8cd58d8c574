#include <gtest/gtest.h>

#include "idvlm/bench.hpp"

using namespace idvlm;
using namespace idvlm::bench;

namespace {

std::string fixture(const std::string& name) { return read_text_file(std::string(IDVLM_DATA_DIR) + "/" + name); }

BenchSample matching(const std::string& id, const std::string& answer) {
  BenchSample s;
  s.id = id;
  s.task = TaskKind::kMatching;
  s.id_refs = {{"Julia", "id/julia.jpg"}};
  s.test_image_refs = {"t/a.jpg", "t/b.jpg", "t/c.jpg", "t/d.jpg"};
  s.question = "Which image shows Julia? Answer with the option letter.";
  s.answer = answer;
  return s;
}

BenchSample location(const std::string& id, BBox box) {
  BenchSample s;
  s.id = id;
  s.task = TaskKind::kLocation;
  s.id_refs = {{"Tom", "id/tom.jpg"}};
  s.test_image_refs = {"t/scene.jpg"};
  s.question = "Where is Tom in the image?";
  s.box = box;
  s.width = 640;
  s.height = 480;
  return s;
}

BenchSample open_ended(const std::string& id, TaskKind k, const std::string& answer) {
  BenchSample s;
  s.id = id;
  s.task = k;
  s.id_refs = {{"Julia", "id/julia.jpg"}, {"Tom", "id/tom.jpg"}};
  s.test_image_refs = {"t/scene.jpg"};
  s.question = k == TaskKind::kQa ? "What is Julia doing?" : "Describe the image.";
  s.answer = answer;
  return s;
}

std::vector<BenchSample> mixed_bench() {
  return {matching("m1", "B"), matching("m2", "D"), location("l1", {0, 0, 100, 100}),
          open_ended("q1", TaskKind::kQa, "Julia is reading."), open_ended("c1", TaskKind::kCaption, "Julia and Tom talk.")};
}

}  // namespace

TEST(Prompts, ConstantsMatchStoredFixtures) {
  const std::vector<std::pair<std::string, std::string_view>> all = {
      {"gen_caption_single", prompts::kGenCaptionSingle}, {"gen_caption_multi", prompts::kGenCaptionMulti},
      {"gen_qa_single", prompts::kGenQaSingle},           {"gen_qa_multi", prompts::kGenQaMulti},
      {"judge_absolute", prompts::kJudgeAbsolute},        {"judge_relative", prompts::kJudgeRelative},
      {"model_generic", prompts::kModelGeneric},          {"model_location_bracket", prompts::kModelLocationBracket},
      {"model_location_refbox", prompts::kModelLocationRefBox}};
  for (const auto& [name, text] : all) {
    EXPECT_EQ(fixture("prompts/" + name + ".txt"), std::string(text) + "\n") << name;
  }
}

TEST(Prompts, SpotAnchors) {
  EXPECT_NE(prompts::kGenQaSingle.find("split by '\\n'"), std::string_view::npos);
  EXPECT_NE(prompts::kJudgeAbsolute.find("a scale of 1 to 10"), std::string_view::npos);
  EXPECT_NE(prompts::kJudgeRelative.find("a scale of 1 to 10"), std::string_view::npos);
  EXPECT_NE(prompts::kModelLocationBracket.find("bbox: [x1, y1, x2, y2]"), std::string_view::npos);
}

TEST(Prompts, JudgeRequestsEmbedFixturesVerbatim) {
  const auto abs = judge_absolute_request("q", "gt", "p");
  EXPECT_EQ(abs.system, prompts::kJudgeAbsolute);
  EXPECT_EQ(abs.temperature, 0.0);
  EXPECT_EQ(abs.parts.at(0).value, "question: q\nprediction: p\nGT: gt");
  const auto rel = judge_relative_request("q", "gt", "p1", "p2");
  EXPECT_EQ(rel.system, prompts::kJudgeRelative);
  EXPECT_EQ(rel.parts.at(0).value, "question: q\nGT: gt\nprediction 1: p1\nprediction 2: p2");
}

TEST(RenderPrompt, InterleavesNamesImagesAndQuestion) {
  const auto r = render_prompt(matching("m", "A"), ModelProfile::generic());
  EXPECT_EQ(r.system, prompts::kModelGeneric);
  ASSERT_EQ(r.parts.size(), 7u);
  EXPECT_EQ(r.parts[0], ChatPart::text("Julia is "));
  EXPECT_EQ(r.parts[1], ChatPart::image("id/julia.jpg"));
  EXPECT_EQ(r.parts[2], ChatPart::image("t/a.jpg"));
  EXPECT_EQ(r.parts[6].value, "Which image shows Julia? Answer with the option letter.");
}

TEST(RenderPrompt, LocationUsesTheProfileGrammar) {
  EXPECT_EQ(render_prompt(location("l", {0, 0, 5, 5}), ModelProfile::generic()).system,
            prompts::kModelLocationBracket);
  EXPECT_EQ(render_prompt(location("l", {0, 0, 5, 5}), ModelProfile::ref_box()).system,
            prompts::kModelLocationRefBox);
  ModelProfile none;
  EXPECT_THROW(render_prompt(location("l", {0, 0, 5, 5}), none), ConfigError);
  EXPECT_NO_THROW(render_prompt(matching("m", "A"), none));
}

TEST(Profile, KeyValueFile) {
  const auto p = ModelProfile::from_kv(KvConfig::parse("name = x\nbbox_grammar = ref_box_form\n"));
  EXPECT_EQ(p.name, "x");
  EXPECT_EQ(p.grammar, BoxGrammar::kRefBox);
  EXPECT_EQ(p.system, prompts::kModelGeneric);
  EXPECT_FALSE(ModelProfile::from_kv(KvConfig::parse("name = y\n")).grammar);
  EXPECT_THROW(ModelProfile::from_kv(KvConfig::parse("bbox_grammar = polygon\n")), ConfigError);
}

TEST(ParseOption, FirstStandaloneLetter) {
  EXPECT_EQ(parse_option("B"), 'B');
  EXPECT_EQ(parse_option("The answer is C."), 'C');
  EXPECT_EQ(parse_option("Option (d) matches"), 'D');
  EXPECT_EQ(parse_option("b) the second"), 'B');
  EXPECT_EQ(parse_option("A and then B"), 'A');
  EXPECT_FALSE(parse_option("none of these"));
  EXPECT_FALSE(parse_option("Image E"));
  EXPECT_FALSE(parse_option(""));
  EXPECT_FALSE(parse_option("ABCD"));
}

TEST(Verdicts, AbsoluteAndRelativeParsing) {
  EXPECT_EQ(parse_verdict("8\nclose enough", 1).scores, (std::vector<int>{8}));
  EXPECT_EQ(parse_verdict("8\nclose enough", 1).explanation, "close enough");
  EXPECT_EQ(parse_verdict("7 9\nwhy", 2).scores, (std::vector<int>{7, 9}));
  EXPECT_TRUE(parse_verdict("10", 1).valid);
  for (const char* bad : {"great job", "11", "0", "7,9", "7 9 10", "", "8/10", "-3", " \n8"}) {
    EXPECT_FALSE(parse_verdict(bad, bad == std::string("7,9") || bad == std::string("7 9 10") ? 2 : 1).valid) << bad;
  }
  EXPECT_FALSE(parse_verdict("8", 2).valid);
}

TEST(Scoring, RelativeRatioArithmetic) {
  const std::vector<std::pair<int, int>> pairs = {{8, 10}, {6, 8}};
  EXPECT_NEAR(relative_ratio(pairs), 7.0 / 9.0, 1e-12);
  const std::vector<std::pair<int, int>> self = {{3, 3}, {9, 9}};
  EXPECT_EQ(relative_ratio(self), 1.0);
  EXPECT_THROW(relative_ratio({}), ValidationError);
}

TEST(Scoring, LocationRateIsStrict) {
  std::vector<DetailRow> rows(4);
  for (auto& r : rows) {
    r.task = TaskKind::kLocation;
    r.parsed = true;
  }
  rows[0].iou = 0.5;
  rows[1].iou = 0.5000001;
  rows[2].iou = 0.9;
  rows[3].iou = 0.0;
  EXPECT_EQ(location_rate(rows), 0.5);
  // Two 10x10 boxes overlapping on 2/3 of their width: IoU exactly 0.5.
  EXPECT_EQ(iou({0, 0, 30, 10}, {10, 0, 40, 10}), 0.5);
  EXPECT_THROW(location_rate({}), ValidationError);
}

TEST(Scoring, ScriptedJudgeGivesDeterministicReport) {
  const auto samples = mixed_bench();
  const std::map<std::string, std::string> responses = {
      {"m1", "B"}, {"m2", "I think A"}, {"l1", "bbox: [0, 0, 100, 90]"}, {"q1", "She reads."}, {"c1", "Two people."}};
  auto run = [&] {
    auto judge = mock_gateway(MockScript::ordered_responses({"8\nok", "great job"}));
    return score_responses(samples, responses, ModelProfile::generic(), judge.get(), "toy");
  };
  const MetricsReport rep = run();
  EXPECT_EQ(rep.tasks.at(TaskKind::kMatching).value, 0.5);
  EXPECT_EQ(rep.tasks.at(TaskKind::kLocation).value, 1.0);
  EXPECT_EQ(rep.tasks.at(TaskKind::kQa).value, 8.0);
  EXPECT_EQ(rep.tasks.at(TaskKind::kCaption).valid, 0u);
  EXPECT_EQ(rep.tasks.at(TaskKind::kCaption).invalid, 1u);
  EXPECT_EQ(report_json(run()).dump(), report_json(rep).dump());
  EXPECT_NE(report_text(rep).find("Caption invalid verdicts: 1"), std::string::npos) << report_text(rep);
}

TEST(Scoring, MissingResponsesAreMisses) {
  const auto rep = score_responses(std::vector<BenchSample>{matching("m1", "A")}, {}, ModelProfile::generic(),
                                   nullptr, "empty");
  EXPECT_EQ(rep.tasks.at(TaskKind::kMatching).value, 0.0);
  EXPECT_EQ(rep.tasks.at(TaskKind::kMatching).invalid, 1u);
}

TEST(Scoring, JudgedTasksNeedAJudge) {
  EXPECT_THROW(score_responses(mixed_bench(), {}, ModelProfile::generic(), nullptr, "x"), ConfigError);
}

TEST(Scoring, AbsentTasksStayAbsent) {
  const auto rep = aggregate_report({}, "none");
  EXPECT_FALSE(rep.has(TaskKind::kMatching));
  EXPECT_NE(report_text(rep).find("-"), std::string::npos);
}

TEST(Scoring, ReportIsAPureFunctionOfRows) {
  auto judge = mock_gateway(MockScript::ordered_responses({"6\na", "9\nb"}));
  const auto rep = score_responses(mixed_bench(), {{"m1", "B"}}, ModelProfile::generic(), judge.get(), "x");
  std::vector<DetailRow> rows;
  const Json js = report_json(rep);
  for (const auto& j : js["rows"]) rows.push_back(detail_row_from_json(j));
  EXPECT_EQ(report_json(aggregate_report(rows, "x")).dump(), report_json(rep).dump());
}

TEST(Compare, SelfComparisonIsOne) {
  const std::vector<BenchSample> samples = {open_ended("q1", TaskKind::kQa, "a"), open_ended("q2", TaskKind::kQa, "b")};
  auto judge = mock_gateway(MockScript::ordered_responses({"7 7\nsame", "4 4\nsame"}));
  const std::map<std::string, std::string> r = {{"q1", "x"}, {"q2", "y"}};
  EXPECT_EQ(compare_models(samples, r, r, *judge).ratios.at("all"), 1.0);
}

TEST(Compare, ScriptedPairsGiveSevenNinths) {
  const std::vector<BenchSample> samples = {open_ended("q1", TaskKind::kQa, "a"),
                                            open_ended("c1", TaskKind::kCaption, "b")};
  auto judge = mock_gateway(MockScript::ordered_responses({"8 10\n", "6 8\n"}));
  const auto out = compare_models(samples, {}, {}, *judge);
  EXPECT_NEAR(out.ratios.at("all"), 7.0 / 9.0, 1e-12);
  EXPECT_EQ(out.ratios.at("qa"), 0.8);
  EXPECT_EQ(out.ratios.at("caption"), 0.75);
}

TEST(Compare, InvalidVerdictsAreExcluded) {
  const std::vector<BenchSample> samples = {open_ended("q1", TaskKind::kQa, "a"), open_ended("q2", TaskKind::kQa, "b")};
  auto judge = mock_gateway(MockScript::ordered_responses({"7,9\n", "5 10\n"}));
  const auto out = compare_models(samples, {}, {}, *judge);
  EXPECT_EQ(out.invalid, 1u);
  EXPECT_EQ(out.ratios.at("all"), 0.5);
}

TEST(Manifest, ParsesAndSummarizes) {
  std::string text;
  for (const auto& s : mixed_bench()) text += to_json(s).dump() + "\n";
  const auto back = parse_bench(text);
  ASSERT_EQ(back.size(), 5u);
  EXPECT_EQ(back[2].box, BBox({0, 0, 100, 100}));
  const auto rows = bench_summary(back);
  EXPECT_EQ(rows[0].questions, 2u);
  EXPECT_EQ(rows[0].images, 10u);
  EXPECT_EQ(rows[1].questions, 1u);
  EXPECT_EQ(rows[2].images, 3u);
}

TEST(Manifest, ErrorsNameTheLine) {
  const std::string good = to_json(matching("m1", "A")).dump() + "\n";
  try {
    parse_bench(good + "{\"id\":\"m2\",\"task\":\"matching\",\"test_image_refs\":[\"a\"],\"answer\":\"E\"}\n", "b.jsonl");
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("b.jsonl:2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_bench(good + good), ValidationError);
  EXPECT_THROW(parse_bench("not json\n"), ValidationError);
}

TEST(Responses, FileFormat) {
  const auto rs = ResponseSet::parse(
      "{\"model\":\"a\",\"id\":\"m1\",\"response\":\"B\"}\n{\"model\":\"b\",\"id\":\"m1\",\"response\":\"C\"}\n");
  EXPECT_EQ(rs.model("a").at("m1"), "B");
  EXPECT_THROW(rs.model(""), ConfigError);
  EXPECT_THROW(rs.model("c"), ConfigError);
}

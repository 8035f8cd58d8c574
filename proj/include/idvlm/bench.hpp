#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "idvlm/bbox.hpp"
#include "idvlm/gateway.hpp"
#include "idvlm/jsonl.hpp"
#include "idvlm/kv_config.hpp"
#include "idvlm/prompts.hpp"

namespace idvlm::bench {

enum class TaskKind { kMatching, kLocation, kQa, kCaption };

inline constexpr std::array<TaskKind, 4> kTaskOrder = {TaskKind::kMatching, TaskKind::kLocation, TaskKind::kQa,
                                                       TaskKind::kCaption};

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kMatching: return "matching";
    case TaskKind::kLocation: return "location";
    case TaskKind::kQa: return "qa";
    case TaskKind::kCaption: return "caption";
  }
  return "?";
}

inline std::string column_title(TaskKind k) {
  switch (k) {
    case TaskKind::kMatching: return "Matching";
    case TaskKind::kLocation: return "Location";
    case TaskKind::kQa: return "Q&A";
    case TaskKind::kCaption: return "Caption";
  }
  return "?";
}

inline TaskKind parse_task_kind(std::string_view s) {
  for (TaskKind k : kTaskOrder) {
    if (to_string(k) == s) return k;
  }
  throw ValidationError("unknown bench task '" + std::string(s) + "'");
}

struct NamedImage {
  std::string name;
  std::string image_ref;
};

// Ground truth: an option letter (matching), a box (location) or a
// reference answer (qa, caption).
struct BenchSample {
  std::string id;
  TaskKind task = TaskKind::kQa;
  std::vector<NamedImage> id_refs;
  std::vector<std::string> test_image_refs;
  std::string question;
  std::string answer;       // letter or reference text
  std::optional<BBox> box;  // location
  long long width = 0;      // location
  long long height = 0;

  void validate() const {
    const std::string where = "bench sample '" + id + "'";
    if (id.empty()) throw ValidationError("bench sample: empty id");
    if (test_image_refs.empty()) throw ValidationError(where + ": no test image");
    switch (task) {
      case TaskKind::kMatching:
        if (answer.size() != 1 || answer[0] < 'A' || answer[0] > 'D') {
          throw ValidationError(where + ": matching answer must be one of A-D");
        }
        if (static_cast<std::size_t>(answer[0] - 'A') >= test_image_refs.size()) {
          throw ValidationError(where + ": answer letter has no option image");
        }
        break;
      case TaskKind::kLocation:
        if (!box) throw ValidationError(where + ": location sample without a ground-truth box");
        if (width <= 0 || height <= 0) throw ValidationError(where + ": location sample without image size");
        if (!box->within(width, height)) {
          throw ValidationError(where + ": ground-truth box " + box->str() + " outside the image");
        }
        break;
      case TaskKind::kQa:
      case TaskKind::kCaption:
        if (answer.empty()) throw ValidationError(where + ": empty reference answer");
        break;
    }
  }

  std::size_t image_count() const { return id_refs.size() + test_image_refs.size(); }
};

inline BenchSample bench_sample_from_json(const Json& j) {
  BenchSample s;
  s.id = j.at("id").get<std::string>();
  s.task = parse_task_kind(j.at("task").get<std::string>());
  for (const auto& r : j.value("id_refs", Json::array())) {
    s.id_refs.push_back({r.at("name").get<std::string>(), r.at("image_ref").get<std::string>()});
  }
  s.test_image_refs = j.at("test_image_refs").get<std::vector<std::string>>();
  s.question = j.value("question", std::string());
  if (s.task == TaskKind::kLocation) {
    const auto& b = j.at("bbox");
    if (!b.is_array() || b.size() != 4) throw ValidationError("bbox must be [left, top, right, bottom]");
    s.box = BBox{b[0].get<long long>(), b[1].get<long long>(), b[2].get<long long>(), b[3].get<long long>()};
    const auto& size = j.at("image_size");
    s.width = size.at(0).get<long long>();
    s.height = size.at(1).get<long long>();
  } else {
    s.answer = j.at("answer").get<std::string>();
  }
  s.validate();
  return s;
}

inline Json to_json(const BenchSample& s) {
  Json refs = Json::array();
  for (const auto& r : s.id_refs) refs.push_back({{"name", r.name}, {"image_ref", r.image_ref}});
  Json j = {{"id", s.id}, {"task", to_string(s.task)}, {"id_refs", refs}, {"test_image_refs", s.test_image_refs},
            {"question", s.question}};
  if (s.box) {
    j["bbox"] = {s.box->left, s.box->top, s.box->right, s.box->bottom};
    j["image_size"] = {s.width, s.height};
  } else {
    j["answer"] = s.answer;
  }
  return j;
}

// Per-line errors carry the 1-based line number.
inline std::vector<BenchSample> parse_bench(const std::string& text, const std::string& origin = "<bench>") {
  std::vector<BenchSample> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::set<std::string> ids;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    try {
      out.push_back(bench_sample_from_json(Json::parse(line)));
    } catch (const Json::exception& e) {
      throw ValidationError(where + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
    if (!ids.insert(out.back().id).second) throw ValidationError(where + ": duplicate sample id " + out.back().id);
  }
  return out;
}

inline std::vector<BenchSample> load_bench(const std::string& path) { return parse_bench(read_text_file(path), path); }

struct BenchSummaryRow {
  TaskKind task;
  std::size_t questions = 0;
  std::size_t images = 0;
};

// Question and image counts per task, in benchmark table order.
inline std::vector<BenchSummaryRow> bench_summary(std::span<const BenchSample> samples) {
  std::vector<BenchSummaryRow> rows;
  for (TaskKind k : kTaskOrder) rows.push_back({k, 0, 0});
  for (const auto& s : samples) {
    auto& r = rows[static_cast<std::size_t>(s.task)];
    ++r.questions;
    r.images += s.image_count();
  }
  return rows;
}

inline std::string bench_summary_text(std::span<const BenchSample> samples) {
  std::string out;
  char buf[96];
  std::snprintf(buf, sizeof buf, "%-10s %10s %8s\n", "Task", "Questions", "Images");
  out += buf;
  for (const auto& r : bench_summary(samples)) {
    std::snprintf(buf, sizeof buf, "%-10s %10zu %8zu\n", column_title(r.task).c_str(), r.questions, r.images);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model profiles and prompts
// ---------------------------------------------------------------------------

struct ModelProfile {
  std::string name = "generic";
  std::string system = std::string(prompts::kModelGeneric);
  std::optional<BoxGrammar> grammar;
  std::string option_convention = "letter";

  static ModelProfile generic() {
    ModelProfile p;
    p.grammar = BoxGrammar::kBracket;
    return p;
  }

  static ModelProfile ref_box() {
    ModelProfile p;
    p.name = "ref_box";
    p.grammar = BoxGrammar::kRefBox;
    return p;
  }

  // Keys: name, system_prompt ("generic" or literal text), bbox_grammar,
  // option_convention.
  static ModelProfile from_kv(const KvConfig& kv) {
    ModelProfile p;
    p.name = kv.str_or("name", p.name);
    const std::string sys = kv.str_or("system_prompt", "generic");
    p.system = sys == "generic" ? std::string(prompts::kModelGeneric) : sys;
    if (kv.has("bbox_grammar")) p.grammar = parse_box_grammar(kv.str("bbox_grammar"));
    p.option_convention = kv.str_or("option_convention", p.option_convention);
    if (p.option_convention != "letter") throw ConfigError("profile: only the letter option convention exists");
    return p;
  }

  // "generic", "ref_box", or a profile file.
  static ModelProfile resolve(const std::string& spec) {
    if (spec == "generic") return generic();
    if (spec == "ref_box") return ref_box();
    return from_kv(KvConfig::load(spec));
  }
};

inline std::string_view grammar_instruction(BoxGrammar g) {
  return g == BoxGrammar::kBracket ? prompts::kModelLocationBracket : prompts::kModelLocationRefBox;
}

// System text (location: the grammar instruction), then "{name} is " +
// image per ID, the test images, and the question.
inline ChatRequest render_prompt(const BenchSample& s, const ModelProfile& profile) {
  ChatRequest r;
  if (s.task == TaskKind::kLocation) {
    if (!profile.grammar) {
      throw ConfigError("profile '" + profile.name + "' declares no bbox grammar but sample '" + s.id +
                        "' is a location task");
    }
    r.system = std::string(grammar_instruction(*profile.grammar));
  } else {
    r.system = profile.system;
  }
  for (const auto& id : s.id_refs) {
    r.parts.push_back(ChatPart::text(id.name + " is "));
    r.parts.push_back(ChatPart::image(id.image_ref));
  }
  for (const auto& t : s.test_image_refs) r.parts.push_back(ChatPart::image(t));
  r.parts.push_back(ChatPart::text(s.question));
  return r;
}

// ---------------------------------------------------------------------------
// Response parsing
// ---------------------------------------------------------------------------

// First standalone A-D, case-insensitive.
inline std::optional<char> parse_option(const std::string& text) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = static_cast<char>(std::toupper(static_cast<unsigned char>(text[i])));
    if (c < 'A' || c > 'D') continue;
    const bool left = i == 0 || !std::isalnum(static_cast<unsigned char>(text[i - 1]));
    const bool right = i + 1 == text.size() || !std::isalnum(static_cast<unsigned char>(text[i + 1]));
    if (left && right) return c;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Judges
// ---------------------------------------------------------------------------

struct JudgeVerdict {
  std::vector<int> scores;
  std::string explanation;
  std::string raw;
  bool valid = false;
};

inline std::string judge_absolute_text(const std::string& question, const std::string& gt, const std::string& pred) {
  return "question: " + question + "\nprediction: " + pred + "\nGT: " + gt;
}

inline std::string judge_relative_text(const std::string& question, const std::string& gt, const std::string& pred1,
                                       const std::string& pred2) {
  return "question: " + question + "\nGT: " + gt + "\nprediction 1: " + pred1 + "\nprediction 2: " + pred2;
}

inline ChatRequest judge_absolute_request(const std::string& question, const std::string& gt, const std::string& pred) {
  ChatRequest r;
  r.system = std::string(prompts::kJudgeAbsolute);
  r.parts = {ChatPart::text(judge_absolute_text(question, gt, pred))};
  r.temperature = kJudgeTemperature;
  return r;
}

inline ChatRequest judge_relative_request(const std::string& question, const std::string& gt,
                                          const std::string& pred1, const std::string& pred2) {
  ChatRequest r;
  r.system = std::string(prompts::kJudgeRelative);
  r.parts = {ChatPart::text(judge_relative_text(question, gt, pred1, pred2))};
  r.temperature = kJudgeTemperature;
  return r;
}

// The first line must hold exactly `count` integers in [1, 10] separated by
// spaces; the rest is the explanation.
inline JudgeVerdict parse_verdict(const std::string& raw, std::size_t count) {
  JudgeVerdict v;
  v.raw = raw;
  const auto nl = raw.find('\n');
  std::string first = raw.substr(0, nl);
  v.explanation = nl == std::string::npos ? "" : raw.substr(nl + 1);
  while (!first.empty() && (first.back() == '\r' || first.back() == ' ' || first.back() == '\t')) first.pop_back();
  std::size_t i = first.find_first_not_of(" \t");
  if (i == std::string::npos) return v;
  while (i < first.size()) {
    std::size_t j = i;
    while (j < first.size() && std::isdigit(static_cast<unsigned char>(first[j]))) ++j;
    if (j == i || j - i > 2) return v;
    v.scores.push_back(std::stoi(first.substr(i, j - i)));
    if (j == first.size()) break;
    if (first[j] != ' ') return v;
    while (j < first.size() && first[j] == ' ') ++j;
    i = j;
  }
  v.valid = v.scores.size() == count &&
            std::all_of(v.scores.begin(), v.scores.end(), [](int s) { return s >= 1 && s <= 10; });
  if (!v.valid) v.scores.clear();
  return v;
}

inline JudgeVerdict judge_absolute(Gateway& gw, const std::string& question, const std::string& gt,
                                   const std::string& pred) {
  return parse_verdict(gw.complete(judge_absolute_request(question, gt, pred)).text, 1);
}

inline JudgeVerdict judge_relative(Gateway& gw, const std::string& question, const std::string& gt,
                                   const std::string& pred1, const std::string& pred2) {
  return parse_verdict(gw.complete(judge_relative_request(question, gt, pred1, pred2)).text, 2);
}

// mean(s1) / mean(s2) over valid pairs.
inline double relative_ratio(std::span<const std::pair<int, int>> pairs) {
  if (pairs.empty()) throw ValidationError("relative ratio: no valid verdicts");
  double a = 0.0, b = 0.0;
  for (const auto& [s1, s2] : pairs) {
    a += s1;
    b += s2;
  }
  return (a / static_cast<double>(pairs.size())) / (b / static_cast<double>(pairs.size()));
}

// ---------------------------------------------------------------------------
// Scoring and reports
// ---------------------------------------------------------------------------

inline constexpr double kLocationThreshold = 0.5;

struct DetailRow {
  std::string id;
  TaskKind task = TaskKind::kQa;
  std::string response;
  bool parsed = false;  // option / box found, or verdict valid
  bool correct = false;  // matching
  double iou = 0.0;      // location
  int score = 0;         // qa, caption; meaningful when parsed
  std::string judge_raw;
};

// Fraction of rows whose IoU strictly exceeds the threshold.
inline double location_rate(std::span<const DetailRow> rows, double threshold = kLocationThreshold) {
  std::size_t n = 0, hit = 0;
  for (const auto& r : rows) {
    if (r.task != TaskKind::kLocation) continue;
    ++n;
    if (r.parsed && r.iou > threshold) ++hit;
  }
  if (n == 0) throw ValidationError("location rate: empty benchmark");
  return static_cast<double>(hit) / static_cast<double>(n);
}

struct TaskAggregate {
  std::size_t total = 0;
  std::size_t valid = 0;    // parsed rows / valid verdicts
  std::size_t invalid = 0;  // parse misses / invalid verdicts
  double value = 0.0;       // accuracy, rate, or mean score
};

struct MetricsReport {
  std::string model;
  std::map<TaskKind, TaskAggregate> tasks;  // absent task = no rows
  std::vector<DetailRow> rows;
  std::map<std::string, double> relative;  // comparisons, keyed "a/b[:task]"

  bool has(TaskKind k) const { return tasks.count(k) != 0; }
};

// Pure function of the detail rows.
inline MetricsReport aggregate_report(std::vector<DetailRow> rows, const std::string& model = "model",
                                      double threshold = kLocationThreshold) {
  MetricsReport rep;
  rep.model = model;
  std::map<TaskKind, double> sums;
  for (const auto& r : rows) {
    auto& a = rep.tasks[r.task];
    ++a.total;
    r.parsed ? ++a.valid : ++a.invalid;
    switch (r.task) {
      case TaskKind::kMatching: sums[r.task] += r.correct ? 1.0 : 0.0; break;
      case TaskKind::kLocation: sums[r.task] += (r.parsed && r.iou > threshold) ? 1.0 : 0.0; break;
      case TaskKind::kQa:
      case TaskKind::kCaption:
        if (r.parsed) sums[r.task] += r.score;
        break;
    }
  }
  for (auto& [k, a] : rep.tasks) {
    const bool judged = k == TaskKind::kQa || k == TaskKind::kCaption;
    const std::size_t denom = judged ? a.valid : a.total;
    a.value = denom ? sums[k] / static_cast<double>(denom) : 0.0;
  }
  rep.rows = std::move(rows);
  return rep;
}

// Columns follow the main results table: Matching Location Q&A Caption.
inline std::string report_text(const MetricsReport& rep) {
  std::string out;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-16s %9s %9s %9s %9s\n", "Model", "Matching", "Location", "Q&A", "Caption");
  out += buf;
  std::string cells[4];
  for (std::size_t i = 0; i < 4; ++i) {
    const TaskKind k = kTaskOrder[i];
    if (!rep.has(k)) {
      cells[i] = "-";
      continue;
    }
    std::snprintf(buf, sizeof buf, i < 2 ? "%.3f" : "%.2f", rep.tasks.at(k).value);
    cells[i] = buf;
  }
  std::snprintf(buf, sizeof buf, "%-16s %9s %9s %9s %9s\n", rep.model.c_str(), cells[0].c_str(), cells[1].c_str(),
                cells[2].c_str(), cells[3].c_str());
  out += buf;
  for (TaskKind k : kTaskOrder) {
    if (!rep.has(k) || rep.tasks.at(k).invalid == 0) continue;
    const char* what = (k == TaskKind::kQa || k == TaskKind::kCaption) ? "invalid verdicts" : "parse misses";
    std::snprintf(buf, sizeof buf, "%s %s: %zu\n", column_title(k).c_str(), what, rep.tasks.at(k).invalid);
    out += buf;
  }
  for (const auto& [key, v] : rep.relative) {
    std::snprintf(buf, sizeof buf, "relative %s: %.3f\n", key.c_str(), v);
    out += buf;
  }
  return out;
}

inline Json report_json(const MetricsReport& rep) {
  Json tasks = Json::object();
  for (const auto& [k, a] : rep.tasks) {
    tasks[to_string(k)] = {{"total", a.total}, {"valid", a.valid}, {"invalid", a.invalid}, {"value", a.value}};
  }
  Json rows = Json::array();
  for (const auto& r : rep.rows) {
    Json j = {{"id", r.id}, {"task", to_string(r.task)}, {"response", r.response}, {"parsed", r.parsed}};
    switch (r.task) {
      case TaskKind::kMatching: j["correct"] = r.correct; break;
      case TaskKind::kLocation: j["iou"] = r.iou; break;
      default:
        j["score"] = r.score;
        j["judge_raw"] = r.judge_raw;
    }
    rows.push_back(j);
  }
  return {{"model", rep.model}, {"tasks", tasks}, {"relative", rep.relative}, {"rows", rows}};
}

inline DetailRow detail_row_from_json(const Json& j) {
  DetailRow r;
  r.id = j.at("id").get<std::string>();
  r.task = parse_task_kind(j.at("task").get<std::string>());
  r.response = j.at("response").get<std::string>();
  r.parsed = j.at("parsed").get<bool>();
  r.correct = j.value("correct", false);
  r.iou = j.value("iou", 0.0);
  r.score = j.value("score", 0);
  r.judge_raw = j.value("judge_raw", std::string());
  return r;
}

// ---------------------------------------------------------------------------
// Responses
// ---------------------------------------------------------------------------

// Model name -> sample id -> response text. File rows:
//   {"model": str, "id": str, "response": str}
struct ResponseSet {
  std::map<std::string, std::map<std::string, std::string>> by_model;

  static ResponseSet parse(const std::string& text, const std::string& origin = "<responses>") {
    ResponseSet rs;
    std::size_t line = 0;
    for (const auto& j : parse_jsonl(text, origin)) {
      ++line;
      with_origin(origin + " entry " + std::to_string(line), [&] {
        rs.by_model[j.value("model", std::string("model"))][j.at("id").get<std::string>()] =
            j.at("response").get<std::string>();
      });
    }
    return rs;
  }

  static ResponseSet load(const std::string& path) { return parse(read_text_file(path), path); }

  // The single model in the file, or `name` when given.
  const std::map<std::string, std::string>& model(const std::string& name, std::string* resolved = nullptr) const {
    if (name.empty()) {
      if (by_model.size() != 1) {
        throw ConfigError("response file holds " + std::to_string(by_model.size()) + " models; name one");
      }
      if (resolved) *resolved = by_model.begin()->first;
      return by_model.begin()->second;
    }
    auto it = by_model.find(name);
    if (it == by_model.end()) throw ConfigError("response file has no model '" + name + "'");
    if (resolved) *resolved = name;
    return it->second;
  }
};

// Missing responses score as parse misses.
inline MetricsReport score_responses(std::span<const BenchSample> samples,
                                     const std::map<std::string, std::string>& responses, const ModelProfile& profile,
                                     Gateway* judge, const std::string& model_name) {
  std::vector<DetailRow> rows;
  for (const auto& s : samples) {
    DetailRow r;
    r.id = s.id;
    r.task = s.task;
    auto it = responses.find(s.id);
    r.response = it == responses.end() ? "" : it->second;
    switch (s.task) {
      case TaskKind::kMatching: {
        const auto opt = parse_option(r.response);
        r.parsed = opt.has_value();
        r.correct = opt && *opt == s.answer[0];
        break;
      }
      case TaskKind::kLocation: {
        if (!profile.grammar) {
          throw ConfigError("profile '" + profile.name + "' declares no bbox grammar for location sample " + s.id);
        }
        const auto box = parse_bbox(r.response, *profile.grammar);
        r.parsed = box.has_value();
        r.iou = box ? iou(*box, *s.box) : 0.0;
        break;
      }
      case TaskKind::kQa:
      case TaskKind::kCaption: {
        if (!judge) throw ConfigError("a judge gateway is required to score " + to_string(s.task) + " samples");
        const JudgeVerdict v = judge_absolute(*judge, s.question, s.answer, r.response);
        r.parsed = v.valid;
        r.score = v.valid ? v.scores[0] : 0;
        r.judge_raw = v.raw;
        break;
      }
    }
    rows.push_back(std::move(r));
  }
  return aggregate_report(std::move(rows), model_name);
}

struct CompareOptions {
  bool swapped_pass = false;  // also judge (b, a) and average the swapped pair
};

struct CompareResult {
  std::map<TaskKind, std::vector<std::pair<int, int>>> pairs;
  std::size_t invalid = 0;
  std::map<std::string, double> ratios;  // "all", "qa", "caption"
};

inline CompareResult compare_models(std::span<const BenchSample> samples, const std::map<std::string, std::string>& a,
                                    const std::map<std::string, std::string>& b, Gateway& judge,
                                    const CompareOptions& opt = {}) {
  CompareResult out;
  auto text = [](const std::map<std::string, std::string>& m, const std::string& id) {
    auto it = m.find(id);
    return it == m.end() ? std::string() : it->second;
  };
  for (const auto& s : samples) {
    if (s.task != TaskKind::kQa && s.task != TaskKind::kCaption) continue;
    const std::string pa = text(a, s.id), pb = text(b, s.id);
    JudgeVerdict v = judge_relative(judge, s.question, s.answer, pa, pb);
    if (!v.valid) {
      ++out.invalid;
      continue;
    }
    if (opt.swapped_pass) {
      const JudgeVerdict w = judge_relative(judge, s.question, s.answer, pb, pa);
      if (!w.valid) {
        ++out.invalid;
        continue;
      }
      // Scores from both orders summed per model.
      const int s1 = v.scores[0] + w.scores[1];
      const int s2 = v.scores[1] + w.scores[0];
      out.pairs[s.task].emplace_back(s1, s2);
      continue;
    }
    out.pairs[s.task].emplace_back(v.scores[0], v.scores[1]);
  }
  std::vector<std::pair<int, int>> all;
  for (const auto& [k, ps] : out.pairs) {
    out.ratios[to_string(k)] = relative_ratio(ps);
    all.insert(all.end(), ps.begin(), ps.end());
  }
  if (!all.empty()) out.ratios["all"] = relative_ratio(all);
  return out;
}

}  // namespace idvlm::bench

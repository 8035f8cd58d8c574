#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "idvlm/bbox.hpp"
#include "idvlm/gateway.hpp"
#include "idvlm/jsonl.hpp"
#include "idvlm/kv_config.hpp"
#include "idvlm/names.hpp"
#include "idvlm/prompts.hpp"
#include "idvlm/rng.hpp"

namespace idvlm::forge {

inline constexpr std::size_t kMaxImagesPerSample = 8;

// ---------------------------------------------------------------------------
// Grounded records
// ---------------------------------------------------------------------------

enum class RecordKind { kQa, kReferring, kCaption, kMovieShot };

inline std::string to_string(RecordKind k) {
  switch (k) {
    case RecordKind::kQa: return "qa";
    case RecordKind::kReferring: return "referring";
    case RecordKind::kCaption: return "caption";
    case RecordKind::kMovieShot: return "movie_shot";
  }
  return "?";
}

inline RecordKind parse_record_kind(std::string_view s) {
  if (s == "qa") return RecordKind::kQa;
  if (s == "referring") return RecordKind::kReferring;
  if (s == "caption") return RecordKind::kCaption;
  if (s == "movie_shot") return RecordKind::kMovieShot;
  throw ValidationError("unknown record kind '" + std::string(s) + "'");
}

struct Region {
  BBox bbox;
  std::string label;  // entity class, or the character name in movie shots
};

// Text fields use "[key]" mentions resolved through `mentions` (key -> region).
struct GroundedRecord {
  std::string id;
  RecordKind kind = RecordKind::kQa;
  std::string image_ref;
  long long width = 0;
  long long height = 0;
  std::vector<Region> regions;
  std::string question;  // qa
  std::string answer;    // qa
  std::string text;      // caption text, or referring expression
  std::map<std::string, std::size_t> mentions;
  std::size_t target = 0;  // referring
  std::string movie_id;    // movie_shot

  bool is_person(std::size_t r) const {
    if (kind == RecordKind::kMovieShot) return true;
    std::string l = regions[r].label;
    std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
    return l == "person";
  }

  std::vector<std::size_t> person_regions() const {
    std::vector<std::size_t> out;
    for (std::size_t r = 0; r < regions.size(); ++r) {
      if (is_person(r)) out.push_back(r);
    }
    return out;
  }

  void validate() const {
    const std::string where = "record '" + id + "'";
    if (id.empty()) throw ValidationError("record: empty id");
    if (image_ref.empty()) throw ValidationError(where + ": empty image_ref");
    if (width <= 0 || height <= 0) throw ValidationError(where + ": image size must be positive");
    for (const auto& r : regions) {
      if (!r.bbox.within(width, height)) {
        throw ValidationError(where + ": region " + r.bbox.str() + " outside " + std::to_string(width) + "x" +
                              std::to_string(height) + " or degenerate");
      }
    }
    for (const auto& [key, r] : mentions) {
      if (r >= regions.size()) throw ValidationError(where + ": mention [" + key + "] targets a missing region");
    }
    if (kind == RecordKind::kReferring && target >= regions.size()) {
      throw ValidationError(where + ": referring target is not a region");
    }
    if (kind == RecordKind::kMovieShot && movie_id.empty()) throw ValidationError(where + ": movie shot without movie_id");
  }
};

inline Json box_json(const BBox& b) { return Json::array({b.left, b.top, b.right, b.bottom}); }

inline BBox box_from_json(const Json& j) {
  if (!j.is_array() || j.size() != 4) throw ValidationError("bbox must be [left, top, right, bottom]");
  return {j[0].get<long long>(), j[1].get<long long>(), j[2].get<long long>(), j[3].get<long long>()};
}

inline Json to_json(const GroundedRecord& r) {
  Json j = {{"id", r.id}, {"kind", to_string(r.kind)}, {"image_ref", r.image_ref},
            {"image_size", {r.width, r.height}}};
  Json regions = Json::array();
  for (const auto& reg : r.regions) regions.push_back({{"bbox", box_json(reg.bbox)}, {"label", reg.label}});
  j["regions"] = regions;
  switch (r.kind) {
    case RecordKind::kQa:
      j["question"] = r.question;
      j["answer"] = r.answer;
      j["mentions"] = r.mentions;
      break;
    case RecordKind::kReferring:
      j["expression"] = r.text;
      j["target"] = r.target;
      break;
    case RecordKind::kCaption:
      j["text"] = r.text;
      j["mentions"] = r.mentions;
      break;
    case RecordKind::kMovieShot:
      j["movie_id"] = r.movie_id;
      break;
  }
  return j;
}

inline GroundedRecord record_from_json(const Json& j) {
  GroundedRecord r;
  r.id = j.at("id").get<std::string>();
  r.kind = parse_record_kind(j.at("kind").get<std::string>());
  r.image_ref = j.at("image_ref").get<std::string>();
  const auto& size = j.at("image_size");
  if (!size.is_array() || size.size() != 2) throw ValidationError("image_size must be [width, height]");
  r.width = size[0].get<long long>();
  r.height = size[1].get<long long>();
  for (const auto& reg : j.at("regions")) {
    r.regions.push_back({box_from_json(reg.at("bbox")), reg.at("label").get<std::string>()});
  }
  switch (r.kind) {
    case RecordKind::kQa:
      r.question = j.at("question").get<std::string>();
      r.answer = j.at("answer").get<std::string>();
      r.mentions = j.at("mentions").get<std::map<std::string, std::size_t>>();
      break;
    case RecordKind::kReferring:
      r.text = j.value("expression", std::string());
      r.target = j.at("target").get<std::size_t>();
      break;
    case RecordKind::kCaption:
      r.text = j.at("text").get<std::string>();
      r.mentions = j.at("mentions").get<std::map<std::string, std::size_t>>();
      break;
    case RecordKind::kMovieShot:
      r.movie_id = j.at("movie_id").get<std::string>();
      break;
  }
  r.validate();
  return r;
}

inline std::vector<GroundedRecord> parse_records(const std::string& text, const std::string& origin = "<records>") {
  std::vector<GroundedRecord> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    try {
      out.push_back(record_from_json(Json::parse(line)));
    } catch (const Json::exception& e) {
      throw ValidationError(where + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<GroundedRecord> load_records(const std::string& path) {
  return parse_records(read_text_file(path), path);
}

// ---------------------------------------------------------------------------
// Tuning samples
// ---------------------------------------------------------------------------

enum class TaskKind { kQa, kLocation, kCaption, kMatching };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kQa: return "qa";
    case TaskKind::kLocation: return "location";
    case TaskKind::kCaption: return "caption";
    case TaskKind::kMatching: return "matching";
  }
  return "?";
}

inline TaskKind parse_task_kind(std::string_view s) {
  if (s == "qa") return TaskKind::kQa;
  if (s == "location") return TaskKind::kLocation;
  if (s == "caption") return TaskKind::kCaption;
  if (s == "matching") return TaskKind::kMatching;
  throw ValidationError("unknown task kind '" + std::string(s) + "'");
}

// Crops are (parent image, bbox) specs; standalone refs have an empty bbox.
struct IdRef {
  std::string name;
  std::string image_ref;
  std::optional<BBox> crop;

  std::string locator() const { return crop ? image_ref + "#" + crop->str() : image_ref; }
};

struct Turn {
  std::string role;  // "user" | "assistant"
  std::string text;
  friend bool operator==(const Turn&, const Turn&) = default;
};

struct TuningSample {
  std::string id;
  int stage = 1;
  TaskKind task = TaskKind::kQa;
  std::string source;
  std::vector<IdRef> id_refs;
  std::vector<std::string> test_image_refs;
  std::vector<Turn> conversation;
  std::vector<std::string> option_labels;  // matching: character shown by each option

  void validate() const {
    const std::string where = "sample '" + id + "'";
    if (stage != 1 && stage != 2) throw ValidationError(where + ": stage must be 1 or 2");
    if (id_refs.size() + test_image_refs.size() > kMaxImagesPerSample) {
      throw ValidationError(where + ": more than " + std::to_string(kMaxImagesPerSample) + " images");
    }
    std::set<std::string> names;
    for (const auto& r : id_refs) {
      if (r.name.empty()) throw ValidationError(where + ": unnamed ID reference");
      if (!names.insert(r.name).second) throw ValidationError(where + ": name " + r.name + " used twice");
      if (r.crop) require_valid(*r.crop, where + " crop of " + r.name);
    }
    if (conversation.empty()) throw ValidationError(where + ": empty conversation");
    bool has_assistant = false;
    static const std::regex placeholder(R"(<(ID|Test)-Img(\d+)>)");
    for (const auto& t : conversation) {
      if (t.role != "user" && t.role != "assistant") throw ValidationError(where + ": bad role " + t.role);
      if (t.role == "assistant") {
        has_assistant = true;
        if (t.text.find_first_not_of(" \t\n") == std::string::npos) {
          throw ValidationError(where + ": empty assistant turn");
        }
      }
      for (std::sregex_iterator it(t.text.begin(), t.text.end(), placeholder), end; it != end; ++it) {
        const std::size_t n = std::stoul((*it)[2].str());
        const std::size_t limit = (*it)[1].str() == "ID" ? id_refs.size() : test_image_refs.size();
        if (n < 1 || n > limit) throw ValidationError(where + ": unresolved placeholder " + it->str());
      }
    }
    if (!has_assistant) throw ValidationError(where + ": no assistant turn");
    if (task == TaskKind::kMatching && !option_labels.empty() && option_labels.size() != test_image_refs.size()) {
      throw ValidationError(where + ": option labels do not match options");
    }
  }
};

inline Json to_json(const TuningSample& s) {
  Json refs = Json::array();
  for (const auto& r : s.id_refs) {
    Json j = {{"name", r.name}, {"image_ref", r.image_ref}};
    if (r.crop) j["crop"] = box_json(*r.crop);
    refs.push_back(j);
  }
  Json conv = Json::array();
  for (const auto& t : s.conversation) conv.push_back({{"role", t.role}, {"text", t.text}});
  Json j = {{"id", s.id},           {"stage", s.stage},          {"task", to_string(s.task)},
            {"source", s.source},   {"id_refs", refs},           {"test_image_refs", s.test_image_refs},
            {"conversation", conv}};
  if (!s.option_labels.empty()) j["option_labels"] = s.option_labels;
  return j;
}

inline TuningSample sample_from_json(const Json& j) {
  TuningSample s;
  s.id = j.at("id").get<std::string>();
  s.stage = j.at("stage").get<int>();
  s.task = parse_task_kind(j.at("task").get<std::string>());
  s.source = j.value("source", std::string());
  for (const auto& r : j.at("id_refs")) {
    IdRef ref{r.at("name").get<std::string>(), r.at("image_ref").get<std::string>(), std::nullopt};
    if (r.contains("crop")) ref.crop = box_from_json(r.at("crop"));
    s.id_refs.push_back(std::move(ref));
  }
  s.test_image_refs = j.at("test_image_refs").get<std::vector<std::string>>();
  for (const auto& t : j.at("conversation")) {
    s.conversation.push_back({t.at("role").get<std::string>(), t.at("text").get<std::string>()});
  }
  if (j.contains("option_labels")) s.option_labels = j.at("option_labels").get<std::vector<std::string>>();
  s.validate();
  return s;
}

inline bool is_tuning_sample_json(const Json& j) { return j.is_object() && j.contains("conversation"); }

inline std::vector<TuningSample> parse_samples(const std::string& text, const std::string& origin = "<samples>") {
  std::vector<TuningSample> out;
  std::size_t line = 0;
  for (const auto& j : parse_jsonl(text, origin)) {
    ++line;
    const std::string where = origin + " record " + std::to_string(line);
    try {
      out.push_back(sample_from_json(j));
    } catch (const Json::exception& e) {
      throw ValidationError(where + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<TuningSample> load_samples(const std::string& path) {
  return parse_samples(read_text_file(path), path);
}

inline std::string samples_jsonl(std::span<const TuningSample> samples) {
  std::string out;
  for (const auto& s : samples) {
    out += to_json(s).dump();
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Name pool
// ---------------------------------------------------------------------------

class NamePool {
 public:
  NamePool() : names_(kDefaultNames.begin(), kDefaultNames.end()) {}
  explicit NamePool(std::vector<std::string> names) : names_(std::move(names)) {
    std::set<std::string> seen;
    for (const auto& n : names_) {
      if (n.empty() || n.find_first_of(" \t\n") != std::string::npos) {
        throw ConfigError("name pool: names must be single non-empty words");
      }
      if (!seen.insert(n).second) throw ConfigError("name pool: duplicate name " + n);
    }
    if (names_.empty()) throw ConfigError("name pool: empty");
  }

  // One name per line; blank lines and '#' comments skipped.
  static NamePool load(const std::string& path) {
    std::istringstream in(read_text_file(path));
    std::vector<std::string> names;
    std::string line;
    while (std::getline(in, line)) {
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      names.push_back(line);
    }
    return NamePool(std::move(names));
  }

  const std::vector<std::string>& names() const { return names_; }
  bool contains(const std::string& n) const { return std::find(names_.begin(), names_.end(), n) != names_.end(); }

  // Draw for (record id, region index), probing forward past names already
  // taken in this sample.
  std::vector<std::string> assign(const std::string& record_id, std::span<const std::size_t> regions) const {
    if (regions.size() > names_.size()) {
      throw BuildError("name pool: " + std::to_string(regions.size()) + " names needed, pool has " +
                       std::to_string(names_.size()));
    }
    std::vector<std::string> out;
    std::set<std::size_t> taken;
    for (std::size_t r : regions) {
      std::size_t k = fnv1a(record_id + "#" + std::to_string(r)) % names_.size();
      while (taken.count(k)) k = (k + 1) % names_.size();
      taken.insert(k);
      out.push_back(names_[k]);
    }
    return out;
  }

 private:
  std::vector<std::string> names_;
};

// ---------------------------------------------------------------------------
// Filter
// ---------------------------------------------------------------------------

struct CropPolicy {
  long long min_side = 32;
  double min_area_fraction = 0.01;

  bool passes(const BBox& crop, long long width, long long height) const {
    const double image_area = static_cast<double>(width) * static_cast<double>(height);
    return std::min(crop.width(), crop.height()) >= min_side && crop.area() >= min_area_fraction * image_area;
  }

  void validate() const {
    if (min_side < 1) throw ConfigError("policy: min_side must be >= 1");
    if (!(min_area_fraction >= 0.0 && min_area_fraction < 1.0)) {
      throw ConfigError("policy: min_area_fraction must be in [0, 1)");
    }
  }

  static CropPolicy from_kv(const KvConfig& kv) {
    for (const auto& [k, _] : kv.entries()) {
      if (k != "min_side" && k != "min_area_fraction") throw ConfigError("policy: unknown key " + k);
    }
    CropPolicy p;
    p.min_side = kv.integer_or("min_side", p.min_side);
    p.min_area_fraction = kv.real_or("min_area_fraction", p.min_area_fraction);
    p.validate();
    return p;
  }
};

inline constexpr const char* kDropSinglePerson = "single_person";
inline constexpr const char* kDropCropTooSmall = "crop_too_small";

struct FilterDecision {
  bool keep = true;
  std::string reason;  // empty when kept
};

// Every person region becomes an ID crop, so every person crop must pass.
inline FilterDecision filter_record(const GroundedRecord& r, const CropPolicy& policy = {}) {
  const auto persons = r.person_regions();
  if (persons.size() < 2) return {false, kDropSinglePerson};
  for (std::size_t p : persons) {
    if (!policy.passes(r.regions[p].bbox, r.width, r.height)) return {false, kDropCropTooSmall};
  }
  return {true, ""};
}

// ---------------------------------------------------------------------------
// Conversation templates
// ---------------------------------------------------------------------------

// Per task kind, instruction templates with {images}, {question}, {name},
// {options} fields.
struct TemplateSet {
  std::map<TaskKind, std::vector<std::string>> by_kind;

  static TemplateSet standard() {
    TemplateSet t;
    t.by_kind[TaskKind::kQa] = {"{images} {question}", "Look at {images} and answer the question. {question}",
                                "Question about {images}: {question}"};
    t.by_kind[TaskKind::kCaption] = {"Describe {images} using the character names.",
                                     "Give a brief caption of {images} with the names of the characters.",
                                     "What is happening in {images}? Refer to the characters by name."};
    t.by_kind[TaskKind::kLocation] = {"Where is {name} in {images}? Give the bounding box.",
                                      "Locate {name} in {images}.",
                                      "Find the bounding box of {name} in {images}."};
    t.by_kind[TaskKind::kMatching] = {"Which option shows {name}? {options}",
                                      "{options} Which of these images contains {name}?"};
    return t;
  }

  const std::vector<std::string>& for_kind(TaskKind k) const {
    auto it = by_kind.find(k);
    if (it == by_kind.end() || it->second.empty()) {
      throw ConfigError("templates: no instruction template for task " + to_string(k));
    }
    return it->second;
  }
};

inline std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
  return s;
}

inline constexpr std::array<std::string_view, 4> kOptionLetters = {"A", "B", "C", "D"};

struct RawTask {
  TaskKind kind = TaskKind::kQa;
  std::vector<std::string> id_names;  // ID-Img order
  std::size_t n_tests = 1;
  std::string question;  // qa
  std::string answer;    // assistant text
  std::string name;      // location / matching target
};

inline std::string test_placeholders(std::size_t n) {
  std::string out;
  for (std::size_t i = 1; i <= n; ++i) {
    if (i > 1) out += ' ';
    out += "<Test-Img" + std::to_string(i) + ">";
  }
  return out;
}

// "Julia is <ID-Img1>. Tom is <ID-Img2>." then the chosen instruction.
inline std::vector<Turn> wrap_conversation(const RawTask& task, const TemplateSet& templates, std::uint64_t seed) {
  const auto& options = templates.for_kind(task.kind);
  Rng rng(seed);
  std::string tmpl = options[rng.below(options.size())];
  std::string preamble;
  for (std::size_t i = 0; i < task.id_names.size(); ++i) {
    if (i) preamble += ' ';
    preamble += task.id_names[i] + " is <ID-Img" + std::to_string(i + 1) + ">.";
  }
  std::string opts;
  if (task.kind == TaskKind::kMatching) {
    for (std::size_t i = 0; i < task.n_tests && i < kOptionLetters.size(); ++i) {
      if (i) opts += ' ';
      opts += std::string(kOptionLetters[i]) + ". <Test-Img" + std::to_string(i + 1) + ">";
    }
  }
  std::string body = replace_all(tmpl, "{images}", test_placeholders(task.n_tests));
  body = replace_all(body, "{question}", task.question);
  body = replace_all(body, "{name}", task.name);
  body = replace_all(body, "{options}", opts);
  const std::string user = preamble.empty() ? body : preamble + "\n" + body;
  return {{"user", user}, {"assistant", task.answer}};
}

// ---------------------------------------------------------------------------
// Name linkage audit
// ---------------------------------------------------------------------------

inline std::vector<std::string> words_of(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '-') {
      cur += c;
    } else if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

// Empty when every known name in the text has an ID reference and every ID
// reference is named in the text; otherwise the first offending name.
inline std::optional<std::string> name_linkage_violation(const TuningSample& s,
                                                         const std::set<std::string>& known_names) {
  std::set<std::string> refs;
  for (const auto& r : s.id_refs) refs.insert(r.name);
  std::set<std::string> seen;
  for (const auto& t : s.conversation) {
    for (const auto& w : words_of(t.text)) {
      if (known_names.count(w) || refs.count(w)) seen.insert(w);
    }
  }
  for (const auto& w : seen) {
    if (!refs.count(w)) return w;
  }
  for (const auto& r : refs) {
    if (!seen.count(r)) return r;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Stage 1 builders
// ---------------------------------------------------------------------------

namespace detail {

struct Named {
  std::vector<std::size_t> persons;
  std::vector<std::string> names;
  std::map<std::size_t, std::string> by_region;
};

inline Named name_persons(const GroundedRecord& r, const NamePool& pool) {
  Named n;
  n.persons = r.person_regions();
  n.names = pool.assign(r.id, n.persons);
  for (std::size_t i = 0; i < n.persons.size(); ++i) n.by_region[n.persons[i]] = n.names[i];
  return n;
}

// "[key]" -> assigned name (persons) or "the <label>" (objects).
inline std::string resolve_mentions(const std::string& text, const GroundedRecord& r, const Named& named) {
  static const std::regex mention(R"(\[([A-Za-z0-9_]+)\])");
  std::string out;
  auto it = std::sregex_iterator(text.begin(), text.end(), mention);
  std::size_t last = 0;
  for (; it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    out.append(text, last, static_cast<std::size_t>(m.position()) - last);
    const std::string key = m[1].str();
    auto link = r.mentions.find(key);
    if (link == r.mentions.end()) {
      throw BuildError("record '" + r.id + "': mention [" + key + "] is not linked to a region");
    }
    auto name = named.by_region.find(link->second);
    out += name != named.by_region.end() ? name->second : "the " + r.regions[link->second].label;
    last = static_cast<std::size_t>(m.position() + m.length());
  }
  out.append(text, last, std::string::npos);
  return out;
}

inline TuningSample stage1_shell(const GroundedRecord& r, const Named& named, TaskKind task, const char* source) {
  TuningSample s;
  s.id = r.id;
  s.stage = 1;
  s.task = task;
  s.source = source;
  for (std::size_t i = 0; i < named.persons.size(); ++i) {
    s.id_refs.push_back({named.names[i], r.image_ref, r.regions[named.persons[i]].bbox});
  }
  s.test_image_refs = {r.image_ref};
  return s;
}

inline std::uint64_t record_seed(std::uint64_t seed, const std::string& id) { return mix_seed(seed, fnv1a(id)); }

inline void require_kind(const GroundedRecord& r, RecordKind k) {
  if (r.kind != k) {
    throw BuildError("record '" + r.id + "' is " + to_string(r.kind) + ", builder expects " + to_string(k));
  }
}

}  // namespace detail

inline constexpr const char* kSourceVcr = "vcr";
inline constexpr const char* kSourceRefcoco = "refcoco";
inline constexpr const char* kSourceFlickr = "flickr30k";

inline TuningSample build_stage1_qa(const GroundedRecord& r, const NamePool& pool,
                                    const TemplateSet& templates = TemplateSet::standard(), std::uint64_t seed = 0) {
  detail::require_kind(r, RecordKind::kQa);
  const auto named = detail::name_persons(r, pool);
  TuningSample s = detail::stage1_shell(r, named, TaskKind::kQa, kSourceVcr);
  RawTask t{TaskKind::kQa, named.names, 1, detail::resolve_mentions(r.question, r, named),
            detail::resolve_mentions(r.answer, r, named), ""};
  s.conversation = wrap_conversation(t, templates, detail::record_seed(seed, r.id));
  return s;
}

inline TuningSample build_stage1_location(const GroundedRecord& r, const NamePool& pool, const CropPolicy& policy = {},
                                          const TemplateSet& templates = TemplateSet::standard(),
                                          std::uint64_t seed = 0) {
  detail::require_kind(r, RecordKind::kReferring);
  const BBox& target = r.regions.at(r.target).bbox;
  require_valid(target, "record '" + r.id + "' target");
  if (!policy.passes(target, r.width, r.height)) {
    throw BuildError("record '" + r.id + "': target crop " + target.str() + " fails the size policy");
  }
  auto named = detail::name_persons(r, pool);
  if (!named.by_region.count(r.target)) {
    // A non-person target is still named and cropped.
    std::vector<std::size_t> all = named.persons;
    all.push_back(r.target);
    named.persons = all;
    named.names = pool.assign(r.id, all);
    named.by_region.clear();
    for (std::size_t i = 0; i < all.size(); ++i) named.by_region[all[i]] = named.names[i];
  }
  TuningSample s = detail::stage1_shell(r, named, TaskKind::kLocation, kSourceRefcoco);
  const std::string& name = named.by_region.at(r.target);
  RawTask t{TaskKind::kLocation, named.names, 1, "", render_ref_box(target, name), name};
  s.conversation = wrap_conversation(t, templates, detail::record_seed(seed, r.id));
  return s;
}

inline TuningSample build_stage1_caption(const GroundedRecord& r, const NamePool& pool,
                                         const TemplateSet& templates = TemplateSet::standard(),
                                         std::uint64_t seed = 0) {
  detail::require_kind(r, RecordKind::kCaption);
  const auto named = detail::name_persons(r, pool);
  TuningSample s = detail::stage1_shell(r, named, TaskKind::kCaption, kSourceFlickr);
  RawTask t{TaskKind::kCaption, named.names, 1, "", detail::resolve_mentions(r.text, r, named), ""};
  s.conversation = wrap_conversation(t, templates, detail::record_seed(seed, r.id));
  return s;
}

// ---------------------------------------------------------------------------
// Forge report
// ---------------------------------------------------------------------------

struct ReportRow {
  int stage = 1;
  std::string source;
  std::size_t input = 0;
  std::size_t emitted = 0;
  std::map<std::string, std::size_t> dropped;  // reason -> count

  std::size_t dropped_total() const {
    std::size_t n = 0;
    for (const auto& [_, c] : dropped) n += c;
    return n;
  }
  bool reconciles() const { return input == emitted + dropped_total(); }
};

// Row order follows the data table: stage-1 sources, then stage-2 kinds.
struct ForgeReport {
  std::vector<ReportRow> rows;

  ReportRow& row(int stage, const std::string& source) {
    for (auto& r : rows) {
      if (r.stage == stage && r.source == source) return r;
    }
    rows.push_back({stage, source, 0, 0, {}});
    return rows.back();
  }

  std::size_t input() const {
    std::size_t n = 0;
    for (const auto& r : rows) n += r.input;
    return n;
  }
  std::size_t emitted() const {
    std::size_t n = 0;
    for (const auto& r : rows) n += r.emitted;
    return n;
  }
  std::size_t dropped() const {
    std::size_t n = 0;
    for (const auto& r : rows) n += r.dropped_total();
    return n;
  }
  std::map<std::string, std::size_t> drop_reasons() const {
    std::map<std::string, std::size_t> out;
    for (const auto& r : rows) {
      for (const auto& [k, c] : r.dropped) out[k] += c;
    }
    return out;
  }
  bool reconciles() const {
    return std::all_of(rows.begin(), rows.end(), [](const ReportRow& r) { return r.reconciles(); }) &&
           input() == emitted() + dropped();
  }

  std::string text() const {
    std::string out;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-6s %-16s %8s %8s %8s\n", "stage", "source", "input", "emitted", "dropped");
    out += buf;
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%-6d %-16s %8zu %8zu %8zu\n", r.stage, r.source.c_str(), r.input, r.emitted,
                    r.dropped_total());
      out += buf;
    }
    std::snprintf(buf, sizeof buf, "%-6s %-16s %8zu %8zu %8zu\n", "total", "", input(), emitted(), dropped());
    out += buf;
    const auto reasons = drop_reasons();
    if (!reasons.empty()) {
      out += "drop reasons:\n";
      for (const auto& [k, c] : reasons) {
        std::snprintf(buf, sizeof buf, "  %-24s %8zu\n", k.c_str(), c);
        out += buf;
      }
    }
    return out;
  }

  Json json() const {
    Json rs = Json::array();
    for (const auto& r : rows) {
      rs.push_back({{"stage", r.stage},
                    {"source", r.source},
                    {"input", r.input},
                    {"emitted", r.emitted},
                    {"dropped", r.dropped_total()},
                    {"drop_reasons", r.dropped}});
    }
    return {{"rows", rs},
            {"input", input()},
            {"emitted", emitted()},
            {"dropped", dropped()},
            {"drop_reasons", drop_reasons()},
            {"reconciles", reconciles()}};
  }
};

struct ForgeResult {
  std::vector<TuningSample> samples;
  ForgeReport report;
};

inline constexpr const char* kDropNotStage1 = "not_stage1_source";
inline constexpr const char* kDropBuildError = "build_error";
inline constexpr const char* kDropNameLinkage = "name_linkage";
inline constexpr const char* kDropInvalidSample = "invalid_sample";

inline std::set<std::string> known_names(const NamePool& pool) {
  return {pool.names().begin(), pool.names().end()};
}

namespace detail {

// Emits `s` unless it fails validation or the linkage audit.
inline void emit_checked(ForgeResult& out, ReportRow& row, TuningSample s, const std::set<std::string>& names) {
  try {
    s.validate();
  } catch (const ValidationError&) {
    ++row.dropped[kDropInvalidSample];
    return;
  }
  if (name_linkage_violation(s, names)) {
    ++row.dropped[kDropNameLinkage];
    return;
  }
  ++row.emitted;
  out.samples.push_back(std::move(s));
}

}  // namespace detail

inline ForgeResult forge_stage1(std::span<const GroundedRecord> records, const NamePool& pool,
                                const CropPolicy& policy, std::uint64_t seed,
                                const TemplateSet& templates = TemplateSet::standard()) {
  policy.validate();
  ForgeResult out;
  for (const char* src : {kSourceVcr, kSourceRefcoco, kSourceFlickr}) out.report.row(1, src);
  const auto names = known_names(pool);
  for (const auto& r : records) {
    const char* source = r.kind == RecordKind::kQa          ? kSourceVcr
                         : r.kind == RecordKind::kReferring ? kSourceRefcoco
                         : r.kind == RecordKind::kCaption   ? kSourceFlickr
                                                            : "other";
    ReportRow& row = out.report.row(1, source);
    ++row.input;
    if (r.kind == RecordKind::kMovieShot) {
      ++row.dropped[kDropNotStage1];
      continue;
    }
    const FilterDecision d = filter_record(r, policy);
    if (!d.keep) {
      ++row.dropped[d.reason];
      continue;
    }
    try {
      TuningSample s = r.kind == RecordKind::kQa          ? build_stage1_qa(r, pool, templates, seed)
                       : r.kind == RecordKind::kReferring ? build_stage1_location(r, pool, policy, templates, seed)
                                                          : build_stage1_caption(r, pool, templates, seed);
      detail::emit_checked(out, row, std::move(s), names);
    } catch (const BuildError&) {
      ++row.dropped[kDropBuildError];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stage 2: movie shots
// ---------------------------------------------------------------------------

struct ShotPartition {
  std::string movie_id;
  std::map<std::string, std::vector<GroundedRecord>> id_pool;  // single-character shots
  std::vector<GroundedRecord> test_pool;                       // multi-character shots
  std::vector<std::pair<std::string, std::string>> discarded;  // (shot id, reason)
};

inline constexpr const char* kDropNoCharacters = "no_characters";

inline ShotPartition partition_shots(std::span<const GroundedRecord> shots) {
  ShotPartition p;
  for (const auto& s : shots) {
    if (s.kind != RecordKind::kMovieShot) throw ValidationError("partition: record '" + s.id + "' is not a movie shot");
    if (p.movie_id.empty()) p.movie_id = s.movie_id;
    if (s.movie_id != p.movie_id) {
      throw ValidationError("partition: shot '" + s.id + "' belongs to movie " + s.movie_id + ", expected " +
                            p.movie_id);
    }
    if (s.regions.empty()) {
      p.discarded.emplace_back(s.id, kDropNoCharacters);
    } else if (s.regions.size() == 1) {
      p.id_pool[s.regions[0].label].push_back(s);
    } else {
      p.test_pool.push_back(s);
    }
  }
  return p;
}

// Shots grouped per movie, movies in order of first appearance.
inline std::vector<ShotPartition> partition_by_movie(std::span<const GroundedRecord> records) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<GroundedRecord>> by_movie;
  for (const auto& r : records) {
    if (r.kind != RecordKind::kMovieShot) continue;
    if (!by_movie.count(r.movie_id)) order.push_back(r.movie_id);
    by_movie[r.movie_id].push_back(r);
  }
  std::vector<ShotPartition> out;
  for (const auto& m : order) out.push_back(partition_shots(by_movie[m]));
  return out;
}

enum class Stage2Kind { kMatching, kLocation, kQaSingle, kCaptionSingle, kQaMulti, kCaptionMulti };

inline constexpr std::array<Stage2Kind, 6> kAllStage2Kinds = {Stage2Kind::kMatching,      Stage2Kind::kLocation,
                                                              Stage2Kind::kQaSingle,      Stage2Kind::kCaptionSingle,
                                                              Stage2Kind::kQaMulti,       Stage2Kind::kCaptionMulti};

inline std::string to_string(Stage2Kind k) {
  switch (k) {
    case Stage2Kind::kMatching: return "matching";
    case Stage2Kind::kLocation: return "location";
    case Stage2Kind::kQaSingle: return "qa_single";
    case Stage2Kind::kCaptionSingle: return "caption_single";
    case Stage2Kind::kQaMulti: return "qa_multi";
    case Stage2Kind::kCaptionMulti: return "caption_multi";
  }
  return "?";
}

inline Stage2Kind parse_stage2_kind(std::string_view s) {
  for (Stage2Kind k : kAllStage2Kinds) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown stage-2 kind '" + std::string(s) + "'");
}

// Comma-separated kinds, or "all".
inline std::vector<Stage2Kind> parse_stage2_kinds(std::string_view list) {
  if (list == "all") return {kAllStage2Kinds.begin(), kAllStage2Kinds.end()};
  std::vector<Stage2Kind> out;
  std::size_t start = 0;
  while (start <= list.size()) {
    const std::size_t comma = std::min(list.find(',', start), list.size());
    const auto item = list.substr(start, comma - start);
    if (!item.empty()) {
      const Stage2Kind k = parse_stage2_kind(item);
      if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(k);
    }
    start = comma + 1;
  }
  if (out.empty()) throw ConfigError("no stage-2 kinds given");
  std::sort(out.begin(), out.end());
  return out;
}

inline bool is_generated(Stage2Kind k) {
  return k == Stage2Kind::kQaSingle || k == Stage2Kind::kCaptionSingle || k == Stage2Kind::kQaMulti ||
         k == Stage2Kind::kCaptionMulti;
}
inline bool is_multi(Stage2Kind k) { return k == Stage2Kind::kQaMulti || k == Stage2Kind::kCaptionMulti; }
inline bool is_qa(Stage2Kind k) { return k == Stage2Kind::kQaSingle || k == Stage2Kind::kQaMulti; }

inline std::string_view generator_prompt(Stage2Kind k) {
  switch (k) {
    case Stage2Kind::kCaptionSingle: return prompts::kGenCaptionSingle;
    case Stage2Kind::kCaptionMulti: return prompts::kGenCaptionMulti;
    case Stage2Kind::kQaSingle: return prompts::kGenQaSingle;
    case Stage2Kind::kQaMulti: return prompts::kGenQaMulti;
    default: throw ConfigError("no generator prompt for " + to_string(k));
  }
}

// Character lines "Name: (left, top, right, bottom)" split by '\n'.
inline std::string character_lines(const GroundedRecord& shot) {
  std::string out;
  for (std::size_t i = 0; i < shot.regions.size(); ++i) {
    if (i) out += '\n';
    out += shot.regions[i].label + ": " + shot.regions[i].bbox.str();
  }
  return out;
}

// Single: [image, "image size: (W, H)\n<lines>"]. Multi: the size line, then
// per image "Image k:" + image + its lines.
inline ChatRequest render_generator_request(Stage2Kind kind, std::span<const GroundedRecord> shots) {
  if (shots.empty()) throw ValidationError("generator request: no test images");
  ChatRequest r;
  r.system = std::string(generator_prompt(kind));
  r.temperature = kGeneratorTemperature;
  const std::string size =
      "image size: (" + std::to_string(shots[0].width) + ", " + std::to_string(shots[0].height) + ")";
  if (!is_multi(kind)) {
    r.parts = {ChatPart::image(shots[0].image_ref), ChatPart::text(size + "\n" + character_lines(shots[0]))};
    return r;
  }
  r.parts.push_back(ChatPart::text(size));
  for (std::size_t i = 0; i < shots.size(); ++i) {
    r.parts.push_back(ChatPart::text("Image " + std::to_string(i + 1) + ":"));
    r.parts.push_back(ChatPart::image(shots[i].image_ref));
    r.parts.push_back(ChatPart::text(character_lines(shots[i])));
  }
  return r;
}

inline constexpr const char* kRejectInappropriate = "inappropriate";
inline constexpr const char* kRejectUnparseableQa = "unparseable_qa";
inline constexpr const char* kRejectEmpty = "empty_response";
inline constexpr const char* kDropMissingIdImage = "missing_id_image";
inline constexpr const char* kDropInsufficientImages = "insufficient_images";
inline constexpr const char* kDropInsufficientDistractors = "insufficient_distractors";

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

// "no", "No.", "'no'" all count as the appropriateness rejection.
inline bool is_rejection(const std::string& response) {
  std::string t = trim(response);
  while (!t.empty() && (t.back() == '.' || t.back() == '\'' || t.back() == '"')) t.pop_back();
  while (!t.empty() && (t.front() == '\'' || t.front() == '"')) t.erase(t.begin());
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  return t == "no";
}

struct QaPair {
  std::string question;
  std::string answer;
};

// Splits on the literal newline the generator prompt asks for. Accepts a
// real line break or the two characters '\' 'n'.
inline std::optional<QaPair> split_qa(const std::string& response) {
  const std::string t = trim(response);
  std::size_t pos = t.find('\n');
  std::size_t width = 1;
  if (pos == std::string::npos) {
    pos = t.find("\\n");
    width = 2;
  }
  if (pos == std::string::npos) return std::nullopt;
  QaPair qa{trim(t.substr(0, pos)), trim(t.substr(pos + width))};
  if (qa.question.empty() || qa.answer.empty()) return std::nullopt;
  return qa;
}

struct Stage2Outcome {
  std::optional<TuningSample> sample;
  std::string reason;  // set when no sample
};

namespace detail {

// ID image per character, in order of first appearance across the shots.
inline std::optional<std::vector<IdRef>> pick_id_images(std::span<const GroundedRecord> shots,
                                                        const ShotPartition& pools, Rng& rng) {
  std::vector<IdRef> refs;
  std::set<std::string> seen;
  for (const auto& shot : shots) {
    for (const auto& reg : shot.regions) {
      if (!seen.insert(reg.label).second) continue;
      auto it = pools.id_pool.find(reg.label);
      if (it == pools.id_pool.end() || it->second.empty()) return std::nullopt;
      const auto& pick = it->second[rng.below(it->second.size())];
      refs.push_back({reg.label, pick.image_ref, std::nullopt});
    }
  }
  return refs;
}

inline std::vector<std::string> names_of(const std::vector<IdRef>& refs) {
  std::vector<std::string> out;
  for (const auto& r : refs) out.push_back(r.name);
  return out;
}

inline std::string group_id(std::span<const GroundedRecord> shots) {
  std::string id;
  for (const auto& s : shots) id += (id.empty() ? "" : "+") + s.id;
  return id;
}

}  // namespace detail

inline Stage2Outcome build_stage2_generated(std::span<const GroundedRecord> shots, const ShotPartition& pools,
                                            Stage2Kind kind, Gateway& gateway, std::uint64_t seed,
                                            const TemplateSet& templates = TemplateSet::standard()) {
  if (!is_generated(kind)) throw ConfigError("build_stage2_generated: " + to_string(kind) + " is not generated");
  Rng rng(mix_seed(seed, fnv1a(detail::group_id(shots) + "/" + to_string(kind))));
  auto refs = detail::pick_id_images(shots, pools, rng);
  if (!refs) return {std::nullopt, kDropMissingIdImage};
  if (refs->size() + shots.size() > kMaxImagesPerSample) return {std::nullopt, kDropInsufficientImages};

  const ChatResponse resp = gateway.complete(render_generator_request(kind, shots));
  if (is_rejection(resp.text)) return {std::nullopt, kRejectInappropriate};
  if (trim(resp.text).empty()) return {std::nullopt, kRejectEmpty};

  RawTask task;
  task.id_names = detail::names_of(*refs);
  task.n_tests = shots.size();
  if (is_qa(kind)) {
    const auto qa = split_qa(resp.text);
    if (!qa) return {std::nullopt, kRejectUnparseableQa};
    task.kind = TaskKind::kQa;
    task.question = qa->question;
    task.answer = qa->answer;
  } else {
    task.kind = TaskKind::kCaption;
    task.answer = resp.text;
  }
  TuningSample s;
  s.id = detail::group_id(shots) + "/" + to_string(kind);
  s.stage = 2;
  s.task = task.kind;
  s.source = to_string(kind);
  s.id_refs = std::move(*refs);
  for (const auto& shot : shots) s.test_image_refs.push_back(shot.image_ref);
  s.conversation = wrap_conversation(task, templates, rng.next_u64());
  return {std::move(s), ""};
}

inline Stage2Outcome build_stage2_location(const GroundedRecord& shot, const ShotPartition& pools,
                                           std::uint64_t seed, const TemplateSet& templates = TemplateSet::standard()) {
  Rng rng(mix_seed(seed, fnv1a(shot.id + "/location")));
  auto refs = detail::pick_id_images(std::span(&shot, 1), pools, rng);
  if (!refs) return {std::nullopt, kDropMissingIdImage};
  const Region& target = shot.regions[rng.below(shot.regions.size())];
  RawTask task{TaskKind::kLocation, detail::names_of(*refs), 1, "", render_ref_box(target.bbox, target.label),
               target.label};
  TuningSample s;
  s.id = shot.id + "/location";
  s.stage = 2;
  s.task = TaskKind::kLocation;
  s.source = to_string(Stage2Kind::kLocation);
  s.id_refs = std::move(*refs);
  s.test_image_refs = {shot.image_ref};
  s.conversation = wrap_conversation(task, templates, rng.next_u64());
  return {std::move(s), ""};
}

// Query image of `character` plus four options: one other image of the same
// character and three images of other characters, preferring the same movie.
inline Stage2Outcome build_matching(std::span<const ShotPartition> movies, std::size_t movie,
                                    const std::string& character, std::size_t query, std::uint64_t seed,
                                    const TemplateSet& templates = TemplateSet::standard()) {
  const ShotPartition& home = movies[movie];
  const auto& own = home.id_pool.at(character);
  const std::string qid = own.at(query).id;
  Rng rng(mix_seed(seed, fnv1a(qid + "/matching")));
  std::vector<std::size_t> positives;
  for (std::size_t i = 0; i < own.size(); ++i) {
    if (i != query && own[i].image_ref != own[query].image_ref) positives.push_back(i);
  }
  if (positives.empty()) return {std::nullopt, kDropInsufficientImages};
  const GroundedRecord& positive = own[positives[rng.below(positives.size())]];

  struct Candidate {
    std::string label;
    const std::vector<GroundedRecord>* images;
  };
  std::vector<Candidate> same, other;
  for (std::size_t m = 0; m < movies.size(); ++m) {
    for (const auto& [name, images] : movies[m].id_pool) {
      if (m == movie && name == character) continue;
      if (images.empty()) continue;
      (m == movie ? same : other).push_back({m == movie ? name : movies[m].movie_id + ":" + name, &images});
    }
  }
  rng.shuffle(same);
  rng.shuffle(other);
  std::vector<Candidate> chosen(same.begin(), same.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(3, same.size())));
  for (std::size_t i = 0; chosen.size() < 3 && i < other.size(); ++i) chosen.push_back(other[i]);
  if (chosen.size() < 3) return {std::nullopt, kDropInsufficientDistractors};

  std::vector<std::pair<std::string, std::string>> options = {{character, positive.image_ref}};
  for (const auto& c : chosen) options.emplace_back(c.label, (*c.images)[rng.below(c.images->size())].image_ref);
  rng.shuffle(options);
  std::size_t answer = 0;
  for (std::size_t i = 0; i < options.size(); ++i) {
    if (options[i].first == character) answer = i;
  }
  TuningSample s;
  s.id = qid + "/matching";
  s.stage = 2;
  s.task = TaskKind::kMatching;
  s.source = to_string(Stage2Kind::kMatching);
  s.id_refs = {{character, own[query].image_ref, std::nullopt}};
  for (const auto& [label, ref] : options) {
    s.test_image_refs.push_back(ref);
    s.option_labels.push_back(label);
  }
  RawTask task{TaskKind::kMatching, {character}, options.size(), "", std::string(kOptionLetters[answer]), character};
  s.conversation = wrap_conversation(task, templates, rng.next_u64());
  return {std::move(s), ""};
}

// Empty when exactly one option shows the query character and the answer
// letter points at it.
inline std::optional<std::string> matching_violation(const TuningSample& s) {
  if (s.task != TaskKind::kMatching) return std::nullopt;
  if (s.id_refs.size() != 1) return "matching sample must have one ID reference";
  if (s.option_labels.size() != s.test_image_refs.size()) return "option labels missing";
  const std::string& who = s.id_refs[0].name;
  const auto positives = std::count(s.option_labels.begin(), s.option_labels.end(), who);
  if (positives != 1) return "expected exactly one positive, found " + std::to_string(positives);
  const auto it = std::find(s.option_labels.begin(), s.option_labels.end(), who);
  const auto letter = std::string(kOptionLetters.at(static_cast<std::size_t>(it - s.option_labels.begin())));
  if (trim(s.conversation.back().text) != letter) return "answer letter does not point at the positive";
  return std::nullopt;
}

struct Stage2Options {
  std::vector<Stage2Kind> kinds{kAllStage2Kinds.begin(), kAllStage2Kinds.end()};
  std::uint64_t seed = 0;
  std::size_t multi_group = 2;  // test shots per multi-image sample
};

// Candidates per kind, in a fixed order so an ordered mock script replays
// deterministically:
//   matching: every ID image of a character with >= 2 images (as query)
//   location, *_single: every test shot
//   *_multi: consecutive non-overlapping groups of test shots per movie
inline ForgeResult forge_stage2(std::span<const GroundedRecord> records, const Stage2Options& opt, Gateway* gateway,
                                const TemplateSet& templates = TemplateSet::standard(),
                                const NamePool& pool = NamePool()) {
  if (opt.multi_group < 2) throw ConfigError("stage 2: multi-image groups need at least 2 shots");
  const auto movies = partition_by_movie(records);
  ForgeResult out;
  for (Stage2Kind k : opt.kinds) out.report.row(2, to_string(k));
  auto names = known_names(pool);
  for (const auto& m : movies) {
    for (const auto& [n, _] : m.id_pool) names.insert(n);
    for (const auto& t : m.test_pool) {
      for (const auto& r : t.regions) names.insert(r.label);
    }
  }
  for (Stage2Kind kind : opt.kinds) {
    ReportRow& row = out.report.row(2, to_string(kind));
    auto take = [&](Stage2Outcome o) {
      ++row.input;
      if (o.sample) {
        detail::emit_checked(out, row, std::move(*o.sample), names);
      } else {
        ++row.dropped[o.reason];
      }
    };
    if (is_generated(kind) && !gateway) throw ConfigError("stage 2: " + to_string(kind) + " needs a generator gateway");
    for (std::size_t mi = 0; mi < movies.size(); ++mi) {
      const auto& m = movies[mi];
      switch (kind) {
        case Stage2Kind::kMatching:
          for (const auto& [name, images] : m.id_pool) {
            if (images.size() < 2) {
              row.input += images.size();
              row.dropped[kDropInsufficientImages] += images.size();
              continue;
            }
            for (std::size_t q = 0; q < images.size(); ++q) take(build_matching(movies, mi, name, q, opt.seed, templates));
          }
          break;
        case Stage2Kind::kLocation:
          for (const auto& shot : m.test_pool) take(build_stage2_location(shot, m, opt.seed, templates));
          break;
        case Stage2Kind::kQaSingle:
        case Stage2Kind::kCaptionSingle:
          for (const auto& shot : m.test_pool) {
            take(build_stage2_generated(std::span(&shot, 1), m, kind, *gateway, opt.seed, templates));
          }
          break;
        case Stage2Kind::kQaMulti:
        case Stage2Kind::kCaptionMulti:
          for (std::size_t i = 0; i + opt.multi_group <= m.test_pool.size(); i += opt.multi_group) {
            take(build_stage2_generated(std::span(m.test_pool).subspan(i, opt.multi_group), m, kind, *gateway,
                                        opt.seed, templates));
          }
          break;
      }
    }
  }
  return out;
}

// Generator requests forge_stage2 will issue, in issue order, assuming every
// candidate reaches the gateway (useful for building keyed mock scripts).
inline std::vector<ChatRequest> planned_generator_requests(std::span<const GroundedRecord> records,
                                                           const Stage2Options& opt) {
  std::vector<ChatRequest> out;
  const auto movies = partition_by_movie(records);
  for (Stage2Kind kind : opt.kinds) {
    if (!is_generated(kind)) continue;
    for (const auto& m : movies) {
      if (!is_multi(kind)) {
        for (const auto& shot : m.test_pool) out.push_back(render_generator_request(kind, std::span(&shot, 1)));
      } else {
        for (std::size_t i = 0; i + opt.multi_group <= m.test_pool.size(); i += opt.multi_group) {
          out.push_back(render_generator_request(kind, std::span(m.test_pool).subspan(i, opt.multi_group)));
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// General-data mixing
// ---------------------------------------------------------------------------

struct MixConfig {
  double general_fraction = 0.10;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(general_fraction >= 0.0 && general_fraction < 1.0)) {
      throw ConfigError("mix: general fraction must be in [0, 1)");
    }
  }
};

// General samples needed so they make up `fraction` of the final mixture.
inline std::size_t general_count(std::size_t n_id, double fraction) {
  return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n_id) / (1.0 - fraction)));
}

inline std::vector<TuningSample> mix_general(std::span<const TuningSample> id_samples,
                                             std::span<const TuningSample> general, const MixConfig& cfg) {
  cfg.validate();
  const std::size_t need = general_count(id_samples.size(), cfg.general_fraction);
  if (need > general.size()) {
    throw ValidationError("mix: fraction " + std::to_string(cfg.general_fraction) + " of the final mixture needs " +
                          std::to_string(need) + " general samples, pool has " + std::to_string(general.size()));
  }
  Rng rng(mix_seed(cfg.seed, 0x6d6978ULL));
  std::vector<std::size_t> idx(general.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(idx);
  std::vector<TuningSample> out(id_samples.begin(), id_samples.end());
  for (std::size_t i = 0; i < need; ++i) out.push_back(general[idx[i]]);
  rng.shuffle(out);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

struct CorpusOptions {
  std::size_t n_records = 100;
  std::uint64_t seed = 0;
  double single_person_rate = 0.15;
  double tiny_crop_rate = 0.05;
  double movie_shot_rate = 0.3;
  std::size_t n_movies = 2;
  std::size_t characters_per_movie = 5;
};

namespace detail {

inline constexpr std::array<std::string_view, 8> kActions = {"smiling", "talking", "waiting", "laughing",
                                                             "walking", "reading", "pointing", "standing"};
inline constexpr std::array<std::string_view, 6> kObjects = {"chair", "table", "car", "dog", "lamp", "door"};

inline BBox random_box(Rng& rng, long long w, long long h, long long min_side, long long max_side) {
  const long long bw = min_side + static_cast<long long>(rng.below(static_cast<std::uint64_t>(max_side - min_side + 1)));
  const long long bh = min_side + static_cast<long long>(rng.below(static_cast<std::uint64_t>(max_side - min_side + 1)));
  const long long l = static_cast<long long>(rng.below(static_cast<std::uint64_t>(w - bw + 1)));
  const long long t = static_cast<long long>(rng.below(static_cast<std::uint64_t>(h - bh + 1)));
  return {l, t, l + bw, t + bh};
}

}  // namespace detail

// Records of every kind, including single-person and tiny-crop records the
// filter must drop. Texts use only words outside the default name pool.
inline std::vector<GroundedRecord> make_synthetic_corpus(const CorpusOptions& opt) {
  Rng rng(mix_seed(opt.seed, 0x636f72ULL));
  std::vector<GroundedRecord> out;
  const long long W = 640, H = 480;
  std::vector<std::vector<std::string>> casts(opt.n_movies);
  for (std::size_t m = 0; m < opt.n_movies; ++m) {
    for (std::size_t c = 0; c < opt.characters_per_movie; ++c) {
      casts[m].push_back(std::string(kDefaultNames[100 + (m * opt.characters_per_movie + c) % 100]));
    }
  }
  std::size_t shot_counter = 0;
  for (std::size_t i = 0; i < opt.n_records; ++i) {
    GroundedRecord r;
    r.image_ref = "synthetic/img" + std::to_string(i) + ".jpg";
    r.width = W;
    r.height = H;
    const double u = rng.uniform();
    if (u < opt.movie_shot_rate && opt.n_movies > 0) {
      const std::size_t m = shot_counter++ % opt.n_movies;
      r.id = "shot" + std::to_string(i);
      r.kind = RecordKind::kMovieShot;
      r.movie_id = "movie" + std::to_string(m);
      const std::size_t n_chars = rng.uniform() < 0.5 ? 1 : 2 + rng.below(2);
      auto cast = casts[m];
      rng.shuffle(cast);
      for (std::size_t c = 0; c < n_chars && c < cast.size(); ++c) {
        r.regions.push_back({detail::random_box(rng, W, H, 60, 200), cast[c]});
      }
      out.push_back(std::move(r));
      continue;
    }
    r.id = "rec" + std::to_string(i);
    const std::size_t n_persons = rng.uniform() < opt.single_person_rate ? 1 : 2 + rng.below(2);
    for (std::size_t p = 0; p < n_persons; ++p) r.regions.push_back({detail::random_box(rng, W, H, 60, 220), "person"});
    if (n_persons >= 2 && rng.uniform() < opt.tiny_crop_rate) r.regions[0].bbox = detail::random_box(rng, W, H, 8, 16);
    r.regions.push_back({detail::random_box(rng, W, H, 40, 120), std::string(detail::kObjects[rng.below(detail::kObjects.size())])});
    const std::string act = std::string(detail::kActions[rng.below(detail::kActions.size())]);
    const int which = static_cast<int>(rng.below(3));
    if (which == 0) {
      r.kind = RecordKind::kQa;
      r.mentions = {{"p1", 0}, {"obj", n_persons}};
      r.question = "Why is [p1] " + act + " near [obj]?";
      r.answer = "[p1] is " + act + " because of [obj].";
    } else if (which == 1) {
      r.kind = RecordKind::kReferring;
      r.target = rng.below(n_persons);
      r.text = "the person " + act;
    } else {
      r.kind = RecordKind::kCaption;
      r.mentions = {{"a", 0}};
      r.text = "[a] is " + act + ".";
      if (n_persons >= 2) {
        r.mentions["b"] = 1;
        r.text = "[a] is " + act + " next to [b].";
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

// Plain conversations without ID references, standing in for general
// instruction data.
inline std::vector<TuningSample> make_general_samples(std::size_t n, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x67656eULL));
  std::vector<TuningSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    TuningSample s;
    s.id = "general" + std::to_string(i);
    s.stage = 2;
    s.task = TaskKind::kQa;
    s.source = "general";
    s.test_image_refs = {"general/img" + std::to_string(i) + ".jpg"};
    const std::string obj(detail::kObjects[rng.below(detail::kObjects.size())]);
    s.conversation = {{"user", "<Test-Img1> What object is in the image?"}, {"assistant", "There is a " + obj + "."}};
    out.push_back(std::move(s));
  }
  return out;
}

inline std::string records_jsonl(std::span<const GroundedRecord> records) {
  std::string out;
  for (const auto& r : records) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

}  // namespace idvlm::forge

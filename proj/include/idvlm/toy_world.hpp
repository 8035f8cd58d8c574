#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "idvlm/id_former.hpp"
#include "idvlm/kv_config.hpp"
#include "idvlm/names.hpp"
#include "idvlm/rng.hpp"

namespace idvlm {

inline constexpr std::size_t kVocabSize = 256;
inline constexpr std::size_t kNameTokens = 64;

// 1-based, as written in prompts.
inline std::string id_placeholder(std::size_t i) { return "<ID-Img" + std::to_string(i) + ">"; }
inline std::string test_placeholder(std::size_t i) { return "<Test-Img" + std::to_string(i) + ">"; }

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

class Vocab {
 public:
  // Specials, image placeholders, task words, the first 64 pool names, then
  // hash buckets for everything else, padded to exactly 256 entries.
  static Vocab standard(std::size_t max_images = kDefaultMaxImages) {
    Vocab v;
    v.add("<eot>");
    v.add("<unk>");
    for (std::size_t i = 1; i <= max_images; ++i) v.add(id_placeholder(i));
    for (std::size_t i = 1; i <= max_images; ++i) v.add(test_placeholder(i));
    static constexpr std::array<std::string_view, 33> kWords = {
        "is",  ".",     ",",     "?",       "!",     ":",   "who",  "on",    "the",
        "left", "middle", "right", "in",   "where", "which", "of",  "shows", "describe",
        "and", "a",     "image", "what",    "doing", "A",   "B",    "C",     "D",
        "bbox", "[",    "]",     "(",     ")"};
    for (auto w : kWords) v.add(std::string(w));
    for (std::size_t i = 0; i < kNameTokens; ++i) v.names_.push_back(v.add(std::string(kDefaultNames[i])));
    v.first_bucket_ = static_cast<int>(v.tokens_.size());
    for (std::size_t b = 0; v.tokens_.size() < kVocabSize; ++b) v.add("<w" + std::to_string(b) + ">");
    v.eot_ = *v.find("<eot>");
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  int eot() const { return eot_; }
  const std::vector<int>& names() const { return names_; }
  bool is_name(int id) const { return std::find(names_.begin(), names_.end(), id) != names_.end(); }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw ValidationError("vocab: token id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::optional<int> find(std::string_view tok) const {
    auto it = index_.find(std::string(tok));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  int id(std::string_view tok) const {
    if (auto f = find(tok)) return *f;
    throw ConfigError("vocab: unknown token '" + std::string(tok) + "'");
  }

  // Exact match, then lower-case match, then a stable hash bucket.
  int lookup(std::string_view word) const {
    if (auto f = find(word)) return *f;
    std::string lower(word);
    for (char& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (auto f = find(lower)) return *f;
    const auto n_buckets = static_cast<std::uint64_t>(tokens_.size()) - first_bucket_;
    return first_bucket_ + static_cast<int>(fnv1a(lower) % n_buckets);
  }

  // 0-based slot of an image placeholder token, if it is one.
  std::optional<std::size_t> id_slot(int id) const { return slot_of(id, "<ID-Img"); }
  std::optional<std::size_t> test_slot(int id) const { return slot_of(id, "<Test-Img"); }

  // Word runs, single punctuation marks and whole `<...>` tokens.
  std::vector<int> encode(std::string_view text) const {
    std::vector<int> out;
    std::size_t i = 0;
    while (i < text.size()) {
      const unsigned char c = static_cast<unsigned char>(text[i]);
      if (std::isspace(c)) {
        ++i;
      } else if (c == '<' && text.find('>', i) != std::string_view::npos) {
        const std::size_t close = text.find('>', i);
        const std::string_view tok = text.substr(i, close - i + 1);
        if (auto f = find(tok)) {
          out.push_back(*f);
          i = close + 1;
        } else {
          out.push_back(lookup("<"));
          ++i;
        }
      } else if (std::isalnum(c) || c == '\'' || c == '-' || c >= 0x80) {
        std::size_t j = i;
        while (j < text.size()) {
          const unsigned char d = static_cast<unsigned char>(text[j]);
          if (!(std::isalnum(d) || d == '\'' || d == '-' || d >= 0x80)) break;
          ++j;
        }
        out.push_back(lookup(text.substr(i, j - i)));
        i = j;
      } else {
        out.push_back(lookup(text.substr(i, 1)));
        ++i;
      }
    }
    return out;
  }

  // Space-joined, with no space before closing punctuation. <eot> is dropped.
  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
      if (id == eot_) continue;
      const std::string& t = token(id);
      const bool attach = t == "." || t == "," || t == "?" || t == "!" || t == ":" || t == "]" || t == ")";
      if (!out.empty() && !attach && out.back() != '[' && out.back() != '(') out += ' ';
      out += t;
    }
    return out;
  }

 private:
  int add(std::string tok) {
    const int id = static_cast<int>(tokens_.size());
    index_.emplace(tok, id);
    tokens_.push_back(std::move(tok));
    return id;
  }

  std::optional<std::size_t> slot_of(int id, std::string_view stem) const {
    const std::string& t = token(id);
    if (t.size() <= stem.size() + 1 || t.compare(0, stem.size(), stem) != 0 || t.back() != '>') {
      return std::nullopt;
    }
    return std::stoul(t.substr(stem.size(), t.size() - stem.size() - 1)) - 1;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::vector<int> names_;
  int first_bucket_ = 0;
  int eot_ = 0;
};

// ---------------------------------------------------------------------------
// Synthetic world
// ---------------------------------------------------------------------------

inline constexpr std::array<std::string_view, 3> kSlotWords = {"left", "middle", "right"};

struct WorldConfig {
  std::size_t n_identities = 20;
  std::size_t n_heldout = 5;  // the last n_heldout identities
  std::size_t d_code = 16;
  std::size_t d_pose = 8;
  std::size_t d_visual = 32;
  std::size_t patches_per_image = 4;
  double pose_scale = 1.0;
  double slot_scale = 1.0;

  void validate() const {
    if (n_identities < 4) throw ConfigError("world: need at least 4 identities");
    if (n_heldout >= n_identities || n_identities - n_heldout < 3) {
      throw ConfigError("world: n_heldout leaves fewer than 3 training identities");
    }
    if (n_heldout != 0 && n_heldout < 3) throw ConfigError("world: n_heldout must be 0 or >= 3");
    if (d_code < 1 || d_visual < 1 || patches_per_image < 1) throw ConfigError("world: empty extent");
    if (!(pose_scale >= 0.0) || !(slot_scale >= 0.0)) throw ConfigError("world: negative scale");
  }

  static WorldConfig from_kv(const KvConfig& kv) {
    WorldConfig c;
    auto count = [&](const char* key, std::size_t fallback) {
      const long long v = kv.integer_or(key, static_cast<long long>(fallback));
      if (v < 0) throw ConfigError(std::string("world: ") + key + " must be >= 0");
      return static_cast<std::size_t>(v);
    };
    c.n_identities = count("world_identities", c.n_identities);
    c.n_heldout = count("world_heldout", c.n_heldout);
    c.d_code = count("world_d_code", c.d_code);
    c.d_pose = count("world_d_pose", c.d_pose);
    c.d_visual = count("d_visual", c.d_visual);
    c.patches_per_image = count("world_patches", c.patches_per_image);
    c.pose_scale = kv.real_or("world_pose_scale", c.pose_scale);
    c.slot_scale = kv.real_or("world_slot_scale", c.slot_scale);
    c.validate();
    return c;
  }

  void write_kv(KvConfig& kv) const {
    kv.set("world_identities", std::to_string(n_identities));
    kv.set("world_heldout", std::to_string(n_heldout));
    kv.set("world_d_code", std::to_string(d_code));
    kv.set("world_d_pose", std::to_string(d_pose));
    kv.set("d_visual", std::to_string(d_visual));
    kv.set("world_patches", std::to_string(patches_per_image));
    kv.set("world_pose_scale", format_real(pose_scale));
    kv.set("world_slot_scale", format_real(slot_scale));
  }

  static std::string format_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }
};

// Fixed identity codes plus a frozen random "visual encoder" projection.
class SyntheticWorld {
 public:
  static SyntheticWorld create(const WorldConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    SyntheticWorld w;
    w.cfg_ = cfg;
    Rng rng(seed);
    w.codes_ = Tensor({cfg.n_identities, cfg.d_code});
    for (double& v : w.codes_.values()) v = rng.normal();
    const std::size_t d_in = cfg.d_code + cfg.d_pose;
    w.projection_ = Tensor({cfg.d_visual, d_in});
    const double s = 1.0 / std::sqrt(static_cast<double>(d_in));
    for (double& v : w.projection_.values()) v = s * rng.normal();
    w.slots_ = Tensor({kSlotWords.size(), cfg.d_visual});
    for (double& v : w.slots_.values()) v = rng.normal();
    return w;
  }

  const WorldConfig& config() const { return cfg_; }
  const Tensor& codes() const { return codes_; }

  std::vector<int> train_identities() const { return range(0, cfg_.n_identities - cfg_.n_heldout); }
  std::vector<int> heldout_identities() const {
    return range(cfg_.n_identities - cfg_.n_heldout, cfg_.n_identities);
  }

  // One patch per row: projection(code (+) pose_scale * z_p), z_p seeded by
  // (pose_seed, p).
  Tensor encode_patches(int identity, std::uint64_t pose_seed) const {
    if (identity < 0 || static_cast<std::size_t>(identity) >= cfg_.n_identities) {
      throw ValidationError("world: identity " + std::to_string(identity) + " out of range [0, " +
                            std::to_string(cfg_.n_identities) + ")");
    }
    const std::size_t d_in = cfg_.d_code + cfg_.d_pose;
    Tensor out({cfg_.patches_per_image, cfg_.d_visual});
    std::vector<double> in(d_in);
    for (std::size_t p = 0; p < cfg_.patches_per_image; ++p) {
      Rng rng(mix_seed(pose_seed, p));
      for (std::size_t i = 0; i < cfg_.d_code; ++i) in[i] = codes_.at(static_cast<std::size_t>(identity), i);
      for (std::size_t i = 0; i < cfg_.d_pose; ++i) in[cfg_.d_code + i] = cfg_.pose_scale * rng.normal();
      for (std::size_t r = 0; r < cfg_.d_visual; ++r) {
        double acc = 0.0;
        for (std::size_t i = 0; i < d_in; ++i) acc += projection_.at(r, i) * in[i];
        out.at(p, r) = acc;
      }
    }
    return out;
  }

  struct Placement {
    int identity;
    std::size_t slot;  // index into kSlotWords
    std::uint64_t pose_seed;
  };

  // Scene patches: each placed identity's patches shifted by its slot vector.
  Tensor scene_patches(std::span<const Placement> placements) const {
    if (placements.empty()) throw ValidationError("world: scene without identities");
    std::vector<Tensor> parts;
    for (const auto& pl : placements) {
      if (pl.slot >= kSlotWords.size()) throw ValidationError("world: slot out of range");
      Tensor t = encode_patches(pl.identity, pl.pose_seed);
      for (std::size_t p = 0; p < t.rows(); ++p) {
        for (std::size_t c = 0; c < t.cols(); ++c) t.at(p, c) += cfg_.slot_scale * slots_.at(pl.slot, c);
      }
      parts.push_back(std::move(t));
    }
    return vstack(parts);
  }

 private:
  static std::vector<int> range(std::size_t lo, std::size_t hi) {
    std::vector<int> out;
    for (std::size_t i = lo; i < hi; ++i) out.push_back(static_cast<int>(i));
    return out;
  }

  WorldConfig cfg_;
  Tensor codes_;
  Tensor projection_;
  Tensor slots_;
};

inline VisualFeatures synth_encode(const SyntheticWorld& world, int identity, std::uint64_t pose_seed) {
  return {world.encode_patches(identity, pose_seed), ImageRole::kId, 0};
}

// ---------------------------------------------------------------------------
// Interleaved samples
// ---------------------------------------------------------------------------

enum class TaskKind { kMatching, kLocation, kQa, kCaption };

inline constexpr std::array<TaskKind, 4> kAllTasks = {TaskKind::kMatching, TaskKind::kLocation,
                                                      TaskKind::kQa, TaskKind::kCaption};

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kMatching: return "matching";
    case TaskKind::kLocation: return "location";
    case TaskKind::kQa: return "qa";
    case TaskKind::kCaption: return "caption";
  }
  return "?";
}

inline TaskKind parse_task_kind(std::string_view s) {
  for (TaskKind k : kAllTasks) {
    if (to_string(k) == s) return k;
  }
  throw ValidationError("unknown task kind '" + std::string(s) + "'");
}

struct PromptSegment {
  enum class Kind { kText, kIdSlot, kTestSlot };
  Kind kind = Kind::kText;
  std::vector<int> tokens;  // kText only
  std::size_t index = 0;    // slot index, 0-based

  static PromptSegment text(std::vector<int> t) { return {Kind::kText, std::move(t), 0}; }
  static PromptSegment id_slot(std::size_t i) { return {Kind::kIdSlot, {}, i}; }
  static PromptSegment test_slot(std::size_t i) { return {Kind::kTestSlot, {}, i}; }

  friend bool operator==(const PromptSegment&, const PromptSegment&) = default;
};

struct IdRef {
  int name = -1;
  VisualFeatures feats;
};

// Ground truth of how a synthetic sample was composed.
struct SampleTrace {
  std::vector<int> id_identities;
  std::vector<std::vector<int>> scenes;  // per test image, identity per slot (-1 = empty)
  int asked_slot = -1;
};

struct InterleavedSample {
  std::vector<IdRef> id_refs;
  std::vector<VisualFeatures> test_feats;
  std::vector<PromptSegment> prompt;
  std::vector<int> response;
  TaskKind task = TaskKind::kQa;
  SampleTrace trace;

  std::vector<VisualFeatures> id_features() const {
    std::vector<VisualFeatures> out;
    out.reserve(id_refs.size());
    for (const auto& r : id_refs) out.push_back(r.feats);
    return out;
  }

  void validate(std::size_t max_images = kDefaultMaxImages) const {
    if (id_refs.size() + test_feats.size() > max_images) {
      throw CapacityError("sample: " + std::to_string(id_refs.size() + test_feats.size()) +
                          " images exceed the limit of " + std::to_string(max_images));
    }
    for (const auto& seg : prompt) {
      if (seg.kind == PromptSegment::Kind::kIdSlot && seg.index >= id_refs.size()) {
        throw ValidationError("sample: prompt references " + id_placeholder(seg.index + 1) +
                              " but only " + std::to_string(id_refs.size()) + " ID images exist");
      }
      if (seg.kind == PromptSegment::Kind::kTestSlot && seg.index >= test_feats.size()) {
        throw ValidationError("sample: prompt references " + test_placeholder(seg.index + 1) +
                              " but only " + std::to_string(test_feats.size()) + " test images exist");
      }
    }
    if (response.empty()) throw ValidationError("sample: empty response");
  }
};

// Relative task weights; parsed from "qa:1,location:0.5".
struct TaskMix {
  double matching = 0.0;
  double location = 0.0;
  double qa = 1.0;
  double caption = 0.0;

  double weight(TaskKind k) const {
    switch (k) {
      case TaskKind::kMatching: return matching;
      case TaskKind::kLocation: return location;
      case TaskKind::kQa: return qa;
      case TaskKind::kCaption: return caption;
    }
    return 0.0;
  }

  void validate() const {
    double total = 0.0;
    for (TaskKind k : kAllTasks) {
      if (!(weight(k) >= 0.0)) throw ConfigError("task mix: weight for " + idvlm::to_string(k) + " is negative");
      total += weight(k);
    }
    if (!(total > 0.0)) throw ConfigError("task mix: all weights are zero");
  }

  static TaskMix parse(std::string_view text) {
    TaskMix m{0.0, 0.0, 0.0, 0.0};
    std::size_t pos = 0;
    while (pos < text.size()) {
      std::size_t end = text.find(',', pos);
      if (end == std::string_view::npos) end = text.size();
      const std::string_view item = text.substr(pos, end - pos);
      const auto colon = item.find(':');
      if (colon == std::string_view::npos) throw ConfigError("task mix: expected kind:weight, got '" + std::string(item) + "'");
      const TaskKind k = parse_task_kind(item.substr(0, colon));
      double w = 0.0;
      try {
        w = std::stod(std::string(item.substr(colon + 1)));
      } catch (const std::exception&) {
        throw ConfigError("task mix: bad weight in '" + std::string(item) + "'");
      }
      switch (k) {
        case TaskKind::kMatching: m.matching = w; break;
        case TaskKind::kLocation: m.location = w; break;
        case TaskKind::kQa: m.qa = w; break;
        case TaskKind::kCaption: m.caption = w; break;
      }
      pos = end + 1;
    }
    m.validate();
    return m;
  }

  std::string to_string() const {
    std::string out;
    for (TaskKind k : kAllTasks) {
      if (!out.empty()) out += ',';
      out += idvlm::to_string(k) + ":" + WorldConfig::format_real(weight(k));
    }
    return out;
  }
};

struct DatasetOptions {
  std::size_t n_samples = 1000;
  TaskMix mix;
  int stage = 2;         // 1: ID images are crops of the scene; 2: other poses
  bool heldout = false;  // draw identities from the held-out split
  std::uint64_t seed = 0;
};

namespace detail {

inline TaskKind draw_task(const TaskMix& mix, Rng& rng) {
  double total = 0.0;
  for (TaskKind k : kAllTasks) total += mix.weight(k);
  double u = rng.uniform() * total;
  for (TaskKind k : kAllTasks) {
    if (mix.weight(k) <= 0.0) continue;
    if (u < mix.weight(k)) return k;
    u -= mix.weight(k);
  }
  for (auto it = kAllTasks.rbegin(); it != kAllTasks.rend(); ++it) {
    if (mix.weight(*it) > 0.0) return *it;
  }
  return TaskKind::kQa;
}

inline std::vector<int> draw_distinct(const std::vector<int>& pool, std::size_t n, Rng& rng) {
  std::vector<int> copy = pool;
  rng.shuffle(copy);
  copy.resize(n);
  return copy;
}

inline InterleavedSample make_sample(const SyntheticWorld& world, const Vocab& vocab,
                                     const DatasetOptions& opt, std::uint64_t sample_seed) {
  Rng rng(sample_seed);
  const auto pool = opt.heldout ? world.heldout_identities() : world.train_identities();
  const int eot = vocab.eot();
  auto w = [&](std::string_view s) { return vocab.id(s); };

  InterleavedSample s;
  s.task = draw_task(opt.mix, rng);

  if (s.task == TaskKind::kMatching) {
    const auto who = draw_distinct(pool, 3, rng);
    const int name = draw_distinct(vocab.names(), 1, rng)[0];
    std::vector<std::size_t> order = {0, 1, 2};
    rng.shuffle(order);
    std::size_t answer = 0;
    std::uint64_t target_seed = 0;
    for (std::size_t pos = 0; pos < 3; ++pos) {
      const int identity = who[order[pos]];
      const std::uint64_t seed = rng.next_u64();
      if (order[pos] == 0) {
        answer = pos;
        target_seed = seed;
      }
      const SyntheticWorld::Placement pl{identity, 1, seed};
      s.test_feats.push_back({world.scene_patches(std::span(&pl, 1)), ImageRole::kTest, pos});
      s.trace.scenes.push_back({-1, identity, -1});
    }
    const std::uint64_t id_seed = opt.stage == 1 ? target_seed : rng.next_u64();
    s.id_refs.push_back({name, {world.encode_patches(who[0], id_seed), ImageRole::kId, 0}});
    s.trace.id_identities = {who[0]};
    s.prompt = {PromptSegment::text({name, w("is")}), PromptSegment::id_slot(0),
                PromptSegment::text({w("."), w("which"), w("of")}),
                PromptSegment::test_slot(0), PromptSegment::test_slot(1), PromptSegment::test_slot(2),
                PromptSegment::text({w("shows"), name, w("?")})};
    static constexpr std::array<std::string_view, 3> kLetters = {"A", "B", "C"};
    s.response = {w(kLetters[answer]), eot};
    return s;
  }

  // Scene with 2 or 3 identities in distinct slots, ID image per identity.
  const std::size_t k = 2 + rng.below(2);
  const auto who = draw_distinct(pool, k, rng);
  std::vector<std::size_t> slots = {0, 1, 2};
  if (k == 2) {
    rng.shuffle(slots);
    slots.resize(2);
    std::sort(slots.begin(), slots.end());
  }
  std::vector<SyntheticWorld::Placement> placements;
  std::vector<int> scene_row = {-1, -1, -1};
  for (std::size_t i = 0; i < k; ++i) {
    placements.push_back({who[i], slots[i], rng.next_u64()});
    scene_row[slots[i]] = who[i];
  }
  s.test_feats.push_back({world.scene_patches(placements), ImageRole::kTest, 0});
  s.trace.scenes.push_back(scene_row);

  std::vector<std::size_t> id_order(k);
  for (std::size_t i = 0; i < k; ++i) id_order[i] = i;
  rng.shuffle(id_order);
  const auto names = draw_distinct(vocab.names(), k, rng);
  std::vector<int> name_of(k);  // by placement index
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t pi = id_order[j];
    const std::uint64_t id_seed = opt.stage == 1 ? placements[pi].pose_seed : rng.next_u64();
    s.id_refs.push_back({names[j], {world.encode_patches(placements[pi].identity, id_seed), ImageRole::kId, j}});
    s.trace.id_identities.push_back(placements[pi].identity);
    name_of[pi] = names[j];
    s.prompt.push_back(PromptSegment::text({names[j], w("is")}));
    s.prompt.push_back(PromptSegment::id_slot(j));
    s.prompt.push_back(PromptSegment::text({w(".")}));
  }

  const std::size_t asked = rng.below(k);
  const int slot_word = w(kSlotWords[placements[asked].slot]);
  switch (s.task) {
    case TaskKind::kQa:
      s.trace.asked_slot = static_cast<int>(placements[asked].slot);
      s.prompt.push_back(PromptSegment::text({w("who"), w("is"), w("on"), w("the"), slot_word, w("in")}));
      s.prompt.push_back(PromptSegment::test_slot(0));
      s.prompt.push_back(PromptSegment::text({w("?")}));
      s.response = {name_of[asked], eot};
      break;
    case TaskKind::kLocation:
      s.trace.asked_slot = static_cast<int>(placements[asked].slot);
      s.prompt.push_back(PromptSegment::text({w("where"), w("is"), name_of[asked], w("in")}));
      s.prompt.push_back(PromptSegment::test_slot(0));
      s.prompt.push_back(PromptSegment::text({w("?")}));
      s.response = {slot_word, eot};
      break;
    case TaskKind::kCaption:
      s.prompt.push_back(PromptSegment::text({w("describe")}));
      s.prompt.push_back(PromptSegment::test_slot(0));
      s.prompt.push_back(PromptSegment::text({w(".")}));
      for (std::size_t i = 0; i < k; ++i) s.response.push_back(name_of[i]);
      s.response.push_back(eot);
      break;
    case TaskKind::kMatching:
      break;
  }
  return s;
}

}  // namespace detail

// Sample i depends only on (seed, i), so generation order never matters.
inline std::vector<InterleavedSample> make_synthetic_dataset(const SyntheticWorld& world,
                                                             const Vocab& vocab,
                                                             const DatasetOptions& opt) {
  if (opt.n_samples < 1) throw ConfigError("dataset: n_samples must be >= 1");
  if (opt.stage != 1 && opt.stage != 2) throw ConfigError("dataset: stage must be 1 or 2");
  opt.mix.validate();
  const std::size_t pool = opt.heldout ? world.config().n_heldout : world.config().n_identities - world.config().n_heldout;
  if (pool < 3) throw ConfigError("dataset: identity split has fewer than 3 identities");
  std::vector<InterleavedSample> out;
  out.reserve(opt.n_samples);
  const std::uint64_t base = mix_seed(opt.seed, static_cast<std::uint64_t>(opt.stage) * 2 + (opt.heldout ? 1 : 0));
  for (std::size_t i = 0; i < opt.n_samples; ++i) {
    out.push_back(detail::make_sample(world, vocab, opt, mix_seed(base, i)));
  }
  return out;
}

}  // namespace idvlm

#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "idvlm/bench.hpp"
#include "idvlm/data_forge.hpp"
#include "idvlm/jsonl.hpp"
#include "idvlm/toy_vlm.hpp"

namespace idvlm {

// ---------------------------------------------------------------------------
// Toy configuration (one flat key-value file)
// ---------------------------------------------------------------------------

struct ToyConfig {
  IDFormerConfig idf;
  LMConfig lm;
  WorldConfig world;
  TrainSchedule schedule;

  void validate() const {
    idf.validate();
    lm.validate();
    world.validate();
    schedule.validate();
    if (idf.d_model != lm.d_model) throw ConfigError("toy config: id-former and lm d_model differ");
    if (idf.d_visual != world.d_visual) throw ConfigError("toy config: id-former and world d_visual differ");
    if (lm.vocab_size < kVocabSize) {
      throw ConfigError("toy config: vocab_size must be >= " + std::to_string(kVocabSize));
    }
  }

  static ToyConfig from_kv(const KvConfig& kv) {
    ToyConfig c;
    c.idf = IDFormerConfig::from_kv(kv);
    c.lm = LMConfig::from_kv(kv);
    c.world = WorldConfig::from_kv(kv);
    c.schedule = TrainSchedule::from_kv(kv);
    c.validate();
    return c;
  }

  static ToyConfig load(const std::string& path) { return from_kv(KvConfig::load(path)); }

  // Everything except the id-former keys, which live in their own file.
  KvConfig rest_kv() const {
    KvConfig kv;
    lm.write_kv(kv);
    world.write_kv(kv);
    schedule.write_kv(kv);
    return kv;
  }

  KvConfig to_kv() const {
    KvConfig kv = rest_kv();
    const KvConfig idf_kv = idf.to_kv();
    for (const auto& [k, v] : idf_kv.entries()) kv.set(k, v);
    return kv;
  }
};

// ---------------------------------------------------------------------------
// Interleaved samples as JSON Lines
// ---------------------------------------------------------------------------

inline Json tensor_json(const Tensor& t) { return {{"shape", t.shape()}, {"data", t.values()}}; }

inline Tensor tensor_from_json(const Json& j) {
  const auto shape = j.at("shape").get<Shape>();
  Tensor t(shape);
  const auto& data = j.at("data");
  if (!data.is_array() || data.size() != t.values().size()) {
    throw ValidationError("tensor: data length does not match shape " + shape_str(shape));
  }
  for (std::size_t i = 0; i < data.size(); ++i) t.values()[i] = data[i].get<double>();
  return t;
}

inline Json to_json(const InterleavedSample& s) {
  Json ids = Json::array();
  for (const auto& r : s.id_refs) ids.push_back({{"name", r.name}, {"feats", tensor_json(r.feats.patches)}});
  Json tests = Json::array();
  for (const auto& f : s.test_feats) tests.push_back(tensor_json(f.patches));
  Json prompt = Json::array();
  for (const auto& seg : s.prompt) {
    switch (seg.kind) {
      case PromptSegment::Kind::kText: prompt.push_back({{"text", seg.tokens}}); break;
      case PromptSegment::Kind::kIdSlot: prompt.push_back({{"id_slot", seg.index}}); break;
      case PromptSegment::Kind::kTestSlot: prompt.push_back({{"test_slot", seg.index}}); break;
    }
  }
  return {{"task", to_string(s.task)}, {"id_refs", ids}, {"test_feats", tests}, {"prompt", prompt},
          {"response", s.response}};
}

inline InterleavedSample interleaved_from_json(const Json& j) {
  InterleavedSample s;
  s.task = parse_task_kind(j.at("task").get<std::string>());
  std::size_t i = 0;
  for (const auto& r : j.at("id_refs")) {
    s.id_refs.push_back({r.at("name").get<int>(), {tensor_from_json(r.at("feats")), ImageRole::kId, i++}});
  }
  i = 0;
  for (const auto& t : j.at("test_feats")) s.test_feats.push_back({tensor_from_json(t), ImageRole::kTest, i++});
  for (const auto& seg : j.at("prompt")) {
    if (seg.contains("text")) {
      s.prompt.push_back(PromptSegment::text(seg["text"].get<std::vector<int>>()));
    } else if (seg.contains("id_slot")) {
      s.prompt.push_back(PromptSegment::id_slot(seg["id_slot"].get<std::size_t>()));
    } else if (seg.contains("test_slot")) {
      s.prompt.push_back(PromptSegment::test_slot(seg["test_slot"].get<std::size_t>()));
    } else {
      throw ValidationError("prompt segment must hold text, id_slot or test_slot");
    }
  }
  s.response = j.at("response").get<std::vector<int>>();
  s.validate();
  return s;
}

inline std::string interleaved_jsonl(std::span<const InterleavedSample> samples) {
  std::string out;
  for (const auto& s : samples) {
    out += to_json(s).dump();
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tuning samples to toy samples
// ---------------------------------------------------------------------------

// Stand-in visual encoder for named images: features seeded by the locator.
inline VisualFeatures locator_features(const std::string& locator, const WorldConfig& world, ImageRole role,
                                       std::size_t index) {
  Rng rng(fnv1a(locator));
  Tensor t({world.patches_per_image, world.d_visual});
  for (double& v : t.values()) v = rng.normal();
  return {std::move(t), role, index};
}

// Text to segments; placeholder tokens become image slots.
inline std::vector<PromptSegment> encode_segments(const Vocab& vocab, const std::string& text) {
  std::vector<PromptSegment> out;
  std::vector<int> run;
  auto flush = [&] {
    if (!run.empty()) out.push_back(PromptSegment::text(std::move(run)));
    run.clear();
  };
  for (int id : vocab.encode(text)) {
    if (const auto k = vocab.id_slot(id)) {
      flush();
      out.push_back(PromptSegment::id_slot(*k));
    } else if (const auto t = vocab.test_slot(id)) {
      flush();
      out.push_back(PromptSegment::test_slot(*t));
    } else {
      run.push_back(id);
    }
  }
  flush();
  return out;
}

inline std::size_t assembled_length(const InterleavedSample& s, std::size_t n_queries) {
  std::size_t n = s.response.size();
  for (const auto& seg : s.prompt) n += seg.kind == PromptSegment::Kind::kText ? seg.tokens.size() : n_queries;
  return n;
}

inline TaskKind toy_task(forge::TaskKind k) {
  switch (k) {
    case forge::TaskKind::kQa: return TaskKind::kQa;
    case forge::TaskKind::kLocation: return TaskKind::kLocation;
    case forge::TaskKind::kCaption: return TaskKind::kCaption;
    case forge::TaskKind::kMatching: return TaskKind::kMatching;
  }
  return TaskKind::kQa;
}

// Prompt: every turn but the last; response: the last (assistant) turn.
inline InterleavedSample from_tuning_sample(const forge::TuningSample& t, const Vocab& vocab,
                                            const WorldConfig& world) {
  InterleavedSample s;
  s.task = toy_task(t.task);
  for (std::size_t i = 0; i < t.id_refs.size(); ++i) {
    s.id_refs.push_back(
        {vocab.lookup(t.id_refs[i].name), locator_features(t.id_refs[i].locator(), world, ImageRole::kId, i)});
  }
  for (std::size_t i = 0; i < t.test_image_refs.size(); ++i) {
    s.test_feats.push_back(locator_features(t.test_image_refs[i], world, ImageRole::kTest, i));
  }
  if (t.conversation.empty()) throw ValidationError("sample '" + t.id + "': empty conversation");
  for (std::size_t i = 0; i + 1 < t.conversation.size(); ++i) {
    auto segs = encode_segments(vocab, t.conversation[i].text);
    s.prompt.insert(s.prompt.end(), segs.begin(), segs.end());
  }
  s.response = vocab.encode(t.conversation.back().text);
  s.response.push_back(vocab.eot());
  s.validate();
  return s;
}

struct LoadedToyData {
  std::vector<InterleavedSample> samples;
  std::size_t converted = 0;  // lines that held tuning samples
  std::size_t too_long = 0;   // skipped: longer than the lm context
};

// Each line is either a toy sample or a tuning sample ("conversation" key).
inline LoadedToyData parse_toy_data(const std::string& text, const ToyConfig& cfg, const std::string& origin) {
  const Vocab vocab = Vocab::standard(cfg.idf.max_images);
  LoadedToyData out;
  std::size_t line = 0;
  for (const auto& j : parse_jsonl(text, origin)) {
    ++line;
    with_origin(origin + " entry " + std::to_string(line), [&] {
      InterleavedSample s;
      if (forge::is_tuning_sample_json(j)) {
        s = from_tuning_sample(forge::sample_from_json(j), vocab, cfg.world);
        ++out.converted;
      } else {
        s = interleaved_from_json(j);
      }
      if (assembled_length(s, cfg.idf.n_queries) > cfg.lm.max_len) {
        ++out.too_long;
        return;
      }
      out.samples.push_back(std::move(s));
    });
  }
  return out;
}

inline LoadedToyData load_toy_data(const std::string& path, const ToyConfig& cfg) {
  return parse_toy_data(read_text_file(path), cfg, path);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

// <path> holds the tensors, <path>.idformer.cfg the id-former keys and
// <path>.toy.cfg the remaining configuration.
inline std::string idformer_cfg_path(const std::string& ckpt) { return ckpt + ".idformer.cfg"; }
inline std::string toy_cfg_path(const std::string& ckpt) { return ckpt + ".toy.cfg"; }

inline std::string checkpoint_bytes(const ToyModel& m) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, toy_checkpoint_entries(m));
  return os.str();
}

inline void save_toy_checkpoint(const std::string& path, const ToyModel& m, const ToyConfig& cfg) {
  write_file_atomic(path, checkpoint_bytes(m));
  write_file_atomic(idformer_cfg_path(path), m.idf_cfg.to_kv().to_string());
  write_file_atomic(toy_cfg_path(path), cfg.rest_kv().to_string());
}

struct LoadedToyModel {
  ToyModel model;
  ToyConfig cfg;
};

inline LoadedToyModel load_toy_checkpoint(const std::string& path) {
  KvConfig kv = KvConfig::load(toy_cfg_path(path));
  const KvConfig idf = KvConfig::load(idformer_cfg_path(path));
  for (const auto& [k, v] : idf.entries()) kv.set(k, v);
  LoadedToyModel out{{}, ToyConfig::from_kv(kv)};
  out.model = init_toy_model(out.cfg.idf, out.cfg.lm, 0);
  std::istringstream is(read_text_file(path), std::ios::binary);
  const NamedTensors entries = read_checkpoint(is);
  load_params(out.model, "", entries);
  return out;
}

// ---------------------------------------------------------------------------
// Benchmark questions for the toy model
// ---------------------------------------------------------------------------

// "{name} is <ID-Imgk> ." per reference, then the test placeholders and the
// question.
inline InterleavedSample toy_bench_prompt(const bench::BenchSample& b, const Vocab& vocab, const WorldConfig& world) {
  InterleavedSample s;
  std::string text;
  for (std::size_t i = 0; i < b.id_refs.size(); ++i) {
    s.id_refs.push_back(
        {vocab.lookup(b.id_refs[i].name), locator_features(b.id_refs[i].image_ref, world, ImageRole::kId, i)});
    text += b.id_refs[i].name + " is " + id_placeholder(i + 1) + " . ";
  }
  for (std::size_t i = 0; i < b.test_image_refs.size(); ++i) {
    s.test_feats.push_back(locator_features(b.test_image_refs[i], world, ImageRole::kTest, i));
    text += test_placeholder(i + 1) + " ";
  }
  text += b.question;
  s.prompt = encode_segments(vocab, text);
  s.response = {vocab.eot()};
  return s;
}

// Greedy responses keyed by sample id; questions that do not fit the
// context get an empty response.
inline std::map<std::string, std::string> toy_bench_responses(const ToyModel& m, const ToyConfig& cfg,
                                                              std::span<const bench::BenchSample> samples) {
  const Vocab vocab = Vocab::standard(cfg.idf.max_images);
  std::map<std::string, std::string> out;
  for (const auto& b : samples) {
    InterleavedSample s = toy_bench_prompt(b, vocab, cfg.world);
    if (s.id_refs.size() + s.test_feats.size() > cfg.idf.max_images ||
        assembled_length(s, cfg.idf.n_queries) >= cfg.lm.max_len) {
      out[b.id] = "";
      continue;
    }
    std::vector<int> ids = greedy_decode(m, s, vocab.eot());
    if (!ids.empty() && ids.back() == vocab.eot()) ids.pop_back();
    out[b.id] = vocab.decode(ids);
  }
  return out;
}

}  // namespace idvlm

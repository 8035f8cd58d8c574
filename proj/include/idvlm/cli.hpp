#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <functional>
#include <ostream>

#include "idvlm/bench.hpp"
#include "idvlm/checks.hpp"
#include "idvlm/data_forge.hpp"
#include "idvlm/http_transport.hpp"
#include "idvlm/toy_io.hpp"

#ifndef IDVLM_VERSION
#define IDVLM_VERSION "0.0.0"
#endif

// Command implementations behind the idvlm tool. Each command throws on
// failure; guarded() maps exceptions onto the exit-code contract.

namespace idvlm::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitIo = 1;
inline constexpr int kExitInvalid = 2;

// IO and remote-service failures are environmental; everything else the
// library raises is a validation or configuration problem.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const TransientError*>(&e) ||
      dynamic_cast<const PermanentError*>(&e)) {
    return kExitIo;
  }
  if (dynamic_cast<const Error*>(&e)) return kExitInvalid;
  return kExitIo;
}

inline int guarded(std::ostream& err, const std::function<int()>& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunManifest {
  std::string command;
  std::map<std::string, std::string> config;  // resolved snapshot
  std::map<std::string, std::uint64_t> seeds;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::string started_at = utc_now();
  std::string finished_at;
  std::string version = IDVLM_VERSION;

  void snapshot(const KvConfig& kv, const std::string& prefix = "") {
    for (const auto& [k, v] : kv.entries()) config[prefix + k] = v;
  }

  Json json() const {
    return {{"command", command}, {"config", config},         {"seeds", seeds},
            {"inputs", inputs},   {"outputs", outputs},       {"started_at", started_at},
            {"finished_at", finished_at}, {"version", version}};
  }

  static RunManifest from_json(const Json& j) {
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.config = j.at("config").get<std::map<std::string, std::string>>();
    m.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
    m.inputs = j.at("inputs").get<std::vector<std::string>>();
    m.outputs = j.at("outputs").get<std::vector<std::string>>();
    m.started_at = j.at("started_at").get<std::string>();
    m.finished_at = j.at("finished_at").get<std::string>();
    m.version = j.at("version").get<std::string>();
    return m;
  }

  // Stamps the end time and writes <primary output>.manifest.json.
  void finish(const std::string& primary_output) {
    finished_at = utc_now();
    write_file_atomic(manifest_path(primary_output), json().dump(2) + "\n");
  }

  static std::string manifest_path(const std::string& output) { return output + ".manifest.json"; }
};

// ---------------------------------------------------------------------------
// Shared loaders
// ---------------------------------------------------------------------------

// A file whose first non-blank character is '{' is a mock script; anything
// else is a gateway key-value config.
inline std::shared_ptr<Gateway> load_gateway(const std::string& spec, RunManifest& manifest, const std::string& role) {
  if (spec.empty()) return nullptr;
  const std::string text = read_text_file(spec);
  manifest.inputs.push_back(spec);
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    manifest.config[role + ".kind"] = "mock";
    return mock_gateway(MockScript::parse(text, spec));
  }
  const GatewayConfig cfg = GatewayConfig::from_kv(KvConfig::parse(text, spec));
  manifest.config[role + ".kind"] = "http";
  manifest.snapshot(cfg.to_kv(), role + ".");
  return make_gateway(cfg);
}

inline forge::CropPolicy load_policy(const std::string& path) {
  if (path.empty()) return {};
  try {
    return forge::CropPolicy::from_kv(KvConfig::load(path));
  } catch (const Error& e) {
    throw IoError(std::string("policy file: ") + e.what());
  }
}

inline ToyConfig load_toy_config(const std::string& path) {
  return path.empty() ? ToyConfig::from_kv(KvConfig{}) : ToyConfig::load(path);
}

// ---------------------------------------------------------------------------
// forge-stage1 / forge-stage2 / mix
// ---------------------------------------------------------------------------

struct ForgeStage1Args {
  std::string input;
  std::string policy;
  std::string names;
  std::uint64_t seed = 0;
  std::string out;
};

inline std::string report_path(const std::string& out) { return out + ".report.json"; }

inline int forge_stage1(const ForgeStage1Args& a, std::ostream& os) {
  RunManifest m;
  m.command = "forge-stage1";
  m.seeds["seed"] = a.seed;
  const auto policy = load_policy(a.policy);
  const forge::NamePool pool = a.names.empty() ? forge::NamePool() : forge::NamePool::load(a.names);
  const auto records = forge::load_records(a.input);
  m.inputs = {a.input};
  if (!a.policy.empty()) m.inputs.push_back(a.policy);
  if (!a.names.empty()) m.inputs.push_back(a.names);
  m.config["min_side"] = std::to_string(policy.min_side);
  m.config["min_area_fraction"] = WorldConfig::format_real(policy.min_area_fraction);
  m.config["names"] = a.names.empty() ? "default" : a.names;

  const auto result = forge::forge_stage1(records, pool, policy, a.seed);
  if (!result.report.reconciles()) throw ValidationError("forge report does not reconcile");
  write_file_atomic(a.out, forge::samples_jsonl(result.samples));
  write_file_atomic(report_path(a.out), result.report.json().dump(2) + "\n");
  m.outputs = {a.out, report_path(a.out)};
  m.finish(a.out);
  os << result.report.text();
  return kExitOk;
}

struct ForgeStage2Args {
  std::string shots;
  std::string kinds = "all";
  std::string gateway;
  std::uint64_t seed = 0;
  std::size_t multi_group = 2;
  std::string out;
};

inline int forge_stage2(const ForgeStage2Args& a, std::ostream& os) {
  RunManifest m;
  m.command = "forge-stage2";
  m.seeds["seed"] = a.seed;
  forge::Stage2Options opt;
  opt.kinds = forge::parse_stage2_kinds(a.kinds);
  opt.seed = a.seed;
  opt.multi_group = a.multi_group;
  m.config["kinds"] = a.kinds;
  m.config["multi_group"] = std::to_string(a.multi_group);
  const auto records = forge::load_records(a.shots);
  m.inputs.push_back(a.shots);
  const auto gw = load_gateway(a.gateway, m, "generator");
  const auto result = forge::forge_stage2(records, opt, gw.get());
  if (!result.report.reconciles()) throw ValidationError("forge report does not reconcile");
  write_file_atomic(a.out, forge::samples_jsonl(result.samples));
  write_file_atomic(report_path(a.out), result.report.json().dump(2) + "\n");
  m.outputs = {a.out, report_path(a.out)};
  m.finish(a.out);
  os << result.report.text();
  return kExitOk;
}

struct MixArgs {
  std::string id;
  std::string general;
  double fraction = 0.10;
  std::uint64_t seed = 0;
  std::string out;
};

inline int mix(const MixArgs& a, std::ostream& os) {
  RunManifest m;
  m.command = "mix";
  m.seeds["seed"] = a.seed;
  m.config["fraction"] = WorldConfig::format_real(a.fraction);
  const auto id = forge::load_samples(a.id);
  const auto general = a.general.empty() ? std::vector<forge::TuningSample>{} : forge::load_samples(a.general);
  m.inputs = {a.id};
  if (!a.general.empty()) m.inputs.push_back(a.general);
  const auto mixed = forge::mix_general(id, general, {a.fraction, a.seed});
  write_file_atomic(a.out, forge::samples_jsonl(mixed));
  m.outputs = {a.out};
  m.finish(a.out);
  os << "id samples " << id.size() << ", general " << mixed.size() - id.size() << ", total " << mixed.size() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Toy model: data, training, gradient checks
// ---------------------------------------------------------------------------

struct SynthToyArgs {
  std::string config;
  std::size_t n = 1000;
  std::uint64_t seed = 0;
  std::uint64_t world_seed = 1;
  int stage = 2;
  bool heldout = false;
  std::string mix = "qa:1";
  std::string out;
};

inline int synth_toy(const SynthToyArgs& a, std::ostream& os) {
  RunManifest m;
  m.command = "synth-toy";
  m.seeds = {{"seed", a.seed}, {"world_seed", a.world_seed}};
  const ToyConfig cfg = load_toy_config(a.config);
  if (!a.config.empty()) m.inputs.push_back(a.config);
  if (a.stage != 1 && a.stage != 2) throw ConfigError("synth-toy: stage must be 1 or 2");
  DatasetOptions d;
  d.n_samples = a.n;
  d.mix = TaskMix::parse(a.mix);
  d.stage = a.stage;
  d.heldout = a.heldout;
  d.seed = a.seed;
  m.snapshot(cfg.to_kv());
  m.config["n"] = std::to_string(a.n);
  m.config["stage"] = std::to_string(a.stage);
  m.config["heldout"] = a.heldout ? "true" : "false";
  m.config["mix"] = d.mix.to_string();
  const SyntheticWorld world = SyntheticWorld::create(cfg.world, a.world_seed);
  const auto samples = make_synthetic_dataset(world, Vocab::standard(cfg.idf.max_images), d);
  write_file_atomic(a.out, interleaved_jsonl(samples));
  m.outputs = {a.out};
  m.finish(a.out);
  os << "wrote " << samples.size() << " samples to " << a.out << "\n";
  return kExitOk;
}

struct TrainToyArgs {
  std::string data1;
  std::string data2;
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  bool ablate_idformer = false;
  int skip_stage = 0;  // 0, 1 or 2
  std::string eval;    // optional held-out data
};

inline std::string loss_csv_path(const std::string& ckpt) { return ckpt + ".loss.csv"; }
inline std::string eval_path(const std::string& ckpt) { return ckpt + ".eval.json"; }

inline Json eval_json(const ToyEvalReport& r) {
  Json j = Json::object();
  for (const auto& [k, a] : r.per_task) {
    j[to_string(k)] = {{"correct", a.correct}, {"total", a.total}, {"accuracy", a.accuracy()}};
  }
  return j;
}

inline int train_toy(const TrainToyArgs& a, std::ostream& os) {
  RunManifest m;
  m.command = "train-toy";
  m.seeds["seed"] = a.seed;
  ToyConfig cfg = load_toy_config(a.config);
  if (!a.config.empty()) m.inputs.push_back(a.config);
  if (a.ablate_idformer) cfg.idf.modulation_mode = ModulationMode::kNone;
  if (a.skip_stage < 0 || a.skip_stage > 2) throw ConfigError("train-toy: --skip-stage must be 1 or 2");
  cfg.schedule.run_stage1 = a.skip_stage != 1;
  cfg.schedule.run_stage2 = a.skip_stage != 2;
  cfg.validate();
  m.snapshot(cfg.to_kv());
  m.config["skip_stage"] = std::to_string(a.skip_stage);

  auto load = [&](const std::string& path, const char* which, bool needed) {
    LoadedToyData d;
    if (!needed) return d;
    if (path.empty()) throw ConfigError(std::string("train-toy: ") + which + " is required");
    d = load_toy_data(path, cfg);
    m.inputs.push_back(path);
    if (d.too_long) os << which << ": skipped " << d.too_long << " samples longer than the context\n";
    return d;
  };
  const LoadedToyData d1 = load(a.data1, "--data1", cfg.schedule.run_stage1);
  const LoadedToyData d2 = load(a.data2, "--data2", cfg.schedule.run_stage2);

  ToyModel model = init_toy_model(cfg.idf, cfg.lm, a.seed);
  const TrainResult r = train_dual_stage(model, d1.samples, d2.samples, cfg.schedule, a.seed, [&](const LossPoint& p) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "stage %d epoch %zu loss %.6f\n", p.stage, p.epoch, p.mean_loss);
    os << buf << std::flush;
  });
  save_toy_checkpoint(a.out, model, cfg);
  write_file_atomic(loss_csv_path(a.out), loss_curve_csv(r));
  m.outputs = {a.out, idformer_cfg_path(a.out), toy_cfg_path(a.out), loss_csv_path(a.out)};
  if (!a.eval.empty()) {
    const LoadedToyData held = load_toy_data(a.eval, cfg);
    m.inputs.push_back(a.eval);
    const ToyEvalReport rep = evaluate_toy(model, held.samples, Vocab::standard(cfg.idf.max_images).eot());
    for (const auto& [k, acc] : rep.per_task) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "eval %s %.4f (%zu/%zu)\n", to_string(k).c_str(), acc.accuracy(), acc.correct,
                    acc.total);
      os << buf;
    }
    write_file_atomic(eval_path(a.out), eval_json(rep).dump(2) + "\n");
    m.outputs.push_back(eval_path(a.out));
  }
  m.finish(a.out);
  return kExitOk;
}

struct GradCheckArgs {
  std::string config;
  double tol = 1e-4;
  double eps = 1e-6;
  std::size_t coords = 24;
  std::string corrupt;
  std::uint64_t seed = 1;
  std::string out;
};

inline Json grad_report_json(const GradCheckReport& r) {
  return {{"passed", r.passed},
          {"max_rel_error", r.max_rel_error},
          {"tolerance", r.tolerance},
          {"worst_param", r.worst_param}};
}

// Exit 2 when any check fails.
inline int gradcheck(const GradCheckArgs& a, std::ostream& os) {
  RunManifest m;
  m.command = "gradcheck";
  m.seeds["seed"] = a.seed;
  const ToyConfig cfg = load_toy_config(a.config);
  if (!a.config.empty()) m.inputs.push_back(a.config);
  m.snapshot(cfg.to_kv());
  ToyGradCheckOptions opt;
  opt.tol = a.tol;
  opt.fd.eps = a.eps;
  opt.fd.max_coords_per_param = a.coords;
  opt.seed = a.seed;
  opt.corrupt = a.corrupt;
  m.config["tol"] = WorldConfig::format_real(a.tol);
  m.config["eps"] = WorldConfig::format_real(a.eps);
  m.config["coords"] = std::to_string(a.coords);
  if (!a.corrupt.empty()) m.config["corrupt"] = a.corrupt;
  const ToyGradCheckSuite s = check_all_grads(cfg.idf, cfg.lm, cfg.world, opt);
  os << grad_check_text("idformer", s.idformer) << grad_check_text("lm", s.lm)
     << grad_check_text("composed", s.composed);
  if (!a.out.empty()) {
    const Json j = {{"idformer", grad_report_json(s.idformer)},
                    {"lm", grad_report_json(s.lm)},
                    {"composed", grad_report_json(s.composed)},
                    {"passed", s.passed()}};
    write_file_atomic(a.out, j.dump(2) + "\n");
    m.outputs = {a.out};
    m.finish(a.out);
  }
  return s.passed() ? kExitOk : kExitInvalid;
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

inline constexpr std::string_view kToyModelPrefix = "toy:";

struct ResolvedModel {
  std::string name;
  std::map<std::string, std::string> responses;
};

// "toy:<checkpoint>" runs the toy model; otherwise a response file with an
// optional "#model" suffix.
inline ResolvedModel resolve_model(const std::string& spec, std::span<const bench::BenchSample> samples,
                                   RunManifest& m) {
  ResolvedModel out;
  if (spec.rfind(kToyModelPrefix, 0) == 0) {
    const std::string ckpt = spec.substr(kToyModelPrefix.size());
    const LoadedToyModel loaded = load_toy_checkpoint(ckpt);
    m.inputs.push_back(ckpt);
    out.name = "toy:" + std::filesystem::path(ckpt).filename().string();
    out.responses = toy_bench_responses(loaded.model, loaded.cfg, samples);
    return out;
  }
  const auto hash = spec.find('#');
  const std::string path = spec.substr(0, hash);
  const std::string name = hash == std::string::npos ? "" : spec.substr(hash + 1);
  const bench::ResponseSet rs = bench::ResponseSet::load(path);
  m.inputs.push_back(path);
  out.responses = rs.model(name, &out.name);
  return out;
}

inline std::string responses_jsonl(const std::string& model, const std::map<std::string, std::string>& responses) {
  std::string out;
  for (const auto& [id, text] : responses) out += Json{{"model", model}, {"id", id}, {"response", text}}.dump() + "\n";
  return out;
}

struct BenchRunArgs {
  std::string bench;
  std::string model;
  std::string profile = "generic";
  std::string judge;
  std::string out;
};

inline std::string responses_path(const std::string& out) { return out + ".responses.jsonl"; }

inline int bench_run(const BenchRunArgs& a, std::ostream& os) {
  RunManifest m;
  m.command = "bench-run";
  const auto samples = bench::load_bench(a.bench);
  m.inputs.push_back(a.bench);
  const bench::ModelProfile profile = bench::ModelProfile::resolve(a.profile);
  m.config["profile"] = a.profile;
  m.config["model"] = a.model;
  const ResolvedModel model = resolve_model(a.model, samples, m);
  const auto judge = load_gateway(a.judge, m, "judge");
  const bench::MetricsReport rep = bench::score_responses(samples, model.responses, profile, judge.get(), model.name);
  write_file_atomic(a.out, bench::report_json(rep).dump(2) + "\n");
  write_file_atomic(responses_path(a.out), responses_jsonl(model.name, model.responses));
  m.outputs = {a.out, responses_path(a.out)};
  m.finish(a.out);
  os << bench::bench_summary_text(samples) << "\n" << bench::report_text(rep);
  return kExitOk;
}

struct CompareArgs {
  std::string bench;
  std::string model_a;
  std::string model_b;
  std::string judge;
  bool swapped = false;
  std::string out;
};

inline Json compare_json(const std::string& a, const std::string& b, const bench::CompareResult& r) {
  Json pairs = Json::object();
  for (const auto& [k, ps] : r.pairs) {
    Json arr = Json::array();
    for (const auto& [x, y] : ps) arr.push_back({x, y});
    pairs[bench::to_string(k)] = arr;
  }
  return {{"model_a", a}, {"model_b", b}, {"pairs", pairs}, {"invalid", r.invalid}, {"ratios", r.ratios}};
}

inline int compare(const CompareArgs& a, std::ostream& os) {
  RunManifest m;
  m.command = "compare";
  const auto samples = bench::load_bench(a.bench);
  m.inputs.push_back(a.bench);
  m.config["model_a"] = a.model_a;
  m.config["model_b"] = a.model_b;
  m.config["swapped"] = a.swapped ? "true" : "false";
  const ResolvedModel ma = resolve_model(a.model_a, samples, m);
  const ResolvedModel mb = resolve_model(a.model_b, samples, m);
  if (a.judge.empty()) throw ConfigError("compare: --judge is required");
  const auto judge = load_gateway(a.judge, m, "judge");
  const bench::CompareResult r = bench::compare_models(samples, ma.responses, mb.responses, *judge, {a.swapped});
  write_file_atomic(a.out, compare_json(ma.name, mb.name, r).dump(2) + "\n");
  m.outputs = {a.out};
  m.finish(a.out);
  char buf[128];
  std::snprintf(buf, sizeof buf, "%s vs %s\n", ma.name.c_str(), mb.name.c_str());
  os << buf;
  for (const auto& [k, v] : r.ratios) {
    std::snprintf(buf, sizeof buf, "ratio %-8s %.6f\n", k.c_str(), v);
    os << buf;
  }
  if (r.invalid) os << "invalid verdicts: " << r.invalid << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

struct SynthCorpusArgs {
  std::size_t records = 100;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t general = 0;
  std::string general_out;
};

inline int synth_corpus(const SynthCorpusArgs& a, std::ostream& os) {
  RunManifest m;
  m.command = "synth-corpus";
  m.seeds["seed"] = a.seed;
  m.config["records"] = std::to_string(a.records);
  forge::CorpusOptions o;
  o.n_records = a.records;
  o.seed = a.seed;
  const auto records = forge::make_synthetic_corpus(o);
  write_file_atomic(a.out, forge::records_jsonl(records));
  m.outputs = {a.out};
  if (a.general) {
    if (a.general_out.empty()) throw ConfigError("synth-corpus: --general needs --general-out");
    m.config["general"] = std::to_string(a.general);
    write_file_atomic(a.general_out, forge::samples_jsonl(forge::make_general_samples(a.general, a.seed)));
    m.outputs.push_back(a.general_out);
  }
  m.finish(a.out);
  os << "wrote " << records.size() << " records to " << a.out << "\n";
  return kExitOk;
}

}  // namespace idvlm::cli

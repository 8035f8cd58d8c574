#include <iostream>

#include "CLI11.hpp"
#include "idvlm/cli.hpp"

using namespace idvlm;

int main(int argc, char** argv) {
  CLI::App app{"ID-aware vision-language toolkit: data forging, toy training, benchmarking"};
  app.set_version_flag("--version", std::string(IDVLM_VERSION));
  app.require_subcommand(1);
  std::function<int()> run;

  cli::ForgeStage1Args f1;
  auto* c = app.add_subcommand("forge-stage1", "Build stage-1 samples from grounded records");
  c->add_option("--input", f1.input, "Grounded records (JSONL)")->required();
  c->add_option("--policy", f1.policy, "Crop policy (key = value)");
  c->add_option("--names", f1.names, "Name pool, one per line");
  c->add_option("--seed", f1.seed);
  c->add_option("--out", f1.out, "Tuning samples (JSONL)")->required();
  c->callback([&] { run = [&] { return cli::forge_stage1(f1, std::cout); }; });

  cli::ForgeStage2Args f2;
  c = app.add_subcommand("forge-stage2", "Build stage-2 samples from movie shots");
  c->add_option("--shots", f2.shots, "Movie-shot records (JSONL)")->required();
  c->add_option("--kinds", f2.kinds, "Comma-separated kinds or 'all'");
  c->add_option("--gateway", f2.gateway, "Generator gateway config or mock script");
  c->add_option("--seed", f2.seed);
  c->add_option("--multi-group", f2.multi_group, "Test shots per multi-image sample");
  c->add_option("--out", f2.out)->required();
  c->callback([&] { run = [&] { return cli::forge_stage2(f2, std::cout); }; });

  cli::MixArgs mx;
  c = app.add_subcommand("mix", "Mix general samples into ID samples");
  c->add_option("--id", mx.id)->required();
  c->add_option("--general", mx.general);
  c->add_option("--fraction", mx.fraction, "General share of the final mixture");
  c->add_option("--seed", mx.seed);
  c->add_option("--out", mx.out)->required();
  c->callback([&] { run = [&] { return cli::mix(mx, std::cout); }; });

  cli::TrainToyArgs tt;
  c = app.add_subcommand("train-toy", "Train the toy model in two stages");
  c->add_option("--data1", tt.data1, "Stage-1 data (toy or tuning samples)");
  c->add_option("--data2", tt.data2, "Stage-2 data (toy or tuning samples)");
  c->add_option("--config", tt.config, "Toy config (key = value)");
  c->add_option("--seed", tt.seed);
  c->add_option("--out", tt.out, "Checkpoint path")->required();
  c->add_flag("--ablate-idformer", tt.ablate_idformer, "Disable ID modulation");
  c->add_option("--skip-stage", tt.skip_stage, "Skip stage 1 or 2")->check(CLI::IsMember({1, 2}));
  c->add_option("--eval", tt.eval, "Held-out data to score after training");
  c->callback([&] { run = [&] { return cli::train_toy(tt, std::cout); }; });

  cli::GradCheckArgs gc;
  c = app.add_subcommand("gradcheck", "Finite-difference gradient check of the toy model");
  c->add_option("--config", gc.config);
  c->add_option("--tol", gc.tol);
  c->add_option("--eps", gc.eps);
  c->add_option("--coords", gc.coords, "Coordinates per tensor, 0 for all");
  c->add_option("--corrupt", gc.corrupt, "Skew the analytic gradient of this parameter");
  c->add_option("--seed", gc.seed);
  c->add_option("--out", gc.out, "JSON report");
  c->callback([&] { run = [&] { return cli::gradcheck(gc, std::cout); }; });

  cli::BenchRunArgs br;
  c = app.add_subcommand("bench-run", "Score a model on a benchmark manifest");
  c->add_option("--bench", br.bench)->required();
  c->add_option("--model", br.model, "responses.jsonl[#model] or toy:<checkpoint>")->required();
  c->add_option("--profile", br.profile, "generic, ref_box or a profile file");
  c->add_option("--judge", br.judge, "Judge gateway config or mock script");
  c->add_option("--out", br.out)->required();
  c->callback([&] { run = [&] { return cli::bench_run(br, std::cout); }; });

  cli::CompareArgs cm;
  c = app.add_subcommand("compare", "Relative scoring of two models");
  c->add_option("--bench", cm.bench)->required();
  c->add_option("--model-a", cm.model_a)->required();
  c->add_option("--model-b", cm.model_b)->required();
  c->add_option("--judge", cm.judge)->required();
  c->add_flag("--swapped", cm.swapped, "Also judge the swapped order");
  c->add_option("--out", cm.out)->required();
  c->callback([&] { run = [&] { return cli::compare(cm, std::cout); }; });

  cli::SynthCorpusArgs sc;
  c = app.add_subcommand("synth-corpus", "Write a synthetic grounded corpus");
  c->add_option("--records", sc.records);
  c->add_option("--seed", sc.seed);
  c->add_option("--out", sc.out)->required();
  c->add_option("--general", sc.general, "Also write this many general samples");
  c->add_option("--general-out", sc.general_out);
  c->callback([&] { run = [&] { return cli::synth_corpus(sc, std::cout); }; });

  cli::SynthToyArgs st;
  c = app.add_subcommand("synth-toy", "Write synthetic toy samples");
  c->add_option("--config", st.config);
  c->add_option("--n", st.n);
  c->add_option("--seed", st.seed);
  c->add_option("--world-seed", st.world_seed);
  c->add_option("--stage", st.stage)->check(CLI::IsMember({1, 2}));
  c->add_flag("--heldout", st.heldout, "Draw held-out identities");
  c->add_option("--mix", st.mix, "Task weights, e.g. qa:1,matching:0.5");
  c->add_option("--out", st.out)->required();
  c->callback([&] { run = [&] { return cli::synth_toy(st, std::cout); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cli::kExitInvalid;
  }
  return cli::guarded(std::cerr, run);
}

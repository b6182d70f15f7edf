// ============================================================================
// Command-line front end: run scenarios against a checkpoint or the stub,
// verify the engine's guarantees, benchmark the fixed-size state, train the
// toy task, and generate bundled scenarios / synthetic data / fresh weights.
// ============================================================================

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "dssm/harness.hpp"
#include "dssm/verify.hpp"

namespace {

using namespace dssm;

int cmd_run(const Scenario& scenario, const std::string& ckpt, const StubConfig& scfg,
            const std::string& trace_path, DuplexConfig dcfg) {
  dcfg.validate();

  std::unique_ptr<Decoder> dec;
  std::optional<ModelWeights> model;
  if (!ckpt.empty()) {
    model = load_model(ckpt);
    dec = std::make_unique<RealDecoder>(*model);
  } else {
    dec = std::make_unique<StubDecoder>(scfg);
  }

  Session session(*dec, dcfg);
  const std::vector<TraceEvent>& trace = session.run_scenario(scenario);
  validate_trace(trace);
  if (trace_path.empty() || trace_path == "-") {
    for (const auto& ev : trace) std::cout << ev.to_json() << "\n";
  } else {
    write_trace(trace_path, trace);
    std::cout << trace.size() << " events -> " << trace_path << "\n";
  }
  return 0;
}

int cmd_verify() {
  const std::vector<CheckResult> results = run_acceptance();
  int failed = 0;
  for (const auto& r : results) {
    std::printf("%s  %2d  %s  [%.2fs]\n", r.pass ? "PASS" : "FAIL", r.id,
                r.name.c_str(), r.seconds);
    if (!r.detail.empty()) std::printf("          %s\n", r.detail.c_str());
    if (!r.pass) ++failed;
  }
  std::printf("%d/%zu checks passed\n", static_cast<int>(results.size()) - failed,
              results.size());
  return failed == 0 ? 0 : 1;
}

int cmd_bench(const std::string& ckpt, const std::string& contexts_arg, uint64_t seed,
              const std::string& csv_path) {
  std::vector<int64_t> contexts;
  std::stringstream ss(contexts_arg);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (!part.empty()) contexts.push_back(std::stoll(part));
  }

  ModelWeights model;
  if (!ckpt.empty()) {
    model = load_model(ckpt);
  } else {
    LmConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 64;
    model = init_lm_only(cfg, seed, Dtype::F32);
    std::cerr << "no checkpoint given; benchmarking a randomly initialized "
              << cfg.n_layers << "-layer d_model=" << cfg.d_model << " decoder\n";
  }

  const std::vector<BenchRow> rows = bench_memory_latency(model, contexts, seed);
  const std::string csv = bench_csv(rows);
  if (csv_path.empty() || csv_path == "-") {
    std::cout << csv;
  } else {
    std::ofstream out(csv_path, std::ios::trunc);
    check(out.good(), "cannot open " + csv_path);
    out << csv;
    std::cout << rows.size() << " rows -> " << csv_path << "\n";
  }
  return 0;
}

int cmd_train_toy(ToyTrainConfig cfg, const std::string& save_path) {
  const ToyTrainResult res = train_toy_state_discrimination(cfg);
  std::printf("loss %.4f -> %.4f over %zu steps\n", res.first_window_loss,
              res.last_window_loss, res.step_losses.size());
  std::printf("held-out: precision %.4f  recall %.4f  F1 %.4f  (tp=%lld fp=%lld fn=%lld)\n",
              res.eval.precision, res.eval.recall, res.eval.f1,
              static_cast<long long>(res.eval.tp), static_cast<long long>(res.eval.fp),
              static_cast<long long>(res.eval.fn));
  if (!save_path.empty()) {
    save_model(save_path, res.model);
    std::printf("weights -> %s\n", save_path.c_str());
  }
  return 0;
}

int cmd_gen_scenario(const std::string& name, const std::string& out) {
  if (name == "list") {
    for (const auto& sc : scenario_library()) {
      std::printf("%-24s %s\n", sc.name.c_str(), sc.summary.c_str());
    }
    return 0;
  }
  const LibraryScenario& sc = library_scenario(name);
  if (out.empty() || out == "-") {
    for (const auto& ev : sc.scenario.events) std::cout << ev.to_json() << "\n";
  } else {
    write_scenario(out, sc.scenario);
    std::cout << sc.scenario.events.size() << " events -> " << out << "\n";
  }
  return 0;
}

int cmd_gen_data(int64_t n, uint64_t seed, const std::string& out) {
  SyntheticTaskSpec spec = SyntheticTaskSpec::defaults();
  spec.n = n;
  spec.seed = seed;
  const std::vector<SyntheticSample> samples = gen_synthetic_dataset(spec);
  if (out.empty() || out == "-") {
    const auto tmp = std::filesystem::temp_directory_path() / "dssm_gen_data.jsonl";
    write_dataset_jsonl(tmp.string(), samples);
    std::ifstream in(tmp);
    std::cout << in.rdbuf();
    std::filesystem::remove(tmp);
  } else {
    write_dataset_jsonl(out, samples);
    std::cout << samples.size() << " samples -> " << out << "\n";
  }
  return 0;
}

int cmd_init_ckpt(const std::string& preset, uint64_t seed, const std::string& out) {
  ModelWeights model;
  if (preset == "tiny-lm") {
    LmConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 64;
    model = init_lm_only(cfg, seed, Dtype::F32);
  } else if (preset == "tiny-full") {
    LmConfig lmc;
    lmc.n_layers = 2;
    lmc.d_model = 64;
    EncoderConfig ec;
    ec.n_layers = 2;
    ec.d_model = 64;
    ec.d_state = 8;
    ec.d_feat = 40;
    ec.frontend_c1 = 8;
    ec.frontend_c2 = 8;
    ec.conv_kernel = 15;
    ec.ffn_mult = 2;
    model = init_full(lmc, ec, 5, 0, seed, Dtype::F32);
  } else {
    std::cerr << "unknown preset '" << preset << "' (tiny-lm | tiny-full)\n";
    return 1;
  }
  save_model(out, model);
  size_t n_params = 0;
  for (const auto& [name, p] : model.named_params_const()) {
    n_params += static_cast<size_t>(p->numel());
  }
  std::cout << preset << " (" << n_params << " parameters) -> " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale full-duplex streaming decoder engine"};
  app.require_subcommand(1);

  // ---- run ----------------------------------------------------------------
  auto* run = app.add_subcommand("run", "replay a scenario file and emit its trace");
  std::string run_scenario_path, run_ckpt, run_trace;
  std::vector<std::string> stub_responses;
  DuplexConfig dcfg;
  run->add_option("--scenario", run_scenario_path,
                  "bundled scenario name (see gen-scenario --name list) or scenario JSONL path")
      ->required();
  run->add_option("--ckpt", run_ckpt, "decoder checkpoint (omit to use the stub)");
  run->add_option("--stub-response", stub_responses,
                  "canned stub reply; repeat for consecutive turns");
  run->add_option("--trace", run_trace, "trace JSONL out path ('-' for stdout)");
  run->add_option("--tick-ms", dcfg.tick_ms, "scheduler interval in ms");
  run->add_option("--slice-ms", dcfg.slice_ms, "nominal slice length in ms");
  run->add_option("--tokens-per-sec", dcfg.tokens_per_sec, "speaking rate budget");
  run->add_option("--max-response-tokens", dcfg.max_response_tokens,
                  "hard cap per response");

  // ---- verify ---------------------------------------------------------------
  app.add_subcommand("verify", "run every engine guarantee and report pass/fail");

  // ---- bench ----------------------------------------------------------------
  auto* bench = app.add_subcommand("bench", "measure state size and decode latency");
  std::string bench_ckpt, bench_contexts = "64,256,1024,4096,16384", bench_csv_path;
  uint64_t bench_seed = 1;
  bench->add_option("--ckpt", bench_ckpt, "decoder checkpoint (omit for random init)");
  bench->add_option("--contexts", bench_contexts,
                    "comma-separated context lengths, strictly increasing");
  bench->add_option("--seed", bench_seed, "token stream seed");
  bench->add_option("--csv", bench_csv_path, "CSV out path ('-' for stdout)");

  // ---- train-toy ------------------------------------------------------------
  auto* toy = app.add_subcommand("train-toy", "train the synthetic state task");
  ToyTrainConfig tcfg;
  std::string toy_save;
  toy->add_option("--n-train", tcfg.n_train, "training samples");
  toy->add_option("--n-eval", tcfg.n_eval, "held-out samples");
  toy->add_option("--epochs", tcfg.epochs, "passes over the training set");
  toy->add_option("--lr", tcfg.lr, "Adam learning rate");
  toy->add_option("--seed", tcfg.seed, "data and init seed");
  toy->add_option("--stage", tcfg.stage, "freeze-schedule stage (1-4)");
  toy->add_option("--log-every", tcfg.log_every, "print loss every N steps");
  toy->add_option("--save", toy_save, "write the trained weights here");

  // ---- gen-scenario ----------------------------------------------------------
  auto* gen_sc = app.add_subcommand("gen-scenario", "write a bundled scenario file");
  std::string gen_name = "list", gen_out;
  gen_sc->add_option("--name", gen_name, "scenario name, or 'list'");
  gen_sc->add_option("--out", gen_out, "scenario JSONL out path ('-' for stdout)");

  // ---- gen-data ----------------------------------------------------------------
  auto* gen_dt = app.add_subcommand("gen-data", "write a synthetic dataset");
  int64_t data_n = 400;
  uint64_t data_seed = 1;
  std::string data_out;
  gen_dt->add_option("--n", data_n, "sample count");
  gen_dt->add_option("--seed", data_seed, "generator seed");
  gen_dt->add_option("--out", data_out, "dataset JSONL out path ('-' for stdout)");

  // ---- init-ckpt ----------------------------------------------------------------
  auto* init_ck = app.add_subcommand("init-ckpt", "write randomly initialized weights");
  std::string ck_preset = "tiny-lm", ck_out;
  uint64_t ck_seed = 1;
  init_ck->add_option("--preset", ck_preset, "tiny-lm | tiny-full");
  init_ck->add_option("--seed", ck_seed, "init seed");
  init_ck->add_option("--out", ck_out, "checkpoint out path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      // --scenario accepts a bundled name or a file path. A bundled scenario
      // brings its own stub replies and timing, each overridable from the CLI.
      Scenario scenario;
      StubConfig scfg;
      bool bundled = false;
      for (const auto& sc : scenario_library()) {
        if (sc.name != run_scenario_path) continue;
        scenario = sc.scenario;
        scfg = sc.stub;
        if (run->count("--tick-ms") == 0) dcfg.tick_ms = sc.duplex.tick_ms;
        if (run->count("--slice-ms") == 0) dcfg.slice_ms = sc.duplex.slice_ms;
        if (run->count("--tokens-per-sec") == 0) {
          dcfg.tokens_per_sec = sc.duplex.tokens_per_sec;
        }
        if (run->count("--max-response-tokens") == 0) {
          dcfg.max_response_tokens = sc.duplex.max_response_tokens;
        }
        bundled = true;
        break;
      }
      if (!bundled) scenario = read_scenario(run_scenario_path);
      if (!stub_responses.empty()) scfg.responses = stub_responses;
      return cmd_run(scenario, run_ckpt, scfg, run_trace, dcfg);
    }
    if (app.get_subcommand("verify")->parsed()) return cmd_verify();
    if (bench->parsed()) {
      return cmd_bench(bench_ckpt, bench_contexts, bench_seed, bench_csv_path);
    }
    if (toy->parsed()) return cmd_train_toy(tcfg, toy_save);
    if (gen_sc->parsed()) return cmd_gen_scenario(gen_name, gen_out);
    if (gen_dt->parsed()) return cmd_gen_data(data_n, data_seed, data_out);
    if (init_ck->parsed()) return cmd_init_ckpt(ck_preset, ck_seed, ck_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

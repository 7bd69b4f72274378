// Copyright 2025 The Resect Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// resect: data generation, alignment, simulation, evaluation and token
// validation. Run `resect <subcommand> --help` for flags.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "resect/harness.hpp"

namespace {

using namespace resect;

struct Common {
  std::string config_dir;
  std::string plan;
  std::string grammar;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config-dir", c.config_dir, "Config directory (default $RESECT_CONFIG_DIR or ./config)");
  cmd->add_option("--plan", c.plan, "Prosthesis plan JSON");
  cmd->add_option("--grammar", c.grammar, "Grammar config JSON");
}

fs::path config_dir(const Common& c) {
  return c.config_dir.empty() ? default_config_dir() : fs::path(c.config_dir);
}

fs::path plan_path(const Common& c) {
  return c.plan.empty() ? config_dir(c) / "default_plan.json" : fs::path(c.plan);
}

GrammarConfig grammar_of(const Common& c) {
  if (!c.grammar.empty()) return load_grammar(c.grammar);
  fs::path p = config_dir(c) / "grammar.json";
  return fs::exists(p) ? load_grammar(p) : GrammarConfig::defaults();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Grammar-constrained knee resection policy harness"};
  app.require_subcommand(1);

  // gen-data
  Common gen_common;
  GenDataConfig gen;
  std::string gen_out = "data";
  std::size_t gen_jobs = 1;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate synthetic raw episode streams");
  add_common(gen_cmd, gen_common);
  gen_cmd->add_option("--episodes", gen.episodes, "Episode count")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Master seed")->capture_default_str();
  gen_cmd->add_option("--out", gen_out, "Output directory")->capture_default_str();
  gen_cmd->add_option("--pose-hz", gen.pose_rate_hz)->capture_default_str();
  gen_cmd->add_option("--state-hz", gen.state_rate_hz)->capture_default_str();
  gen_cmd->add_option("--frame-hz", gen.frame_rate_hz)->capture_default_str();
  gen_cmd->add_flag("--inject-gaps", gen.inject_gaps, "Drop 500 ms of end-effector and robot-state samples");
  gen_cmd->add_option("--jobs", gen_jobs)->capture_default_str();

  // resample
  Common rs_common;
  std::string rs_in, rs_out;
  double step_ms = 25.0;
  double pose_stale_ms = 100.0, state_stale_ms = 100.0, frame_stale_ms = 250.0;
  auto* rs_cmd = app.add_subcommand("resample", "Align raw streams onto the reference grid");
  add_common(rs_cmd, rs_common);
  rs_cmd->add_option("input", rs_in, "Raw episode JSONL")->required();
  rs_cmd->add_option("output", rs_out, "Aligned JSONL")->required();
  rs_cmd->add_option("--step-ms", step_ms)->capture_default_str();
  rs_cmd->add_option("--max-staleness", pose_stale_ms, "Pose staleness bound, ms")->capture_default_str();
  rs_cmd->add_option("--state-staleness", state_stale_ms, "Robot-state staleness bound, ms")->capture_default_str();
  rs_cmd->add_option("--frame-staleness", frame_stale_ms, "Frame staleness bound, ms")->capture_default_str();

  // simulate
  Common sim_common;
  RunConfig run;
  std::string backend = "oracle", mode = "greedy", noise_path, out_dir = "out";
  double noise_level = -1.0;
  long timeout_ms = 2000;
  bool no_eval = false;
  auto* sim_cmd = app.add_subcommand("simulate", "Run episodes against a policy backend");
  add_common(sim_cmd, sim_common);
  sim_cmd->add_option("--noise-config", noise_path, "Noise config JSON");
  sim_cmd->add_option("--noise", noise_level, "Pose jitter sigma in mm (overrides the noise config)");
  sim_cmd->add_option("--backend", backend)->check(CLI::IsMember({"oracle", "random", "remote"}))->capture_default_str();
  sim_cmd->add_option("--endpoint", run.endpoint, "Remote policy URL");
  sim_cmd->add_option("--timeout-ms", timeout_ms)->capture_default_str();
  sim_cmd->add_option("--retries", run.remote.retries)->capture_default_str();
  sim_cmd->add_option("--max-inflight", run.max_inflight, "Remote requests in flight across episodes");
  sim_cmd->add_option("--runs", run.runs)->capture_default_str();
  sim_cmd->add_option("--seed", run.seed)->capture_default_str();
  sim_cmd->add_option("--jobs", run.jobs)->capture_default_str();
  sim_cmd->add_option("--budget", run.step_budget, "Token budget per episode")->capture_default_str();
  sim_cmd->add_option("--decode", mode)->check(CLI::IsMember({"greedy", "temperature", "top-p"}))->capture_default_str();
  sim_cmd->add_option("--temperature", run.decode.temperature)->capture_default_str();
  sim_cmd->add_option("--top-p", run.decode.top_p)->capture_default_str();
  sim_cmd->add_option("--delta", run.eval.delta_mm, "Success threshold, mm")->capture_default_str();
  sim_cmd->add_option("--samples", run.eval.samples_per_patch, "Points per surface patch")->capture_default_str();
  sim_cmd->add_option("--out", out_dir)->capture_default_str();
  sim_cmd->add_flag("--no-eval", no_eval, "Skip the report");

  // evaluate
  std::string ev_in, ev_out, method = "resect";
  EvalConfig eval;
  auto* ev_cmd = app.add_subcommand("evaluate", "Score an episodes.jsonl file");
  ev_cmd->add_option("results", ev_in, "episodes.jsonl or the directory holding it")->required();
  ev_cmd->add_option("--delta", eval.delta_mm)->capture_default_str();
  ev_cmd->add_option("--runs", eval.runs, "Expected episode count (warns on mismatch)")->capture_default_str();
  ev_cmd->add_option("--out", ev_out, "Report directory (default: next to the results)");
  ev_cmd->add_option("--method", method, "Row label in the CSV tables")->capture_default_str();

  // validate
  Common val_common;
  std::string val_in;
  auto* val_cmd = app.add_subcommand("validate", "Check token sequences against the masking rules");
  add_common(val_cmd, val_common);
  val_cmd->add_option("tokens", val_in, "JSONL file with token sequences")->required();

  // decode
  Common dec_common;
  std::string dec_in;
  auto* dec_cmd = app.add_subcommand("decode", "Print token sequences as commands");
  add_common(dec_cmd, dec_common);
  dec_cmd->add_option("tokens", dec_in, "JSONL file with token sequences")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen_cmd) {
      auto model = load_model(plan_path(gen_common));
      Vocabulary vocab(grammar_of(gen_common));
      auto paths = gen_data(model, vocab, gen, gen_out, gen_jobs);
      std::cout << "wrote " << paths.size() << " episodes to " << gen_out << '\n';
      return kExitOk;
    }
    if (*rs_cmd) {
      AlignmentConfig cfg;
      cfg.step_us = std::llround(step_ms * 1000.0);
      cfg.pose_staleness_us = std::llround(pose_stale_ms * 1000.0);
      cfg.state_staleness_us = std::llround(state_stale_ms * 1000.0);
      cfg.frame_staleness_us = std::llround(frame_stale_ms * 1000.0);
      if (cfg.step_us <= 0) throw ConfigError("--step-ms must be positive");
      Vocabulary vocab(grammar_of(rs_common));
      resample_file(rs_in, rs_out, cfg, vocab);
      return kExitOk;
    }
    if (*sim_cmd) {
      run.plan_path = sim_common.plan;
      run.grammar_path = sim_common.grammar;
      run.noise_path = noise_path;
      run.out_dir = out_dir;
      run.backend = backend_from_string(backend);
      run.decode.mode = decode_mode_from_string(mode);
      run.remote.timeout = std::chrono::milliseconds(timeout_ms);
      if (noise_level >= 0.0) run.noise_level = noise_level;
      run.resolve(config_dir(sim_common));
      auto out = simulate(run, &std::cout);
      if (!no_eval) {
        ResultsFile rf = read_results(run.out_dir / "episodes.jsonl");
        EvalConfig ec = run.eval;
        ec.runs = run.runs;
        EvalReport rep = evaluate_results(rf, ec);
        write_report(rep, run.out_dir, std::string(to_string(run.backend)));
        print_report(std::cout, rep);
      }
      return out.aborted ? kExitBackendAbort : kExitOk;
    }
    if (*ev_cmd) {
      eval.validate();
      fs::path in = ev_in;
      if (fs::is_directory(in)) in /= "episodes.jsonl";
      ResultsFile rf = read_results(in);
      if (rf.episodes.size() != eval.runs) {
        std::cerr << "note: " << rf.episodes.size() << " episodes in " << in.string() << ", --runs "
                  << eval.runs << '\n';
      }
      EvalReport rep = evaluate_results(rf, eval);
      write_report(rep, ev_out.empty() ? in.parent_path() : fs::path(ev_out), method);
      print_report(std::cout, rep);
      return kExitOk;
    }
    if (*val_cmd) {
      auto model = load_model(plan_path(val_common));
      Vocabulary vocab(grammar_of(val_common));
      auto seqs = read_token_sequences(val_in);
      auto rep = validate_sequences(seqs, model, vocab);
      print_validation(std::cout, rep);
      return rep.violations() ? kExitViolations : kExitOk;
    }
    if (*dec_cmd) {
      Vocabulary vocab(grammar_of(dec_common));
      print_decoded(std::cout, read_token_sequences(dec_in), vocab);
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const BackendError& e) {
    std::cerr << "backend error: " << e.what() << '\n';
    return kExitBackendAbort;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitOk;
}

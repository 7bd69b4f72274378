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

// Subcommand implementations behind tools/resect.cpp. File formats are
// described in docs/schema.md.

#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "resect/bench_sim.hpp"
#include "resect/common.hpp"
#include "resect/decoder.hpp"
#include "resect/evaluation.hpp"
#include "resect/geometry.hpp"
#include "resect/grammar.hpp"
#include "resect/policy.hpp"
#include "resect/remote_policy.hpp"
#include "resect/timeline.hpp"

namespace resect {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitViolations = 3;
inline constexpr int kExitBackendAbort = 4;

// RESECT_CONFIG_DIR, else ./config.
inline fs::path default_config_dir() {
  if (const char* env = std::getenv("RESECT_CONFIG_DIR"); env && *env) return env;
  return "config";
}

inline json read_json_checked(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError(str_cat(path.string(), ": file not found"));
  return read_json_file(path.string());
}

inline ProsthesisModel load_model(const fs::path& path) {
  try {
    return model_from_json(read_json_checked(path));
  } catch (const ConfigError& e) {
    throw ConfigError(str_cat(path.string(), ": ", e.what()));
  }
}

inline GrammarConfig load_grammar(const fs::path& path) {
  if (path.empty()) return GrammarConfig::defaults();
  try {
    return grammar_from_json(read_json_checked(path));
  } catch (const ConfigError& e) {
    throw ConfigError(str_cat(path.string(), ": ", e.what()));
  }
}

inline NoiseModel load_noise(const fs::path& path) {
  if (path.empty()) return NoiseModel{};
  try {
    return noise_from_json(read_json_checked(path));
  } catch (const ConfigError& e) {
    throw ConfigError(str_cat(path.string(), ": ", e.what()));
  }
}

enum class BackendKind { kOracle, kRandom, kRemote };

inline BackendKind backend_from_string(std::string_view s) {
  if (s == "oracle") return BackendKind::kOracle;
  if (s == "random") return BackendKind::kRandom;
  if (s == "remote") return BackendKind::kRemote;
  throw ConfigError(str_cat("unknown backend '", s, "'"));
}

inline std::string_view to_string(BackendKind b) {
  switch (b) {
    case BackendKind::kOracle: return "oracle";
    case BackendKind::kRandom: return "random";
    case BackendKind::kRemote: return "remote";
  }
  return "?";
}

struct RunConfig {
  fs::path plan_path;
  fs::path grammar_path;
  fs::path noise_path;
  fs::path out_dir = "out";
  std::uint64_t seed = 0;
  std::size_t runs = 7;
  std::size_t jobs = 1;
  std::size_t step_budget = 512;
  DecodeConfig decode;
  BackendKind backend = BackendKind::kOracle;
  std::string endpoint;
  RemoteOptions remote;
  std::size_t max_inflight = 0;       // 0: one per job
  std::optional<double> noise_level;  // overrides the noise file sigmas
  EvalConfig eval;

  // Fills empty paths from the config directory and checks the rest.
  void resolve(const fs::path& config_dir = default_config_dir()) {
    if (plan_path.empty()) plan_path = config_dir / "default_plan.json";
    if (grammar_path.empty() && fs::exists(config_dir / "grammar.json")) {
      grammar_path = config_dir / "grammar.json";
    }
    if (noise_path.empty() && fs::exists(config_dir / "noise.json")) {
      noise_path = config_dir / "noise.json";
    }
    for (const auto& p : {plan_path, grammar_path, noise_path}) {
      if (!p.empty() && !fs::exists(p)) throw ConfigError(str_cat(p.string(), ": file not found"));
    }
    if (runs == 0) throw ConfigError("--runs must be >= 1");
    if (jobs == 0) throw ConfigError("--jobs must be >= 1");
    if (backend == BackendKind::kRemote && endpoint.empty()) {
      throw ConfigError("--backend remote needs --endpoint");
    }
    if (noise_level && !(*noise_level >= 0.0)) throw ConfigError("--noise must be >= 0");
    decode.validate();
    eval.validate();
  }
};

// Runs fn(i) for i in [0, n) on up to jobs threads.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  {
    std::vector<std::jthread> workers;
    for (std::size_t w = 0; w < jobs; ++w) {
      workers.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(error_mu);
            if (!error) error = std::current_exception();
          }
        }
      });
    }
  }
  if (error) std::rethrow_exception(error);
}

// Seed streams derived per episode from the master seed.
enum SeedStream : std::uint64_t { kDecodeStream = 1, kNoiseStream = 2, kPatchStream = 3, kPolicyStream = 4 };

// ---------------------------------------------------------------------------
// simulate

struct SimulateOutput {
  std::vector<EpisodeResult> episodes;
  ProsthesisModel model;
  std::size_t aborted = 0;
};

inline json results_header(const RunConfig& cfg, const ProsthesisModel& model,
                           const GrammarConfig& grammar, const NoiseModel& noise) {
  return json{{"schema_version", kSchemaVersion},
              {"type", "results_header"},
              {"backend", to_string(cfg.backend)},
              {"seed", cfg.seed},
              {"runs", cfg.runs},
              {"step_budget", cfg.step_budget},
              {"decode", {{"mode", to_string(cfg.decode.mode)},
                          {"temperature", cfg.decode.temperature},
                          {"top_p", cfg.decode.top_p}}},
              {"samples_per_patch", cfg.eval.samples_per_patch},
              {"noise", noise_to_json(noise)},
              {"grammar", grammar_to_json(grammar)},
              {"plan", model_to_json(model)}};
}

inline SimulateOutput simulate(const RunConfig& cfg, std::ostream* log = nullptr) {
  ProsthesisModel model = load_model(cfg.plan_path);
  GrammarConfig grammar = load_grammar(cfg.grammar_path);
  grammar.validate();
  NoiseModel noise = load_noise(cfg.noise_path);
  if (cfg.noise_level) {
    NoiseModel lvl = NoiseModel::level(*cfg.noise_level);
    noise.sigma_translation_mm = lvl.sigma_translation_mm;
    noise.sigma_rotation_deg = lvl.sigma_rotation_deg;
  }
  noise.validate();
  const Vocabulary vocab(grammar);
  const OraclePlan oracle = build_oracle_plan(*model.plan, model.plane_order, vocab);

  std::shared_ptr<std::counting_semaphore<>> inflight;
  if (cfg.backend == BackendKind::kRemote) {
    std::size_t bound = cfg.max_inflight ? cfg.max_inflight : cfg.jobs;
    inflight = std::make_shared<std::counting_semaphore<>>(static_cast<std::ptrdiff_t>(bound));
  }

  SimulateOutput out;
  out.episodes.resize(cfg.runs);
  parallel_for(cfg.runs, cfg.jobs, [&](std::size_t i) {
    EpisodeConfig ec;
    ec.episode_id = str_cat("episode-", i);
    ec.run_index = i;
    ec.decode = cfg.decode;
    ec.decode.seed = derive_seed(cfg.seed, i, kDecodeStream);
    ec.step_budget = cfg.step_budget;
    ec.samples_per_patch = cfg.eval.samples_per_patch;
    ec.patch_seed = derive_seed(cfg.seed, i, kPatchStream);
    ec.noise_seed = derive_seed(noise.seed ^ cfg.seed, i, kNoiseStream);
    std::unique_ptr<PolicyBackend> backend;
    switch (cfg.backend) {
      case BackendKind::kOracle: backend = std::make_unique<OracleBackend>(oracle, vocab); break;
      case BackendKind::kRandom:
        backend = std::make_unique<RandomBackend>(derive_seed(cfg.seed, i, kPolicyStream));
        break;
      case BackendKind::kRemote:
        backend = std::make_unique<RemoteBackend>(cfg.endpoint, cfg.remote, inflight);
        break;
    }
    out.episodes[i] = run_episode(*backend, model, vocab, noise, ec);
  });

  fs::create_directories(cfg.out_dir);
  {
    std::ofstream f(cfg.out_dir / "episodes.jsonl", std::ios::binary);
    if (!f) throw ConfigError(str_cat((cfg.out_dir / "episodes.jsonl").string(), ": cannot write"));
    f << results_header(cfg, model, grammar, noise).dump() << '\n';
    for (const auto& ep : out.episodes) f << episode_to_json(ep, *model.plan).dump() << '\n';
  }
  {
    std::ofstream f(cfg.out_dir / "timing.csv");
    f << "episode_id,step,policy_ms,decode_ms\n" << std::fixed << std::setprecision(6);
    for (const auto& ep : out.episodes) {
      for (const auto& t : ep.timings) {
        f << ep.episode_id << ',' << t.step << ',' << t.policy_ms << ',' << t.decode_ms << '\n';
      }
    }
  }
  for (const auto& ep : out.episodes) out.aborted += ep.aborted ? 1 : 0;
  if (log) {
    double decode_ms = 0.0, policy_ms = 0.0;
    std::size_t steps = 0;
    for (const auto& ep : out.episodes) {
      for (const auto& t : ep.timings) {
        decode_ms += t.decode_ms;
        policy_ms += t.policy_ms;
        ++steps;
      }
    }
    *log << "episodes: " << out.episodes.size() << " (aborted " << out.aborted << ")\n";
    if (steps) {
      *log << std::fixed << std::setprecision(4) << "mean decode ms/step: " << decode_ms / steps
           << ", mean policy ms/step: " << policy_ms / steps << '\n';
    }
  }
  out.model = std::move(model);
  return out;
}

// ---------------------------------------------------------------------------
// evaluate

struct ResultsFile {
  json header;
  ProsthesisModel model;
  std::vector<EpisodeResult> episodes;
};

inline ResultsFile read_results(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(str_cat(path.string(), ": cannot open"));
  ResultsFile rf;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      if (lineno == 1) {
        if (j.value("type", "") != "results_header") throw ConfigError("first record must be a results_header");
        if (j.value("schema_version", 0) != kSchemaVersion) {
          throw ConfigError(str_cat("unsupported schema_version ", j.value("schema_version", 0)));
        }
        rf.model = model_from_json(j.at("plan"));
        rf.header = std::move(j);
        continue;
      }
      rf.episodes.push_back(episode_from_json(j));
    } catch (const json::exception& e) {
      throw ConfigError(str_cat(path.string(), ":", lineno, ": ", e.what()));
    } catch (const ConfigError& e) {
      throw ConfigError(str_cat(path.string(), ":", lineno, ": ", e.what()));
    }
  }
  if (rf.header.is_null()) throw ConfigError(str_cat(path.string(), ": empty results file"));
  return rf;
}

inline EvalReport evaluate_results(const ResultsFile& rf, const EvalConfig& cfg) {
  std::vector<EpisodeScore> scores;
  for (const auto& ep : rf.episodes) scores.push_back(score_episode(ep, rf.model, cfg));
  return aggregate(std::move(scores), rf.model, cfg);
}

// Writes report.json, report_sr.csv and report_spl.csv into out_dir.
inline void write_report(const EvalReport& rep, const fs::path& out_dir, const std::string& method) {
  fs::create_directories(out_dir);
  std::ofstream(out_dir / "report.json") << report_to_json(rep).dump(2) << '\n';
  std::ofstream sr(out_dir / "report_sr.csv");
  write_sr_csv(sr, rep, method);
  std::ofstream spl(out_dir / "report_spl.csv");
  write_spl_csv(spl, rep, method);
}

inline void print_report(std::ostream& out, const EvalReport& rep) {
  out << std::defaultfloat << "delta " << rep.delta_mm << " mm\n";
  for (std::size_t c = 0; c < rep.columns.size(); ++c) {
    out << std::left << std::setw(20) << rep.column_names[c] << " SR " << format_rate(rep.plane_sr[c])
        << "  SPL " << format_mean_sd(rep.plane_spl[c]) << '\n';
  }
  out << std::left << std::setw(20) << "episode" << " SR " << format_rate(rep.episode_sr) << "  SPL "
      << format_mean_sd(rep.episode_spl) << '\n';
  if (rep.aborted) out << "aborted episodes (excluded): " << rep.aborted << '\n';
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataConfig {
  std::size_t episodes = 1;
  std::uint64_t seed = 0;
  double pose_rate_hz = 60.0;
  double state_rate_hz = 120.0;
  double frame_rate_hz = 30.0;
  bool inject_gaps = false;
  std::int64_t gap_us = 500'000;
  std::int64_t epoch_us = 1'700'000'000'000'000;
};

// One executed command of the noiseless oracle, with the tool pose at its
// start and end and its timing.
struct ScriptStep {
  ActionCommand cmd;
  double t_start_s = 0.0;
  double t_end_s = 0.0;
  SE3 from;
  SE3 to;
};

inline std::vector<ScriptStep> oracle_script(const ProsthesisModel& model, const Vocabulary& vocab) {
  const OraclePlan oracle = build_oracle_plan(*model.plan, model.plane_order, vocab);
  SimState sim = SimState::initial(model, 0, 16);
  std::mt19937_64 rng(0);
  std::vector<ScriptStep> steps;
  double t = 0.5;  // idle lead-in
  while (auto cmd = oracle_next_command(oracle, sim.observation(), vocab)) {
    ScriptStep st{*cmd, t, t, sim.tool_pose, sim.tool_pose};
    double before = sim.execution_time_s;
    SimStep out = apply_action(std::move(sim), *cmd, model, NoiseModel{}, vocab, rng);
    sim = std::move(out.state);
    st.t_end_s = t + std::max(sim.execution_time_s - before, 0.1);
    st.to = sim.tool_pose;
    t = st.t_end_s;
    steps.push_back(st);
    if (steps.size() > 1000) throw Error("oracle script does not terminate");
  }
  return steps;
}

inline SE3 interpolate(const SE3& a, const SE3& b, double s) {
  return SE3(a.rotation().slerp(s, b.rotation()), (1.0 - s) * a.translation() + s * b.translation());
}

// Tool pose in the bone frame at time t_s along the script.
inline SE3 script_pose(std::span<const ScriptStep> steps, const SE3& initial, double t_s) {
  SE3 pose = initial;
  for (const auto& st : steps) {
    if (t_s < st.t_start_s) break;
    if (t_s >= st.t_end_s) {
      pose = st.to;
      continue;
    }
    return interpolate(st.from, st.to, (t_s - st.t_start_s) / (st.t_end_s - st.t_start_s));
  }
  return pose;
}

inline std::vector<std::int64_t> stream_times(std::int64_t epoch_us, double rate_hz, double duration_s) {
  std::vector<std::int64_t> out;
  for (std::int64_t k = 0;; ++k) {
    std::int64_t dt = std::llround(static_cast<double>(k) * 1e6 / rate_hz);
    if (static_cast<double>(dt) > duration_s * 1e6) break;
    out.push_back(epoch_us + dt);
  }
  return out;
}

// Removes the records inside a gap_us window starting at a seeded time and
// returns the bracketing timestamps of the resulting hole.
inline Gap inject_gap(StampedStream& s, std::int64_t gap_us, std::mt19937_64& rng) {
  const std::int64_t first = s.records.front().t_us;
  const std::int64_t last = s.records.back().t_us;
  std::uniform_int_distribution<std::int64_t> start_dist(first + (last - first) / 4,
                                                         first + (last - first) / 2);
  std::int64_t start = start_dist(rng);
  std::erase_if(s.records, [&](const StampedRecord& r) {
    return r.t_us >= start && r.t_us < start + gap_us;
  });
  for (std::size_t i = 1; i < s.records.size(); ++i) {
    if (s.records[i].t_us >= start + gap_us) return {s.records[i - 1].t_us, s.records[i].t_us};
  }
  throw Error("gap injection removed the tail of the stream");
}

inline RawEpisode generate_episode(const ProsthesisModel& model, const Vocabulary& vocab,
                                   const GenDataConfig& cfg, std::size_t index) {
  const auto steps = oracle_script(model, vocab);
  const double duration_s = (steps.empty() ? 0.0 : steps.back().t_end_s) + 0.5;
  std::mt19937_64 rng(derive_seed(cfg.seed, index, 0));

  // Camera-from-femur and femur-from-tibia placements vary per episode.
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  const SE3 femur_to_cam = SE3::from_axis_angle(Vec3(jitter(rng), jitter(rng), 1.0), 0.3 * jitter(rng),
                                                Vec3(50.0 * jitter(rng), 50.0 * jitter(rng), 900.0));
  const SE3 tibia_to_femur = SE3::from_axis_angle(Vec3::UnitX(), deg_to_rad(5.0 + 5.0 * jitter(rng)),
                                                  Vec3(0.0, 0.0, -60.0));
  const SE3 tibia_to_cam = compose(femur_to_cam, tibia_to_femur);

  RawEpisode ep;
  ep.episode_id = str_cat("gen-", index);
  ep.epoch_us = cfg.epoch_us;
  ep.instruction = "execute six-plane knee resection";

  auto times = [&](double rate) { return stream_times(cfg.epoch_us, rate, duration_s); };
  auto seconds = [&](std::int64_t t_us) { return static_cast<double>(t_us - cfg.epoch_us) * 1e-6; };

  StampedStream femur{"pose/femur", StreamKind::kPose, cfg.pose_rate_hz, {}};
  StampedStream tibia{"pose/tibia", StreamKind::kPose, cfg.pose_rate_hz, {}};
  StampedStream ee{"pose/end_effector", StreamKind::kPose, cfg.pose_rate_hz, {}};
  for (auto t : times(cfg.pose_rate_hz)) {
    SE3 tool = script_pose(steps, model.initial_tool_pose, seconds(t));
    femur.records.push_back({t, PoseRecord{TrackedObject::kFemur, femur_to_cam}});
    tibia.records.push_back({t, PoseRecord{TrackedObject::kTibia, tibia_to_cam}});
    ee.records.push_back({t, PoseRecord{TrackedObject::kEndEffector, compose(femur_to_cam, tool)}});
  }

  const std::size_t joints = vocab.config().num_joints;
  StampedStream state{"robot/state", StreamKind::kRobotState, cfg.state_rate_hz, {}};
  const double dt = 1.0 / cfg.state_rate_hz;
  for (auto t : times(cfg.state_rate_hz)) {
    double s = seconds(t);
    auto q = pseudo_joints(script_pose(steps, model.initial_tool_pose, s), joints);
    auto q_next = pseudo_joints(script_pose(steps, model.initial_tool_pose, s + dt), joints);
    std::vector<double> qd(joints), tau(joints, 0.0);
    for (std::size_t j = 0; j < joints; ++j) qd[j] = (q_next[j] - q[j]) / dt;
    state.records.push_back({t, RobotStateRecord{q, qd, tau}});
  }

  StampedStream frames{"camera/rgbd", StreamKind::kFrame, cfg.frame_rate_hz, {}};
  std::uint64_t frame_index = 0;
  for (auto t : times(cfg.frame_rate_hz)) {
    frames.records.push_back({t, FrameRecord{str_cat("frames/", ep.episode_id, "/", frame_index, ".png"),
                                             frame_index}});
    ++frame_index;
  }

  StampedStream events{"events", StreamKind::kEvent, 0.0, {}};
  for (const auto& st : steps) {
    auto t = cfg.epoch_us + std::llround(st.t_start_s * 1e6);
    events.records.push_back({t, EventRecord{"command", encode_command(st.cmd, vocab), to_string(st.cmd)}});
  }
  events.records.push_back({cfg.epoch_us + std::llround((duration_s - 0.25) * 1e6),
                            EventRecord{"end", {vocab.control(Control::kEos)}, "<EOS>"}});

  json gaps = json::array();
  if (cfg.inject_gaps) {
    for (StampedStream* s : {&ee, &state}) {
      Gap g = inject_gap(*s, cfg.gap_us, rng);
      gaps.push_back({{"stream", s->id}, {"last_before_us", g.last_before_us},
                      {"first_after_us", g.first_after_us}});
    }
  }
  ep.extra["injected_gaps"] = gaps;
  ep.extra["generator_seed"] = cfg.seed;
  ep.streams = {femur, tibia, ee, state, frames, events};
  return ep;
}

inline std::vector<fs::path> gen_data(const ProsthesisModel& model, const Vocabulary& vocab,
                                      const GenDataConfig& cfg, const fs::path& out_dir,
                                      std::size_t jobs = 1) {
  fs::create_directories(out_dir);
  std::vector<fs::path> paths(cfg.episodes);
  parallel_for(cfg.episodes, jobs, [&](std::size_t i) {
    RawEpisode ep = generate_episode(model, vocab, cfg, i);
    paths[i] = out_dir / str_cat("episode_", std::setw(4), std::setfill('0'), i, ".jsonl");
    std::ofstream f(paths[i], std::ios::binary);
    if (!f) throw ConfigError(str_cat(paths[i].string(), ": cannot write"));
    write_episode_jsonl(f, ep);
  });
  return paths;
}

// ---------------------------------------------------------------------------
// resample

struct AlignedEpisode {
  json header;
  std::vector<json> frames;
};

inline AlignedEpisode align_episode(const RawEpisode& ep, const AlignmentConfig& cfg,
                                    const Vocabulary& vocab) {
  std::int64_t last = ep.epoch_us;
  for (const auto& s : ep.streams) {
    if (!s.records.empty()) last = std::max(last, s.records.back().t_us);
  }
  ReferenceGrid grid = ReferenceGrid::covering(ep.epoch_us, last, cfg.step_us);
  std::vector<std::string> warnings;
  auto frames = assemble_frames(ep.streams, grid, cfg, vocab, &warnings);

  json dropouts = json::array();
  json streams = json::array();
  for (const auto& s : ep.streams) {
    streams.push_back({{"id", s.id}, {"kind", to_string(s.kind)}, {"rate_hz", s.rate_hz}});
    if (s.kind == StreamKind::kEvent) continue;
    for (const auto& g : detect_dropouts(s, cfg.staleness_for(s.kind))) {
      dropouts.push_back({{"stream", s.id}, {"last_before_us", g.last_before_us},
                          {"first_after_us", g.first_after_us}});
    }
  }

  AlignedEpisode out;
  out.header = json{{"schema_version", kSchemaVersion},
                    {"type", "aligned_header"},
                    {"episode_id", ep.episode_id},
                    {"epoch_us", grid.epoch_us},
                    {"step_us", grid.step_us},
                    {"length", grid.length},
                    {"staleness_us", {{"pose", cfg.pose_staleness_us},
                                      {"robot_state", cfg.state_staleness_us},
                                      {"frame", cfg.frame_staleness_us}}},
                    {"streams", streams},
                    {"dropouts", dropouts},
                    {"warnings", warnings}};
  for (const auto& f : frames) {
    json samples = json::object();
    for (const auto& slot : f.streams) {
      samples[slot.stream_id] =
          slot.sample ? json{{"source_index", slot.sample->source_index},
                             {"source_t_us", slot.sample->source_t_us},
                             {"staleness_us", slot.sample->staleness_us}}
                      : json(nullptr);
    }
    json poses = json::object();
    for (const auto& [obj, pose] : f.poses) poses[std::string(to_string(obj))] = se3_to_json(pose);
    out.frames.push_back(json{{"type", "frame"},
                              {"index", f.index},
                              {"t_us", f.t_us},
                              {"degraded", f.degraded},
                              {"degraded_streams", f.degraded_streams},
                              {"state_tokens", f.state_tokens},
                              {"samples", samples},
                              {"poses", poses}});
  }
  return out;
}

inline void write_aligned_jsonl(std::ostream& out, const AlignedEpisode& ep) {
  out << ep.header.dump() << '\n';
  for (const auto& f : ep.frames) out << f.dump() << '\n';
}

// Raw episode in, aligned episode out. An already aligned file at the same
// grid step is passed through unchanged.
inline void resample_file(const fs::path& in_path, const fs::path& out_path, const AlignmentConfig& cfg,
                          const Vocabulary& vocab) {
  std::ifstream in(in_path);
  if (!in) throw ConfigError(str_cat(in_path.string(), ": cannot open"));
  std::string first;
  std::getline(in, first);
  json head;
  try {
    head = json::parse(first);
  } catch (const json::exception& e) {
    throw ConfigError(str_cat(in_path.string(), ":1: ", e.what()));
  }
  std::ostringstream buf;
  if (head.value("type", "") == "aligned_header") {
    if (head.value("step_us", std::int64_t{0}) != cfg.step_us) {
      throw ConfigError(str_cat(in_path.string(), ": already aligned at step ",
                                head.value("step_us", std::int64_t{0}), " us"));
    }
    buf << head.dump() << '\n';
    std::string line;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        buf << json::parse(line).dump() << '\n';
      } catch (const json::exception& e) {
        throw ConfigError(str_cat(in_path.string(), ":", lineno, ": ", e.what()));
      }
    }
  } else {
    in.clear();
    in.seekg(0);
    RawEpisode ep = read_episode_jsonl(in, in_path.string());
    write_aligned_jsonl(buf, align_episode(ep, cfg, vocab));
  }
  if (!out_path.parent_path().empty()) fs::create_directories(out_path.parent_path());
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw ConfigError(str_cat(out_path.string(), ": cannot write"));
  out << buf.str();
}

// ---------------------------------------------------------------------------
// validate / decode

struct TokenSequence {
  std::string label;
  std::vector<TokenId> tokens;
};

// Token sequences in a JSONL file. Event records of a raw episode are
// concatenated into one sequence; any other record with a "tokens" array is
// a sequence of its own.
inline std::vector<TokenSequence> read_token_sequences(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(str_cat(path.string(), ": cannot open"));
  std::vector<TokenSequence> out;
  std::optional<std::size_t> episode_seq;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ConfigError(str_cat(path.string(), ":", lineno, ": ", e.what()));
    }
    if (j.value("type", "") == "episode_header") {
      out.push_back({j.value("episode_id", str_cat(path.filename().string(), ":", lineno)), {}});
      episode_seq = out.size() - 1;
      continue;
    }
    if (!j.is_object()) continue;
    const bool event = episode_seq && j.contains("stream") && j.contains("payload");
    const json& holder = event ? j.at("payload") : j;
    if (!holder.is_object() || !holder.contains("tokens")) continue;
    std::vector<TokenId> tokens;
    try {
      tokens = holder.at("tokens").get<std::vector<TokenId>>();
    } catch (const json::exception& e) {
      throw ConfigError(str_cat(path.string(), ":", lineno, ": ", e.what()));
    }
    if (event) {
      auto& seq = out[*episode_seq].tokens;
      seq.insert(seq.end(), tokens.begin(), tokens.end());
      continue;
    }
    out.push_back({j.value("episode_id", str_cat(path.filename().string(), ":", lineno)),
                   std::move(tokens)});
  }
  return out;
}

struct ValidationReport {
  std::vector<std::pair<std::string, std::optional<Violation>>> results;

  std::size_t violations() const {
    std::size_t n = 0;
    for (const auto& [_, v] : results) n += v ? 1 : 0;
    return n;
  }
};

inline ValidationReport validate_sequences(std::span<const TokenSequence> seqs,
                                           const ProsthesisModel& model, const Vocabulary& vocab) {
  ValidationReport rep;
  const SafetyContext fresh = SafetyContext::fresh(model.plan, model.initial_tool_pose, model.tolerance);
  for (const auto& s : seqs) rep.results.emplace_back(s.label, validate_sequence(s.tokens, fresh, vocab));
  return rep;
}

inline void print_validation(std::ostream& out, const ValidationReport& rep) {
  for (const auto& [label, v] : rep.results) {
    if (v) {
      out << label << ": violation at index " << v->index << " [" << v->rule << "] " << v->detail << '\n';
    } else {
      out << label << ": ok\n";
    }
  }
  out << rep.results.size() << " sequences, " << rep.violations() << " with violations\n";
}

inline void print_decoded(std::ostream& out, std::span<const TokenSequence> seqs, const Vocabulary& vocab) {
  for (const auto& s : seqs) {
    DecodeResult r = decode_tokens(s.tokens, vocab);
    out << s.label << ':';
    for (const auto& c : r.commands) out << ' ' << to_string(c);
    if (r.error) out << "  ! " << r.error->reason << " at index " << r.error->index;
    out << '\n';
  }
}

}  // namespace resect

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

// Kinematic benchtop simulator for six-plane knee resection.
//
// MOVE teleports the tool to the commanded position and meters the straight
// line. ALIGN puts the tool on the plane's canonical frame composed with the
// commanded offset, perturbed by pose jitter, and meters the translation; the
// plane becomes Aligned only if the measured pose is within tolerance and the
// tracker did not drop out. CUT sweeps the window of the aligned plane: the
// executed patch is the planned patch moved by the residual pose error (plus
// any tracking bias the gate cannot see) with per-point jitter on top.

#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "resect/common.hpp"
#include "resect/decoder.hpp"
#include "resect/geometry.hpp"
#include "resect/grammar.hpp"
#include "resect/policy.hpp"

namespace resect {

inline constexpr double kTravelSpeed = 20.0;   // mm/s for MOVE and ALIGN
inline constexpr double kAlignSettle = 0.5;    // s

struct ProsthesisModel {
  std::shared_ptr<const ResectionPlan> plan;
  SE3 initial_tool_pose;
  std::vector<std::size_t> plane_order;  // indices into plan->planes
  std::vector<double> difficulty;        // per plane noise multiplier
  AlignmentTolerance tolerance;

  static std::vector<std::size_t> table_order() {
    std::vector<std::size_t> order;
    for (PlaneName p : kTableOrder) order.push_back(static_cast<std::size_t>(p) - 1);
    return order;
  }

  static ProsthesisModel from_plan(ResectionPlan plan, SE3 initial_tool_pose = {}) {
    ProsthesisModel m;
    m.difficulty.assign(plan.planes.size(), 1.0);
    m.plan = std::make_shared<const ResectionPlan>(std::move(plan));
    m.initial_tool_pose = initial_tool_pose;
    m.plane_order = table_order();
    return m;
  }

  void validate() const {
    if (!plan) throw ConfigError("model has no plan");
    if (difficulty.size() != plan->planes.size()) {
      throw ConfigError("difficulty must list one multiplier per plane");
    }
    for (double d : difficulty) {
      if (!(d >= 0.0)) throw ConfigError("difficulty multipliers must be >= 0");
    }
    std::vector<bool> seen(plan->planes.size(), false);
    for (auto i : plane_order) {
      if (i >= seen.size() || seen[i]) throw ConfigError("plane_order must be a permutation");
      seen[i] = true;
    }
    if (plane_order.size() != plan->planes.size()) {
      throw ConfigError("plane_order must list every plane");
    }
  }
};

// Reads the plan file; the simulator keys (initial_tool_pose, plane_order,
// difficulty, tolerance) are optional.
inline ProsthesisModel model_from_json(const json& j) {
  ProsthesisModel m = ProsthesisModel::from_plan(plan_from_json(j));
  try {
    if (j.contains("initial_tool_pose")) m.initial_tool_pose = se3_from_json(j.at("initial_tool_pose"));
    if (j.contains("plane_order")) {
      m.plane_order.clear();
      for (const auto& n : j.at("plane_order")) {
        m.plane_order.push_back(static_cast<std::size_t>(plane_name_from_string(n.get<std::string>())) - 1);
      }
    }
    if (j.contains("difficulty")) {
      for (const auto& [name, mult] : j.at("difficulty").items()) {
        m.difficulty.at(static_cast<std::size_t>(plane_name_from_string(name)) - 1) = mult.get<double>();
      }
    }
    if (j.contains("tolerance")) {
      m.tolerance.angle_deg = j.at("tolerance").value("angle_deg", m.tolerance.angle_deg);
      m.tolerance.distance_mm = j.at("tolerance").value("distance_mm", m.tolerance.distance_mm);
    }
  } catch (const json::exception& e) {
    throw ConfigError(str_cat("plan: ", e.what()));
  }
  m.validate();
  return m;
}

inline json model_to_json(const ProsthesisModel& m) {
  json j = plan_to_json(*m.plan);
  j["schema_version"] = kSchemaVersion;
  j["initial_tool_pose"] = se3_to_json(m.initial_tool_pose);
  json order = json::array();
  for (auto i : m.plane_order) order.push_back(to_string(m.plan->planes[i].name));
  j["plane_order"] = order;
  json diff = json::object();
  for (std::size_t i = 0; i < m.difficulty.size(); ++i) {
    diff[std::string(to_string(m.plan->planes[i].name))] = m.difficulty[i];
  }
  j["difficulty"] = diff;
  j["tolerance"] = {{"angle_deg", m.tolerance.angle_deg}, {"distance_mm", m.tolerance.distance_mm}};
  return j;
}

struct NoiseModel {
  double sigma_translation_mm = 0.0;
  double sigma_rotation_deg = 0.0;
  double dropout_probability = 0.0;
  double tracking_bias_mm = 0.0;  // along the plane normal, invisible to the alignment gate
  std::uint64_t seed = 0;

  // Translation sigma sigma_mm, rotation sigma 0.25 deg per mm.
  static NoiseModel level(double sigma_mm, std::uint64_t seed = 0) {
    return NoiseModel{sigma_mm, 0.25 * sigma_mm, 0.0, 0.0, seed};
  }

  void validate() const {
    if (!(sigma_translation_mm >= 0.0 && sigma_rotation_deg >= 0.0)) {
      throw ConfigError("noise sigmas must be >= 0");
    }
    if (!(dropout_probability >= 0.0 && dropout_probability <= 1.0)) {
      throw ConfigError("dropout probability must be in [0, 1]");
    }
  }
};

inline json noise_to_json(const NoiseModel& n) {
  return json{{"sigma_translation_mm", n.sigma_translation_mm},
              {"sigma_rotation_deg", n.sigma_rotation_deg},
              {"dropout_probability", n.dropout_probability},
              {"tracking_bias_mm", n.tracking_bias_mm},
              {"seed", n.seed}};
}

inline NoiseModel noise_from_json(const json& j) {
  NoiseModel n;
  try {
    n.sigma_translation_mm = j.value("sigma_translation_mm", 0.0);
    n.sigma_rotation_deg = j.value("sigma_rotation_deg", 0.0);
    n.dropout_probability = j.value("dropout_probability", 0.0);
    n.tracking_bias_mm = j.value("tracking_bias_mm", 0.0);
    n.seed = j.value("seed", std::uint64_t{0});
  } catch (const json::exception& e) {
    throw ConfigError(str_cat("noise config: ", e.what()));
  }
  n.validate();
  return n;
}

struct SimEvent {
  std::size_t step = 0;
  std::string kind;
  std::optional<std::size_t> plane;
  std::string detail;
};

struct SimState {
  SE3 tool_pose;
  std::vector<PlaneStatus> status;
  std::vector<std::optional<SurfacePatch>> executed;
  std::vector<double> plane_path;  // path attributed to each cut plane
  double segment_path = 0.0;       // path since the last completed cut
  double path_length = 0.0;
  double execution_time_s = 0.0;
  std::size_t steps = 0;
  std::vector<SimEvent> violations;
  std::uint64_t patch_seed = 0;
  std::size_t samples_per_patch = 2048;

  static SimState initial(const ProsthesisModel& model, std::uint64_t patch_seed,
                          std::size_t samples_per_patch) {
    SimState s;
    s.tool_pose = model.initial_tool_pose;
    s.status.assign(model.plan->planes.size(), PlaneStatus::kPending);
    s.executed.assign(model.plan->planes.size(), std::nullopt);
    s.plane_path.assign(model.plan->planes.size(), 0.0);
    s.patch_seed = patch_seed;
    s.samples_per_patch = samples_per_patch;
    return s;
  }

  std::optional<std::size_t> aligned_plane() const {
    for (std::size_t i = 0; i < status.size(); ++i) {
      if (status[i] == PlaneStatus::kAligned) return i;
    }
    return std::nullopt;
  }

  bool all_cut() const {
    return std::all_of(status.begin(), status.end(),
                       [](PlaneStatus s) { return s == PlaneStatus::kCut; });
  }

  Observation observation() const { return {status, tool_pose}; }
};

// Seed of the planned patch sample for a plane; the evaluator regenerates
// the planned patch from it.
inline std::uint64_t planned_patch_seed(std::uint64_t patch_seed, int plane_id) {
  return derive_seed(patch_seed, static_cast<std::uint64_t>(plane_id), 0);
}

struct SimStep {
  SimState state;
  std::vector<SimEvent> events;
};

inline SimStep apply_action(SimState state, const ActionCommand& cmd, const ProsthesisModel& model,
                            const NoiseModel& noise, const Vocabulary& vocab,
                            std::mt19937_64& rng) {
  const auto& c = vocab.config();
  if (!command_valid(cmd, c)) throw Error(str_cat("malformed command: ", to_string(cmd)));
  const auto& plan = *model.plan;
  std::vector<SimEvent> events;
  const std::size_t step = state.steps++;
  auto violate = [&](std::string kind, std::optional<std::size_t> plane, std::string detail) {
    SimEvent e{step, std::move(kind), plane, std::move(detail)};
    state.violations.push_back(e);
    events.push_back(std::move(e));
  };
  auto travel = [&](const Vec3& to) {
    double d = (to - state.tool_pose.translation()).norm();
    state.path_length += d;
    state.segment_path += d;
    state.execution_time_s += d / kTravelSpeed;
  };
  auto clear_aligned = [&] {
    for (auto& s : state.status) {
      if (s == PlaneStatus::kAligned) s = PlaneStatus::kPending;
    }
  };

  if (const auto* move = std::get_if<MoveCmd>(&cmd)) {
    Vec3 target = move_target(*move, c);
    if (!plan.workspace.contains(target)) {
      violate("move-out-of-bounds", std::nullopt, to_string(cmd));
      return {std::move(state), std::move(events)};
    }
    clear_aligned();
    travel(target);
    state.tool_pose = SE3(state.tool_pose.rotation(), target);
    events.push_back({step, "move", std::nullopt, ""});
  } else if (const auto* align = std::get_if<AlignCmd>(&cmd)) {
    std::size_t m = align->plane;
    if (m >= state.status.size() || state.status[m] == PlaneStatus::kCut) {
      violate("align-invalid-plane", std::nullopt, to_string(cmd));
      return {std::move(state), std::move(events)};
    }
    clear_aligned();
    const auto& plane = plan.planes[m];
    const double mult = model.difficulty[m];
    std::normal_distribution<double> normal(0.0, 1.0);
    Vec3 dt(normal(rng), normal(rng), normal(rng));
    Vec3 dr(normal(rng), normal(rng), normal(rng));
    bool dropout = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < noise.dropout_probability;
    dt *= noise.sigma_translation_mm * mult;
    dr *= deg_to_rad(noise.sigma_rotation_deg * mult);

    SE3 commanded = align_pose(*align, plane, c);
    Eigen::Quaterniond jitter = Eigen::Quaterniond::Identity();
    if (dr.norm() > 0.0) jitter = Eigen::Quaterniond(Eigen::AngleAxisd(dr.norm(), dr.normalized()));
    SE3 actual(jitter * commanded.rotation(), commanded.translation() + dt);
    travel(actual.translation());
    state.tool_pose = actual;
    state.execution_time_s += kAlignSettle;

    auto err = alignment_error(actual, plane);
    if (dropout) {
      events.push_back({step, "align-failed", m, "tracking dropout"});
    } else if (!model.tolerance.admits(err)) {
      events.push_back({step, "align-failed", m,
                        str_cat("angle ", err.angle_deg, " deg, distance ", err.distance_mm, " mm")});
    } else {
      state.status[m] = PlaneStatus::kAligned;
      events.push_back({step, "aligned", m, ""});
    }
  } else {
    const auto& cut = std::get<CutCmd>(cmd);
    auto m = state.aligned_plane();
    if (!m) {
      violate("cut-without-align", std::nullopt, to_string(cmd));
      return {std::move(state), std::move(events)};
    }
    const auto& plane = plan.planes[*m];
    const double mult = model.difficulty[*m];
    SE3 true_pose(state.tool_pose.rotation(),
                  state.tool_pose.translation() + noise.tracking_bias_mm * plane.normal);
    SE3 residual = compose(true_pose, invert(plane.canonical_frame()));
    SurfacePatch planned = sample_plane_patch(plane, state.samples_per_patch,
                                              planned_patch_seed(state.patch_seed, plane.id));
    SurfacePatch executed;
    executed.plane_id = plane.id;
    executed.seed = planned.seed;
    executed.points.reserve(planned.points.size());
    std::normal_distribution<double> jitter(0.0, noise.sigma_translation_mm * mult);
    const bool jittered = noise.sigma_translation_mm * mult > 0.0;
    for (const auto& p : planned.points) {
      Vec3 q = residual.apply(p);
      if (jittered) q += Vec3(jitter(rng), jitter(rng), jitter(rng));
      executed.points.push_back(q);
    }
    state.executed[*m] = std::move(executed);
    state.status[*m] = PlaneStatus::kCut;

    double sweep = plane.sweep_length();
    state.path_length += sweep;
    state.plane_path[*m] = state.segment_path + sweep;
    state.segment_path = 0.0;
    state.execution_time_s += sweep / std::max(cut_speed(cut, c), 1e-9);
    state.tool_pose = compose(state.tool_pose, SE3::from_translation(sweep * Vec3::UnitX()));
    events.push_back({step, "cut", *m, ""});
  }
  return {std::move(state), std::move(events)};
}

struct PathLengths {
  double total = 0.0;
  std::vector<double> per_plane;  // indexed like plan->planes
};

// Noiseless path of the fixed plane order: straight line from the previous
// end pose to each plane's entry point, plus that plane's sweep.
inline PathLengths shortest_path_length(const ProsthesisModel& model) {
  PathLengths out;
  out.per_plane.assign(model.plan->planes.size(), 0.0);
  Vec3 at = model.initial_tool_pose.translation();
  for (auto idx : model.plane_order) {
    const auto& plane = model.plan->planes[idx];
    double l = (plane.entry_point() - at).norm() + plane.sweep_length();
    out.per_plane[idx] = l;
    out.total += l;
    at = plane.exit_point();
  }
  return out;
}

// Synthetic joint vector for a tool pose: tool Euler angles, tool position
// scaled onto [-pi, pi], zeros for any further joints.
inline std::vector<double> pseudo_joints(const SE3& tool_pose, std::size_t joints) {
  std::vector<double> q(joints, 0.0);
  Vec3 euler = tool_pose.rotation_matrix().eulerAngles(2, 1, 0);
  const Vec3& t = tool_pose.translation();
  std::array<double, 6> values = {euler[0], euler[1], euler[2],
                                  t.x() / 250.0 * std::numbers::pi,
                                  t.y() / 250.0 * std::numbers::pi,
                                  t.z() / 250.0 * std::numbers::pi};
  for (std::size_t i = 0; i < joints && i < values.size(); ++i) q[i] = values[i];
  return q;
}

inline std::vector<TokenId> sim_state_tokens(const SimState& state, const Vocabulary& vocab) {
  const std::size_t joints = vocab.config().num_joints;
  std::vector<double> zeros(joints, 0.0);
  return quantize_robot_state(pseudo_joints(state.tool_pose, joints), zeros, zeros, vocab);
}

// ---------------------------------------------------------------------------
// Episodes

struct EpisodeConfig {
  std::string episode_id = "episode-0";
  std::size_t run_index = 0;
  DecodeConfig decode;
  std::size_t step_budget = 512;  // decoded tokens
  std::size_t samples_per_patch = 2048;
  std::uint64_t patch_seed = 0;
  std::uint64_t noise_seed = 0;
};

struct StepTiming {
  std::size_t step = 0;
  double policy_ms = 0.0;
  double decode_ms = 0.0;
};

struct EpisodeResult {
  std::string episode_id;
  std::size_t run_index = 0;
  std::string termination;  // eos | all-cut | budget | aborted
  bool aborted = false;
  std::string abort_reason;
  unsigned backend_retries = 0;
  std::vector<TokenId> tokens;
  std::vector<ActionCommand> commands;
  std::vector<std::optional<SurfacePatch>> executed;
  std::vector<PlaneStatus> status;
  std::uint64_t patch_seed = 0;
  std::size_t samples_per_patch = 0;
  double path_length = 0.0;
  std::vector<double> plane_path;
  PathLengths shortest;
  double execution_time_s = 0.0;
  std::vector<SimEvent> violations;
  std::vector<SimEvent> events;
  std::vector<StepTiming> timings;  // wall clock; not serialized with the result

  bool all_cut() const {
    return !status.empty() && std::all_of(status.begin(), status.end(), [](PlaneStatus s) {
      return s == PlaneStatus::kCut;
    });
  }
};

// Decode loop: serialize the prefix, query the policy, sample under the
// grammar and safety masks, and execute every completed command. The safety
// context is re-synchronized with the simulator after each command so the
// masks see measured, not nominal, state.
inline EpisodeResult run_episode(PolicyBackend& policy, const ProsthesisModel& model,
                                 const Vocabulary& vocab, const NoiseModel& noise,
                                 const EpisodeConfig& cfg) {
  using Clock = std::chrono::steady_clock;
  cfg.decode.validate();
  noise.validate();

  EpisodeResult result;
  result.episode_id = cfg.episode_id;
  result.run_index = cfg.run_index;
  result.patch_seed = cfg.patch_seed;
  result.samples_per_patch = cfg.samples_per_patch;
  result.shortest = shortest_path_length(model);

  SimState sim = SimState::initial(model, cfg.patch_seed, cfg.samples_per_patch);
  ConstrainedDecoder decoder(vocab,
                             SafetyContext::fresh(model.plan, sim.tool_pose, model.tolerance));
  std::mt19937_64 decode_rng(cfg.decode.seed);
  std::mt19937_64 noise_rng(cfg.noise_seed);
  const PitBlock pit = build_pit_block(*model.plan, vocab);

  std::optional<ActionCommand> prev;
  PrefixSequence prefix = serialize_prefix(pit, sim_state_tokens(sim, vocab), prev, vocab);
  std::vector<TokenId> partial;
  result.termination = "budget";

  for (std::size_t step = 0; step < cfg.step_budget; ++step) {
    PolicyRequest req{prefix.tokens, partial, vocab.size(), cfg.episode_id, step};
    auto t0 = Clock::now();
    std::vector<float> logits;
    try {
      PolicyResponse resp = policy.query(req, sim.observation());
      result.backend_retries += resp.retries;
      logits = response_logits(resp, vocab.size(), 20.0f);
    } catch (const BackendError& e) {
      result.backend_retries += e.retries();
      result.aborted = true;
      result.abort_reason = e.what();
      result.termination = "aborted";
      break;
    }
    auto t1 = Clock::now();
    TokenId token = decoder.sample(logits, cfg.decode, decode_rng);
    auto t2 = Clock::now();
    result.timings.push_back({step, std::chrono::duration<double, std::milli>(t1 - t0).count(),
                              std::chrono::duration<double, std::milli>(t2 - t1).count()});

    result.tokens.push_back(token);
    partial.push_back(token);
    auto completed = decoder.accept(token);
    if (token == vocab.control(Control::kEos)) {
      result.termination = "eos";
      break;
    }
    if (!completed) continue;

    result.commands.push_back(*completed);
    SimStep out = apply_action(std::move(sim), *completed, model, noise, vocab, noise_rng);
    sim = std::move(out.state);
    for (auto& e : out.events) result.events.push_back(std::move(e));
    auto& ctx = decoder.mutable_context();
    ctx.status = sim.status;
    ctx.tool_pose = sim.tool_pose;

    prev = *completed;
    partial.clear();
    prefix = serialize_prefix(pit, sim_state_tokens(sim, vocab), prev, vocab);
    if (sim.all_cut()) {
      result.termination = "all-cut";
      break;
    }
  }

  result.executed = std::move(sim.executed);
  result.status = sim.status;
  result.path_length = sim.path_length;
  result.plane_path = sim.plane_path;
  result.execution_time_s = sim.execution_time_s;
  result.violations = sim.violations;
  return result;
}

// ---------------------------------------------------------------------------
// EpisodeResult JSONL

inline json command_to_json(const ActionCommand& cmd) {
  return json{{"op", to_string(primitive_of(cmd))}, {"bins", params_of(cmd)}};
}

inline ActionCommand command_from_json(const json& j) {
  const auto op = j.at("op").get<std::string>();
  auto bins = j.at("bins").get<std::vector<std::uint32_t>>();
  for (auto p : {Primitive::kMove, Primitive::kAlign, Primitive::kCut}) {
    if (to_string(p) == op) return make_command(p, bins);
  }
  throw ConfigError(str_cat("unknown command op '", op, "'"));
}

inline json event_to_json(const SimEvent& e) {
  json j{{"step", e.step}, {"kind", e.kind}};
  if (e.plane) j["plane"] = *e.plane;
  if (!e.detail.empty()) j["detail"] = e.detail;
  return j;
}

inline SimEvent event_from_json(const json& j) {
  SimEvent e;
  e.step = j.at("step").get<std::size_t>();
  e.kind = j.at("kind").get<std::string>();
  if (j.contains("plane")) e.plane = j.at("plane").get<std::size_t>();
  e.detail = j.value("detail", "");
  return e;
}

inline json episode_to_json(const EpisodeResult& r, const ResectionPlan& plan) {
  json commands = json::array();
  for (const auto& c : r.commands) commands.push_back(command_to_json(c));
  json violations = json::array();
  for (const auto& v : r.violations) violations.push_back(event_to_json(v));
  json events = json::array();
  for (const auto& e : r.events) events.push_back(event_to_json(e));
  json status = json::array();
  for (auto s : r.status) status.push_back(to_string(s));
  json patches = json::array();
  for (std::size_t i = 0; i < r.executed.size(); ++i) {
    const auto& plane = plan.planes[i];
    json pj{{"plane_id", plane.id},
            {"name", to_string(plane.name)},
            {"planned_seed", planned_patch_seed(r.patch_seed, plane.id)},
            {"samples", r.samples_per_patch}};
    if (r.executed[i]) {
      json pts = json::array();
      for (const auto& p : r.executed[i]->points) pts.push_back(vec3_to_json(p));
      pj["executed"] = std::move(pts);
    } else {
      pj["executed"] = nullptr;
    }
    patches.push_back(std::move(pj));
  }
  return json{{"type", "episode"},
              {"episode_id", r.episode_id},
              {"run", r.run_index},
              {"termination", r.termination},
              {"aborted", r.aborted},
              {"abort_reason", r.abort_reason},
              {"backend_retries", r.backend_retries},
              {"tokens", r.tokens},
              {"commands", commands},
              {"status", status},
              {"path_length_mm", r.path_length},
              {"plane_path_mm", r.plane_path},
              {"shortest_path_mm", r.shortest.total},
              {"plane_shortest_mm", r.shortest.per_plane},
              {"execution_time_s", r.execution_time_s},
              {"violations", violations},
              {"events", events},
              {"patch_seed", r.patch_seed},
              {"samples_per_patch", r.samples_per_patch},
              {"patches", patches}};
}

inline EpisodeResult episode_from_json(const json& j) {
  EpisodeResult r;
  r.episode_id = j.at("episode_id").get<std::string>();
  r.run_index = j.value("run", std::size_t{0});
  r.termination = j.value("termination", "");
  r.aborted = j.value("aborted", false);
  r.abort_reason = j.value("abort_reason", "");
  r.backend_retries = j.value("backend_retries", 0u);
  r.tokens = j.value("tokens", std::vector<TokenId>{});
  for (const auto& c : j.at("commands")) r.commands.push_back(command_from_json(c));
  for (const auto& s : j.at("status")) {
    auto name = s.get<std::string>();
    PlaneStatus st = PlaneStatus::kPending;
    for (auto cand : {PlaneStatus::kPending, PlaneStatus::kAligned, PlaneStatus::kCut}) {
      if (to_string(cand) == name) st = cand;
    }
    r.status.push_back(st);
  }
  r.path_length = j.at("path_length_mm").get<double>();
  r.plane_path = j.at("plane_path_mm").get<std::vector<double>>();
  r.shortest.total = j.at("shortest_path_mm").get<double>();
  r.shortest.per_plane = j.at("plane_shortest_mm").get<std::vector<double>>();
  r.execution_time_s = j.value("execution_time_s", 0.0);
  for (const auto& v : j.at("violations")) r.violations.push_back(event_from_json(v));
  if (j.contains("events")) {
    for (const auto& e : j.at("events")) r.events.push_back(event_from_json(e));
  }
  r.patch_seed = j.at("patch_seed").get<std::uint64_t>();
  r.samples_per_patch = j.at("samples_per_patch").get<std::size_t>();
  for (const auto& pj : j.at("patches")) {
    if (pj.at("executed").is_null()) {
      r.executed.emplace_back(std::nullopt);
      continue;
    }
    SurfacePatch p;
    p.plane_id = pj.at("plane_id").get<int>();
    p.seed = pj.at("planned_seed").get<std::uint64_t>();
    for (const auto& pt : pj.at("executed")) p.points.push_back(vec3_from_json(pt));
    r.executed.emplace_back(std::move(p));
  }
  return r;
}

}  // namespace resect

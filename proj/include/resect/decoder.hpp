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

// Grammar- and safety-constrained decoding over per-step logits.
//
// The admissible set at each step is grammar_mask AND safety_mask. The
// grammar FSM walks ExpectPrimitive -> ExpectParam(p, 0..arity-1) ->
// ExpectPrimitive, and <EOS> moves it to Terminal. Safety rules:
//   * <CUT> needs an Aligned plane and a tool pose within tolerance of it.
//   * <ALIGN> needs at least one plane that is not Cut; its plane bin may not
//     name a Cut plane or a reserved index.
//   * <MOVE> position bins whose centers leave the workspace are dropped.
// <MOVE> with at least one in-bounds bin per axis always survives, so the
// combined mask is never empty in a reachable state.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "resect/common.hpp"
#include "resect/geometry.hpp"
#include "resect/grammar.hpp"

namespace resect {

enum class Phase : std::uint8_t { kExpectPrimitive, kExpectParam, kTerminal };

struct GrammarState {
  Phase phase = Phase::kExpectPrimitive;
  Primitive primitive = Primitive::kMove;  // valid in kExpectParam
  std::uint8_t slot = 0;                   // valid in kExpectParam
  std::array<std::uint32_t, kMaxArity> pending{};
  std::uint32_t commands_emitted = 0;

  bool operator==(const GrammarState&) const = default;
};

class TokenMask {
 public:
  TokenMask() = default;
  explicit TokenMask(std::size_t size, bool value = false) : bits_(size, value ? 1 : 0) {}

  std::size_t size() const { return bits_.size(); }
  bool allows(TokenId id) const { return id < bits_.size() && bits_[id] != 0; }
  void allow(TokenId id) { bits_.at(id) = 1; }
  void forbid(TokenId id) { bits_.at(id) = 0; }

  void allow_range(TokenId begin, TokenId end) {
    std::fill(bits_.begin() + begin, bits_.begin() + end, 1);
  }
  void forbid_range(TokenId begin, TokenId end) {
    std::fill(bits_.begin() + begin, bits_.begin() + end, 0);
  }

  std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1));
  }
  bool any() const { return std::find(bits_.begin(), bits_.end(), 1) != bits_.end(); }

  TokenMask& operator&=(const TokenMask& other) {
    if (other.size() != size()) throw Error("token mask size mismatch");
    for (std::size_t i = 0; i < bits_.size(); ++i) bits_[i] &= other.bits_[i];
    return *this;
  }

  const std::vector<std::uint8_t>& bits() const { return bits_; }

 private:
  std::vector<std::uint8_t> bits_;
};

inline TokenMask grammar_mask(const GrammarState& state, const Vocabulary& vocab) {
  TokenMask mask(vocab.size());
  switch (state.phase) {
    case Phase::kTerminal:
      mask.allow(vocab.control(Control::kEos));
      break;
    case Phase::kExpectPrimitive:
      for (Control c : {Control::kMove, Control::kAlign, Control::kCut, Control::kEos}) {
        mask.allow(vocab.control(c));
      }
      break;
    case Phase::kExpectParam: {
      auto [begin, end] = vocab.param_range(slot_kind(state.primitive, state.slot));
      mask.allow_range(begin, end);
      break;
    }
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Safety context

enum class PlaneStatus : std::uint8_t { kPending, kAligned, kCut };

inline std::string_view to_string(PlaneStatus s) {
  switch (s) {
    case PlaneStatus::kPending: return "pending";
    case PlaneStatus::kAligned: return "aligned";
    case PlaneStatus::kCut: return "cut";
  }
  return "?";
}

struct AlignmentTolerance {
  double angle_deg = 1.0;
  double distance_mm = 0.5;

  bool admits(const AlignmentError& e) const {
    return e.angle_deg <= angle_deg && e.distance_mm <= distance_mm;
  }
};

struct SafetyContext {
  std::shared_ptr<const ResectionPlan> plan;
  std::vector<PlaneStatus> status;  // indexed like plan->planes
  SE3 tool_pose;
  AlignmentTolerance tolerance;

  static SafetyContext fresh(std::shared_ptr<const ResectionPlan> plan, const SE3& tool_pose,
                             AlignmentTolerance tolerance = {}) {
    SafetyContext ctx;
    ctx.status.assign(plan->planes.size(), PlaneStatus::kPending);
    ctx.plan = std::move(plan);
    ctx.tool_pose = tool_pose;
    ctx.tolerance = tolerance;
    return ctx;
  }

  const Aabb& workspace() const { return plan->workspace; }

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

  bool cut_permitted() const {
    auto m = aligned_plane();
    return m && tolerance.admits(alignment_error(tool_pose, plan->planes[*m]));
  }

  void validate() const {
    if (!plan) throw Error("safety context has no plan");
    if (status.size() != plan->planes.size()) throw Error("safety context status size mismatch");
    auto aligned = std::count(status.begin(), status.end(), PlaneStatus::kAligned);
    if (aligned > 1) throw Error("more than one plane is Aligned");
  }
};

namespace detail {

// Position bins whose centers lie inside [lo, hi] on one axis. Falls back to
// the bin nearest the interval midpoint if none do.
inline void allow_in_bounds(TokenMask& mask, const Vocabulary& vocab, ParamKind axis, double lo,
                            double hi) {
  const auto& spec = vocab.config().spec(axis);
  auto [begin, end] = vocab.param_range(axis);
  bool any = false;
  for (std::uint32_t b = 0; b < spec.bins; ++b) {
    double center = dequantize(b, spec);
    if (center >= lo && center <= hi) {
      mask.allow(begin + b);
      any = true;
    }
  }
  if (!any) mask.allow(begin + quantize(0.5 * (lo + hi), spec).bin);
  (void)end;
}

}  // namespace detail

inline TokenMask safety_mask(const GrammarState& state, const SafetyContext& ctx,
                             const Vocabulary& vocab) {
  TokenMask mask(vocab.size(), true);
  if (state.phase == Phase::kExpectPrimitive) {
    if (!ctx.cut_permitted()) mask.forbid(vocab.control(Control::kCut));
    if (ctx.all_cut()) mask.forbid(vocab.control(Control::kAlign));
    return mask;
  }
  if (state.phase != Phase::kExpectParam) return mask;

  ParamKind kind = slot_kind(state.primitive, state.slot);
  if (kind == ParamKind::kPlane) {
    auto [begin, end] = vocab.param_range(kind);
    for (TokenId id = begin; id < end; ++id) {
      std::size_t plane = id - begin;
      if (plane >= ctx.status.size() || ctx.status[plane] == PlaneStatus::kCut) mask.forbid(id);
    }
  } else if (state.primitive == Primitive::kMove) {
    auto axis = static_cast<int>(state.slot);
    auto [begin, end] = vocab.param_range(kind);
    mask.forbid_range(begin, end);
    detail::allow_in_bounds(mask, vocab, kind, ctx.workspace().min[axis],
                            ctx.workspace().max[axis]);
  }
  return mask;
}

// ---------------------------------------------------------------------------
// FSM and semantics

struct Advance {
  GrammarState state;
  std::optional<ActionCommand> completed;
};

inline Advance advance(const GrammarState& state, TokenId token, const Vocabulary& vocab) {
  if (!grammar_mask(state, vocab).allows(token)) {
    throw Error(str_cat("token ", vocab.token_name(token), " is not admissible in this state"));
  }
  Advance out{state, std::nullopt};
  auto info = *vocab.lookup(token);
  switch (state.phase) {
    case Phase::kTerminal:
      break;
    case Phase::kExpectPrimitive:
      if (info.control == Control::kEos) {
        out.state.phase = Phase::kTerminal;
      } else {
        out.state.phase = Phase::kExpectParam;
        out.state.primitive = *primitive_of(info.control);
        out.state.slot = 0;
        out.state.pending = {};
      }
      break;
    case Phase::kExpectParam: {
      out.state.pending[state.slot] = info.index;
      std::size_t next = static_cast<std::size_t>(state.slot) + 1;
      if (next == arity(state.primitive)) {
        out.completed = make_command(state.primitive,
                                     std::span<const std::uint32_t>(out.state.pending.data(), next));
        out.state.phase = Phase::kExpectPrimitive;
        out.state.slot = 0;
        out.state.pending = {};
        ++out.state.commands_emitted;
      } else {
        out.state.slot = static_cast<std::uint8_t>(next);
      }
      break;
    }
  }
  return out;
}

// Nominal (noise-free) effect of a completed command on the safety context.
// MOVE clears any alignment; ALIGN aligns its plane only if the commanded
// pose is within tolerance; CUT consumes the aligned plane.
inline SafetyContext apply_semantics(SafetyContext ctx, const ActionCommand& cmd,
                                     const Vocabulary& vocab) {
  const auto& c = vocab.config();
  auto clear_aligned = [&] {
    for (auto& s : ctx.status) {
      if (s == PlaneStatus::kAligned) s = PlaneStatus::kPending;
    }
  };
  if (const auto* move = std::get_if<MoveCmd>(&cmd)) {
    clear_aligned();
    ctx.tool_pose = SE3(ctx.tool_pose.rotation(), move_target(*move, c));
  } else if (const auto* align = std::get_if<AlignCmd>(&cmd)) {
    if (align->plane >= ctx.status.size() || ctx.status[align->plane] == PlaneStatus::kCut) {
      throw Error(str_cat("ALIGN names unavailable plane index ", align->plane));
    }
    clear_aligned();
    const auto& plane = ctx.plan->planes[align->plane];
    ctx.tool_pose = align_pose(*align, plane, c);
    if (ctx.tolerance.admits(alignment_error(ctx.tool_pose, plane))) {
      ctx.status[align->plane] = PlaneStatus::kAligned;
    }
  } else {
    auto m = ctx.aligned_plane();
    if (!m) throw Error("CUT without an aligned plane");
    ctx.status[*m] = PlaneStatus::kCut;
    const auto& plane = ctx.plan->planes[*m];
    ctx.tool_pose = compose(ctx.tool_pose, SE3::from_translation(plane.sweep_length() * Vec3::UnitX()));
  }
  return ctx;
}

// ---------------------------------------------------------------------------
// Sampling

struct DecodeConfig {
  enum class Mode : std::uint8_t { kGreedy, kTemperature, kTopP };

  Mode mode = Mode::kGreedy;
  std::uint64_t seed = 0;
  double temperature = 1.0;
  double top_p = 1.0;

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must be in (0, 1]");
  }
};

inline std::string_view to_string(DecodeConfig::Mode m) {
  switch (m) {
    case DecodeConfig::Mode::kGreedy: return "greedy";
    case DecodeConfig::Mode::kTemperature: return "temperature";
    case DecodeConfig::Mode::kTopP: return "top-p";
  }
  return "?";
}

inline DecodeConfig::Mode decode_mode_from_string(std::string_view s) {
  for (auto m : {DecodeConfig::Mode::kGreedy, DecodeConfig::Mode::kTemperature,
                 DecodeConfig::Mode::kTopP}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError(str_cat("unknown decode mode '", s, "'"));
}

// Picks the next token. Inadmissible logits are treated as -inf and the rest
// renormalized. Greedy ties go to the lowest id.
inline TokenId step(std::span<const float> logits, std::span<const TokenMask> masks,
                    const DecodeConfig& cfg, std::mt19937_64& rng) {
  const std::size_t n = logits.size();
  std::vector<std::uint8_t> admissible(n, 1);
  for (const auto& m : masks) {
    if (m.size() != n) {
      throw Error(str_cat("mask size ", m.size(), " does not match logits size ", n));
    }
    const auto& bits = m.bits();
    for (std::size_t i = 0; i < n; ++i) admissible[i] &= bits[i];
  }

  std::vector<TokenId> ids;
  ids.reserve(64);
  float best = -std::numeric_limits<float>::infinity();
  TokenId best_id = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!admissible[i]) continue;
    float l = std::isnan(logits[i]) ? -std::numeric_limits<float>::infinity() : logits[i];
    if (ids.empty() || l > best) {
      best = l;
      best_id = static_cast<TokenId>(i);
    }
    ids.push_back(static_cast<TokenId>(i));
  }
  if (ids.empty()) throw SafetyViolation("combined token mask is empty");
  if (cfg.mode == DecodeConfig::Mode::kGreedy) return best_id;

  // Softmax over the admissible set.
  std::vector<double> probs(ids.size());
  if (std::isinf(best) && best < 0) {
    std::fill(probs.begin(), probs.end(), 1.0);
  } else {
    for (std::size_t j = 0; j < ids.size(); ++j) {
      float l = logits[ids[j]];
      probs[j] = std::isnan(l) ? 0.0 : std::exp((static_cast<double>(l) - best) / cfg.temperature);
    }
  }

  if (cfg.mode == DecodeConfig::Mode::kTopP && cfg.top_p < 1.0) {
    double total = std::accumulate(probs.begin(), probs.end(), 0.0);
    std::vector<std::size_t> order(ids.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
    double cum = 0.0;
    std::size_t keep = 0;
    while (keep < order.size()) {
      cum += probs[order[keep]] / total;
      ++keep;
      if (cum >= cfg.top_p) break;
    }
    std::vector<double> trimmed(ids.size(), 0.0);
    for (std::size_t j = 0; j < keep; ++j) trimmed[order[j]] = probs[order[j]];
    probs.swap(trimmed);
  }

  double total = std::accumulate(probs.begin(), probs.end(), 0.0);
  double u = std::uniform_real_distribution<double>(0.0, total)(rng);
  double cum = 0.0;
  for (std::size_t j = 0; j < ids.size(); ++j) {
    cum += probs[j];
    if (u < cum && probs[j] > 0.0) return ids[j];
  }
  // Rounding at the top end.
  for (std::size_t j = ids.size(); j-- > 0;) {
    if (probs[j] > 0.0) return ids[j];
  }
  return ids.back();
}

// ---------------------------------------------------------------------------
// Offline checker

struct Violation {
  std::size_t index = 0;
  std::string rule;
  std::string detail;
};

// Replays the mask pipeline over a token stream and reports the first token
// that a constrained decoder could not have produced.
inline std::optional<Violation> validate_sequence(std::span<const TokenId> tokens,
                                                  const SafetyContext& initial,
                                                  const Vocabulary& vocab) {
  GrammarState state;
  SafetyContext ctx = initial;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    TokenId tok = tokens[i];
    auto info = vocab.lookup(tok);
    if (!info) return Violation{i, "unknown-token", str_cat("id ", tok)};
    if (!grammar_mask(state, vocab).allows(tok)) {
      std::string expected;
      switch (state.phase) {
        case Phase::kTerminal: expected = "<EOS> after termination"; break;
        case Phase::kExpectPrimitive: expected = "primitive or <EOS>"; break;
        case Phase::kExpectParam:
          expected = str_cat(to_string(slot_kind(state.primitive, state.slot)), " bin");
          break;
      }
      return Violation{i, "grammar", str_cat("expected ", expected, ", got ", vocab.token_name(tok))};
    }
    if (!safety_mask(state, ctx, vocab).allows(tok)) {
      std::string rule = "safety";
      if (state.phase == Phase::kExpectPrimitive && info->control == Control::kCut) {
        rule = ctx.aligned_plane() ? "cut-misaligned" : "cut-before-align";
      } else if (state.phase == Phase::kExpectPrimitive && info->control == Control::kAlign) {
        rule = "align-no-plane";
      } else if (info->cls == TokenClass::kParam && info->param == ParamKind::kPlane) {
        rule = info->index < ctx.status.size() ? "align-cut-plane" : "align-unknown-plane";
      } else if (state.primitive == Primitive::kMove) {
        rule = "move-out-of-bounds";
      }
      return Violation{i, rule, vocab.token_name(tok)};
    }
    auto adv = advance(state, tok, vocab);
    state = adv.state;
    if (adv.completed) ctx = apply_semantics(std::move(ctx), *adv.completed, vocab);
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Per-episode driver

// Holds the FSM state and safety context of one episode and caches grammar
// masks per FSM position. Not shared between threads.
class ConstrainedDecoder {
 public:
  ConstrainedDecoder(const Vocabulary& vocab, SafetyContext ctx)
      : vocab_(&vocab), ctx_(std::move(ctx)) {
    ctx_.validate();
    primitive_mask_ = grammar_mask(GrammarState{}, vocab);
    GrammarState terminal;
    terminal.phase = Phase::kTerminal;
    terminal_mask_ = grammar_mask(terminal, vocab);
    for (auto p : {Primitive::kMove, Primitive::kAlign, Primitive::kCut}) {
      for (std::size_t s = 0; s < arity(p); ++s) {
        GrammarState st;
        st.phase = Phase::kExpectParam;
        st.primitive = p;
        st.slot = static_cast<std::uint8_t>(s);
        param_masks_[static_cast<std::size_t>(p)][s] = grammar_mask(st, vocab);
      }
    }
  }

  const GrammarState& state() const { return state_; }
  const SafetyContext& context() const { return ctx_; }
  SafetyContext& mutable_context() { return ctx_; }

  const TokenMask& current_grammar_mask() const {
    switch (state_.phase) {
      case Phase::kExpectPrimitive: return primitive_mask_;
      case Phase::kTerminal: return terminal_mask_;
      case Phase::kExpectParam: break;
    }
    return param_masks_[static_cast<std::size_t>(state_.primitive)][state_.slot];
  }

  TokenMask current_safety_mask() const { return safety_mask(state_, ctx_, *vocab_); }

  TokenId sample(std::span<const float> logits, const DecodeConfig& cfg,
                 std::mt19937_64& rng) const {
    std::array<TokenMask, 2> masks = {current_grammar_mask(), current_safety_mask()};
    return step(logits, masks, cfg, rng);
  }

  // Advances the FSM; applies nominal semantics when a command completes.
  std::optional<ActionCommand> accept(TokenId token) {
    auto adv = advance(state_, token, *vocab_);
    state_ = adv.state;
    if (adv.completed) ctx_ = apply_semantics(std::move(ctx_), *adv.completed, *vocab_);
    return adv.completed;
  }

 private:
  const Vocabulary* vocab_;
  SafetyContext ctx_;
  GrammarState state_;
  TokenMask primitive_mask_;
  TokenMask terminal_mask_;
  std::array<std::array<TokenMask, kMaxArity>, 3> param_masks_;
};

}  // namespace resect

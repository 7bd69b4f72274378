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

// Action grammar: token vocabulary, parameter quantization, command
// serialization and model-input prefix layout.
//
// Commands:
//   <MOVE>  pos_x pos_y pos_z              absolute tool position, mm
//   <ALIGN> plane yaw pitch roll           plane index, orientation offset from
//                                          the plane's canonical frame, deg
//   <CUT>   speed                          sweep speed, mm/s
//
// Prefix layout (fixed segment order):
//   context   <PIT> glob-slots view-slots*planes landmark-bins plane-bins
//   visual    <VIS> slots
//   graph     <GRAPH> slots
//   state     <STATE> q-bins qd-bins tau-bins
//   prev      encoded previous command, or <NULL>

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "resect/common.hpp"
#include "resect/geometry.hpp"

namespace resect {

// ---------------------------------------------------------------------------
// Quantization

struct QuantSpec {
  double lo = 0.0;
  double hi = 1.0;
  std::uint32_t bins = 2;

  double width() const { return (hi - lo) / bins; }

  void validate() const {
    if (!(std::isfinite(lo) && std::isfinite(hi) && lo < hi)) {
      throw ConfigError(str_cat("quant spec requires lo < hi, got [", lo, ", ", hi, "]"));
    }
    if (bins < 2) throw ConfigError(str_cat("quant spec requires bins >= 2, got ", bins));
    if (!(width() > 0.0)) throw ConfigError("quant spec bin width underflows");
  }

  bool operator==(const QuantSpec&) const = default;
};

struct Quantized {
  std::uint32_t bin = 0;
  bool clamped = false;
};

// Total: values outside [lo, hi] (and NaN) land in a boundary bin with the
// clamp flag set. x == hi maps to the last bin without the flag.
inline Quantized quantize(double x, const QuantSpec& spec) {
  if (std::isnan(x)) return {0, true};
  bool clamped = x < spec.lo || x > spec.hi;
  double idx = std::floor((x - spec.lo) / spec.width());
  double last = static_cast<double>(spec.bins - 1);
  return {static_cast<std::uint32_t>(std::clamp(idx, 0.0, last)), clamped};
}

inline double dequantize(std::uint32_t bin, const QuantSpec& spec) {
  if (bin >= spec.bins) {
    throw std::out_of_range(str_cat("bin ", bin, " out of range for ", spec.bins, " bins"));
  }
  return spec.lo + (static_cast<double>(bin) + 0.5) * spec.width();
}

// ---------------------------------------------------------------------------
// Vocabulary

enum class Control : std::uint8_t {
  kBos,
  kEos,
  kSep,
  kMove,
  kAlign,
  kCut,
  kNullAction,
  kPit,
  kVis,
  kGraph,
  kState,
  kCount
};

inline constexpr std::size_t kControlCount = static_cast<std::size_t>(Control::kCount);

inline std::string_view to_string(Control c) {
  static constexpr std::array<std::string_view, kControlCount> kNames = {
      "<BOS>", "<EOS>", "<SEP>", "<MOVE>", "<ALIGN>", "<CUT>",
      "<NULL>", "<PIT>", "<VIS>", "<GRAPH>", "<STATE>"};
  return kNames[static_cast<std::size_t>(c)];
}

enum class ParamKind : std::uint8_t {
  kPosX,
  kPosY,
  kPosZ,
  kYaw,
  kPitch,
  kRoll,
  kPlane,
  kSpeed,
  kNormalX,
  kNormalY,
  kNormalZ,
  kOffset,
  kJointAngle,
  kJointVelocity,
  kJointTorque,
  kCount
};

inline constexpr std::size_t kParamKindCount = static_cast<std::size_t>(ParamKind::kCount);

inline std::string_view to_string(ParamKind k) {
  static constexpr std::array<std::string_view, kParamKindCount> kNames = {
      "pos_x",   "pos_y",    "pos_z",    "yaw",    "pitch",
      "roll",    "plane",    "speed",    "normal_x", "normal_y",
      "normal_z", "offset",  "joint_angle", "joint_velocity", "joint_torque"};
  return kNames[static_cast<std::size_t>(k)];
}

inline ParamKind param_kind_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kParamKindCount; ++i) {
    if (to_string(static_cast<ParamKind>(i)) == s) return static_cast<ParamKind>(i);
  }
  throw ConfigError(str_cat("unknown quant spec '", s, "'"));
}

struct GrammarConfig {
  std::array<QuantSpec, kParamKindCount> specs{};
  std::size_t pit_global_length = 16;
  std::size_t view_length = 4;
  std::size_t visual_length = 32;
  std::size_t graph_length = 16;
  std::size_t num_planes = kPlaneCount;
  std::size_t num_landmarks = 8;
  std::size_t num_joints = 7;
  std::size_t token_budget = 1024;

  const QuantSpec& spec(ParamKind k) const { return specs[static_cast<std::size_t>(k)]; }
  QuantSpec& spec(ParamKind k) { return specs[static_cast<std::size_t>(k)]; }

  std::size_t slot_count() const {
    return std::max({pit_global_length, view_length, visual_length, graph_length});
  }

  static GrammarConfig defaults() {
    GrammarConfig c;
    for (ParamKind k : {ParamKind::kPosX, ParamKind::kPosY, ParamKind::kPosZ}) {
      c.spec(k) = {-250.0, 250.0, 512};
    }
    // Odd bin count so that a zero offset is an exact bin center.
    for (ParamKind k : {ParamKind::kYaw, ParamKind::kPitch, ParamKind::kRoll}) {
      c.spec(k) = {-180.0, 180.0, 257};
    }
    c.spec(ParamKind::kPlane) = {0.0, 8.0, 8};  // 6 planes + 2 reserved
    c.spec(ParamKind::kSpeed) = {0.0, 50.0, 64};
    for (ParamKind k : {ParamKind::kNormalX, ParamKind::kNormalY, ParamKind::kNormalZ}) {
      c.spec(k) = {-1.0, 1.0, 64};
    }
    c.spec(ParamKind::kOffset) = {-250.0, 250.0, 256};
    c.spec(ParamKind::kJointAngle) = {-std::numbers::pi, std::numbers::pi, 256};
    c.spec(ParamKind::kJointVelocity) = {-2.0 * std::numbers::pi, 2.0 * std::numbers::pi, 256};
    c.spec(ParamKind::kJointTorque) = {-100.0, 100.0, 256};
    return c;
  }

  void validate() const {
    for (std::size_t i = 0; i < kParamKindCount; ++i) {
      try {
        specs[i].validate();
      } catch (const ConfigError& e) {
        throw ConfigError(str_cat("grammar spec '", to_string(static_cast<ParamKind>(i)),
                                  "': ", e.what()));
      }
    }
    const auto& plane = spec(ParamKind::kPlane);
    if (plane.lo != 0.0 || plane.hi != static_cast<double>(plane.bins)) {
      throw ConfigError("grammar spec 'plane' must be categorical: lo = 0, hi = bins");
    }
    if (plane.bins < num_planes) {
      throw ConfigError("grammar spec 'plane' has fewer bins than planes");
    }
    if (pit_global_length == 0 || view_length == 0 || visual_length == 0 ||
        graph_length == 0) {
      throw ConfigError("opaque block lengths must be positive");
    }
    if (token_budget == 0) throw ConfigError("token budget must be positive");
  }
};

inline json grammar_to_json(const GrammarConfig& c) {
  json specs = json::object();
  for (std::size_t i = 0; i < kParamKindCount; ++i) {
    const auto& s = c.specs[i];
    specs[std::string(to_string(static_cast<ParamKind>(i)))] = {
        {"lo", s.lo}, {"hi", s.hi}, {"bins", s.bins}};
  }
  return json{{"schema_version", kSchemaVersion},
              {"specs", specs},
              {"blocks",
               {{"pit_global", c.pit_global_length},
                {"view", c.view_length},
                {"visual", c.visual_length},
                {"graph", c.graph_length}}},
              {"num_planes", c.num_planes},
              {"num_landmarks", c.num_landmarks},
              {"num_joints", c.num_joints},
              {"token_budget", c.token_budget}};
}

// Missing keys keep their defaults.
inline GrammarConfig grammar_from_json(const json& j) {
  GrammarConfig c = GrammarConfig::defaults();
  try {
    if (j.contains("specs")) {
      for (const auto& [name, s] : j.at("specs").items()) {
        auto& spec = c.spec(param_kind_from_string(name));
        spec.lo = s.value("lo", spec.lo);
        spec.hi = s.value("hi", spec.hi);
        spec.bins = s.value("bins", spec.bins);
      }
    }
    if (j.contains("blocks")) {
      const auto& b = j.at("blocks");
      c.pit_global_length = b.value("pit_global", c.pit_global_length);
      c.view_length = b.value("view", c.view_length);
      c.visual_length = b.value("visual", c.visual_length);
      c.graph_length = b.value("graph", c.graph_length);
    }
    c.num_planes = j.value("num_planes", c.num_planes);
    c.num_landmarks = j.value("num_landmarks", c.num_landmarks);
    c.num_joints = j.value("num_joints", c.num_joints);
    c.token_budget = j.value("token_budget", c.token_budget);
  } catch (const json::exception& e) {
    throw ConfigError(str_cat("grammar config: ", e.what()));
  }
  c.validate();
  return c;
}

enum class TokenClass : std::uint8_t { kControl, kParam, kSlot };

struct TokenInfo {
  TokenClass cls = TokenClass::kControl;
  Control control = Control::kBos;    // valid for kControl
  ParamKind param = ParamKind::kPosX;  // valid for kParam
  std::uint32_t index = 0;            // bin for kParam, slot for kSlot

  bool operator==(const TokenInfo&) const = default;
};

// Dense token ids: control tokens first, then one contiguous bin range per
// ParamKind in declaration order, then opaque slot tokens.
class Vocabulary {
 public:
  explicit Vocabulary(GrammarConfig config = GrammarConfig::defaults())
      : config_(std::move(config)) {
    config_.validate();
    TokenId next = static_cast<TokenId>(kControlCount);
    for (std::size_t i = 0; i < kParamKindCount; ++i) {
      param_begin_[i] = next;
      next += config_.specs[i].bins;
    }
    slot_begin_ = next;
    size_ = next + static_cast<TokenId>(config_.slot_count());
  }

  const GrammarConfig& config() const { return config_; }
  std::size_t size() const { return size_; }

  TokenId control(Control c) const { return static_cast<TokenId>(c); }

  TokenId param(ParamKind k, std::uint32_t bin) const {
    const auto& spec = config_.spec(k);
    if (bin >= spec.bins) {
      throw std::out_of_range(str_cat("bin ", bin, " out of range for ", to_string(k)));
    }
    return param_begin_[static_cast<std::size_t>(k)] + bin;
  }

  // [begin, end) id range of a parameter kind.
  std::pair<TokenId, TokenId> param_range(ParamKind k) const {
    TokenId begin = param_begin_[static_cast<std::size_t>(k)];
    return {begin, begin + config_.spec(k).bins};
  }

  TokenId slot(std::uint32_t i) const {
    if (i >= config_.slot_count()) throw std::out_of_range("slot index out of range");
    return slot_begin_ + i;
  }

  std::optional<TokenInfo> lookup(TokenId id) const {
    if (id >= size_) return std::nullopt;
    TokenInfo info;
    if (id < kControlCount) {
      info.cls = TokenClass::kControl;
      info.control = static_cast<Control>(id);
      return info;
    }
    if (id >= slot_begin_) {
      info.cls = TokenClass::kSlot;
      info.index = id - slot_begin_;
      return info;
    }
    auto it = std::upper_bound(param_begin_.begin(), param_begin_.end(), id);
    std::size_t k = static_cast<std::size_t>(it - param_begin_.begin()) - 1;
    info.cls = TokenClass::kParam;
    info.param = static_cast<ParamKind>(k);
    info.index = id - param_begin_[k];
    return info;
  }

  TokenId encode(const TokenInfo& info) const {
    switch (info.cls) {
      case TokenClass::kControl: return control(info.control);
      case TokenClass::kParam: return param(info.param, info.index);
      case TokenClass::kSlot: return slot(info.index);
    }
    throw Error("bad token class");
  }

  std::string token_name(TokenId id) const {
    auto info = lookup(id);
    if (!info) return str_cat("<UNK:", id, ">");
    switch (info->cls) {
      case TokenClass::kControl: return std::string(to_string(info->control));
      case TokenClass::kParam: return str_cat("<", to_string(info->param), ":", info->index, ">");
      case TokenClass::kSlot: return str_cat("<SLOT:", info->index, ">");
    }
    return "?";
  }

 private:
  GrammarConfig config_;
  std::array<TokenId, kParamKindCount> param_begin_{};
  TokenId slot_begin_ = 0;
  std::size_t size_ = 0;
};

// ---------------------------------------------------------------------------
// Commands

enum class Primitive : std::uint8_t { kMove, kAlign, kCut };

inline std::string_view to_string(Primitive p) {
  switch (p) {
    case Primitive::kMove: return "MOVE";
    case Primitive::kAlign: return "ALIGN";
    case Primitive::kCut: return "CUT";
  }
  return "?";
}

inline Control control_of(Primitive p) {
  switch (p) {
    case Primitive::kMove: return Control::kMove;
    case Primitive::kAlign: return Control::kAlign;
    case Primitive::kCut: return Control::kCut;
  }
  return Control::kMove;
}

inline std::optional<Primitive> primitive_of(Control c) {
  switch (c) {
    case Control::kMove: return Primitive::kMove;
    case Control::kAlign: return Primitive::kAlign;
    case Control::kCut: return Primitive::kCut;
    default: return std::nullopt;
  }
}

inline constexpr std::size_t kMaxArity = 4;

inline constexpr std::size_t arity(Primitive p) {
  switch (p) {
    case Primitive::kMove: return 3;
    case Primitive::kAlign: return 4;
    case Primitive::kCut: return 1;
  }
  return 0;
}

inline ParamKind slot_kind(Primitive p, std::size_t slot) {
  static constexpr std::array<ParamKind, 3> kMove = {ParamKind::kPosX, ParamKind::kPosY,
                                                     ParamKind::kPosZ};
  static constexpr std::array<ParamKind, 4> kAlign = {ParamKind::kPlane, ParamKind::kYaw,
                                                      ParamKind::kPitch, ParamKind::kRoll};
  switch (p) {
    case Primitive::kMove: return kMove.at(slot);
    case Primitive::kAlign: return kAlign.at(slot);
    case Primitive::kCut:
      if (slot != 0) throw std::out_of_range("CUT has a single parameter");
      return ParamKind::kSpeed;
  }
  throw std::out_of_range("bad primitive");
}

struct MoveCmd {
  std::array<std::uint32_t, 3> position{};
  bool operator==(const MoveCmd&) const = default;
};

struct AlignCmd {
  std::uint32_t plane = 0;
  std::array<std::uint32_t, 3> orientation{};  // yaw, pitch, roll
  bool operator==(const AlignCmd&) const = default;
};

struct CutCmd {
  std::uint32_t speed = 0;
  bool operator==(const CutCmd&) const = default;
};

using ActionCommand = std::variant<MoveCmd, AlignCmd, CutCmd>;

inline Primitive primitive_of(const ActionCommand& cmd) {
  return static_cast<Primitive>(cmd.index());
}

inline std::vector<std::uint32_t> params_of(const ActionCommand& cmd) {
  return std::visit(
      [](const auto& c) -> std::vector<std::uint32_t> {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, MoveCmd>) {
          return {c.position.begin(), c.position.end()};
        } else if constexpr (std::is_same_v<T, AlignCmd>) {
          return {c.plane, c.orientation[0], c.orientation[1], c.orientation[2]};
        } else {
          return {c.speed};
        }
      },
      cmd);
}

inline ActionCommand make_command(Primitive p, std::span<const std::uint32_t> bins) {
  if (bins.size() != arity(p)) {
    throw Error(str_cat(to_string(p), " takes ", arity(p), " parameters, got ", bins.size()));
  }
  switch (p) {
    case Primitive::kMove: return MoveCmd{{bins[0], bins[1], bins[2]}};
    case Primitive::kAlign: return AlignCmd{bins[0], {bins[1], bins[2], bins[3]}};
    case Primitive::kCut: return CutCmd{bins[0]};
  }
  throw Error("bad primitive");
}

inline bool command_valid(const ActionCommand& cmd, const GrammarConfig& config) {
  Primitive p = primitive_of(cmd);
  auto bins = params_of(cmd);
  for (std::size_t i = 0; i < bins.size(); ++i) {
    if (bins[i] >= config.spec(slot_kind(p, i)).bins) return false;
  }
  return true;
}

inline std::string to_string(const ActionCommand& cmd) {
  std::string s(to_string(primitive_of(cmd)));
  for (auto b : params_of(cmd)) s += str_cat(" ", b);
  return s;
}

inline void encode_command_into(const ActionCommand& cmd, const Vocabulary& vocab,
                                std::vector<TokenId>& out) {
  Primitive p = primitive_of(cmd);
  auto bins = params_of(cmd);
  out.push_back(vocab.control(control_of(p)));
  for (std::size_t i = 0; i < bins.size(); ++i) out.push_back(vocab.param(slot_kind(p, i), bins[i]));
}

inline std::vector<TokenId> encode_command(const ActionCommand& cmd, const Vocabulary& vocab) {
  std::vector<TokenId> out;
  out.reserve(1 + kMaxArity);
  encode_command_into(cmd, vocab, out);
  return out;
}

inline std::vector<TokenId> encode_commands(std::span<const ActionCommand> cmds,
                                            const Vocabulary& vocab) {
  std::vector<TokenId> out;
  for (const auto& c : cmds) encode_command_into(c, vocab, out);
  return out;
}

struct DecodeError {
  std::size_t index = 0;
  std::string expected;
  std::string reason;
};

struct DecodeResult {
  std::vector<ActionCommand> commands;
  std::optional<DecodeError> error;

  bool ok() const { return !error.has_value(); }
};

// Greedy left-to-right parse. A trailing <EOS> ends the stream; anything
// after it is an error.
inline DecodeResult decode_tokens(std::span<const TokenId> tokens, const Vocabulary& vocab) {
  DecodeResult result;
  auto fail = [&](std::size_t i, std::string expected, std::string reason) {
    result.error = DecodeError{i, std::move(expected), std::move(reason)};
    return result;
  };
  std::size_t i = 0;
  while (i < tokens.size()) {
    auto info = vocab.lookup(tokens[i]);
    if (!info) return fail(i, "primitive", str_cat("unknown token id ", tokens[i]));
    if (info->cls == TokenClass::kControl && info->control == Control::kEos) {
      if (i + 1 != tokens.size()) return fail(i + 1, "end of stream", "token after <EOS>");
      break;
    }
    std::optional<Primitive> prim;
    if (info->cls == TokenClass::kControl) prim = primitive_of(info->control);
    if (!prim) {
      return fail(i, "primitive",
                  info->cls == TokenClass::kParam ? "parameter token without primitive"
                                                  : str_cat("unexpected ", vocab.token_name(tokens[i])));
    }
    std::array<std::uint32_t, kMaxArity> bins{};
    std::size_t n = arity(*prim);
    for (std::size_t slot = 0; slot < n; ++slot) {
      std::size_t at = i + 1 + slot;
      ParamKind want = slot_kind(*prim, slot);
      std::string expected = str_cat(to_string(want), " bin");
      if (at >= tokens.size()) return fail(at, expected, "wrong arity: stream ended");
      auto p = vocab.lookup(tokens[at]);
      if (!p) return fail(at, expected, str_cat("unknown token id ", tokens[at]));
      if (p->cls != TokenClass::kParam || p->param != want) {
        return fail(at, expected, str_cat("wrong arity: got ", vocab.token_name(tokens[at])));
      }
      bins[slot] = p->index;
    }
    result.commands.push_back(make_command(*prim, std::span(bins.data(), n)));
    i += 1 + n;
  }
  return result;
}

// Continuous helpers shared by the simulator and the oracle so that
// serialization and masking use identical bins.

inline MoveCmd quantize_move(const Vec3& target, const GrammarConfig& c, bool* clamped = nullptr) {
  auto x = quantize(target.x(), c.spec(ParamKind::kPosX));
  auto y = quantize(target.y(), c.spec(ParamKind::kPosY));
  auto z = quantize(target.z(), c.spec(ParamKind::kPosZ));
  if (clamped) *clamped = x.clamped || y.clamped || z.clamped;
  return MoveCmd{{x.bin, y.bin, z.bin}};
}

inline Vec3 move_target(const MoveCmd& m, const GrammarConfig& c) {
  return Vec3(dequantize(m.position[0], c.spec(ParamKind::kPosX)),
              dequantize(m.position[1], c.spec(ParamKind::kPosY)),
              dequantize(m.position[2], c.spec(ParamKind::kPosZ)));
}

inline AlignCmd quantize_align(std::size_t plane_index, double yaw_deg, double pitch_deg,
                               double roll_deg, const GrammarConfig& c) {
  return AlignCmd{static_cast<std::uint32_t>(plane_index),
                  {quantize(yaw_deg, c.spec(ParamKind::kYaw)).bin,
                   quantize(pitch_deg, c.spec(ParamKind::kPitch)).bin,
                   quantize(roll_deg, c.spec(ParamKind::kRoll)).bin}};
}

// Offset rotation Rz(yaw) * Ry(pitch) * Rx(roll), expressed in the plane's
// canonical frame.
inline Eigen::Quaterniond align_offset(const AlignCmd& a, const GrammarConfig& c) {
  double yaw = deg_to_rad(dequantize(a.orientation[0], c.spec(ParamKind::kYaw)));
  double pitch = deg_to_rad(dequantize(a.orientation[1], c.spec(ParamKind::kPitch)));
  double roll = deg_to_rad(dequantize(a.orientation[2], c.spec(ParamKind::kRoll)));
  return Eigen::Quaterniond(Eigen::AngleAxisd(yaw, Vec3::UnitZ()) *
                            Eigen::AngleAxisd(pitch, Vec3::UnitY()) *
                            Eigen::AngleAxisd(roll, Vec3::UnitX()));
}

inline SE3 align_pose(const AlignCmd& a, const ResectionPlane& plane, const GrammarConfig& c) {
  return compose(plane.canonical_frame(), SE3(align_offset(a, c), Vec3::Zero()));
}

inline double cut_speed(const CutCmd& cut, const GrammarConfig& c) {
  return dequantize(cut.speed, c.spec(ParamKind::kSpeed));
}

// ---------------------------------------------------------------------------
// Preoperative context block and prefix layout

struct PitBlock {
  std::vector<TokenId> global;               // <PIT> + glob slots
  std::vector<std::vector<TokenId>> views;   // per plane
  std::vector<TokenId> landmarks;            // 3 bins per landmark
  std::vector<TokenId> planes;               // nx ny nz b per plane

  std::size_t size() const {
    std::size_t n = global.size() + landmarks.size() + planes.size();
    for (const auto& v : views) n += v.size();
    return n;
  }
};

inline PitBlock build_pit_block(const ResectionPlan& plan, const Vocabulary& vocab) {
  const auto& c = vocab.config();
  if (plan.landmarks.size() != c.num_landmarks) {
    throw ConfigError(str_cat("plan has ", plan.landmarks.size(), " landmarks, grammar expects ",
                              c.num_landmarks));
  }
  if (plan.planes.size() != c.num_planes) {
    throw ConfigError(str_cat("plan has ", plan.planes.size(), " planes, grammar expects ",
                              c.num_planes));
  }
  PitBlock pit;
  pit.global.push_back(vocab.control(Control::kPit));
  for (std::uint32_t i = 0; i < c.pit_global_length; ++i) pit.global.push_back(vocab.slot(i));
  for (std::size_t m = 0; m < plan.planes.size(); ++m) {
    std::vector<TokenId> view;
    for (std::uint32_t i = 0; i < c.view_length; ++i) view.push_back(vocab.slot(i));
    pit.views.push_back(std::move(view));
  }
  auto bin = [&](ParamKind k, double x) { return vocab.param(k, quantize(x, c.spec(k)).bin); };
  for (const auto& l : plan.landmarks) {
    pit.landmarks.push_back(bin(ParamKind::kPosX, l.position.x()));
    pit.landmarks.push_back(bin(ParamKind::kPosY, l.position.y()));
    pit.landmarks.push_back(bin(ParamKind::kPosZ, l.position.z()));
  }
  for (const auto& p : plan.planes) {
    pit.planes.push_back(bin(ParamKind::kNormalX, p.normal.x()));
    pit.planes.push_back(bin(ParamKind::kNormalY, p.normal.y()));
    pit.planes.push_back(bin(ParamKind::kNormalZ, p.normal.z()));
    pit.planes.push_back(bin(ParamKind::kOffset, p.offset));
  }
  return pit;
}

// Quantized robot state: all q, then all qd, then all tau.
inline std::vector<TokenId> quantize_robot_state(std::span<const double> q,
                                                 std::span<const double> qd,
                                                 std::span<const double> tau,
                                                 const Vocabulary& vocab) {
  const auto& c = vocab.config();
  if (q.size() != c.num_joints || qd.size() != c.num_joints || tau.size() != c.num_joints) {
    throw Error(str_cat("robot state must have ", c.num_joints, " joints"));
  }
  std::vector<TokenId> out;
  out.reserve(3 * c.num_joints);
  auto put = [&](std::span<const double> xs, ParamKind k) {
    for (double x : xs) out.push_back(vocab.param(k, quantize(x, c.spec(k)).bin));
  };
  put(q, ParamKind::kJointAngle);
  put(qd, ParamKind::kJointVelocity);
  put(tau, ParamKind::kJointTorque);
  return out;
}

enum class Segment : std::uint8_t { kContext, kVisual, kGraph, kState, kPrevAction };
inline constexpr std::size_t kSegmentCount = 5;

struct PrefixSequence {
  std::vector<TokenId> tokens;
  // offsets[s] is where segment s begins; offsets[kSegmentCount] == size.
  std::array<std::size_t, kSegmentCount + 1> offsets{};

  std::span<const TokenId> segment(Segment s) const {
    auto i = static_cast<std::size_t>(s);
    return std::span(tokens).subspan(offsets[i], offsets[i + 1] - offsets[i]);
  }
  std::size_t size() const { return tokens.size(); }
};

inline PrefixSequence serialize_prefix(const PitBlock& pit, std::span<const TokenId> state_tokens,
                                       const std::optional<ActionCommand>& prev,
                                       const Vocabulary& vocab) {
  const auto& c = vocab.config();
  if (pit.global.size() != 1 + c.pit_global_length) {
    throw Error(str_cat("PIT global run has length ", pit.global.size(), ", expected ",
                        1 + c.pit_global_length));
  }
  if (pit.views.size() != c.num_planes) {
    throw Error(str_cat("PIT has ", pit.views.size(), " view runs, expected ", c.num_planes));
  }
  for (const auto& v : pit.views) {
    if (v.size() != c.view_length) throw Error("PIT view run length mismatch");
  }
  if (pit.landmarks.size() != 3 * c.num_landmarks) throw Error("PIT landmark run length mismatch");
  if (pit.planes.size() != 4 * c.num_planes) throw Error("PIT plane run length mismatch");
  if (state_tokens.size() != 3 * c.num_joints) {
    throw Error(str_cat("robot-state block has length ", state_tokens.size(), ", expected ",
                        3 * c.num_joints));
  }

  PrefixSequence seq;
  auto& t = seq.tokens;
  t.reserve(pit.size() + c.visual_length + c.graph_length + state_tokens.size() + 8);

  seq.offsets[0] = 0;
  t.insert(t.end(), pit.global.begin(), pit.global.end());
  for (const auto& v : pit.views) t.insert(t.end(), v.begin(), v.end());
  t.insert(t.end(), pit.landmarks.begin(), pit.landmarks.end());
  t.insert(t.end(), pit.planes.begin(), pit.planes.end());

  seq.offsets[1] = t.size();
  t.push_back(vocab.control(Control::kVis));
  for (std::uint32_t i = 0; i < c.visual_length; ++i) t.push_back(vocab.slot(i));

  seq.offsets[2] = t.size();
  t.push_back(vocab.control(Control::kGraph));
  for (std::uint32_t i = 0; i < c.graph_length; ++i) t.push_back(vocab.slot(i));

  seq.offsets[3] = t.size();
  t.push_back(vocab.control(Control::kState));
  t.insert(t.end(), state_tokens.begin(), state_tokens.end());

  seq.offsets[4] = t.size();
  if (prev) {
    encode_command_into(*prev, vocab, t);
  } else {
    t.push_back(vocab.control(Control::kNullAction));
  }
  seq.offsets[5] = t.size();
  return seq;
}

// ---------------------------------------------------------------------------
// Sequence packing

// Greedy first-fit: each window goes into the first pack with room for it
// (plus one <SEP> if the pack is non-empty). Windows are never split.
inline std::vector<std::vector<TokenId>> pack_windows(
    std::span<const std::vector<TokenId>> windows, std::size_t budget, const Vocabulary& vocab) {
  std::vector<std::vector<TokenId>> packs;
  const TokenId sep = vocab.control(Control::kSep);
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const auto& win = windows[w];
    if (win.size() > budget) {
      throw Error(str_cat("window ", w, " has ", win.size(), " tokens, budget is ", budget));
    }
    auto fits = [&](const std::vector<TokenId>& p) {
      return p.size() + (p.empty() ? 0 : 1) + win.size() <= budget;
    };
    auto it = std::find_if(packs.begin(), packs.end(), fits);
    if (it == packs.end()) {
      packs.emplace_back();
      it = std::prev(packs.end());
    }
    if (!it->empty()) it->push_back(sep);
    it->insert(it->end(), win.begin(), win.end());
  }
  return packs;
}

inline std::vector<std::vector<TokenId>> pack_windows(std::span<const PrefixSequence> prefixes,
                                                      std::size_t budget,
                                                      const Vocabulary& vocab) {
  std::vector<std::vector<TokenId>> windows;
  windows.reserve(prefixes.size());
  for (const auto& p : prefixes) windows.push_back(p.tokens);
  return pack_windows(std::span<const std::vector<TokenId>>(windows), budget, vocab);
}

inline std::vector<std::vector<TokenId>> unpack_windows(std::span<const TokenId> pack,
                                                        const Vocabulary& vocab) {
  std::vector<std::vector<TokenId>> out;
  if (pack.empty()) return out;
  const TokenId sep = vocab.control(Control::kSep);
  out.emplace_back();
  for (TokenId t : pack) {
    if (t == sep) {
      out.emplace_back();
    } else {
      out.back().push_back(t);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Latency shifting

template <typename Obs, typename Target>
struct ShiftResult {
  std::vector<std::pair<Obs, Target>> pairs;
  std::optional<std::string> warning;
};

// Pairs observation t with the target originally at t + shift; the trailing
// `shift` steps have no target and are dropped.
template <typename Obs, typename Target>
ShiftResult<Obs, Target> shift_targets(std::span<const std::pair<Obs, Target>> steps,
                                       std::size_t shift) {
  ShiftResult<Obs, Target> out;
  if (shift >= steps.size()) {
    if (!steps.empty()) {
      out.warning = str_cat("shift of ", shift, " steps leaves nothing of a ", steps.size(),
                            "-step sequence");
    }
    return out;
  }
  out.pairs.reserve(steps.size() - shift);
  for (std::size_t t = 0; t + shift < steps.size(); ++t) {
    out.pairs.emplace_back(steps[t].first, steps[t + shift].second);
  }
  return out;
}

}  // namespace resect

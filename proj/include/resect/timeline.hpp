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

// Alignment of timestamped sensor streams onto a fixed reference grid
// (zero-order hold), observation windows and dropout detection.

#pragma once

#include <algorithm>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "resect/common.hpp"
#include "resect/geometry.hpp"
#include "resect/grammar.hpp"

namespace resect {

inline constexpr std::int64_t kDefaultGridStepUs = 25'000;

enum class StreamKind : std::uint8_t { kPose, kRobotState, kFrame, kEvent };

inline std::string_view to_string(StreamKind k) {
  switch (k) {
    case StreamKind::kPose: return "pose";
    case StreamKind::kRobotState: return "robot_state";
    case StreamKind::kFrame: return "frame";
    case StreamKind::kEvent: return "event";
  }
  return "?";
}

inline StreamKind stream_kind_from_string(std::string_view s) {
  for (auto k : {StreamKind::kPose, StreamKind::kRobotState, StreamKind::kFrame,
                 StreamKind::kEvent}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError(str_cat("unknown stream kind '", s, "'"));
}

// Pose of a tracked object in the camera frame (T^{object->camera}).
struct PoseRecord {
  TrackedObject object = TrackedObject::kFemur;
  SE3 pose;
};

struct RobotStateRecord {
  std::vector<double> q;
  std::vector<double> qd;
  std::vector<double> tau;
};

struct FrameRecord {
  std::string uri;
  std::uint64_t index = 0;
};

struct EventRecord {
  std::string kind;
  std::vector<TokenId> tokens;
  std::string text;
};

using Payload = std::variant<PoseRecord, RobotStateRecord, FrameRecord, EventRecord>;

struct StampedRecord {
  std::int64_t t_us = 0;
  Payload payload;
};

struct StampedStream {
  std::string id;
  StreamKind kind = StreamKind::kPose;
  double rate_hz = 0.0;
  std::vector<StampedRecord> records;

  void validate() const {
    for (std::size_t i = 1; i < records.size(); ++i) {
      if (records[i].t_us <= records[i - 1].t_us) {
        throw ConfigError(str_cat("stream '", id, "': timestamps not strictly increasing at record ",
                                  i));
      }
    }
  }
};

struct ReferenceGrid {
  std::int64_t epoch_us = 0;
  std::int64_t step_us = kDefaultGridStepUs;
  std::size_t length = 0;

  std::int64_t time(std::size_t k) const {
    return epoch_us + static_cast<std::int64_t>(k) * step_us;
  }

  // Smallest grid starting at epoch whose last time is >= last_us.
  static ReferenceGrid covering(std::int64_t epoch_us, std::int64_t last_us,
                                std::int64_t step_us = kDefaultGridStepUs) {
    if (step_us <= 0) throw ConfigError("grid step must be positive");
    ReferenceGrid g{epoch_us, step_us, 0};
    if (last_us >= epoch_us) {
      g.length = static_cast<std::size_t>((last_us - epoch_us + step_us - 1) / step_us) + 1;
    }
    return g;
  }
};

struct AlignedSample {
  std::size_t source_index = 0;
  std::int64_t source_t_us = 0;
  std::int64_t staleness_us = 0;

  bool operator==(const AlignedSample&) const = default;
};

struct ResampledStream {
  std::string stream_id;
  std::vector<std::optional<AlignedSample>> samples;  // one per grid index; nullopt = missing
  std::vector<std::string> warnings;
};

// Zero-order hold: grid time g takes the latest sample with t <= g, unless it
// is older than max_staleness_us.
inline ResampledStream resample(const StampedStream& stream, const ReferenceGrid& grid,
                                std::int64_t max_staleness_us) {
  ResampledStream out;
  out.stream_id = stream.id;
  out.samples.assign(grid.length, std::nullopt);
  if (stream.records.empty()) {
    out.warnings.push_back(str_cat("stream '", stream.id, "' is empty; all grid steps missing"));
    return out;
  }
  std::size_t next = 0;  // first record with t > grid time
  for (std::size_t k = 0; k < grid.length; ++k) {
    std::int64_t g = grid.time(k);
    while (next < stream.records.size() && stream.records[next].t_us <= g) ++next;
    if (next == 0) continue;
    const auto& rec = stream.records[next - 1];
    std::int64_t staleness = g - rec.t_us;
    if (staleness > max_staleness_us) continue;
    out.samples[k] = AlignedSample{next - 1, rec.t_us, staleness};
  }
  return out;
}

// Interval between two consecutive samples further apart than the staleness
// bound. Timestamps are those of the bracketing samples.
struct Gap {
  std::int64_t last_before_us = 0;
  std::int64_t first_after_us = 0;

  std::int64_t length_us() const { return first_after_us - last_before_us; }
  bool operator==(const Gap&) const = default;
};

inline std::vector<Gap> detect_dropouts(const StampedStream& stream,
                                        std::int64_t max_staleness_us) {
  std::vector<Gap> gaps;
  for (std::size_t i = 1; i < stream.records.size(); ++i) {
    std::int64_t a = stream.records[i - 1].t_us;
    std::int64_t b = stream.records[i].t_us;
    if (b - a > max_staleness_us) gaps.push_back({a, b});
  }
  return gaps;
}

// ---------------------------------------------------------------------------
// Frames and windows

struct AlignmentConfig {
  std::int64_t step_us = kDefaultGridStepUs;
  std::int64_t pose_staleness_us = 100'000;
  std::int64_t state_staleness_us = 100'000;
  std::int64_t frame_staleness_us = 250'000;
  std::size_t window = 4;

  std::int64_t staleness_for(StreamKind k) const {
    switch (k) {
      case StreamKind::kPose: return pose_staleness_us;
      case StreamKind::kRobotState: return state_staleness_us;
      case StreamKind::kFrame: return frame_staleness_us;
      case StreamKind::kEvent: return step_us;
    }
    return step_us;
  }

  static bool required(StreamKind k) { return k != StreamKind::kEvent; }
};

struct StreamSlot {
  std::string stream_id;
  std::optional<AlignedSample> sample;
};

struct AlignedFrame {
  std::size_t index = 0;
  std::int64_t t_us = 0;
  std::vector<StreamSlot> streams;
  std::vector<TokenId> state_tokens;
  std::map<TrackedObject, SE3> poses;  // object -> camera
  bool degraded = false;
  std::vector<std::string> degraded_streams;

  // Camera-centric pose graph of this frame, stamped at the frame time.
  PoseGraph pose_graph() const {
    PoseGraph g(0);
    for (const auto& [obj, pose] : poses) {
      if (obj != TrackedObject::kCamera) g.add_edge(obj, TrackedObject::kCamera, t_us, pose);
    }
    return g;
  }
};

// Merges every stream onto the grid. A frame is degraded when a required
// stream has no sample within its staleness bound; a degraded robot-state
// block is quantized from zeros.
inline std::vector<AlignedFrame> assemble_frames(std::span<const StampedStream> streams,
                                                 const ReferenceGrid& grid,
                                                 const AlignmentConfig& config,
                                                 const Vocabulary& vocab,
                                                 std::vector<std::string>* warnings = nullptr) {
  std::vector<ResampledStream> resampled;
  resampled.reserve(streams.size());
  for (const auto& s : streams) {
    s.validate();
    resampled.push_back(resample(s, grid, config.staleness_for(s.kind)));
    if (warnings) {
      for (auto& w : resampled.back().warnings) warnings->push_back(w);
    }
  }
  const std::size_t joints = vocab.config().num_joints;
  const std::vector<double> zeros(joints, 0.0);

  std::vector<AlignedFrame> frames(grid.length);
  for (std::size_t k = 0; k < grid.length; ++k) {
    AlignedFrame& f = frames[k];
    f.index = k;
    f.t_us = grid.time(k);
    bool have_state = false;
    for (std::size_t s = 0; s < streams.size(); ++s) {
      const auto& stream = streams[s];
      const auto& sample = resampled[s].samples[k];
      f.streams.push_back({stream.id, sample});
      if (!sample) {
        if (AlignmentConfig::required(stream.kind)) {
          f.degraded = true;
          f.degraded_streams.push_back(stream.id);
        }
        continue;
      }
      const auto& payload = stream.records[sample->source_index].payload;
      if (const auto* pose = std::get_if<PoseRecord>(&payload)) {
        f.poses[pose->object] = pose->pose;
      } else if (const auto* rs = std::get_if<RobotStateRecord>(&payload)) {
        f.state_tokens = quantize_robot_state(rs->q, rs->qd, rs->tau, vocab);
        have_state = true;
      }
    }
    if (!have_state) f.state_tokens = quantize_robot_state(zeros, zeros, zeros, vocab);
  }
  return frames;
}

struct ObservationWindow {
  std::size_t end_index = 0;
  std::span<const AlignedFrame> frames;
};

// The k frames ending at t (inclusive).
inline ObservationWindow window(std::span<const AlignedFrame> frames, std::size_t t,
                                std::size_t k) {
  if (k == 0) throw Error("window length must be positive");
  if (t >= frames.size()) throw Error(str_cat("window end ", t, " beyond ", frames.size(), " frames"));
  if (t + 1 < k) {
    throw Error(str_cat("insufficient history for a ", k, "-frame window ending at ", t));
  }
  return {t, frames.subspan(t + 1 - k, k)};
}

// ---------------------------------------------------------------------------
// Episode JSONL

struct StreamInfo {
  std::string id;
  StreamKind kind = StreamKind::kPose;
  double rate_hz = 0.0;
};

struct RawEpisode {
  std::string episode_id;
  std::int64_t epoch_us = 0;
  std::string instruction;
  json extra = json::object();  // generator metadata, e.g. injected gaps
  std::vector<StampedStream> streams;

  const StampedStream* find(std::string_view id) const {
    for (const auto& s : streams) {
      if (s.id == id) return &s;
    }
    return nullptr;
  }
};

inline json payload_to_json(const Payload& p) {
  return std::visit(
      [](const auto& r) -> json {
        using T = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<T, PoseRecord>) {
          json j = se3_to_json(r.pose);
          j["object"] = to_string(r.object);
          return j;
        } else if constexpr (std::is_same_v<T, RobotStateRecord>) {
          return json{{"q", r.q}, {"qd", r.qd}, {"tau", r.tau}};
        } else if constexpr (std::is_same_v<T, FrameRecord>) {
          return json{{"uri", r.uri}, {"index", r.index}};
        } else {
          json j{{"kind", r.kind}, {"tokens", r.tokens}};
          if (!r.text.empty()) j["text"] = r.text;
          return j;
        }
      },
      p);
}

inline Payload payload_from_json(StreamKind kind, const json& j) {
  switch (kind) {
    case StreamKind::kPose:
      return PoseRecord{tracked_object_from_string(j.at("object").get<std::string>()),
                        se3_from_json(j)};
    case StreamKind::kRobotState:
      return RobotStateRecord{j.at("q").get<std::vector<double>>(),
                              j.at("qd").get<std::vector<double>>(),
                              j.at("tau").get<std::vector<double>>()};
    case StreamKind::kFrame:
      return FrameRecord{j.at("uri").get<std::string>(), j.at("index").get<std::uint64_t>()};
    case StreamKind::kEvent:
      return EventRecord{j.at("kind").get<std::string>(),
                         j.value("tokens", std::vector<TokenId>{}), j.value("text", "")};
  }
  throw ConfigError("bad stream kind");
}

// Header line first, then records ordered by (t_us, stream declaration order).
inline void write_episode_jsonl(std::ostream& out, const RawEpisode& ep) {
  json streams = json::array();
  for (const auto& s : ep.streams) {
    streams.push_back({{"id", s.id}, {"kind", to_string(s.kind)}, {"rate_hz", s.rate_hz}});
  }
  json header{{"schema_version", kSchemaVersion},
              {"type", "episode_header"},
              {"episode_id", ep.episode_id},
              {"epoch_us", ep.epoch_us},
              {"instruction", ep.instruction},
              {"streams", streams}};
  for (const auto& [k, v] : ep.extra.items()) header[k] = v;
  out << header.dump() << '\n';

  struct Cursor {
    std::int64_t t;
    std::size_t stream;
    std::size_t record;
  };
  std::vector<Cursor> all;
  for (std::size_t s = 0; s < ep.streams.size(); ++s) {
    for (std::size_t r = 0; r < ep.streams[s].records.size(); ++r) {
      all.push_back({ep.streams[s].records[r].t_us, s, r});
    }
  }
  std::stable_sort(all.begin(), all.end(), [](const Cursor& a, const Cursor& b) {
    return a.t != b.t ? a.t < b.t : a.stream < b.stream;
  });
  for (const auto& c : all) {
    const auto& s = ep.streams[c.stream];
    json rec{{"stream", s.id},
             {"t_us", c.t},
             {"payload", payload_to_json(s.records[c.record].payload)}};
    out << rec.dump() << '\n';
  }
}

inline RawEpisode read_episode_jsonl(std::istream& in, const std::string& source = "<episode>") {
  RawEpisode ep;
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> index;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      if (!have_header) {
        if (j.value("type", "") != "episode_header") {
          throw ConfigError("first record must be an episode_header");
        }
        if (j.value("schema_version", 0) != kSchemaVersion) {
          throw ConfigError(str_cat("unsupported schema_version ", j.value("schema_version", 0)));
        }
        ep.episode_id = j.at("episode_id").get<std::string>();
        ep.epoch_us = j.at("epoch_us").get<std::int64_t>();
        ep.instruction = j.value("instruction", "");
        for (const auto& sj : j.at("streams")) {
          StampedStream s;
          s.id = sj.at("id").get<std::string>();
          s.kind = stream_kind_from_string(sj.at("kind").get<std::string>());
          s.rate_hz = sj.value("rate_hz", 0.0);
          index[s.id] = ep.streams.size();
          ep.streams.push_back(std::move(s));
        }
        for (const auto& [k, v] : j.items()) {
          if (k != "schema_version" && k != "type" && k != "episode_id" && k != "epoch_us" &&
              k != "instruction" && k != "streams") {
            ep.extra[k] = v;
          }
        }
        have_header = true;
        continue;
      }
      auto it = index.find(j.at("stream").get<std::string>());
      if (it == index.end()) {
        throw ConfigError(str_cat("record for undeclared stream '", j.at("stream"), "'"));
      }
      auto& s = ep.streams[it->second];
      s.records.push_back({j.at("t_us").get<std::int64_t>(), payload_from_json(s.kind, j.at("payload"))});
    } catch (const json::exception& e) {
      throw ConfigError(str_cat(source, ":", lineno, ": ", e.what()));
    } catch (const ConfigError& e) {
      throw ConfigError(str_cat(source, ":", lineno, ": ", e.what()));
    }
  }
  if (!have_header) throw ConfigError(str_cat(source, ": missing episode_header"));
  for (const auto& s : ep.streams) s.validate();
  return ep;
}

}  // namespace resect

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


#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "resect/timeline.hpp"

namespace resect {
namespace {

StampedStream pose_stream(std::vector<std::int64_t> times, TrackedObject obj = TrackedObject::kFemur) {
  StampedStream s{"pose/femur", StreamKind::kPose, 60.0, {}};
  for (auto t : times) s.records.push_back({t, PoseRecord{obj, SE3::from_translation(Vec3(t * 1e-6, 0, 0))}});
  return s;
}

// Latest record at or before g, by linear scan.
std::optional<std::size_t> latest_at_or_before(const StampedStream& s, std::int64_t g) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < s.records.size(); ++i) {
    if (s.records[i].t_us <= g) best = i;
  }
  return best;
}

TEST(Grid, Covering) {
  auto g = ReferenceGrid::covering(1000, 1000);
  EXPECT_EQ(g.length, 1u);
  g = ReferenceGrid::covering(0, 50'001);
  EXPECT_EQ(g.length, 4u);  // 0, 25, 50, 75 ms
  EXPECT_EQ(g.time(3), 75'000);
  EXPECT_EQ(ReferenceGrid::covering(10, 0).length, 0u);
  EXPECT_THROW(ReferenceGrid::covering(0, 10, 0), ConfigError);
}

TEST(Resample, ZeroOrderHoldExample) {
  auto s = pose_stream({0, 10'000, 40'000, 200'000});
  ReferenceGrid g{0, 25'000, 10};
  auto r = resample(s, g, 100'000);
  ASSERT_EQ(r.samples.size(), 10u);
  EXPECT_EQ(r.samples[0]->source_index, 0u);
  EXPECT_EQ(r.samples[1]->source_index, 1u);  // 25 ms -> record at 10 ms
  EXPECT_EQ(r.samples[1]->staleness_us, 15'000);
  EXPECT_EQ(r.samples[2]->source_index, 2u);
  EXPECT_EQ(r.samples[5]->source_index, 2u);  // 125 ms, 85 ms stale
  EXPECT_FALSE(r.samples[6]);                 // 150 ms, 110 ms stale
  EXPECT_FALSE(r.samples[7]);
  EXPECT_EQ(r.samples[8]->source_index, 3u);
  EXPECT_EQ(r.samples[8]->staleness_us, 0);
}

TEST(Resample, NoFutureLeakageRandomized) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::int64_t> times;
    std::int64_t t = static_cast<std::int64_t>(rng() % 50'000);
    for (int i = 0; i < 60; ++i) {
      times.push_back(t);
      t += 1 + static_cast<std::int64_t>(rng() % 80'000);
    }
    auto s = pose_stream(times);
    ReferenceGrid g{static_cast<std::int64_t>(rng() % 30'000), 25'000, 150};
    const std::int64_t bound = 60'000;
    auto r = resample(s, g, bound);
    for (std::size_t k = 0; k < g.length; ++k) {
      auto want = latest_at_or_before(s, g.time(k));
      if (want && g.time(k) - s.records[*want].t_us > bound) want.reset();
      ASSERT_EQ(r.samples[k].has_value(), want.has_value()) << k;
      if (want) {
        EXPECT_EQ(r.samples[k]->source_index, *want);
        EXPECT_LE(r.samples[k]->source_t_us, g.time(k));
        EXPECT_LE(r.samples[k]->staleness_us, bound);
      }
    }
  }
}

TEST(Resample, EmptyStreamWarns) {
  StampedStream s{"robot/state", StreamKind::kRobotState, 120.0, {}};
  auto r = resample(s, ReferenceGrid{0, 25'000, 3}, 100'000);
  EXPECT_EQ(r.warnings.size(), 1u);
  for (const auto& x : r.samples) EXPECT_FALSE(x);
}

TEST(Dropouts, DetectsLongIntervals) {
  auto s = pose_stream({0, 16'000, 33'000, 533'000, 550'000});
  auto gaps = detect_dropouts(s, 100'000);
  ASSERT_EQ(gaps.size(), 1u);
  EXPECT_EQ(gaps[0], (Gap{33'000, 533'000}));
  EXPECT_EQ(gaps[0].length_us(), 500'000);
  EXPECT_TRUE(detect_dropouts(s, 500'000).empty());
}

TEST(Streams, RejectsNonMonotoneTimestamps) {
  auto s = pose_stream({0, 10, 10});
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Frames, DegradedWhenARequiredStreamIsStale) {
  const auto& v = testing::default_vocab();
  std::vector<StampedStream> streams;
  streams.push_back(pose_stream({0, 25'000, 50'000}));
  StampedStream state{"robot/state", StreamKind::kRobotState, 120.0, {}};
  std::vector<double> q(v.config().num_joints, 0.1);
  state.records.push_back({0, RobotStateRecord{q, q, q}});
  streams.push_back(state);
  StampedStream events{"events", StreamKind::kEvent, 0.0, {}};
  streams.push_back(events);

  AlignmentConfig cfg;
  ReferenceGrid g{0, 25'000, 6};
  std::vector<std::string> warnings;
  auto frames = assemble_frames(streams, g, cfg, v, &warnings);
  ASSERT_EQ(frames.size(), 6u);
  EXPECT_FALSE(frames[0].degraded);
  EXPECT_FALSE(frames[4].degraded);  // state is exactly 100 ms old
  EXPECT_TRUE(frames[5].degraded);
  EXPECT_EQ(frames[5].degraded_streams, std::vector<std::string>{"robot/state"});
  EXPECT_EQ(frames[0].state_tokens.size(), 3 * v.config().num_joints);
  EXPECT_EQ(frames[5].state_tokens.size(), 3 * v.config().num_joints);
  EXPECT_NE(frames[0].state_tokens, frames[5].state_tokens);
  EXPECT_EQ(warnings.size(), 1u);  // the empty event stream
  EXPECT_EQ(frames[2].poses.count(TrackedObject::kFemur), 1u);
}

TEST(Frames, Window) {
  std::vector<AlignedFrame> frames(10);
  for (std::size_t i = 0; i < frames.size(); ++i) frames[i].index = i;
  auto w = window(frames, 5, 4);
  ASSERT_EQ(w.frames.size(), 4u);
  EXPECT_EQ(w.frames.front().index, 2u);
  EXPECT_EQ(w.frames.back().index, 5u);
  EXPECT_EQ(window(frames, 3, 4).frames.front().index, 0u);
  EXPECT_THROW(window(frames, 2, 4), Error);
  EXPECT_THROW(window(frames, 10, 1), Error);
  EXPECT_THROW(window(frames, 3, 0), Error);
}

TEST(Frames, PoseGraphRelatesTrackedObjects) {
  AlignedFrame f;
  f.t_us = 1000;
  f.poses[TrackedObject::kFemur] = SE3::from_translation(Vec3(10, 0, 0));
  f.poses[TrackedObject::kEndEffector] = SE3::from_translation(Vec3(0, 5, 0));
  auto t = f.pose_graph().relative_transform(TrackedObject::kFemur, TrackedObject::kEndEffector, f.t_us);
  EXPECT_LT((t.translation() - Vec3(10, -5, 0)).norm(), 1e-12);
}

TEST(EpisodeJsonl, RoundTrip) {
  RawEpisode ep;
  ep.episode_id = "ep-1";
  ep.epoch_us = 1'700'000'000'000'000;
  ep.instruction = "resect all planes";
  ep.streams.push_back(pose_stream({ep.epoch_us, ep.epoch_us + 16'667}));
  StampedStream state{"robot/state", StreamKind::kRobotState, 120.0, {}};
  state.records.push_back({ep.epoch_us + 5, RobotStateRecord{{0.5, 1.0}, {0.0, -0.25}, {0.0, 0.0}}});
  ep.streams.push_back(state);
  StampedStream frames{"camera/rgbd", StreamKind::kFrame, 30.0, {}};
  frames.records.push_back({ep.epoch_us + 7, FrameRecord{"frames/000000.png", 0}});
  ep.streams.push_back(frames);
  StampedStream events{"events", StreamKind::kEvent, 0.0, {}};
  events.records.push_back({ep.epoch_us + 9, EventRecord{"command", {3, 11, 600, 1200}, "MOVE"}});
  ep.streams.push_back(events);

  std::stringstream s;
  write_episode_jsonl(s, ep);
  auto back = read_episode_jsonl(s);
  EXPECT_EQ(back.episode_id, ep.episode_id);
  EXPECT_EQ(back.epoch_us, ep.epoch_us);
  ASSERT_EQ(back.streams.size(), ep.streams.size());
  for (std::size_t i = 0; i < ep.streams.size(); ++i) {
    const auto& a = ep.streams[i];
    const auto* b = back.find(a.id);
    ASSERT_NE(b, nullptr) << a.id;
    EXPECT_EQ(b->kind, a.kind);
    ASSERT_EQ(b->records.size(), a.records.size());
    for (std::size_t r = 0; r < a.records.size(); ++r) {
      EXPECT_EQ(b->records[r].t_us, a.records[r].t_us);
      EXPECT_EQ(payload_to_json(b->records[r].payload), payload_to_json(a.records[r].payload));
    }
  }
  std::stringstream again;
  write_episode_jsonl(again, back);
  EXPECT_EQ(again.str(), s.str());
}

TEST(EpisodeJsonl, ErrorsCarryLineNumbers) {
  std::stringstream s("{\"type\":\"header\",\"episode_id\":\"x\"\n");
  try {
    read_episode_jsonl(s, "bad.jsonl");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.jsonl:1"), std::string::npos) << e.what();
  }
}

}  // namespace
}  // namespace resect

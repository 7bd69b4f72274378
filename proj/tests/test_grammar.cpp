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

#include <algorithm>
#include <map>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "resect/grammar.hpp"

namespace resect {
namespace {

using testing::default_model;
using testing::default_vocab;

ActionCommand random_command(std::mt19937_64& rng, const GrammarConfig& c) {
  auto bin = [&](ParamKind k) {
    return std::uniform_int_distribution<std::uint32_t>(0, c.spec(k).bins - 1)(rng);
  };
  switch (std::uniform_int_distribution<int>(0, 2)(rng)) {
    case 0: return MoveCmd{{bin(ParamKind::kPosX), bin(ParamKind::kPosY), bin(ParamKind::kPosZ)}};
    case 1:
      return AlignCmd{bin(ParamKind::kPlane),
                      {bin(ParamKind::kYaw), bin(ParamKind::kPitch), bin(ParamKind::kRoll)}};
    default: return CutCmd{bin(ParamKind::kSpeed)};
  }
}

TEST(Quantize, Examples) {
  QuantSpec s{0.0, 100.0, 100};
  EXPECT_EQ(quantize(0.0, s).bin, 0u);
  EXPECT_FALSE(quantize(0.0, s).clamped);
  EXPECT_EQ(quantize(37.4, s).bin, 37u);
  EXPECT_EQ(quantize(110.0, s).bin, 99u);
  EXPECT_TRUE(quantize(110.0, s).clamped);
  EXPECT_EQ(quantize(-5.0, s).bin, 0u);
  EXPECT_TRUE(quantize(-5.0, s).clamped);
  EXPECT_EQ(quantize(100.0, s).bin, 99u);
  EXPECT_FALSE(quantize(100.0, s).clamped);
  EXPECT_TRUE(quantize(std::nan(""), s).clamped);
  EXPECT_DOUBLE_EQ(dequantize(37, s), 37.5);
  EXPECT_THROW(dequantize(100, s), std::out_of_range);
}

TEST(Quantize, RoundTripEveryBin) {
  for (std::uint32_t bins : {2u, 3u, 7u, 64u, 257u, 512u}) {
    QuantSpec s{-3.25, 11.5, bins};
    for (std::uint32_t b = 0; b < bins; ++b) EXPECT_EQ(quantize(dequantize(b, s), s).bin, b);
  }
}

TEST(Quantize, MatchesScanOracleAndHalfWidthBound) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> lo_d(-500.0, 500.0), span_d(0.01, 1000.0), u(0.0, 1.0);
  std::uniform_int_distribution<std::uint32_t> bins_d(2, 600);
  for (int i = 0; i < 2000; ++i) {
    QuantSpec s{lo_d(rng), 0.0, bins_d(rng)};
    s.hi = s.lo + span_d(rng);
    double x = s.lo + u(rng) * (s.hi - s.lo);
    auto q = quantize(x, s);
    EXPECT_EQ(q.bin, oracle::bin_by_scan(x, s.lo, s.hi, s.bins)) << "x=" << x;
    EXPECT_LE(std::abs(x - dequantize(q.bin, s)), 0.5 * s.width() * (1.0 + 1e-12));
  }
}

TEST(Quantize, DefaultOrientationHasExactZeroCenter) {
  const auto& c = default_vocab().config();
  const auto& yaw = c.spec(ParamKind::kYaw);
  auto b = quantize(0.0, yaw).bin;
  EXPECT_EQ(dequantize(b, yaw), 0.0);
}

TEST(QuantSpecTest, Validation) {
  EXPECT_THROW((QuantSpec{1.0, 1.0, 4}.validate()), ConfigError);
  EXPECT_THROW((QuantSpec{0.0, 1.0, 1}.validate()), ConfigError);
  EXPECT_NO_THROW((QuantSpec{0.0, 1.0, 2}.validate()));
}

TEST(VocabularyTest, IdsAreDenseAndBijective) {
  const auto& v = default_vocab();
  std::set<std::pair<int, std::pair<int, std::uint32_t>>> seen;
  for (TokenId id = 0; id < v.size(); ++id) {
    auto info = v.lookup(id);
    ASSERT_TRUE(info.has_value());
    EXPECT_EQ(v.encode(*info), id);
    int payload = info->cls == TokenClass::kControl ? static_cast<int>(info->control)
                                                    : static_cast<int>(info->param);
    if (info->cls == TokenClass::kSlot) payload = 0;
    EXPECT_TRUE(seen.insert({static_cast<int>(info->cls), {payload, info->index}}).second);
  }
  EXPECT_FALSE(v.lookup(static_cast<TokenId>(v.size())).has_value());
}

TEST(VocabularyTest, StableForFixedConfig) {
  Vocabulary a(GrammarConfig::defaults()), b(GrammarConfig::defaults());
  EXPECT_EQ(a.size(), b.size());
  EXPECT_EQ(a.param(ParamKind::kSpeed, 3), b.param(ParamKind::kSpeed, 3));
  EXPECT_EQ(a.control(Control::kEos), 1u);
  // Frozen layout of the default grammar.
  EXPECT_EQ(a.size(), 3638u);
  EXPECT_EQ(a.param(ParamKind::kPosX, 0), 11u);
}

TEST(VocabularyTest, ParamRangesAreContiguous) {
  const auto& v = default_vocab();
  TokenId expect = kControlCount;
  for (std::size_t k = 0; k < kParamKindCount; ++k) {
    auto [b, e] = v.param_range(static_cast<ParamKind>(k));
    EXPECT_EQ(b, expect);
    expect = e;
  }
}

TEST(Commands, EncodeShapes) {
  const auto& v = default_vocab();
  auto cut = encode_command(CutCmd{5}, v);
  ASSERT_EQ(cut.size(), 2u);
  EXPECT_EQ(cut[0], v.control(Control::kCut));
  EXPECT_EQ(cut[1], v.param(ParamKind::kSpeed, 5));
  EXPECT_EQ(encode_command(MoveCmd{{1, 2, 3}}, v).size(), 4u);
  EXPECT_EQ(encode_command(AlignCmd{1, {2, 3, 4}}, v).size(), 5u);
}

TEST(Commands, RandomRoundTrip) {
  const auto& v = default_vocab();
  std::mt19937_64 rng(11);
  std::vector<ActionCommand> cmds;
  for (int i = 0; i < 5000; ++i) cmds.push_back(random_command(rng, v.config()));
  auto tokens = encode_commands(cmds, v);
  auto r = decode_tokens(tokens, v);
  ASSERT_TRUE(r.ok());
  EXPECT_EQ(r.commands, cmds);
}

TEST(Commands, DecodeErrors) {
  const auto& v = default_vocab();
  EXPECT_TRUE(decode_tokens({}, v).ok());
  EXPECT_TRUE(decode_tokens({}, v).commands.empty());

  std::vector<TokenId> bad = {v.control(Control::kCut), v.control(Control::kMove)};
  auto r = decode_tokens(bad, v);
  ASSERT_FALSE(r.ok());
  EXPECT_EQ(r.error->index, 1u);
  EXPECT_EQ(r.error->expected, "speed bin");

  auto unknown = decode_tokens(std::vector<TokenId>{static_cast<TokenId>(v.size() + 3)}, v);
  ASSERT_FALSE(unknown.ok());
  EXPECT_EQ(unknown.error->index, 0u);

  auto orphan = decode_tokens(std::vector<TokenId>{v.param(ParamKind::kSpeed, 1)}, v);
  ASSERT_FALSE(orphan.ok());
  EXPECT_EQ(orphan.error->index, 0u);

  auto truncated = decode_tokens(std::vector<TokenId>{v.control(Control::kMove), v.param(ParamKind::kPosX, 1)}, v);
  ASSERT_FALSE(truncated.ok());
  EXPECT_EQ(truncated.error->index, 2u);
}

TEST(Commands, MalformedMakeCommandThrows) {
  std::vector<std::uint32_t> two = {1, 2};
  EXPECT_THROW(make_command(Primitive::kMove, two), Error);
}

TEST(Prefix, LayoutAndDeterminism) {
  const auto& v = default_vocab();
  const auto& c = v.config();
  auto pit = build_pit_block(*default_model().plan, v);
  std::vector<double> zeros(c.num_joints, 0.0);
  auto state = quantize_robot_state(zeros, zeros, zeros, v);
  auto a = serialize_prefix(pit, state, std::nullopt, v);
  auto b = serialize_prefix(pit, state, std::nullopt, v);
  EXPECT_EQ(a.tokens, b.tokens);
  for (std::size_t s = 0; s < kSegmentCount; ++s) EXPECT_LT(a.offsets[s], a.offsets[s + 1]);
  EXPECT_EQ(a.offsets[kSegmentCount], a.size());
  EXPECT_EQ(a.segment(Segment::kPrevAction).size(), 1u);
  EXPECT_EQ(a.segment(Segment::kPrevAction)[0], v.control(Control::kNullAction));
  EXPECT_EQ(a.segment(Segment::kVisual).size(), 1 + c.visual_length);
  EXPECT_EQ(a.segment(Segment::kGraph).size(), 1 + c.graph_length);
  EXPECT_EQ(a.segment(Segment::kState).size(), 1 + 3 * c.num_joints);

  auto with_cut = serialize_prefix(pit, state, ActionCommand{CutCmd{9}}, v);
  auto tail = with_cut.segment(Segment::kPrevAction);
  ASSERT_EQ(tail.size(), 2u);
  EXPECT_EQ(tail[0], v.control(Control::kCut));
  EXPECT_EQ(tail[1], v.param(ParamKind::kSpeed, 9));
  EXPECT_EQ(with_cut.tokens.back(), v.param(ParamKind::kSpeed, 9));
}

TEST(Prefix, PitAnchorsRoundTripThroughSpecs) {
  const auto& v = default_vocab();
  const auto& plan = *default_model().plan;
  auto pit = build_pit_block(plan, v);
  ASSERT_EQ(pit.landmarks.size(), 3 * plan.landmarks.size());
  for (std::size_t i = 0; i < plan.landmarks.size(); ++i) {
    auto info = v.lookup(pit.landmarks[3 * i]);
    ASSERT_TRUE(info);
    EXPECT_EQ(info->param, ParamKind::kPosX);
    double x = dequantize(info->index, v.config().spec(ParamKind::kPosX));
    EXPECT_LE(std::abs(x - plan.landmarks[i].position.x()), 0.5 * v.config().spec(ParamKind::kPosX).width());
  }
  EXPECT_EQ(pit.planes.size(), 4 * plan.planes.size());
}

TEST(Prefix, LengthMismatchThrows) {
  const auto& v = default_vocab();
  auto pit = build_pit_block(*default_model().plan, v);
  std::vector<TokenId> short_state(3, v.param(ParamKind::kJointAngle, 0));
  EXPECT_THROW(serialize_prefix(pit, short_state, std::nullopt, v), Error);
  pit.views.pop_back();
  std::vector<double> zeros(v.config().num_joints, 0.0);
  EXPECT_THROW(serialize_prefix(pit, quantize_robot_state(zeros, zeros, zeros, v), std::nullopt, v), Error);
}

TEST(Packing, Examples) {
  const auto& v = default_vocab();
  std::vector<std::vector<TokenId>> one = {std::vector<TokenId>(10, 20)};
  auto p1 = pack_windows(std::span<const std::vector<TokenId>>(one), 25, v);
  ASSERT_EQ(p1.size(), 1u);
  EXPECT_EQ(std::count(p1[0].begin(), p1[0].end(), v.control(Control::kSep)), 0);

  std::vector<std::vector<TokenId>> two = {std::vector<TokenId>(10, 20), std::vector<TokenId>(10, 21)};
  auto p2 = pack_windows(std::span<const std::vector<TokenId>>(two), 25, v);
  ASSERT_EQ(p2.size(), 1u);
  EXPECT_EQ(p2[0].size(), 21u);

  std::vector<std::vector<TokenId>> big = {std::vector<TokenId>(30, 20)};
  EXPECT_THROW(pack_windows(std::span<const std::vector<TokenId>>(big), 25, v), Error);
}

TEST(Packing, ConservesWindowsAsMultiset) {
  const auto& v = default_vocab();
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> len(1, 40);
  std::uniform_int_distribution<TokenId> tok(kControlCount, static_cast<TokenId>(v.size() - 1));
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::vector<TokenId>> windows(1 + trial % 12);
    for (auto& w : windows) {
      w.resize(len(rng));
      for (auto& t : w) t = tok(rng);
    }
    const std::size_t budget = 64;
    auto packs = pack_windows(std::span<const std::vector<TokenId>>(windows), budget, v);
    std::multiset<std::vector<TokenId>> before(windows.begin(), windows.end()), after;
    for (const auto& p : packs) {
      EXPECT_LE(p.size(), budget);
      for (auto& w : unpack_windows(p, v)) after.insert(w);
    }
    EXPECT_EQ(before, after);
  }
}

TEST(Packing, NextFitOrderRoundTripsExactly) {
  // When windows arrive in an order first-fit never reorders, unpacking
  // reproduces the input sequence.
  const auto& v = default_vocab();
  std::vector<std::vector<TokenId>> windows = {std::vector<TokenId>(10, 30), std::vector<TokenId>(10, 31),
                                               std::vector<TokenId>(10, 32)};
  auto packs = pack_windows(std::span<const std::vector<TokenId>>(windows), 21, v);
  std::vector<std::vector<TokenId>> back;
  for (const auto& p : packs) {
    for (auto& w : unpack_windows(p, v)) back.push_back(w);
  }
  EXPECT_EQ(back, windows);
}

TEST(Shift, Examples) {
  std::vector<std::pair<int, int>> steps;
  for (int i = 0; i < 10; ++i) steps.emplace_back(i, 100 + i);
  auto id = shift_targets<int, int>(steps, 0);
  EXPECT_EQ(id.pairs, steps);
  auto s3 = shift_targets<int, int>(steps, 3);
  ASSERT_EQ(s3.pairs.size(), 7u);
  EXPECT_EQ(s3.pairs[0].second, 103);
  EXPECT_EQ(s3.pairs[0].first, 0);
  EXPECT_FALSE(s3.warning);
  auto s10 = shift_targets<int, int>(steps, 10);
  EXPECT_TRUE(s10.pairs.empty());
  EXPECT_TRUE(s10.warning.has_value());
}

TEST(GrammarConfigTest, JsonRoundTripAndShippedFile) {
  auto c = GrammarConfig::defaults();
  auto back = grammar_from_json(grammar_to_json(c));
  for (std::size_t k = 0; k < kParamKindCount; ++k) EXPECT_EQ(back.specs[k], c.specs[k]);
  auto shipped = load_grammar(testing::config_dir() / "grammar.json");
  for (std::size_t k = 0; k < kParamKindCount; ++k) EXPECT_EQ(shipped.specs[k], c.specs[k]);
  json bad = grammar_to_json(c);
  bad["specs"]["speed"]["bins"] = 1;
  EXPECT_THROW(grammar_from_json(bad), ConfigError);
}

TEST(AlignPose, ZeroOffsetIsCanonicalFrame) {
  const auto& v = default_vocab();
  const auto& plane = default_model().plan->planes[0];
  auto a = quantize_align(0, 0.0, 0.0, 0.0, v.config());
  SE3 pose = align_pose(a, plane, v.config());
  EXPECT_EQ(pose.translation(), plane.entry_point());
  auto err = alignment_error(pose, plane);
  EXPECT_LT(err.angle_deg, 1e-6);
  EXPECT_LT(err.distance_mm, 1e-9);
}

}  // namespace
}  // namespace resect

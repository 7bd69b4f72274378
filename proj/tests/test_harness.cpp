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


#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "resect/harness.hpp"

namespace resect {
namespace {

using testing::default_model;
using testing::default_vocab;
using testing::TempDir;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

RunConfig small_run(const fs::path& out, std::size_t runs = 3) {
  RunConfig cfg;
  cfg.out_dir = out;
  cfg.runs = runs;
  cfg.eval.samples_per_patch = 256;
  cfg.resolve(testing::config_dir());
  return cfg;
}

TEST(GenData, DeterministicAcrossJobCounts) {
  TempDir a("gen-a"), b("gen-b");
  GenDataConfig cfg;
  cfg.episodes = 3;
  cfg.seed = 9;
  cfg.inject_gaps = true;
  auto pa = gen_data(default_model(), default_vocab(), cfg, a.path(), 1);
  auto pb = gen_data(default_model(), default_vocab(), cfg, b.path(), 3);
  ASSERT_EQ(pa.size(), 3u);
  EXPECT_EQ(pa[1].filename(), "episode_0001.jsonl");
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(slurp(pa[i]), slurp(pb[i]));
  EXPECT_NE(slurp(pa[0]), slurp(pa[1]));
}

TEST(GenData, StreamRatesMatchConfiguration) {
  GenDataConfig cfg;
  auto ep = generate_episode(default_model(), default_vocab(), cfg, 0);
  for (const auto& s : ep.streams) {
    if (s.kind == StreamKind::kEvent) continue;
    ASSERT_GT(s.records.size(), 100u) << s.id;
    double span_s = static_cast<double>(s.records.back().t_us - s.records.front().t_us) * 1e-6;
    double rate = static_cast<double>(s.records.size() - 1) / span_s;
    EXPECT_LE(std::abs(rate - s.rate_hz) / s.rate_hz, 1e-3) << s.id;
    EXPECT_NO_THROW(s.validate());
  }
}

TEST(GenData, EndEffectorFollowsTheScript) {
  const auto& m = default_model();
  GenDataConfig cfg;
  auto ep = generate_episode(m, default_vocab(), cfg, 2);
  const auto* femur = ep.find("pose/femur");
  const auto* ee = ep.find("pose/end_effector");
  ASSERT_TRUE(femur && ee);
  auto steps = oracle_script(m, default_vocab());
  ASSERT_EQ(steps.size(), 3 * kPlaneCount);
  // Tool in the femur frame equals the scripted pose at every sample.
  for (std::size_t i = 0; i < ee->records.size(); i += 37) {
    SE3 cam_from_femur = std::get<PoseRecord>(femur->records[i].payload).pose;
    SE3 cam_from_tool = std::get<PoseRecord>(ee->records[i].payload).pose;
    SE3 tool = compose(invert(cam_from_femur), cam_from_tool);
    double t = static_cast<double>(ee->records[i].t_us - ep.epoch_us) * 1e-6;
    EXPECT_LT((tool.translation() - script_pose(steps, m.initial_tool_pose, t).translation()).norm(), 1e-6);
  }
}

TEST(GenData, GeneratedEpisodesValidate) {
  TempDir dir("gen-validate");
  GenDataConfig cfg;
  cfg.episodes = 2;
  auto paths = gen_data(default_model(), default_vocab(), cfg, dir.path());
  for (const auto& p : paths) {
    auto seqs = read_token_sequences(p);
    ASSERT_EQ(seqs.size(), 1u);
    EXPECT_EQ(seqs[0].tokens.back(), default_vocab().control(Control::kEos));
    auto rep = validate_sequences(seqs, default_model(), default_vocab());
    EXPECT_EQ(rep.violations(), 0u);
    auto decoded = decode_tokens(seqs[0].tokens, default_vocab());
    EXPECT_TRUE(decoded.ok());
  }
}

TEST(Resample, IdempotentOnAlignedOutput) {
  TempDir dir("resample");
  GenDataConfig cfg;
  auto paths = gen_data(default_model(), default_vocab(), cfg, dir.path() / "raw");
  AlignmentConfig ac;
  resample_file(paths[0], dir.path() / "a.jsonl", ac, default_vocab());
  resample_file(dir.path() / "a.jsonl", dir.path() / "b.jsonl", ac, default_vocab());
  EXPECT_EQ(slurp(dir.path() / "a.jsonl"), slurp(dir.path() / "b.jsonl"));
  ac.step_us = 50'000;
  EXPECT_THROW(resample_file(dir.path() / "a.jsonl", dir.path() / "c.jsonl", ac, default_vocab()),
               ConfigError);
}

TEST(Resample, RecoversInjectedGapsExactly) {
  GenDataConfig cfg;
  cfg.inject_gaps = true;
  cfg.seed = 4;
  auto ep = generate_episode(default_model(), default_vocab(), cfg, 0);
  auto aligned = align_episode(ep, AlignmentConfig{}, default_vocab());
  EXPECT_EQ(aligned.header.at("dropouts"), ep.extra.at("injected_gaps"));
  ASSERT_EQ(aligned.header.at("dropouts").size(), 2u);

  // Grid steps inside a gap beyond the staleness bound are degraded.
  const auto& g = aligned.header.at("dropouts")[0];
  std::int64_t lo = g.at("last_before_us").get<std::int64_t>() + 100'000;
  std::int64_t hi = g.at("first_after_us").get<std::int64_t>();
  std::size_t degraded = 0, inside = 0;
  for (const auto& f : aligned.frames) {
    std::int64_t t = f.at("t_us");
    if (t > lo && t < hi) {
      ++inside;
      degraded += f.at("degraded").get<bool>() ? 1 : 0;
    }
  }
  EXPECT_GT(inside, 0u);
  EXPECT_EQ(degraded, inside);
}

TEST(Resample, FramesNeverReadTheFuture) {
  GenDataConfig cfg;
  auto ep = generate_episode(default_model(), default_vocab(), cfg, 1);
  auto aligned = align_episode(ep, AlignmentConfig{}, default_vocab());
  EXPECT_EQ(aligned.frames.size(), aligned.header.at("length").get<std::size_t>());
  for (const auto& f : aligned.frames) {
    std::int64_t t = f.at("t_us");
    for (const auto& [id, s] : f.at("samples").items()) {
      if (!s.is_null()) {
        EXPECT_LE(s.at("source_t_us").get<std::int64_t>(), t) << id;
      }
    }
  }
}

TEST(Simulate, ByteIdenticalAcrossJobs) {
  TempDir a("sim-a"), b("sim-b");
  auto ca = small_run(a.path());
  auto cb = small_run(b.path());
  cb.jobs = 3;
  ca.noise_level = cb.noise_level = 1.0;
  simulate(ca);
  simulate(cb);
  EXPECT_EQ(slurp(a.path() / "episodes.jsonl"), slurp(b.path() / "episodes.jsonl"));
  EXPECT_TRUE(fs::exists(a.path() / "timing.csv"));
}

TEST(Simulate, OracleReportAtZeroNoise) {
  TempDir dir("sim-oracle");
  auto cfg = small_run(dir.path(), 7);
  auto out = simulate(cfg);
  EXPECT_EQ(out.aborted, 0u);
  auto rf = read_results(dir.path() / "episodes.jsonl");
  ASSERT_EQ(rf.episodes.size(), 7u);
  auto rep = evaluate_results(rf, cfg.eval);
  for (const auto& r : rep.plane_sr) EXPECT_EQ(format_rate(r), "1.00 (7/7)");
  EXPECT_EQ(format_mean_sd(rep.episode_spl), "1.00 ± 0.00");
  write_report(rep, dir.path(), "oracle");
  EXPECT_TRUE(fs::exists(dir.path() / "report_sr.csv"));
  EXPECT_TRUE(fs::exists(dir.path() / "report_spl.csv"));
  EXPECT_TRUE(fs::exists(dir.path() / "report.json"));
}

TEST(Simulate, ResultsTokensValidate) {
  TempDir dir("sim-random");
  auto cfg = small_run(dir.path(), 4);
  cfg.backend = BackendKind::kRandom;
  cfg.step_budget = 64;
  simulate(cfg);
  auto seqs = read_token_sequences(dir.path() / "episodes.jsonl");
  ASSERT_EQ(seqs.size(), 4u);
  EXPECT_EQ(validate_sequences(seqs, default_model(), default_vocab()).violations(), 0u);
}

TEST(Validate, CutFirstFileReportsIndexZero) {
  TempDir dir("validate");
  const auto& v = default_vocab();
  {
    std::ofstream f(dir.path() / "tokens.jsonl");
    f << json{{"episode_id", "bad"}, {"tokens", {v.control(Control::kCut), v.param(ParamKind::kSpeed, 3)}}}.dump()
      << '\n';
    f << json{{"episode_id", "empty"}, {"tokens", json::array()}}.dump() << '\n';
  }
  auto seqs = read_token_sequences(dir.path() / "tokens.jsonl");
  auto rep = validate_sequences(seqs, default_model(), v);
  ASSERT_EQ(rep.results.size(), 2u);
  ASSERT_TRUE(rep.results[0].second);
  EXPECT_EQ(rep.results[0].second->index, 0u);
  EXPECT_EQ(rep.results[0].second->rule, "cut-before-align");
  EXPECT_FALSE(rep.results[1].second);
  std::ostringstream out;
  print_validation(out, rep);
  EXPECT_NE(out.str().find("cut-before-align"), std::string::npos);
}

TEST(Config, ErrorsNameTheFile) {
  TempDir dir("config");
  try {
    load_model(dir.path() / "missing.json");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("missing.json"), std::string::npos);
  }
  std::ofstream(dir.path() / "bad.json") << "{\"planes\": [}";
  EXPECT_THROW(load_model(dir.path() / "bad.json"), ConfigError);

  std::ofstream(dir.path() / "results.jsonl") << "{\"type\":\"results_header\"}\n";
  try {
    read_results(dir.path() / "results.jsonl");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("results.jsonl:1"), std::string::npos) << e.what();
  }

  RunConfig cfg;
  cfg.runs = 0;
  EXPECT_THROW(cfg.resolve(testing::config_dir()), ConfigError);
  cfg = RunConfig{};
  cfg.backend = BackendKind::kRemote;
  EXPECT_THROW(cfg.resolve(testing::config_dir()), ConfigError);
}

TEST(ParallelFor, RethrowsWorkerErrors) {
  std::atomic<int> ran{0};
  EXPECT_THROW(parallel_for(20, 4,
                            [&](std::size_t i) {
                              ++ran;
                              if (i == 7) throw Error("boom");
                            }),
               Error);
  std::vector<int> hit(50, 0);
  parallel_for(50, 8, [&](std::size_t i) { hit[i] = 1; });
  EXPECT_EQ(std::count(hit.begin(), hit.end(), 1), 50);
}

}  // namespace
}  // namespace resect

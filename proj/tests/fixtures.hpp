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

#pragma once

#include <filesystem>
#include <string>

#include "resect/bench_sim.hpp"
#include "resect/harness.hpp"

namespace resect::testing {

inline std::filesystem::path source_dir() { return RESECT_SOURCE_DIR; }
inline std::filesystem::path config_dir() { return source_dir() / "config"; }

inline const ProsthesisModel& default_model() {
  static const ProsthesisModel model = load_model(config_dir() / "default_plan.json");
  return model;
}

inline const Vocabulary& default_vocab() {
  static const Vocabulary vocab(GrammarConfig::defaults());
  return vocab;
}

inline SafetyContext fresh_context(const ProsthesisModel& m = default_model()) {
  return SafetyContext::fresh(m.plan, m.initial_tool_pose, m.tolerance);
}

// Drives one decode episode with i.i.d. normal logits and returns the token
// stream. With masks off the logits are sampled raw over the whole vocabulary.
inline std::vector<TokenId> random_logit_episode(const Vocabulary& vocab, const SafetyContext& ctx,
                                                 std::uint64_t seed, std::size_t budget, bool masked,
                                                 DecodeConfig cfg = {}) {
  std::mt19937_64 logit_rng(seed), decode_rng(derive_seed(seed, 0, 1));
  ConstrainedDecoder dec(vocab, ctx);
  std::vector<TokenId> out;
  PolicyRequest req{{}, {}, vocab.size(), "random", 0};
  for (std::size_t i = 0; i < budget; ++i) {
    auto logits = random_logits(req, logit_rng).logits;
    TokenId t = masked ? dec.sample(logits, cfg, decode_rng)
                       : step(logits, std::span<const TokenMask>{}, cfg, decode_rng);
    out.push_back(t);
    if (t == vocab.control(Control::kEos)) break;
    if (masked) dec.accept(t);
  }
  return out;
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            (tag + "-" + std::to_string(std::hash<std::string>{}(tag + std::to_string(counter()++))) +
             "-" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }

 private:
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::filesystem::path path_;
};

}  // namespace resect::testing

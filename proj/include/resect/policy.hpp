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

// Sources of per-step logits over the action vocabulary.

#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "resect/common.hpp"
#include "resect/decoder.hpp"
#include "resect/geometry.hpp"
#include "resect/grammar.hpp"

namespace resect {

struct PolicyRequest {
  std::vector<TokenId> prefix;   // serialized model input for the current step
  std::vector<TokenId> partial;  // tokens of the command being decoded
  std::size_t vocab_size = 0;
  std::string episode_id;
  std::size_t step = 0;
};

struct PolicyResponse {
  std::vector<float> logits;
  std::optional<TokenId> token;  // server-side sampling; masks cannot act on it
  unsigned retries = 0;
};

// What the simulator exposes to policies that read state directly.
struct Observation {
  std::vector<PlaneStatus> status;
  SE3 tool_pose;
};

class PolicyBackend {
 public:
  virtual ~PolicyBackend() = default;
  virtual PolicyResponse query(const PolicyRequest& req, const Observation& obs) = 0;
  virtual std::string name() const = 0;
};

// Checks a response against the request and turns a token response into
// logits. Throws BackendError on malformed responses.
inline std::vector<float> response_logits(const PolicyResponse& resp, std::size_t vocab_size,
                                          float sharpness = 20.0f) {
  if (resp.token) {
    if (*resp.token >= vocab_size) {
      throw BackendError(str_cat("malformed response: token ", *resp.token,
                                 " outside vocabulary of ", vocab_size),
                         resp.retries);
    }
    std::vector<float> logits(vocab_size, 0.0f);
    logits[*resp.token] = sharpness;
    return logits;
  }
  if (resp.logits.size() != vocab_size) {
    throw BackendError(str_cat("malformed response: expected ", vocab_size, " logits, got ",
                               resp.logits.size()),
                       resp.retries);
  }
  for (std::size_t i = 0; i < resp.logits.size(); ++i) {
    if (!std::isfinite(resp.logits[i])) {
      throw BackendError(str_cat("malformed response: non-finite logit at index ", i),
                         resp.retries);
    }
  }
  return resp.logits;
}

// ---------------------------------------------------------------------------
// Oracle

struct OraclePlan {
  struct Stage {
    std::size_t plane_index = 0;
    MoveCmd move;
    AlignCmd align;
    CutCmd cut;
  };
  std::vector<Stage> stages;  // canonical execution order
  float sharpness = 20.0f;
};

inline constexpr double kOracleCutSpeed = 10.0;  // mm/s

// One MOVE-ALIGN-CUT stage per plane, in execution order: move to the
// entry point, align with zero orientation offset, cut.
inline OraclePlan build_oracle_plan(const ResectionPlan& plan,
                                    std::span<const std::size_t> order, const Vocabulary& vocab,
                                    float sharpness = 20.0f) {
  const auto& c = vocab.config();
  OraclePlan out;
  out.sharpness = sharpness;
  for (std::size_t idx : order) {
    const auto& plane = plan.planes.at(idx);
    OraclePlan::Stage st;
    st.plane_index = idx;
    st.move = quantize_move(plane.entry_point(), c);
    st.align = quantize_align(idx, 0.0, 0.0, 0.0, c);
    st.cut = CutCmd{quantize(kOracleCutSpeed, c.spec(ParamKind::kSpeed)).bin};
    out.stages.push_back(st);
  }
  return out;
}

// The command the oracle wants next, derived from the observation: the first
// stage whose plane is not cut is worked on; CUT if that plane is aligned,
// ALIGN if the tool sits at the stage's MOVE target, MOVE otherwise. This
// re-plans after failed alignments. Returns nullopt when every stage is done.
inline std::optional<ActionCommand> oracle_next_command(const OraclePlan& plan,
                                                        const Observation& obs,
                                                        const Vocabulary& vocab) {
  for (const auto& st : plan.stages) {
    if (obs.status.at(st.plane_index) == PlaneStatus::kCut) continue;
    if (obs.status[st.plane_index] == PlaneStatus::kAligned) return st.cut;
    Vec3 target = move_target(st.move, vocab.config());
    if ((obs.tool_pose.translation() - target).norm() <= 1e-9) return st.align;
    return st.move;
  }
  return std::nullopt;
}

inline PolicyResponse oracle_logits(const PolicyRequest& req, const OraclePlan& plan,
                                    const Observation& obs, const Vocabulary& vocab) {
  PolicyResponse resp;
  resp.logits.assign(req.vocab_size, 0.0f);
  TokenId want = vocab.control(Control::kEos);
  if (auto cmd = oracle_next_command(plan, obs, vocab)) {
    auto tokens = encode_command(*cmd, vocab);
    if (req.partial.size() < tokens.size()) want = tokens[req.partial.size()];
  }
  if (want < resp.logits.size()) resp.logits[want] = plan.sharpness;
  return resp;
}

class OracleBackend : public PolicyBackend {
 public:
  OracleBackend(OraclePlan plan, const Vocabulary& vocab)
      : plan_(std::move(plan)), vocab_(&vocab) {}

  PolicyResponse query(const PolicyRequest& req, const Observation& obs) override {
    return oracle_logits(req, plan_, obs, *vocab_);
  }
  std::string name() const override { return "oracle"; }

 private:
  OraclePlan plan_;
  const Vocabulary* vocab_;
};

// ---------------------------------------------------------------------------
// Random

inline PolicyResponse random_logits(const PolicyRequest& req, std::mt19937_64& rng) {
  std::normal_distribution<float> normal(0.0f, 1.0f);
  PolicyResponse resp;
  resp.logits.resize(req.vocab_size);
  for (auto& l : resp.logits) l = normal(rng);
  return resp;
}

class RandomBackend : public PolicyBackend {
 public:
  explicit RandomBackend(std::uint64_t seed) : rng_(seed) {}

  PolicyResponse query(const PolicyRequest& req, const Observation&) override {
    return random_logits(req, rng_);
  }
  std::string name() const override { return "random"; }

 private:
  std::mt19937_64 rng_;
};

}  // namespace resect

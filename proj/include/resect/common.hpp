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

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

#include <Eigen/Core>

namespace resect {

using Vec3 = Eigen::Vector3d;
using TokenId = std::uint32_t;

inline constexpr int kSchemaVersion = 1;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed config, plan or input file. Maps to CLI exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// The combined decoding mask was empty. Never recovered from.
class SafetyViolation : public Error {
 public:
  using Error::Error;
};

// Policy backend failure (transport, timeout, malformed response).
class BackendError : public Error {
 public:
  BackendError(const std::string& what, unsigned retries)
      : Error(what), retries_(retries) {}

  unsigned retries() const { return retries_; }

 private:
  unsigned retries_;
};

namespace detail {

inline void append(std::ostringstream&) {}

template <typename T, typename... Rest>
void append(std::ostringstream& oss, T&& head, Rest&&... rest) {
  oss << std::forward<T>(head);
  append(oss, std::forward<Rest>(rest)...);
}

}  // namespace detail

template <typename... Args>
std::string str_cat(Args&&... args) {
  std::ostringstream oss;
  detail::append(oss, std::forward<Args>(args)...);
  return oss.str();
}

// Derives an independent 64-bit seed for (master, index, stream). The mixing
// goes through std::seed_seq, whose algorithm is fixed by the standard, so the
// derived seeds are identical across platforms.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index,
                                 std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(master),
                    static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32),
                    static_cast<std::uint32_t>(stream)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace resect

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

// HTTP client for external inference servers. See docs/wire_protocol.md.

#pragma once

#include <chrono>
#include <limits>
#include <memory>
#include <semaphore>
#include <string>
#include <thread>

#include <httplib.h>

#include "resect/policy.hpp"

namespace resect {

struct RemoteEndpoint {
  std::string base;  // scheme://host:port
  std::string path = "/";

  static RemoteEndpoint parse(const std::string& url) {
    auto scheme = url.find("://");
    if (scheme == std::string::npos) throw ConfigError(str_cat("endpoint '", url, "' has no scheme"));
    auto slash = url.find('/', scheme + 3);
    if (slash == std::string::npos) return {url, "/"};
    return {url.substr(0, slash), url.substr(slash)};
  }
};

struct RemoteOptions {
  std::chrono::milliseconds timeout{2000};
  unsigned retries = 3;
  std::chrono::milliseconds backoff{10};  // doubled after every failed attempt
};

inline json encode_request(const PolicyRequest& req) {
  return json{{"schema_version", kSchemaVersion}, {"episode_id", req.episode_id},
              {"step", req.step},                 {"vocab_size", req.vocab_size},
              {"prefix", req.prefix},             {"partial", req.partial}};
}

inline PolicyResponse decode_response(const json& j, const PolicyRequest& req) {
  if (j.contains("vocab_size") && j.at("vocab_size").get<std::size_t>() != req.vocab_size) {
    throw Error(str_cat("vocab_size mismatch: server ", j.at("vocab_size").get<std::size_t>(),
                        ", harness ", req.vocab_size));
  }
  if (j.contains("step") && j.at("step").get<std::size_t>() != req.step) {
    throw Error(str_cat("step mismatch: server ", j.at("step").get<std::size_t>(), ", harness ",
                        req.step));
  }
  PolicyResponse resp;
  if (j.contains("token")) {
    resp.token = j.at("token").get<TokenId>();
  } else {
    const auto& logits = j.at("logits");
    if (!logits.is_array()) throw Error("'logits' must be an array");
    resp.logits.reserve(logits.size());
    for (const auto& v : logits) {
      // null stands in for non-finite values, which JSON cannot carry.
      resp.logits.push_back(v.is_null() ? std::numeric_limits<float>::quiet_NaN() : v.get<float>());
    }
  }
  return resp;
}

// One client per episode keeps at most one request in flight for it. An
// optional semaphore shared between episodes bounds total in-flight requests.
class RemoteBackend : public PolicyBackend {
 public:
  RemoteBackend(const std::string& url, RemoteOptions options,
                std::shared_ptr<std::counting_semaphore<>> inflight = nullptr)
      : endpoint_(RemoteEndpoint::parse(url)),
        options_(options),
        inflight_(std::move(inflight)),
        client_(endpoint_.base) {
    auto secs = std::chrono::duration_cast<std::chrono::seconds>(options_.timeout);
    auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(options_.timeout - secs);
    client_.set_connection_timeout(secs.count(), usecs.count());
    client_.set_read_timeout(secs.count(), usecs.count());
    client_.set_write_timeout(secs.count(), usecs.count());
  }

  PolicyResponse query(const PolicyRequest& req, const Observation&) override {
    const std::string body = encode_request(req).dump();
    std::string last_error;
    auto backoff = options_.backoff;
    for (unsigned attempt = 0; attempt <= options_.retries; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(backoff);
        backoff *= 2;
      }
      httplib::Result res;
      {
        Slot slot(inflight_.get());
        res = client_.Post(endpoint_.path, body, "application/json");
      }
      if (!res) {
        last_error = str_cat("transport error: ", httplib::to_string(res.error()));
        continue;
      }
      if (res->status != 200) {
        last_error = str_cat("HTTP status ", res->status);
        continue;
      }
      try {
        PolicyResponse resp = decode_response(json::parse(res->body), req);
        resp.retries = attempt;
        response_logits(resp, req.vocab_size);  // validates
        return resp;
      } catch (const BackendError& e) {
        throw BackendError(e.what(), attempt);
      } catch (const std::exception& e) {
        throw BackendError(str_cat("malformed response: ", e.what()), attempt);
      }
    }
    throw BackendError(str_cat("remote policy failed after ", options_.retries + 1,
                               " attempts: ", last_error),
                       options_.retries);
  }

  std::string name() const override { return "remote"; }

 private:
  struct Slot {
    explicit Slot(std::counting_semaphore<>* s) : sem(s) {
      if (sem) sem->acquire();
    }
    ~Slot() {
      if (sem) sem->release();
    }
    std::counting_semaphore<>* sem;
  };

  RemoteEndpoint endpoint_;
  RemoteOptions options_;
  std::shared_ptr<std::counting_semaphore<>> inflight_;
  httplib::Client client_;
};

}  // namespace resect

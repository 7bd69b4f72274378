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

// Slow, obviously-correct reference implementations used only by tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <Eigen/Geometry>

namespace resect::oracle {

// O(|a||b|) nearest-neighbor scan.
inline double directed_chamfer(const std::vector<Eigen::Vector3d>& a,
                               const std::vector<Eigen::Vector3d>& b) {
  double sum = 0.0;
  for (const auto& p : a) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : b) best = std::min(best, (p - q).squaredNorm());
    sum += std::sqrt(best);
  }
  return sum / static_cast<double>(a.size());
}

inline double chamfer(const std::vector<Eigen::Vector3d>& a, const std::vector<Eigen::Vector3d>& b) {
  return 0.5 * (directed_chamfer(a, b) + directed_chamfer(b, a));
}

// Bin index by linear scan over the bin edges lo + i * w.
inline std::uint32_t bin_by_scan(double x, double lo, double hi, std::uint32_t bins) {
  const double w = (hi - lo) / bins;
  if (!(x >= lo)) return 0;
  for (std::uint32_t i = 0; i + 1 < bins; ++i) {
    if (x < lo + (i + 1) * w) return i;
  }
  return bins - 1;
}

// Rigid transforms as 4x4 homogeneous matrices.
inline Eigen::Matrix4d homogeneous(const Eigen::Quaterniond& q, const Eigen::Vector3d& t) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = q.normalized().toRotationMatrix();
  m.topRightCorner<3, 1>() = t;
  return m;
}

inline double spl_term(int s, double l, double p) { return s * l / (p > l ? p : l); }

}  // namespace resect::oracle

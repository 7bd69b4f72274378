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

// Surface deviation, success and path-efficiency scoring.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "resect/bench_sim.hpp"
#include "resect/common.hpp"
#include "resect/geometry.hpp"

namespace resect {

// Static 3-d tree over a point set. Queries are exact.
class KdTree {
 public:
  explicit KdTree(std::span<const Vec3> points) : points_(points.begin(), points.end()) {
    index_.resize(points_.size());
    std::iota(index_.begin(), index_.end(), 0u);
    nodes_.reserve(points_.size());
    if (!points_.empty()) root_ = build(0, index_.size(), 0);
  }

  std::size_t size() const { return points_.size(); }

  // Squared distance to the nearest stored point.
  double nearest_sq(const Vec3& q) const {
    if (points_.empty()) throw Error("KdTree: query on empty tree");
    double best = std::numeric_limits<double>::infinity();
    search(root_, q, best);
    return best;
  }

  double nearest(const Vec3& q) const { return std::sqrt(nearest_sq(q)); }

 private:
  struct Node {
    std::uint32_t point;
    std::uint8_t axis;
    std::int32_t left = -1;
    std::int32_t right = -1;
  };

  std::int32_t build(std::size_t lo, std::size_t hi, int depth) {
    if (lo >= hi) return -1;
    // Split on the widest axis of this range.
    Vec3 mn = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 mx = -mn;
    for (std::size_t i = lo; i < hi; ++i) {
      mn = mn.cwiseMin(points_[index_[i]]);
      mx = mx.cwiseMax(points_[index_[i]]);
    }
    int axis = 0;
    (mx - mn).maxCoeff(&axis);
    (void)depth;
    std::size_t mid = lo + (hi - lo) / 2;
    std::nth_element(index_.begin() + lo, index_.begin() + mid, index_.begin() + hi,
                     [&](std::uint32_t a, std::uint32_t b) {
                       return points_[a][axis] < points_[b][axis];
                     });
    auto id = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back({index_[mid], static_cast<std::uint8_t>(axis)});
    std::int32_t left = build(lo, mid, depth + 1);
    std::int32_t right = build(mid + 1, hi, depth + 1);
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  void search(std::int32_t id, const Vec3& q, double& best) const {
    while (id >= 0) {
      const Node& n = nodes_[id];
      const Vec3& p = points_[n.point];
      double d = (p - q).squaredNorm();
      if (d < best) best = d;
      double diff = q[n.axis] - p[n.axis];
      std::int32_t near = diff < 0 ? n.left : n.right;
      std::int32_t far = diff < 0 ? n.right : n.left;
      if (far >= 0 && diff * diff < best) search(far, q, best);
      id = near;
    }
  }

  std::vector<Vec3> points_;
  std::vector<std::uint32_t> index_;
  std::vector<Node> nodes_;
  std::int32_t root_ = -1;
};

// Mean distance from each point of a to its nearest neighbor in b.
inline double chamfer_directed(std::span<const Vec3> a, const KdTree& b) {
  double sum = 0.0;
  for (const auto& p : a) sum += b.nearest(p);
  return sum / static_cast<double>(a.size());
}

// Mean of the two directed mean nearest-neighbor distances, in mm.
inline double chamfer_bidirectional(std::span<const Vec3> a, std::span<const Vec3> b) {
  if (a.empty() || b.empty()) throw Error("chamfer_bidirectional: empty point set");
  KdTree ta(a), tb(b);
  return 0.5 * (chamfer_directed(a, tb) + chamfer_directed(b, ta));
}

inline double chamfer_bidirectional(const SurfacePatch& a, const SurfacePatch& b) {
  return chamfer_bidirectional(std::span<const Vec3>(a.points), std::span<const Vec3>(b.points));
}

struct EvalConfig {
  double delta_mm = 1.5;
  std::size_t samples_per_patch = 2048;
  std::size_t runs = 7;

  void validate() const {
    if (!(delta_mm > 0.0)) throw ConfigError("delta must be > 0");
    if (samples_per_patch < 16) throw ConfigError("samples per patch must be >= 16");
    if (runs < 1) throw ConfigError("run count must be >= 1");
  }
};

// S = 1 iff every plane is cut and the mean chamfer is within delta.
inline int episode_success(std::span<const double> chamfers, std::span<const std::uint8_t> cut,
                           double delta_mm) {
  if (chamfers.empty() || chamfers.size() != cut.size()) return 0;
  if (!std::all_of(cut.begin(), cut.end(), [](std::uint8_t b) { return b != 0; })) return 0;
  double mean = std::accumulate(chamfers.begin(), chamfers.end(), 0.0) /
                static_cast<double>(chamfers.size());
  return mean <= delta_mm ? 1 : 0;
}

inline double spl_term(int success, double l, double p) {
  if (!(l > 0.0)) throw Error(str_cat("SPL needs a positive shortest path, got ", l));
  return success * l / std::max(p, l);
}

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;
  std::size_t n = 0;
};

// Sample standard deviation (n - 1 denominator); 0 for a single value.
inline MeanSd mean_sd(std::span<const double> xs) {
  MeanSd out;
  out.n = xs.size();
  if (xs.empty()) return out;
  out.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - out.mean) * (x - out.mean);
    out.sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return out;
}

struct EpisodeScore {
  std::string episode_id;
  std::vector<double> chamfer;  // +inf for uncut planes
  std::vector<std::uint8_t> cut;
  double mean_deviation = std::numeric_limits<double>::quiet_NaN();  // over cut planes
  int success = 0;
  double p = 0.0;
  double l = 0.0;
  double spl = 0.0;
  std::vector<int> plane_success;  // per-plane delta
  std::vector<double> plane_spl;
  bool aborted = false;
};

inline MeanSd spl(std::span<const EpisodeScore> episodes) {
  std::vector<double> terms;
  for (const auto& e : episodes) terms.push_back(spl_term(e.success, e.l, e.p));
  return mean_sd(terms);
}

inline EpisodeScore score_episode(const EpisodeResult& r, const ProsthesisModel& model,
                                  const EvalConfig& cfg) {
  const auto& planes = model.plan->planes;
  EpisodeScore s;
  s.episode_id = r.episode_id;
  s.aborted = r.aborted;
  s.p = r.path_length;
  s.l = r.shortest.total;
  const std::size_t n = planes.size();
  s.chamfer.assign(n, std::numeric_limits<double>::infinity());
  s.cut.assign(n, 0);
  s.plane_success.assign(n, 0);
  s.plane_spl.assign(n, 0.0);
  double sum = 0.0;
  std::size_t cut_count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (i >= r.executed.size() || !r.executed[i] || r.executed[i]->points.empty()) continue;
    SurfacePatch planned = sample_plane_patch(planes[i], r.samples_per_patch,
                                              planned_patch_seed(r.patch_seed, planes[i].id));
    s.cut[i] = 1;
    s.chamfer[i] = chamfer_bidirectional(*r.executed[i], planned);
    sum += s.chamfer[i];
    ++cut_count;
    s.plane_success[i] = s.chamfer[i] <= cfg.delta_mm ? 1 : 0;
    double lm = i < r.shortest.per_plane.size() ? r.shortest.per_plane[i] : 0.0;
    double pm = i < r.plane_path.size() ? r.plane_path[i] : 0.0;
    if (lm > 0.0) s.plane_spl[i] = spl_term(s.plane_success[i], lm, pm);
  }
  if (cut_count > 0) s.mean_deviation = sum / static_cast<double>(cut_count);
  s.success = episode_success(s.chamfer, s.cut, cfg.delta_mm);
  s.spl = spl_term(s.success, s.l, s.p);
  return s;
}

struct PlaneRate {
  std::size_t k = 0;
  std::size_t n = 0;
  double rate() const { return n == 0 ? 0.0 : static_cast<double>(k) / static_cast<double>(n); }
};

// "0.57 (4/7)"
inline std::string format_rate(const PlaneRate& r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f (%zu/%zu)", r.rate(), r.k, r.n);
  return buf;
}

// "0.75 ± 0.12"
inline std::string format_mean_sd(const MeanSd& m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f ± %.2f", m.mean, m.sd);
  return buf;
}

struct EvalReport {
  double delta_mm = 1.5;
  std::vector<std::size_t> columns;      // plane indices in table order
  std::vector<std::string> column_names;
  std::vector<PlaneRate> plane_sr;       // per column, per-plane delta
  std::vector<MeanSd> plane_spl;         // per column
  PlaneRate episode_sr;                  // six-plane mean criterion
  MeanSd episode_spl;
  std::vector<double> plane_mean_chamfer;  // per column, over cut episodes; NaN if none
  std::size_t aborted = 0;
  std::vector<EpisodeScore> episodes;
};

// Aborted episodes are listed but excluded from every denominator.
inline EvalReport aggregate(std::vector<EpisodeScore> scores, const ProsthesisModel& model,
                            const EvalConfig& cfg) {
  EvalReport rep;
  rep.delta_mm = cfg.delta_mm;
  rep.columns = model.plane_order;
  for (auto i : rep.columns) rep.column_names.emplace_back(to_string(model.plan->planes[i].name));
  const std::size_t cols = rep.columns.size();
  rep.plane_sr.assign(cols, {});
  rep.plane_spl.assign(cols, {});
  rep.plane_mean_chamfer.assign(cols, std::numeric_limits<double>::quiet_NaN());
  std::vector<std::vector<double>> plane_terms(cols), plane_chamfers(cols);
  std::vector<double> terms;
  for (const auto& s : scores) {
    if (s.aborted) {
      ++rep.aborted;
      continue;
    }
    rep.episode_sr.n += 1;
    rep.episode_sr.k += static_cast<std::size_t>(s.success);
    terms.push_back(s.spl);
    for (std::size_t c = 0; c < cols; ++c) {
      std::size_t i = rep.columns[c];
      rep.plane_sr[c].n += 1;
      rep.plane_sr[c].k += static_cast<std::size_t>(s.plane_success[i]);
      plane_terms[c].push_back(s.plane_spl[i]);
      if (s.cut[i]) plane_chamfers[c].push_back(s.chamfer[i]);
    }
  }
  rep.episode_spl = mean_sd(terms);
  for (std::size_t c = 0; c < cols; ++c) {
    rep.plane_spl[c] = mean_sd(plane_terms[c]);
    if (!plane_chamfers[c].empty()) rep.plane_mean_chamfer[c] = mean_sd(plane_chamfers[c]).mean;
  }
  rep.episodes = std::move(scores);
  return rep;
}

inline json number_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

inline json report_to_json(const EvalReport& rep) {
  json planes = json::array();
  for (std::size_t c = 0; c < rep.columns.size(); ++c) {
    planes.push_back({{"plane", rep.column_names[c]},
                      {"sr", rep.plane_sr[c].rate()},
                      {"k", rep.plane_sr[c].k},
                      {"n", rep.plane_sr[c].n},
                      {"sr_text", format_rate(rep.plane_sr[c])},
                      {"spl_mean", rep.plane_spl[c].mean},
                      {"spl_sd", rep.plane_spl[c].sd},
                      {"mean_chamfer_mm", number_or_null(rep.plane_mean_chamfer[c])}});
  }
  json episodes = json::array();
  for (const auto& s : rep.episodes) {
    json ch = json::array();
    for (double c : s.chamfer) ch.push_back(number_or_null(c));
    episodes.push_back({{"episode_id", s.episode_id},
                        {"aborted", s.aborted},
                        {"chamfer_mm", ch},
                        {"mean_deviation_mm", number_or_null(s.mean_deviation)},
                        {"success", s.success},
                        {"p_mm", s.p},
                        {"l_mm", s.l},
                        {"spl", s.spl},
                        {"plane_success", s.plane_success},
                        {"plane_spl", s.plane_spl}});
  }
  return json{{"schema_version", kSchemaVersion},
              {"delta_mm", rep.delta_mm},
              {"planes", planes},
              {"episode_sr", {{"sr", rep.episode_sr.rate()},
                              {"k", rep.episode_sr.k},
                              {"n", rep.episode_sr.n},
                              {"criterion", "six-plane mean"}}},
              {"episode_spl", {{"mean", rep.episode_spl.mean}, {"sd", rep.episode_spl.sd}}},
              {"aborted", rep.aborted},
              {"episodes", episodes}};
}

// Per-plane success rates, one row.
inline void write_sr_csv(std::ostream& out, const EvalReport& rep, const std::string& method) {
  out << "method";
  for (const auto& n : rep.column_names) out << ',' << n;
  out << ",episode_sr\n" << method;
  for (const auto& r : rep.plane_sr) out << ",\"" << format_rate(r) << '"';
  out << ",\"" << format_rate(rep.episode_sr) << "\"\n";
}

// Per-plane SPL, mean and sample SD.
inline void write_spl_csv(std::ostream& out, const EvalReport& rep, const std::string& method) {
  out << "method";
  for (const auto& n : rep.column_names) out << ',' << n;
  out << ",episode_spl\n" << method;
  for (const auto& m : rep.plane_spl) out << ",\"" << format_mean_sd(m) << '"';
  out << ",\"" << format_mean_sd(rep.episode_spl) << "\"\n";
}

}  // namespace resect

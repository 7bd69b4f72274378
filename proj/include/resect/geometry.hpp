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

// Rigid transforms, the tracked-object pose graph, resection planes and
// surface sampling.
//
// Frame convention: a transform T^{a->b} maps the coordinates of a point
// expressed in frame a into frame b. Tracker edges are stored camera-centric,
// i.e. as T^{object->camera}.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Geometry>
#include <json.hpp>

#include "resect/common.hpp"

namespace resect {

using json = nlohmann::json;

inline double deg_to_rad(double deg) { return deg * std::numbers::pi / 180.0; }
inline double rad_to_deg(double rad) { return rad * 180.0 / std::numbers::pi; }

class SE3 {
 public:
  SE3() = default;
  SE3(const Eigen::Quaterniond& rotation, const Vec3& translation)
      : rotation_(rotation.normalized()), translation_(translation) {}

  static SE3 identity() { return SE3(); }
  static SE3 from_translation(const Vec3& t) {
    return SE3(Eigen::Quaterniond::Identity(), t);
  }
  static SE3 from_rotation(const Eigen::Matrix3d& r, const Vec3& t = Vec3::Zero()) {
    return SE3(Eigen::Quaterniond(r), t);
  }
  static SE3 from_axis_angle(const Vec3& axis, double angle_rad,
                             const Vec3& t = Vec3::Zero()) {
    return SE3(Eigen::Quaterniond(Eigen::AngleAxisd(angle_rad, axis.normalized())), t);
  }

  const Eigen::Quaterniond& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }
  Eigen::Matrix3d rotation_matrix() const { return rotation_.toRotationMatrix(); }

  Vec3 apply(const Vec3& p) const { return rotation_ * p + translation_; }

 private:
  Eigen::Quaterniond rotation_ = Eigen::Quaterniond::Identity();
  Vec3 translation_ = Vec3::Zero();
};

// compose(a, b) applies b first, then a.
inline SE3 compose(const SE3& a, const SE3& b) {
  return SE3(a.rotation() * b.rotation(), a.rotation() * b.translation() + a.translation());
}

inline SE3 invert(const SE3& a) {
  Eigen::Quaterniond inv = a.rotation().conjugate();
  return SE3(inv, -(inv * a.translation()));
}

inline Vec3 apply(const SE3& a, const Vec3& p) { return a.apply(p); }

// Rotation angle in radians of the relative rotation between a and b.
inline double rotation_distance(const SE3& a, const SE3& b) {
  return a.rotation().angularDistance(b.rotation());
}

struct PoseDefect {
  double translation_mm = 0.0;
  double rotation_rad = 0.0;
};

inline PoseDefect pose_defect(const SE3& pose) {
  return {pose.translation().norm(), rotation_distance(pose, SE3::identity())};
}

// ---------------------------------------------------------------------------
// Pose graph

enum class TrackedObject : std::uint8_t { kEndEffector, kFemur, kTibia, kCamera };

inline constexpr std::array<TrackedObject, 4> kTrackedObjects = {
    TrackedObject::kEndEffector, TrackedObject::kFemur, TrackedObject::kTibia,
    TrackedObject::kCamera};

inline std::string_view to_string(TrackedObject o) {
  switch (o) {
    case TrackedObject::kEndEffector: return "end_effector";
    case TrackedObject::kFemur: return "femur";
    case TrackedObject::kTibia: return "tibia";
    case TrackedObject::kCamera: return "camera";
  }
  return "unknown";
}

inline TrackedObject tracked_object_from_string(std::string_view s) {
  for (TrackedObject o : kTrackedObjects) {
    if (to_string(o) == s) return o;
  }
  throw ConfigError(str_cat("unknown tracked object '", s, "'"));
}

class UnobservableError : public Error {
 public:
  explicit UnobservableError(TrackedObject object, std::int64_t t_us)
      : Error(str_cat("object '", to_string(object), "' is unobservable at t=", t_us, " us")),
        object_(object) {}

  TrackedObject object() const { return object_; }

 private:
  TrackedObject object_;
};

// Timestamped rigid transforms between tracked objects. At most one edge per
// unordered object pair and timestamp. Queries use, per pair, the latest edge
// at or before the query time that is no older than the staleness bound.
class PoseGraph {
 public:
  explicit PoseGraph(std::int64_t max_staleness_us = 100'000)
      : max_staleness_us_(max_staleness_us) {}

  // Adds T^{from->to} observed at t_us.
  void add_edge(TrackedObject from, TrackedObject to, std::int64_t t_us, const SE3& from_to) {
    if (from == to) throw Error("pose graph edge must join two distinct objects");
    auto key = make_key(from, to);
    SE3 stored = key.first == from ? from_to : invert(from_to);
    auto [it, inserted] = edges_[key].emplace(t_us, stored);
    if (!inserted) {
      throw Error(str_cat("duplicate pose graph edge ", to_string(from), "<->", to_string(to),
                          " at t=", t_us));
    }
  }

  std::int64_t max_staleness_us() const { return max_staleness_us_; }

  // T^{from->to} at t_us, composed along the shortest path of valid edges.
  SE3 relative_transform(TrackedObject from, TrackedObject to, std::int64_t t_us) const {
    if (from == to) return SE3::identity();
    auto valid = valid_edges(t_us);

    constexpr std::size_t kN = kTrackedObjects.size();
    std::array<std::optional<SE3>, kN> to_node;  // T^{from->node}
    std::array<bool, kN> seen{};
    std::deque<TrackedObject> queue{from};
    seen[index(from)] = true;
    to_node[index(from)] = SE3::identity();
    while (!queue.empty()) {
      TrackedObject node = queue.front();
      queue.pop_front();
      if (node == to) break;
      for (const auto& [key, edge] : valid) {
        TrackedObject next;
        SE3 step;
        if (key.first == node) {
          next = key.second;
          step = edge;
        } else if (key.second == node) {
          next = key.first;
          step = invert(edge);
        } else {
          continue;
        }
        if (seen[index(next)]) continue;
        seen[index(next)] = true;
        to_node[index(next)] = compose(step, *to_node[index(node)]);
        queue.push_back(next);
      }
    }
    if (!to_node[index(to)]) {
      bool from_isolated = std::none_of(valid.begin(), valid.end(), [&](const auto& kv) {
        return kv.first.first == from || kv.first.second == from;
      });
      throw UnobservableError(from_isolated ? from : to, t_us);
    }
    return *to_node[index(to)];
  }

  // All ordered pairs among the non-camera objects that are reachable at t_us.
  std::vector<std::pair<std::pair<TrackedObject, TrackedObject>, SE3>> all_relative_transforms(
      std::int64_t t_us) const {
    std::vector<std::pair<std::pair<TrackedObject, TrackedObject>, SE3>> out;
    for (TrackedObject a : kTrackedObjects) {
      for (TrackedObject b : kTrackedObjects) {
        if (a == b || a == TrackedObject::kCamera || b == TrackedObject::kCamera) continue;
        try {
          out.push_back({{a, b}, relative_transform(a, b, t_us)});
        } catch (const UnobservableError&) {
        }
      }
    }
    return out;
  }

 private:
  using Key = std::pair<TrackedObject, TrackedObject>;

  static std::size_t index(TrackedObject o) { return static_cast<std::size_t>(o); }

  static Key make_key(TrackedObject a, TrackedObject b) {
    return index(a) < index(b) ? Key{a, b} : Key{b, a};
  }

  std::vector<std::pair<Key, SE3>> valid_edges(std::int64_t t_us) const {
    std::vector<std::pair<Key, SE3>> out;
    for (const auto& [key, series] : edges_) {
      auto it = series.upper_bound(t_us);
      if (it == series.begin()) continue;
      --it;
      if (t_us - it->first > max_staleness_us_) continue;
      out.emplace_back(key, it->second);
    }
    return out;
  }

  std::int64_t max_staleness_us_;
  std::map<Key, std::map<std::int64_t, SE3>> edges_;
};

// Composes the closed walk cycle[0] -> cycle[1] -> ... -> cycle[0] and returns
// how far the result is from identity.
inline PoseDefect cycle_defect(const PoseGraph& graph, std::span<const TrackedObject> cycle,
                               std::int64_t t_us) {
  SE3 acc;
  for (std::size_t i = 0; i < cycle.size(); ++i) {
    TrackedObject a = cycle[i];
    TrackedObject b = cycle[(i + 1) % cycle.size()];
    acc = compose(graph.relative_transform(a, b, t_us), acc);
  }
  return pose_defect(acc);
}

// ---------------------------------------------------------------------------
// Resection planes

enum class PlaneName : std::uint8_t {
  kTibial = 1,
  kDistalFemur = 2,
  kAnteriorCondyle = 3,
  kPosteriorCondyle = 4,
  kAnteriorChamfer = 5,
  kPosteriorChamfer = 6,
};

inline constexpr std::size_t kPlaneCount = 6;

// Column order of the SR/SPL report tables.
inline constexpr std::array<PlaneName, kPlaneCount> kTableOrder = {
    PlaneName::kAnteriorChamfer, PlaneName::kDistalFemur, PlaneName::kAnteriorCondyle,
    PlaneName::kPosteriorCondyle, PlaneName::kTibial,     PlaneName::kPosteriorChamfer};

inline std::string_view to_string(PlaneName p) {
  switch (p) {
    case PlaneName::kTibial: return "tibial";
    case PlaneName::kDistalFemur: return "distal femur";
    case PlaneName::kAnteriorCondyle: return "anterior condyle";
    case PlaneName::kPosteriorCondyle: return "posterior condyle";
    case PlaneName::kAnteriorChamfer: return "anterior chamfer";
    case PlaneName::kPosteriorChamfer: return "posterior chamfer";
  }
  return "unknown";
}

inline PlaneName plane_name_from_string(std::string_view s) {
  for (int id = 1; id <= static_cast<int>(kPlaneCount); ++id) {
    auto p = static_cast<PlaneName>(id);
    if (to_string(p) == s) return p;
  }
  throw ConfigError(str_cat("unknown resection plane '", s, "'"));
}

struct PlaneWindow {
  Vec3 center = Vec3::Zero();
  Vec3 u_axis = Vec3::UnitX();  // sweep direction
  Vec3 v_axis = Vec3::UnitY();
  double extent_u = 0.0;
  double extent_v = 0.0;
};

// A planned cutting plane {x : n . x = b} with a bounded rectangular window.
// The canonical tool frame has its origin at the entry edge of the window
// (center - extent_u/2 * u), x along the sweep direction u, z along n.
struct ResectionPlane {
  int id = 0;
  PlaneName name = PlaneName::kTibial;
  Vec3 normal = Vec3::UnitZ();
  double offset = 0.0;
  PlaneWindow window;

  double signed_distance(const Vec3& x) const { return normal.dot(x) - offset; }
  Vec3 entry_point() const { return window.center - 0.5 * window.extent_u * window.u_axis; }
  Vec3 exit_point() const { return window.center + 0.5 * window.extent_u * window.u_axis; }
  double sweep_length() const { return window.extent_u; }

  SE3 canonical_frame() const {
    Eigen::Matrix3d r;
    r.col(0) = window.u_axis;
    r.col(1) = window.v_axis;
    r.col(2) = normal;
    return SE3::from_rotation(r, entry_point());
  }
};

// Builds a plane, normalizing n and re-orthogonalizing u against it. Zero
// extents are accepted here; plan validation requires positive extents.
inline ResectionPlane make_plane(PlaneName name, const Vec3& normal, double offset,
                                 const Vec3& center, const Vec3& u_axis, double extent_u,
                                 double extent_v) {
  if (!normal.allFinite() || normal.norm() < 1e-12) {
    throw ConfigError(str_cat("plane '", to_string(name), "': normal must be non-zero"));
  }
  ResectionPlane p;
  p.id = static_cast<int>(name);
  p.name = name;
  p.normal = normal.normalized();
  p.offset = offset;
  Vec3 u = u_axis - u_axis.dot(p.normal) * p.normal;
  if (u.norm() < 1e-9) {
    throw ConfigError(str_cat("plane '", to_string(name), "': u axis parallel to normal"));
  }
  p.window.u_axis = u.normalized();
  p.window.v_axis = p.normal.cross(p.window.u_axis);
  p.window.center = center;
  p.window.extent_u = extent_u;
  p.window.extent_v = extent_v;
  if (!(extent_u >= 0.0) || !(extent_v >= 0.0)) {
    throw ConfigError(str_cat("plane '", to_string(name), "': extents must be non-negative"));
  }
  if (std::abs(p.signed_distance(center)) > 1e-6) {
    throw ConfigError(str_cat("plane '", to_string(name),
                              "': window center is off the plane by ",
                              p.signed_distance(center), " mm"));
  }
  return p;
}

struct AlignmentError {
  double angle_deg = 0.0;
  double distance_mm = 0.0;
};

// Blade normal is the tool z axis and the contact point is the tool origin.
// The angle ignores the sign of the normal.
inline AlignmentError alignment_error(const SE3& tool_pose, const ResectionPlane& plane) {
  Vec3 blade_normal = tool_pose.rotation() * Vec3::UnitZ();
  double c = std::clamp(std::abs(blade_normal.dot(plane.normal)), 0.0, 1.0);
  return {rad_to_deg(std::acos(c)), std::abs(plane.signed_distance(tool_pose.translation()))};
}

struct Landmark {
  std::string id;
  Vec3 position = Vec3::Zero();
};

struct Aabb {
  Vec3 min = Vec3::Constant(-1e9);
  Vec3 max = Vec3::Constant(1e9);

  bool contains(const Vec3& p) const {
    return (p.array() >= min.array()).all() && (p.array() <= max.array()).all();
  }
};

struct SurfacePatch {
  std::vector<Vec3> points;
  int plane_id = 0;
  std::uint64_t seed = 0;

  std::size_t sample_count() const { return points.size(); }
};

// n points uniformly over the plane window; deterministic in seed.
inline SurfacePatch sample_plane_patch(const ResectionPlane& plane, std::size_t n,
                                       std::uint64_t seed) {
  if (n == 0) throw Error("sample_plane_patch: n must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-0.5, 0.5);
  SurfacePatch patch;
  patch.plane_id = plane.id;
  patch.seed = seed;
  patch.points.reserve(n);
  const auto& w = plane.window;
  for (std::size_t i = 0; i < n; ++i) {
    double a = unit(rng) * w.extent_u;
    double b = unit(rng) * w.extent_v;
    patch.points.push_back(w.center + a * w.u_axis + b * w.v_axis);
  }
  return patch;
}

// ---------------------------------------------------------------------------
// Plan

struct ResectionPlan {
  std::vector<ResectionPlane> planes;  // planes[i].id == i + 1
  std::vector<Landmark> landmarks;
  Aabb workspace;

  const ResectionPlane& plane(PlaneName name) const {
    return planes.at(static_cast<std::size_t>(name) - 1);
  }

  void validate() const {
    if (planes.size() != kPlaneCount) {
      throw ConfigError(str_cat("plan must contain ", kPlaneCount, " planes, got ",
                                planes.size()));
    }
    for (std::size_t i = 0; i < planes.size(); ++i) {
      const auto& p = planes[i];
      if (p.id != static_cast<int>(i) + 1) {
        throw ConfigError(str_cat("plan plane ", i, " has id ", p.id, ", expected ", i + 1));
      }
      if (std::abs(p.normal.norm() - 1.0) > 1e-9) {
        throw ConfigError(str_cat("plane '", to_string(p.name), "': normal is not unit"));
      }
      if (!(p.window.extent_u > 0.0 && p.window.extent_v > 0.0)) {
        throw ConfigError(str_cat("plane '", to_string(p.name), "': window extents must be > 0"));
      }
    }
    for (const auto& l : landmarks) {
      if (!l.position.allFinite()) {
        throw ConfigError(str_cat("landmark '", l.id, "' has non-finite coordinates"));
      }
    }
    if (!(workspace.min.array() < workspace.max.array()).all()) {
      throw ConfigError("workspace bounds must satisfy min < max on every axis");
    }
  }
};

inline json vec3_to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

inline Vec3 vec3_from_json(const json& j) {
  if (!j.is_array() || j.size() != 3) throw ConfigError("expected a 3-vector");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

inline json se3_to_json(const SE3& t) {
  const auto& q = t.rotation();
  return json{{"q", json::array({q.w(), q.x(), q.y(), q.z()})},
              {"t", vec3_to_json(t.translation())}};
}

inline SE3 se3_from_json(const json& j) {
  const auto& q = j.at("q");
  if (!q.is_array() || q.size() != 4) throw ConfigError("expected quaternion [w, x, y, z]");
  return SE3(Eigen::Quaterniond(q[0].get<double>(), q[1].get<double>(), q[2].get<double>(),
                                q[3].get<double>()),
             vec3_from_json(j.at("t")));
}

inline json plane_to_json(const ResectionPlane& p) {
  return json{{"name", to_string(p.name)},
              {"normal", vec3_to_json(p.normal)},
              {"offset", p.offset},
              {"window",
               {{"center", vec3_to_json(p.window.center)},
                {"u_axis", vec3_to_json(p.window.u_axis)},
                {"extent_u", p.window.extent_u},
                {"extent_v", p.window.extent_v}}}};
}

inline ResectionPlane plane_from_json(const json& j) {
  const auto& w = j.at("window");
  return make_plane(plane_name_from_string(j.at("name").get<std::string>()),
                    vec3_from_json(j.at("normal")), j.at("offset").get<double>(),
                    vec3_from_json(w.at("center")), vec3_from_json(w.at("u_axis")),
                    w.at("extent_u").get<double>(), w.at("extent_v").get<double>());
}

inline json plan_to_json(const ResectionPlan& plan) {
  json planes = json::array();
  for (const auto& p : plan.planes) planes.push_back(plane_to_json(p));
  json landmarks = json::array();
  for (const auto& l : plan.landmarks) {
    landmarks.push_back({{"id", l.id}, {"position", vec3_to_json(l.position)}});
  }
  return json{{"planes", planes},
              {"landmarks", landmarks},
              {"workspace",
               {{"min", vec3_to_json(plan.workspace.min)},
                {"max", vec3_to_json(plan.workspace.max)}}}};
}

// Planes may appear in any order in the file; they are stored by id.
inline ResectionPlan plan_from_json(const json& j) {
  try {
    ResectionPlan plan;
    std::vector<std::optional<ResectionPlane>> slots(kPlaneCount);
    for (const auto& pj : j.at("planes")) {
      ResectionPlane p = plane_from_json(pj);
      auto& slot = slots.at(static_cast<std::size_t>(p.id) - 1);
      if (slot) throw ConfigError(str_cat("plane '", to_string(p.name), "' listed twice"));
      slot = p;
    }
    for (auto& s : slots) {
      if (!s) throw ConfigError("plan is missing a resection plane");
      plan.planes.push_back(*s);
    }
    if (j.contains("landmarks")) {
      for (const auto& lj : j.at("landmarks")) {
        plan.landmarks.push_back({lj.at("id").get<std::string>(),
                                  vec3_from_json(lj.at("position"))});
      }
    }
    const auto& ws = j.at("workspace");
    plan.workspace = {vec3_from_json(ws.at("min")), vec3_from_json(ws.at("max"))};
    plan.validate();
    return plan;
  } catch (const json::exception& e) {
    throw ConfigError(str_cat("plan: ", e.what()));
  }
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(str_cat(path, ": cannot open file"));
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(str_cat(path, ": ", e.what()));
  }
}

// Point-list export: one "x y z" record per line.
inline void write_xyz(std::ostream& out, const SurfacePatch& patch) {
  out.precision(17);
  for (const auto& p : patch.points) out << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
}

inline std::vector<Vec3> read_xyz(std::istream& in) {
  std::vector<Vec3> pts;
  double x, y, z;
  while (in >> x >> y >> z) pts.emplace_back(x, y, z);
  if (!in.eof()) throw ConfigError("malformed point list");
  return pts;
}

}  // namespace resect

// Copyright 2026 The h2osdf Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Analytic indoor scenes: a closed room box with CSG primitives inside,
// a sphere tracer for ground truth, and the synthetic dataset (images,
// normal priors, uncertainty, masks, depth, point clouds, poses).

#pragma once

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "h2osdf/core.hpp"
#include "h2osdf/losses.hpp"
#include "h2osdf/rendering.hpp"

namespace h2o {

using nlohmann::json;

enum class PrimitiveType { kSphere, kBox, kCapsule };

enum class SurfaceLabel { kLayout = 0, kObject = 1 };

struct Primitive {
  PrimitiveType type = PrimitiveType::kSphere;
  Vec3 center = Vec3::Zero();        ///< sphere / box
  Vec3 half_extents = Vec3::Ones();  ///< box
  Vec3 a = Vec3::Zero(), b = Vec3::Zero();  ///< capsule end points
  double radius = 0.5;               ///< sphere / capsule
  Vec3 albedo = Vec3::Constant(0.7);
  SurfaceLabel label = SurfaceLabel::kObject;
};

struct PointLight {
  Vec3 position = Vec3::Zero();
  double intensity = 0.6;
};

struct CameraRig {
  int n_default = 24;
  double ring_radius = 0.6;
  std::vector<double> heights{-0.1, 0.1};
  Vec3 target = Vec3::Zero();
  double fov_deg = 90.0;  ///< horizontal field of view
};

struct SceneSpec {
  std::string name = "scene";
  Vec3 room_center = Vec3::Zero();
  Vec3 room_half_extents = Vec3(0.9, 0.6, 0.9);
  Vec3 room_albedo = Vec3::Constant(0.8);
  std::vector<Primitive> objects;
  Vec3 bounds_min = Vec3::Constant(-1.0);
  Vec3 bounds_max = Vec3::Constant(1.0);
  std::vector<PointLight> lights;
  CameraRig cameras;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Primitive distances

inline double sphere_sdf(const Vec3& x, const Vec3& c, double r) { return (x - c).norm() - r; }

inline double box_sdf(const Vec3& x, const Vec3& c, const Vec3& h) {
  const Vec3 q = (x - c).cwiseAbs() - h;
  return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
}

inline double capsule_sdf(const Vec3& x, const Vec3& a, const Vec3& b, double r) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  const double h = len2 > 0 ? std::clamp((x - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (x - a - h * ab).norm() - r;
}

inline double primitive_sdf(const Primitive& p, const Vec3& x) {
  switch (p.type) {
    case PrimitiveType::kSphere: return sphere_sdf(x, p.center, p.radius);
    case PrimitiveType::kBox: return box_sdf(x, p.center, p.half_extents);
    case PrimitiveType::kCapsule: return capsule_sdf(x, p.a, p.b, p.radius);
  }
  return 0.0;
}

/// Axis-aligned bounds of a primitive.
inline std::pair<Vec3, Vec3> primitive_bounds(const Primitive& p) {
  switch (p.type) {
    case PrimitiveType::kSphere: return {p.center.array() - p.radius, p.center.array() + p.radius};
    case PrimitiveType::kBox: return {p.center - p.half_extents, p.center + p.half_extents};
    case PrimitiveType::kCapsule:
      return {p.a.cwiseMin(p.b).array() - p.radius, p.a.cwiseMax(p.b).array() + p.radius};
  }
  return {p.center, p.center};
}

inline void SceneSpec::validate() const {
  require((room_half_extents.array() > 0).all(), "SceneSpec: room half extents must be positive");
  const Vec3 lo = room_center - room_half_extents, hi = room_center + room_half_extents;
  require((bounds_min.array() >= -1.0).all() && (bounds_max.array() <= 1.0).all(),
          "SceneSpec: scene bounds must fit in [-1,1]^3");
  require((bounds_min.array() <= lo.array()).all() && (bounds_max.array() >= hi.array()).all(),
          "SceneSpec: bounds must contain the room");
  for (const Primitive& p : objects) {
    const auto [plo, phi] = primitive_bounds(p);
    require((plo.array() > lo.array()).all() && (phi.array() < hi.array()).all(),
            "SceneSpec: objects must lie strictly inside the room");
    require((p.albedo.array() >= 0).all() && (p.albedo.array() <= 1).all(), "SceneSpec: albedo outside [0,1]");
  }
  require(cameras.fov_deg > 0 && cameras.fov_deg < 170, "SceneSpec: field of view out of range");
  require(!cameras.heights.empty(), "SceneSpec: camera heights must not be empty");
}

struct SdfSample {
  double d = 0.0;
  SurfaceLabel label = SurfaceLabel::kLayout;
  Vec3 albedo = Vec3::Zero();
  int primitive = -1;  ///< -1 for the room, else object index
  double second = 0.0; ///< second smallest primitive distance (seam detection)
};

/// d = min(-room_box(x), objects); label and albedo from the argmin.
inline SdfSample scene_sdf(const SceneSpec& spec, const Vec3& x) {
  SdfSample s;
  s.d = -box_sdf(x, spec.room_center, spec.room_half_extents);
  s.albedo = spec.room_albedo;
  s.second = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    const double d = primitive_sdf(spec.objects[i], x);
    if (d < s.d) {
      s.second = s.d;
      s.d = d;
      s.label = spec.objects[i].label;
      s.albedo = spec.objects[i].albedo;
      s.primitive = static_cast<int>(i);
    } else if (d < s.second) {
      s.second = d;
    }
  }
  return s;
}

inline double scene_distance(const SceneSpec& spec, const Vec3& x) { return scene_sdf(spec, x).d; }

inline Vec3 scene_normal(const SceneSpec& spec, const Vec3& x, double h = 1e-6) {
  Vec3 g;
  for (int k = 0; k < 3; ++k) {
    Vec3 e = Vec3::Zero();
    e[k] = h;
    g[k] = (scene_distance(spec, x + e) - scene_distance(spec, x - e)) / (2 * h);
  }
  const double n = g.norm();
  return n > 0 ? Vec3(g / n) : Vec3::Zero();
}

struct TraceHit {
  bool hit = false;
  double t = 0.0;
  Vec3 normal = Vec3::Zero();
  SurfaceLabel label = SurfaceLabel::kLayout;
  Vec3 albedo = Vec3::Zero();
  int steps = 0;
};

constexpr int kMaxTraceSteps = 256;
constexpr double kTraceHitEpsilon = 1e-5;

/// Marches t += d(x) until d < 1e-5 (hit) or t > t_far (miss).
inline TraceHit sphere_trace(const SceneSpec& spec, const Ray& ray, int* step_limit_misses = nullptr) {
  TraceHit h;
  require(scene_distance(spec, ray.at(ray.t_near)) > 0, "sphere_trace: ray origin must be in free space");
  double t = ray.t_near;
  for (int i = 0; i < kMaxTraceSteps; ++i) {
    const Vec3 x = ray.at(t);
    const SdfSample s = scene_sdf(spec, x);
    h.steps = i + 1;
    if (s.d < kTraceHitEpsilon) {
      h.hit = true;
      h.t = t;
      h.normal = scene_normal(spec, x);
      h.label = s.label;
      h.albedo = s.albedo;
      return h;
    }
    t += s.d;
    if (t > ray.t_far) return h;
  }
  if (step_limit_misses) ++*step_limit_misses;
  return h;
}

/// Exit distance of a ray starting inside an axis-aligned box.
inline double box_exit_distance(const Vec3& o, const Vec3& v, const Vec3& lo, const Vec3& hi) {
  double t = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 3; ++k) {
    if (v[k] > 0) t = std::min(t, (hi[k] - o[k]) / v[k]);
    if (v[k] < 0) t = std::min(t, (lo[k] - o[k]) / v[k]);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Cameras

struct Intrinsics {
  int width = 0, height = 0;
  double fx = 0, fy = 0, cx = 0, cy = 0;
};

/// Camera-to-world transform. Camera axes: x right, y down, z forward.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 position = Vec3::Zero();
};

inline Intrinsics make_intrinsics(int width, int height, double fov_deg) {
  require(width >= 2 && height >= 2, "make_intrinsics: degenerate resolution");
  Intrinsics k;
  k.width = width;
  k.height = height;
  k.fx = k.fy = 0.5 * width / std::tan(0.5 * fov_deg * kPi / 180.0);
  k.cx = 0.5 * width;
  k.cy = 0.5 * height;
  return k;
}

inline Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3::UnitY()) {
  const Vec3 f = (target - eye).normalized();
  Vec3 r = f.cross(up);
  if (r.norm() < 1e-9) r = f.cross(Vec3::UnitX());
  r.normalize();
  const Vec3 d = f.cross(r);  // image "down"
  Pose p;
  p.rotation.col(0) = r;
  p.rotation.col(1) = d;
  p.rotation.col(2) = f;
  p.position = eye;
  return p;
}

inline Pose ring_pose(const CameraRig& rig, int i, int n) {
  const double phi = 2.0 * kPi * i / n;
  const double y = rig.heights[static_cast<std::size_t>(i) % rig.heights.size()];
  const Vec3 eye(rig.ring_radius * std::cos(phi), y, rig.ring_radius * std::sin(phi));
  return look_at(eye, rig.target);
}

/// Pixel-center ray; t_far is the exit distance from the scene bounds.
inline Ray pixel_ray(const SceneSpec& spec, const Pose& pose, const Intrinsics& k, double px, double py,
                     double t_near = 0.02) {
  const Vec3 dc((px - k.cx) / k.fx, (py - k.cy) / k.fy, 1.0);
  Ray r;
  r.origin = pose.position;
  r.direction = (pose.rotation * dc).normalized();
  r.t_near = t_near;
  r.t_far = box_exit_distance(r.origin, r.direction, spec.bounds_min, spec.bounds_max);
  return r;
}

// ---------------------------------------------------------------------------
// Dataset

/// One view; buffers are row-major with one row per pixel (index y*W + x).
struct Frame {
  Pose pose;
  Intrinsics intrinsics;
  Matrix color;        ///< P x 3, quantized to 8 bits
  Matrix normal;       ///< P x 3
  Matrix uncertainty;  ///< P x 1
  Matrix mask;         ///< P x 1
  Matrix depth;        ///< P x 1, ray distance t (0 on misses)
  Matrix valid;        ///< P x 1, 1 where the tracer hit

  int pixels() const { return intrinsics.width * intrinsics.height; }
};

struct Dataset {
  SceneSpec spec;
  std::vector<Frame> frames;
  std::vector<PointCloud> clouds;
  int trace_misses = 0;
};

inline Vec3 shade(const SceneSpec& spec, const Vec3& x, const Vec3& n, const Vec3& albedo) {
  double e = 0.0;
  for (const PointLight& l : spec.lights) e += l.intensity * std::max(0.0, n.dot((l.position - x).normalized()));
  return (albedo * e).cwiseMin(1.0).cwiseMax(0.0);
}

/// Mean angle between each pixel's normal and those in its 5x5 window,
/// scaled to [0,1] by the per-frame maximum.
inline Matrix normal_variation(const Matrix& normal, const Matrix& valid, int width, int height) {
  Matrix u = Matrix::Zero(static_cast<Eigen::Index>(width) * height, 1);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const int p = y * width + x;
      if (valid(p, 0) == 0) continue;
      const Vec3 n0 = normal.row(p).transpose();
      double acc = 0;
      int cnt = 0;
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx) {
          const int xx = x + dx, yy = y + dy;
          if (xx < 0 || yy < 0 || xx >= width || yy >= height || (dx == 0 && dy == 0)) continue;
          const int q = yy * width + xx;
          if (valid(q, 0) == 0) continue;
          const double c = std::clamp(n0.dot(normal.row(q).transpose()), -1.0, 1.0);
          acc += std::acos(c);
          ++cnt;
        }
      u(p, 0) = cnt ? acc / cnt : 0.0;
    }
  const double mx = u.maxCoeff();
  if (mx > 0) u /= mx;
  return u;
}

inline Frame render_frame(const SceneSpec& spec, const Pose& pose, const Intrinsics& k, int* misses = nullptr) {
  Frame f;
  f.pose = pose;
  f.intrinsics = k;
  const Eigen::Index P = static_cast<Eigen::Index>(k.width) * k.height;
  f.color = Matrix::Zero(P, 3);
  f.normal = Matrix::Zero(P, 3);
  f.mask = Matrix::Zero(P, 1);
  f.depth = Matrix::Zero(P, 1);
  f.valid = Matrix::Zero(P, 1);
  for (int y = 0; y < k.height; ++y)
    for (int x = 0; x < k.width; ++x) {
      const Eigen::Index p = static_cast<Eigen::Index>(y) * k.width + x;
      const Ray r = pixel_ray(spec, pose, k, x + 0.5, y + 0.5);
      const TraceHit h = sphere_trace(spec, r, misses);
      if (!h.hit) continue;
      const Vec3 c = shade(spec, r.at(h.t), h.normal, h.albedo);
      for (int ch = 0; ch < 3; ++ch) f.color(p, ch) = std::round(c[ch] * 255.0) / 255.0;
      f.normal.row(p) = h.normal.transpose();
      f.mask(p, 0) = h.label == SurfaceLabel::kObject ? 1.0 : 0.0;
      f.depth(p, 0) = h.t;
      f.valid(p, 0) = 1.0;
    }
  f.uncertainty = normal_variation(f.normal, f.valid, k.width, k.height);
  return f;
}

/// Back-projects every `stride`-th pixel and perturbs it with N(0, sigma^2 I).
inline PointCloud back_project(const SceneSpec& spec, const Frame& f, int stride, double sigma, Rng& rng) {
  require(stride >= 1, "back_project: stride must be positive");
  std::normal_distribution<double> noise(0.0, sigma > 0 ? sigma : 1.0);
  std::vector<Vec3> pts;
  PointCloud pc;
  const Intrinsics& k = f.intrinsics;
  for (int y = stride / 2; y < k.height; y += stride)
    for (int x = stride / 2; x < k.width; x += stride) {
      const Eigen::Index p = static_cast<Eigen::Index>(y) * k.width + x;
      if (f.valid(p, 0) == 0) continue;
      const Ray r = pixel_ray(spec, f.pose, k, x + 0.5, y + 0.5);
      Vec3 q = r.at(f.depth(p, 0));
      if (sigma > 0) q += Vec3(noise(rng), noise(rng), noise(rng));
      pts.push_back(q);
      pc.labels.push_back(static_cast<int>(f.mask(p, 0)));
    }
  pc.points.resize(static_cast<Eigen::Index>(pts.size()), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) pc.points.row(static_cast<Eigen::Index>(i)) = pts[i].transpose();
  return pc;
}

struct DatasetOptions {
  int n_frames = 24;
  int width = 128;
  int height = 128;
  std::uint64_t seed = 0;
  double noise_sigma = 0.005;
  int point_stride = 4;
};

inline Dataset generate_dataset(const SceneSpec& spec, const DatasetOptions& opt) {
  spec.validate();
  require(opt.n_frames >= 2, "generate_dataset: need at least two frames");
  require(opt.width >= 2 && opt.height >= 2, "generate_dataset: degenerate resolution");
  Dataset ds;
  ds.spec = spec;
  const Intrinsics k = make_intrinsics(opt.width, opt.height, spec.cameras.fov_deg);
  for (int i = 0; i < opt.n_frames; ++i) {
    ds.frames.push_back(render_frame(spec, ring_pose(spec.cameras, i, opt.n_frames), k, &ds.trace_misses));
    Rng rng = make_stream(opt.seed, 0x5c3e, static_cast<std::uint64_t>(i));
    ds.clouds.push_back(back_project(spec, ds.frames.back(), opt.point_stride, opt.noise_sigma, rng));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// JSON

inline json vec_json(const Vec3& v) { return json::array({v[0], v[1], v[2]}); }

inline Vec3 json_vec(const json& j) {
  require(j.is_array() && j.size() == 3, "expected a 3-vector");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

inline json scene_to_json(const SceneSpec& s) {
  json objs = json::array();
  for (const Primitive& p : s.objects) {
    json o;
    o["albedo"] = vec_json(p.albedo);
    o["label"] = p.label == SurfaceLabel::kObject ? "object" : "layout";
    switch (p.type) {
      case PrimitiveType::kSphere:
        o["type"] = "sphere";
        o["center"] = vec_json(p.center);
        o["radius"] = p.radius;
        break;
      case PrimitiveType::kBox:
        o["type"] = "box";
        o["center"] = vec_json(p.center);
        o["half_extents"] = vec_json(p.half_extents);
        break;
      case PrimitiveType::kCapsule:
        o["type"] = "capsule";
        o["a"] = vec_json(p.a);
        o["b"] = vec_json(p.b);
        o["radius"] = p.radius;
        break;
    }
    objs.push_back(o);
  }
  json lights = json::array();
  for (const PointLight& l : s.lights) lights.push_back({{"position", vec_json(l.position)}, {"intensity", l.intensity}});
  return {{"name", s.name},
          {"room", {{"center", vec_json(s.room_center)},
                    {"half_extents", vec_json(s.room_half_extents)},
                    {"albedo", vec_json(s.room_albedo)}}},
          {"objects", objs},
          {"bounds", {{"min", vec_json(s.bounds_min)}, {"max", vec_json(s.bounds_max)}}},
          {"lights", lights},
          {"cameras", {{"ring_radius", s.cameras.ring_radius},
                       {"heights", s.cameras.heights},
                       {"target", vec_json(s.cameras.target)},
                       {"fov_deg", s.cameras.fov_deg},
                       {"n_default", s.cameras.n_default}}}};
}

inline SceneSpec scene_from_json(const json& j) {
  SceneSpec s;
  s.name = j.value("name", s.name);
  const json& room = j.at("room");
  s.room_center = json_vec(room.at("center"));
  s.room_half_extents = json_vec(room.at("half_extents"));
  if (room.contains("albedo")) s.room_albedo = json_vec(room.at("albedo"));
  for (const json& o : j.value("objects", json::array())) {
    Primitive p;
    const std::string type = o.at("type").get<std::string>();
    if (type == "sphere") {
      p.type = PrimitiveType::kSphere;
      p.center = json_vec(o.at("center"));
      p.radius = o.at("radius").get<double>();
    } else if (type == "box") {
      p.type = PrimitiveType::kBox;
      p.center = json_vec(o.at("center"));
      p.half_extents = json_vec(o.at("half_extents"));
    } else if (type == "capsule") {
      p.type = PrimitiveType::kCapsule;
      p.a = json_vec(o.at("a"));
      p.b = json_vec(o.at("b"));
      p.radius = o.at("radius").get<double>();
    } else {
      throw ContractViolation("unknown primitive type '" + type + "'");
    }
    if (o.contains("albedo")) p.albedo = json_vec(o.at("albedo"));
    const std::string label = o.value("label", std::string("object"));
    require(label == "object" || label == "layout", "primitive label must be 'object' or 'layout'");
    p.label = label == "object" ? SurfaceLabel::kObject : SurfaceLabel::kLayout;
    s.objects.push_back(p);
  }
  if (j.contains("bounds")) {
    s.bounds_min = json_vec(j.at("bounds").at("min"));
    s.bounds_max = json_vec(j.at("bounds").at("max"));
  }
  for (const json& l : j.value("lights", json::array()))
    s.lights.push_back({json_vec(l.at("position")), l.value("intensity", 0.6)});
  if (j.contains("cameras")) {
    const json& c = j.at("cameras");
    s.cameras.ring_radius = c.value("ring_radius", s.cameras.ring_radius);
    s.cameras.heights = c.value("heights", s.cameras.heights);
    if (c.contains("target")) s.cameras.target = json_vec(c.at("target"));
    s.cameras.fov_deg = c.value("fov_deg", s.cameras.fov_deg);
    s.cameras.n_default = c.value("n_default", s.cameras.n_default);
  }
  s.validate();
  return s;
}

inline SceneSpec load_scene(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open scene file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ContractViolation("malformed scene file " + path.string() + ": " + e.what());
  }
  return scene_from_json(j);
}

// ---------------------------------------------------------------------------
// Stock scenes

inline SceneSpec room_base(const std::string& name) {
  SceneSpec s;
  s.name = name;
  s.room_half_extents = Vec3(0.9, 0.6, 0.9);
  s.room_albedo = Vec3(0.75, 0.72, 0.68);
  s.bounds_min = Vec3(-0.95, -0.65, -0.95);
  s.bounds_max = Vec3(0.95, 0.65, 0.95);
  s.lights = {{Vec3(0.45, 0.5, 0.3), 0.7}, {Vec3(-0.4, 0.45, -0.35), 0.5}};
  s.cameras.ring_radius = 0.6;
  s.cameras.heights = {-0.05, 0.15, 0.05, 0.25};
  s.cameras.target = Vec3(0.0, -0.15, 0.0);
  s.cameras.fov_deg = 90.0;
  return s;
}

inline SceneSpec stock_scene(const std::string& name) {
  SceneSpec s = room_base(name);
  if (name == "room_empty") return s;
  if (name == "room_sphere") {
    Primitive p;
    p.type = PrimitiveType::kSphere;
    p.center = Vec3(0.0, -0.3, 0.0);
    p.radius = 0.25;
    p.albedo = Vec3(0.85, 0.35, 0.25);
    s.objects.push_back(p);
    return s;
  }
  if (name == "room_thinrods") {
    Primitive seat;
    seat.type = PrimitiveType::kBox;
    seat.center = Vec3(0.0, -0.25, 0.0);
    seat.half_extents = Vec3(0.25, 0.03, 0.2);
    seat.albedo = Vec3(0.3, 0.45, 0.8);
    s.objects.push_back(seat);
    for (int sx : {-1, 1})
      for (int sz : {-1, 1}) {
        Primitive leg;
        leg.type = PrimitiveType::kCapsule;
        leg.a = Vec3(0.21 * sx, -0.26, 0.16 * sz);
        leg.b = Vec3(0.21 * sx, -0.57, 0.16 * sz);
        leg.radius = 0.02;
        leg.albedo = Vec3(0.3, 0.45, 0.8);
        s.objects.push_back(leg);
      }
    return s;
  }
  throw ContractViolation("unknown stock scene '" + name + "'");
}

// ---------------------------------------------------------------------------
// Buffer IO

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ContractViolation("malformed JSON in " + path.string() + ": " + e.what());
  }
  return j;
}

/// Raw little-endian float32 buffer plus a JSON sidecar next to it.
inline void write_raw_f32(const std::filesystem::path& path, const Matrix& m, int width, int height) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot write " + path.string());
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const float v = static_cast<float>(m.data()[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    const unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  }
  std::filesystem::path side = path;
  side += ".json";
  write_json(side, {{"width", width}, {"height", height}, {"channels", m.cols()}, {"type", "float32"}});
}

inline Matrix read_raw_f32(const std::filesystem::path& path) {
  std::filesystem::path side = path;
  side += ".json";
  const json meta = read_json(side);
  require(meta.value("type", std::string()) == "float32", "unsupported buffer type in " + side.string());
  const Eigen::Index w = meta.at("width"), h = meta.at("height"), c = meta.at("channels");
  Matrix m(w * h, c);
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open " + path.string());
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    require(in.good(), "truncated buffer " + path.string());
    const std::uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    float v;
    std::memcpy(&v, &bits, 4);
    m.data()[i] = v;
  }
  return m;
}

inline void write_ppm(const std::filesystem::path& path, const Matrix& rgb, int width, int height) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot write " + path.string());
  out << "P6\n" << width << " " << height << "\n255\n";
  for (Eigen::Index i = 0; i < rgb.rows(); ++i)
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(rgb(i, c), 0.0, 1.0);
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
}

inline Matrix read_ppm(const std::filesystem::path& path, int* width = nullptr, int* height = nullptr) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  require(magic == "P6" && w > 0 && h > 0 && maxv == 255, "unsupported PPM " + path.string());
  in.get();
  Matrix rgb(static_cast<Eigen::Index>(w) * h, 3);
  for (Eigen::Index i = 0; i < rgb.rows(); ++i)
    for (int c = 0; c < 3; ++c) {
      const int v = in.get();
      require(v != EOF, "truncated PPM " + path.string());
      rgb(i, c) = v / 255.0;
    }
  if (width) *width = w;
  if (height) *height = h;
  return rgb;
}

inline json camera_json(const Frame& f) {
  json R = json::array();
  for (int r = 0; r < 3; ++r) R.push_back({f.pose.rotation(r, 0), f.pose.rotation(r, 1), f.pose.rotation(r, 2)});
  const Intrinsics& k = f.intrinsics;
  return {{"rotation", R},
          {"position", vec_json(f.pose.position)},
          {"intrinsics",
           {{"width", k.width}, {"height", k.height}, {"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}}}};
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_json(dir / "scene.json", scene_to_json(ds.spec));
  json frames = json::array();
  for (std::size_t i = 0; i < ds.frames.size(); ++i) {
    const Frame& f = ds.frames[i];
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%03zu", i);
    const fs::path fd = dir / name;
    fs::create_directories(fd);
    const int W = f.intrinsics.width, H = f.intrinsics.height;
    write_ppm(fd / "color.ppm", f.color, W, H);
    write_raw_f32(fd / "normal.f32", f.normal, W, H);
    write_raw_f32(fd / "uncertainty.f32", f.uncertainty, W, H);
    write_raw_f32(fd / "mask.f32", f.mask, W, H);
    write_raw_f32(fd / "depth.f32", f.depth, W, H);
    write_raw_f32(fd / "valid.f32", f.valid, W, H);
    write_json(fd / "camera.json", camera_json(f));
    std::ofstream xyz(fd / "points.xyz");
    xyz.precision(9);
    const PointCloud& pc = ds.clouds[i];
    for (Eigen::Index p = 0; p < pc.size(); ++p)
      xyz << pc.points(p, 0) << " " << pc.points(p, 1) << " " << pc.points(p, 2) << " " << pc.labels[p] << "\n";
    frames.push_back({{"directory", name},
                      {"color", "color.ppm"},
                      {"buffers", {"normal.f32", "uncertainty.f32", "mask.f32", "depth.f32", "valid.f32"}},
                      {"points", "points.xyz"},
                      {"camera", "camera.json"}});
  }
  write_json(dir / "manifest.json", {{"scene", "scene.json"},
                                     {"frame_count", ds.frames.size()},
                                     {"trace_misses", ds.trace_misses},
                                     {"formats",
                                      {{"color", "PPM P6"},
                                       {"buffers", "float32 little-endian row-major with JSON sidecar"},
                                       {"points", "ASCII x y z label"},
                                       {"camera", "JSON camera-to-world rotation, position, pinhole intrinsics"}}},
                                     {"frames", frames}});
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const json manifest = read_json(dir / "manifest.json");
  Dataset ds;
  ds.spec = load_scene(dir / manifest.value("scene", std::string("scene.json")));
  ds.trace_misses = manifest.value("trace_misses", 0);
  for (const json& fr : manifest.at("frames")) {
    const fs::path fd = dir / fr.at("directory").get<std::string>();
    Frame f;
    const json cam = read_json(fd / "camera.json");
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) f.pose.rotation(r, c) = cam.at("rotation")[r][c].get<double>();
    f.pose.position = json_vec(cam.at("position"));
    const json& k = cam.at("intrinsics");
    f.intrinsics = {k.at("width"), k.at("height"), k.at("fx"), k.at("fy"), k.at("cx"), k.at("cy")};
    int W = 0, H = 0;
    f.color = read_ppm(fd / "color.ppm", &W, &H);
    require(W == f.intrinsics.width && H == f.intrinsics.height, "image size disagrees with intrinsics");
    f.normal = read_raw_f32(fd / "normal.f32");
    f.uncertainty = read_raw_f32(fd / "uncertainty.f32");
    f.mask = read_raw_f32(fd / "mask.f32");
    f.depth = read_raw_f32(fd / "depth.f32");
    f.valid = read_raw_f32(fd / "valid.f32");
    for (const Matrix* m : {&f.normal, &f.uncertainty, &f.mask, &f.depth, &f.valid})
      require(m->rows() == f.pixels(), "buffer size disagrees with intrinsics in " + fd.string());
    PointCloud pc;
    std::ifstream xyz(fd / "points.xyz");
    require(xyz.good(), "cannot open " + (fd / "points.xyz").string());
    std::vector<Vec3> pts;
    double x, y, z;
    int label;
    while (xyz >> x >> y >> z >> label) {
      pts.emplace_back(x, y, z);
      pc.labels.push_back(label);
    }
    pc.points.resize(static_cast<Eigen::Index>(pts.size()), 3);
    for (std::size_t i = 0; i < pts.size(); ++i) pc.points.row(static_cast<Eigen::Index>(i)) = pts[i].transpose();
    ds.frames.push_back(std::move(f));
    ds.clouds.push_back(std::move(pc));
  }
  return ds;
}

}  // namespace h2o

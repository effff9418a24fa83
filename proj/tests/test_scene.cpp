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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "h2osdf/scene.hpp"
#include "test_common.hpp"

namespace h2o {
namespace {

SceneSpec big_room_with_unit_sphere() {
  SceneSpec s;
  s.room_half_extents = Vec3::Constant(10.0);
  Primitive p;
  p.center = Vec3::Zero();
  p.radius = 1.0;
  s.objects.push_back(p);
  return s;
}

TEST(SceneSdf, Examples) {
  const SceneSpec s = big_room_with_unit_sphere();
  EXPECT_NEAR(scene_sdf(s, Vec3(2, 0, 0)).d, 1.0, 1e-15);
  EXPECT_EQ(scene_sdf(s, Vec3(2, 0, 0)).label, SurfaceLabel::kObject);

  SceneSpec empty;
  empty.room_half_extents = Vec3::Ones();
  EXPECT_EQ(scene_sdf(empty, Vec3::Zero()).d, 1.0);
  EXPECT_EQ(scene_sdf(empty, Vec3::Zero()).label, SurfaceLabel::kLayout);
  EXPECT_LT(scene_sdf(empty, Vec3(1.1, 0, 0)).d, 0.0);

  // Wall at x = 1 and a sphere surface at x = 1 - 1e-9 away from the probe.
  SceneSpec u;
  u.room_half_extents = Vec3::Ones();
  Primitive p;
  p.center = Vec3(0.5, 0, 0);
  p.radius = 0.2 + 1e-9;
  p.albedo = Vec3(0.1, 0.2, 0.3);
  u.objects.push_back(p);
  const SdfSample q = scene_sdf(u, Vec3(0.85, 0, 0));
  EXPECT_EQ(q.label, SurfaceLabel::kObject);
  EXPECT_EQ(q.primitive, 0);
  EXPECT_EQ(q.albedo, p.albedo);
}

TEST(SceneSdf, PrimitiveDistances) {
  EXPECT_NEAR(box_sdf(Vec3(2, 0, 0), Vec3::Zero(), Vec3::Ones()), 1.0, 1e-15);
  EXPECT_NEAR(box_sdf(Vec3(2, 2, 0), Vec3::Zero(), Vec3::Ones()), std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(box_sdf(Vec3(0.5, 0, 0), Vec3::Zero(), Vec3::Ones()), -0.5, 1e-15);
  EXPECT_NEAR(capsule_sdf(Vec3(1, 0.5, 0), Vec3::Zero(), Vec3(0, 1, 0), 0.1), 0.9, 1e-15);
  EXPECT_NEAR(capsule_sdf(Vec3(0, 3, 0), Vec3::Zero(), Vec3(0, 1, 0), 0.1), 1.9, 1e-15);
}

TEST(SphereTrace, HeadOnHit) {
  const SceneSpec s = big_room_with_unit_sphere();
  Ray r;
  r.origin = Vec3(0, 0, -2);
  r.direction = Vec3::UnitZ();
  r.t_far = 20;
  const TraceHit h = sphere_trace(s, r);
  ASSERT_TRUE(h.hit);
  EXPECT_NEAR(h.t, 1.0, 1e-5);
  EXPECT_NEAR((h.normal - Vec3(0, 0, -1)).norm(), 0.0, 1e-6);
}

TEST(SphereTrace, ParallelToWallHitsFarWall) {
  SceneSpec s;
  s.room_half_extents = Vec3(0.9, 0.6, 0.9);
  Ray r;
  r.origin = Vec3(-0.5, 0.55, 0.0);
  r.direction = Vec3::UnitX();
  r.t_far = 5;
  const TraceHit h = sphere_trace(s, r);
  ASSERT_TRUE(h.hit);
  EXPECT_NEAR(h.t, 1.4, 1e-5);
  EXPECT_NEAR((h.normal - Vec3(-1, 0, 0)).norm(), 0.0, 1e-6);
  EXPECT_EQ(h.label, SurfaceLabel::kLayout);
}

TEST(SphereTrace, GrazingRayConverges) {
  const SceneSpec s = big_room_with_unit_sphere();
  Ray r;
  r.origin = Vec3(0.999, 0, -2);
  r.direction = Vec3::UnitZ();
  r.t_far = 20;
  int limit = 0;
  const TraceHit h = sphere_trace(s, r, &limit);
  ASSERT_TRUE(h.hit);
  EXPECT_LE(h.steps, kMaxTraceSteps);
  EXPECT_EQ(limit, 0);
  EXPECT_NEAR(h.t, 2.0 - std::sqrt(1.0 - 0.999 * 0.999), 1e-2);
  EXPECT_EQ(h.label, SurfaceLabel::kObject);
}

TEST(SphereTrace, OriginInsideSolidIsRejected) {
  const SceneSpec s = big_room_with_unit_sphere();
  Ray r;
  r.origin = Vec3::Zero();
  EXPECT_THROW(sphere_trace(s, r), ContractViolation);
}

TEST(SceneSpec, Validation) {
  SceneSpec s = stock_scene("room_sphere");
  EXPECT_NO_THROW(s.validate());
  s.objects[0].center = Vec3(0.8, 0, 0);
  EXPECT_THROW(s.validate(), ContractViolation);
  s = stock_scene("room_empty");
  s.bounds_max = Vec3::Constant(1.5);
  EXPECT_THROW(s.validate(), ContractViolation);
  EXPECT_THROW(stock_scene("nope"), ContractViolation);
  EXPECT_NO_THROW(stock_scene("room_thinrods").validate());
  EXPECT_EQ(stock_scene("room_thinrods").objects.size(), 5u);
}

TEST(Cameras, PosesAreOrthonormal) {
  const SceneSpec s = stock_scene("room_sphere");
  for (int i = 0; i < 24; ++i) {
    const Pose p = ring_pose(s.cameras, i, 24);
    EXPECT_LT((p.rotation.transpose() * p.rotation - Mat3::Identity()).norm(), 1e-12);
    EXPECT_NEAR(p.rotation.determinant(), 1.0, 1e-12);
    EXPECT_GT(scene_distance(s, p.position), 0.0);
  }
  EXPECT_THROW(make_intrinsics(1, 8, 90), ContractViolation);
}

TEST(Dataset, EmptyRoomUncertaintyOnlyAtEdges) {
  const SceneSpec s = stock_scene("room_empty");
  const Intrinsics k = make_intrinsics(64, 64, s.cameras.fov_deg);
  const Frame f = render_frame(s, ring_pose(s.cameras, 3, 24), k);
  ASSERT_EQ(f.valid.sum(), 64.0 * 64.0);
  EXPECT_GE(f.uncertainty.minCoeff(), 0.0);
  EXPECT_LE(f.uncertainty.maxCoeff(), 1.0);
  EXPECT_EQ(f.uncertainty.maxCoeff(), 1.0);
  int flat = 0;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      const int p = y * 64 + x;
      bool uniform = true;
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx) {
          const int xx = x + dx, yy = y + dy;
          if (xx < 0 || yy < 0 || xx >= 64 || yy >= 64) continue;
          if ((f.normal.row(yy * 64 + xx) - f.normal.row(p)).norm() > 1e-9) uniform = false;
        }
      if (uniform) {
        EXPECT_EQ(f.uncertainty(p, 0), 0.0);
        ++flat;
      } else {
        EXPECT_GT(f.uncertainty(p, 0), 0.0);
      }
    }
  EXPECT_GT(flat, 64 * 64 / 2);
}

// Pixel area of a sphere's projection: the cone of rays tangent to the sphere
// cuts the image plane z = 1 in an ellipse whose conic matrix is
// cos^2(a) I - u u^T with u the unit direction to the center.
double projected_sphere_area(const Pose& pose, const Intrinsics& k, const Vec3& center, double radius) {
  const Vec3 c = pose.rotation.transpose() * (center - pose.position);
  const double dist = c.norm(), sin_a = radius / dist, cos2 = 1.0 - sin_a * sin_a;
  const Vec3 u = c / dist;
  const Mat3 m = cos2 * Mat3::Identity() - u * u.transpose();
  const double det2 = m.topLeftCorner<2, 2>().determinant();
  return kPi * std::abs(m.determinant()) / std::pow(det2, 1.5) * k.fx * k.fy;
}

TEST(Dataset, SphereMaskMatchesProjectedArea) {
  const SceneSpec s = stock_scene("room_sphere");
  const Intrinsics k = make_intrinsics(256, 256, s.cameras.fov_deg);
  for (int i : {0, 7}) {
    const Pose pose = ring_pose(s.cameras, i, 24);
    const Frame f = render_frame(s, pose, k);
    const double expected = projected_sphere_area(pose, k, s.objects[0].center, s.objects[0].radius);
    EXPECT_NEAR(f.mask.sum() / expected, 1.0, 0.02) << "frame " << i;
  }
}

TEST(Dataset, NoiselessPointsLieOnSurface) {
  const SceneSpec s = stock_scene("room_thinrods");
  DatasetOptions opt;
  opt.n_frames = 3;
  opt.width = opt.height = 48;
  opt.noise_sigma = 0.0;
  opt.point_stride = 2;
  const Dataset ds = generate_dataset(s, opt);
  int objects = 0;
  for (const PointCloud& pc : ds.clouds) {
    ASSERT_GT(pc.size(), 0);
    for (Eigen::Index i = 0; i < pc.size(); ++i) {
      const SdfSample q = scene_sdf(s, pc.points.row(i).transpose());
      EXPECT_LT(std::abs(q.d), 1e-4);
      objects += pc.labels[i];
    }
  }
  EXPECT_GT(objects, 0);
}

TEST(Dataset, DepthAgreesWithTracer) {
  const SceneSpec s = stock_scene("room_sphere");
  const Intrinsics k = make_intrinsics(32, 32, s.cameras.fov_deg);
  const Pose pose = ring_pose(s.cameras, 5, 24);
  const Frame f = render_frame(s, pose, k);
  for (int p = 0; p < f.pixels(); p += 7) {
    const Ray r = pixel_ray(s, pose, k, p % 32 + 0.5, p / 32 + 0.5);
    const TraceHit h = sphere_trace(s, r);
    EXPECT_EQ(f.depth(p, 0), h.t);
    EXPECT_LT(std::abs(scene_distance(s, r.at(f.depth(p, 0)))), 1e-5);
  }
}

TEST(Dataset, RejectsDegenerateInput) {
  DatasetOptions opt;
  opt.n_frames = 1;
  EXPECT_THROW(generate_dataset(stock_scene("room_empty"), opt), ContractViolation);
  opt.n_frames = 2;
  opt.width = 1;
  EXPECT_THROW(generate_dataset(stock_scene("room_empty"), opt), ContractViolation);
}

TEST(SceneSdf, EikonalAwayFromSeams) {
  const SceneSpec s = stock_scene("room_thinrods");
  Rng rng = make_stream(11);
  const Vec3 lo = s.room_center - s.room_half_extents, hi = s.room_center + s.room_half_extents;
  int checked = 0;
  while (checked < 10000) {
    Vec3 x;
    for (int k = 0; k < 3; ++k) x[k] = lo[k] + (hi[k] - lo[k]) * uniform01(rng);
    const SdfSample q = scene_sdf(s, x);
    if (q.d <= 0 || q.second - q.d < 1e-3) continue;
    const double h = 1e-6;
    Vec3 g;
    for (int k = 0; k < 3; ++k) {
      Vec3 e = Vec3::Zero();
      e[k] = h;
      g[k] = (scene_distance(s, x + e) - scene_distance(s, x - e)) / (2 * h);
    }
    EXPECT_NEAR(g.norm(), 1.0, 1e-3);
    ++checked;
  }
}

TEST(Dataset, ReproducibleFromSeed) {
  DatasetOptions opt;
  opt.n_frames = 2;
  opt.width = opt.height = 24;
  opt.seed = 9;
  const Dataset a = generate_dataset(stock_scene("room_sphere"), opt);
  const Dataset b = generate_dataset(stock_scene("room_sphere"), opt);
  for (int i = 0; i < 2; ++i) {
    EXPECT_TRUE(a.frames[i].color == b.frames[i].color);
    EXPECT_TRUE(a.frames[i].uncertainty == b.frames[i].uncertainty);
    EXPECT_TRUE(a.clouds[i].points == b.clouds[i].points);
  }
  opt.seed = 10;
  const Dataset c = generate_dataset(stock_scene("room_sphere"), opt);
  EXPECT_FALSE(a.clouds[0].points == c.clouds[0].points);
}

class SceneIo : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("h2osdf_scene_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    std::filesystem::remove_all(dir_);
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::filesystem::path dir_;
};

TEST_F(SceneIo, SpecJsonRoundTrip) {
  const SceneSpec s = stock_scene("room_thinrods");
  write_json(dir_ / "s.json", scene_to_json(s));
  const SceneSpec t = load_scene(dir_ / "s.json");
  EXPECT_EQ(scene_to_json(t), scene_to_json(s));
  EXPECT_EQ(t.objects[1].type, PrimitiveType::kCapsule);
  EXPECT_EQ(t.objects[1].a, s.objects[1].a);
}

TEST_F(SceneIo, BufferRoundTrip) {
  Rng rng = make_stream(12);
  const Matrix m = testing::random_matrix(rng, 12, 3);
  write_raw_f32(dir_ / "b.f32", m, 4, 3);
  const Matrix back = read_raw_f32(dir_ / "b.f32");
  ASSERT_EQ(back.rows(), 12);
  EXPECT_LT((back - m).cwiseAbs().maxCoeff(), 1e-7);
  EXPECT_EQ(std::filesystem::file_size(dir_ / "b.f32"), 12u * 3u * 4u);
}

TEST_F(SceneIo, DatasetRoundTrip) {
  DatasetOptions opt;
  opt.n_frames = 2;
  opt.width = 20;
  opt.height = 16;
  const Dataset ds = generate_dataset(stock_scene("room_sphere"), opt);
  write_dataset(ds, dir_);
  const Dataset back = load_dataset(dir_);
  ASSERT_EQ(back.frames.size(), 2u);
  for (int i = 0; i < 2; ++i) {
    EXPECT_LT((back.frames[i].color - ds.frames[i].color).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((back.frames[i].depth - ds.frames[i].depth).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_TRUE(back.frames[i].mask == ds.frames[i].mask);
    EXPECT_LT((back.frames[i].pose.rotation - ds.frames[i].pose.rotation).norm(), 1e-12);
    EXPECT_EQ(back.frames[i].intrinsics.fx, ds.frames[i].intrinsics.fx);
    EXPECT_EQ(back.clouds[i].labels, ds.clouds[i].labels);
    EXPECT_LT((back.clouds[i].points - ds.clouds[i].points).cwiseAbs().maxCoeff(), 1e-8);
  }
}

}  // namespace
}  // namespace h2o

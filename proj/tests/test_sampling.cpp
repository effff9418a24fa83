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

#include <algorithm>
#include <vector>

#include "h2osdf/sampling.hpp"
#include "h2osdf/scene.hpp"
#include "test_common.hpp"

namespace h2o {
namespace {

Ray unit_ray() {
  Ray r;
  r.t_near = 0.0;
  r.t_far = 1.0;
  return r;
}

TEST(Stratified, MidpointJitter) {
  const std::vector<double> t = stratified_samples(unit_ray(), 4, [] { return 0.5; });
  const std::vector<double> expected{0.125, 0.375, 0.625, 0.875};
  EXPECT_EQ(t, expected);
}

TEST(Stratified, SamplesStayInTheirBins) {
  Rng rng = make_stream(1);
  Ray r;
  r.t_near = 0.3;
  r.t_far = 2.1;
  for (int trial = 0; trial < 10000; ++trial) {
    const int n = 2 + trial % 9;
    const std::vector<double> t = stratified_samples(r, n, rng);
    const double width = (r.t_far - r.t_near) / n;
    EXPECT_TRUE(std::is_sorted(t.begin(), t.end()));
    for (int i = 0; i < n; ++i) {
      EXPECT_GE(t[i], r.t_near + i * width - 1e-12);
      EXPECT_LE(t[i], r.t_near + (i + 1) * width + 1e-12);
    }
  }
}

TEST(Stratified, RejectsTooFewSamples) {
  Rng rng = make_stream(0);
  EXPECT_THROW(stratified_samples(unit_ray(), 1, rng), ContractViolation);
}

TEST(Importance, ConcentratedMass) {
  Rng rng = make_stream(2);
  const std::vector<double> bins{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  const std::vector<double> mass{0.0, 0.0, 1.0, 0.0, 0.0};
  const std::vector<double> s = sample_piecewise(bins, mass, 200, rng);
  for (double t : s) {
    EXPECT_GE(t, 0.4);
    EXPECT_LE(t, 0.6);
  }
}

TEST(Importance, UniformMassPassesChiSquare) {
  Rng rng = make_stream(3);
  std::vector<double> bins(11);
  for (int i = 0; i <= 10; ++i) bins[i] = i / 10.0;
  const std::vector<double> mass(10, 1.0);
  const int n = 100000;
  const std::vector<double> s = sample_piecewise(bins, mass, n, rng);
  std::vector<int> counts(10, 0);
  for (double t : s) ++counts[std::min(9, static_cast<int>(t * 10))];
  double chi2 = 0;
  for (int c : counts) chi2 += (c - n / 10.0) * (c - n / 10.0) / (n / 10.0);
  // 99th percentile of chi-square with 9 degrees of freedom.
  EXPECT_LT(chi2, 21.666);
}

TEST(Importance, OneToThreeMass) {
  Rng rng = make_stream(4);
  const std::vector<double> bins{0.0, 0.5, 1.0};
  const std::vector<double> mass{1.0, 3.0};
  const int n = 100000;
  const std::vector<double> s = sample_piecewise(bins, mass, n, rng);
  const double frac = std::count_if(s.begin(), s.end(), [](double t) { return t >= 0.5; }) / static_cast<double>(n);
  EXPECT_NEAR(frac, 0.75, 0.01);
}

TEST(Importance, AllZeroMassFallsBackToIntervalUniform) {
  Rng rng = make_stream(5);
  const std::vector<double> bins{0.0, 0.25, 0.5, 0.75, 1.0};
  const std::vector<double> mass(4, 0.0);
  const std::vector<double> s = sample_piecewise(bins, mass, 40000, rng);
  std::vector<int> counts(4, 0);
  for (double t : s) ++counts[std::min(3, static_cast<int>(t * 4))];
  for (int c : counts) EXPECT_NEAR(c / 40000.0, 0.25, 0.01);
}

TEST(Importance, MergedAndSorted) {
  Rng rng = make_stream(6);
  const std::vector<double> bins{0.0, 0.3, 0.7, 1.0};
  const std::vector<double> mass{0.2, 0.5, 0.3};
  const std::vector<double> merged = importance_resample(bins, mass, 16, rng);
  EXPECT_EQ(merged.size(), 20u);
  EXPECT_TRUE(std::is_sorted(merged.begin(), merged.end()));
  for (double b : bins) EXPECT_NE(std::find(merged.begin(), merged.end(), b), merged.end());
}

TEST(Importance, RejectsMismatchedMass) {
  Rng rng = make_stream(7);
  const std::vector<double> bins{0.0, 1.0};
  const std::vector<double> mass{0.5, 0.5};
  EXPECT_THROW(sample_piecewise(bins, mass, 4, rng), ContractViolation);
}

// Histogram over fine bins against the piecewise-uniform target density.
TEST(Importance, TotalVariationToTarget) {
  Rng rng = make_stream(8);
  const std::vector<double> bins{0.0, 0.1, 0.15, 0.4, 0.45, 0.8, 1.0};
  const std::vector<double> mass{0.05, 0.4, 0.1, 0.3, 0.05, 0.1};
  const int n = 100000, fine = 200;
  const std::vector<double> s = sample_piecewise(bins, mass, n, rng);
  std::vector<double> hist(fine, 0.0), target(fine, 0.0);
  for (double t : s) hist[std::min(fine - 1, static_cast<int>(t * fine))] += 1.0 / n;
  for (int k = 0; k < fine; ++k) {
    const double a = static_cast<double>(k) / fine, b = static_cast<double>(k + 1) / fine;
    for (std::size_t i = 0; i < mass.size(); ++i) {
      const double lo = std::max(a, bins[i]), hi = std::min(b, bins[i + 1]);
      if (hi > lo) target[k] += mass[i] * (hi - lo) / (bins[i + 1] - bins[i]);
    }
  }
  double tv = 0;
  for (int k = 0; k < fine; ++k) tv += 0.5 * std::abs(hist[k] - target[k]);
  EXPECT_LT(tv, 0.05);
}

FieldProbe sphere_probe(double osf_value) {
  return [osf_value](const Matrix& x, Matrix& d, Matrix* osf) {
    d.resize(x.rows(), 1);
    for (Eigen::Index i = 0; i < x.rows(); ++i) d(i, 0) = x.row(i).norm() - 0.4;
    if (osf) *osf = Matrix::Constant(x.rows(), 1, osf_value);
  };
}

std::vector<Ray> fan_of_rays(int n) {
  std::vector<Ray> rays(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    rays[i].origin = Vec3(0.0, 0.0, -1.5);
    rays[i].direction = Vec3(0.05 * (i - n / 2), 0.03 * i, 1.0).normalized();
    rays[i].t_near = 0.1;
    rays[i].t_far = 3.0;
  }
  return rays;
}

TEST(SampleRays, UnitOsfMatchesDensityBitExactly) {
  const std::vector<Ray> rays = fan_of_rays(8);
  SamplingConfig density;
  SamplingConfig guided = density;
  guided.mode = SamplingMode::kOsfGuided;
  const Matrix a = sample_rays(rays, sphere_probe(1.0), density, 42, 3);
  const Matrix b = sample_rays(rays, sphere_probe(1.0), guided, 42, 3);
  EXPECT_EQ(a.cols(), density.total_samples());
  EXPECT_TRUE((a.array() == b.array()).all());
}

TEST(SampleRays, ZeroOsfStillSamplesInsideRange) {
  const std::vector<Ray> rays = fan_of_rays(4);
  SamplingConfig guided;
  guided.mode = SamplingMode::kOsfGuided;
  const Matrix t = sample_rays(rays, sphere_probe(0.0), guided, 1, 0);
  for (Eigen::Index r = 0; r < t.rows(); ++r) {
    EXPECT_GE(t.row(r).minCoeff(), rays[r].t_near);
    EXPECT_LE(t.row(r).maxCoeff(), rays[r].t_far);
    for (Eigen::Index i = 1; i < t.cols(); ++i) EXPECT_LE(t(r, i - 1), t(r, i));
  }
}

TEST(SampleRays, DensityModeConcentratesAtSurface) {
  const std::vector<Ray> rays = fan_of_rays(1);
  SamplingConfig cfg;
  const Matrix t = sample_rays(rays, sphere_probe(1.0), cfg, 5, 0);
  int near = 0;
  for (Eigen::Index i = 0; i < t.cols(); ++i) near += std::abs(t(0, i) - 1.1) < 0.05;
  EXPECT_GE(near, cfg.n_rounds * cfg.n_importance_per_round / 2);
}

TEST(SampleRays, DeterministicPerRayStreams) {
  const std::vector<Ray> rays = fan_of_rays(6);
  SamplingConfig cfg;
  const Matrix a = sample_rays(rays, sphere_probe(1.0), cfg, 9, 2);
  const std::vector<Ray> one(rays.begin() + 4, rays.begin() + 5);
  const std::vector<std::uint64_t> ids{4};
  const Matrix b = sample_rays(one, sphere_probe(1.0), cfg, 9, 2, ids);
  EXPECT_TRUE((a.row(4).array() == b.row(0).array()).all());
}

TEST(SampleRays, SamplerRecordsNothingOnATape) {
  const NetworkParams p = init_network(testing::small_config(), 1);
  const std::vector<Ray> rays = fan_of_rays(3);
  SamplingConfig cfg;
  cfg.mode = SamplingMode::kOsfGuided;
  Tape t;
  Var sv = s_value(t, p);
  const int before = t.size();
  const Matrix tv = sample_rays(rays, network_probe(p), cfg, 0, 0);
  EXPECT_EQ(t.size(), before);
  t.backward(sv);
  EXPECT_EQ(tv.cols(), cfg.total_samples());
}

// Ray that grazes a rod and ends on the floor: with the analytic fields and
// the object label as osf, guided sampling puts more samples near the rod.
TEST(SampleRays, GuidedSamplingFavorsThinRod) {
  const SceneSpec spec = stock_scene("room_thinrods");
  const Primitive* rod = nullptr;
  for (const Primitive& p : spec.objects)
    if (p.type == PrimitiveType::kCapsule) {
      rod = &p;
      break;
    }
  ASSERT_NE(rod, nullptr);
  const Vec3 mid = 0.5 * (rod->a + rod->b);
  const Vec3 target = mid + Vec3(rod->radius + 0.01, 0.0, 0.0);
  Ray ray;
  ray.origin = Vec3(0.0, 0.2, -0.8);
  ray.direction = (target - ray.origin).normalized();
  ray.t_near = 0.02;
  ray.t_far = 3.0;
  FieldProbe probe = [&spec](const Matrix& x, Matrix& d, Matrix* osf) {
    d.resize(x.rows(), 1);
    if (osf) osf->resize(x.rows(), 1);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const SdfSample s = scene_sdf(spec, x.row(i).transpose());
      d(i, 0) = s.d;
      if (osf) (*osf)(i, 0) = s.label == SurfaceLabel::kObject ? 1.0 : 0.0;
    }
  };
  SamplingConfig density;
  density.n_uniform = 32;
  density.n_rounds = 2;
  density.s_coarse = {16.0, 64.0};
  SamplingConfig guided = density;
  guided.mode = SamplingMode::kOsfGuided;
  auto near_rod = [&](const std::vector<double>& t) {
    int n = 0;
    for (double tv : t) n += std::abs(primitive_sdf(*rod, ray.at(tv))) < 0.05;
    return n;
  };
  int nd = 0, ng = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    nd += near_rod(osf_guided_samples(ray, probe, density, seed));
    ng += near_rod(osf_guided_samples(ray, probe, guided, seed));
  }
  EXPECT_GT(ng, nd);
}

TEST(SamplingConfig, JsonRoundTripAndValidation) {
  SamplingConfig c;
  c.n_uniform = 12;
  c.mode = SamplingMode::kOsfGuided;
  c.s_coarse = {4.0, 9.0};
  const SamplingConfig back = nlohmann::json(c).get<SamplingConfig>();
  EXPECT_EQ(back.n_uniform, 12);
  EXPECT_EQ(back.mode, SamplingMode::kOsfGuided);
  EXPECT_EQ(back.s_coarse, c.s_coarse);
  EXPECT_EQ(back.coarse_s(5), 9.0);
  c.n_uniform = 1;
  EXPECT_THROW(c.validate(), ContractViolation);
}

}  // namespace
}  // namespace h2o

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
#include <fstream>

#include "h2osdf/analysis.hpp"
#include "h2osdf/cli.hpp"

namespace h2o {
namespace {

TEST(DensityGradient, PeakValue) {
  EXPECT_EQ(density_gradient(10.0, 0.0), 25.0);
  for (double s : {1.0, 10.0, 64.0, 300.0}) {
    const CurveSeries c = density_gradient_curve(s, -1.0, 1.0, 2001);
    const auto it = std::max_element(c.y.begin(), c.y.end());
    EXPECT_EQ(c.x[static_cast<std::size_t>(it - c.y.begin())], 0.0);
    EXPECT_NEAR(*it, s * s / 4.0, 1e-9);
  }
}

TEST(DensityGradient, MatchesDirectFormulaAndIsEven) {
  const CurveSeries c = density_gradient_curve(10.0, -0.5, 0.5, 101);
  for (std::size_t i = 0; i < c.x.size(); ++i) {
    const double e = std::exp(10.0 * c.x[i]);
    EXPECT_NEAR(c.y[i], 100.0 * e / ((e + 1) * (e + 1)), 1e-12);
    EXPECT_NEAR(density_gradient(10.0, -c.x[i]), c.y[i], 1e-13);
  }
}

TEST(DensityGradient, HalfWidthHalvesWhenSDoubles) {
  const CurveSeries c10 = density_gradient_curve(10.0, -1.0, 1.0, 4001);
  const CurveSeries c20 = density_gradient_curve(20.0, -1.0, 1.0, 4001);
  const double step = c10.x[1] - c10.x[0];
  EXPECT_NEAR(full_width_half_max(c20), full_width_half_max(c10) / 2.0, step);
  // 2 ln(3 + 2 sqrt 2) / s is the exact width of the half-maximum region.
  EXPECT_NEAR(full_width_half_max(c10), 2.0 * std::log(3.0 + 2.0 * std::sqrt(2.0)) / 10.0, 2 * step);
}

TEST(DensityGradient, IntegralMatchesSigmoidDifference) {
  for (double s : {5.0, 10.0, 40.0}) {
    const CurveSeries c = density_gradient_curve(s, -0.4, 0.4, 200001);
    EXPECT_NEAR(integrate(c), s * (2.0 * sigmoid(s * 0.4) - 1.0), 1e-6);
  }
}

TEST(DensityGradient, NoOverflowAtLargeArguments) {
  for (double sd : {-700.0, -350.0, 350.0, 700.0}) {
    const double y = density_gradient(1000.0, sd / 1000.0);
    EXPECT_TRUE(std::isfinite(y));
    EXPECT_GE(y, 0.0);
  }
  const CurveSeries c = density_gradient_curve(1400.0, -0.5, 0.5, 11);
  for (double y : c.y) EXPECT_TRUE(std::isfinite(y));
  EXPECT_THROW(density_gradient_curve(0.0, -1, 1, 10), ContractViolation);
  EXPECT_THROW(density_gradient_curve(1.0, 1, -1, 10), ContractViolation);
}

TEST(RayProfile, OracleRaySphereCenter) {
  const SceneSpec spec = stock_scene("room_sphere");
  const Vec3 c = spec.objects[0].center;
  Ray ray;
  ray.origin = Vec3(0.8, c[1], c[2]);
  ray.direction = -Vec3::UnitX();
  ray.t_near = 0.02;
  ray.t_far = 1.6;
  const RayProfile p = ray_profile(cli::oracle_field(spec), 200.0, 20.0, ray, 512);
  ASSERT_EQ(p.t.size(), 512u);
  std::vector<std::size_t> crossings;
  for (std::size_t i = 0; i + 1 < p.d.size(); ++i)
    if ((p.d[i] > 0) != (p.d[i + 1] > 0)) crossings.push_back(i);
  ASSERT_EQ(crossings.size(), 2u);
  EXPECT_NEAR(p.t[crossings[0]], 0.8 - spec.objects[0].radius, 2 * (p.t[1] - p.t[0]));
  const std::size_t peak = static_cast<std::size_t>(std::max_element(p.w.begin(), p.w.end()) - p.w.begin());
  EXPECT_LE(std::abs(static_cast<long>(peak) - static_cast<long>(crossings[0])), 2);
  for (std::size_t i = 1; i < p.T.size(); ++i) EXPECT_LE(p.T[i], p.T[i - 1]);
  for (std::size_t i = 0; i < p.t.size(); ++i) {
    if (i > crossings[0] && i <= crossings[1]) {
      EXPECT_EQ(p.osf[i], 1.0);
    }
    EXPECT_EQ(p.sigma[i], scaled_sigmoid(p.d[i], 20.0));
  }
}

TEST(RayProfile, Csv) {
  const SceneSpec spec = stock_scene("room_empty");
  Ray ray;
  ray.origin = Vec3::Zero();
  ray.direction = Vec3::UnitX();
  ray.t_near = 0.0;
  ray.t_far = 0.95;
  const RayProfile p = ray_profile(cli::oracle_field(spec), 50.0, 20.0, ray, 16);
  for (double o : p.osf) EXPECT_EQ(o, 0.0);
  const auto path = std::filesystem::temp_directory_path() / "h2osdf_profile.csv";
  write_profile_csv(path, p);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "t,d,sigma_gamma,osf,w,T");
  int rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  EXPECT_EQ(rows, 16);
  std::filesystem::remove(path);
  EXPECT_THROW(ray_profile(cli::oracle_field(spec), 0.0, 20.0, ray), ContractViolation);
}

TEST(SCurve, ExportFollowsLog) {
  EXPECT_THROW(s_curve_export({}), ContractViolation);
  LogRow r0;
  r0.inv_s = 1.0 / 20.0;
  const CurveSeries one = s_curve_export({r0});
  ASSERT_EQ(one.x.size(), 1u);
  EXPECT_EQ(one.x[0], 0.0);
  EXPECT_EQ(one.y[0], 0.05);
  std::vector<LogRow> log;
  for (int i = 0; i < 5; ++i) {
    LogRow r;
    r.iteration = 50 * i;
    r.inv_s = 0.05 / (1 + i);
    log.push_back(r);
  }
  const CurveSeries c = s_curve_export(log);
  ASSERT_EQ(c.x.size(), 5u);
  EXPECT_EQ(c.x[4], 200.0);
  EXPECT_EQ(c.y[4], 0.01);
}

}  // namespace
}  // namespace h2o

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

// Diagnostic curves: the density-gradient peak, per-ray field profiles and
// the 1/s convergence series.

#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "h2osdf/core.hpp"
#include "h2osdf/losses.hpp"
#include "h2osdf/meshing.hpp"
#include "h2osdf/rendering.hpp"

namespace h2o {

struct CurveSeries {
  std::vector<double> x;
  std::vector<double> y;
  std::string label;
  std::string x_name = "x";
  std::string y_name = "y";
  double parameter = 0.0;  ///< s or gamma the curve was produced with
};

/// s^2 e^{sd} / (e^{sd} + 1)^2, evaluated as s^2 sigma(sd) sigma(-sd).
inline double density_gradient(double s, double d) { return s * s * sigmoid(s * d) * sigmoid(-s * d); }

inline CurveSeries density_gradient_curve(double s, double d_min, double d_max, int n_points) {
  require(s > 0, "density_gradient_curve: s must be positive");
  require(n_points >= 2 && d_max > d_min, "density_gradient_curve: bad range");
  CurveSeries c;
  c.label = "drho_dd";
  c.x_name = "d";
  c.y_name = "drho_dd";
  c.parameter = s;
  c.x.resize(n_points);
  c.y.resize(n_points);
  for (int i = 0; i < n_points; ++i) {
    c.x[i] = d_min + (d_max - d_min) * i / (n_points - 1);
    c.y[i] = density_gradient(s, c.x[i]);
  }
  return c;
}

/// Width of the region where y >= max(y) / 2, with both half-maximum
/// crossings located by linear interpolation between grid points.
inline double full_width_half_max(const CurveSeries& c) {
  require(!c.y.empty(), "full_width_half_max: empty curve");
  const double half = *std::max_element(c.y.begin(), c.y.end()) / 2.0;
  std::size_t lo = c.y.size(), hi = 0;
  for (std::size_t i = 0; i < c.y.size(); ++i)
    if (c.y[i] >= half) {
      lo = std::min(lo, i);
      hi = std::max(hi, i);
    }
  auto crossing = [&](std::size_t in, std::size_t out) {
    const double f = (c.y[in] - half) / (c.y[in] - c.y[out]);
    return c.x[in] + f * (c.x[out] - c.x[in]);
  };
  const double left = lo > 0 ? crossing(lo, lo - 1) : c.x[lo];
  const double right = hi + 1 < c.y.size() ? crossing(hi, hi + 1) : c.x[hi];
  return right - left;
}

/// Trapezoid rule over the curve.
inline double integrate(const CurveSeries& c) {
  double s = 0;
  for (std::size_t i = 1; i < c.x.size(); ++i) s += 0.5 * (c.y[i] + c.y[i - 1]) * (c.x[i] - c.x[i - 1]);
  return s;
}

inline void write_curve_csv(const std::filesystem::path& path, const CurveSeries& c) {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path.string());
  out.precision(17);
  out << c.x_name << "," << c.y_name << "\n";
  for (std::size_t i = 0; i < c.x.size(); ++i) out << c.x[i] << "," << c.y[i] << "\n";
}

// ---------------------------------------------------------------------------
// Ray profiles

/// Dense per-sample table along one ray. w and T are interval quantities
/// attached to the interval's first sample; the last row carries w = 0.
struct RayProfile {
  std::vector<double> t, d, sigma, osf, w, T;
};

inline RayProfile ray_profile(const LatticeField& field, double s, double gamma, const Ray& ray, int n = 512) {
  ray.validate();
  require(n >= 2, "ray_profile: need at least two samples");
  require(s > 0 && gamma > 0, "ray_profile: s and gamma must be positive");
  RayProfile p;
  Matrix x(n, 3);
  for (int i = 0; i < n; ++i) {
    const double t = ray.t_near + (ray.t_far - ray.t_near) * i / (n - 1);
    p.t.push_back(t);
    x.row(i) = ray.at(t).transpose();
  }
  Matrix d, o;
  field(x, d, &o);
  const Matrix alpha = neus_alpha_batch(d, s, n);
  Matrix T;
  const Matrix w = weights_batch(alpha, n - 1, &T);
  for (int i = 0; i < n; ++i) {
    p.d.push_back(d(i, 0));
    p.sigma.push_back(scaled_sigmoid(d(i, 0), gamma));
    p.osf.push_back(o(i, 0));
    p.w.push_back(i < n - 1 ? w(i, 0) : 0.0);
    p.T.push_back(i < n - 1 ? T(i, 0) : T(n - 2, 0) * (1.0 - alpha(n - 2, 0)));
  }
  return p;
}

inline void write_profile_csv(const std::filesystem::path& path, const RayProfile& p) {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path.string());
  out.precision(17);
  out << "t,d,sigma_gamma,osf,w,T\n";
  for (std::size_t i = 0; i < p.t.size(); ++i)
    out << p.t[i] << "," << p.d[i] << "," << p.sigma[i] << "," << p.osf[i] << "," << p.w[i] << "," << p.T[i] << "\n";
}

// ---------------------------------------------------------------------------
// 1/s series

struct LogRow {
  long iteration = 0;
  double L_c = 0, L_n = 0, L_eik = 0, L_2d = 0, L_3d = 0, L_ref = 0, total = 0, inv_s = 0;
};

inline CurveSeries s_curve_export(const std::vector<LogRow>& log) {
  require(!log.empty(), "s_curve_export: empty log");
  CurveSeries c;
  c.label = "inv_s";
  c.x_name = "iteration";
  c.y_name = "inv_s";
  for (const LogRow& r : log) {
    c.x.push_back(static_cast<double>(r.iteration));
    c.y.push_back(r.inv_s);
  }
  return c;
}

}  // namespace h2o

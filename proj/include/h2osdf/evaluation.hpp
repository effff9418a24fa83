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

// 3D reconstruction metrics between surface point samples and normal-angle
// metrics between normal maps.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "h2osdf/core.hpp"
#include "h2osdf/meshing.hpp"

namespace h2o {

/// Area-weighted uniform samples on the mesh surface (n x 3).
inline Matrix sample_points_from_mesh(const Mesh& mesh, int n, Rng& rng) {
  require(n > 0, "sample_points_from_mesh: n must be positive");
  if (mesh.empty()) return Matrix(0, 3);
  std::vector<double> cdf(mesh.triangles.size());
  double acc = 0;
  for (std::size_t i = 0; i < mesh.triangles.size(); ++i) {
    acc += mesh.triangle_area(i);
    cdf[i] = acc;
  }
  require(acc > 0, "sample_points_from_mesh: mesh has zero area");
  Matrix out(n, 3);
  for (int k = 0; k < n; ++k) {
    const double u = uniform01(rng) * acc;
    const std::size_t i = std::min<std::size_t>(
        static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin()), cdf.size() - 1);
    double r1 = uniform01(rng), r2 = uniform01(rng);
    if (r1 + r2 > 1.0) {
      r1 = 1.0 - r1;
      r2 = 1.0 - r2;
    }
    const auto& t = mesh.triangles[i];
    const Vec3& a = mesh.vertices[t[0]];
    out.row(k) = (a + r1 * (mesh.vertices[t[1]] - a) + r2 * (mesh.vertices[t[2]] - a)).transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nearest neighbours

namespace detail {

inline double squared_distance(const Matrix& a, Eigen::Index i, const Matrix& b, Eigen::Index j) {
  const double dx = a(i, 0) - b(j, 0), dy = a(i, 1) - b(j, 1), dz = a(i, 2) - b(j, 2);
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace detail

/// Exact nearest-neighbour distances by exhaustive search.
inline std::vector<double> nn_distances_brute(const Matrix& query, const Matrix& ref) {
  std::vector<double> out(static_cast<std::size_t>(query.rows()));
  for (Eigen::Index i = 0; i < query.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < ref.rows(); ++j) best = std::min(best, detail::squared_distance(query, i, ref, j));
    out[static_cast<std::size_t>(i)] = std::sqrt(best);
  }
  return out;
}

/// Uniform hash grid over reference points. Queries search expanding shells
/// of cells until no unvisited cell can hold a closer point, so results are
/// exact and identical to the exhaustive search.
class PointGrid {
 public:
  PointGrid(const Matrix& points, double cell) : points_(points), cell_(cell) {
    require(cell > 0, "PointGrid: cell size must be positive");
    for (Eigen::Index i = 0; i < points.rows(); ++i) buckets_[key(coord(points.row(i)))].push_back(i);
    if (points.rows() > 0) {
      lo_ = coord(points.row(0));
      hi_ = lo_;
      for (Eigen::Index i = 1; i < points.rows(); ++i) {
        const auto c = coord(points.row(i));
        for (int k = 0; k < 3; ++k) {
          lo_[k] = std::min(lo_[k], c[k]);
          hi_[k] = std::max(hi_[k], c[k]);
        }
      }
    }
  }

  double nearest(const Matrix& query, Eigen::Index i) const {
    const Eigen::RowVector3d q = query.row(i);
    if (points_.rows() == 0) return std::numeric_limits<double>::infinity();
    const auto c = coord(q);
    double best2 = std::numeric_limits<double>::infinity();
    long max_ring = 0;
    for (int k = 0; k < 3; ++k) max_ring = std::max({max_ring, std::abs(c[k] - lo_[k]), std::abs(c[k] - hi_[k])});
    for (long r = 0; r <= max_ring; ++r) {
      // Every point in ring r is at least (r - 1) * cell away.
      if (r > 0) {
        const double bound = (r - 1) * cell_;
        if (bound * bound > best2) break;
      }
      for (long dz = -r; dz <= r; ++dz)
        for (long dy = -r; dy <= r; ++dy)
          for (long dx = -r; dx <= r; ++dx) {
            if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != r) continue;
            auto it = buckets_.find(key({c[0] + dx, c[1] + dy, c[2] + dz}));
            if (it == buckets_.end()) continue;
            for (Eigen::Index j : it->second) best2 = std::min(best2, detail::squared_distance(query, i, points_, j));
          }
    }
    return std::sqrt(best2);
  }

 private:
  using Cell = std::array<long, 3>;

  Cell coord(const Eigen::RowVector3d& p) const {
    return {static_cast<long>(std::floor(p[0] / cell_)), static_cast<long>(std::floor(p[1] / cell_)),
            static_cast<long>(std::floor(p[2] / cell_))};
  }
  static std::uint64_t key(const Cell& c) {
    const auto u = [](long v) { return static_cast<std::uint64_t>(v + (1L << 20)) & 0x1fffffULL; };
    return u(c[0]) | (u(c[1]) << 21) | (u(c[2]) << 42);
  }

  const Matrix& points_;
  double cell_;
  Cell lo_{}, hi_{};
  std::unordered_map<std::uint64_t, std::vector<Eigen::Index>> buckets_;
};

inline std::vector<double> nn_distances_grid(const Matrix& query, const Matrix& ref, double cell) {
  PointGrid grid(ref, cell);
  std::vector<double> out(static_cast<std::size_t>(query.rows()));
  for (Eigen::Index i = 0; i < query.rows(); ++i) out[static_cast<std::size_t>(i)] = grid.nearest(query, i);
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricsReport {
  bool valid = true;  ///< false when a point set was empty
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  double completeness = std::numeric_limits<double>::quiet_NaN();
  double precision = std::numeric_limits<double>::quiet_NaN();
  double recall = std::numeric_limits<double>::quiet_NaN();
  double f_score = std::numeric_limits<double>::quiet_NaN();
  double tau = 0.05;

  bool has_normals = false;
  double normal_mean = std::numeric_limits<double>::quiet_NaN();
  double normal_median = std::numeric_limits<double>::quiet_NaN();
  double normal_rmse = std::numeric_limits<double>::quiet_NaN();
  std::map<double, double> pct_below;
  long excluded_pixels = 0;
};

inline double f_score(double precision, double recall) {
  return precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

enum class NeighborSearch { kGrid, kBruteForce };

inline MetricsReport reconstruction_metrics(const Matrix& pred, const Matrix& gt, double tau = 0.05,
                                            NeighborSearch search = NeighborSearch::kGrid) {
  require(tau > 0, "reconstruction_metrics: tau must be positive");
  MetricsReport r;
  r.tau = tau;
  if (pred.rows() == 0 || gt.rows() == 0) {
    r.valid = false;
    return r;
  }
  const auto d_pred = search == NeighborSearch::kGrid ? nn_distances_grid(pred, gt, tau) : nn_distances_brute(pred, gt);
  const auto d_gt = search == NeighborSearch::kGrid ? nn_distances_grid(gt, pred, tau) : nn_distances_brute(gt, pred);
  auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  auto frac_below = [tau](const std::vector<double>& v) {
    std::size_t c = 0;
    for (double x : v) c += x < tau ? 1 : 0;
    return static_cast<double>(c) / static_cast<double>(v.size());
  };
  r.accuracy = mean(d_pred);
  r.completeness = mean(d_gt);
  r.precision = frac_below(d_pred);
  r.recall = frac_below(d_gt);
  r.f_score = f_score(r.precision, r.recall);
  return r;
}

/// Angles in degrees between normal rows with |n . n*| (antiparallel counts
/// as aligned). Rows with mask 0 or a zero-norm normal are skipped.
inline std::vector<double> normal_angles(const Matrix& pred, const Matrix& gt, const Matrix& mask, long* excluded) {
  require(pred.rows() == gt.rows() && pred.rows() == mask.rows(), "normal_metrics: size mismatch");
  require(pred.cols() == 3 && gt.cols() == 3, "normal_metrics: normals must have 3 columns");
  std::vector<double> out;
  long skipped = 0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    if (mask(i, 0) == 0) continue;
    const Vec3 a = pred.row(i).transpose(), b = gt.row(i).transpose();
    if (a.squaredNorm() == 0 || b.squaredNorm() == 0) {
      ++skipped;
      continue;
    }
    out.push_back(std::atan2(a.cross(b).norm(), std::abs(a.dot(b))) * 180.0 / kPi);
  }
  if (excluded) *excluded = skipped;
  return out;
}

inline void normal_metrics(const Matrix& pred, const Matrix& gt, const Matrix& mask, MetricsReport& r,
                           const std::vector<double>& thresholds = {11.25, 22.5, 30.0}) {
  std::vector<double> ang = normal_angles(pred, gt, mask, &r.excluded_pixels);
  r.has_normals = true;
  if (ang.empty()) return;
  double s = 0, s2 = 0;
  for (double a : ang) {
    s += a;
    s2 += a * a;
  }
  const double n = static_cast<double>(ang.size());
  r.normal_mean = s / n;
  r.normal_rmse = std::sqrt(s2 / n);
  std::sort(ang.begin(), ang.end());
  const std::size_t m = ang.size() / 2;
  r.normal_median = ang.size() % 2 ? ang[m] : 0.5 * (ang[m - 1] + ang[m]);
  for (double t : thresholds) {
    const auto below = static_cast<double>(std::lower_bound(ang.begin(), ang.end(), t) - ang.begin());
    r.pct_below[t] = below / n;
  }
}

inline nlohmann::json report_json(const MetricsReport& r) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  nlohmann::json j = {{"valid", r.valid},
                      {"tau", r.tau},
                      {"accuracy", num(r.accuracy)},
                      {"completeness", num(r.completeness)},
                      {"precision", num(r.precision)},
                      {"recall", num(r.recall)},
                      {"f_score", num(r.f_score)}};
  if (r.has_normals) {
    nlohmann::json pct = nlohmann::json::object();
    for (const auto& [t, v] : r.pct_below) {
      std::ostringstream k;
      k << t;
      pct[k.str()] = v;
    }
    j["normal"] = {{"mean_deg", num(r.normal_mean)},
                   {"median_deg", num(r.normal_median)},
                   {"rmse_deg", num(r.normal_rmse)},
                   {"pct_below", pct},
                   {"excluded_pixels", r.excluded_pixels}};
  }
  return j;
}

/// One CSV row: label,acc,comp,prec,recall,fscore,normal_mean,normal_median,normal_rmse,pct11,pct22,pct30.
inline void append_report_csv(const std::filesystem::path& path, const std::string& label, const MetricsReport& r) {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream out(path, std::ios::app);
  require(out.good(), "cannot write " + path.string());
  if (fresh) out << "label,accuracy,completeness,precision,recall,f_score,normal_mean,normal_median,normal_rmse,"
                    "pct_11.25,pct_22.5,pct_30\n";
  auto pct = [&r](double t) {
    auto it = r.pct_below.find(t);
    return it == r.pct_below.end() ? std::numeric_limits<double>::quiet_NaN() : it->second;
  };
  out << label << "," << r.accuracy << "," << r.completeness << "," << r.precision << "," << r.recall << ","
      << r.f_score << "," << r.normal_mean << "," << r.normal_median << "," << r.normal_rmse << "," << pct(11.25)
      << "," << pct(22.5) << "," << pct(30.0) << "\n";
}

}  // namespace h2o

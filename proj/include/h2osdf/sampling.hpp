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

// Sample placement along rays. Nothing here touches a tape: the sampler only
// sees plain field values, so no gradient can flow through sample positions.

#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "h2osdf/core.hpp"
#include "h2osdf/rendering.hpp"

namespace h2o {

enum class SamplingMode { kDensity, kOsfGuided };

inline std::string to_string(SamplingMode m) { return m == SamplingMode::kDensity ? "density" : "osf_guided"; }

inline SamplingMode sampling_mode_from_string(const std::string& s) {
  if (s == "density") return SamplingMode::kDensity;
  if (s == "osf_guided") return SamplingMode::kOsfGuided;
  throw ContractViolation("unknown sampling mode '" + s + "'");
}

struct SamplingConfig {
  int n_uniform = 64;
  int n_importance_per_round = 16;
  int n_rounds = 4;
  SamplingMode mode = SamplingMode::kDensity;
  double pdf_floor_relative = 1e-5;  ///< floor = rel * mean(mass) + abs
  double pdf_floor_absolute = 1e-12;
  std::vector<double> s_coarse{8.0, 32.0, 128.0, 512.0};

  int total_samples() const { return n_uniform + n_rounds * n_importance_per_round; }

  /// Coarse s used in round k; the last entry repeats when rounds outnumber it.
  double coarse_s(int round) const {
    return s_coarse[std::min<std::size_t>(static_cast<std::size_t>(round), s_coarse.size() - 1)];
  }

  void validate() const {
    require(n_uniform >= 2, "SamplingConfig: n_uniform must be at least 2");
    require(n_importance_per_round > 0 && n_rounds >= 0, "SamplingConfig: counts must be positive");
    require(pdf_floor_relative > 0 || pdf_floor_absolute > 0, "SamplingConfig: pdf floor must be positive");
    require(!s_coarse.empty(), "SamplingConfig: s_coarse must not be empty");
    for (double s : s_coarse) require(s > 0, "SamplingConfig: s_coarse entries must be positive");
  }
};

inline void to_json(nlohmann::json& j, const SamplingConfig& c) {
  j = {{"n_uniform", c.n_uniform},
       {"n_importance_per_round", c.n_importance_per_round},
       {"n_rounds", c.n_rounds},
       {"mode", to_string(c.mode)},
       {"pdf_floor_relative", c.pdf_floor_relative},
       {"pdf_floor_absolute", c.pdf_floor_absolute},
       {"s_coarse", c.s_coarse}};
}

inline void from_json(const nlohmann::json& j, SamplingConfig& c) {
  c.n_uniform = j.value("n_uniform", c.n_uniform);
  c.n_importance_per_round = j.value("n_importance_per_round", c.n_importance_per_round);
  c.n_rounds = j.value("n_rounds", c.n_rounds);
  if (j.contains("mode")) c.mode = sampling_mode_from_string(j.at("mode").get<std::string>());
  c.pdf_floor_relative = j.value("pdf_floor_relative", c.pdf_floor_relative);
  c.pdf_floor_absolute = j.value("pdf_floor_absolute", c.pdf_floor_absolute);
  c.s_coarse = j.value("s_coarse", c.s_coarse);
}

/// Source of uniform numbers in [0,1): an Rng or any callable returning double.
template <class U>
double draw(U& u) {
  if constexpr (std::is_same_v<std::decay_t<U>, Rng>)
    return uniform01(u);
  else
    return u();
}

/// One jittered sample per equal-width bin of [t_near, t_far].
template <class U>
std::vector<double> stratified_samples(const Ray& ray, int n, U&& uniform) {
  require(n >= 2, "stratified_samples: need at least two samples");
  require(ray.t_near < ray.t_far, "stratified_samples: empty interval");
  std::vector<double> t(n);
  const double width = (ray.t_far - ray.t_near) / n;
  for (int i = 0; i < n; ++i) t[i] = std::min(ray.t_near + (i + draw(uniform)) * width, ray.t_far);
  return t;
}

/// Inverse-CDF draws from the piecewise-uniform density with per-interval
/// mass over t_bins; the new points are returned sorted but not merged.
template <class U>
std::vector<double> sample_piecewise(std::span<const double> t_bins, std::span<const double> mass, int n,
                                     U&& uniform, double floor_relative = 1e-5, double floor_absolute = 1e-12) {
  require(t_bins.size() >= 2 && mass.size() + 1 == t_bins.size(),
          "importance_resample: need one mass per interval");
  double mean = 0;
  for (double m : mass) {
    require(m >= 0 && std::isfinite(m), "importance_resample: mass must be finite and non-negative");
    mean += m;
  }
  mean /= static_cast<double>(mass.size());
  const double floor = floor_relative * mean + floor_absolute;
  std::vector<double> cdf(mass.size() + 1, 0.0);
  for (std::size_t i = 0; i < mass.size(); ++i) cdf[i + 1] = cdf[i] + mass[i] + floor;
  const double total = cdf.back();
  std::vector<double> out(n);
  for (int k = 0; k < n; ++k) {
    const double u = draw(uniform) * total;
    auto it = std::upper_bound(cdf.begin() + 1, cdf.end(), u);
    std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()) - 1, mass.size() - 1);
    const double span = cdf[i + 1] - cdf[i];
    const double f = span > 0 ? std::clamp((u - cdf[i]) / span, 0.0, 1.0) : 0.5;
    out[k] = t_bins[i] + f * (t_bins[i + 1] - t_bins[i]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// sample_piecewise followed by a sorted merge with the existing samples.
template <class U>
std::vector<double> importance_resample(std::span<const double> t_bins, std::span<const double> mass, int n,
                                        U&& uniform, double floor_relative = 1e-5,
                                        double floor_absolute = 1e-12) {
  std::vector<double> fresh = sample_piecewise(t_bins, mass, n, uniform, floor_relative, floor_absolute);
  std::vector<double> merged(t_bins.size() + fresh.size());
  std::merge(t_bins.begin(), t_bins.end(), fresh.begin(), fresh.end(), merged.begin());
  return merged;
}

/// Plain field probe used by the sampler: positions (n x 3) -> d (n x 1) and,
/// when osf is non-null, osf (n x 1).
using FieldProbe = std::function<void(const Matrix& x, Matrix& d, Matrix* osf)>;

inline FieldProbe network_probe(const NetworkParams& p) {
  return [&p](const Matrix& x, Matrix& d, Matrix* osf) {
    GeometryEval g = geometry_eval(p, x, false, osf != nullptr);
    d = std::move(g.d);
    if (osf) *osf = osf_eval(p, x, g.z);
  };
}

namespace detail {

/// Interval mass for one ray: w from coarse alphas, times the interval-mean
/// OSF in guided mode.
inline std::vector<double> interval_mass(std::span<const double> d, std::span<const double> osf, double s,
                                         bool guided) {
  const std::size_t m = d.size() - 1;
  std::vector<double> mass(m);
  double T = 1.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double a = neus_alpha(d[i], d[i + 1], s);
    double w = T * a;
    if (guided) w *= 0.5 * (osf[i] + osf[i + 1]);
    mass[i] = w;
    T *= 1.0 - a;
  }
  return mass;
}

}  // namespace detail

/// Samples for a batch of rays: n_uniform stratified samples followed by
/// n_rounds of importance resampling. Each ray draws from its own stream
/// keyed by (seed, stream, ray index). Returns R x total_samples.
inline Matrix sample_rays(std::span<const Ray> rays, const FieldProbe& probe, const SamplingConfig& cfg,
                          std::uint64_t seed, std::uint64_t stream, std::span<const std::uint64_t> ray_ids = {}) {
  cfg.validate();
  const Eigen::Index R = static_cast<Eigen::Index>(rays.size());
  const bool guided = cfg.mode == SamplingMode::kOsfGuided;
  std::vector<Rng> rngs;
  rngs.reserve(rays.size());
  for (Eigen::Index r = 0; r < R; ++r)
    rngs.push_back(make_stream(seed, stream, ray_ids.empty() ? static_cast<std::uint64_t>(r) : ray_ids[r]));

  std::vector<std::vector<double>> t(rays.size()), d(rays.size()), osf(rays.size());
  std::vector<std::vector<double>> pending(rays.size());
  for (Eigen::Index r = 0; r < R; ++r) pending[r] = stratified_samples(rays[r], cfg.n_uniform, rngs[r]);

  for (int round = 0; round <= cfg.n_rounds; ++round) {
    // Probe all pending samples of the batch in one call.
    Eigen::Index total = 0;
    for (const auto& p : pending) total += static_cast<Eigen::Index>(p.size());
    Matrix x(total, 3);
    Eigen::Index row = 0;
    for (Eigen::Index r = 0; r < R; ++r)
      for (double tv : pending[r]) x.row(row++) = rays[r].at(tv).transpose();
    Matrix dv, ov;
    probe(x, dv, guided ? &ov : nullptr);
    require(dv.rows() == total && (!guided || ov.rows() == total), "sample_rays: probe returned a wrong shape");

    row = 0;
    for (Eigen::Index r = 0; r < R; ++r) {
      // Merge pending samples (sorted) with the ray's existing samples,
      // carrying their probed values along.
      const std::size_t k = pending[r].size();
      std::vector<double> nt, nd, no;
      nt.reserve(t[r].size() + k);
      nd.reserve(t[r].size() + k);
      if (guided) no.reserve(t[r].size() + k);
      std::size_t a = 0, b = 0;
      while (a < t[r].size() || b < k) {
        const bool take_old = b == k || (a < t[r].size() && t[r][a] <= pending[r][b]);
        if (take_old) {
          nt.push_back(t[r][a]);
          nd.push_back(d[r][a]);
          if (guided) no.push_back(osf[r][a]);
          ++a;
        } else {
          nt.push_back(pending[r][b]);
          nd.push_back(dv(row + static_cast<Eigen::Index>(b), 0));
          if (guided) no.push_back(ov(row + static_cast<Eigen::Index>(b), 0));
          ++b;
        }
      }
      row += static_cast<Eigen::Index>(k);
      t[r] = std::move(nt);
      d[r] = std::move(nd);
      osf[r] = std::move(no);
      pending[r].clear();
      if (round < cfg.n_rounds) {
        const std::vector<double> mass = detail::interval_mass(d[r], osf[r], cfg.coarse_s(round), guided);
        pending[r] = sample_piecewise(t[r], mass, cfg.n_importance_per_round, rngs[r], cfg.pdf_floor_relative,
                                      cfg.pdf_floor_absolute);
      }
    }
  }

  Matrix out(R, cfg.total_samples());
  for (Eigen::Index r = 0; r < R; ++r)
    for (Eigen::Index i = 0; i < out.cols(); ++i) out(r, i) = t[r][i];
  return out;
}

/// Single-ray convenience wrapper around sample_rays.
inline std::vector<double> osf_guided_samples(const Ray& ray, const FieldProbe& probe, const SamplingConfig& cfg,
                                              std::uint64_t seed, std::uint64_t stream = 0) {
  const Matrix t = sample_rays(std::span<const Ray>(&ray, 1), probe, cfg, seed, stream);
  return std::vector<double>(t.data(), t.data() + t.size());
}

}  // namespace h2o

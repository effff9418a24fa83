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

// SDF-to-opacity conversion and volume compositing.
//
// A ray carries N sorted samples t_0 < ... < t_{N-1}. Opacity is defined per
// interval [t_i, t_{i+1}], so a ray has N-1 alphas and N-1 weights; per-sample
// quantities are averaged over the two interval endpoints before compositing.
//
// Batched layouts are flattened row-major: sample i of ray r lives at row
// r * N + i, interval i of ray r at row r * (N - 1) + i.

#pragma once

#include <atomic>
#include <span>
#include <vector>

#include "h2osdf/autodiff.hpp"
#include "h2osdf/core.hpp"
#include "h2osdf/fields.hpp"

namespace h2o {

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  double t_near = 0.0;
  double t_far = 1.0;

  Vec3 at(double t) const { return origin + t * direction; }

  void validate() const {
    require(std::abs(direction.norm() - 1.0) <= 1e-9, "Ray: direction must be unit length");
    require(t_near < t_far, "Ray: t_near must be below t_far");
  }
};

/// Count of alpha evaluations whose denominator Phi_s(d_i) fell below the
/// clamp floor.
inline std::atomic<long long>& alpha_clamp_counter() {
  static std::atomic<long long> counter{0};
  return counter;
}

constexpr double kAlphaDenominatorFloor = 1e-12;

/// alpha = max((Phi_s(d_i) - Phi_s(d_next)) / Phi_s(d_i), 0).
inline double neus_alpha(double d_i, double d_next, double s) {
  require(s > 0, "neus_alpha: s must be positive");
  const double p = sigmoid(s * d_i);
  const double q = sigmoid(s * d_next);
  double den = p;
  if (den < kAlphaDenominatorFloor) {
    den = kAlphaDenominatorFloor;
    alpha_clamp_counter().fetch_add(1, std::memory_order_relaxed);
  }
  return std::max((p - q) / den, 0.0);
}

struct Transmittance {
  std::vector<double> T;
  std::vector<double> w;
};

inline Transmittance weights_from_alpha(std::span<const double> alphas) {
  Transmittance out;
  out.T.resize(alphas.size());
  out.w.resize(alphas.size());
  double T = 1.0;
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    require(alphas[i] >= 0.0 && alphas[i] <= 1.0, "weights_from_alpha: alpha outside [0,1]");
    out.T[i] = T;
    out.w[i] = T * alphas[i];
    T *= 1.0 - alphas[i];
  }
  return out;
}

/// sum_i w_i * values_i, one value row per weight.
inline Eigen::RowVectorXd composite(std::span<const double> weights, const Matrix& values) {
  require(static_cast<Eigen::Index>(weights.size()) == values.rows(), "composite: length mismatch");
  Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(values.cols());
  for (std::size_t i = 0; i < weights.size(); ++i) out += weights[i] * values.row(static_cast<Eigen::Index>(i));
  return out;
}

// ---------------------------------------------------------------------------
// Batched plain versions

/// d: (R*N) x 1 -> alphas (R*(N-1)) x 1.
inline Matrix neus_alpha_batch(const Matrix& d, double s, Eigen::Index n_samples) {
  require(n_samples >= 2 && d.rows() % n_samples == 0 && d.cols() == 1, "neus_alpha_batch: bad shape");
  const Eigen::Index R = d.rows() / n_samples, M = n_samples - 1;
  Matrix a(R * M, 1);
  for (Eigen::Index r = 0; r < R; ++r)
    for (Eigen::Index i = 0; i < M; ++i)
      a(r * M + i, 0) = neus_alpha(d(r * n_samples + i, 0), d(r * n_samples + i + 1, 0), s);
  return a;
}

/// alphas (R*M) x 1 -> weights (R*M) x 1.
inline Matrix weights_batch(const Matrix& alpha, Eigen::Index m, Matrix* transmittance = nullptr) {
  require(m >= 1 && alpha.rows() % m == 0, "weights_batch: bad shape");
  Matrix w(alpha.rows(), 1);
  if (transmittance) transmittance->resize(alpha.rows(), 1);
  for (Eigen::Index r = 0; r < alpha.rows() / m; ++r) {
    double T = 1.0;
    for (Eigen::Index i = 0; i < m; ++i) {
      const double a = alpha(r * m + i, 0);
      if (transmittance) (*transmittance)(r * m + i, 0) = T;
      w(r * m + i, 0) = T * a;
      T *= 1.0 - a;
    }
  }
  return w;
}

/// Per-sample values (R*N) x k -> per-interval endpoint means (R*(N-1)) x k.
inline Matrix interval_mean(const Matrix& v, Eigen::Index n_samples) {
  require(n_samples >= 2 && v.rows() % n_samples == 0, "interval_mean: bad shape");
  const Eigen::Index R = v.rows() / n_samples, M = n_samples - 1;
  Matrix out(R * M, v.cols());
  for (Eigen::Index r = 0; r < R; ++r)
    out.middleRows(r * M, M) =
        0.5 * (v.middleRows(r * n_samples, M) + v.middleRows(r * n_samples + 1, M));
  return out;
}

/// Weighted per-ray sums: w (R*M) x 1, v (R*M) x k -> R x k.
inline Matrix composite_batch(const Matrix& w, const Matrix& v, Eigen::Index m) {
  require(w.rows() == v.rows() && w.rows() % m == 0, "composite_batch: bad shape");
  const Eigen::Index R = w.rows() / m;
  Matrix out = Matrix::Zero(R, v.cols());
  for (Eigen::Index r = 0; r < R; ++r)
    for (Eigen::Index i = 0; i < m; ++i) out.row(r) += w(r * m + i, 0) * v.row(r * m + i);
  return out;
}

// ---------------------------------------------------------------------------
// Taped versions

namespace ad {

/// Differentiable in d and s. d: (R*N) x 1, s: 1 x 1.
inline Var neus_alpha(Var d, Var s, Eigen::Index n_samples) {
  const double sv = s.scalar();
  Matrix a = neus_alpha_batch(d.value(), sv, n_samples);
  const int id = d.id, is = s.id;
  return d.tape->record(std::move(a), {d, s}, [id, is, n_samples](Tape& t, int self) {
    const Matrix& dv = t.value(id);
    const double s = t.value(is)(0, 0);
    const Matrix& g = t.node(self).grad;
    const Eigen::Index N = n_samples, M = N - 1, R = dv.rows() / N;
    Matrix gd = Matrix::Zero(dv.rows(), 1);
    double gs = 0.0;
    for (Eigen::Index r = 0; r < R; ++r) {
      for (Eigen::Index i = 0; i < M; ++i) {
        const double a = t.value(self)(r * M + i, 0);
        if (a <= 0.0) continue;
        const double d0 = dv(r * N + i, 0), d1 = dv(r * N + i + 1, 0);
        const double p = h2o::sigmoid(s * d0), q = h2o::sigmoid(s * d1);
        const double gi = g(r * M + i, 0);
        double da_dp, da_dq;
        if (p < kAlphaDenominatorFloor) {
          da_dp = 1.0 / kAlphaDenominatorFloor;
          da_dq = -1.0 / kAlphaDenominatorFloor;
        } else {
          da_dp = q / (p * p);
          da_dq = -1.0 / p;
        }
        const double dp = p * (1.0 - p), dq = q * (1.0 - q);
        gd(r * N + i, 0) += gi * da_dp * s * dp;
        gd(r * N + i + 1, 0) += gi * da_dq * s * dq;
        gs += gi * (da_dp * d0 * dp + da_dq * d1 * dq);
      }
    }
    if (t.wants_grad(id)) t.accumulate(id, gd);
    if (t.wants_grad(is)) t.accumulate(is, Matrix::Constant(1, 1, gs));
  }, "neus_alpha");
}

/// w_i = T_i alpha_i per ray of m intervals.
inline Var render_weights(Var alpha, Eigen::Index m) {
  Matrix w = weights_batch(alpha.value(), m);
  const int ia = alpha.id;
  return alpha.tape->record(std::move(w), {alpha}, [ia, m](Tape& t, int self) {
    const Matrix& a = t.value(ia);
    const Matrix& g = t.node(self).grad;
    Matrix T;
    weights_batch(a, m, &T);
    Matrix ga(a.rows(), 1);
    for (Eigen::Index r = 0; r < a.rows() / m; ++r) {
      // U_j = sum_{i>j} g_i alpha_i prod_{j<k<i} (1 - alpha_k)
      double U = 0.0;
      for (Eigen::Index j = m - 1; j >= 0; --j) {
        const Eigen::Index k = r * m + j;
        ga(k, 0) = T(k, 0) * (g(k, 0) - U);
        U = g(k, 0) * a(k, 0) + (1.0 - a(k, 0)) * U;
      }
    }
    t.accumulate(ia, ga);
  }, "render_weights");
}

inline Var interval_mean(Var v, Eigen::Index n_samples) {
  Matrix out = h2o::interval_mean(v.value(), n_samples);
  const int iv = v.id;
  return v.tape->record(std::move(out), {v}, [iv, n_samples](Tape& t, int self) {
    const Matrix& g = t.node(self).grad;
    const Eigen::Index N = n_samples, M = N - 1, R = g.rows() / M;
    Matrix gv = Matrix::Zero(R * N, g.cols());
    for (Eigen::Index r = 0; r < R; ++r) {
      gv.middleRows(r * N, M) += 0.5 * g.middleRows(r * M, M);
      gv.middleRows(r * N + 1, M) += 0.5 * g.middleRows(r * M, M);
    }
    t.accumulate(iv, gv);
  }, "interval_mean");
}

inline Var composite(Var w, Var v, Eigen::Index m) { return segment_sum(mul(v, w), m); }

}  // namespace ad

// ---------------------------------------------------------------------------
// Field rendering

/// Sample positions and view directions for R rays with N samples each.
inline void sample_positions(std::span<const Ray> rays, const Matrix& t_values, Matrix& x, Matrix& v) {
  const Eigen::Index R = static_cast<Eigen::Index>(rays.size()), N = t_values.cols();
  require(t_values.rows() == R, "sample_positions: one t row per ray");
  x.resize(R * N, 3);
  v.resize(R * N, 3);
  for (Eigen::Index r = 0; r < R; ++r)
    for (Eigen::Index i = 0; i < N; ++i) {
      x.row(r * N + i) = rays[r].at(t_values(r, i)).transpose();
      v.row(r * N + i) = rays[r].direction.transpose();
    }
}

/// Per-interval depth values (endpoint means of t), flattened (R*(N-1)) x 1.
inline Matrix interval_depths(const Matrix& t_values) {
  Matrix flat = Eigen::Map<const Matrix>(t_values.data(), t_values.size(), 1);
  return interval_mean(flat, t_values.cols());
}

/// Everything a training step needs from one rendered batch.
struct RenderedBatch {
  Eigen::Index n_samples = 0;
  Var color;       ///< R x 3
  Var normal;      ///< R x 3, raw composite of grad d
  Var osf;         ///< R x 1 (invalid when OSF is off)
  Var depth;       ///< R x 1
  Var sample_d;    ///< (R*N) x 1
  Var sample_osf;  ///< (R*N) x 1 (invalid when OSF is off)
  Var gradient;    ///< (R*N) x 3
  Var weights;     ///< (R*(N-1)) x 1
  Var s;
};

inline RenderedBatch render_taped(Tape& t, const NetworkParams& p, std::span<const Ray> rays,
                                  const Matrix& t_values, bool with_osf) {
  Matrix x, v;
  sample_positions(rays, t_values, x, v);
  RenderedBatch out;
  const Eigen::Index N = t_values.cols(), M = N - 1;
  out.n_samples = N;
  Var xv = t.constant(std::move(x));
  Var vv = t.constant(std::move(v));
  GeometryTaped g = geometry_forward(t, p, xv);
  out.sample_d = g.d;
  out.gradient = sdf_gradient(t, p, g);
  out.s = s_value(t, p);
  Var alpha = ad::neus_alpha(g.d, out.s, N);
  out.weights = ad::render_weights(alpha, M);
  Var c = color_forward(t, p, xv, vv, out.gradient, g.z);
  out.color = ad::composite(out.weights, ad::interval_mean(c, N), M);
  out.normal = ad::composite(out.weights, ad::interval_mean(out.gradient, N), M);
  out.depth = ad::composite(out.weights, t.constant(interval_depths(t_values)), M);
  if (with_osf) {
    out.sample_osf = osf_forward(t, p, xv, g.z);
    out.osf = ad::composite(out.weights, ad::interval_mean(out.sample_osf, N), M);
  }
  return out;
}

/// Untaped rendering result, per ray.
struct RenderResult {
  Matrix color;   ///< R x 3
  Matrix normal;  ///< R x 3
  Matrix osf;     ///< R x 1
  Matrix depth;   ///< R x 1
  Matrix opacity; ///< R x 1, sum of weights
};

inline RenderResult render_eval(const NetworkParams& p, std::span<const Ray> rays, const Matrix& t_values) {
  Matrix x, v;
  sample_positions(rays, t_values, x, v);
  const Eigen::Index N = t_values.cols(), M = N - 1;
  FieldOutputs f = evaluate_fields(p, x, v);
  const Matrix w = weights_batch(neus_alpha_batch(f.d, p.s(), N), M);
  RenderResult r;
  r.color = composite_batch(w, interval_mean(f.c, N), M);
  r.normal = composite_batch(w, interval_mean(f.n, N), M);
  r.osf = composite_batch(w, interval_mean(f.osf, N), M);
  r.depth = composite_batch(w, interval_depths(t_values), M);
  r.opacity = composite_batch(w, Matrix::Ones(w.rows(), 1), M);
  return r;
}

}  // namespace h2o

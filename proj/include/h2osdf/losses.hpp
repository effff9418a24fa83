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

// Training objectives. Every loss is a taped scalar reduced as a mean over
// rays (or points), so learning rates do not depend on the batch size.

#pragma once

#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "h2osdf/autodiff.hpp"
#include "h2osdf/core.hpp"
#include "h2osdf/rendering.hpp"

namespace h2o {

enum class RefinementMask { kPredicted, kGroundTruth };

struct LossConfig {
  double beta_c = 1.0;
  double beta_n = 2.0;
  double lambda_eik = 0.1;
  double lambda_2d = 0.5;
  double lambda_3d = 0.5;
  double lambda_ref = 0.1;
  double gamma = 20.0;
  double theta = 0.5;
  double bce_clamp = 1e-7;
  RefinementMask ref_mask = RefinementMask::kPredicted;

  void validate() const {
    require(beta_n > 1.0, "LossConfig: beta_n must exceed 1");
    require(beta_c > 0.0, "LossConfig: beta_c must be positive");
    require(gamma > 0.0, "LossConfig: gamma must be positive");
    require(theta > 0.0 && theta < 1.0, "LossConfig: theta must lie in (0,1)");
    require(bce_clamp > 0.0 && bce_clamp < 0.5, "LossConfig: bce_clamp must lie in (0,0.5)");
    require(lambda_eik >= 0 && lambda_2d >= 0 && lambda_3d >= 0 && lambda_ref >= 0,
            "LossConfig: loss weights must be non-negative");
  }
};

inline void to_json(nlohmann::json& j, const LossConfig& c) {
  j = {{"beta_c", c.beta_c},         {"beta_n", c.beta_n},       {"lambda_eik", c.lambda_eik},
       {"lambda_2d", c.lambda_2d},   {"lambda_3d", c.lambda_3d}, {"lambda_ref", c.lambda_ref},
       {"gamma", c.gamma},           {"theta", c.theta},         {"bce_clamp", c.bce_clamp},
       {"ref_mask", c.ref_mask == RefinementMask::kPredicted ? "predicted" : "gt"}};
}

inline void from_json(const nlohmann::json& j, LossConfig& c) {
  c.beta_c = j.value("beta_c", c.beta_c);
  c.beta_n = j.value("beta_n", c.beta_n);
  c.lambda_eik = j.value("lambda_eik", c.lambda_eik);
  c.lambda_2d = j.value("lambda_2d", c.lambda_2d);
  c.lambda_3d = j.value("lambda_3d", c.lambda_3d);
  c.lambda_ref = j.value("lambda_ref", c.lambda_ref);
  c.gamma = j.value("gamma", c.gamma);
  c.theta = j.value("theta", c.theta);
  c.bce_clamp = j.value("bce_clamp", c.bce_clamp);
  if (j.contains("ref_mask")) {
    const std::string m = j.at("ref_mask").get<std::string>();
    require(m == "predicted" || m == "gt", "LossConfig: ref_mask must be 'predicted' or 'gt'");
    c.ref_mask = m == "gt" ? RefinementMask::kGroundTruth : RefinementMask::kPredicted;
  }
}

/// Rays with per-pixel supervision. Matrices hold one row per ray.
struct RayBatch {
  std::vector<Ray> rays;
  Matrix gt_color;      ///< R x 3
  Matrix prior_normal;  ///< R x 3
  Matrix uncertainty;   ///< R x 1, in [0,1]
  Matrix indicator;     ///< R x 1, 1 on object pixels

  Eigen::Index size() const { return static_cast<Eigen::Index>(rays.size()); }

  void validate() const {
    const Eigen::Index R = size();
    require(gt_color.rows() == R && gt_color.cols() == 3, "RayBatch: gt_color must be R x 3");
    require(prior_normal.rows() == R && prior_normal.cols() == 3, "RayBatch: prior_normal must be R x 3");
    require(uncertainty.rows() == R && uncertainty.cols() == 1, "RayBatch: uncertainty must be R x 1");
    require(indicator.rows() == R && indicator.cols() == 1, "RayBatch: indicator must be R x 1");
    require((uncertainty.array() >= 0.0).all() && (uncertainty.array() <= 1.0).all(),
            "RayBatch: uncertainty outside [0,1]");
    require(((indicator.array() == 0.0) || (indicator.array() == 1.0)).all(), "RayBatch: indicator must be 0/1");
  }
};

/// Back-projected points of one view with ground-truth object labels.
struct PointCloud {
  Matrix points;  ///< n x 3
  std::vector<int> labels;

  Eigen::Index size() const { return points.rows(); }
};

// ---------------------------------------------------------------------------
// Scalar helpers

inline double scaled_sigmoid(double d, double gamma) {
  require(gamma > 0, "scaled_sigmoid: gamma must be positive");
  return sigmoid(-gamma * d);
}

/// d/d osf of osf * |osf - sigma|.
inline double grad3d_wrt_osf(double osf, double sigma) {
  return osf < sigma ? sigma - 2.0 * osf : 2.0 * osf - sigma;
}

/// d/d d of osf * |osf - sigma_gamma(d)|, written in terms of sigma.
inline double grad3d_wrt_sdf(double osf, double sigma, double gamma) {
  require(gamma > 0, "grad3d_wrt_sdf: gamma must be positive");
  const double mag = gamma * osf * sigma * (1.0 - sigma);
  return sigma < osf ? mag : -mag;
}

// ---------------------------------------------------------------------------
// Taped losses

namespace losses {

using ad::Var;

/// mean_r ||C_hat - C||_1 (beta_c + u_r).
inline Var color(Var c_hat, const Matrix& c_gt, const Matrix& u, const LossConfig& cfg) {
  Tape& t = *c_hat.tape;
  Var res = ad::row_sum(ad::abs(ad::sub(c_hat, t.constant(c_gt))));
  return ad::mean(ad::mul(res, t.constant((u.array() + cfg.beta_c).matrix())));
}

/// mean_r ||n_hat - n||_1 (beta_n - u_r).
inline Var normal(Var n_hat, const Matrix& n_prior, const Matrix& u, const LossConfig& cfg) {
  Tape& t = *n_hat.tape;
  Var res = ad::row_sum(ad::abs(ad::sub(n_hat, t.constant(n_prior))));
  return ad::mean(ad::mul(res, t.constant((cfg.beta_n - u.array()).matrix())));
}

/// mean_i (||g_i|| - 1)^2.
inline Var eikonal(Var gradients) { return ad::mean(ad::square(ad::add_scalar(ad::row_norm(gradients), -1.0))); }

/// Binary cross-entropy of the rendered OSF against the object indicator.
inline Var osf_2d(Var osf_rendered, const Matrix& indicator, const LossConfig& cfg) {
  Tape& t = *osf_rendered.tape;
  Var o = ad::clamp(osf_rendered, cfg.bce_clamp, 1.0 - cfg.bce_clamp);
  Var y = t.constant(indicator);
  Var one_minus_y = t.constant((1.0 - indicator.array()).matrix());
  Var pos = ad::mul(y, ad::log(o));
  Var neg = ad::mul(one_minus_y, ad::log(ad::add_scalar(ad::neg(o), 1.0)));
  return ad::neg(ad::mean(ad::add(pos, neg)));
}

inline Var scaled_sigmoid(Var d, double gamma) {
  require(gamma > 0, "scaled_sigmoid: gamma must be positive");
  return ad::sigmoid(ad::scale(d, -gamma));
}

/// Per ray: (1/N) sum_i [1_o osf_i |osf_i - sigma_i| + (1 - 1_o) osf_i];
/// mean over rays. osf and d are (R*N) x 1.
inline Var osf_3d(Var osf, Var d, const Matrix& indicator, Eigen::Index n_samples, const LossConfig& cfg) {
  Tape& t = *osf.tape;
  require(osf.rows() == indicator.rows() * n_samples && d.rows() == osf.rows(), "osf_3d: shape mismatch");
  Matrix obj(osf.rows(), 1);
  for (Eigen::Index r = 0; r < indicator.rows(); ++r) obj.middleRows(r * n_samples, n_samples).setConstant(indicator(r, 0));
  Var sigma = scaled_sigmoid(d, cfg.gamma);
  Var on = ad::mul(ad::mul(osf, ad::abs(ad::sub(osf, sigma))), t.constant(obj));
  Var off = ad::mul(osf, t.constant((1.0 - obj.array()).matrix()));
  return ad::mean(ad::add(on, off));
}

/// -(1/N) sum_j 1[osf_j >= theta] log osf_j with the mask detached. With a
/// non-empty `labels` vector the mask comes from ground-truth labels instead.
inline Var refinement(Var osf_points, const LossConfig& cfg, const std::vector<int>& labels = {}) {
  Tape& t = *osf_points.tape;
  const Eigen::Index n = osf_points.rows();
  require(n > 0, "loss_refinement: empty point set");
  Matrix mask(n, 1);
  for (Eigen::Index j = 0; j < n; ++j) {
    if (cfg.ref_mask == RefinementMask::kGroundTruth && !labels.empty())
      mask(j, 0) = labels[static_cast<std::size_t>(j)] == 1 ? 1.0 : 0.0;
    else
      mask(j, 0) = osf_points.value()(j, 0) >= cfg.theta ? 1.0 : 0.0;
  }
  Var logs = ad::log(ad::maximum(osf_points, t.scalar(cfg.bce_clamp)));
  return ad::neg(ad::mean(ad::mul(logs, t.constant(std::move(mask)))));
}

}  // namespace losses

/// Individual loss terms; unset terms are absent from the run.
struct LossComponents {
  std::optional<ad::Var> color;
  std::optional<ad::Var> normal;
  std::optional<ad::Var> eikonal;
  std::optional<ad::Var> osf_2d;
  std::optional<ad::Var> osf_3d;
  std::optional<ad::Var> refinement;
};

/// Phase 1: L_c + L_n + lambda_eik L_eik. Phase 2 adds the weighted OSF terms.
inline ad::Var total_loss(int phase, const LossComponents& c, const LossConfig& cfg) {
  require(phase == 1 || phase == 2, "total_loss: phase must be 1 or 2");
  require(c.color && c.normal && c.eikonal, "total_loss: holistic terms missing");
  if (phase == 2) require(c.osf_2d && c.osf_3d && c.refinement, "total_loss: phase 2 requires the OSF terms");
  ad::Var total = ad::add(ad::add(*c.color, *c.normal), ad::scale(*c.eikonal, cfg.lambda_eik));
  if (phase == 2) {
    total = ad::add(total, ad::scale(*c.osf_2d, cfg.lambda_2d));
    total = ad::add(total, ad::scale(*c.osf_3d, cfg.lambda_3d));
    total = ad::add(total, ad::scale(*c.refinement, cfg.lambda_ref));
  }
  return total;
}

}  // namespace h2o

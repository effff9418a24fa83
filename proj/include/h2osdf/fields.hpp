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

// The three neural fields: geometry (SDF + feature), view-dependent color and
// the object surface field (OSF). Every field has a taped forward (for
// training) and a plain Eigen forward (for sampling, meshing and rendering).

#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "h2osdf/autodiff.hpp"
#include "h2osdf/core.hpp"

namespace h2o {

using ad::Tape;
using ad::Var;

struct EncodingConfig {
  int n_freqs = 6;
  bool include_identity = true;

  int output_dim(int in_dim) const { return in_dim * ((include_identity ? 1 : 0) + 2 * n_freqs); }
};

/// [x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x)],
/// each term a block of in_dim columns.
inline Matrix positional_encode(const Matrix& x, const EncodingConfig& cfg) {
  require(cfg.n_freqs >= 0, "positional_encode: negative frequency count");
  const Eigen::Index d = x.cols();
  Matrix out(x.rows(), cfg.output_dim(static_cast<int>(d)));
  Eigen::Index off = 0;
  if (cfg.include_identity) {
    out.middleCols(off, d) = x;
    off += d;
  }
  for (int k = 0; k < cfg.n_freqs; ++k) {
    const double w = std::ldexp(kPi, k);
    out.middleCols(off, d) = (x.array() * w).sin();
    out.middleCols(off + d, d) = (x.array() * w).cos();
    off += 2 * d;
  }
  return out;
}

namespace detail {

/// Vector-Jacobian product of the encoding: g_pe (n x D) -> g_x (n x d).
inline Matrix pe_vjp_value(const Matrix& g, const Matrix& x, const EncodingConfig& cfg) {
  const Eigen::Index d = x.cols();
  Matrix gx = Matrix::Zero(x.rows(), d);
  Eigen::Index off = 0;
  if (cfg.include_identity) {
    gx += g.middleCols(off, d);
    off += d;
  }
  for (int k = 0; k < cfg.n_freqs; ++k) {
    const double w = std::ldexp(kPi, k);
    const Matrix wx = x * w;
    gx.array() += w * (g.middleCols(off, d).array() * wx.array().cos() -
                       g.middleCols(off + d, d).array() * wx.array().sin());
    off += 2 * d;
  }
  return gx;
}

}  // namespace detail

inline Var positional_encode(Var x, const EncodingConfig& cfg) {
  Matrix out = positional_encode(x.value(), cfg);
  const int ix = x.id;
  return x.tape->record(std::move(out), {x}, [ix, cfg](Tape& t, int self) {
    t.accumulate(ix, detail::pe_vjp_value(t.node(self).grad, t.value(ix), cfg));
  }, "positional_encode");
}

/// J_PE(x)^T g as a differentiable op in both g and x, so that an SDF gradient
/// assembled from it can itself be back-propagated (Eikonal loss).
inline Var pe_vjp(Var g, Var x, const EncodingConfig& cfg) {
  Matrix out = detail::pe_vjp_value(g.value(), x.value(), cfg);
  const int ig = g.id, ix = x.id;
  return g.tape->record(std::move(out), {g, x}, [ig, ix, cfg](Tape& t, int self) {
    const Matrix& up = t.node(self).grad;  // n x d
    const Matrix& xv = t.value(ix);
    const Eigen::Index d = xv.cols();
    if (t.wants_grad(ig)) {
      Matrix gg(xv.rows(), cfg.output_dim(static_cast<int>(d)));
      Eigen::Index off = 0;
      if (cfg.include_identity) {
        gg.middleCols(off, d) = up;
        off += d;
      }
      for (int k = 0; k < cfg.n_freqs; ++k) {
        const double w = std::ldexp(kPi, k);
        const Matrix wx = xv * w;
        gg.middleCols(off, d) = w * (up.array() * wx.array().cos()).matrix();
        gg.middleCols(off + d, d) = -w * (up.array() * wx.array().sin()).matrix();
        off += 2 * d;
      }
      t.accumulate(ig, gg);
    }
    if (t.wants_grad(ix)) {
      const Matrix& gv = t.value(ig);
      Matrix gx = Matrix::Zero(xv.rows(), d);
      Eigen::Index off = cfg.include_identity ? d : 0;
      for (int k = 0; k < cfg.n_freqs; ++k) {
        const double w = std::ldexp(kPi, k);
        const Matrix wx = xv * w;
        gx.array() -= w * w * up.array() *
                      (gv.middleCols(off, d).array() * wx.array().sin() +
                       gv.middleCols(off + d, d).array() * wx.array().cos());
        off += 2 * d;
      }
      t.accumulate(ix, gx);
    }
  }, "pe_vjp");
}

struct NetworkConfig {
  EncodingConfig position{6, true};
  EncodingConfig direction{4, true};

  int geo_hidden = 256;
  int geo_layers = 8;  ///< hidden layers; one more linear layer produces (d, z)
  int skip_layer = 4;  ///< hidden layer whose input re-injects PE(x); <0 disables
  double softplus_beta = 100.0;
  double init_radius = 0.5;
  /// Camera-inside scenes: free space is the interior of the initial sphere,
  /// so d(x) ~ r - |x| instead of |x| - r.
  bool inside_out = false;
  int feature_dim = 256;

  int color_hidden = 256;
  int color_layers = 4;
  int osf_hidden = 256;
  int osf_layers = 4;

  double init_s = 20.0;  ///< initial inverse standard deviation s of Phi_s
  double s_scale = 10.0;  ///< s = exp(s_scale * theta)

  int color_in_dim() const { return 3 + direction.output_dim(3) + 3 + feature_dim; }
  int osf_in_dim() const { return 3 + feature_dim; }
};

inline void to_json(nlohmann::json& j, const EncodingConfig& c) {
  j = {{"n_freqs", c.n_freqs}, {"include_identity", c.include_identity}};
}
inline void from_json(const nlohmann::json& j, EncodingConfig& c) {
  c.n_freqs = j.value("n_freqs", c.n_freqs);
  c.include_identity = j.value("include_identity", c.include_identity);
}

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = {{"position", c.position},       {"direction", c.direction},
       {"geo_hidden", c.geo_hidden},   {"geo_layers", c.geo_layers},
       {"skip_layer", c.skip_layer},   {"softplus_beta", c.softplus_beta},
       {"init_radius", c.init_radius}, {"inside_out", c.inside_out},
       {"feature_dim", c.feature_dim}, {"color_hidden", c.color_hidden},
       {"color_layers", c.color_layers}, {"osf_hidden", c.osf_hidden},
       {"osf_layers", c.osf_layers},   {"init_s", c.init_s},
       {"s_scale", c.s_scale}};
}

inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
  if (j.contains("position")) c.position = j.at("position").get<EncodingConfig>();
  if (j.contains("direction")) c.direction = j.at("direction").get<EncodingConfig>();
  c.geo_hidden = j.value("geo_hidden", c.geo_hidden);
  c.geo_layers = j.value("geo_layers", c.geo_layers);
  c.skip_layer = j.value("skip_layer", c.skip_layer);
  c.softplus_beta = j.value("softplus_beta", c.softplus_beta);
  c.init_radius = j.value("init_radius", c.init_radius);
  c.inside_out = j.value("inside_out", c.inside_out);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.color_hidden = j.value("color_hidden", c.color_hidden);
  c.color_layers = j.value("color_layers", c.color_layers);
  c.osf_hidden = j.value("osf_hidden", c.osf_hidden);
  c.osf_layers = j.value("osf_layers", c.osf_layers);
  c.init_s = j.value("init_s", c.init_s);
  c.s_scale = j.value("s_scale", c.s_scale);
}

/// Per-sample field values for a batch of n points.
struct FieldOutputs {
  Matrix d;    ///< n x 1 signed distance
  Matrix z;    ///< n x feature_dim
  Matrix c;    ///< n x 3 color in [0,1]
  Matrix n;    ///< n x 3 spatial gradient of d
  Matrix osf;  ///< n x 1 object-surface probability in [0,1]
};

/// Parameter ids of one MLP, weight/bias per linear layer.
struct MlpIds {
  std::vector<int> w;
  std::vector<int> b;
  int layers() const { return static_cast<int>(w.size()); }
};

/// Trainable state of all three networks plus the log-parameterized s.
struct NetworkParams {
  NetworkConfig config;
  ad::ParameterStore store;
  MlpIds geometry;
  MlpIds color;
  MlpIds osf;
  int s_param = -1;

  double s() const { return std::exp(config.s_scale * store.value(s_param)(0, 0)); }

  /// Whether parameter id belongs to the OSF network.
  bool is_osf_param(int id) const {
    for (int i = 0; i < osf.layers(); ++i)
      if (osf.w[i] == id || osf.b[i] == id) return true;
    return false;
  }
};

namespace detail {

inline bool is_skip(const NetworkConfig& c, int layer) { return c.skip_layer > 0 && layer == c.skip_layer; }

/// Input width of geometry linear layer l (0..geo_layers, last is the head).
inline int geo_in_dim(const NetworkConfig& c, int l) {
  const int pe = c.position.output_dim(3);
  if (l == 0) return pe;
  if (is_skip(c, l)) return c.geo_hidden;  // (hidden - pe) + pe after concatenation
  return c.geo_hidden;
}

inline int geo_out_dim(const NetworkConfig& c, int l) {
  if (l == c.geo_layers) return 1 + c.feature_dim;
  if (is_skip(c, l + 1)) return c.geo_hidden - c.position.output_dim(3);
  return c.geo_hidden;
}

inline Matrix normal_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double mean, double stddev) {
  std::normal_distribution<double> nd(mean, stddev);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

}  // namespace detail

/// Builds all three networks. The geometry MLP uses geometric initialization
/// so that d starts as the SDF of a sphere of config.init_radius.
inline NetworkParams init_network(const NetworkConfig& cfg, std::uint64_t seed) {
  require(cfg.geo_layers >= 1 && cfg.geo_hidden > 0, "init_network: bad geometry shape");
  require(cfg.skip_layer < 0 || cfg.skip_layer < cfg.geo_layers, "init_network: skip layer out of range");
  require(cfg.skip_layer < 0 || cfg.geo_hidden > cfg.position.output_dim(3),
          "init_network: hidden width must exceed the encoding width for the skip connection");
  NetworkParams p;
  p.config = cfg;
  Rng rng = make_stream(seed, 0x9e0);
  const int pe = cfg.position.output_dim(3);
  const bool has_id = cfg.position.include_identity;

  for (int l = 0; l <= cfg.geo_layers; ++l) {
    const int in = detail::geo_in_dim(cfg, l);
    const int out = detail::geo_out_dim(cfg, l);
    Matrix w, b;
    if (l == cfg.geo_layers) {
      const double m = std::sqrt(kPi) / std::sqrt(static_cast<double>(in));
      w = detail::normal_matrix(rng, in, out, cfg.inside_out ? -m : m, 1e-4);
      b = Matrix::Constant(1, out, cfg.inside_out ? cfg.init_radius : -cfg.init_radius);
    } else {
      w = detail::normal_matrix(rng, in, out, 0.0, std::sqrt(2.0) / std::sqrt(static_cast<double>(out)));
      b = Matrix::Zero(1, out);
      if (l == 0 && has_id && pe > 3) w.bottomRows(pe - 3).setZero();
      if (detail::is_skip(cfg, l) && has_id && pe > 3) w.bottomRows(pe - 3).setZero();
    }
    p.geometry.w.push_back(p.store.add("geo.w" + std::to_string(l), std::move(w)));
    p.geometry.b.push_back(p.store.add("geo.b" + std::to_string(l), std::move(b)));
  }

  auto plain_mlp = [&](MlpIds& ids, const std::string& name, int in, int hidden, int layers, int out) {
    int prev = in;
    for (int l = 0; l <= layers; ++l) {
      const int o = l == layers ? out : hidden;
      // He initialization for ReLU layers.
      Matrix w = detail::normal_matrix(rng, prev, o, 0.0, std::sqrt(2.0 / prev));
      ids.w.push_back(p.store.add(name + ".w" + std::to_string(l), std::move(w)));
      ids.b.push_back(p.store.add(name + ".b" + std::to_string(l), Matrix::Zero(1, o)));
      prev = o;
    }
  };
  plain_mlp(p.color, "color", cfg.color_in_dim(), cfg.color_hidden, cfg.color_layers, 3);
  plain_mlp(p.osf, "osf", cfg.osf_in_dim(), cfg.osf_hidden, cfg.osf_layers, 1);

  Matrix theta(1, 1);
  theta(0, 0) = std::log(cfg.init_s) / cfg.s_scale;
  p.s_param = p.store.add("s.theta", std::move(theta));
  return p;
}

// ---------------------------------------------------------------------------
// Taped forward passes

/// Taped geometry output, keeping the pre-activations needed by the analytic
/// spatial gradient.
struct GeometryTaped {
  Var x;
  Var pe;
  Var d;
  Var z;
  std::vector<Var> pre;  ///< pre-activation of each hidden layer
};

inline GeometryTaped geometry_forward(Tape& t, const NetworkParams& p, Var x) {
  const NetworkConfig& c = p.config;
  GeometryTaped g;
  g.x = x;
  g.pe = positional_encode(x, c.position);
  Var h = g.pe;
  for (int l = 0; l < c.geo_layers; ++l) {
    if (detail::is_skip(c, l)) h = ad::scale(ad::concat_cols({h, g.pe}), 1.0 / std::sqrt(2.0));
    Var a = ad::linear(h, t.parameter(p.store, p.geometry.w[l]), t.parameter(p.store, p.geometry.b[l]));
    g.pre.push_back(a);
    h = ad::softplus(a, c.softplus_beta);
  }
  const int L = c.geo_layers;
  Var out = ad::linear(h, t.parameter(p.store, p.geometry.w[L]), t.parameter(p.store, p.geometry.b[L]));
  g.d = ad::slice_cols(out, 0, 1);
  g.z = ad::slice_cols(out, 1, c.feature_dim);
  return g;
}

/// n = grad_x d, assembled layer by layer from taped ops so that it remains
/// differentiable w.r.t. the network parameters.
inline Var sdf_gradient(Tape& t, const NetworkParams& p, const GeometryTaped& g) {
  const NetworkConfig& c = p.config;
  const int L = c.geo_layers;
  const Eigen::Index n = g.x.rows();
  Var head = ad::slice_cols(t.parameter(p.store, p.geometry.w[L]), 0, 1);  // hidden x 1
  Var gh = ad::matmul_nt(t.constant(Matrix::Ones(n, 1)), head);           // n x hidden
  Var gpe_skip;
  bool has_skip = false;
  for (int l = L - 1; l >= 0; --l) {
    Var ga = ad::mul(gh, ad::softplus_grad(g.pre[l], c.softplus_beta));
    Var gin = ad::matmul_nt(ga, t.parameter(p.store, p.geometry.w[l]));
    if (detail::is_skip(c, l)) {
      gin = ad::scale(gin, 1.0 / std::sqrt(2.0));
      const Eigen::Index pe = g.pe.cols();
      gpe_skip = ad::slice_cols(gin, gin.cols() - pe, pe);
      has_skip = true;
      gh = ad::slice_cols(gin, 0, gin.cols() - pe);
    } else {
      gh = gin;
    }
  }
  Var gpe = has_skip ? ad::add(gh, gpe_skip) : gh;
  return pe_vjp(gpe, g.x, c.position);
}

namespace detail {

inline Var relu_mlp(Tape& t, const ad::ParameterStore& store, const MlpIds& ids, Var h) {
  const int L = ids.layers() - 1;
  for (int l = 0; l < L; ++l)
    h = ad::relu(ad::linear(h, t.parameter(store, ids.w[l]), t.parameter(store, ids.b[l])));
  return ad::linear(h, t.parameter(store, ids.w[L]), t.parameter(store, ids.b[L]));
}

}  // namespace detail

/// c(x, v, n, z) in [0,1]^3. v is expected to be unit length.
inline Var color_forward(Tape& t, const NetworkParams& p, Var x, Var v, Var n, Var z) {
  Var pev = positional_encode(v, p.config.direction);
  Var in = ad::concat_cols({x, pev, n, z});
  return ad::sigmoid(detail::relu_mlp(t, p.store, p.color, in));
}

inline Var osf_forward(Tape& t, const NetworkParams& p, Var x, Var z) {
  Var in = ad::concat_cols({x, z});
  return ad::sigmoid(detail::relu_mlp(t, p.store, p.osf, in));
}

inline Var s_value(Tape& t, const NetworkParams& p) {
  return ad::exp(ad::scale(t.parameter(p.store, p.s_param), p.config.s_scale));
}

// ---------------------------------------------------------------------------
// Plain forward passes (no tape)

struct GeometryEval {
  Matrix d;
  Matrix z;
  Matrix n;  ///< empty unless requested
};

inline GeometryEval geometry_eval(const NetworkParams& p, const Matrix& x, bool with_gradient,
                                  bool with_feature = true) {
  const NetworkConfig& c = p.config;
  const double beta = c.softplus_beta;
  const Matrix pe = positional_encode(x, c.position);
  Matrix h = pe;
  std::vector<Matrix> pre;
  if (with_gradient) pre.reserve(c.geo_layers);
  for (int l = 0; l < c.geo_layers; ++l) {
    if (detail::is_skip(c, l)) {
      Matrix cat(h.rows(), h.cols() + pe.cols());
      cat << h, pe;
      h = cat / std::sqrt(2.0);
    }
    Matrix a = h * p.store.value(p.geometry.w[l]);
    a.rowwise() += p.store.value(p.geometry.b[l]).row(0);
    h = ad::softplus_matrix(a, beta);
    if (with_gradient) pre.push_back(std::move(a));
  }
  const Matrix& wl = p.store.value(p.geometry.w[c.geo_layers]);
  const Matrix& bl = p.store.value(p.geometry.b[c.geo_layers]);
  GeometryEval out;
  if (with_feature) {
    Matrix o = h * wl;
    o.rowwise() += bl.row(0);
    out.d = o.leftCols(1);
    out.z = o.rightCols(c.feature_dim);
  } else {
    out.d = (h * wl.leftCols(1)).array() + bl(0, 0);
  }
  if (with_gradient) {
    Matrix gh = Matrix::Ones(x.rows(), 1) * wl.col(0).transpose();
    Matrix gpe_skip;
    for (int l = c.geo_layers - 1; l >= 0; --l) {
      Matrix ga = gh.cwiseProduct(ad::sigmoid_matrix(pre[l] * beta));
      Matrix gin = ga * p.store.value(p.geometry.w[l]).transpose();
      if (detail::is_skip(c, l)) {
        gin /= std::sqrt(2.0);
        gpe_skip = gin.rightCols(pe.cols());
        gh = gin.leftCols(gin.cols() - pe.cols());
      } else {
        gh = std::move(gin);
      }
    }
    if (gpe_skip.size()) gh += gpe_skip;
    out.n = detail::pe_vjp_value(gh, x, c.position);
  }
  return out;
}

namespace detail {

inline Matrix relu_mlp_eval(const ad::ParameterStore& store, const MlpIds& ids, Matrix h) {
  const int L = ids.layers() - 1;
  for (int l = 0; l <= L; ++l) {
    Matrix a = h * store.value(ids.w[l]);
    a.rowwise() += store.value(ids.b[l]).row(0);
    h = l < L ? Matrix(a.cwiseMax(0.0)) : a;
  }
  return h;
}

}  // namespace detail

inline Matrix color_eval(const NetworkParams& p, const Matrix& x, const Matrix& v, const Matrix& n,
                         const Matrix& z) {
  const Matrix pev = positional_encode(v, p.config.direction);
  Matrix in(x.rows(), p.config.color_in_dim());
  in << x, pev, n, z;
  return ad::sigmoid_matrix(detail::relu_mlp_eval(p.store, p.color, std::move(in)));
}

inline Matrix osf_eval(const NetworkParams& p, const Matrix& x, const Matrix& z) {
  Matrix in(x.rows(), p.config.osf_in_dim());
  in << x, z;
  return ad::sigmoid_matrix(detail::relu_mlp_eval(p.store, p.osf, std::move(in)));
}

/// All field outputs at positions x seen from unit directions v (n x 3 each).
inline FieldOutputs evaluate_fields(const NetworkParams& p, const Matrix& x, const Matrix& v) {
  GeometryEval g = geometry_eval(p, x, true);
  FieldOutputs f;
  f.c = color_eval(p, x, v, g.n, g.z);
  f.osf = osf_eval(p, x, g.z);
  f.d = std::move(g.d);
  f.z = std::move(g.z);
  f.n = std::move(g.n);
  return f;
}

/// Normalizes each row of v; returns how many rows were not unit length.
inline int normalize_directions(Matrix& v, double tol = 1e-9) {
  int fixed = 0;
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const double len = v.row(r).norm();
    require(len > 0, "normalize_directions: zero-length view direction");
    if (std::abs(len - 1.0) > tol) {
      v.row(r) /= len;
      ++fixed;
    }
  }
  return fixed;
}

}  // namespace h2o

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

// Two-phase optimization: holistic surface learning (color, normal and
// Eikonal terms) followed by object surface learning (OSF terms and, in the
// second half, OSF-guided sampling). Also Adam, the learning-rate schedule,
// checkpoints and the CSV loss log.

#pragma once

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "h2osdf/analysis.hpp"
#include "h2osdf/autodiff.hpp"
#include "h2osdf/fields.hpp"
#include "h2osdf/losses.hpp"
#include "h2osdf/rendering.hpp"
#include "h2osdf/sampling.hpp"
#include "h2osdf/scene.hpp"

namespace h2o {

struct TrainConfig {
  int phase1_iters = 2000;
  int phase2_iters = 6000;
  int rays_per_batch = 512;
  double lr = 2e-4;
  double warmup_fraction = 0.05;
  double final_lr_fraction = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double ogs_start_fraction = 0.5;
  bool use_ogs = true;
  int refinement_points = 512;  ///< points drawn per iteration from one view's cloud
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  ///< 0 disables periodic checkpoints
  int log_every = 10;
  int threads = 1;
  bool deterministic = true;

  void validate() const {
    require(phase1_iters > 0 && phase2_iters > 0, "TrainConfig: iteration counts must be positive");
    require(rays_per_batch > 0, "TrainConfig: rays_per_batch must be positive");
    require(lr > 0, "TrainConfig: lr must be positive");
    require(warmup_fraction >= 0 && warmup_fraction < 1, "TrainConfig: warmup_fraction must lie in [0,1)");
    require(final_lr_fraction > 0 && final_lr_fraction <= 1, "TrainConfig: final_lr_fraction must lie in (0,1]");
    require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0, "TrainConfig: bad Adam constants");
    require(ogs_start_fraction >= 0 && ogs_start_fraction <= 1, "TrainConfig: ogs_start_fraction must lie in [0,1]");
    require(log_every > 0, "TrainConfig: log_every must be positive");
    require(threads >= 1, "TrainConfig: threads must be at least 1");
    require(refinement_points > 0, "TrainConfig: refinement_points must be positive");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"phase1_iters", c.phase1_iters},
       {"phase2_iters", c.phase2_iters},
       {"rays_per_batch", c.rays_per_batch},
       {"lr", c.lr},
       {"warmup_fraction", c.warmup_fraction},
       {"final_lr_fraction", c.final_lr_fraction},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"eps", c.eps},
       {"ogs_start_fraction", c.ogs_start_fraction},
       {"use_ogs", c.use_ogs},
       {"refinement_points", c.refinement_points},
       {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every},
       {"log_every", c.log_every},
       {"threads", c.threads},
       {"deterministic", c.deterministic}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.phase1_iters = j.value("phase1_iters", c.phase1_iters);
  c.phase2_iters = j.value("phase2_iters", c.phase2_iters);
  c.rays_per_batch = j.value("rays_per_batch", c.rays_per_batch);
  c.lr = j.value("lr", c.lr);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.final_lr_fraction = j.value("final_lr_fraction", c.final_lr_fraction);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.ogs_start_fraction = j.value("ogs_start_fraction", c.ogs_start_fraction);
  c.use_ogs = j.value("use_ogs", c.use_ogs);
  c.refinement_points = j.value("refinement_points", c.refinement_points);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.log_every = j.value("log_every", c.log_every);
  c.threads = j.value("threads", c.threads);
  c.deterministic = j.value("deterministic", c.deterministic);
}

/// Linear warmup, then cosine decay from lr to final_lr_fraction * lr, over
/// the `total` iterations of one phase.
inline double learning_rate(const TrainConfig& c, int step, int total) {
  const int warm = static_cast<int>(std::ceil(c.warmup_fraction * total));
  if (step < warm) return c.lr * (step + 1) / warm;
  const double span = std::max(1, total - warm);
  const double p = std::clamp((step - warm) / span, 0.0, 1.0);
  return c.lr * (c.final_lr_fraction + (1.0 - c.final_lr_fraction) * 0.5 * (1.0 + std::cos(kPi * p)));
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  long step = 0;
  long skipped = 0;

  void reset(const ad::ParameterStore& store) {
    m.clear();
    v.clear();
    for (int i = 0; i < store.size(); ++i) {
      m.push_back(Matrix::Zero(store.value(i).rows(), store.value(i).cols()));
      v.push_back(Matrix::Zero(store.value(i).rows(), store.value(i).cols()));
    }
    step = 0;
  }
};

/// Bias-corrected Adam step. Parameters without a gradient entry are treated
/// as having a zero gradient. Returns false (and counts) when a gradient is
/// not finite, leaving everything untouched.
inline bool adam_update(ad::ParameterStore& store, AdamState& st, const ad::GradientMap& g, double lr,
                        const TrainConfig& c) {
  if (st.m.size() != static_cast<std::size_t>(store.size())) st.reset(store);
  if (!g.all_finite()) {
    ++st.skipped;
    std::cerr << "warning: non-finite gradient, Adam step skipped\n";
    return false;
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  for (int i = 0; i < store.size(); ++i) {
    Matrix& m = st.m[i];
    Matrix& v = st.v[i];
    if (i < g.size() && g.has(i)) {
      const Matrix& gi = g.grads[i];
      m = c.beta1 * m + (1.0 - c.beta1) * gi;
      v = c.beta2 * v + (1.0 - c.beta2) * gi.cwiseProduct(gi);
    } else {
      m *= c.beta1;
      v *= c.beta2;
    }
    store.value(i).array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.eps);
  }
  return true;
}

// ---------------------------------------------------------------------------
// Checkpoints

constexpr char kCheckpointMagic[8] = {'H', '2', 'O', 'C', 'K', 'P', 'T', '1'};

struct TrainState {
  NetworkParams params;
  AdamState adam;
  long iteration = 0;  ///< global iteration across phases
  int phase = 1;
  int phase_step = 0;  ///< iterations completed in the current phase
  std::vector<LogRow> log;
};

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  for (int s = 0; s < 64; s += 8) out.put(static_cast<char>((v >> s) & 0xff));
}

inline std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  for (int s = 0; s < 64; s += 8) {
    const int c = in.get();
    require(c != EOF, "checkpoint truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << s;
  }
  return v;
}

inline void put_matrix(std::ostream& out, const Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, m.data() + i, 8);
    put_u64(out, bits);
  }
}

inline void get_matrix(std::istream& in, Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const std::uint64_t bits = get_u64(in);
    std::memcpy(m.data() + i, &bits, 8);
  }
}

}  // namespace detail

/// "H2OCKPT1", u64 header length, JSON header, float64 parameters, then the
/// Adam moments when present. Written to a temporary file and renamed so an
/// interrupted write never replaces a good checkpoint.
inline void save_checkpoint(const std::filesystem::path& path, const TrainState& st, const nlohmann::json& extra = {}) {
  const NetworkParams& p = st.params;
  nlohmann::json shapes = nlohmann::json::array();
  for (int i = 0; i < p.store.size(); ++i)
    shapes.push_back({{"name", p.store.name(i)}, {"rows", p.store.value(i).rows()}, {"cols", p.store.value(i).cols()}});
  const bool moments = st.adam.m.size() == static_cast<std::size_t>(p.store.size());
  nlohmann::json log_rows = nlohmann::json::array();
  for (const LogRow& r : st.log)
    log_rows.push_back({r.iteration, r.L_c, r.L_n, r.L_eik, r.L_2d, r.L_3d, r.L_ref, r.total, r.inv_s});
  nlohmann::json header = {{"network", p.config},
                           {"parameters", shapes},
                           {"iteration", st.iteration},
                           {"phase", st.phase},
                           {"phase_step", st.phase_step},
                           {"adam_step", st.adam.step},
                           {"adam_skipped", st.adam.skipped},
                           {"has_moments", moments},
                           {"log", log_rows},
                           {"extra", extra}};
  const std::string h = header.dump();
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    require(out.good(), "cannot write " + tmp.string());
    out.write(kCheckpointMagic, 8);
    detail::put_u64(out, h.size());
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (int i = 0; i < p.store.size(); ++i) detail::put_matrix(out, p.store.value(i));
    if (moments)
      for (int i = 0; i < p.store.size(); ++i) {
        detail::put_matrix(out, st.adam.m[i]);
        detail::put_matrix(out, st.adam.v[i]);
      }
    require(out.good(), "failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline TrainState load_checkpoint(const std::filesystem::path& path, nlohmann::json* extra = nullptr) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  require(in.good() && std::equal(magic, magic + 8, kCheckpointMagic), "not a checkpoint: " + path.string());
  const std::uint64_t len = detail::get_u64(in);
  require(len < (1u << 26), "checkpoint header too large");
  std::string h(len, '\0');
  in.read(h.data(), static_cast<std::streamsize>(len));
  require(in.good(), "checkpoint truncated");
  const nlohmann::json header = nlohmann::json::parse(h);
  TrainState st;
  st.params = init_network(header.at("network").get<NetworkConfig>(), 0);
  const auto& shapes = header.at("parameters");
  require(static_cast<int>(shapes.size()) == st.params.store.size(), "checkpoint parameter count mismatch");
  for (int i = 0; i < st.params.store.size(); ++i) {
    Matrix& m = st.params.store.value(i);
    require(shapes[i].at("name") == st.params.store.name(i) && shapes[i].at("rows") == m.rows() &&
                shapes[i].at("cols") == m.cols(),
            "checkpoint parameter layout mismatch at " + st.params.store.name(i));
    detail::get_matrix(in, m);
  }
  st.iteration = header.value("iteration", 0L);
  st.phase = header.value("phase", 1);
  st.phase_step = header.value("phase_step", 0);
  if (header.value("has_moments", false)) {
    st.adam.reset(st.params.store);
    for (int i = 0; i < st.params.store.size(); ++i) {
      detail::get_matrix(in, st.adam.m[i]);
      detail::get_matrix(in, st.adam.v[i]);
    }
    st.adam.step = header.value("adam_step", 0L);
  }
  st.adam.skipped = header.value("adam_skipped", 0L);
  for (const auto& r : header.value("log", nlohmann::json::array()))
    st.log.push_back({r[0].get<long>(), r[1].get<double>(), r[2].get<double>(), r[3].get<double>(),
                      r[4].get<double>(), r[5].get<double>(), r[6].get<double>(), r[7].get<double>(),
                      r[8].get<double>()});
  if (extra) *extra = header.value("extra", nlohmann::json::object());
  return st;
}

// ---------------------------------------------------------------------------
// Loss log

inline std::string log_header() { return "iteration,L_c,L_n,L_eik,L_2d,L_3d,L_ref,total,inv_s"; }

inline std::string log_line(const LogRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%ld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", r.iteration, r.L_c, r.L_n,
                r.L_eik, r.L_2d, r.L_3d, r.L_ref, r.total, r.inv_s);
  return buf;
}

inline void write_log_csv(const std::filesystem::path& path, const std::vector<LogRow>& rows) {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path.string());
  out << log_header() << "\n";
  for (const LogRow& r : rows) out << log_line(r) << "\n";
}

inline std::vector<LogRow> read_log_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  require(line == log_header(), "unexpected log header in " + path.string());
  std::vector<LogRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    LogRow r;
    require(std::sscanf(line.c_str(), "%ld,%lf,%lf,%lf,%lf,%lf,%lf,%lf,%lf", &r.iteration, &r.L_c, &r.L_n, &r.L_eik,
                        &r.L_2d, &r.L_3d, &r.L_ref, &r.total, &r.inv_s) == 9,
            "malformed log row in " + path.string());
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Batches

/// Every valid pixel of the dataset as (frame, pixel) pairs.
struct PixelIndex {
  std::vector<std::pair<int, int>> pixels;

  explicit PixelIndex(const Dataset& ds) {
    for (std::size_t f = 0; f < ds.frames.size(); ++f)
      for (int p = 0; p < ds.frames[f].pixels(); ++p)
        if (ds.frames[f].valid(p, 0) != 0) pixels.emplace_back(static_cast<int>(f), p);
    require(!pixels.empty(), "dataset has no valid pixels");
  }
};

inline Ray frame_pixel_ray(const Dataset& ds, int frame, int pixel) {
  const Frame& f = ds.frames[static_cast<std::size_t>(frame)];
  const int x = pixel % f.intrinsics.width, y = pixel / f.intrinsics.width;
  return pixel_ray(ds.spec, f.pose, f.intrinsics, x + 0.5, y + 0.5);
}

inline RayBatch make_batch(const Dataset& ds, const std::vector<std::pair<int, int>>& picks) {
  RayBatch b;
  const Eigen::Index R = static_cast<Eigen::Index>(picks.size());
  b.gt_color.resize(R, 3);
  b.prior_normal.resize(R, 3);
  b.uncertainty.resize(R, 1);
  b.indicator.resize(R, 1);
  for (Eigen::Index r = 0; r < R; ++r) {
    const auto [fi, p] = picks[static_cast<std::size_t>(r)];
    const Frame& f = ds.frames[static_cast<std::size_t>(fi)];
    b.rays.push_back(frame_pixel_ray(ds, fi, p));
    b.gt_color.row(r) = f.color.row(p);
    b.prior_normal.row(r) = f.normal.row(p);
    b.uncertainty(r, 0) = std::clamp(f.uncertainty(p, 0), 0.0, 1.0);
    b.indicator(r, 0) = f.mask(p, 0) > 0.5 ? 1.0 : 0.0;
  }
  b.validate();
  return b;
}

inline RayBatch sample_batch(const Dataset& ds, const PixelIndex& index, int n, std::uint64_t seed,
                             long iteration) {
  Rng rng = make_stream(seed, 0xba7c, static_cast<std::uint64_t>(iteration));
  std::vector<std::pair<int, int>> picks;
  picks.reserve(static_cast<std::size_t>(n));
  const double m = static_cast<double>(index.pixels.size());
  for (int i = 0; i < n; ++i) {
    const auto k = std::min(static_cast<std::size_t>(uniform01(rng) * m), index.pixels.size() - 1);
    picks.push_back(index.pixels[k]);
  }
  return make_batch(ds, picks);
}

/// Points (and labels) for the refinement term: one view chosen per
/// iteration, then points drawn with replacement.
inline PointCloud sample_refinement_points(const Dataset& ds, int n, std::uint64_t seed, long iteration) {
  Rng rng = make_stream(seed, 0x4ef1, static_cast<std::uint64_t>(iteration));
  std::vector<std::size_t> nonempty;
  for (std::size_t i = 0; i < ds.clouds.size(); ++i)
    if (ds.clouds[i].size() > 0) nonempty.push_back(i);
  require(!nonempty.empty(), "dataset has no point clouds");
  const PointCloud& src =
      ds.clouds[nonempty[std::min(static_cast<std::size_t>(uniform01(rng) * nonempty.size()), nonempty.size() - 1)]];
  PointCloud out;
  out.points.resize(n, 3);
  for (int k = 0; k < n; ++k) {
    const auto j = std::min(static_cast<Eigen::Index>(uniform01(rng) * src.size()), src.size() - 1);
    out.points.row(k) = src.points.row(j);
    out.labels.push_back(src.labels[static_cast<std::size_t>(j)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// One optimization step

struct StepResult {
  ad::GradientMap grads;
  LogRow row;
};

/// Loss and gradients for rays [begin, end) of the batch, with every term
/// scaled by the sub-batch share so sub-batch results add up to batch means.
inline StepResult compute_chunk(const NetworkParams& p, const RayBatch& batch, const Matrix& t_values,
                                Eigen::Index begin, Eigen::Index end, int phase, const LossConfig& lc,
                                const PointCloud* ref_points) {
  const Eigen::Index R = batch.size(), n = end - begin;
  const double share = static_cast<double>(n) / static_cast<double>(R);
  Tape t;
  std::span<const Ray> rays(batch.rays.data() + begin, static_cast<std::size_t>(n));
  RenderedBatch rb = render_taped(t, p, rays, t_values.middleRows(begin, n), phase == 2);
  LossComponents lcmp;
  lcmp.color = losses::color(rb.color, batch.gt_color.middleRows(begin, n), batch.uncertainty.middleRows(begin, n), lc);
  lcmp.normal =
      losses::normal(rb.normal, batch.prior_normal.middleRows(begin, n), batch.uncertainty.middleRows(begin, n), lc);
  lcmp.eikonal = losses::eikonal(rb.gradient);
  if (phase == 2) {
    const Matrix ind = batch.indicator.middleRows(begin, n);
    lcmp.osf_2d = losses::osf_2d(rb.osf, ind, lc);
    lcmp.osf_3d = losses::osf_3d(rb.sample_osf, rb.sample_d, ind, rb.n_samples, lc);
    if (ref_points) {
      Var xp = t.constant(ref_points->points);
      GeometryTaped g = geometry_forward(t, p, xp);
      lcmp.refinement = losses::refinement(osf_forward(t, p, xp, g.z), lc, ref_points->labels);
    } else {
      lcmp.refinement = t.scalar(0.0);
    }
  }
  // The refinement term belongs to the first chunk only and is not shared.
  Var total = ad::scale(total_loss(1, LossComponents{lcmp.color, lcmp.normal, lcmp.eikonal, {}, {}, {}}, lc), share);
  if (phase == 2) {
    total = ad::add(total, ad::scale(ad::add(ad::scale(*lcmp.osf_2d, lc.lambda_2d), ad::scale(*lcmp.osf_3d, lc.lambda_3d)),
                                     share));
    total = ad::add(total, ad::scale(*lcmp.refinement, lc.lambda_ref));
  }
  t.backward(total);
  StepResult out;
  out.grads = t.parameter_gradients(p.store.size());
  out.row.L_c = share * lcmp.color->scalar();
  out.row.L_n = share * lcmp.normal->scalar();
  out.row.L_eik = share * lcmp.eikonal->scalar();
  if (phase == 2) {
    out.row.L_2d = share * lcmp.osf_2d->scalar();
    out.row.L_3d = share * lcmp.osf_3d->scalar();
    out.row.L_ref = lcmp.refinement->scalar();
  }
  out.row.total = total.scalar();
  return out;
}

/// Full-batch loss and gradients, optionally split over worker threads.
/// Chunk results are always reduced in chunk order.
inline StepResult compute_step(const NetworkParams& p, const RayBatch& batch, const Matrix& t_values, int phase,
                               const LossConfig& lc, const PointCloud* ref_points, int threads) {
  const Eigen::Index R = batch.size();
  const int chunks = static_cast<int>(std::min<Eigen::Index>(std::max(1, threads), R));
  std::vector<StepResult> parts(static_cast<std::size_t>(chunks));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(chunks));
  auto run = [&](int c) {
    try {
      const Eigen::Index b = R * c / chunks, e = R * (c + 1) / chunks;
      parts[static_cast<std::size_t>(c)] = compute_chunk(p, batch, t_values, b, e, phase, lc, c == 0 ? ref_points : nullptr);
    } catch (...) {
      errors[static_cast<std::size_t>(c)] = std::current_exception();
    }
  };
  if (chunks == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    for (int c = 0; c < chunks; ++c) pool.emplace_back(run, c);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  StepResult out = std::move(parts[0]);
  for (int c = 1; c < chunks; ++c) {
    const StepResult& s = parts[static_cast<std::size_t>(c)];
    out.grads.accumulate(s.grads);
    out.row.L_c += s.row.L_c;
    out.row.L_n += s.row.L_n;
    out.row.L_eik += s.row.L_eik;
    out.row.L_2d += s.row.L_2d;
    out.row.L_3d += s.row.L_3d;
    out.row.total += s.row.total;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Phase driver

struct RunOptions {
  std::filesystem::path out_dir;  ///< empty: nothing is written
  bool quiet = false;
  /// Stop after this many iterations of the phase (<0: run the whole phase).
  /// The schedule still spans the full phase, so a later resume continues it.
  int stop_after = -1;
  std::function<void(const TrainState&)> on_log;
  nlohmann::json checkpoint_extra;  ///< stored in every checkpoint header
};

inline int effective_threads(const TrainConfig& c) { return c.deterministic ? 1 : c.threads; }

/// Sampling configuration for a given phase iteration.
inline SamplingConfig sampling_for(const SamplingConfig& base, const TrainConfig& tc, int phase, int phase_step) {
  SamplingConfig s = base;
  const bool ogs = phase == 2 && tc.use_ogs &&
                   phase_step >= static_cast<int>(std::ceil(tc.ogs_start_fraction * tc.phase2_iters));
  s.mode = ogs ? SamplingMode::kOsfGuided : SamplingMode::kDensity;
  return s;
}

/// Runs (or continues) one phase. Entering a new phase resets the Adam
/// moments; resuming inside a phase keeps them.
inline void run_phase(int phase, const Dataset& ds, const TrainConfig& tc, const SamplingConfig& sc,
                      const LossConfig& lc, TrainState& st, const RunOptions& opt = {}) {
  tc.validate();
  sc.validate();
  lc.validate();
  require(phase == 1 || phase == 2, "run_phase: phase must be 1 or 2");
  require(!ds.frames.empty(), "run_phase: empty dataset");
  if (st.phase != phase) {
    require(phase == 2 && st.phase == 1, "run_phase: phase 2 must follow phase 1");
    st.phase = 2;
    st.phase_step = 0;
    st.adam.reset(st.params.store);
  }
  if (st.adam.m.size() != static_cast<std::size_t>(st.params.store.size())) st.adam.reset(st.params.store);
  for (std::size_t i = 0; i < static_cast<std::size_t>(st.params.store.size()); ++i)
    if (!st.params.store.value(i).allFinite()) throw NumericalError("run_phase", "parameters are not finite");
  const int total = phase == 1 ? tc.phase1_iters : tc.phase2_iters;
  const PixelIndex index(ds);
  std::ofstream log_out;
  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    const auto log_path = opt.out_dir / "loss_log.csv";
    write_log_csv(log_path, st.log);
    log_out.open(log_path, std::ios::app);
  }
  const int threads = effective_threads(tc);
  const FieldProbe probe = network_probe(st.params);
  double window_prev = -1, window_acc = 0;
  int window_n = 0;
  int end = total;
  if (opt.stop_after >= 0) end = std::min(total, st.phase_step + opt.stop_after);
  for (; st.phase_step < end; ++st.phase_step, ++st.iteration) {
    const RayBatch batch = sample_batch(ds, index, tc.rays_per_batch, tc.seed, st.iteration);
    const SamplingConfig s_now = sampling_for(sc, tc, phase, st.phase_step);
    const Matrix t_values = sample_rays(batch.rays, probe, s_now, tc.seed, static_cast<std::uint64_t>(st.iteration));
    PointCloud ref;
    if (phase == 2) ref = sample_refinement_points(ds, tc.refinement_points, tc.seed, st.iteration);
    StepResult step = compute_step(st.params, batch, t_values, phase, lc, phase == 2 ? &ref : nullptr, threads);
    if (!std::isfinite(step.row.total)) throw NumericalError("run_phase", "loss is not finite");
    const double lr = learning_rate(tc, st.phase_step, total);
    adam_update(st.params.store, st.adam, step.grads, lr, tc);
    step.row.iteration = st.iteration + 1;
    step.row.inv_s = 1.0 / st.params.s();
    if ((st.phase_step + 1) % tc.log_every == 0 || st.phase_step + 1 == total) {
      st.log.push_back(step.row);
      if (log_out.is_open()) log_out << log_line(step.row) << "\n" << std::flush;
      if (!opt.quiet)
        std::fprintf(stderr, "phase %d iter %d/%d total %.5f L_c %.4f L_n %.4f inv_s %.5f\n", phase,
                     st.phase_step + 1, total, step.row.total, step.row.L_c, step.row.L_n, step.row.inv_s);
      if (opt.on_log) opt.on_log(st);
    }
    window_acc += step.row.inv_s;
    if (++window_n == 1000) {
      const double avg = window_acc / window_n;
      if (window_prev > 0 && avg > window_prev && !opt.quiet)
        std::fprintf(stderr, "warning: mean 1/s rose over the last 1000 iterations (%.5f -> %.5f)\n", window_prev, avg);
      window_prev = avg;
      window_acc = 0;
      window_n = 0;
    }
    if (!opt.out_dir.empty() && tc.checkpoint_every > 0 && (st.phase_step + 1) % tc.checkpoint_every == 0) {
      ++st.phase_step;
      ++st.iteration;
      save_checkpoint(opt.out_dir / "checkpoint.h2o", st, opt.checkpoint_extra);
      --st.phase_step;
      --st.iteration;
    }
  }
  if (!opt.out_dir.empty()) {
    char name[32];
    std::snprintf(name, sizeof(name), "phase%d.h2o", phase);
    save_checkpoint(opt.out_dir / name, st, opt.checkpoint_extra);
    save_checkpoint(opt.out_dir / "checkpoint.h2o", st, opt.checkpoint_extra);
  }
}

/// Holistic loss of the current fields on a fixed batch (no update).
inline double holistic_loss(const NetworkParams& p, const RayBatch& batch, const Matrix& t_values,
                            const LossConfig& lc) {
  return compute_step(p, batch, t_values, 1, lc, nullptr, 1).row.total;
}

}  // namespace h2o

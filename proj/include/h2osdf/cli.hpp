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

// Command-line front end: gen-scene, train, render, extract-mesh, eval and
// analyze, with defaults < config file < flags resolution.

#pragma once

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "h2osdf/analysis.hpp"
#include "h2osdf/evaluation.hpp"
#include "h2osdf/meshing.hpp"
#include "h2osdf/scene.hpp"
#include "h2osdf/training.hpp"

namespace h2o::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode { kOk = 0, kValidation = 1, kNumerical = 2 };

/// Everything a run needs, merged from defaults, a config file and flags.
struct RunConfig {
  std::string scene;  ///< scene JSON path
  fs::path data;      ///< dataset directory
  fs::path out;       ///< output directory
  std::uint64_t seed = 0;
  NetworkConfig network;
  TrainConfig train;
  SamplingConfig sampling;
  LossConfig loss;
  MeshConfig mesh;

  /// Pushes the run seed into every seeded component.
  void propagate_seed() { train.seed = seed; }

  void validate(bool need_data) const {
    train.validate();
    sampling.validate();
    loss.validate();
    mesh.validate();
    if (!scene.empty()) require(fs::exists(scene), "scene file not found: " + scene);
    if (need_data) {
      require(!data.empty(), "no dataset directory given");
      require(fs::exists(data / "manifest.json"), "dataset manifest not found in " + data.string());
    }
  }
};

inline void to_json(json& j, const RunConfig& c) {
  j = {{"scene", c.scene},       {"data", c.data.string()}, {"out", c.out.string()},
       {"seed", c.seed},         {"network", c.network},    {"train", c.train},
       {"sampling", c.sampling}, {"loss", c.loss},          {"mesh", c.mesh}};
}

inline void from_json(const json& j, RunConfig& c) {
  c.scene = j.value("scene", c.scene);
  c.data = j.value("data", c.data.string());
  c.out = j.value("out", c.out.string());
  c.seed = j.value("seed", c.seed);
  if (j.contains("network")) j.at("network").get_to(c.network);
  if (j.contains("train")) j.at("train").get_to(c.train);
  if (j.contains("sampling")) j.at("sampling").get_to(c.sampling);
  if (j.contains("loss")) j.at("loss").get_to(c.loss);
  if (j.contains("mesh")) j.at("mesh").get_to(c.mesh);
}

/// Relative paths inside a config file resolve against the file's directory.
inline RunConfig load_run_config(const fs::path& path) {
  RunConfig c = read_json(path).get<RunConfig>();
  const fs::path base = path.parent_path();
  if (!c.scene.empty() && fs::path(c.scene).is_relative()) c.scene = (base / c.scene).lexically_normal().string();
  if (!c.data.empty() && c.data.is_relative()) c.data = (base / c.data).lexically_normal();
  return c;
}

inline std::pair<int, int> parse_resolution(const std::string& s) {
  int w = 0, h = 0;
  char x = 0;
  std::istringstream in(s);
  in >> w >> x >> h;
  require(!in.fail() && (x == 'x' || x == 'X') && in.peek() == EOF && w > 0 && h > 0,
          "resolution must look like WxH: " + s);
  return {w, h};
}

/// Scene from a JSON path, or a stock scene name when no such file exists.
inline SceneSpec resolve_scene(const std::string& arg) {
  if (fs::exists(arg)) return load_scene(arg);
  for (const char* name : {"room_empty", "room_sphere", "room_thinrods"})
    if (arg == name) return stock_scene(arg);
  throw ContractViolation("scene not found: " + arg);
}

/// Analytic scene field; osf is the object label of the nearest primitive.
inline LatticeField oracle_field(const SceneSpec& spec) {
  return [spec](const Matrix& x, Matrix& d, Matrix* osf) {
    d.resize(x.rows(), 1);
    if (osf) osf->resize(x.rows(), 1);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const SdfSample s = scene_sdf(spec, x.row(i).transpose());
      d(i, 0) = s.d;
      if (osf) (*osf)(i, 0) = s.label == SurfaceLabel::kObject ? 1.0 : 0.0;
    }
  };
}

inline MeshConfig mesh_for_scene(MeshConfig m, const SceneSpec& spec) {
  m.bounds_min = spec.bounds_min;
  m.bounds_max = spec.bounds_max;
  return m;
}

struct CheckpointBundle {
  TrainState state;
  RunConfig config;
};

inline CheckpointBundle open_checkpoint(const fs::path& path) {
  json extra;
  CheckpointBundle b;
  b.state = load_checkpoint(path, &extra);
  if (extra.contains("run_config")) b.config = extra.at("run_config").get<RunConfig>();
  b.config.network = b.state.params.config;
  return b;
}

/// Ray-marched rendering of every pixel of a frame under the checkpoint fields.
inline RenderResult render_frame_fields(const NetworkParams& p, const SceneSpec& spec, const Frame& f,
                                        const SamplingConfig& sc, std::uint64_t seed, int frame_id) {
  const int P = f.pixels(), W = f.intrinsics.width;
  RenderResult all;
  all.color.resize(P, 3);
  all.normal.resize(P, 3);
  all.osf.resize(P, 1);
  all.depth.resize(P, 1);
  all.opacity.resize(P, 1);
  const FieldProbe probe = network_probe(p);
  constexpr int kChunk = 1024;
  for (int b = 0; b < P; b += kChunk) {
    const int n = std::min(kChunk, P - b);
    std::vector<Ray> rays;
    std::vector<std::uint64_t> ids;
    for (int i = b; i < b + n; ++i) {
      rays.push_back(pixel_ray(spec, f.pose, f.intrinsics, i % W + 0.5, i / W + 0.5));
      ids.push_back(static_cast<std::uint64_t>(i));
    }
    const Matrix t = sample_rays(rays, probe, sc, seed, 0x52454e44ull + static_cast<std::uint64_t>(frame_id), ids);
    const RenderResult r = render_eval(p, rays, t);
    all.color.middleRows(b, n) = r.color;
    all.normal.middleRows(b, n) = r.normal;
    all.osf.middleRows(b, n) = r.osf;
    all.depth.middleRows(b, n) = r.depth;
    all.opacity.middleRows(b, n) = r.opacity;
  }
  return all;
}

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_gen_scene(const std::string& scene_arg, int frames, const std::string& res, const fs::path& out,
                         std::uint64_t seed, double noise, int stride, int gt_res, std::ostream& log) {
  const SceneSpec spec = resolve_scene(scene_arg);
  const auto [w, h] = parse_resolution(res);
  require(frames >= 2, "--frames must be at least 2");
  require(gt_res >= 8, "--gt-res must be at least 8");
  DatasetOptions opt;
  opt.n_frames = frames;
  opt.width = w;
  opt.height = h;
  opt.seed = seed;
  opt.noise_sigma = noise;
  opt.point_stride = stride;
  const Dataset ds = generate_dataset(spec, opt);
  write_dataset(ds, out);
  MeshConfig mc = mesh_for_scene(MeshConfig{}, spec);
  mc.resolution = gt_res;
  Lattice cache;
  const Mesh gt = extract_mesh(oracle_field(spec), mc, &cache);
  write_obj(out / "gt_mesh.obj", gt);
  const Mesh gt_obj = extract_object_mesh(oracle_field(spec), mc);
  write_obj(out / "gt_object_mesh.obj", gt_obj);
  log << "wrote " << frames << " frames to " << out.string() << " (" << ds.trace_misses << " tracer step-limit misses)\n";
  return kOk;
}

inline int cmd_train(RunConfig cfg, const std::string& phase, const std::string& resume, bool print_config,
                     int stop_after, bool quiet, std::ostream& out) {
  cfg.propagate_seed();
  if (print_config) {
    out << json(cfg).dump(2) << "\n";
    return kOk;
  }
  require(phase == "1" || phase == "2" || phase == "all", "--phase must be 1, 2 or all");
  cfg.validate(true);
  require(!cfg.out.empty(), "no output directory given");
  const Dataset ds = load_dataset(cfg.data);
  if (cfg.scene.empty() && fs::exists(cfg.data / "scene.json")) cfg.scene = (cfg.data / "scene.json").string();
  cfg.mesh = mesh_for_scene(cfg.mesh, ds.spec);

  TrainState st;
  if (!resume.empty()) {
    require(fs::exists(resume), "checkpoint not found: " + resume);
    st = load_checkpoint(resume);
    cfg.network = st.params.config;
  } else if (phase == "2") {
    const fs::path p1 = cfg.out / "phase1.h2o";
    require(fs::exists(p1), "phase 2 needs --resume or a phase-1 checkpoint in the output directory");
    st = load_checkpoint(p1);
    cfg.network = st.params.config;
  } else {
    st.params = init_network(cfg.network, cfg.seed);
  }
  fs::create_directories(cfg.out);
  write_json(cfg.out / "run_config.json", json(cfg));
  RunOptions ro;
  ro.out_dir = cfg.out;
  ro.quiet = quiet;
  ro.stop_after = stop_after;
  ro.checkpoint_extra = {{"run_config", cfg}};
  if (phase == "1" || phase == "all") {
    require(st.phase == 1, "--phase 1 cannot continue a phase-2 checkpoint");
    run_phase(1, ds, cfg.train, cfg.sampling, cfg.loss, st, ro);
  }
  if (phase == "2" || phase == "all") {
    if (phase == "all" && st.phase == 1 && st.phase_step < cfg.train.phase1_iters) return kOk;
    run_phase(2, ds, cfg.train, cfg.sampling, cfg.loss, st, ro);
  }
  return kOk;
}

inline int cmd_render(const fs::path& ckpt, const std::string& frame_arg, const fs::path& out, fs::path data) {
  CheckpointBundle b = open_checkpoint(ckpt);
  if (data.empty()) data = b.config.data;
  require(!data.empty() && fs::exists(data / "manifest.json"), "dataset not found; pass --data");
  const Dataset ds = load_dataset(data);
  std::vector<int> frames;
  if (frame_arg == "all") {
    for (int i = 0; i < static_cast<int>(ds.frames.size()); ++i) frames.push_back(i);
  } else {
    std::size_t pos = 0;
    int i = -1;
    try {
      i = std::stoi(frame_arg, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    require(pos == frame_arg.size() && i >= 0 && i < static_cast<int>(ds.frames.size()),
            "--frame must be a frame index or 'all'");
    frames.push_back(i);
  }
  SamplingConfig sc = b.config.sampling;
  sc.mode = SamplingMode::kDensity;
  for (int i : frames) {
    const Frame& f = ds.frames[static_cast<std::size_t>(i)];
    const int W = f.intrinsics.width, H = f.intrinsics.height;
    const RenderResult r = render_frame_fields(b.state.params, ds.spec, f, sc, b.config.seed, i);
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%03d", i);
    const fs::path dir = frames.size() == 1 ? out : out / name;
    fs::create_directories(dir);
    write_ppm(dir / "color.ppm", r.color, W, H);
    write_raw_f32(dir / "normal.f32", r.normal, W, H);
    write_raw_f32(dir / "depth.f32", r.depth, W, H);
    write_raw_f32(dir / "osf.f32", r.osf, W, H);
    write_raw_f32(dir / "opacity.f32", r.opacity, W, H);
    write_raw_f32(dir / "gt_normal.f32", f.normal, W, H);
    write_raw_f32(dir / "valid.f32", f.valid, W, H);
  }
  return kOk;
}

inline int cmd_extract_mesh(const fs::path& ckpt, const fs::path& out, bool object_only, int res, double theta_d,
                            double theta_osf, const fs::path& lattice_out, bool normals) {
  CheckpointBundle b = open_checkpoint(ckpt);
  MeshConfig mc = b.config.mesh;
  if (res > 0) mc.resolution = res;
  if (theta_d > 0) mc.theta_d = theta_d;
  if (theta_osf > 0) mc.theta_osf = theta_osf;
  mc.validate();
  Lattice cache;
  const LatticeField field = network_lattice_field(b.state.params);
  Mesh m = object_only ? extract_object_mesh(field, mc, &cache) : extract_mesh(field, mc, &cache);
  if (normals) compute_vertex_normals(m);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_obj(out, m, normals);
  if (!lattice_out.empty()) write_lattice(lattice_out, cache);
  return kOk;
}

/// Stacks predicted/GT normal maps from every directory under `dir` (and
/// `dir` itself) that holds normal.f32, gt_normal.f32 and valid.f32.
inline void gather_normals(const fs::path& dir, Matrix& pred, Matrix& gt, Matrix& mask) {
  require(fs::is_directory(dir), "normals directory not found: " + dir.string());
  std::vector<fs::path> dirs{dir};
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin() + 1, dirs.end());
  std::vector<Matrix> ps, gs, ms;
  Eigen::Index rows = 0;
  for (const fs::path& d : dirs) {
    if (!fs::exists(d / "normal.f32") || !fs::exists(d / "gt_normal.f32") || !fs::exists(d / "valid.f32")) continue;
    ps.push_back(read_raw_f32(d / "normal.f32"));
    gs.push_back(read_raw_f32(d / "gt_normal.f32"));
    ms.push_back(read_raw_f32(d / "valid.f32"));
    require(ps.back().rows() == gs.back().rows() && ps.back().rows() == ms.back().rows(),
            "normal map size mismatch in " + d.string());
    rows += ps.back().rows();
  }
  require(rows > 0, "no normal maps found under " + dir.string());
  pred.resize(rows, 3);
  gt.resize(rows, 3);
  mask.resize(rows, 1);
  Eigen::Index at = 0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const Eigen::Index n = ps[i].rows();
    pred.middleRows(at, n) = ps[i];
    gt.middleRows(at, n) = gs[i];
    mask.middleRows(at, n) = ms[i];
    at += n;
  }
}

inline int cmd_eval(const fs::path& pred_path, const fs::path& gt_path, const fs::path& normals_dir,
                    const fs::path& out, int n_points, std::uint64_t seed, double tau, const fs::path& csv,
                    const std::string& label, std::ostream& log) {
  require(n_points > 0, "--points must be positive");
  require(tau > 0, "--tau must be positive");
  const Mesh pred = read_obj(pred_path);
  const Mesh gt = read_obj(gt_path);
  Rng rp = make_stream(seed, 0x45564131ull), rg = make_stream(seed, 0x45564132ull);
  const Matrix pp = pred.empty() ? Matrix(0, 3) : sample_points_from_mesh(pred, n_points, rp);
  const Matrix gp = gt.empty() ? Matrix(0, 3) : sample_points_from_mesh(gt, n_points, rg);
  MetricsReport r = reconstruction_metrics(pp, gp, tau);
  if (!normals_dir.empty()) {
    Matrix np, ng, nm;
    gather_normals(normals_dir, np, ng, nm);
    normal_metrics(np, ng, nm, r);
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_json(out, report_json(r));
  if (!csv.empty()) append_report_csv(csv, label.empty() ? pred_path.stem().string() : label, r);
  log << "F-score " << r.f_score << " (P " << r.precision << ", R " << r.recall << ")\n";
  return kOk;
}

inline int cmd_drho(const std::vector<double>& s_values, double range, int points, const fs::path& out,
                    std::ostream& stdout_stream) {
  require(range > 0, "--range must be positive");
  for (double s : s_values) {
    const CurveSeries c = density_gradient_curve(s, -range, range, points);
    if (out.empty()) {
      std::ostringstream tmp;
      tmp.precision(17);
      tmp << "d,drho_dd\n";
      for (std::size_t i = 0; i < c.x.size(); ++i) tmp << c.x[i] << "," << c.y[i] << "\n";
      stdout_stream << tmp.str();
    } else {
      fs::path p = out;
      if (s_values.size() > 1) {
        std::ostringstream name;
        name << out.stem().string() << "_s" << s << out.extension().string();
        p = out.parent_path() / name.str();
      }
      if (p.has_parent_path()) fs::create_directories(p.parent_path());
      write_curve_csv(p, c);
    }
  }
  return kOk;
}

inline int cmd_ray_profile(const fs::path& ckpt, const std::string& oracle_scene, fs::path data, int frame,
                           const std::string& pixel, int samples, double s_override, const fs::path& out) {
  require(samples >= 2, "--samples must be at least 2");
  int px = 0, py = 0;
  {
    char comma = 0;
    std::istringstream in(pixel);
    in >> px >> comma >> py;
    require(!in.fail() && comma == ',', "--pixel must look like X,Y");
  }
  std::optional<CheckpointBundle> b;
  if (!ckpt.empty()) b = open_checkpoint(ckpt);
  if (data.empty() && b) data = b->config.data;
  require(!data.empty() && fs::exists(data / "manifest.json"), "dataset not found; pass --data");
  const Dataset ds = load_dataset(data);
  require(frame >= 0 && frame < static_cast<int>(ds.frames.size()), "--frame out of range");
  const Frame& f = ds.frames[static_cast<std::size_t>(frame)];
  require(px >= 0 && py >= 0 && px < f.intrinsics.width && py < f.intrinsics.height, "--pixel out of range");
  const Ray ray = pixel_ray(ds.spec, f.pose, f.intrinsics, px + 0.5, py + 0.5);
  LatticeField field;
  double s = s_override, gamma = LossConfig{}.gamma;
  if (b) {
    field = network_lattice_field(b->state.params);
    if (s <= 0) s = b->state.params.s();
    gamma = b->config.loss.gamma;
  } else {
    require(!oracle_scene.empty(), "ray-profile needs --ckpt or --oracle");
    field = oracle_field(resolve_scene(oracle_scene));
    if (s <= 0) s = 512.0;
  }
  const RayProfile p = ray_profile(field, s, gamma, ray, samples);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_profile_csv(out, p);
  return kOk;
}

inline int cmd_s_curve(const fs::path& log_path, const fs::path& out) {
  const CurveSeries c = s_curve_export(read_log_csv(log_path));
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_curve_csv(out, c);
  return kOk;
}

// ---------------------------------------------------------------------------
// Dispatch

/// Parses argv and runs one subcommand. Returns the process exit code.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"h2osdf: two-phase neural implicit surfaces on synthetic scenes", "h2osdf"};
  app.require_subcommand(1);

  // gen-scene
  auto* gen = app.add_subcommand("gen-scene", "Generate a synthetic dataset from a scene spec");
  std::string g_scene, g_res = "128x128";
  fs::path g_out;
  int g_frames = 24, g_stride = 4, g_gt_res = 256;
  std::uint64_t g_seed = 0;
  double g_noise = 0.005;
  gen->add_option("scene", g_scene, "Scene JSON path or stock scene name")->required();
  gen->add_option("--frames", g_frames, "Number of camera frames");
  gen->add_option("--res", g_res, "Image resolution WxH");
  gen->add_option("--out", g_out, "Output dataset directory")->required();
  gen->add_option("--seed", g_seed, "Dataset seed");
  gen->add_option("--noise", g_noise, "Point cloud noise sigma");
  gen->add_option("--stride", g_stride, "Point cloud pixel stride");
  gen->add_option("--gt-res", g_gt_res, "Lattice resolution of the ground-truth meshes");

  // train
  auto* train = app.add_subcommand("train", "Train the fields");
  std::string t_phase = "all", t_resume, t_config;
  fs::path t_data, t_out;
  std::optional<std::uint64_t> t_seed;
  std::optional<int> t_threads, t_iters1, t_iters2, t_rays, t_log_every, t_ckpt_every;
  std::optional<double> t_lr;
  std::optional<bool> t_det, t_ogs;
  std::optional<std::string> t_ref_mask;
  bool t_print = false, t_quiet = false;
  int t_stop = -1;
  train->add_option("--phase", t_phase, "1, 2 or all")->check(CLI::IsMember({"1", "2", "all"}));
  train->add_option("--config", t_config, "Run config JSON");
  train->add_option("--resume", t_resume, "Checkpoint to continue from");
  train->add_option("--data", t_data, "Dataset directory");
  train->add_option("--out", t_out, "Output directory");
  train->add_option("--seed", t_seed, "Run seed");
  train->add_option("--threads", t_threads, "Worker threads for sub-batches");
  train->add_flag("--deterministic{true},!--no-deterministic", t_det, "Sequential reductions");
  train->add_option("--iters1", t_iters1, "Phase-1 iterations");
  train->add_option("--iters2", t_iters2, "Phase-2 iterations");
  train->add_option("--rays", t_rays, "Rays per batch");
  train->add_option("--lr", t_lr, "Initial learning rate");
  train->add_option("--log-every", t_log_every, "Logging interval");
  train->add_option("--checkpoint-every", t_ckpt_every, "Checkpoint interval");
  train->add_flag("--ogs{true},!--no-ogs", t_ogs, "OSF-guided sampling in late phase 2");
  train->add_option("--ref-mask", t_ref_mask, "Refinement mask: predicted or gt")
      ->check(CLI::IsMember({"predicted", "gt"}));
  train->add_option("--stop-after", t_stop, "Stop after this many iterations of the phase");
  train->add_flag("--print-config", t_print, "Print the resolved config and exit");
  train->add_flag("--quiet", t_quiet, "No progress output");

  // render
  auto* render = app.add_subcommand("render", "Render frames from a checkpoint");
  fs::path r_ckpt, r_out, r_data;
  std::string r_frame = "0";
  render->add_option("--ckpt", r_ckpt, "Checkpoint")->required();
  render->add_option("--frame", r_frame, "Frame index or 'all'");
  render->add_option("--out", r_out, "Output directory")->required();
  render->add_option("--data", r_data, "Dataset directory (defaults to the training dataset)");

  // extract-mesh
  auto* extract = app.add_subcommand("extract-mesh", "Marching cubes on the learned SDF");
  fs::path e_ckpt, e_out, e_lattice;
  bool e_object = false, e_normals = false;
  int e_res = 0;
  double e_theta_d = 0, e_theta_osf = 0;
  extract->add_option("--ckpt", e_ckpt, "Checkpoint")->required();
  extract->add_option("--out", e_out, "Output OBJ")->required();
  extract->add_flag("--object-only", e_object, "Keep only the object surface");
  extract->add_option("--res", e_res, "Lattice resolution");
  extract->add_option("--theta-d", e_theta_d, "SDF band for the object filter");
  extract->add_option("--theta-osf", e_theta_osf, "OSF threshold for the object filter");
  extract->add_option("--lattice", e_lattice, "Also write the SDF lattice (raw float32)");
  extract->add_flag("--normals", e_normals, "Write vertex normals");

  // eval
  auto* eval = app.add_subcommand("eval", "Reconstruction and normal metrics");
  fs::path v_pred, v_gt, v_normals, v_out, v_csv;
  std::string v_label;
  int v_points = 100000;
  std::uint64_t v_seed = 0;
  double v_tau = 0.05;
  eval->add_option("--pred", v_pred, "Predicted mesh")->required();
  eval->add_option("--gt", v_gt, "Ground-truth mesh")->required();
  eval->add_option("--normals-dir", v_normals, "Directory of rendered normal maps");
  eval->add_option("--out", v_out, "Report JSON")->required();
  eval->add_option("--points", v_points, "Points sampled per mesh");
  eval->add_option("--seed", v_seed, "Sampling seed");
  eval->add_option("--tau", v_tau, "Distance threshold");
  eval->add_option("--csv", v_csv, "Append a row to this CSV");
  eval->add_option("--label", v_label, "Row label for --csv");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "Diagnostic curves");
  analyze->require_subcommand(1);
  auto* drho = analyze->add_subcommand("drho", "Density gradient curve");
  std::vector<double> a_s{10.0};
  double a_range = 1.0;
  int a_points = 2001;
  fs::path a_out;
  drho->add_option("--s", a_s, "Inverse standard deviation(s)");
  drho->add_option("--range", a_range, "Half width of the d range");
  drho->add_option("--points", a_points, "Number of grid points");
  drho->add_option("--out", a_out, "Output CSV (stdout when omitted)");
  auto* profile = analyze->add_subcommand("ray-profile", "Per-sample fields along one pixel ray");
  fs::path p_ckpt, p_data, p_out;
  std::string p_oracle, p_pixel = "64,64";
  int p_frame = 0, p_samples = 512;
  double p_s = 0;
  profile->add_option("--ckpt", p_ckpt, "Checkpoint");
  profile->add_option("--oracle", p_oracle, "Use the analytic fields of this scene instead");
  profile->add_option("--data", p_data, "Dataset directory");
  profile->add_option("--frame", p_frame, "Frame index");
  profile->add_option("--pixel", p_pixel, "Pixel X,Y");
  profile->add_option("--samples", p_samples, "Samples along the ray");
  profile->add_option("--s", p_s, "Override s");
  profile->add_option("--out", p_out, "Output CSV")->required();
  auto* scurve = analyze->add_subcommand("s-curve", "1/s series from a training log");
  fs::path c_log, c_out;
  scurve->add_option("--log", c_log, "loss_log.csv")->required();
  scurve->add_option("--out", c_out, "Output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kValidation;
  }

  try {
    if (*gen) return cmd_gen_scene(g_scene, g_frames, g_res, g_out, g_seed, g_noise, g_stride, g_gt_res, err);
    if (*train) {
      RunConfig cfg;
      if (!t_config.empty()) {
        require(fs::exists(t_config), "config not found: " + t_config);
        cfg = load_run_config(t_config);
      }
      if (!t_data.empty()) cfg.data = t_data;
      if (!t_out.empty()) cfg.out = t_out;
      if (t_seed) cfg.seed = *t_seed;
      if (t_threads) cfg.train.threads = *t_threads;
      if (t_det) cfg.train.deterministic = *t_det;
      if (t_iters1) cfg.train.phase1_iters = *t_iters1;
      if (t_iters2) cfg.train.phase2_iters = *t_iters2;
      if (t_rays) cfg.train.rays_per_batch = *t_rays;
      if (t_lr) cfg.train.lr = *t_lr;
      if (t_log_every) cfg.train.log_every = *t_log_every;
      if (t_ckpt_every) cfg.train.checkpoint_every = *t_ckpt_every;
      if (t_ogs) cfg.train.use_ogs = *t_ogs;
      if (t_ref_mask) cfg.loss.ref_mask = *t_ref_mask == "gt" ? RefinementMask::kGroundTruth : RefinementMask::kPredicted;
      return cmd_train(cfg, t_phase, t_resume, t_print, t_stop, t_quiet, out);
    }
    if (*render) return cmd_render(r_ckpt, r_frame, r_out, r_data);
    if (*extract) return cmd_extract_mesh(e_ckpt, e_out, e_object, e_res, e_theta_d, e_theta_osf, e_lattice, e_normals);
    if (*eval) return cmd_eval(v_pred, v_gt, v_normals, v_out, v_points, v_seed, v_tau, v_csv, v_label, err);
    if (*drho) return cmd_drho(a_s, a_range, a_points, a_out, out);
    if (*profile) return cmd_ray_profile(p_ckpt, p_oracle, p_data, p_frame, p_pixel, p_samples, p_s, p_out);
    if (*scurve) return cmd_s_curve(c_log, c_out);
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const ContractViolation& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const json::exception& e) {
    err << "error: bad JSON: " << e.what() << "\n";
    return kValidation;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  }
  return kValidation;
}

}  // namespace h2o::cli

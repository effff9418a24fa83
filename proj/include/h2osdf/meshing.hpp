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

// Marching cubes over a scalar lattice and OSF-filtered object extraction.
//
// The 256-entry case table is built once from the cube's face structure:
// on every face the iso-segments are oriented from the edge where a
// counter-clockwise walk enters the positive region to the edge where it
// leaves it, and ambiguous faces always keep the negative corners joined.
// The decision depends only on the four face corners, so neighbouring cells
// agree and closed surfaces come out watertight.

#pragma once

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "h2osdf/core.hpp"
#include "h2osdf/fields.hpp"

namespace h2o {

struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;
  std::vector<Vec3> normals;  ///< optional, one per vertex

  bool empty() const { return triangles.empty(); }

  double triangle_area(std::size_t i) const {
    const auto& t = triangles[i];
    return 0.5 * (vertices[t[1]] - vertices[t[0]]).cross(vertices[t[2]] - vertices[t[0]]).norm();
  }

  double area() const {
    double a = 0;
    for (std::size_t i = 0; i < triangles.size(); ++i) a += triangle_area(i);
    return a;
  }
};

/// Scalar samples on a regular lattice; value(i, j, k) at bounds_min + (i, j, k) * spacing.
struct Lattice {
  int nx = 0, ny = 0, nz = 0;
  Vec3 bounds_min = Vec3::Zero();
  Vec3 bounds_max = Vec3::Ones();
  std::vector<double> values;

  Lattice() = default;
  Lattice(int x, int y, int z, const Vec3& lo, const Vec3& hi)
      : nx(x), ny(y), nz(z), bounds_min(lo), bounds_max(hi), values(static_cast<std::size_t>(x) * y * z, 0.0) {}

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) + static_cast<std::size_t>(nx) * (j + static_cast<std::size_t>(ny) * k);
  }
  double& at(int i, int j, int k) { return values[index(i, j, k)]; }
  double at(int i, int j, int k) const { return values[index(i, j, k)]; }

  Vec3 spacing() const {
    return (bounds_max - bounds_min).cwiseQuotient(Vec3(nx - 1, ny - 1, nz - 1));
  }
  Vec3 point(int i, int j, int k) const {
    return bounds_min + Vec3(i, j, k).cwiseProduct(spacing());
  }
  double cell_diagonal() const { return spacing().norm(); }
};

namespace detail {

// Corner c sits at (c & 1, (c >> 1) & 1, (c >> 2) & 1).
inline int corner_edge(int a, int b) {
  static const std::array<std::array<int, 2>, 12> edges = {{{0, 1}, {2, 3}, {4, 5}, {6, 7},
                                                            {0, 2}, {1, 3}, {4, 6}, {5, 7},
                                                            {0, 4}, {1, 5}, {2, 6}, {3, 7}}};
  for (int e = 0; e < 12; ++e)
    if ((edges[e][0] == a && edges[e][1] == b) || (edges[e][0] == b && edges[e][1] == a)) return e;
  return -1;
}

inline const std::array<std::array<int, 2>, 12>& cube_edges() {
  static const std::array<std::array<int, 2>, 12> edges = {{{0, 1}, {2, 3}, {4, 5}, {6, 7},
                                                            {0, 2}, {1, 3}, {4, 6}, {5, 7},
                                                            {0, 4}, {1, 5}, {2, 6}, {3, 7}}};
  return edges;
}

/// Faces as corner cycles, counter-clockwise seen from outside the cube.
inline const std::array<std::array<int, 4>, 6>& cube_faces() {
  static const std::array<std::array<int, 4>, 6> faces = {{
      {0, 4, 6, 2},  // x = 0
      {1, 3, 7, 5},  // x = 1
      {0, 1, 5, 4},  // y = 0
      {2, 6, 7, 3},  // y = 1
      {0, 2, 3, 1},  // z = 0
      {4, 5, 7, 6},  // z = 1
  }};
  return faces;
}

/// Bit f set when edge e lies on face f of cube_faces().
inline int edge_faces(int e) {
  const auto& edge = cube_edges()[e];
  int mask = 0;
  for (int f = 0; f < 6; ++f) {
    int hits = 0;
    for (int c : cube_faces()[f]) hits += (c == edge[0]) + (c == edge[1]);
    if (hits == 2) mask |= 1 << f;
  }
  return mask;
}

struct CaseTable {
  std::array<std::vector<std::array<int, 3>>, 256> triangles;  // edge indices
};

inline CaseTable build_case_table() {
  CaseTable table;
  for (int cfg = 0; cfg < 256; ++cfg) {
    auto neg = [cfg](int c) { return ((cfg >> c) & 1) != 0; };
    std::array<int, 12> next;
    next.fill(-1);
    for (const auto& f : cube_faces()) {
      std::array<int, 4> enter{}, leave{};  // crossing edges by position along the walk
      int ne = 0, nl = 0;
      std::array<int, 4> enter_pos{}, leave_pos{};
      for (int k = 0; k < 4; ++k) {
        const int a = f[k], b = f[(k + 1) % 4];
        if (neg(a) && !neg(b)) {
          enter_pos[ne] = k;
          enter[ne++] = corner_edge(a, b);
        } else if (!neg(a) && neg(b)) {
          leave_pos[nl] = k;
          leave[nl++] = corner_edge(a, b);
        }
      }
      // Join each entering edge to the next leaving edge along the walk, so
      // every positive run of corners is cut off on its own.
      for (int i = 0; i < ne; ++i) {
        int best = -1, best_gap = 5;
        for (int j = 0; j < nl; ++j) {
          const int gap = (leave_pos[j] - enter_pos[i] + 4) % 4;
          if (gap > 0 && gap < best_gap) {
            best_gap = gap;
            best = j;
          }
        }
        next[enter[i]] = leave[best];
      }
    }
    std::array<bool, 12> used{};
    for (int e0 = 0; e0 < 12; ++e0) {
      if (next[e0] < 0 || used[e0]) continue;
      std::vector<int> loop;
      for (int e = e0; !used[e]; e = next[e]) {
        used[e] = true;
        loop.push_back(e);
      }
      // Fan from a vertex whose triangles never lie flat in a cube face, so a
      // neighbouring cube cannot emit the same triangle.
      const std::size_t n = loop.size();
      std::size_t start = 0;
      for (std::size_t s = 0; s < n; ++s) {
        bool flat = false;
        for (std::size_t i = 1; i + 1 < n; ++i)
          if (edge_faces(loop[s]) & edge_faces(loop[(s + i) % n]) & edge_faces(loop[(s + i + 1) % n])) flat = true;
        if (!flat) {
          start = s;
          break;
        }
      }
      for (std::size_t i = 1; i + 1 < n; ++i)
        table.triangles[cfg].push_back({loop[start], loop[(start + i + 1) % n], loop[(start + i) % n]});
    }
  }
  return table;
}

inline const CaseTable& case_table() {
  static const CaseTable table = build_case_table();
  return table;
}

}  // namespace detail

/// Iso-surface of the lattice at `iso`. Corners with value < iso count as
/// inside; triangle normals point toward larger values.
inline Mesh marching_cubes(const Lattice& grid, double iso = 0.0) {
  require(grid.nx >= 2 && grid.ny >= 2 && grid.nz >= 2, "marching_cubes: lattice too small");
  for (double v : grid.values) require(std::isfinite(v), "marching_cubes: non-finite lattice value");
  const detail::CaseTable& table = detail::case_table();
  const auto& edges = detail::cube_edges();
  Mesh mesh;
  std::unordered_map<std::size_t, int> vertex_of_edge;
  auto lattice_edge_vertex = [&](int i, int j, int k, int e) -> int {
    const int ca = edges[e][0], cb = edges[e][1];
    const int ia = i + (ca & 1), ja = j + ((ca >> 1) & 1), ka = k + ((ca >> 2) & 1);
    const int axis = (cb - ca) == 1 ? 0 : ((cb - ca) == 2 ? 1 : 2);
    const std::size_t key = grid.index(ia, ja, ka) * 3 + static_cast<std::size_t>(axis);
    auto it = vertex_of_edge.find(key);
    if (it != vertex_of_edge.end()) return it->second;
    const int ib = i + (cb & 1), jb = j + ((cb >> 1) & 1), kb = k + ((cb >> 2) & 1);
    const double va = grid.at(ia, ja, ka), vb = grid.at(ib, jb, kb);
    const double f = std::clamp((iso - va) / (vb - va), 0.0, 1.0);
    const Vec3 p = grid.point(ia, ja, ka) + f * (grid.point(ib, jb, kb) - grid.point(ia, ja, ka));
    const int id = static_cast<int>(mesh.vertices.size());
    mesh.vertices.push_back(p);
    vertex_of_edge.emplace(key, id);
    return id;
  };
  for (int k = 0; k + 1 < grid.nz; ++k)
    for (int j = 0; j + 1 < grid.ny; ++j)
      for (int i = 0; i + 1 < grid.nx; ++i) {
        int cfg = 0;
        for (int c = 0; c < 8; ++c)
          if (grid.at(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)) < iso) cfg |= 1 << c;
        if (cfg == 0 || cfg == 255) continue;
        for (const auto& tri : table.triangles[cfg]) {
          const std::array<int, 3> v = {lattice_edge_vertex(i, j, k, tri[0]), lattice_edge_vertex(i, j, k, tri[1]),
                                        lattice_edge_vertex(i, j, k, tri[2])};
          if (v[0] == v[1] || v[1] == v[2] || v[0] == v[2]) continue;
          const Vec3 n = (mesh.vertices[v[1]] - mesh.vertices[v[0]]).cross(mesh.vertices[v[2]] - mesh.vertices[v[0]]);
          if (n.squaredNorm() <= 1e-30) continue;
          mesh.triangles.push_back(v);
        }
      }
  return mesh;
}

/// Number of undirected edges not shared by exactly two triangles.
inline std::size_t boundary_edge_count(const Mesh& m) {
  std::unordered_map<std::uint64_t, int> count;
  for (const auto& t : m.triangles)
    for (int e = 0; e < 3; ++e) {
      const std::uint64_t a = static_cast<std::uint64_t>(t[e]), b = static_cast<std::uint64_t>(t[(e + 1) % 3]);
      ++count[std::min(a, b) << 32 | std::max(a, b)];
    }
  std::size_t bad = 0;
  for (const auto& [k, c] : count)
    if (c != 2) ++bad;
  return bad;
}

/// Area-weighted vertex normals from triangle orientation.
inline void compute_vertex_normals(Mesh& m) {
  m.normals.assign(m.vertices.size(), Vec3::Zero());
  for (const auto& t : m.triangles) {
    const Vec3 n = (m.vertices[t[1]] - m.vertices[t[0]]).cross(m.vertices[t[2]] - m.vertices[t[0]]);
    for (int v : t) m.normals[v] += n;
  }
  for (Vec3& n : m.normals)
    if (n.norm() > 0) n.normalize();
}

// ---------------------------------------------------------------------------
// Lattice evaluation and extraction

struct MeshConfig {
  int resolution = 128;
  Vec3 bounds_min = Vec3::Constant(-1.0);
  Vec3 bounds_max = Vec3::Constant(1.0);
  double theta_d = -1.0;  ///< <= 0 selects two cell sizes
  double theta_osf = 0.5;

  double cell_size() const { return (bounds_max - bounds_min).maxCoeff() / (resolution - 1); }
  double band() const { return theta_d > 0 ? theta_d : 2.0 * cell_size(); }

  void validate() const {
    require(resolution >= 8, "MeshConfig: resolution must be at least 8");
    require(theta_osf > 0 && theta_osf < 1, "MeshConfig: theta_osf must lie in (0,1)");
    require((bounds_max.array() > bounds_min.array()).all(), "MeshConfig: empty bounds");
  }
};

inline void to_json(nlohmann::json& j, const MeshConfig& c) {
  j = {{"resolution", c.resolution},
       {"bounds_min", {c.bounds_min[0], c.bounds_min[1], c.bounds_min[2]}},
       {"bounds_max", {c.bounds_max[0], c.bounds_max[1], c.bounds_max[2]}},
       {"theta_d", c.theta_d},
       {"theta_osf", c.theta_osf}};
}

inline void from_json(const nlohmann::json& j, MeshConfig& c) {
  c.resolution = j.value("resolution", c.resolution);
  if (j.contains("bounds_min"))
    for (int k = 0; k < 3; ++k) c.bounds_min[k] = j.at("bounds_min")[k].get<double>();
  if (j.contains("bounds_max"))
    for (int k = 0; k < 3; ++k) c.bounds_max[k] = j.at("bounds_max")[k].get<double>();
  c.theta_d = j.value("theta_d", c.theta_d);
  c.theta_osf = j.value("theta_osf", c.theta_osf);
}

/// Lattice dimensions with the longest axis at cfg.resolution points and
/// roughly cubic cells.
inline Lattice make_lattice(const MeshConfig& cfg) {
  const Vec3 ext = cfg.bounds_max - cfg.bounds_min;
  const double h = cfg.cell_size();
  auto n = [h](double e) { return std::max(2, static_cast<int>(std::ceil(e / h - 1e-9)) + 1); };
  return Lattice(n(ext[0]), n(ext[1]), n(ext[2]), cfg.bounds_min, cfg.bounds_max);
}

/// Field evaluator for lattice points: x (n x 3) -> d (n x 1) and, when osf is
/// non-null, osf (n x 1).
using LatticeField = std::function<void(const Matrix& x, Matrix& d, Matrix* osf)>;

/// Fills d (and optionally osf) lattices one z-slab at a time.
inline void evaluate_lattice(const LatticeField& field, Lattice& d, Lattice* osf) {
  const Eigen::Index slab = static_cast<Eigen::Index>(d.nx) * d.ny;
  Matrix x(slab, 3);
  for (int k = 0; k < d.nz; ++k) {
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) x.row(static_cast<Eigen::Index>(j) * d.nx + i) = d.point(i, j, k).transpose();
    Matrix dv, ov;
    field(x, dv, osf ? &ov : nullptr);
    require(dv.rows() == slab, "evaluate_lattice: field returned a wrong shape");
    for (Eigen::Index p = 0; p < slab; ++p) {
      d.values[d.index(0, 0, k) + static_cast<std::size_t>(p)] = dv(p, 0);
      if (osf) osf->values[osf->index(0, 0, k) + static_cast<std::size_t>(p)] = ov(p, 0);
    }
  }
}

inline LatticeField network_lattice_field(const NetworkParams& p) {
  return [&p](const Matrix& x, Matrix& d, Matrix* osf) {
    constexpr Eigen::Index kChunk = 4096;
    d.resize(x.rows(), 1);
    if (osf) osf->resize(x.rows(), 1);
    for (Eigen::Index s = 0; s < x.rows(); s += kChunk) {
      const Eigen::Index n = std::min(kChunk, x.rows() - s);
      const Matrix xs = x.middleRows(s, n);
      GeometryEval g = geometry_eval(p, xs, false, osf != nullptr);
      d.middleRows(s, n) = g.d;
      if (osf) osf->middleRows(s, n) = osf_eval(p, xs, g.z);
    }
  };
}

/// Full-scene mesh of the zero level set.
inline Mesh extract_mesh(const LatticeField& field, const MeshConfig& cfg, Lattice* cache = nullptr) {
  cfg.validate();
  Lattice d = make_lattice(cfg);
  evaluate_lattice(field, d, nullptr);
  Mesh m = marching_cubes(d, 0.0);
  if (cache) *cache = std::move(d);
  return m;
}

/// Keeps only surface where the OSF exceeds theta_osf: every lattice point with
/// d < theta_d that fails osf > theta_osf is pushed to +theta_d, then the
/// filtered field is polygonized.
inline Mesh extract_object_mesh(const LatticeField& field, const MeshConfig& cfg, Lattice* cache = nullptr) {
  cfg.validate();
  Lattice d = make_lattice(cfg);
  Lattice o = d;
  evaluate_lattice(field, d, &o);
  const double band = cfg.band();
  for (std::size_t i = 0; i < d.values.size(); ++i)
    if (d.values[i] < band && !(o.values[i] > cfg.theta_osf)) d.values[i] = band;
  Mesh m = marching_cubes(d, 0.0);
  if (cache) *cache = std::move(d);
  return m;
}

// ---------------------------------------------------------------------------
// IO

inline void write_obj(const std::filesystem::path& path, const Mesh& m, bool with_normals = false) {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path.string());
  out.precision(9);
  for (const Vec3& v : m.vertices) out << "v " << v[0] << " " << v[1] << " " << v[2] << "\n";
  const bool vn = with_normals && m.normals.size() == m.vertices.size();
  if (vn)
    for (const Vec3& n : m.normals) out << "vn " << n[0] << " " << n[1] << " " << n[2] << "\n";
  for (const auto& t : m.triangles) {
    if (vn)
      out << "f " << t[0] + 1 << "//" << t[0] + 1 << " " << t[1] + 1 << "//" << t[1] + 1 << " " << t[2] + 1 << "//"
          << t[2] + 1 << "\n";
    else
      out << "f " << t[0] + 1 << " " << t[1] + 1 << " " << t[2] + 1 << "\n";
  }
}

/// Reads vertices and (triangulated) faces; texture and normal indices are ignored.
inline Mesh read_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open " + path.string());
  Mesh m;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "v") {
      Vec3 v;
      ss >> v[0] >> v[1] >> v[2];
      m.vertices.push_back(v);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ss >> tok) {
        int i = std::stoi(tok.substr(0, tok.find('/')));
        idx.push_back(i < 0 ? static_cast<int>(m.vertices.size()) + i : i - 1);
      }
      for (std::size_t k = 1; k + 1 < idx.size(); ++k) m.triangles.push_back({idx[0], idx[k], idx[k + 1]});
    }
  }
  for (const auto& t : m.triangles)
    for (int v : t) require(v >= 0 && v < static_cast<int>(m.vertices.size()), "OBJ face index out of range");
  return m;
}

inline void write_lattice(const std::filesystem::path& path, const Lattice& g) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot write " + path.string());
  for (double v : g.values) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int s = 0; s < 32; s += 8) out.put(static_cast<char>((bits >> s) & 0xff));
  }
  std::filesystem::path side = path;
  side += ".json";
  std::ofstream js(side);
  js << nlohmann::json{{"nx", g.nx},
                       {"ny", g.ny},
                       {"nz", g.nz},
                       {"bounds_min", {g.bounds_min[0], g.bounds_min[1], g.bounds_min[2]}},
                       {"bounds_max", {g.bounds_max[0], g.bounds_max[1], g.bounds_max[2]}},
                       {"order", "x fastest, then y, then z"},
                       {"type", "float32"}}
            .dump(2)
     << "\n";
}

}  // namespace h2o

#pragma once

// k-NN complex graphs and their node/edge features.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "egr/error.hpp"
#include "egr/structio.hpp"

namespace egr {

enum class Granularity { AllAtom, CAlpha };

inline std::string to_string(Granularity g) { return g == Granularity::AllAtom ? "all-atom" : "c-alpha"; }

inline Granularity granularity_from_string(std::string_view s) {
  if (s == "all-atom") return Granularity::AllAtom;
  if (s == "c-alpha") return Granularity::CAlpha;
  throw ConfigError("unknown granularity '" + std::string(s) + "' (expected all-atom or c-alpha)");
}

/// 37 standard heavy-atom names followed by UNK.
inline constexpr std::array<std::string_view, 38> kAtomVocabulary = {
    "N",   "CA",  "C",   "O",   "OXT", "CB",  "CG",  "CG1", "CG2", "CD",  "CD1", "CD2", "CE",
    "CE1", "CE2", "CE3", "CZ",  "CZ2", "CZ3", "CH2", "ND1", "ND2", "NE",  "NE1", "NE2", "NZ",
    "NH1", "NH2", "OD1", "OD2", "OE1", "OE2", "OG",  "OG1", "OH",  "SD",  "SG",  "UNK"};

inline constexpr std::array<std::string_view, 21> kResidueVocabulary = {
    "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE", "LEU",
    "LYS", "MET", "PHE", "PRO", "SER", "THR", "TRP", "TYR", "VAL", "UNK"};

inline std::size_t atom_type_index(std::string_view name) {
  for (std::size_t i = 0; i + 1 < kAtomVocabulary.size(); ++i)
    if (kAtomVocabulary[i] == name) return i;
  return kAtomVocabulary.size() - 1;
}

inline std::size_t residue_type_index(std::string_view name) {
  for (std::size_t i = 0; i + 1 < kResidueVocabulary.size(); ++i)
    if (kResidueVocabulary[i] == name) return i;
  return kResidueVocabulary.size() - 1;
}

/// Feature blocks that can be switched off for ablations.
struct FeatureOptions {
  bool surface_proximity = true;
  bool relative_geometry = true;

  bool operator==(const FeatureOptions&) const = default;
};

inline constexpr int kGeometricFeatureCount = 12;
inline constexpr double kSurfaceRadius = 10.0;
inline constexpr double kSurfaceMaxCount = 64.0;
inline constexpr double kCovalentCutoff = 1.9;

inline int node_feature_width(Granularity g, const FeatureOptions& o) {
  const int sp = o.surface_proximity ? 1 : 0;
  return g == Granularity::AllAtom ? 38 + sp : 21 + sp + 6;
}

inline int edge_feature_width(Granularity g, const FeatureOptions& o) {
  const int geo = o.relative_geometry ? kGeometricFeatureCount : 0;
  return g == Granularity::AllAtom ? 3 + geo : 2 + geo;
}

struct ComplexGraph {
  Granularity granularity = Granularity::AllAtom;
  FeatureOptions options;
  Matrix3X coords;
  Matrix3X initial_coords;
  Eigen::MatrixXd node_features;  // d_f x n
  Eigen::MatrixXd edge_features;  // d_e x |E|
  std::vector<int> src;           // edge e points src[e] -> dst[e]
  std::vector<int> dst;
  std::vector<bool> ca_mask;
  std::vector<std::size_t> residue_of_node;  // flattened residue index
  std::vector<std::string> chain_of_node;
  std::vector<std::size_t> atom_of_node;  // flattened atom index in the source structure

  Eigen::Index node_count() const { return coords.cols(); }
  std::size_t edge_count() const { return src.size(); }
};

namespace detail {

/// Uniform cell grid over a point set.
class SpatialGrid {
 public:
  SpatialGrid(const Matrix3X& pts, double cell) : pts_(pts), cell_(cell) {
    lo_ = pts.rowwise().minCoeff();
    const Eigen::Vector3d hi = pts.rowwise().maxCoeff();
    for (int a = 0; a < 3; ++a) dims_[a] = std::max<long>(1, static_cast<long>(std::floor((hi(a) - lo_(a)) / cell_)) + 1);
    cells_.resize(static_cast<std::size_t>(dims_[0] * dims_[1] * dims_[2]));
    for (Eigen::Index i = 0; i < pts.cols(); ++i) cells_[flat(cell_of(pts.col(i)))].push_back(static_cast<int>(i));
  }

  std::array<long, 3> cell_of(const Eigen::Vector3d& p) const {
    std::array<long, 3> c{};
    for (int a = 0; a < 3; ++a)
      c[a] = std::clamp<long>(static_cast<long>(std::floor((p(a) - lo_(a)) / cell_)), 0, dims_[a] - 1);
    return c;
  }

  long max_ring() const { return std::max({dims_[0], dims_[1], dims_[2]}); }
  double cell() const { return cell_; }

  /// Calls fn(point index) for every point in cells at Chebyshev ring r around c.
  template <typename Fn>
  void visit_ring(const std::array<long, 3>& c, long r, Fn&& fn) const {
    for (long x = c[0] - r; x <= c[0] + r; ++x) {
      if (x < 0 || x >= dims_[0]) continue;
      for (long y = c[1] - r; y <= c[1] + r; ++y) {
        if (y < 0 || y >= dims_[1]) continue;
        for (long z = c[2] - r; z <= c[2] + r; ++z) {
          if (z < 0 || z >= dims_[2]) continue;
          if (std::max({std::abs(x - c[0]), std::abs(y - c[1]), std::abs(z - c[2])}) != r) continue;
          for (int idx : cells_[flat({x, y, z})]) fn(idx);
        }
      }
    }
  }

 private:
  std::size_t flat(const std::array<long, 3>& c) const {
    return static_cast<std::size_t>((c[0] * dims_[1] + c[1]) * dims_[2] + c[2]);
  }

  const Matrix3X& pts_;
  double cell_;
  Eigen::Vector3d lo_;
  std::array<long, 3> dims_{};
  std::vector<std::vector<int>> cells_;
};

inline double squared_distance(const Matrix3X& x, Eigen::Index i, Eigen::Index j) {
  const double dx = x(0, i) - x(0, j);
  const double dy = x(1, i) - x(1, j);
  const double dz = x(2, i) - x(2, j);
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace detail

/// For every point, the min(k, n-1) nearest other points ordered by
/// (distance, index). Uses a cell grid searched in growing rings.
inline std::vector<std::vector<int>> knn_neighbors(const Matrix3X& x, int k) {
  const Eigen::Index n = x.cols();
  if (n < 2) throw GraphTooSmallError("k-NN graph needs at least 2 nodes, got " + std::to_string(n));
  if (k < 1) throw ConfigError("k must be positive");
  const int k_eff = static_cast<int>(std::min<Eigen::Index>(k, n - 1));

  const Eigen::Vector3d extent = x.rowwise().maxCoeff() - x.rowwise().minCoeff();
  const double volume = std::max(extent.prod(), 1e-9);
  double cell = std::cbrt(volume * (k_eff + 1) / static_cast<double>(n));
  cell = std::clamp(cell, 1.0, std::max(1.0, extent.maxCoeff() + 1.0));
  detail::SpatialGrid grid(x, cell);

  std::vector<std::vector<int>> out(static_cast<std::size_t>(n));
  std::vector<std::pair<double, int>> cand;
  for (Eigen::Index i = 0; i < n; ++i) {
    cand.clear();
    const auto c = grid.cell_of(x.col(i));
    for (long r = 0;; ++r) {
      grid.visit_ring(c, r, [&](int j) {
        if (j != i) cand.emplace_back(detail::squared_distance(x, i, j), j);
      });
      if (r >= grid.max_ring()) break;
      if (static_cast<int>(cand.size()) >= k_eff) {
        std::nth_element(cand.begin(), cand.begin() + (k_eff - 1), cand.end());
        const double kth = cand[static_cast<std::size_t>(k_eff - 1)].first;
        // Unvisited points lie at least r*cell away.
        const double bound = static_cast<double>(r) * grid.cell();
        if (kth < bound * bound) break;
      }
    }
    std::partial_sort(cand.begin(), cand.begin() + k_eff, cand.end());
    auto& nb = out[static_cast<std::size_t>(i)];
    nb.reserve(static_cast<std::size_t>(k_eff));
    for (int t = 0; t < k_eff; ++t) nb.push_back(cand[static_cast<std::size_t>(t)].second);
  }
  return out;
}

/// Per-line float values in atom serial order.
inline std::vector<double> read_surface_override(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw OverrideError("cannot open surface proximity file '" + path + "'");
  std::vector<double> values;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = detail::trim(line);
    if (t.empty()) continue;
    const auto v = detail::parse_number<double>(t);
    if (!v || !std::isfinite(*v)) throw OverrideError("bad surface proximity value on line " + std::to_string(lineno));
    values.push_back(*v);
  }
  return values;
}

/// 1 - min(1, c_i / 64) with c_i the same-chain heavy atoms within 10 A,
/// or the override values when supplied.
inline std::vector<double> surface_proximity(const ComplexStructure& s,
                                             const std::optional<std::vector<double>>& override_values = std::nullopt) {
  const std::size_t n = s.atom_count();
  if (override_values) {
    if (override_values->size() != n)
      throw OverrideError("surface proximity override has " + std::to_string(override_values->size()) +
                          " values for " + std::to_string(n) + " atoms");
    return *override_values;
  }
  std::vector<double> out;
  out.reserve(n);
  const double r2 = kSurfaceRadius * kSurfaceRadius;
  for (const auto& chain : s.chains) {
    std::vector<Eigen::Vector3d> pts;
    for (const auto& r : chain.residues)
      for (const auto& a : r.atoms) pts.push_back(a.coord);
    const Eigen::Index m = static_cast<Eigen::Index>(pts.size());
    Matrix3X x(3, m);
    for (Eigen::Index i = 0; i < m; ++i) x.col(i) = pts[static_cast<std::size_t>(i)];
    detail::SpatialGrid grid(x, kSurfaceRadius);
    for (Eigen::Index i = 0; i < m; ++i) {
      int count = 0;
      const auto c = grid.cell_of(x.col(i));
      grid.visit_ring(c, 0, [&](int j) { count += (j != i && detail::squared_distance(x, i, j) <= r2); });
      grid.visit_ring(c, 1, [&](int j) { count += (detail::squared_distance(x, i, j) <= r2); });
      out.push_back(1.0 - std::min(1.0, count / kSurfaceMaxCount));
    }
  }
  return out;
}

/// Signed torsion angle (radians) defined by four points.
inline double dihedral_angle(const Eigen::Vector3d& p0, const Eigen::Vector3d& p1, const Eigen::Vector3d& p2,
                             const Eigen::Vector3d& p3) {
  const Eigen::Vector3d b1 = p1 - p0;
  const Eigen::Vector3d b2 = p2 - p1;
  const Eigen::Vector3d b3 = p3 - p2;
  const Eigen::Vector3d n1 = b1.cross(b2);
  const Eigen::Vector3d n2 = b2.cross(b3);
  const double bn = b2.norm();
  if (bn < 1e-12) return 0.0;
  return std::atan2(n1.cross(n2).dot(b2) / bn, n1.dot(n2));
}

namespace detail {

inline const Atom* find_atom(const Residue& r, std::string_view name) {
  for (const auto& a : r.atoms)
    if (a.name == name) return &a;
  return nullptr;
}

/// (sin, cos) of a dihedral, or (0, 1) when any defining atom is missing.
inline std::pair<double, double> dihedral_pair(const Atom* a, const Atom* b, const Atom* c, const Atom* d) {
  if (!a || !b || !c || !d) return {0.0, 1.0};
  const double t = dihedral_angle(a->coord, b->coord, c->coord, d->coord);
  return {std::sin(t), std::cos(t)};
}

}  // namespace detail

/// Rows 0-37 atom type one-hot, row 38 surface proximity (if enabled).
inline Eigen::MatrixXd node_features_allatom(const ComplexStructure& s, const std::vector<double>& proximity,
                                             const FeatureOptions& opts = {}) {
  const auto refs = s.atom_refs();
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(node_feature_width(Granularity::AllAtom, opts),
                                            static_cast<Eigen::Index>(refs.size()));
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    f(static_cast<Eigen::Index>(atom_type_index(s.atom(refs[i]).name)), col) = 1.0;
    if (opts.surface_proximity) f(38, col) = proximity[i];
  }
  return f;
}

/// One column per Cα: residue one-hot (21), surface proximity, then
/// sin/cos of phi, psi, omega.
inline Eigen::MatrixXd node_features_ca(const ComplexStructure& s, const std::vector<double>& proximity,
                                        const FeatureOptions& opts = {}) {
  std::vector<Eigen::VectorXd> cols;
  const int width = node_feature_width(Granularity::CAlpha, opts);
  std::size_t flat_atom = 0;
  for (const auto& chain : s.chains) {
    for (std::size_t r = 0; r < chain.residues.size(); ++r) {
      const Residue& res = chain.residues[r];
      std::size_t ca_flat = flat_atom;
      const Atom* ca = nullptr;
      for (std::size_t a = 0; a < res.atoms.size(); ++a)
        if (res.atoms[a].name == "CA") {
          ca = &res.atoms[a];
          ca_flat = flat_atom + a;
        }
      flat_atom += res.atoms.size();
      if (!ca) continue;

      Eigen::VectorXd v = Eigen::VectorXd::Zero(width);
      v(static_cast<Eigen::Index>(residue_type_index(res.residue_name))) = 1.0;
      int row = 21;
      if (opts.surface_proximity) v(row++) = proximity[ca_flat];
      const Residue* prev = r > 0 ? &chain.residues[r - 1] : nullptr;
      const Residue* next = r + 1 < chain.residues.size() ? &chain.residues[r + 1] : nullptr;
      using detail::find_atom;
      const Atom* n = find_atom(res, "N");
      const Atom* c = find_atom(res, "C");
      const auto phi = detail::dihedral_pair(prev ? find_atom(*prev, "C") : nullptr, n, ca, c);
      const auto psi = detail::dihedral_pair(n, ca, c, next ? find_atom(*next, "N") : nullptr);
      const auto omega = detail::dihedral_pair(ca, c, next ? find_atom(*next, "N") : nullptr,
                                               next ? find_atom(*next, "CA") : nullptr);
      v(row++) = phi.first;
      v(row++) = phi.second;
      v(row++) = psi.first;
      v(row++) = psi.second;
      v(row++) = omega.first;
      v(row++) = omega.second;
      cols.push_back(std::move(v));
    }
  }
  Eigen::MatrixXd f(width, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) f.col(static_cast<Eigen::Index>(i)) = cols[i];
  return f;
}

/// Unit quaternion (w, x, y, z) with w >= 0 of a rotation matrix.
inline Eigen::Vector4d rotation_quaternion(const Eigen::Matrix3d& r) {
  Eigen::Quaterniond q(r);
  q.normalize();
  Eigen::Vector4d v(q.w(), q.x(), q.y(), q.z());
  if (v(0) < 0) v = -v;
  return v;
}

/// The 12 relative geometric values for edge j -> i.
inline Eigen::Matrix<double, 12, 1> relative_geometry(const Eigen::Vector3d& xi, const Eigen::Vector3d& xj,
                                                      const ResidueFrame& fi, const ResidueFrame& fj) {
  Eigen::Matrix<double, 12, 1> g;
  const Eigen::Vector3d delta = xj - xi;
  const double d = delta.norm();
  const Eigen::Vector3d unit = d > 0 ? Eigen::Vector3d(delta / d) : Eigen::Vector3d::Zero();
  g(0) = d / 10.0;
  g.segment<3>(1) = fi.rotation.transpose() * unit;
  g.segment<3>(4) = fj.rotation.transpose() * (-unit);
  g.segment<4>(7) = rotation_quaternion(fi.rotation.transpose() * fj.rotation);
  g(11) = 1.0 / (1.0 + d);
  return g;
}

/// Fills graph.edge_features from the structure the graph was built on.
inline Eigen::MatrixXd edge_features(const ComplexStructure& s, const ComplexGraph& graph) {
  const auto frames = build_residue_frames(s);
  const auto refs = s.atom_refs();
  const int width = edge_feature_width(graph.granularity, graph.options);
  Eigen::MatrixXd e(width, static_cast<Eigen::Index>(graph.edge_count()));
  for (std::size_t k = 0; k < graph.edge_count(); ++k) {
    const int j = graph.src[k];
    const int i = graph.dst[k];
    const auto col = static_cast<Eigen::Index>(k);
    const auto ui = static_cast<std::size_t>(i);
    const auto uj = static_cast<std::size_t>(j);
    const bool same_chain = graph.chain_of_node[ui] == graph.chain_of_node[uj];
    e(0, col) = same_chain ? 1.0 : 0.0;
    e(1, col) = std::sin(static_cast<double>(i - j));
    int row = 2;
    const Eigen::Vector3d xi = graph.coords.col(i);
    const Eigen::Vector3d xj = graph.coords.col(j);
    if (graph.options.relative_geometry) {
      e.block<12, 1>(row, col) =
          relative_geometry(xi, xj, frames[graph.residue_of_node[ui]], frames[graph.residue_of_node[uj]]);
      row += kGeometricFeatureCount;
    }
    if (graph.granularity == Granularity::AllAtom) {
      const Atom& ai = s.atom(refs[graph.atom_of_node[ui]]);
      const Atom& aj = s.atom(refs[graph.atom_of_node[uj]]);
      const bool bonded = same_chain && std::abs(ai.residue_index - aj.residue_index) <= 1 &&
                          (xi - xj).norm() <= kCovalentCutoff;
      e(row, col) = bonded ? 1.0 : 0.0;
    }
  }
  return e;
}

/// k-NN graph over all heavy atoms or over Cα atoms, with every feature filled.
inline ComplexGraph build_knn_graph(const ComplexStructure& s, Granularity granularity, int k = 20,
                                    const FeatureOptions& opts = {},
                                    const std::optional<std::vector<double>>& surface_override = std::nullopt) {
  ComplexGraph g;
  g.granularity = granularity;
  g.options = opts;

  std::vector<Eigen::Vector3d> pts;
  std::size_t flat_atom = 0;
  std::size_t flat_res = 0;
  for (const auto& chain : s.chains) {
    for (const auto& res : chain.residues) {
      for (const auto& a : res.atoms) {
        const bool is_ca = a.name == "CA";
        if (granularity == Granularity::AllAtom || is_ca) {
          pts.push_back(a.coord);
          g.ca_mask.push_back(is_ca);
          g.residue_of_node.push_back(flat_res);
          g.chain_of_node.push_back(chain.chain_id);
          g.atom_of_node.push_back(flat_atom);
        }
        ++flat_atom;
      }
      ++flat_res;
    }
  }
  const auto n = static_cast<Eigen::Index>(pts.size());
  if (n < 2) throw GraphTooSmallError("graph needs at least 2 nodes, got " + std::to_string(n));
  g.coords.resize(3, n);
  for (Eigen::Index i = 0; i < n; ++i) g.coords.col(i) = pts[static_cast<std::size_t>(i)];
  g.initial_coords = g.coords;

  const auto nbrs = knn_neighbors(g.coords, k);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int j : nbrs[static_cast<std::size_t>(i)]) {
      g.src.push_back(j);
      g.dst.push_back(static_cast<int>(i));
    }

  const auto prox = opts.surface_proximity ? surface_proximity(s, surface_override) : std::vector<double>{};
  g.node_features = granularity == Granularity::AllAtom ? node_features_allatom(s, prox, opts)
                                                        : node_features_ca(s, prox, opts);
  g.edge_features = edge_features(s, g);
  return g;
}

/// Adds i.i.d. N(0, sigma^2) noise to the coordinates; the corrupted
/// positions also become the anchor coordinates of the graph.
template <typename Rng>
void corrupt_coordinates(ComplexGraph& graph, double sigma, Rng& rng) {
  if (sigma < 0) throw ConfigError("noise sigma must be non-negative");
  if (sigma == 0) return;
  std::normal_distribution<double> noise(0.0, sigma);
  for (Eigen::Index i = 0; i < graph.coords.cols(); ++i)
    for (int a = 0; a < 3; ++a) graph.coords(a, i) += noise(rng);
  graph.initial_coords = graph.coords;
}

inline void corrupt_coordinates(ComplexGraph& graph, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  corrupt_coordinates(graph, sigma, rng);
}

}  // namespace egr

#pragma once

// Fixtures and independent reference implementations shared by the tests.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "egr/egr.hpp"

namespace egr::test {

inline constexpr double kPi = 3.14159265358979323846;

inline Atom make_atom(const std::string& name, const Eigen::Vector3d& p, const std::string& chain, int res) {
  Atom a;
  a.name = name;
  a.element = name.substr(0, 1);
  a.coord = p;
  a.chain_id = chain;
  a.residue_index = res;
  return a;
}

/// Ideal-ish helix: backbone N, CA, C, O plus CB, axis along z through `origin`.
inline Chain helix_chain(const std::string& id, int residues, const Eigen::Vector3d& origin, double phase = 0.0,
                         int first_index = 1) {
  static const char* names[] = {"ALA", "LEU", "GLU", "LYS", "SER", "VAL", "ARG", "ASP", "ILE", "THR"};
  struct Site {
    const char* name;
    double radius, angle_deg, dz;
  };
  static const Site sites[] = {{"N", 1.55, -28.0, -0.85}, {"CA", 2.30, 0.0, 0.0}, {"C", 1.65, 30.0, 0.85},
                               {"O", 1.90, 45.0, 2.05},   {"CB", 3.30, -8.0, -0.60}};
  Chain c{id, {}};
  for (int k = 0; k < residues; ++k) {
    Residue r{first_index + k, names[k % 10], {}};
    const double theta = phase + k * 100.0 * kPi / 180.0;
    for (const auto& s : sites) {
      const double a = theta + s.angle_deg * kPi / 180.0;
      const Eigen::Vector3d p = origin + Eigen::Vector3d(s.radius * std::cos(a), s.radius * std::sin(a), 1.5 * k + s.dz);
      r.atoms.push_back(make_atom(s.name, p, id, r.residue_index));
    }
    c.residues.push_back(std::move(r));
  }
  return c;
}

/// Two parallel helices whose surfaces touch: a small two-chain complex.
inline ComplexStructure helix_dimer(int residues_a = 8, int residues_b = 6, double separation = 9.0) {
  ComplexStructure s;
  s.chains.push_back(helix_chain("A", residues_a, Eigen::Vector3d::Zero()));
  s.chains.push_back(helix_chain("B", residues_b, Eigen::Vector3d(separation, 0.0, 1.0), kPi));
  return s;
}

inline Eigen::Matrix3d random_rotation(std::mt19937_64& rng, bool proper = true) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  Eigen::Matrix3d u = q.toRotationMatrix();
  if (!proper) u.col(2) *= -1.0;
  return u;
}

inline Eigen::Vector3d random_vector(std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  return {u(rng), u(rng), u(rng)};
}

inline Matrix3X transform(const Matrix3X& x, const Eigen::Matrix3d& u, const Eigen::Vector3d& b) {
  return (u * x).colwise() + b;
}

inline ComplexStructure transformed(ComplexStructure s, const Eigen::Matrix3d& u, const Eigen::Vector3d& b) {
  s.set_coords(transform(s.coords(), u, b));
  return s;
}

inline ComplexStructure jittered(ComplexStructure s, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, sigma);
  Matrix3X x = s.coords();
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] += n(rng);
  s.set_coords(x);
  return s;
}

/// Random complex of `chains` chains; atoms drawn from the standard names.
inline ComplexStructure random_complex(std::mt19937_64& rng, int atoms, int chains = 2, double box = 12.0) {
  static const char* names[] = {"N", "CA", "C", "O", "CB", "CG", "OG", "NZ", "SD", "CD1"};
  std::uniform_real_distribution<double> u(0.0, box);
  ComplexStructure s;
  const int per_chain = std::max(1, atoms / chains);
  int made = 0;
  for (int c = 0; c < chains; ++c) {
    Chain ch{std::string(1, static_cast<char>('A' + c)), {}};
    const int count = c + 1 == chains ? atoms - made : per_chain;
    for (int k = 0; k < count; ++k) {
      const int res = k / 5 + 1;
      if (ch.residues.empty() || ch.residues.back().residue_index != res) ch.residues.push_back({res, "ALA", {}});
      const Eigen::Vector3d p(u(rng) + 4.0 * c, u(rng), u(rng));
      ch.residues.back().atoms.push_back(make_atom(names[k % 5 + (k / 5 % 2) * 5], p, ch.chain_id, res));
    }
    made += count;
    s.chains.push_back(std::move(ch));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Reference implementations. Deliberately naive: O(n^2) scans and direct formulas.

/// Sorted (distance^2, index) order with ties by index; first k entries.
inline std::vector<std::vector<int>> brute_knn(const Matrix3X& x, int k) {
  const auto n = x.cols();
  std::vector<std::vector<int>> out(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<std::pair<double, int>> d;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) d.emplace_back((x.col(i) - x.col(j)).squaredNorm(), static_cast<int>(j));
    std::sort(d.begin(), d.end());
    const auto keep = std::min<std::size_t>(static_cast<std::size_t>(k), d.size());
    for (std::size_t t = 0; t < keep; ++t) out[static_cast<std::size_t>(i)].push_back(d[t].second);
  }
  return out;
}

/// Torsion via the angle between plane normals with the sign from b2.
inline double brute_torsion(const Eigen::Vector3d& a, const Eigen::Vector3d& b, const Eigen::Vector3d& c,
                            const Eigen::Vector3d& d) {
  const Eigen::Vector3d n1 = (b - a).cross(c - b).normalized();
  const Eigen::Vector3d n2 = (c - b).cross(d - c).normalized();
  const double angle = std::acos(std::clamp(n1.dot(n2), -1.0, 1.0));
  return n1.cross(n2).dot(c - b) < 0 ? -angle : angle;
}

struct BruteLddt {
  std::vector<std::optional<double>> per_residue;
  std::optional<double> global;
};

/// Enumerates every ordered matched-Cα pair and every threshold.
inline BruteLddt brute_lddt(const std::vector<Eigen::Vector3d>& decoy_ca, const std::vector<Eigen::Vector3d>& native_ca) {
  const double thresholds[] = {0.5, 1.0, 2.0, 4.0};
  BruteLddt out;
  double total = 0.0;
  int defined = 0;
  for (std::size_t i = 0; i < native_ca.size(); ++i) {
    int pairs = 0, kept = 0;
    for (std::size_t j = 0; j < native_ca.size(); ++j) {
      if (i == j) continue;
      const double dn = (native_ca[i] - native_ca[j]).norm();
      if (!(dn < 15.0)) continue;
      ++pairs;
      const double dd = (decoy_ca[i] - decoy_ca[j]).norm();
      for (double t : thresholds)
        if (std::abs(dd - dn) < t) ++kept;
    }
    if (pairs == 0) {
      out.per_residue.push_back(std::nullopt);
      continue;
    }
    const double score = static_cast<double>(kept) / (4.0 * pairs);
    out.per_residue.push_back(score);
    total += score;
    ++defined;
  }
  if (defined) out.global = total / defined;
  return out;
}

/// Residue contacts by scanning every cross-chain atom pair.
inline std::set<std::pair<std::pair<std::string, int>, std::pair<std::string, int>>> brute_contacts(
    const ComplexStructure& s, double cutoff) {
  std::set<std::pair<std::pair<std::string, int>, std::pair<std::string, int>>> out;
  const auto refs = s.atom_refs();
  for (std::size_t a = 0; a < refs.size(); ++a)
    for (std::size_t b = a + 1; b < refs.size(); ++b) {
      const Atom& x = s.atom(refs[a]);
      const Atom& y = s.atom(refs[b]);
      if (x.chain_id == y.chain_id) continue;
      if ((x.coord - y.coord).norm() >= cutoff) continue;
      auto p = std::make_pair(x.chain_id, s.residue(refs[a]).residue_index);
      auto q = std::make_pair(y.chain_id, s.residue(refs[b]).residue_index);
      if (q < p) std::swap(p, q);
      out.emplace(p, q);
    }
  return out;
}

inline double relative_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const double scale = std::max(a.norm(), b.norm());
  return scale == 0.0 ? 0.0 : (a - b).norm() / scale;
}

/// Small model for fast tests.
inline EgrConfig small_config(int layers = 2, int dim = 8, int window = 8) {
  EgrConfig c;
  c.num_layers = layers;
  c.hidden_dim = dim;
  c.window_size = window;
  return c;
}

/// Parameters with every block randomised, including the zero-initialised ones.
inline EgrParams random_params(const EgrConfig& config, std::uint64_t seed, double scale = 0.3) {
  EgrParams p = init_params(config, seed);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& b : p.blocks())
    for (Eigen::Index i = 0; i < b.value.size(); ++i) b.value.data()[i] += u(rng);
  return p;
}

}  // namespace egr::test

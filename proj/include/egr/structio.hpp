#pragma once

// Parsing, writing and rigid alignment of all-atom protein complexes.

#include <Eigen/Dense>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "egr/error.hpp"

namespace egr {

using Matrix3X = Eigen::Matrix<double, 3, Eigen::Dynamic>;

struct Atom {
  std::string name;
  std::string element;
  Eigen::Vector3d coord = Eigen::Vector3d::Zero();
  int residue_index = 0;
  std::string chain_id;
  int serial = 0;
};

struct Residue {
  int residue_index = 0;
  std::string residue_name;
  std::vector<Atom> atoms;
};

struct Chain {
  std::string chain_id;
  std::vector<Residue> residues;
};

/// Position of an atom inside the chain/residue hierarchy.
struct AtomRef {
  std::size_t chain = 0;
  std::size_t residue = 0;
  std::size_t atom = 0;
};

/// Heavy-atom protein complex. Global atom and residue indices follow the
/// flattened chain -> residue -> atom order.
struct ComplexStructure {
  std::vector<Chain> chains;

  std::size_t atom_count() const {
    std::size_t n = 0;
    for (const auto& c : chains)
      for (const auto& r : c.residues) n += r.atoms.size();
    return n;
  }

  std::size_t residue_count() const {
    std::size_t n = 0;
    for (const auto& c : chains) n += c.residues.size();
    return n;
  }

  std::vector<AtomRef> atom_refs() const {
    std::vector<AtomRef> refs;
    refs.reserve(atom_count());
    for (std::size_t c = 0; c < chains.size(); ++c)
      for (std::size_t r = 0; r < chains[c].residues.size(); ++r)
        for (std::size_t a = 0; a < chains[c].residues[r].atoms.size(); ++a) refs.push_back({c, r, a});
    return refs;
  }

  const Atom& atom(const AtomRef& ref) const { return chains[ref.chain].residues[ref.residue].atoms[ref.atom]; }
  const Residue& residue(const AtomRef& ref) const { return chains[ref.chain].residues[ref.residue]; }

  Matrix3X coords() const {
    Matrix3X x(3, static_cast<Eigen::Index>(atom_count()));
    Eigen::Index i = 0;
    for (const auto& c : chains)
      for (const auto& r : c.residues)
        for (const auto& a : r.atoms) x.col(i++) = a.coord;
    return x;
  }

  void set_coords(const Matrix3X& x) {
    if (static_cast<std::size_t>(x.cols()) != atom_count())
      throw Error("coordinate override has " + std::to_string(x.cols()) + " columns, structure has " +
                  std::to_string(atom_count()) + " atoms");
    Eigen::Index i = 0;
    for (auto& c : chains)
      for (auto& r : c.residues)
        for (auto& a : r.atoms) a.coord = x.col(i++);
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::string_view columns(std::string_view line, std::size_t first, std::size_t count) {
  if (first >= line.size()) return {};
  return line.substr(first, std::min(count, line.size() - first));
}

template <typename T>
std::optional<T> parse_number(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  T value{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return value;
}

inline std::string infer_element(std::string_view name) {
  for (char ch : name)
    if (std::isalpha(static_cast<unsigned char>(ch))) return std::string(1, static_cast<char>(std::toupper(ch)));
  return {};
}

inline bool is_hydrogen(const std::string& element) { return element == "H" || element == "D"; }

}  // namespace detail

/// Reads ATOM records of the first model. HETATM, hydrogens and alternate
/// locations other than blank/'A' are dropped; the first copy of a
/// (chain, residue, atom name) key wins.
inline ComplexStructure parse_pdb(std::istream& in) {
  ComplexStructure s;
  std::unordered_map<std::string, std::size_t> chain_slot;
  // Per chain: last raw (resSeq, iCode) and the running index offset.
  struct ChainCursor {
    int last_seq = 0;
    char last_icode = 0;
    int offset = 0;
    bool any = false;
  };
  std::vector<ChainCursor> cursors;

  std::string line;
  std::size_t lineno = 0;
  bool in_model = false;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view v(line);
    if (v.rfind("MODEL", 0) == 0) {
      in_model = true;
      continue;
    }
    if (v.rfind("ENDMDL", 0) == 0) {
      if (in_model) break;
      continue;
    }
    if (v.rfind("ATOM", 0) != 0) continue;
    if (v.size() < 54) throw ParseError(lineno, "ATOM record shorter than 54 columns");

    const auto name = std::string(detail::trim(detail::columns(v, 12, 4)));
    if (name.empty()) throw ParseError(lineno, "empty atom name");
    const char altloc = v[16];
    const auto res_name = std::string(detail::trim(detail::columns(v, 17, 3)));
    const std::string chain_id(1, v[21]);
    const auto res_seq = detail::parse_number<int>(detail::columns(v, 22, 4));
    if (!res_seq) throw ParseError(lineno, "bad residue number");
    const char icode = v.size() > 26 ? v[26] : ' ';
    const auto x = detail::parse_number<double>(detail::columns(v, 30, 8));
    const auto y = detail::parse_number<double>(detail::columns(v, 38, 8));
    const auto z = detail::parse_number<double>(detail::columns(v, 46, 8));
    if (!x || !y || !z) throw ParseError(lineno, "bad coordinate field");
    if (!std::isfinite(*x) || !std::isfinite(*y) || !std::isfinite(*z))
      throw ParseError(lineno, "non-finite coordinate");

    std::string element(detail::trim(detail::columns(v, 76, 2)));
    std::transform(element.begin(), element.end(), element.begin(),
                   [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
    if (element.empty()) element = detail::infer_element(name);
    if (detail::is_hydrogen(element)) continue;
    if (altloc != ' ' && altloc != 'A') continue;

    auto [it, inserted] = chain_slot.try_emplace(chain_id, s.chains.size());
    if (inserted) {
      s.chains.push_back(Chain{chain_id, {}});
      cursors.emplace_back();
    }
    Chain& chain = s.chains[it->second];
    ChainCursor& cur = cursors[it->second];

    const bool new_residue = !cur.any || *res_seq != cur.last_seq || icode != cur.last_icode;
    if (new_residue) {
      int index = *res_seq + cur.offset;
      if (!chain.residues.empty() && index <= chain.residues.back().residue_index) {
        const int bump = chain.residues.back().residue_index + 1 - index;
        cur.offset += bump;
        index += bump;
      }
      chain.residues.push_back(Residue{index, res_name, {}});
      cur.last_seq = *res_seq;
      cur.last_icode = icode;
      cur.any = true;
    }
    Residue& residue = chain.residues.back();
    const bool duplicate = std::any_of(residue.atoms.begin(), residue.atoms.end(),
                                       [&](const Atom& a) { return a.name == name; });
    if (duplicate) continue;

    Atom atom;
    atom.name = name;
    atom.element = element;
    atom.coord = Eigen::Vector3d(*x, *y, *z);
    atom.residue_index = residue.residue_index;
    atom.chain_id = chain_id;
    atom.serial = detail::parse_number<int>(detail::columns(v, 6, 5)).value_or(static_cast<int>(lineno));
    residue.atoms.push_back(std::move(atom));
  }

  if (s.atom_count() == 0) throw EmptyStructureError("no heavy ATOM records after filtering");
  return s;
}

inline ComplexStructure parse_pdb(const std::string& text) {
  std::istringstream in(text);
  return parse_pdb(in);
}

namespace detail {

inline std::string format_coord(double v) {
  char buf[32];
  const int len = std::snprintf(buf, sizeof buf, "%8.3f", v);
  if (len != 8 || !std::isfinite(v)) throw FormatOverflowError("coordinate " + std::to_string(v) + " does not fit PDB %8.3f");
  return buf;
}

inline std::string format_atom_name(const std::string& name, const std::string& element) {
  if (name.size() >= 4 || element.size() != 1) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "%-4.4s", name.c_str());
    return buf;
  }
  char buf[8];
  std::snprintf(buf, sizeof buf, " %-3s", name.c_str());
  return buf;
}

}  // namespace detail

/// Fixed-column PDB text. Serial numbers are reassigned from 1, a TER record
/// closes each chain and the file ends with END.
inline std::string write_pdb(const ComplexStructure& s, const std::optional<Matrix3X>& coords = std::nullopt) {
  if (coords && static_cast<std::size_t>(coords->cols()) != s.atom_count())
    throw Error("coordinate override has " + std::to_string(coords->cols()) + " columns, structure has " +
                std::to_string(s.atom_count()) + " atoms");
  std::string out;
  int serial = 0;
  Eigen::Index col = 0;
  char buf[128];
  for (const auto& chain : s.chains) {
    const char chain_char = chain.chain_id.empty() ? ' ' : chain.chain_id[0];
    for (const auto& res : chain.residues) {
      if (res.residue_index < -999 || res.residue_index > 9999)
        throw FormatOverflowError("residue index " + std::to_string(res.residue_index) + " does not fit 4 columns");
      for (const auto& atom : res.atoms) {
        if (++serial > 99999) throw FormatOverflowError("more than 99999 records");
        const Eigen::Vector3d p = coords ? Eigen::Vector3d(coords->col(col)) : atom.coord;
        ++col;
        const std::string xs = detail::format_coord(p.x());
        const std::string ys = detail::format_coord(p.y());
        const std::string zs = detail::format_coord(p.z());
        std::snprintf(buf, sizeof buf, "ATOM  %5d %s %3.3s %c%4d    %s%s%s%6.2f%6.2f          %2.2s\n", serial,
                      detail::format_atom_name(atom.name, atom.element).c_str(), res.residue_name.c_str(), chain_char,
                      res.residue_index, xs.c_str(), ys.c_str(), zs.c_str(), 1.0, 0.0, atom.element.c_str());
        out += buf;
      }
    }
    if (!chain.residues.empty()) {
      const auto& last = chain.residues.back();
      if (++serial > 99999) throw FormatOverflowError("more than 99999 records");
      std::snprintf(buf, sizeof buf, "TER   %5d      %3.3s %c%4d\n", serial, last.residue_name.c_str(), chain_char,
                    last.residue_index);
      out += buf;
    }
  }
  out += "END\n";
  return out;
}

/// Pairs of (decoy atom index, native atom index) with identical
/// (chain_id, residue_index, atom name) keys.
struct AtomCorrespondence {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<std::pair<std::size_t, std::size_t>> matched_ca;
};

inline AtomCorrespondence match_atoms(const ComplexStructure& decoy, const ComplexStructure& native) {
  using Key = std::tuple<std::string, int, std::string>;
  std::map<Key, std::size_t> native_index;
  {
    std::size_t i = 0;
    for (const auto& c : native.chains)
      for (const auto& r : c.residues)
        for (const auto& a : r.atoms) native_index.emplace(Key{c.chain_id, r.residue_index, a.name}, i++);
  }
  AtomCorrespondence out;
  std::size_t i = 0;
  for (const auto& c : decoy.chains)
    for (const auto& r : c.residues)
      for (const auto& a : r.atoms) {
        auto it = native_index.find(Key{c.chain_id, r.residue_index, a.name});
        if (it != native_index.end()) {
          out.pairs.emplace_back(i, it->second);
          if (a.name == "CA") out.matched_ca.emplace_back(i, it->second);
        }
        ++i;
      }
  if (out.pairs.empty()) throw NoOverlapError("decoy and native share no (chain, residue, atom) keys");
  return out;
}

/// target ~= rotation * mobile + translation
struct Superposition {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  double rmsd = 0.0;

  Matrix3X apply(const Matrix3X& x) const { return (rotation * x).colwise() + translation; }
};

/// Least-squares proper rigid superposition (Kabsch) of `mobile` onto `target`.
inline Superposition kabsch_superpose(const Matrix3X& mobile, const Matrix3X& target,
                                      const std::optional<Eigen::VectorXd>& weights = std::nullopt) {
  const Eigen::Index m = mobile.cols();
  if (target.cols() != m) throw AlignmentError("mobile and target point counts differ");
  if (m < 3) throw AlignmentError("superposition needs at least 3 points");
  Eigen::VectorXd w = weights ? *weights : Eigen::VectorXd::Ones(m);
  if (w.size() != m) throw AlignmentError("weight count differs from point count");
  if ((w.array() < 0).any() || !w.allFinite()) throw AlignmentError("weights must be finite and non-negative");
  const double wsum = w.sum();
  if (wsum <= 0) throw AlignmentError("weights sum to zero");

  const Eigen::Vector3d pc = (mobile * w) / wsum;
  const Eigen::Vector3d qc = (target * w) / wsum;
  const Matrix3X p = mobile.colwise() - pc;
  const Matrix3X q = target.colwise() - qc;

  auto rank_deficient = [&](const Matrix3X& pts) {
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(pts * w.asDiagonal() * pts.transpose());
    const auto sv = svd.singularValues();
    return sv(1) <= 1e-12 * std::max(sv(0), 1e-300);
  };
  if (rank_deficient(p) || rank_deficient(q)) throw AlignmentError("degenerate (collinear) point set");

  const Eigen::Matrix3d h = p * w.asDiagonal() * q.transpose();
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Matrix3d u = svd.matrixU();
  const Eigen::Matrix3d v = svd.matrixV();
  Eigen::Matrix3d fix = Eigen::Matrix3d::Identity();
  fix(2, 2) = (v * u.transpose()).determinant() < 0 ? -1.0 : 1.0;

  Superposition out;
  out.rotation = v * fix * u.transpose();
  out.translation = qc - out.rotation * pc;
  const Matrix3X diff = out.apply(mobile) - target;
  out.rmsd = std::sqrt((diff.colwise().squaredNorm().transpose().array() * w.array()).sum() / wsum);
  return out;
}

/// Local residue coordinate system; columns of `rotation` are the frame axes.
struct ResidueFrame {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
};

inline ResidueFrame residue_frame(const Residue& res) {
  const Atom* n = nullptr;
  const Atom* ca = nullptr;
  const Atom* c = nullptr;
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& a : res.atoms) {
    centroid += a.coord;
    if (a.name == "N") n = &a;
    else if (a.name == "CA") ca = &a;
    else if (a.name == "C") c = &a;
  }
  ResidueFrame f;
  if (!res.atoms.empty()) f.origin = centroid / static_cast<double>(res.atoms.size());
  if (!n || !ca || !c) return f;

  const Eigen::Vector3d u1 = c->coord - ca->coord;
  if (u1.norm() < 1e-8) return f;
  const Eigen::Vector3d e1 = u1.normalized();
  const Eigen::Vector3d v = n->coord - ca->coord;
  const Eigen::Vector3d u2 = v - v.dot(e1) * e1;
  if (u2.norm() < 1e-8) return f;
  const Eigen::Vector3d e2 = u2.normalized();
  f.origin = ca->coord;
  f.rotation.col(0) = e1;
  f.rotation.col(1) = e2;
  f.rotation.col(2) = e1.cross(e2);
  return f;
}

/// One frame per residue in flattened residue order.
inline std::vector<ResidueFrame> build_residue_frames(const ComplexStructure& s) {
  std::vector<ResidueFrame> frames;
  frames.reserve(s.residue_count());
  for (const auto& c : s.chains)
    for (const auto& r : c.residues) frames.push_back(residue_frame(r));
  return frames;
}

}  // namespace egr

#pragma once

// Docking and local-distance quality metrics for decoy/native complexes.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "egr/error.hpp"
#include "egr/featurize.hpp"
#include "egr/structio.hpp"

namespace egr {

inline constexpr double kContactCutoff = 5.0;
inline constexpr double kInterfaceCutoff = 10.0;
inline constexpr double kDockqLigandScale = 8.5;
inline constexpr double kDockqInterfaceScale = 1.5;
inline constexpr double kLddtRadius = 15.0;
inline constexpr std::array<double, 4> kLddtThresholds = {0.5, 1.0, 2.0, 4.0};

using ResidueKey = std::pair<std::string, int>;  // (chain_id, residue_index)
using ContactSet = std::set<std::pair<ResidueKey, ResidueKey>>;

namespace detail {

inline bool is_backbone(const std::string& name) { return name == "N" || name == "CA" || name == "C" || name == "O"; }

/// Calls fn(atom i, atom j) for every cross-chain atom pair closer than cutoff, i < j.
template <typename Fn>
void cross_chain_pairs(const ComplexStructure& s, double cutoff, Fn&& fn) {
  const Matrix3X x = s.coords();
  const auto refs = s.atom_refs();
  if (x.cols() == 0) return;
  SpatialGrid grid(x, cutoff);
  const double c2 = cutoff * cutoff;
  for (Eigen::Index i = 0; i < x.cols(); ++i) {
    const auto cell = grid.cell_of(x.col(i));
    const auto visit = [&](int j) {
      if (j <= i || refs[static_cast<std::size_t>(i)].chain == refs[static_cast<std::size_t>(j)].chain) return;
      if (squared_distance(x, i, j) < c2) fn(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
    };
    grid.visit_ring(cell, 0, visit);
    grid.visit_ring(cell, 1, visit);
  }
}

inline std::pair<ResidueKey, ResidueKey> canonical(ResidueKey a, ResidueKey b) {
  if (b < a) std::swap(a, b);
  return {std::move(a), std::move(b)};
}

inline void require_interface(const ComplexStructure& s, const char* what) {
  if (s.chains.size() < 2) throw NoInterfaceError(std::string(what) + " has a single chain, no interface");
}

}  // namespace detail

/// Cross-chain residue pairs with any heavy-atom pair closer than `cutoff`.
inline ContactSet contacts(const ComplexStructure& s, double cutoff = kContactCutoff) {
  detail::require_interface(s, "structure");
  const auto refs = s.atom_refs();
  ContactSet out;
  detail::cross_chain_pairs(s, cutoff, [&](std::size_t i, std::size_t j) {
    const auto& ci = s.chains[refs[i].chain];
    const auto& cj = s.chains[refs[j].chain];
    out.insert(detail::canonical({ci.chain_id, ci.residues[refs[i].residue].residue_index},
                                 {cj.chain_id, cj.residues[refs[j].residue].residue_index}));
  });
  return out;
}

struct ContactFractions {
  double fnat = 0.0;
  double fnonnat = 0.0;
};

inline ContactFractions contact_fractions(const ContactSet& decoy, const ContactSet& native) {
  std::size_t shared = 0;
  for (const auto& c : decoy) shared += native.count(c);
  ContactFractions f;
  if (!native.empty()) f.fnat = static_cast<double>(shared) / static_cast<double>(native.size());
  if (!decoy.empty()) f.fnonnat = static_cast<double>(decoy.size() - shared) / static_cast<double>(decoy.size());
  return f;
}

inline ContactFractions fnat_fnonnat(const ComplexStructure& decoy, const ComplexStructure& native) {
  return contact_fractions(contacts(decoy), contacts(native));
}

/// Native residues with a cross-chain heavy atom closer than `cutoff`.
inline std::set<ResidueKey> interface_residues(const ComplexStructure& native, double cutoff = kInterfaceCutoff) {
  detail::require_interface(native, "native");
  const auto refs = native.atom_refs();
  std::set<ResidueKey> out;
  detail::cross_chain_pairs(native, cutoff, [&](std::size_t i, std::size_t j) {
    for (std::size_t k : {i, j}) {
      const auto& c = native.chains[refs[k].chain];
      out.emplace(c.chain_id, c.residues[refs[k].residue].residue_index);
    }
  });
  return out;
}

namespace detail {

inline double rmsd_after(const Superposition& sp, const Matrix3X& mobile, const Matrix3X& target) {
  const Matrix3X diff = sp.apply(mobile) - target;
  return std::sqrt(diff.colwise().squaredNorm().sum() / static_cast<double>(diff.cols()));
}

inline void collect(const std::vector<Eigen::Vector3d>& pts, Matrix3X& out) {
  out.resize(3, static_cast<Eigen::Index>(pts.size()));
  for (std::size_t i = 0; i < pts.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = pts[i];
}

}  // namespace detail

/// Backbone RMSD over the native interface after superposing those atoms.
inline double irmsd(const ComplexStructure& decoy, const ComplexStructure& native, const AtomCorrespondence& corr) {
  const auto iface = interface_residues(native);
  if (iface.empty()) throw UndefinedMetricError("native has no interface residues");
  const auto drefs = decoy.atom_refs();
  const auto nrefs = native.atom_refs();
  std::vector<Eigen::Vector3d> mob, tgt;
  for (const auto& [di, ni] : corr.pairs) {
    const auto& nr = nrefs[ni];
    const Atom& na = native.atom(nr);
    if (!detail::is_backbone(na.name)) continue;
    if (!iface.count({native.chains[nr.chain].chain_id, native.residue(nr).residue_index})) continue;
    mob.push_back(decoy.atom(drefs[di]).coord);
    tgt.push_back(na.coord);
  }
  if (mob.size() < 3) throw UndefinedMetricError("fewer than 3 matched interface backbone atoms");
  Matrix3X m, t;
  detail::collect(mob, m);
  detail::collect(tgt, t);
  return kabsch_superpose(m, t).rmsd;
}

/// Index of the receptor chain: most residues, ties to the smaller chain id.
inline std::size_t receptor_chain(const ComplexStructure& native) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < native.chains.size(); ++c) {
    const auto& a = native.chains[c];
    const auto& b = native.chains[best];
    if (a.residues.size() > b.residues.size() ||
        (a.residues.size() == b.residues.size() && a.chain_id < b.chain_id))
      best = c;
  }
  return best;
}

/// Ligand backbone RMSD after superposing on the receptor backbone.
inline double lrmsd(const ComplexStructure& decoy, const ComplexStructure& native, const AtomCorrespondence& corr) {
  detail::require_interface(native, "native");
  const std::size_t receptor = receptor_chain(native);
  const auto drefs = decoy.atom_refs();
  const auto nrefs = native.atom_refs();
  std::vector<Eigen::Vector3d> rec_mob, rec_tgt, lig_mob, lig_tgt;
  for (const auto& [di, ni] : corr.pairs) {
    const auto& nr = nrefs[ni];
    const Atom& na = native.atom(nr);
    if (!detail::is_backbone(na.name)) continue;
    const Eigen::Vector3d& dc = decoy.atom(drefs[di]).coord;
    if (nr.chain == receptor) {
      rec_mob.push_back(dc);
      rec_tgt.push_back(na.coord);
    } else {
      lig_mob.push_back(dc);
      lig_tgt.push_back(na.coord);
    }
  }
  if (rec_mob.size() < 3) throw UndefinedMetricError("receptor has fewer than 3 matched backbone atoms");
  if (lig_mob.empty()) throw UndefinedMetricError("ligand has no matched backbone atoms");
  Matrix3X rm, rt, lm, lt;
  detail::collect(rec_mob, rm);
  detail::collect(rec_tgt, rt);
  detail::collect(lig_mob, lm);
  detail::collect(lig_tgt, lt);
  return detail::rmsd_after(kabsch_superpose(rm, rt), lm, lt);
}

inline double scaled_rmsd(double rmsd, double scale) {
  const double r = rmsd / scale;
  return 1.0 / (1.0 + r * r);
}

inline double dockq(double fnat, double lrmsd_value, double irmsd_value) {
  return (fnat + scaled_rmsd(lrmsd_value, kDockqLigandScale) + scaled_rmsd(irmsd_value, kDockqInterfaceScale)) / 3.0;
}

enum class QualityClass { Incorrect = 0, Acceptable = 1, Medium = 2, High = 3 };

inline QualityClass quality_class(double dockq_value) {
  if (dockq_value >= 0.80) return QualityClass::High;
  if (dockq_value >= 0.49) return QualityClass::Medium;
  if (dockq_value >= 0.23) return QualityClass::Acceptable;
  return QualityClass::Incorrect;
}

inline const char* to_string(QualityClass c) {
  switch (c) {
    case QualityClass::High: return "high";
    case QualityClass::Medium: return "medium";
    case QualityClass::Acceptable: return "acceptable";
    case QualityClass::Incorrect: break;
  }
  return "incorrect";
}

struct ResidueLddt {
  std::string chain_id;
  int residue_index = 0;
  std::size_t decoy_atom = 0;  // flattened decoy index of the Cα
  std::optional<double> score;
};

struct LddtResult {
  std::vector<ResidueLddt> residues;  // one per matched Cα, in correspondence order
  std::optional<double> global;       // mean of the defined per-residue scores
};

/// Superposition-free Cα LDDT. For residue i, every other matched Cα j with
/// native distance < radius is a pair; the score is the fraction of
/// (pair, threshold) combinations whose distance error is below threshold.
inline LddtResult lddt_ca(const ComplexStructure& decoy, const ComplexStructure& native,
                          const AtomCorrespondence& corr, double radius = kLddtRadius,
                          const std::array<double, 4>& thresholds = kLddtThresholds) {
  const std::size_t m = corr.matched_ca.size();
  if (m < 2) throw UndefinedMetricError("LDDT needs at least 2 matched Cα atoms");
  const auto drefs = decoy.atom_refs();
  const auto nrefs = native.atom_refs();
  Matrix3X xd(3, static_cast<Eigen::Index>(m)), xn(3, static_cast<Eigen::Index>(m));
  LddtResult out;
  for (std::size_t k = 0; k < m; ++k) {
    const auto [di, ni] = corr.matched_ca[k];
    xd.col(static_cast<Eigen::Index>(k)) = decoy.atom(drefs[di]).coord;
    xn.col(static_cast<Eigen::Index>(k)) = native.atom(nrefs[ni]).coord;
    const auto& nr = nrefs[ni];
    out.residues.push_back({native.chains[nr.chain].chain_id, native.residue(nr).residue_index, di, std::nullopt});
  }
  double total = 0.0;
  std::size_t defined = 0;
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t pairs = 0;
    std::size_t preserved = 0;
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i) continue;
      const auto ci = static_cast<Eigen::Index>(i), cj = static_cast<Eigen::Index>(j);
      const double dn = (xn.col(ci) - xn.col(cj)).norm();
      if (dn >= radius) continue;
      const double err = std::abs((xd.col(ci) - xd.col(cj)).norm() - dn);
      ++pairs;
      for (double t : thresholds) preserved += err < t;
    }
    if (pairs == 0) continue;
    const double score = static_cast<double>(preserved) / static_cast<double>(thresholds.size() * pairs);
    out.residues[i].score = score;
    total += score;
    ++defined;
  }
  if (defined > 0) out.global = total / static_cast<double>(defined);
  return out;
}

struct QualityReport {
  double fnat = 0.0;
  double fnonnat = 0.0;
  double irmsd = 0.0;
  double lrmsd = 0.0;
  double dockq = 0.0;
  double lddt_ca_global = 0.0;
  std::vector<ResidueLddt> per_residue_lddt;
  QualityClass quality_class = QualityClass::Incorrect;
};

/// Every metric for one decoy against its native.
inline QualityReport score_complex(const ComplexStructure& decoy, const ComplexStructure& native) {
  const AtomCorrespondence corr = match_atoms(decoy, native);
  detail::require_interface(decoy, "decoy");
  detail::require_interface(native, "native");
  QualityReport r;
  const auto f = fnat_fnonnat(decoy, native);
  r.fnat = f.fnat;
  r.fnonnat = f.fnonnat;
  r.irmsd = irmsd(decoy, native, corr);
  r.lrmsd = lrmsd(decoy, native, corr);
  r.dockq = dockq(r.fnat, r.lrmsd, r.irmsd);
  const auto l = lddt_ca(decoy, native, corr);
  r.lddt_ca_global = l.global.value_or(0.0);
  r.per_residue_lddt = l.residues;
  r.quality_class = quality_class(r.dockq);
  return r;
}

// ---------------------------------------------------------------------------
// Ranking

struct DecoyScore {
  std::string decoy_id;
  double predicted = 0.0;
  double true_dockq = 0.0;
};

struct RankingInput {
  std::string target_id;
  std::vector<DecoyScore> decoys;
};

/// Predicted score descending, decoy id ascending on ties.
inline std::vector<DecoyScore> ranked(const RankingInput& target) {
  std::vector<DecoyScore> d = target.decoys;
  std::stable_sort(d.begin(), d.end(), [](const DecoyScore& a, const DecoyScore& b) {
    if (a.predicted != b.predicted) return a.predicted > b.predicted;
    return a.decoy_id < b.decoy_id;
  });
  return d;
}

struct HitTriple {
  int acceptable = 0;  // acceptable or better
  int medium = 0;      // medium or better
  int high = 0;

  bool operator==(const HitTriple&) const = default;
};

inline std::string to_string(const HitTriple& h) {
  return std::to_string(h.acceptable) + "/" + std::to_string(h.medium) + "/" + std::to_string(h.high);
}

inline HitTriple top_n_hits(const RankingInput& target, std::size_t n = 10) {
  const auto r = ranked(target);
  HitTriple h;
  for (std::size_t i = 0; i < std::min(n, r.size()); ++i) {
    const auto c = quality_class(r[i].true_dockq);
    h.acceptable += c >= QualityClass::Acceptable;
    h.medium += c >= QualityClass::Medium;
    h.high += c == QualityClass::High;
  }
  return h;
}

struct HitRateResult {
  std::vector<HitTriple> per_target;
  HitTriple summary;  // targets with at least one hit in each class
};

inline HitRateResult hit_rate(const std::vector<RankingInput>& targets, std::size_t n = 10) {
  HitRateResult out;
  for (const auto& t : targets) {
    const HitTriple h = top_n_hits(t, n);
    out.per_target.push_back(h);
    out.summary.acceptable += h.acceptable > 0;
    out.summary.medium += h.medium > 0;
    out.summary.high += h.high > 0;
  }
  return out;
}

/// 1 - DockQ of the top-ranked decoy (the native scores 1 against itself).
inline double ranking_loss(const RankingInput& target) {
  if (target.decoys.empty()) throw UndefinedMetricError("target '" + target.target_id + "' has no decoys");
  return 1.0 - ranked(target).front().true_dockq;
}

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;  // sample (n - 1) standard deviation, 0 for n < 2
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() < 2) return r;
  double ss = 0.0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  r.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
  return r;
}

inline std::string to_string(const MeanStd& m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f \xC2\xB1 %.4f", m.mean, m.stddev);
  return buf;
}

struct ImprovementStats {
  double fi_dockq = 0.0;   // fraction of decoys whose DockQ went up
  double api_dockq = 0.0;  // mean percentage gain over the improved decoys
};

inline ImprovementStats improvement_stats(const std::vector<double>& initial, const std::vector<double>& refined) {
  if (initial.size() != refined.size()) throw Error("improvement_stats needs equal-length lists");
  ImprovementStats s;
  if (initial.empty()) return s;
  std::size_t improved = 0;
  double pct = 0.0;
  for (std::size_t i = 0; i < initial.size(); ++i) {
    if (refined[i] > initial[i]) {
      ++improved;
      pct += 100.0 * (refined[i] - initial[i]) / std::max(initial[i], 1e-6);
    }
  }
  s.fi_dockq = static_cast<double>(improved) / static_cast<double>(initial.size());
  if (improved > 0) s.api_dockq = pct / static_cast<double>(improved);
  return s;
}

}  // namespace egr

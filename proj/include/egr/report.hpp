#pragma once

// Serialized forms of quality reports and refinement outputs.

#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "egr/metrics.hpp"
#include "egr/model.hpp"
#include "egr/structio.hpp"

namespace egr {

inline constexpr int kReportSchemaVersion = 1;

inline nlohmann::json to_json(const QualityReport& r) {
  nlohmann::json residues = nlohmann::json::array();
  for (const auto& res : r.per_residue_lddt) {
    nlohmann::json e = {{"chain", res.chain_id}, {"residue_index", res.residue_index}};
    e["lddt_ca"] = res.score ? nlohmann::json(*res.score) : nlohmann::json(nullptr);
    residues.push_back(std::move(e));
  }
  return {{"schema_version", kReportSchemaVersion},
          {"fnat", r.fnat},
          {"fnonnat", r.fnonnat},
          {"irmsd", r.irmsd},
          {"lrmsd", r.lrmsd},
          {"dockq", r.dockq},
          {"lddt_ca", r.lddt_ca_global},
          {"class", to_string(r.quality_class)},
          {"per_residue_lddt_ca", std::move(residues)}};
}

/// Per-residue predicted LDDT-Cα and its mean; chain/residue come from the graph.
inline nlohmann::json refinement_report(const ComplexStructure& s, const ComplexGraph& graph,
                                        const RefinementResult& r) {
  const auto refs = s.atom_refs();
  nlohmann::json residues = nlohmann::json::array();
  double total = 0.0;
  for (std::size_t k = 0; k < r.ca_nodes.size(); ++k) {
    const auto& ref = refs[graph.atom_of_node[static_cast<std::size_t>(r.ca_nodes[k])]];
    const auto& chain = s.chains[ref.chain];
    const double q = r.predicted_lddt(static_cast<Eigen::Index>(k));
    total += q;
    residues.push_back({{"chain", chain.chain_id},
                        {"residue_index", chain.residues[ref.residue].residue_index},
                        {"residue_name", chain.residues[ref.residue].residue_name},
                        {"predicted_lddt_ca", q}});
  }
  nlohmann::json mean = r.ca_nodes.empty() ? nlohmann::json(nullptr)
                                           : nlohmann::json(total / static_cast<double>(r.ca_nodes.size()));
  return {{"schema_version", kReportSchemaVersion},
          {"granularity", to_string(graph.granularity)},
          {"per_residue", std::move(residues)},
          {"mean_predicted_lddt_ca", std::move(mean)}};
}

inline const char* quality_csv_header() { return "target,decoy,fnat,fnonnat,irmsd,lrmsd,dockq,lddt,class"; }

inline std::string quality_csv_row(const std::string& target, const std::string& decoy, const QualityReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,", r.fnat, r.fnonnat, r.irmsd, r.lrmsd, r.dockq,
                r.lddt_ca_global);
  return target + "," + decoy + buf + to_string(r.quality_class);
}

}  // namespace egr

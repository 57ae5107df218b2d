#pragma once

// Command implementations behind tools/egr. Each command returns a stable exit
// code and writes diagnostics to `err`; data goes to files only.

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "egr/error.hpp"
#include "egr/featurize.hpp"
#include "egr/metrics.hpp"
#include "egr/model.hpp"
#include "egr/report.hpp"
#include "egr/structio.hpp"
#include "egr/train.hpp"

namespace egr::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,  // usage, configuration and output errors
  kParseFailure = 2,
  kWeightsMismatch = 3,
  kNoOverlap = 4,
  kUndefinedInterface = 5,
  kMissingInput = 6,
  kDivergence = 7,
  kEmptyDataset = 8,
};

class MissingInputError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInputError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline ComplexStructure load_structure(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingInputError("cannot open '" + path + "'");
  return parse_pdb(in);
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw Error("cannot write '" + path + "'");
}

/// Keeps only the Cα atom of each residue.
inline ComplexStructure ca_only(const ComplexStructure& s) {
  ComplexStructure out;
  for (const auto& chain : s.chains) {
    Chain c{chain.chain_id, {}};
    for (const auto& res : chain.residues) {
      Residue r{res.residue_index, res.residue_name, {}};
      for (const auto& a : res.atoms)
        if (a.name == "CA") r.atoms.push_back(a);
      if (!r.atoms.empty()) c.residues.push_back(std::move(r));
    }
    if (!c.residues.empty()) out.chains.push_back(std::move(c));
  }
  return out;
}

/// Runs jobs on up to `workers` threads; results keep job order.
template <typename Result, typename Fn>
std::vector<Result> parallel_map(std::size_t count, unsigned workers, Fn fn) {
  std::vector<std::optional<Result>> slots(count);
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        slots[i] = fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, std::max<std::size_t>(count, 1)));
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  std::vector<Result> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
    out.push_back(std::move(*slots[i]));
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// refine

struct RefineOptions {
  std::string input;
  std::string weights;
  std::string output;
  std::string report;
  int iterations = 1;
  std::optional<std::string> surface;
};

inline int cmd_refine(const RefineOptions& o, std::ostream& err) {
  if (o.iterations < 1) {
    err << "error: --iterations must be >= 1\n";
    return kFailure;
  }
  ComplexStructure s;
  try {
    s = detail::load_structure(o.input);
  } catch (const Error& e) {
    err << "error: " << o.input << ": " << e.what() << "\n";
    return kParseFailure;
  }
  EgrParams params;
  EgrConfig config;
  try {
    std::ifstream in(o.weights, std::ios::binary);
    if (!in) throw WeightsError("cannot open '" + o.weights + "'");
    std::tie(params, config) = load_weights(in);
  } catch (const Error& e) {
    err << "error: weights " << o.weights << ": " << e.what() << "\n";
    return kWeightsMismatch;
  }
  std::optional<std::vector<double>> override_values;
  if (o.surface) {
    try {
      override_values = read_surface_override(*o.surface);
    } catch (const Error& e) {
      err << "error: " << e.what() << "\n";
      return kParseFailure;
    }
  }

  ComplexStructure current = config.granularity == Granularity::AllAtom ? s : detail::ca_only(s);
  nlohmann::json report;
  try {
    for (int it = 0; it < o.iterations; ++it) {
      const ComplexGraph g = build_knn_graph(current, config.granularity, config.knn_k, config.features,
                                             it == 0 ? override_values : std::nullopt);
      const RefinementResult r = forward(g, params, config);
      report = refinement_report(current, g, r);
      // For Cα graphs `current` holds only Cα atoms, so nodes align with atoms.
      current.set_coords(r.refined_coords);
    }
  } catch (const ConfigError& e) {
    err << "error: weights do not match input: " << e.what() << "\n";
    return kWeightsMismatch;
  } catch (const OverrideError& e) {
    err << "error: " << e.what() << "\n";
    return kParseFailure;
  } catch (const GraphTooSmallError& e) {
    err << "error: " << o.input << ": " << e.what() << "\n";
    return kParseFailure;
  }
  report["iterations"] = o.iterations;
  try {
    detail::write_file(o.output, write_pdb(current));
    detail::write_file(o.report, report.dump(2) + "\n");
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// score

struct ScoreOptions {
  std::string decoy;
  std::string native;
  std::string report;
};

/// Maps scoring failures onto exit codes; returns kOk on success.
template <typename Fn>
int guarded_score(Fn&& fn, std::ostream& err) {
  try {
    fn();
  } catch (const MissingInputError& e) {
    err << "error: " << e.what() << "\n";
    return kMissingInput;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kParseFailure;
  } catch (const EmptyStructureError& e) {
    err << "error: " << e.what() << "\n";
    return kParseFailure;
  } catch (const NoOverlapError& e) {
    err << "error: " << e.what() << "\n";
    return kNoOverlap;
  } catch (const NoInterfaceError& e) {
    err << "error: " << e.what() << "\n";
    return kUndefinedInterface;
  } catch (const UndefinedMetricError& e) {
    err << "error: " << e.what() << "\n";
    return kUndefinedInterface;
  } catch (const AlignmentError& e) {
    err << "error: interface cannot be superposed: " << e.what() << "\n";
    return kUndefinedInterface;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}

inline int cmd_score(const ScoreOptions& o, std::ostream& err) {
  QualityReport r;
  ComplexStructure decoy, native;
  const auto load = [&] {
    decoy = detail::load_structure(o.decoy);
    native = detail::load_structure(o.native);
  };
  if (int code = guarded_score(load, err); code != kOk) return code;
  if (int code = guarded_score([&] { r = score_complex(decoy, native); }, err); code != kOk) return code;
  try {
    detail::write_file(o.report, to_json(r).dump(2) + "\n");
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOptions {
  std::string scores;
  std::string natives;
  std::string decoys;
  int top_n = 10;
  std::string summary;
  std::optional<std::string> reports;  // per-decoy quality CSV
  unsigned workers = 0;                // 0 selects the processor count
};

struct ScoreRow {
  std::string target;
  std::string decoy;
  double predicted = 0.0;
};

/// Rows of a (target, decoy, predicted_score) CSV with a header line.
inline std::vector<ScoreRow> read_scores_csv(std::istream& in) {
  std::vector<ScoreRow> rows;
  std::string line;
  std::size_t line_no = 0;
  bool header = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (egr::detail::trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.emplace_back(egr::detail::trim(cell));
    if (header) {
      header = false;
      if (cells.size() < 3 || cells[0] != "target" || cells[1] != "decoy")
        throw ParseError(line_no, "expected header 'target,decoy,predicted_score'");
      continue;
    }
    if (cells.size() != 3) throw ParseError(line_no, "expected 3 columns");
    const auto v = egr::detail::parse_number<double>(cells[2]);
    if (!v) throw ParseError(line_no, "predicted_score is not a number");
    rows.push_back({cells[0], cells[1], *v});
  }
  return rows;
}

inline int cmd_evaluate(const EvaluateOptions& o, std::ostream& err) {
  namespace fs = std::filesystem;
  if (o.top_n < 1) {
    err << "error: --top-n must be >= 1\n";
    return kFailure;
  }
  std::vector<ScoreRow> rows;
  {
    std::ifstream in(o.scores);
    if (!in) {
      err << "error: cannot open '" << o.scores << "'\n";
      return kMissingInput;
    }
    try {
      rows = read_scores_csv(in);
    } catch (const ParseError& e) {
      err << "error: " << o.scores << ": " << e.what() << "\n";
      return kParseFailure;
    }
  }
  if (rows.empty()) {
    err << "error: no targets in '" << o.scores << "'\n";
    return kMissingInput;
  }
  std::stable_sort(rows.begin(), rows.end(), [](const ScoreRow& a, const ScoreRow& b) { return a.target < b.target; });

  std::map<std::string, fs::path> native_path;
  for (const auto& r : rows) {
    native_path.emplace(r.target, fs::path(o.natives) / (r.target + ".pdb"));
    const fs::path d = fs::path(o.decoys) / r.target / (r.decoy + ".pdb");
    if (!fs::exists(native_path[r.target]) || !fs::exists(d)) {
      err << "error: missing file for " << r.target << "/" << r.decoy << ": "
          << (fs::exists(native_path[r.target]) ? d : native_path[r.target]).string() << "\n";
      return kMissingInput;
    }
  }

  std::map<std::string, ComplexStructure> natives;
  std::vector<QualityReport> reports;
  const int code = guarded_score(
      [&] {
        for (const auto& [target, path] : native_path) natives.emplace(target, detail::load_structure(path.string()));
        reports = detail::parallel_map<QualityReport>(rows.size(), o.workers, [&](std::size_t i) {
          const auto& r = rows[i];
          const auto decoy = detail::load_structure((fs::path(o.decoys) / r.target / (r.decoy + ".pdb")).string());
          return score_complex(decoy, natives.at(r.target));
        });
      },
      err);
  if (code != kOk) return code;

  std::vector<RankingInput> targets;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (targets.empty() || targets.back().target_id != rows[i].target) targets.push_back({rows[i].target, {}});
    targets.back().decoys.push_back({rows[i].decoy, rows[i].predicted, reports[i].dockq});
  }
  const HitRateResult hits = hit_rate(targets, static_cast<std::size_t>(o.top_n));
  std::vector<double> losses;
  std::ostringstream summary;
  summary << "target,hits,ranking_loss\n";
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const double loss = ranking_loss(targets[t]);
    losses.push_back(loss);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", loss);
    summary << targets[t].target_id << "," << to_string(hits.per_target[t]) << "," << buf << "\n";
  }
  summary << "Summary," << to_string(hits.summary) << "," << to_string(mean_std(losses)) << "\n";

  try {
    detail::write_file(o.summary, summary.str());
    if (o.reports) {
      std::ostringstream csv;
      csv << quality_csv_header() << "\n";
      for (std::size_t i = 0; i < rows.size(); ++i)
        csv << quality_csv_row(rows[i].target, rows[i].decoy, reports[i]) << "\n";
      detail::write_file(*o.reports, csv.str());
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct RunConfig {
  TrainConfig train;
  std::optional<std::string> init_weights;
};

/// Reads a training config document. Every key is optional; unknown keys are errors.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known = {
      "num_layers",    "hidden_dim",   "qa_loss_weight",           "psr_loss_weight",
      "leaky_slope",   "attention_enabled", "window_size",         "norm_constant",
      "noise_sigma",   "granularity",  "knn_k",                    "learning_rate",
      "weight_decay",  "patience",     "max_epochs",               "grad_clip",
      "seed",          "init_weights", "no_positional_corruption", "no_surface_proximity",
      "no_relative_geometric_features"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");

  RunConfig rc;
  auto& t = rc.train;
  auto& m = t.model;
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("num_layers", m.num_layers);
    get("hidden_dim", m.hidden_dim);
    get("qa_loss_weight", m.qa_loss_weight);
    get("psr_loss_weight", m.psr_loss_weight);
    get("leaky_slope", m.leaky_slope);
    get("attention_enabled", m.attention_enabled);
    get("window_size", m.window_size);
    get("norm_constant", m.norm_constant);
    get("noise_sigma", m.noise_sigma);
    get("knn_k", m.knn_k);
    if (j.contains("granularity")) m.granularity = granularity_from_string(j.at("granularity").get<std::string>());
    get("learning_rate", t.learning_rate);
    get("weight_decay", t.weight_decay);
    get("patience", t.patience);
    get("max_epochs", t.max_epochs);
    get("grad_clip", t.grad_clip);
    get("seed", t.seed);
    bool npc = false, nsp = false, nrgf = false;
    get("no_positional_corruption", npc);
    get("no_surface_proximity", nsp);
    get("no_relative_geometric_features", nrgf);
    t.positional_corruption = !npc;
    m.features.surface_proximity = !nsp;
    m.features.relative_geometry = !nrgf;
    if (j.contains("init_weights")) rc.init_weights = j.at("init_weights").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  m.validate();
  if (t.learning_rate <= 0 || t.weight_decay < 0 || t.grad_clip < 0)
    throw ConfigError("learning_rate must be > 0; weight_decay and grad_clip must be >= 0");
  if (t.patience < 1 || t.max_epochs < 1) throw ConfigError("patience and max_epochs must be >= 1");
  return rc;
}

/// Examples from <id>_decoy.pdb / <id>_native.pdb pairs, sorted by id.
inline std::vector<TrainingExample> load_dataset(const std::string& dir, const EgrConfig& config) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw MissingInputError("dataset directory '" + dir + "' does not exist");
  const std::string suffix = "_decoy.pdb";
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
      ids.push_back(name.substr(0, name.size() - suffix.size()));
  }
  std::sort(ids.begin(), ids.end());
  std::vector<TrainingExample> out;
  for (const auto& id : ids) {
    const auto decoy_path = (fs::path(dir) / (id + "_decoy.pdb")).string();
    const auto native_path = (fs::path(dir) / (id + "_native.pdb")).string();
    if (!fs::exists(native_path)) throw MissingInputError("missing native '" + native_path + "'");
    const auto decoy = detail::load_structure(decoy_path);
    const auto native = detail::load_structure(native_path);
    out.push_back(make_training_example(decoy, native, config, id, id));
  }
  return out;
}

struct TrainOptions {
  std::string config;
  std::string train_dir;
  std::string val_dir;  // empty validates on the training set
  std::string out_weights;
  std::optional<std::string> log;         // defaults to <out_weights>.log
  std::optional<std::string> checkpoint;  // weights plus optimizer state
};

inline int cmd_train(const TrainOptions& o, std::ostream& err) {
  RunConfig rc;
  try {
    rc = parse_run_config(nlohmann::json::parse(detail::read_file(o.config)));
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << o.config << ": " << e.what() << "\n";
    return kFailure;
  } catch (const MissingInputError& e) {
    err << "error: " << e.what() << "\n";
    return kMissingInput;
  } catch (const Error& e) {
    err << "error: " << o.config << ": " << e.what() << "\n";
    return kFailure;
  }

  std::optional<EgrParams> initial;
  if (rc.init_weights) {
    try {
      std::ifstream in(*rc.init_weights, std::ios::binary);
      if (!in) throw WeightsError("cannot open '" + *rc.init_weights + "'");
      auto [p, c] = load_weights(in);
      if (!(c == rc.train.model)) throw WeightsShapeError("initial weights were trained with a different config");
      initial = std::move(p);
    } catch (const Error& e) {
      err << "error: " << e.what() << "\n";
      return kWeightsMismatch;
    }
  }

  std::vector<TrainingExample> train_set, val_set;
  try {
    train_set = load_dataset(o.train_dir, rc.train.model);
    if (!o.val_dir.empty()) val_set = load_dataset(o.val_dir, rc.train.model);
  } catch (const MissingInputError& e) {
    err << "error: " << e.what() << "\n";
    return kMissingInput;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kParseFailure;
  }
  const auto usable = [](const TrainingExample& ex) { return !ex.psr_nodes.empty() || !ex.qa_nodes.empty(); };
  if (std::none_of(train_set.begin(), train_set.end(), usable)) {
    err << "error: no usable training examples in '" << o.train_dir << "'\n";
    return kEmptyDataset;
  }

  const std::string log_path = o.log.value_or(o.out_weights + ".log");
  std::ofstream log(log_path);
  if (!log) {
    err << "error: cannot write '" << log_path << "'\n";
    return kFailure;
  }
  TrainResult result;
  try {
    result = train_loop(train_set, val_set, rc.train, initial,
                        [&](const EpochLog& e) { log << to_log_line(e) << "\n" << std::flush; });
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << "\n";
    std::ofstream out(o.out_weights, std::ios::binary);
    if (out && !e.last_good().log.empty()) save_weights(out, e.last_good().params, rc.train.model);
    return kDivergence;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }

  try {
    std::ofstream out(o.out_weights, std::ios::binary);
    if (!out) throw Error("cannot write '" + o.out_weights + "'");
    save_weights(out, result.params, rc.train.model);
    if (o.checkpoint) {
      std::ofstream ck(*o.checkpoint, std::ios::binary);
      if (!ck) throw Error("cannot write '" + *o.checkpoint + "'");
      save_checkpoint(ck, result.params, rc.train.model, result.optimizer);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// init: writes freshly initialised weights for a config

struct InitOptions {
  std::string config;
  std::string out_weights;
};

inline int cmd_init(const InitOptions& o, std::ostream& err) {
  try {
    const RunConfig rc = parse_run_config(nlohmann::json::parse(detail::read_file(o.config)));
    std::ofstream out(o.out_weights, std::ios::binary);
    if (!out) throw Error("cannot write '" + o.out_weights + "'");
    save_weights(out, init_params(rc.train.model, rc.train.seed), rc.train.model);
  } catch (const MissingInputError& e) {
    err << "error: " << e.what() << "\n";
    return kMissingInput;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& err = std::cerr) {
  CLI::App app{"Equivariant refinement and quality assessment of protein complexes"};
  app.require_subcommand(1);

  RefineOptions refine;
  auto* r = app.add_subcommand("refine", "Refine a complex and predict per-residue LDDT-Ca");
  r->add_option("--input", refine.input, "Input PDB")->required();
  r->add_option("--weights", refine.weights, "Model weights")->required();
  r->add_option("--output", refine.output, "Refined PDB")->required();
  r->add_option("--report", refine.report, "JSON report")->required();
  r->add_option("--iterations", refine.iterations, "Refinement passes")->capture_default_str();
  std::string surface;
  auto* surface_opt = r->add_option("--surface", surface, "Per-atom surface proximity override");

  ScoreOptions score;
  auto* s = app.add_subcommand("score", "Score a decoy against its native");
  s->add_option("--decoy", score.decoy, "Decoy PDB")->required();
  s->add_option("--native", score.native, "Native PDB")->required();
  s->add_option("--report", score.report, "JSON report")->required();

  EvaluateOptions evaluate;
  std::string reports;
  auto* e = app.add_subcommand("evaluate", "Hit rates and ranking losses for predicted decoy scores");
  e->add_option("--scores", evaluate.scores, "CSV with target,decoy,predicted_score")->required();
  e->add_option("--natives", evaluate.natives, "Directory of <target>.pdb")->required();
  e->add_option("--decoys", evaluate.decoys, "Directory of <target>/<decoy>.pdb")->required();
  e->add_option("--top-n", evaluate.top_n, "Decoys considered per target")->capture_default_str();
  e->add_option("--summary", evaluate.summary, "Summary CSV")->required();
  auto* reports_opt = e->add_option("--reports", reports, "Per-decoy quality CSV");
  e->add_option("--workers", evaluate.workers, "Worker threads (0 = processor count)")->capture_default_str();

  TrainOptions train;
  std::string log_path, checkpoint;
  auto* t = app.add_subcommand("train", "Train a model with early stopping");
  t->add_option("--config", train.config, "JSON run config")->required();
  t->add_option("--train-dir", train.train_dir, "Training pairs")->required();
  t->add_option("--val-dir", train.val_dir, "Validation pairs");
  t->add_option("--out-weights", train.out_weights, "Best weights")->required();
  auto* log_opt = t->add_option("--log", log_path, "Epoch log (JSON lines)");
  auto* ck_opt = t->add_option("--checkpoint", checkpoint, "Weights plus optimizer state");

  InitOptions init;
  auto* i = app.add_subcommand("init", "Write freshly initialised weights");
  i->add_option("--config", init.config, "JSON run config")->required();
  i->add_option("--out-weights", init.out_weights, "Weights file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    std::ostringstream out;
    const int code = app.exit(ex, out, err);
    std::cout << out.str();
    return code == 0 ? kOk : kFailure;
  }

  if (r->parsed()) {
    if (*surface_opt) refine.surface = surface;
    return cmd_refine(refine, err);
  }
  if (s->parsed()) return cmd_score(score, err);
  if (e->parsed()) {
    if (*reports_opt) evaluate.reports = reports;
    return cmd_evaluate(evaluate, err);
  }
  if (t->parsed()) {
    if (*log_opt) train.log = log_path;
    if (*ck_opt) train.checkpoint = checkpoint;
    return cmd_train(train, err);
  }
  return cmd_init(init, err);
}

}  // namespace egr::cli

#pragma once

// Losses, exact gradients, AdamW and the early-stopping training loop.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "egr/error.hpp"
#include "egr/featurize.hpp"
#include "egr/metrics.hpp"
#include "egr/model.hpp"
#include "egr/structio.hpp"

namespace egr {

inline constexpr double kHuberDelta = 1.0;

inline double huber(double r, double delta = kHuberDelta) {
  const double a = std::abs(r);
  return a < delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

inline double huber_derivative(double r, double delta = kHuberDelta) {
  return std::abs(r) < delta ? r : (r > 0 ? delta : -delta);
}

struct CoordLoss {
  double value = 0.0;
  Matrix3X grad;  // d loss / d predicted coordinates, zero for unmatched nodes
};

/// Mean Huber loss over every coordinate component of the matched nodes.
inline CoordLoss psr_loss(const Matrix3X& predicted, const std::vector<int>& nodes, const Matrix3X& targets,
                          double delta = kHuberDelta) {
  if (nodes.empty()) throw LossUndefinedError("refinement loss needs at least one matched atom");
  if (targets.cols() != static_cast<Eigen::Index>(nodes.size())) throw Error("psr_loss target count mismatch");
  CoordLoss out;
  out.grad = Matrix3X::Zero(3, predicted.cols());
  const double count = 3.0 * static_cast<double>(nodes.size());
  for (std::size_t k = 0; k < nodes.size(); ++k)
    for (int a = 0; a < 3; ++a) {
      const double r = predicted(a, nodes[k]) - targets(a, static_cast<Eigen::Index>(k));
      out.value += huber(r, delta);
      out.grad(a, nodes[k]) += huber_derivative(r, delta) / count;
    }
  out.value /= count;
  return out;
}

struct VectorLoss {
  double value = 0.0;
  Eigen::VectorXd grad;
};

/// Mean squared error between aligned predicted and target scores.
inline VectorLoss qa_loss(const Eigen::VectorXd& predicted, const Eigen::VectorXd& target) {
  if (predicted.size() == 0) throw LossUndefinedError("quality loss needs at least one labelled residue");
  if (predicted.size() != target.size()) throw Error("qa_loss size mismatch");
  const Eigen::VectorXd diff = predicted - target;
  const double n = static_cast<double>(diff.size());
  return {diff.squaredNorm() / n, 2.0 * diff / n};
}

/// A decoy graph with its labels. P and C may be empty (semi-supervised).
struct TrainingExample {
  std::string target_id;
  std::string decoy_id;
  ComplexGraph graph;
  std::vector<int> psr_nodes;  // P
  Matrix3X psr_targets;        // native coordinates for P
  std::vector<int> qa_nodes;   // C
  Eigen::VectorXd qa_targets;  // ground-truth LDDT-Cα for C
};

struct LossTerms {
  double psr = 0.0;
  double qa = 0.0;
  double total = 0.0;
};

/// Weighted sum of the available terms; nullopt when both P and C are empty.
inline std::optional<LossTerms> total_loss(const TrainingExample& ex, const RefinementResult& result,
                                           const EgrConfig& config) {
  if (ex.psr_nodes.empty() && ex.qa_nodes.empty()) return std::nullopt;
  LossTerms t;
  if (!ex.psr_nodes.empty()) t.psr = psr_loss(result.refined_coords, ex.psr_nodes, ex.psr_targets).value;
  if (!ex.qa_nodes.empty()) {
    Eigen::VectorXd pred(static_cast<Eigen::Index>(ex.qa_nodes.size()));
    for (std::size_t k = 0; k < ex.qa_nodes.size(); ++k)
      pred(static_cast<Eigen::Index>(k)) = result.node_quality(ex.qa_nodes[k]);
    t.qa = qa_loss(pred, ex.qa_targets).value;
  }
  t.total = config.psr_loss_weight * t.psr + config.qa_loss_weight * t.qa;
  return t;
}

struct Gradient {
  LossTerms loss;
  ParamSet grads;
  Matrix3X refined_coords;
};

/// Exact gradient of total_loss with respect to every parameter block.
inline std::optional<Gradient> backward(const TrainingExample& ex, const EgrParams& params, const EgrConfig& config) {
  if (ex.psr_nodes.empty() && ex.qa_nodes.empty()) return std::nullopt;
  ForwardTrace tr = trace_forward(ex.graph, params, config);
  ad::Tape& tape = *tr.tape;
  Gradient g;
  g.refined_coords = tr.coords.value();

  if (!ex.psr_nodes.empty()) {
    const CoordLoss l = psr_loss(g.refined_coords, ex.psr_nodes, ex.psr_targets);
    g.loss.psr = l.value;
    tape.accumulate(tr.coords.id(), config.psr_loss_weight * l.grad);
  }
  if (!ex.qa_nodes.empty()) {
    const Eigen::MatrixXd& q = tr.quality.value();
    Eigen::VectorXd pred(static_cast<Eigen::Index>(ex.qa_nodes.size()));
    for (std::size_t k = 0; k < ex.qa_nodes.size(); ++k) pred(static_cast<Eigen::Index>(k)) = q(0, ex.qa_nodes[k]);
    const VectorLoss l = qa_loss(pred, ex.qa_targets);
    g.loss.qa = l.value;
    Eigen::MatrixXd seed = Eigen::MatrixXd::Zero(1, q.cols());
    for (std::size_t k = 0; k < ex.qa_nodes.size(); ++k)
      seed(0, ex.qa_nodes[k]) += config.qa_loss_weight * l.grad(static_cast<Eigen::Index>(k));
    tape.accumulate(tr.quality.id(), seed);
  }
  g.loss.total = config.psr_loss_weight * g.loss.psr + config.qa_loss_weight * g.loss.qa;
  tape.backward();

  g.grads = params.zeros_like();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& block = g.grads.blocks()[i];
    if (tape.has_grad(tr.params[i].id())) block.value = tr.params[i].grad();
    if (!block.value.allFinite()) throw NumericalError(block.name);
  }
  return g;
}

inline double global_norm(const ParamSet& grads) {
  double s = 0.0;
  for (const auto& b : grads.blocks()) s += b.value.squaredNorm();
  return std::sqrt(s);
}

/// Rescales in place so the global L2 norm is at most max_norm; returns the original norm.
inline double clip_grad_norm(ParamSet& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& b : grads.blocks()) b.value *= s;
  }
  return norm;
}

struct OptimizerState {
  long step = 0;
  ParamSet m;
  ParamSet v;
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline OptimizerState make_optimizer(const ParamSet& params, double learning_rate = 1e-4, double weight_decay = 1e-4) {
  OptimizerState s;
  s.m = params.zeros_like();
  s.v = params.zeros_like();
  s.learning_rate = learning_rate;
  s.weight_decay = weight_decay;
  return s;
}

/// Bias-corrected Adam step with decoupled weight decay.
inline void adamw_step(ParamSet& params, const ParamSet& grads, OptimizerState& st) {
  if (grads.size() != params.size() || st.m.size() != params.size()) throw Error("adamw_step shape mismatch");
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& theta = params.blocks()[i].value;
    const auto& g = grads.blocks()[i].value;
    auto& m = st.m.blocks()[i].value;
    auto& v = st.v.blocks()[i].value;
    if (g.rows() != theta.rows() || g.cols() != theta.cols()) throw Error("adamw_step block shape mismatch");
    m = st.beta1 * m + (1.0 - st.beta1) * g;
    v = st.beta2 * v + (1.0 - st.beta2) * g.cwiseProduct(g);
    const Eigen::ArrayXXd m_hat = m.array() / c1;
    const Eigen::ArrayXXd v_hat = v.array() / c2;
    const Eigen::MatrixXd step = (m_hat / (v_hat.sqrt() + st.epsilon)).matrix();
    theta = theta - st.learning_rate * step - st.learning_rate * st.weight_decay * theta;
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: the weights container plus Adam moments.

inline void save_checkpoint(std::ostream& out, const EgrParams& params, const EgrConfig& config,
                            const OptimizerState& st) {
  std::vector<std::pair<std::string, const Eigen::MatrixXd*>> arrays;
  for (const auto& b : params.blocks()) arrays.emplace_back(b.name, &b.value);
  for (const auto& b : st.m.blocks()) arrays.emplace_back("adam.m." + b.name, &b.value);
  for (const auto& b : st.v.blocks()) arrays.emplace_back("adam.v." + b.name, &b.value);
  nlohmann::json header = {{"kind", "egr-checkpoint"},
                           {"config", to_json(config)},
                           {"optimizer",
                            {{"step", st.step},
                             {"learning_rate", st.learning_rate},
                             {"weight_decay", st.weight_decay},
                             {"beta1", st.beta1},
                             {"beta2", st.beta2},
                             {"epsilon", st.epsilon}}}};
  write_container(out, std::move(header), arrays);
}

struct Checkpoint {
  EgrParams params;
  EgrConfig config;
  OptimizerState optimizer;
};

inline Checkpoint load_checkpoint(std::istream& in) {
  Container c = read_container(in);
  if (!c.header.contains("config") || !c.header.contains("optimizer"))
    throw WeightsError("stream is not an optimizer checkpoint");
  Checkpoint ck;
  ck.config = config_from_json(c.header["config"]);
  const auto shapes = parameter_shapes(ck.config);
  if (c.arrays.size() != 3 * shapes.size()) throw WeightsShapeError("checkpoint block count does not match config");
  for (std::size_t i = 0; i < shapes.size(); ++i) ck.params.add(c.arrays[i].first, std::move(c.arrays[i].second));
  check_param_shapes(ck.params, ck.config);
  const auto& o = c.header["optimizer"];
  ck.optimizer.step = o.at("step").get<long>();
  ck.optimizer.learning_rate = o.at("learning_rate").get<double>();
  ck.optimizer.weight_decay = o.at("weight_decay").get<double>();
  ck.optimizer.beta1 = o.at("beta1").get<double>();
  ck.optimizer.beta2 = o.at("beta2").get<double>();
  ck.optimizer.epsilon = o.at("epsilon").get<double>();
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    auto& mb = c.arrays[shapes.size() + i];
    auto& vb = c.arrays[2 * shapes.size() + i];
    if (mb.first != "adam.m." + shapes[i].name || vb.first != "adam.v." + shapes[i].name)
      throw WeightsShapeError("optimizer moment blocks out of order");
    ck.optimizer.m.add(shapes[i].name, std::move(mb.second));
    ck.optimizer.v.add(shapes[i].name, std::move(vb.second));
  }
  check_param_shapes(ck.optimizer.m, ck.config);
  check_param_shapes(ck.optimizer.v, ck.config);
  return ck;
}

// ---------------------------------------------------------------------------
// Labels

/// Per-residue LDDT-Cα labels; shares its definition with evaluation.
inline LddtResult ground_truth_lddt(const ComplexStructure& decoy, const ComplexStructure& native,
                                    const AtomCorrespondence& corr) {
  return lddt_ca(decoy, native, corr);
}

/// Builds the decoy graph and its labels. The native is first superposed onto
/// the decoy over matched Cα atoms so targets live in the decoy's frame.
inline TrainingExample make_training_example(const ComplexStructure& decoy, const ComplexStructure& native,
                                             const EgrConfig& config, std::string target_id = {},
                                             std::string decoy_id = {},
                                             const std::optional<std::vector<double>>& surface_override = std::nullopt) {
  TrainingExample ex;
  ex.target_id = std::move(target_id);
  ex.decoy_id = std::move(decoy_id);
  ex.graph = build_knn_graph(decoy, config.granularity, config.knn_k, config.features, surface_override);
  const AtomCorrespondence corr = match_atoms(decoy, native);

  Matrix3X native_x = native.coords();
  const Matrix3X decoy_x = decoy.coords();
  if (corr.matched_ca.size() >= 3) {
    Matrix3X mob(3, static_cast<Eigen::Index>(corr.matched_ca.size()));
    Matrix3X tgt(3, mob.cols());
    for (std::size_t k = 0; k < corr.matched_ca.size(); ++k) {
      mob.col(static_cast<Eigen::Index>(k)) = native_x.col(static_cast<Eigen::Index>(corr.matched_ca[k].second));
      tgt.col(static_cast<Eigen::Index>(k)) = decoy_x.col(static_cast<Eigen::Index>(corr.matched_ca[k].first));
    }
    try {
      native_x = kabsch_superpose(mob, tgt).apply(native_x);
    } catch (const AlignmentError&) {
      // Collinear Cα sets keep the native's own frame.
    }
  }

  std::unordered_map<std::size_t, std::size_t> native_of;
  for (const auto& [d, n] : corr.pairs) native_of.emplace(d, n);
  std::unordered_map<std::size_t, int> node_of_atom;
  std::vector<Eigen::Vector3d> targets;
  for (std::size_t i = 0; i < ex.graph.atom_of_node.size(); ++i) {
    const std::size_t atom = ex.graph.atom_of_node[i];
    node_of_atom.emplace(atom, static_cast<int>(i));
    auto it = native_of.find(atom);
    if (it == native_of.end()) continue;
    ex.psr_nodes.push_back(static_cast<int>(i));
    targets.emplace_back(native_x.col(static_cast<Eigen::Index>(it->second)));
  }
  ex.psr_targets.resize(3, static_cast<Eigen::Index>(targets.size()));
  for (std::size_t k = 0; k < targets.size(); ++k) ex.psr_targets.col(static_cast<Eigen::Index>(k)) = targets[k];

  if (corr.matched_ca.size() >= 2) {
    const LddtResult labels = ground_truth_lddt(decoy, native, corr);
    std::vector<double> q;
    for (const auto& r : labels.residues) {
      if (!r.score) continue;
      auto it = node_of_atom.find(r.decoy_atom);
      if (it == node_of_atom.end()) continue;
      ex.qa_nodes.push_back(it->second);
      q.push_back(*r.score);
    }
    ex.qa_targets = Eigen::Map<const Eigen::VectorXd>(q.data(), static_cast<Eigen::Index>(q.size()));
  }
  return ex;
}

/// Root-mean-square deviation of predicted coordinates over P.
inline double matched_rmsd(const Matrix3X& predicted, const std::vector<int>& nodes, const Matrix3X& targets) {
  if (nodes.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t k = 0; k < nodes.size(); ++k)
    s += (predicted.col(nodes[k]) - targets.col(static_cast<Eigen::Index>(k))).squaredNorm();
  return std::sqrt(s / static_cast<double>(nodes.size()));
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  EgrConfig model;
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  int patience = 50;
  int max_epochs = 1000;
  double grad_clip = 1.0;
  bool positional_corruption = true;
  std::uint64_t seed = 0;

  double effective_sigma() const { return positional_corruption ? model.noise_sigma : 0.0; }
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_rmsd = 0.0;
  bool best = false;
  double noise_sigma = 0.0;

  bool operator==(const EpochLog&) const = default;
};

inline std::string to_log_line(const EpochLog& e) {
  nlohmann::json j = {{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"val_rmsd", e.val_rmsd},
                      {"best", e.best},
                      {"noise_sigma", e.noise_sigma}};
  return j.dump();
}

struct TrainResult {
  EgrParams params;  // best validation checkpoint
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_val_rmsd = std::numeric_limits<double>::infinity();
  OptimizerState optimizer;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, TrainResult last_good) : Error(what), last_good_(std::move(last_good)) {}
  const TrainResult& last_good() const noexcept { return last_good_; }

 private:
  TrainResult last_good_;
};

/// Mean over examples of the un-superposed matched-atom RMSD of the refinement.
inline double validation_rmsd(const std::vector<TrainingExample>& set, const EgrParams& params,
                              const EgrConfig& config) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& ex : set) {
    if (ex.psr_nodes.empty()) continue;
    const RefinementResult r = forward(ex.graph, params, config);
    total += matched_rmsd(r.refined_coords, ex.psr_nodes, ex.psr_targets);
    ++count;
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

/// One graph per step. After each epoch the validation RMSD decides the
/// best checkpoint; training stops after `patience` epochs without
/// improvement or at max_epochs. An empty validation set validates on the
/// training set.
inline TrainResult train_loop(const std::vector<TrainingExample>& train, const std::vector<TrainingExample>& validation,
                              const TrainConfig& cfg, const std::optional<EgrParams>& initial = std::nullopt,
                              const std::function<void(const EpochLog&)>& on_epoch = {}) {
  if (train.empty()) throw ConfigError("training set is empty");
  cfg.model.validate();
  if (cfg.patience < 1 || cfg.max_epochs < 1) throw ConfigError("patience and max_epochs must be >= 1");
  const auto& val = validation.empty() ? train : validation;
  const double sigma = cfg.effective_sigma();

  EgrParams params = initial ? *initial : init_params(cfg.model, cfg.seed);
  check_param_shapes(params, cfg.model);
  OptimizerState opt = make_optimizer(params, cfg.learning_rate, cfg.weight_decay);

  TrainResult result;
  result.params = params;
  result.optimizer = opt;
  int since_best = 0;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(epoch)};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t idx : order) {
      TrainingExample ex = train[idx];
      corrupt_coordinates(ex.graph, sigma, rng);
      std::optional<Gradient> g;
      try {
        g = backward(ex, params, cfg.model);
      } catch (const NumericalError& e) {
        throw DivergenceError(std::string("training diverged: ") + e.what(), result);
      }
      if (!g) continue;
      if (!std::isfinite(g->loss.total)) throw DivergenceError("training diverged: non-finite loss", result);
      clip_grad_norm(g->grads, cfg.grad_clip);
      adamw_step(params, g->grads, opt);
      loss_sum += g->loss.total;
      ++steps;
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = steps ? loss_sum / static_cast<double>(steps) : 0.0;
    entry.val_rmsd = validation_rmsd(val, params, cfg.model);
    entry.noise_sigma = sigma;
    if (!std::isfinite(entry.val_rmsd)) throw DivergenceError("training diverged: non-finite validation RMSD", result);
    if (entry.val_rmsd < result.best_val_rmsd) {
      entry.best = true;
      result.best_val_rmsd = entry.val_rmsd;
      result.best_epoch = epoch;
      result.params = params;
      result.optimizer = opt;
      since_best = 0;
    } else {
      ++since_best;
    }
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
    if (since_best >= cfg.patience) break;
  }
  return result;
}

}  // namespace egr

#pragma once

// The equivariant graph refiner: stacked message-passing layers that update
// node embeddings and coordinates, a refinement output and a per-residue
// quality head.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <memory>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "egr/autodiff.hpp"
#include "egr/error.hpp"
#include "egr/featurize.hpp"

namespace egr {

struct EgrConfig {
  int num_layers = 7;
  int hidden_dim = 64;
  double qa_loss_weight = 0.05;
  double psr_loss_weight = 1.0;
  double leaky_slope = 0.01;
  bool attention_enabled = true;
  int window_size = 128;
  double norm_constant = 1.0;
  double noise_sigma = 0.1;
  Granularity granularity = Granularity::AllAtom;
  FeatureOptions features;
  int knn_k = 20;

  int node_dim() const { return node_feature_width(granularity, features); }
  int edge_dim() const { return edge_feature_width(granularity, features); }

  void validate() const {
    if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
    if (hidden_dim < 1) throw ConfigError("hidden_dim must be >= 1");
    if (qa_loss_weight < 0 || psr_loss_weight < 0) throw ConfigError("loss weights must be >= 0");
    if (window_size < 1) throw ConfigError("window_size must be >= 1");
    if (noise_sigma < 0) throw ConfigError("noise_sigma must be >= 0");
    if (knn_k < 1) throw ConfigError("knn_k must be >= 1");
  }

  bool operator==(const EgrConfig&) const = default;
};

inline nlohmann::json to_json(const EgrConfig& c) {
  return {{"num_layers", c.num_layers},
          {"hidden_dim", c.hidden_dim},
          {"qa_loss_weight", c.qa_loss_weight},
          {"psr_loss_weight", c.psr_loss_weight},
          {"nonlinearity", "leaky_relu"},
          {"leaky_slope", c.leaky_slope},
          {"normalization", "layer_norm"},
          {"attention_enabled", c.attention_enabled},
          {"window_size", c.window_size},
          {"norm_constant", c.norm_constant},
          {"noise_sigma", c.noise_sigma},
          {"granularity", to_string(c.granularity)},
          {"surface_proximity", c.features.surface_proximity},
          {"relative_geometry", c.features.relative_geometry},
          {"knn_k", c.knn_k},
          {"node_dim", c.node_dim()},
          {"edge_dim", c.edge_dim()}};
}

inline EgrConfig config_from_json(const nlohmann::json& j) {
  EgrConfig c;
  try {
    c.num_layers = j.at("num_layers").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.qa_loss_weight = j.at("qa_loss_weight").get<double>();
    c.psr_loss_weight = j.at("psr_loss_weight").get<double>();
    c.leaky_slope = j.at("leaky_slope").get<double>();
    c.attention_enabled = j.at("attention_enabled").get<bool>();
    c.window_size = j.at("window_size").get<int>();
    c.norm_constant = j.at("norm_constant").get<double>();
    c.noise_sigma = j.at("noise_sigma").get<double>();
    c.granularity = granularity_from_string(j.at("granularity").get<std::string>());
    c.features.surface_proximity = j.at("surface_proximity").get<bool>();
    c.features.relative_geometry = j.at("relative_geometry").get<bool>();
    c.knn_k = j.at("knn_k").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw WeightsError(std::string("bad model config record: ") + e.what());
  }
  c.validate();
  return c;
}

/// Ordered, named parameter blocks. The order is the canonical serialization
/// order and is fixed by `parameter_shapes`.
class ParamSet {
 public:
  struct Block {
    std::string name;
    Eigen::MatrixXd value;
  };

  void add(std::string name, Eigen::MatrixXd value) {
    index_.emplace(name, blocks_.size());
    blocks_.push_back(Block{std::move(name), std::move(value)});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Eigen::MatrixXd& operator[](const std::string& name) const { return blocks_[slot(name)].value; }
  Eigen::MatrixXd& operator[](const std::string& name) { return blocks_[slot(name)].value; }

  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  std::size_t size() const { return blocks_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks_) n += static_cast<std::size_t>(b.value.size());
    return n;
  }

  /// Same names and shapes, all zeros.
  ParamSet zeros_like() const {
    ParamSet z;
    for (const auto& b : blocks_) z.add(b.name, Eigen::MatrixXd::Zero(b.value.rows(), b.value.cols()));
    return z;
  }

  bool operator==(const ParamSet& o) const {
    if (blocks_.size() != o.blocks_.size()) return false;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const auto& a = blocks_[i];
      const auto& b = o.blocks_[i];
      if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols()) return false;
      if (a.value.size() > 0 &&
          std::memcmp(a.value.data(), b.value.data(), sizeof(double) * static_cast<std::size_t>(a.value.size())) != 0)
        return false;
    }
    return true;
  }

 private:
  std::size_t slot(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter block '" + name + "'");
    return it->second;
  }

  std::vector<Block> blocks_;
  std::unordered_map<std::string, std::size_t> index_;
};

using EgrParams = ParamSet;

struct BlockShape {
  std::string name;
  Eigen::Index rows;
  Eigen::Index cols;
};

namespace detail {
inline void add_mlp_shapes(std::vector<BlockShape>& out, const std::string& prefix, Eigen::Index in, Eigen::Index hidden,
                           Eigen::Index outdim) {
  out.push_back({prefix + ".w1", hidden, in});
  out.push_back({prefix + ".b1", hidden, 1});
  out.push_back({prefix + ".ln_gain", hidden, 1});
  out.push_back({prefix + ".ln_offset", hidden, 1});
  out.push_back({prefix + ".w2", outdim, hidden});
  out.push_back({prefix + ".b2", outdim, 1});
}

inline std::string layer_prefix(int l) { return "layers." + std::to_string(l); }
}  // namespace detail

/// Every parameter block in canonical order.
inline std::vector<BlockShape> parameter_shapes(const EgrConfig& c) {
  const Eigen::Index d = c.hidden_dim;
  std::vector<BlockShape> s;
  s.push_back({"embed.w", d, c.node_dim()});
  s.push_back({"embed.b", d, 1});
  for (int l = 0; l < c.num_layers; ++l) {
    const std::string p = detail::layer_prefix(l);
    detail::add_mlp_shapes(s, p + ".edge_mlp", 2 * d + c.edge_dim() + 1, d, d);
    detail::add_mlp_shapes(s, p + ".coord_mlp", d, d, 1);
    detail::add_mlp_shapes(s, p + ".node_mlp", 4 * d, d, d);
    if (c.attention_enabled)
      for (const char* a : {"global", "local"})
        for (const char* m : {"q", "k", "v"}) s.push_back({p + ".attn." + a + "." + m, d, d});
  }
  s.push_back({"skip.alpha", 1, 1});
  s.push_back({"skip.beta", 1, 1});
  detail::add_mlp_shapes(s, "qa_mlp", d, d, 1);
  return s;
}

/// Weights ~ U(-sqrt(3/fan_in), sqrt(3/fan_in)); biases and layer-norm
/// offsets 0, gains 1; the coordinate head's output layer is zero so a fresh
/// model moves no atoms; skip strengths start at sigmoid(0) = 0.5.
inline EgrParams init_params(const EgrConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  EgrParams p;
  for (const auto& shape : parameter_shapes(config)) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(shape.rows, shape.cols);
    const auto ends_with = [&](const char* suffix) {
      const std::string s(suffix);
      return shape.name.size() >= s.size() && shape.name.compare(shape.name.size() - s.size(), s.size(), s) == 0;
    };
    const bool coord_out = shape.name.find(".coord_mlp.w2") != std::string::npos;
    if (ends_with(".ln_gain")) {
      m.setOnes();
    } else if (!coord_out && (ends_with(".w") || ends_with(".w1") || ends_with(".w2") || ends_with(".q") ||
                              ends_with(".k") || ends_with(".v"))) {
      const double limit = std::sqrt(3.0 / static_cast<double>(shape.cols));
      std::uniform_real_distribution<double> u(-limit, limit);
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng);
    }
    p.add(shape.name, std::move(m));
  }
  return p;
}

inline void check_param_shapes(const EgrParams& params, const EgrConfig& config) {
  const auto shapes = parameter_shapes(config);
  if (shapes.size() != params.size())
    throw WeightsShapeError("expected " + std::to_string(shapes.size()) + " parameter blocks, found " +
                            std::to_string(params.size()));
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& b = params.blocks()[i];
    if (b.name != shapes[i].name || b.value.rows() != shapes[i].rows || b.value.cols() != shapes[i].cols)
      throw WeightsShapeError("parameter block " + std::to_string(i) + " ('" + b.name + "') does not match '" +
                              shapes[i].name + "' " + std::to_string(shapes[i].rows) + "x" +
                              std::to_string(shapes[i].cols));
  }
}

// ---------------------------------------------------------------------------
// Attention kernels. Tokens are columns: Q, K, V are d x n.

/// (V K^T) Q / n, linear in n.
inline Eigen::MatrixXd linear_attention_kernel(const Eigen::MatrixXd& q, const Eigen::MatrixXd& k,
                                               const Eigen::MatrixXd& v) {
  return (v * k.transpose()) * q / static_cast<double>(q.cols());
}

/// V (K^T Q) / n, the quadratic evaluation order of the same product.
inline Eigen::MatrixXd quadratic_attention_kernel(const Eigen::MatrixXd& q, const Eigen::MatrixXd& k,
                                                  const Eigen::MatrixXd& v) {
  return v * (k.transpose() * q) / static_cast<double>(q.cols());
}

namespace detail {

struct MlpVars {
  ad::Var w1, b1, ln_gain, ln_offset, w2, b2;
};

struct AttentionVars {
  ad::Var q, k, v;
};

struct LayerVars {
  MlpVars edge, coord, node;
  AttentionVars global, local;
};

inline ad::Var mlp(const MlpVars& m, const ad::Var& in, double slope) {
  ad::Var z = ad::add_colwise(ad::matmul(m.w1, in), m.b1);
  z = ad::layer_norm(z, m.ln_gain, m.ln_offset);
  z = ad::leaky_relu(z, slope);
  return ad::add_colwise(ad::matmul(m.w2, z), m.b2);
}

}  // namespace detail

/// Global attention over all nodes in linear time.
inline ad::Var linear_attention(const ad::Var& h, const ad::Var& wq, const ad::Var& wk, const ad::Var& wv) {
  const ad::Var q = ad::matmul(wq, h);
  const ad::Var k = ad::matmul(wk, h);
  const ad::Var v = ad::matmul(wv, h);
  const ad::Var vk = ad::matmul(v, ad::transpose(k));
  return ad::scale(ad::matmul(vk, q), 1.0 / static_cast<double>(h.cols()));
}

/// Softmax attention restricted to consecutive index blocks of `window` nodes.
inline ad::Var local_window_attention(const ad::Var& h, const ad::Var& wq, const ad::Var& wk, const ad::Var& wv,
                                      int window) {
  const ad::Var q = ad::matmul(wq, h);
  const ad::Var k = ad::matmul(wk, h);
  const ad::Var v = ad::matmul(wv, h);
  const Eigen::Index n = h.cols();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(h.rows()));
  std::vector<ad::Var> blocks;
  for (Eigen::Index begin = 0; begin < n; begin += window) {
    const Eigen::Index len = std::min<Eigen::Index>(window, n - begin);
    const ad::Var qb = ad::slice_cols(q, begin, len);
    const ad::Var kb = ad::slice_cols(k, begin, len);
    const ad::Var vb = ad::slice_cols(v, begin, len);
    const ad::Var scores = ad::scale(ad::matmul(ad::transpose(kb), qb), inv_sqrt_d);
    blocks.push_back(ad::matmul(vb, ad::softmax_cols(scores)));
  }
  return blocks.size() == 1 ? blocks.front() : ad::concat_cols(blocks);
}

inline Eigen::MatrixXd linear_attention(const Eigen::MatrixXd& h, const Eigen::MatrixXd& wq, const Eigen::MatrixXd& wk,
                                        const Eigen::MatrixXd& wv) {
  ad::Tape t;
  return linear_attention(t.leaf(h), t.leaf(wq), t.leaf(wk), t.leaf(wv)).value();
}

inline Eigen::MatrixXd local_window_attention(const Eigen::MatrixXd& h, const Eigen::MatrixXd& wq,
                                              const Eigen::MatrixXd& wk, const Eigen::MatrixXd& wv, int window) {
  ad::Tape t;
  return local_window_attention(t.leaf(h), t.leaf(wq), t.leaf(wk), t.leaf(wv), window).value();
}

/// Graph connectivity and fixed inputs shared by every layer.
struct LayerContext {
  const std::vector<int>* src = nullptr;
  const std::vector<int>* dst = nullptr;
  ad::Var edge_features;  // d_e x |E|
  ad::Var node_input;     // embedded input features, d x n
  ad::Var anchor;         // x^(0), 3 x n
  ad::Var alpha;          // 1 x 1, in (0, 1)
  ad::Var beta;           // 1 x 1, in (0, 1)
};

/// One message-passing step; returns (x^(l+1), h^(l+1)).
inline std::pair<ad::Var, ad::Var> egr_layer(const LayerContext& ctx, const detail::LayerVars& p, const ad::Var& x,
                                             const ad::Var& h, const EgrConfig& config) {
  const Eigen::Index n = x.cols();
  const ad::Var hi = ad::gather_cols(h, *ctx.dst);
  const ad::Var hj = ad::gather_cols(h, *ctx.src);
  const ad::Var rel = ad::sub(ad::gather_cols(x, *ctx.dst), ad::gather_cols(x, *ctx.src));  // x_i - x_j
  const ad::Var sq = ad::col_sqnorm(rel);

  const ad::Var msg = detail::mlp(p.edge, ad::concat_rows({hi, hj, ctx.edge_features, sq}), config.leaky_slope);
  const ad::Var coef = detail::mlp(p.coord, msg, config.leaky_slope);  // 1 x |E|
  const ad::Var inv = ad::reciprocal(ad::add_scalar(ad::col_norm(rel), config.norm_constant));
  const ad::Var shift = ad::segment_mean(ad::mul_rowbcast(rel, ad::cmul(coef, inv)), *ctx.dst, n);
  // x + alpha (x0 - x) is alpha x0 + (1 - alpha) x, exact when x == x0.
  const ad::Var x_next = ad::add(ad::add(x, ad::mul_scalar(ad::sub(ctx.anchor, x), ctx.alpha)), shift);

  const ad::Var agg = ad::segment_mean(msg, *ctx.dst, n);
  ad::Var attn;
  if (config.attention_enabled) {
    attn = ad::add(linear_attention(h, p.global.q, p.global.k, p.global.v),
                   local_window_attention(h, p.local.q, p.local.k, p.local.v, config.window_size));
  } else {
    attn = h.tape()->leaf(Eigen::MatrixXd::Zero(h.rows(), n));
  }
  const ad::Var upd = detail::mlp(p.node, ad::concat_rows({h, agg, attn, ctx.node_input}), config.leaky_slope);
  const ad::Var one_minus_beta = ad::add_scalar(ad::scale(ctx.beta, -1.0), 1.0);
  const ad::Var h_next = ad::add(ad::mul_scalar(upd, ctx.beta), ad::mul_scalar(h, one_minus_beta));
  return {x_next, h_next};
}

struct RefinementResult {
  Matrix3X refined_coords;         // 3 x n
  Eigen::MatrixXd embeddings;      // d x n
  Eigen::VectorXd node_quality;    // every node, in [0, 1]
  std::vector<int> ca_nodes;       // nodes carrying a per-residue estimate
  Eigen::VectorXd predicted_lddt;  // aligned with ca_nodes
};

/// A recorded forward pass, kept for differentiation.
struct ForwardTrace {
  std::unique_ptr<ad::Tape> tape = std::make_unique<ad::Tape>();
  std::vector<ad::Var> params;  // aligned with EgrParams::blocks()
  ad::Var coords;               // 3 x n
  ad::Var embeddings;           // d x n
  ad::Var quality;              // 1 x n
};

inline void check_graph_widths(const ComplexGraph& graph, const EgrConfig& config) {
  if (graph.node_features.rows() != config.node_dim())
    throw ConfigError("graph node features have width " + std::to_string(graph.node_features.rows()) +
                      ", model expects " + std::to_string(config.node_dim()));
  if (graph.edge_features.rows() != config.edge_dim())
    throw ConfigError("graph edge features have width " + std::to_string(graph.edge_features.rows()) +
                      ", model expects " + std::to_string(config.edge_dim()));
  if (graph.node_features.cols() != graph.coords.cols() ||
      static_cast<std::size_t>(graph.edge_features.cols()) != graph.edge_count())
    throw ConfigError("graph feature counts do not match node/edge counts");
}

inline ForwardTrace trace_forward(const ComplexGraph& graph, const EgrParams& params, const EgrConfig& config) {
  config.validate();
  check_graph_widths(graph, config);
  if (graph.node_count() < 1) throw GraphTooSmallError("empty graph");

  ForwardTrace tr;
  ad::Tape& t = *tr.tape;
  std::unordered_map<std::string, ad::Var> by_name;
  for (const auto& b : params.blocks()) {
    tr.params.push_back(t.leaf(b.value));
    by_name.emplace(b.name, tr.params.back());
  }
  const auto var = [&](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw WeightsShapeError("missing parameter block '" + name + "'");
    return it->second;
  };
  const auto mlp_vars = [&](const std::string& prefix) {
    return detail::MlpVars{var(prefix + ".w1"), var(prefix + ".b1"), var(prefix + ".ln_gain"),
                           var(prefix + ".ln_offset"), var(prefix + ".w2"), var(prefix + ".b2")};
  };

  LayerContext ctx;
  ctx.src = &graph.src;
  ctx.dst = &graph.dst;
  ctx.edge_features = t.leaf(graph.edge_features);
  ctx.anchor = t.leaf(graph.initial_coords);
  ctx.alpha = ad::sigmoid(var("skip.alpha"));
  ctx.beta = ad::sigmoid(var("skip.beta"));
  const ad::Var h0 = ad::add_colwise(ad::matmul(var("embed.w"), t.leaf(graph.node_features)), var("embed.b"));
  ctx.node_input = h0;

  ad::Var x = t.leaf(graph.coords);
  ad::Var h = h0;
  for (int l = 0; l < config.num_layers; ++l) {
    const std::string p = detail::layer_prefix(l);
    detail::LayerVars lv;
    lv.edge = mlp_vars(p + ".edge_mlp");
    lv.coord = mlp_vars(p + ".coord_mlp");
    lv.node = mlp_vars(p + ".node_mlp");
    if (config.attention_enabled) {
      lv.global = {var(p + ".attn.global.q"), var(p + ".attn.global.k"), var(p + ".attn.global.v")};
      lv.local = {var(p + ".attn.local.q"), var(p + ".attn.local.k"), var(p + ".attn.local.v")};
    }
    std::tie(x, h) = egr_layer(ctx, lv, x, h, config);
  }
  tr.coords = x;
  tr.embeddings = h;
  tr.quality = ad::sigmoid(detail::mlp(mlp_vars("qa_mlp"), h, config.leaky_slope));
  return tr;
}

inline RefinementResult forward(const ComplexGraph& graph, const EgrParams& params, const EgrConfig& config) {
  const ForwardTrace tr = trace_forward(graph, params, config);
  RefinementResult r;
  r.refined_coords = tr.coords.value();
  r.embeddings = tr.embeddings.value();
  r.node_quality = tr.quality.value().row(0).transpose();
  for (Eigen::Index i = 0; i < graph.node_count(); ++i)
    if (graph.ca_mask[static_cast<std::size_t>(i)]) r.ca_nodes.push_back(static_cast<int>(i));
  r.predicted_lddt.resize(static_cast<Eigen::Index>(r.ca_nodes.size()));
  for (std::size_t k = 0; k < r.ca_nodes.size(); ++k)
    r.predicted_lddt(static_cast<Eigen::Index>(k)) = r.node_quality(r.ca_nodes[k]);
  return r;
}

// ---------------------------------------------------------------------------
// Weights container:
//   "EGRW" | u32 version | u64 header length | header JSON | f64 LE arrays

inline constexpr char kWeightsMagic[4] = {'E', 'G', 'R', 'W'};
inline constexpr std::uint32_t kWeightsVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& out, T value) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const char* what) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T)))
    throw WeightsTruncatedError(std::string("stream ends inside ") + what);
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(buf[i]) << (8 * i);
  return value;
}

}  // namespace detail

/// Named matrices plus a free-form JSON header, in the versioned container.
inline void write_container(std::ostream& out, nlohmann::json header,
                            const std::vector<std::pair<std::string, const Eigen::MatrixXd*>>& arrays) {
  nlohmann::json blocks = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : arrays) {
    blocks.push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m->size()) * sizeof(double);
  }
  header["blocks"] = std::move(blocks);
  const std::string text = header.dump();
  out.write(kWeightsMagic, 4);
  detail::write_le<std::uint32_t>(out, kWeightsVersion);
  detail::write_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, m] : arrays) {
    // Column-major element order.
    for (Eigen::Index i = 0; i < m->size(); ++i) {
      std::uint64_t bits;
      const double v = m->data()[i];
      std::memcpy(&bits, &v, sizeof bits);
      detail::write_le<std::uint64_t>(out, bits);
    }
  }
  if (!out) throw WeightsError("failed writing weights stream");
}

struct Container {
  nlohmann::json header;
  std::vector<std::pair<std::string, Eigen::MatrixXd>> arrays;
};

inline Container read_container(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4)) throw WeightsTruncatedError("stream ends inside magic bytes");
  if (std::memcmp(magic, kWeightsMagic, 4) != 0) throw WeightsVersionError("not an EGRW weights stream (bad magic)");
  const auto version = detail::read_le<std::uint32_t>(in, "version");
  if (version != kWeightsVersion)
    throw WeightsVersionError("unsupported weights format version " + std::to_string(version));
  const auto len = detail::read_le<std::uint64_t>(in, "header length");
  if (len > (std::uint64_t{1} << 32)) throw WeightsTruncatedError("implausible header length");
  std::string text(static_cast<std::size_t>(len), '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw WeightsTruncatedError("stream ends inside header");

  Container c;
  try {
    c.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw WeightsError(std::string("malformed weights header: ") + e.what());
  }
  if (!c.header.contains("blocks") || !c.header["blocks"].is_array()) throw WeightsError("weights header lacks blocks");
  std::uint64_t expected_offset = 0;
  for (const auto& b : c.header["blocks"]) {
    const auto name = b.at("name").get<std::string>();
    const auto rows = b.at("rows").get<Eigen::Index>();
    const auto cols = b.at("cols").get<Eigen::Index>();
    if (rows < 0 || cols < 0 || b.at("offset").get<std::uint64_t>() != expected_offset)
      throw WeightsShapeError("inconsistent block table entry '" + name + "'");
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const auto bits = detail::read_le<std::uint64_t>(in, ("block '" + name + "'").c_str());
      double v;
      std::memcpy(&v, &bits, sizeof v);
      m.data()[i] = v;
    }
    expected_offset += static_cast<std::uint64_t>(m.size()) * sizeof(double);
    c.arrays.emplace_back(name, std::move(m));
  }
  return c;
}

inline void save_weights(std::ostream& out, const EgrParams& params, const EgrConfig& config) {
  std::vector<std::pair<std::string, const Eigen::MatrixXd*>> arrays;
  for (const auto& b : params.blocks()) arrays.emplace_back(b.name, &b.value);
  write_container(out, {{"kind", "egr-weights"}, {"config", to_json(config)}}, arrays);
}

inline std::string save_weights(const EgrParams& params, const EgrConfig& config) {
  std::ostringstream out(std::ios::binary);
  save_weights(out, params, config);
  return out.str();
}

/// Parameters from a container; extra arrays (optimizer state) are ignored.
inline std::pair<EgrParams, EgrConfig> load_weights(std::istream& in) {
  Container c = read_container(in);
  if (!c.header.contains("config")) throw WeightsError("weights header lacks config");
  const EgrConfig config = config_from_json(c.header["config"]);
  const auto shapes = parameter_shapes(config);
  if (c.arrays.size() < shapes.size())
    throw WeightsShapeError("weights stream has " + std::to_string(c.arrays.size()) + " blocks, config needs " +
                            std::to_string(shapes.size()));
  EgrParams p;
  for (std::size_t i = 0; i < shapes.size(); ++i) p.add(c.arrays[i].first, std::move(c.arrays[i].second));
  check_param_shapes(p, config);
  return {std::move(p), config};
}

inline std::pair<EgrParams, EgrConfig> load_weights(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  return load_weights(in);
}

}  // namespace egr

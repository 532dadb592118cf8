#pragma once

// Encoder-processor-decoder graph network on top of the autodiff tape, plus
// the coordinate-input MLP used as the ablation baseline. Parameters live in
// one flat vector described by a tensor layout, so optimizers and checkpoints
// never need to know the architecture.

#include "pigmen/autodiff.hpp"
#include "pigmen/mesh.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace pigmen::nn {

using ad::Tape;
using ad::Value;
using mesh::Graph;

enum class Architecture { GraphNet, CoordinateMlp };

inline std::string architecture_name(Architecture a) {
  return a == Architecture::GraphNet ? "graphnet" : "coordinate_mlp";
}

inline Architecture parse_architecture(const std::string& s) {
  if (s == "graphnet") return Architecture::GraphNet;
  if (s == "coordinate_mlp") return Architecture::CoordinateMlp;
  throw ValidationError("unknown architecture '" + s + "'");
}

struct ModelConfig {
  Architecture architecture = Architecture::GraphNet;
  int hidden_width = 64;
  /// Linear layers per MLP; ReLU sits between consecutive layers only.
  int mlp_layers = 2;
  int n_processors = 3;
  int node_in_dim = 1;
  /// Edge feature width, dim + 1. The coordinate MLP reads dim = edge_in_dim - 1
  /// coordinates per node instead of edges.
  int edge_in_dim = 3;
  /// Total decoder outputs: k channels of u followed by k channels of lambda.
  int out_channels = 2;
  /// Separate decoders for u and lambda instead of one decoder with 2k outputs.
  bool split_decoder = false;
  std::string activation = "relu";

  int field_channels() const { return out_channels / 2; }

  void validate() const {
    if (hidden_width < 1 || mlp_layers < 1 || n_processors < 1 || node_in_dim < 1 || edge_in_dim < 2) {
      throw ValidationError("model config: all counts must be >= 1 (edge_in_dim >= 2)");
    }
    if (out_channels < 2 || out_channels % 2 != 0) throw ValidationError("model config: out_channels must be 2k");
    if (activation != "relu") throw ValidationError("model config: only relu activation is supported");
  }

  /// Baseline used in the ablation: two hidden layers of width 128.
  static ModelConfig coordinate_mlp(int dim, int node_in_dim, int out_channels) {
    ModelConfig c;
    c.architecture = Architecture::CoordinateMlp;
    c.hidden_width = 128;
    c.mlp_layers = 3;
    c.n_processors = 1;
    c.node_in_dim = node_in_dim;
    c.edge_in_dim = dim + 1;
    c.out_channels = out_channels;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"architecture", architecture_name(c.architecture)},
       {"hidden_width", c.hidden_width},
       {"mlp_layers", c.mlp_layers},
       {"n_processors", c.n_processors},
       {"node_in_dim", c.node_in_dim},
       {"edge_in_dim", c.edge_in_dim},
       {"out_channels", c.out_channels},
       {"decoder", c.split_decoder ? "split" : "shared"},
       {"activation", c.activation}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.architecture = parse_architecture(j.value("architecture", architecture_name(d.architecture)));
  c.hidden_width = j.value("hidden_width", d.hidden_width);
  c.mlp_layers = j.value("mlp_layers", d.mlp_layers);
  c.n_processors = j.value("n_processors", d.n_processors);
  c.node_in_dim = j.value("node_in_dim", d.node_in_dim);
  c.edge_in_dim = j.value("edge_in_dim", d.edge_in_dim);
  c.out_channels = j.value("out_channels", d.out_channels);
  const std::string dec = j.value("decoder", std::string("shared"));
  if (dec != "shared" && dec != "split") throw ValidationError("decoder must be 'shared' or 'split'");
  c.split_decoder = dec == "split";
  c.activation = j.value("activation", d.activation);
}

struct TensorSlot {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index offset = 0;
  bool is_bias = false;

  Eigen::Index size() const { return rows * cols; }
};

/// Per-column affine normalization (x - mean) / std.
struct Standardizer {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd std;

  bool fitted() const { return mean.size() > 0; }

  static Standardizer fit(const Matrix& x) {
    if (x.rows() < 2) throw ValidationError("standardizer needs at least two rows");
    Standardizer s;
    s.mean = x.colwise().mean();
    s.std = ((x.rowwise() - s.mean).cwiseAbs2().colwise().sum() / static_cast<double>(x.rows())).cwiseSqrt();
    s.std = s.std.cwiseMax(1e-8);
    return s;
  }

  static Standardizer identity(Eigen::Index n) {
    return {Eigen::RowVectorXd::Zero(n), Eigen::RowVectorXd::Ones(n)};
  }

  Matrix apply(const Matrix& x) const {
    if (x.cols() != mean.size()) throw ShapeError("standardizer: feature width mismatch");
    return (x.rowwise() - mean).array().rowwise() / std.array();
  }
};

struct ModelParams {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::vector<TensorSlot> layout;
  Vector flat;
  Standardizer node_stats;
  Standardizer edge_stats;
  /// Decoder outputs are mapped back as y * std + mean (u channels, then lambda).
  Standardizer output_stats;

  const TensorSlot& slot(const std::string& name) const {
    for (const auto& s : layout)
      if (s.name == name) return s;
    throw ValidationError("no parameter tensor named '" + name + "'");
  }

  Matrix tensor(const TensorSlot& s) const { return Eigen::Map<const Matrix>(flat.data() + s.offset, s.rows, s.cols); }
  Matrix tensor(const std::string& name) const { return tensor(slot(name)); }

  void set_tensor(const std::string& name, const Matrix& value) {
    const auto& s = slot(name);
    if (value.rows() != s.rows || value.cols() != s.cols) throw ShapeError("set_tensor: shape mismatch for " + name);
    Eigen::Map<Matrix>(flat.data() + s.offset, s.rows, s.cols) = value;
  }
};

namespace detail {

/// Input/output widths of each layer of an MLP with `layers` linear maps.
inline std::vector<std::pair<int, int>> mlp_shapes(int in, int hidden, int out, int layers) {
  std::vector<std::pair<int, int>> s;
  for (int l = 0; l < layers; ++l) s.emplace_back(l == 0 ? in : hidden, l + 1 == layers ? out : hidden);
  return s;
}

inline void add_mlp(std::vector<TensorSlot>& layout, Eigen::Index& offset, const std::string& prefix, int in,
                    int hidden, int out, int layers) {
  int l = 0;
  for (auto [fi, fo] : mlp_shapes(in, hidden, out, layers)) {
    const std::string base = prefix + "." + std::to_string(l++);
    layout.push_back({base + ".W", fi, fo, offset, false});
    offset += static_cast<Eigen::Index>(fi) * fo;
    layout.push_back({base + ".b", 1, fo, offset, true});
    offset += fo;
  }
}

}  // namespace detail

inline std::vector<TensorSlot> build_layout(const ModelConfig& c) {
  c.validate();
  std::vector<TensorSlot> layout;
  Eigen::Index off = 0;
  const int h = c.hidden_width, L = c.mlp_layers, k = c.field_channels();
  if (c.architecture == Architecture::CoordinateMlp) {
    detail::add_mlp(layout, off, "mlp", c.node_in_dim + c.edge_in_dim - 1, h, c.out_channels, L);
    return layout;
  }
  detail::add_mlp(layout, off, "node_encoder", c.node_in_dim, h, h, L);
  detail::add_mlp(layout, off, "edge_encoder", c.edge_in_dim, h, h, L);
  for (int p = 0; p < c.n_processors; ++p) {
    detail::add_mlp(layout, off, "processor" + std::to_string(p) + ".edge", 3 * h, h, h, L);
    detail::add_mlp(layout, off, "processor" + std::to_string(p) + ".node", 2 * h, h, h, L);
  }
  if (c.split_decoder) {
    detail::add_mlp(layout, off, "decoder_u", h, h, k, L);
    detail::add_mlp(layout, off, "decoder_lambda", h, h, k, L);
  } else {
    detail::add_mlp(layout, off, "decoder", h, h, c.out_channels, L);
  }
  return layout;
}

inline Eigen::Index parameter_count(const ModelConfig& c) {
  Eigen::Index n = 0;
  for (const auto& s : build_layout(c)) n += s.size();
  return n;
}

enum class Init { FanInUniform, Zero };

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) drawn tensor by tensor in
/// layout order; biases zero.
inline ModelParams init_model(const ModelConfig& config, std::uint64_t seed, Init init = Init::FanInUniform) {
  ModelParams p;
  p.config = config;
  p.seed = seed;
  p.layout = build_layout(config);
  Eigen::Index n = 0;
  for (const auto& s : p.layout) n += s.size();
  p.flat = Vector::Zero(n);
  if (init == Init::FanInUniform) {
    pigmen::detail::Rng rng(seed);
    for (const auto& s : p.layout) {
      if (s.is_bias) continue;
      const double bound = 1.0 / std::sqrt(static_cast<double>(s.rows));
      for (Eigen::Index i = 0; i < s.size(); ++i) p.flat(s.offset + i) = rng.uniform(-bound, bound);
    }
  }
  const int node_width =
      config.architecture == Architecture::CoordinateMlp ? config.node_in_dim + config.edge_in_dim - 1 : config.node_in_dim;
  p.node_stats = Standardizer::identity(node_width);
  p.edge_stats = Standardizer::identity(config.edge_in_dim);
  p.output_stats = Standardizer::identity(config.out_channels);
  return p;
}

/// Node inputs seen by the model before standardization. The coordinate MLP
/// reads absolute coordinates next to the node features.
inline Matrix raw_node_inputs(const ModelParams& p, const Graph& g, const Matrix* coords) {
  if (p.config.architecture == Architecture::GraphNet) return g.node_features;
  if (coords == nullptr) throw ValidationError("coordinate MLP needs node coordinates");
  if (coords->rows() != g.n_nodes || coords->cols() != p.config.edge_in_dim - 1) {
    throw ShapeError("coordinate MLP: coordinate array does not match the graph");
  }
  Matrix x(g.n_nodes, coords->cols() + g.node_features.cols());
  x << *coords, g.node_features;
  return x;
}

inline ModelParams fit_standardizer(ModelParams p, const Graph& g, const Matrix* coords = nullptr) {
  if (g.n_nodes < 2) throw ValidationError("standardizer needs a graph with at least two nodes");
  p.node_stats = Standardizer::fit(raw_node_inputs(p, g, coords));
  if (g.n_edges() >= 2) p.edge_stats = Standardizer::fit(g.edge_features);
  return p;
}

/// Output scale from a target field (N_v x k): u channels get the target's
/// per-channel mean and std, lambda channels zero mean and the same std.
inline ModelParams fit_output_scale(ModelParams p, const Matrix& u_true) {
  const int k = p.config.field_channels();
  if (u_true.cols() != k) throw ShapeError("fit_output_scale: target has " + std::to_string(u_true.cols()) +
                                           " channels, model predicts " + std::to_string(k));
  const auto s = Standardizer::fit(u_true);
  p.output_stats.mean = Eigen::RowVectorXd::Zero(2 * k);
  p.output_stats.std.resize(2 * k);
  p.output_stats.mean.head(k) = s.mean;
  p.output_stats.std << s.std, s.std;
  return p;
}

/// Parameters bound to a tape as leaves, one Value per tensor.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ModelParams& p) : params_(&p) {
    values_.reserve(p.layout.size());
    for (const auto& s : p.layout) {
      index_.emplace(s.name, values_.size());
      values_.push_back(tape.leaf(p.tensor(s)));
    }
  }

  const Value& operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("no parameter tensor named '" + name + "'");
    return values_[it->second];
  }

  /// Gradient of the last backward() scattered into the flat layout.
  Vector gradient() const {
    Vector g = Vector::Zero(params_->flat.size());
    for (std::size_t i = 0; i < values_.size(); ++i) {
      const auto& s = params_->layout[i];
      const Matrix& gi = values_[i].grad();
      if (gi.size() == 0) continue;
      g.segment(s.offset, s.size()) = Eigen::Map<const Vector>(gi.data(), gi.size());
    }
    return g;
  }

 private:
  const ModelParams* params_;
  std::vector<Value> values_;
  std::map<std::string, std::size_t> index_;
};

/// Applies layers prefix.0 .. prefix.(n-1) with ReLU between them.
inline Value mlp(const BoundParams& bp, const std::string& prefix, int layers, Value x, int first = 0) {
  for (int l = first; l < layers; ++l) {
    const std::string base = prefix + "." + std::to_string(l);
    x = ad::linear_layer(bp[base + ".W"], bp[base + ".b"], x);
    if (l + 1 < layers) x = ad::relu(x);
  }
  return x;
}

/// One message-passing block with residual updates:
///   e'_k = e_k + phi_e([e_k, v_{r_k}, v_{s_k}])
///   v'_i = v_i + phi_v([sum_{k : r_k = i} e'_k, v_i]).
/// The first edge layer is evaluated as e W_e + (v W_r)[r] + (v W_s)[s] + b,
/// which equals the concatenated form while touching each node row once.
inline std::pair<Value, Value> graph_block(const BoundParams& bp, const std::string& prefix, int layers,
                                           const Graph& g, const Value& v, const Value& e) {
  if (v.rows() != g.n_nodes || e.rows() != g.n_edges()) throw ShapeError("graph_block: embedding rows mismatch");
  if (v.cols() != e.cols()) throw ShapeError("graph_block: node and edge embedding widths differ");
  const Eigen::Index h = v.cols();
  const std::string edge = prefix + ".edge", node = prefix + ".node";

  const Value& W = bp[edge + ".0.W"];
  if (W.rows() != 3 * h) throw ShapeError("graph_block: edge processor input width != 3 * hidden");
  Value pre = ad::matmul(e, ad::slice_rows(W, 0, h));
  pre = ad::add(pre, ad::gather_rows(ad::matmul(v, ad::slice_rows(W, h, h)), g.receivers));
  pre = ad::add(pre, ad::gather_rows(ad::matmul(v, ad::slice_rows(W, 2 * h, h)), g.senders));
  pre = ad::add_row(pre, bp[edge + ".0.b"]);
  Value update = layers > 1 ? mlp(bp, edge, layers, ad::relu(pre), 1) : pre;
  Value e_new = ad::add(e, update);

  Value agg = ad::scatter_sum(e_new, g.receivers, g.n_nodes);
  Value v_new = ad::add(v, mlp(bp, node, layers, ad::concat(agg, v)));
  return {v_new, e_new};
}

struct Prediction {
  Value u;       // N_v x k
  Value lambda;  // N_v x k
};

/// Full forward pass recorded on `tape`. `coords` is required by the
/// coordinate MLP and ignored by the graph network.
inline Prediction forward(Tape& tape, const ModelParams& p, const BoundParams& bp, const Graph& g,
                          const Matrix* coords = nullptr) {
  const auto& c = p.config;
  const int L = c.mlp_layers, k = c.field_channels();
  const Matrix node_in = raw_node_inputs(p, g, coords);
  if (node_in.cols() != p.node_stats.mean.size()) throw ShapeError("forward: node feature width != model input");
  Value x = tape.constant(p.node_stats.apply(node_in));

  Value out;
  if (c.architecture == Architecture::CoordinateMlp) {
    out = mlp(bp, "mlp", L, x);
  } else {
    if (g.edge_features.cols() != c.edge_in_dim) throw ShapeError("forward: edge feature width != model input");
    Value v = mlp(bp, "node_encoder", L, x);
    Value e = mlp(bp, "edge_encoder", L, tape.constant(p.edge_stats.apply(g.edge_features)));
    for (int i = 0; i < c.n_processors; ++i) std::tie(v, e) = graph_block(bp, "processor" + std::to_string(i), L, g, v, e);
    out = c.split_decoder ? ad::concat(mlp(bp, "decoder_u", L, v), mlp(bp, "decoder_lambda", L, v))
                          : mlp(bp, "decoder", L, v);
  }
  const auto& os = p.output_stats;
  if (os.mean.size() != c.out_channels) throw ShapeError("forward: output scale width != out_channels");
  out = ad::add_row(ad::matmul(out, tape.constant(Matrix(os.std.asDiagonal()))), tape.constant(Matrix(os.mean)));
  return {ad::slice_cols(out, 0, k), ad::slice_cols(out, k, k)};
}

/// Inference helper: returns (u, lambda) as plain matrices.
inline std::pair<Matrix, Matrix> predict(const ModelParams& p, const Graph& g, const Matrix* coords = nullptr) {
  Tape tape;
  BoundParams bp(tape, p);
  auto pred = forward(tape, p, bp, g, coords);
  return {pred.u.data(), pred.lambda.data()};
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json checkpoint_json(const ModelParams& p, const nlohmann::json& extra = nlohmann::json::object()) {
  auto row = [](const Eigen::RowVectorXd& r) { return std::vector<double>(r.data(), r.data() + r.size()); };
  nlohmann::json j = {
      {"format", "pigmen-checkpoint"},
      {"version", kCheckpointVersion},
      {"architecture", architecture_name(p.config.architecture)},
      {"config", p.config},
      {"seed", p.seed},
      {"standardizer",
       {{"node_mean", row(p.node_stats.mean)},
        {"node_std", row(p.node_stats.std)},
        {"edge_mean", row(p.edge_stats.mean)},
        {"edge_std", row(p.edge_stats.std)},
        {"output_mean", row(p.output_stats.mean)},
        {"output_std", row(p.output_stats.std)}}},
      {"params", std::vector<double>(p.flat.data(), p.flat.data() + p.flat.size())},
  };
  if (!extra.empty()) j["extra"] = extra;
  return j;
}

inline ModelParams params_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "pigmen-checkpoint") throw ParseError("not a pigmen checkpoint");
  if (j.value("version", 0) != kCheckpointVersion) throw ParseError("unsupported checkpoint version");
  ModelParams p = init_model(j.at("config").get<ModelConfig>(), j.at("seed").get<std::uint64_t>(), Init::Zero);
  auto flat = j.at("params").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(flat.size()) != p.flat.size()) throw ParseError("checkpoint parameter count mismatch");
  p.flat = Eigen::Map<const Vector>(flat.data(), static_cast<Eigen::Index>(flat.size()));
  auto row = [&](const char* key, Eigen::Index n) {
    auto v = j.at("standardizer").at(key).get<std::vector<double>>();
    if (static_cast<Eigen::Index>(v.size()) != n) throw ParseError(std::string("checkpoint ") + key + " width mismatch");
    return Eigen::RowVectorXd(Eigen::Map<const Eigen::RowVectorXd>(v.data(), n));
  };
  p.node_stats = {row("node_mean", p.node_stats.mean.size()), row("node_std", p.node_stats.mean.size())};
  p.edge_stats = {row("edge_mean", p.edge_stats.mean.size()), row("edge_std", p.edge_stats.mean.size())};
  p.output_stats = {row("output_mean", p.output_stats.mean.size()), row("output_std", p.output_stats.mean.size())};
  return p;
}

inline void save_checkpoint(const std::string& path, const ModelParams& p,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out << checkpoint_json(p, extra).dump(1) << '\n';
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
}

inline ModelParams load_checkpoint(const std::string& path) { return params_from_json(read_json_file(path)); }

}  // namespace pigmen::nn

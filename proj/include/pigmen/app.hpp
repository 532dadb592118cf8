#pragma once

// Command implementations behind the `pigmen` executable. Each command takes a
// resolved RunConfig (or explicit arguments), writes its artifacts into the
// output directory and returns the metrics it wrote, so tests and the
// acceptance runner can call the commands in-process.
//
// Every metrics file is a pure function of the resolved config: wall-clock
// timing goes to a separate timing.json.

#include "pigmen/femkernel.hpp"
#include "pigmen/graphnet.hpp"
#include "pigmen/mesh.hpp"
#include "pigmen/meshgen.hpp"
#include "pigmen/optim.hpp"
#include "pigmen/physics.hpp"
#include "pigmen/refsolver.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace pigmen::app {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Exit codes and environment
// ---------------------------------------------------------------------------

enum ExitCode { kOk = 0, kNumericalFailure = 1, kUsageOrIo = 2 };

/// Maps an exception to the documented exit code.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericalError*>(&e)) return kNumericalFailure;
  return kUsageOrIo;
}

/// PIGMEN_THREADS: positive integer cap on internal parallelism (default 1).
inline int thread_cap() {
  const char* v = std::getenv("PIGMEN_THREADS");
  if (v == nullptr || *v == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1 || n > 4096) throw UsageError("PIGMEN_THREADS must be a positive integer, got '" + std::string(v) + "'");
  return static_cast<int>(n);
}

// ---------------------------------------------------------------------------
// Small file helpers
// ---------------------------------------------------------------------------

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// 64-bit FNV-1a, rendered as 16 hex digits.
inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

inline void write_timing(const fs::path& dir, const std::string& command, double seconds) {
  write_json(dir / "timing.json", {{"command", command}, {"wall_seconds", seconds}, {"threads", thread_cap()}});
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Exactly one of fixture / generator / path.
struct MeshSource {
  std::string fixture;
  std::string generator;
  std::string path;

  mesh::Mesh load() const {
    if (!fixture.empty()) return mesh::generate_mesh(mesh::fixture_spec(fixture));
    if (!generator.empty()) return mesh::generate_mesh(mesh::parse_spec(generator));
    return mesh::load_mesh(path);
  }

  json to_json() const {
    if (!fixture.empty()) return {{"fixture", fixture}};
    if (!generator.empty()) return {{"generator", generator}};
    return {{"path", path}};
  }
};

enum class Recipe { BcField, NoisySolution };

struct FeatureRecipe {
  Recipe recipe = Recipe::NoisySolution;
  double level = 0.2;
  int smoothing_steps = 5;
  std::uint64_t seed = 7;

  json to_json() const {
    if (recipe == Recipe::BcField) return {{"recipe", "bc_field"}};
    return {{"recipe", "noisy_solution"}, {"level", level}, {"smoothing_steps", smoothing_steps}, {"seed", seed}};
  }
};

struct CaseSpec {
  physics::CaseKind kind = physics::CaseKind::Electrostatic;
  double v1 = 0.0;
  double v2 = 0.01;
  double lam = 1.0;
  double mu = 1.0;
  std::vector<double> d1;  // empty: (1, 0, ...)
  std::vector<double> d2;  // empty: (-1, 0, ...)

  physics::PhysicsCase build(const mesh::Mesh& m) const {
    if (kind == physics::CaseKind::Electrostatic) return physics::electrostatic_case(m, v1, v2);
    auto row = [&](const std::vector<double>& v) {
      return Eigen::RowVectorXd(Eigen::Map<const Eigen::RowVectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    };
    return physics::elasticity_case(m, lam, mu, row(d1), row(d2));
  }

  json to_json() const {
    if (kind == physics::CaseKind::Electrostatic) return {{"kind", "electrostatic"}, {"v1", v1}, {"v2", v2}};
    return {{"kind", "elasticity"}, {"lam", lam}, {"mu", mu}, {"d1", d1}, {"d2", d2}};
  }
};

struct RunConfig {
  MeshSource mesh;
  std::optional<MeshSource> test_mesh;
  CaseSpec physics_case;
  FeatureRecipe features;
  nn::ModelConfig model;
  bool output_scale = true;
  optim::Schedule schedule;
  physics::LossWeights loss;
  std::uint64_t seed = 42;
  std::string out = "pigmen_out";
  /// Progress lines every this many epochs (0: silent).
  int log_every = 100;

  /// Canonical form with every default filled in.
  json resolved() const {
    json model_json = model;
    model_json["output_scale"] = output_scale ? "target" : "identity";
    json j = {
        {"mesh", mesh.to_json()},
        {"case", physics_case.to_json()},
        {"features", features.to_json()},
        {"model", model_json},
        {"schedule",
         {{"adam_epochs", schedule.adam_epochs},
          {"adam_lr", schedule.adam_lr},
          {"lbfgs_epochs", schedule.lbfgs_epochs},
          {"lbfgs_lr", schedule.lbfgs_lr},
          {"lbfgs_history", schedule.lbfgs_history}}},
        {"loss", {{"stat_u", loss.stat_u}, {"stat_lambda", loss.stat_lambda}, {"data", loss.data}}},
        {"seed", seed},
    };
    if (test_mesh) j["test_mesh"] = test_mesh->to_json();
    return j;
  }

  /// Hash of the resolved config; the output directory and logging are not part of it.
  std::string hash() const { return fnv1a_hex(resolved().dump()); }
};

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ValidationError("unknown key '" + k + "' in " + where);
  }
}

inline MeshSource parse_mesh_source(const json& j, const fs::path& base, const std::string& where) {
  if (j.is_string()) {
    // Shorthand: a fixture name, or a path if no fixture has that name.
    const std::string s = j.get<std::string>();
    try {
      mesh::fixture_spec(s);
      return {s, "", ""};
    } catch (const UsageError&) {
      return {"", "", (base / s).lexically_normal().string()};
    }
  }
  reject_unknown(j, {"fixture", "generator", "path"}, where);
  if (j.size() != 1) throw ValidationError(where + " needs exactly one of fixture, generator, path");
  MeshSource m;
  if (j.contains("fixture")) {
    m.fixture = j["fixture"].get<std::string>();
    mesh::fixture_spec(m.fixture);
  } else if (j.contains("generator")) {
    m.generator = mesh::parse_spec(j["generator"].get<std::string>()).str();
  } else {
    const fs::path p = j["path"].get<std::string>();
    m.path = (p.is_absolute() ? p : base / p).lexically_normal().string();
  }
  return m;
}

inline nn::ModelConfig parse_model(const json& j, int dim, int node_in, int k, bool& output_scale) {
  reject_unknown(j,
                 {"architecture", "hidden_width", "mlp_layers", "n_processors", "decoder", "activation",
                  "node_in_dim", "edge_in_dim", "out_channels", "output_scale"},
                 "model");
  const auto arch = nn::parse_architecture(j.value("architecture", std::string("graphnet")));
  nn::ModelConfig c = arch == nn::Architecture::CoordinateMlp ? nn::ModelConfig::coordinate_mlp(dim, node_in, 2 * k)
                                                              : nn::ModelConfig{};
  c.hidden_width = j.value("hidden_width", c.hidden_width);
  c.mlp_layers = j.value("mlp_layers", c.mlp_layers);
  c.n_processors = j.value("n_processors", c.n_processors);
  c.activation = j.value("activation", c.activation);
  const std::string dec = j.value("decoder", std::string("shared"));
  if (dec != "shared" && dec != "split") throw ValidationError("model.decoder must be 'shared' or 'split'");
  c.split_decoder = dec == "split";
  // Input/output widths follow from the mesh, case and feature recipe.
  auto check = [&](const char* key, int expected) {
    if (j.contains(key) && j[key].get<int>() != expected) {
      throw ValidationError(std::string("model.") + key + " = " + std::to_string(j[key].get<int>()) +
                            " does not match the feature recipe / case (expected " + std::to_string(expected) + ")");
    }
    return expected;
  };
  c.node_in_dim = check("node_in_dim", node_in);
  c.edge_in_dim = check("edge_in_dim", dim + 1);
  c.out_channels = check("out_channels", 2 * k);
  const std::string os = j.value("output_scale", std::string("target"));
  if (os != "target" && os != "identity") throw ValidationError("model.output_scale must be 'target' or 'identity'");
  output_scale = os == "target";
  c.validate();
  return c;
}

/// Defaults: 3D runs use Adam 1e-4 (50) then L-BFGS 2e-3 (100); 2D runs
/// use 5000 Adam epochs at 5e-3.
inline optim::Schedule default_schedule(int dim) {
  if (dim == 3) return {50, 1e-4, 100, 2e-3, 10};
  return {5000, 5e-3, 0, 2e-3, 10};
}

}  // namespace detail

/// Parses and resolves a config. Relative mesh paths are taken relative to
/// `base`. The training mesh is loaded once to size the model and pick the
/// dimension-dependent defaults.
inline RunConfig parse_config(const json& j, const fs::path& base = ".") {
  detail::reject_unknown(j, {"mesh", "test_mesh", "case", "features", "model", "schedule", "loss", "seed", "out",
                             "log_every"},
                         "config");
  if (!j.contains("mesh")) throw ValidationError("config needs a 'mesh' entry");
  RunConfig c;
  c.mesh = detail::parse_mesh_source(j["mesh"], base, "mesh");
  if (j.contains("test_mesh")) c.test_mesh = detail::parse_mesh_source(j["test_mesh"], base, "test_mesh");
  c.seed = j.value("seed", std::uint64_t{42});
  c.out = j.value("out", c.out);
  c.log_every = j.value("log_every", c.log_every);
  const mesh::Mesh m = c.mesh.load();

  const json cj = j.value("case", json::object());
  detail::reject_unknown(cj, {"kind", "v1", "v2", "lam", "mu", "d1", "d2"}, "case");
  c.physics_case.kind = physics::parse_case(cj.value("kind", std::string("electrostatic")));
  c.physics_case.v1 = cj.value("v1", 0.0);
  c.physics_case.v2 = cj.value("v2", 0.01);
  c.physics_case.lam = cj.value("lam", 1.0);
  c.physics_case.mu = cj.value("mu", 1.0);
  auto unit = [&](double s) {
    std::vector<double> v(m.dim, 0.0);
    v[0] = s;
    return v;
  };
  c.physics_case.d1 = cj.value("d1", unit(1.0));
  c.physics_case.d2 = cj.value("d2", unit(-1.0));
  if (c.physics_case.kind == physics::CaseKind::Elasticity &&
      (static_cast<int>(c.physics_case.d1.size()) != m.dim || static_cast<int>(c.physics_case.d2.size()) != m.dim)) {
    throw ValidationError("case.d1 / case.d2 need one value per space dimension");
  }
  if (c.physics_case.kind == physics::CaseKind::Electrostatic) {
    c.physics_case.d1.clear();
    c.physics_case.d2.clear();
  }
  const int k = c.physics_case.kind == physics::CaseKind::Electrostatic ? 1 : m.dim;

  const json fj = j.value("features", json::object());
  detail::reject_unknown(fj, {"recipe", "level", "smoothing_steps", "seed"}, "features");
  const std::string recipe = fj.value("recipe", std::string("noisy_solution"));
  if (recipe == "bc_field") {
    c.features.recipe = Recipe::BcField;
  } else if (recipe == "noisy_solution") {
    c.features.recipe = Recipe::NoisySolution;
    c.features.level = fj.value("level", 0.2);
    c.features.smoothing_steps = fj.value("smoothing_steps", 5);
    c.features.seed = fj.value("seed", c.seed);
  } else {
    throw ValidationError("features.recipe must be 'bc_field' or 'noisy_solution'");
  }

  c.model = detail::parse_model(j.value("model", json::object()), m.dim, k, k, c.output_scale);

  c.schedule = detail::default_schedule(m.dim);
  const json sj = j.value("schedule", json::object());
  detail::reject_unknown(sj, {"adam_epochs", "adam_lr", "lbfgs_epochs", "lbfgs_lr", "lbfgs_history"}, "schedule");
  c.schedule.adam_epochs = sj.value("adam_epochs", c.schedule.adam_epochs);
  c.schedule.adam_lr = sj.value("adam_lr", c.schedule.adam_lr);
  c.schedule.lbfgs_epochs = sj.value("lbfgs_epochs", c.schedule.lbfgs_epochs);
  c.schedule.lbfgs_lr = sj.value("lbfgs_lr", c.schedule.lbfgs_lr);
  c.schedule.lbfgs_history = sj.value("lbfgs_history", c.schedule.lbfgs_history);
  if (c.schedule.adam_epochs < 0 || c.schedule.lbfgs_epochs < 0 || c.schedule.lbfgs_history < 1 ||
      !(c.schedule.adam_lr > 0.0) || !(c.schedule.lbfgs_lr > 0.0)) {
    throw ValidationError("schedule: epochs must be >= 0, learning rates > 0, lbfgs_history >= 1");
  }

  const json lj = j.value("loss", json::object());
  detail::reject_unknown(lj, {"stat_u", "stat_lambda", "data"}, "loss");
  c.loss = {lj.value("stat_u", 1.0), lj.value("stat_lambda", 1.0), lj.value("data", 1.0)};
  if (c.loss.stat_u < 0 || c.loss.stat_lambda < 0 || c.loss.data < 0) throw ValidationError("loss weights must be >= 0");
  return c;
}

/// Reads a config file; `seed` and `out` override the file's values.
inline RunConfig load_config(const std::string& path, std::optional<std::uint64_t> seed = std::nullopt,
                             std::optional<std::string> out = std::nullopt) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
  if (!j.is_object()) throw ValidationError(path + ": config must be a JSON object");
  if (seed) j["seed"] = *seed;
  if (out) j["out"] = *out;
  try {
    return parse_config(j, fs::path(path).parent_path());
  } catch (const json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Problem assembly
// ---------------------------------------------------------------------------

/// Mesh, physics case, reference solution and model input for one geometry.
struct Problem {
  physics::PhysicsCase physics_case;
  solver::SolveReport solve;
  Matrix u_star;
  Matrix features;
  mesh::Graph graph;

  const mesh::Mesh& mesh() const { return physics_case.mesh; }
};

inline Matrix make_features(const FeatureRecipe& r, const physics::PhysicsCase& c, const Matrix& u_star) {
  if (r.recipe == Recipe::BcField) return c.dirichlet_values;
  return solver::make_noisy_input(c.mesh, u_star, r.level, r.smoothing_steps, r.seed);
}

inline Problem build_problem(const RunConfig& cfg, const MeshSource& src) {
  Problem p;
  p.physics_case = cfg.physics_case.build(src.load());
  p.u_star = solver::solve_case(p.physics_case, &p.solve);
  p.features = make_features(cfg.features, p.physics_case, p.u_star);
  p.graph = mesh::mesh_to_graph(p.mesh(), p.features);
  return p;
}

inline const Matrix* coords_for(const nn::ModelParams& params, const Problem& p) {
  return params.config.architecture == nn::Architecture::CoordinateMlp ? &p.mesh().coords : nullptr;
}

inline json accuracy_json(const Matrix& pred, const Matrix& truth) {
  return {{"relative_l1", physics::relative_error(pred, truth, physics::Norm::L1)},
          {"relative_l2", physics::relative_error(pred, truth, physics::Norm::L2)},
          {"relative_mse", physics::relative_mse(pred, truth)}};
}

inline json report_json(const physics::LossReport& r) {
  return {{"stat_u", r.stat_u}, {"stat_lambda", r.stat_lambda}, {"data", r.data}, {"total", r.total}};
}

// ---------------------------------------------------------------------------
// mesh gen
// ---------------------------------------------------------------------------

/// Writes <out>/mesh.txt and <out>/manifest.json; returns the manifest.
inline json cmd_mesh_gen(const std::string& spec_text, const fs::path& out) {
  const auto spec = mesh::parse_spec(spec_text);
  const auto m = mesh::generate_mesh(spec);
  ensure_dir(out);
  mesh::save_mesh((out / "mesh.txt").string(), m);
  const json manifest = mesh::manifest(spec, m);
  write_json(out / "manifest.json", manifest);
  return manifest;
}

// ---------------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------------

inline json cmd_solve(const RunConfig& cfg) {
  Stopwatch clock;
  const fs::path out = cfg.out;
  ensure_dir(out);
  const Problem p = build_problem(cfg, cfg.mesh);
  solver::save_field((out / "u_star.field").string(), p.u_star);
  const json report = {
      {"command", "solve"},
      {"config_hash", cfg.hash()},
      {"case", physics::case_name(p.physics_case.kind)},
      {"n_nodes", p.mesh().n_nodes()},
      {"n_free_dofs", p.solve.n_free},
      {"cg_iterations", p.solve.iterations},
      {"relative_residual", p.solve.relative_residual},
      {"min", p.u_star.minCoeff()},
      {"max", p.u_star.maxCoeff()},
  };
  write_json(out / "solve_report.json", report);
  write_timing(out, "solve", clock.seconds());
  return report;
}

// ---------------------------------------------------------------------------
// train / eval
// ---------------------------------------------------------------------------

struct TrainOutcome {
  json metrics;
  nn::ModelParams params;
  optim::TrainResult result;
  Matrix u_pred;
};

inline nn::ModelParams initial_params(const RunConfig& cfg, const Problem& p) {
  nn::ModelParams params = nn::init_model(cfg.model, cfg.seed);
  params = nn::fit_standardizer(params, p.graph, coords_for(params, p));
  if (cfg.output_scale) params = nn::fit_output_scale(params, p.u_star);
  return params;
}

inline optim::EpochCallback progress_logger(const RunConfig& cfg, std::ostream* log, const std::string& tag) {
  if (log == nullptr || cfg.log_every <= 0) return {};
  const int every = cfg.log_every;
  return [log, every, tag](const optim::HistoryRow& r, const Vector&) {
    if (r.epoch % every != 0 && r.phase != "final") return;
    *log << tag << "epoch " << r.epoch << " [" << r.phase << "] loss " << r.report.total << " (stat_u "
         << r.report.stat_u << ", stat_lambda " << r.report.stat_lambda << ", data " << r.report.data << ")\n";
  };
}

/// Trains on an already-built problem; writes nothing.
inline TrainOutcome train_on(const RunConfig& cfg, const Problem& p, std::ostream* log = nullptr,
                             const std::string& tag = "") {
  TrainOutcome o;
  o.params = initial_params(cfg, p);
  optim::TrainingProblem prob{&p.physics_case, &p.graph, coords_for(o.params, p), p.u_star, cfg.loss};
  o.result = optim::train(prob, o.params, cfg.schedule, progress_logger(cfg, log, tag));
  o.u_pred = nn::predict(o.params, p.graph, coords_for(o.params, p)).first;
  o.metrics = accuracy_json(o.u_pred, p.u_star);
  o.metrics["final_loss"] = report_json(o.result.history.back().report);
  o.metrics["epochs"] = static_cast<int>(o.result.history.size()) - 1;
  o.metrics["diverged"] = o.result.diverged;
  if (o.result.diverged) o.metrics["message"] = o.result.message;
  return o;
}

inline json checkpoint_extra(const RunConfig& cfg) {
  return {{"case", cfg.physics_case.to_json()}, {"features", cfg.features.to_json()}, {"config_hash", cfg.hash()}};
}

inline TrainOutcome cmd_train(const RunConfig& cfg, std::ostream* log = nullptr) {
  Stopwatch clock;
  const fs::path out = cfg.out;
  ensure_dir(out);
  write_json(out / "config.resolved.json", cfg.resolved());
  const Problem p = build_problem(cfg, cfg.mesh);
  TrainOutcome o = train_on(cfg, p, log);

  std::ostringstream csv;
  optim::write_history_csv(csv, o.result.history);
  write_text(out / "history.csv", csv.str());
  nn::save_checkpoint((out / "checkpoint.json").string(), o.params, checkpoint_extra(cfg));
  solver::save_field((out / "u_pred.field").string(), o.u_pred);
  solver::save_field((out / "u_star.field").string(), p.u_star);
  solver::save_field((out / "features.field").string(), p.features);

  json metrics = {{"command", "train"},
                  {"config_hash", cfg.hash()},
                  {"case", physics::case_name(p.physics_case.kind)},
                  {"n_nodes", p.mesh().n_nodes()},
                  {"n_params", o.params.flat.size()},
                  {"input_relative_l1", physics::relative_error(p.features, p.u_star, physics::Norm::L1)}};
  if (cfg.features.recipe == Recipe::BcField) metrics.erase("input_relative_l1");
  metrics.update(o.metrics);
  o.metrics = metrics;
  write_json(out / "metrics.json", metrics);
  write_timing(out, "train", clock.seconds());
  if (o.result.diverged) throw NumericalError("training diverged: " + o.result.message);
  return o;
}

/// Inference with a trained checkpoint on the geometry described by `cfg`.
/// The case kind must match the one the checkpoint was trained on.
inline json cmd_eval(const std::string& checkpoint_path, const RunConfig& cfg) {
  Stopwatch clock;
  const json ck = nn::read_json_file(checkpoint_path);
  const nn::ModelParams params = nn::params_from_json(ck);
  if (ck.contains("extra") && ck["extra"].contains("case")) {
    const std::string trained = ck["extra"]["case"].value("kind", "");
    if (!trained.empty() && trained != physics::case_name(cfg.physics_case.kind)) {
      throw ValidationError("checkpoint was trained on the " + trained + " case, config asks for " +
                            physics::case_name(cfg.physics_case.kind));
    }
  }
  const Problem p = build_problem(cfg, cfg.mesh);
  const int k = p.physics_case.components;
  if (params.config.node_in_dim != p.features.cols()) {
    throw ValidationError("channel mismatch: checkpoint expects " + std::to_string(params.config.node_in_dim) +
                          " input channels, feature recipe gives " + std::to_string(p.features.cols()));
  }
  if (params.config.field_channels() != k) {
    throw ValidationError("channel mismatch: checkpoint predicts " + std::to_string(params.config.field_channels()) +
                          " channels, case has " + std::to_string(k));
  }
  if (params.config.edge_in_dim != p.mesh().dim + 1) throw ValidationError("checkpoint was trained in another dimension");

  ad::Tape tape;
  nn::BoundParams bp(tape, params);
  const auto pred = nn::forward(tape, params, bp, p.graph, coords_for(params, p));
  const auto loss = physics::hybrid_loss(p.physics_case, pred.u, pred.lambda, p.u_star, cfg.loss);
  const Matrix u_pred = pred.u.data();

  const fs::path out = cfg.out;
  ensure_dir(out);
  solver::save_field((out / "u_pred.field").string(), u_pred);
  json metrics = {{"command", "eval"},
                  {"config_hash", cfg.hash()},
                  {"checkpoint_config_hash", ck.contains("extra") ? ck["extra"].value("config_hash", "") : ""},
                  {"case", physics::case_name(p.physics_case.kind)},
                  {"n_nodes", p.mesh().n_nodes()},
                  {"loss", report_json(loss.report)}};
  metrics.update(accuracy_json(u_pred, p.u_star));
  write_json(out / "metrics.json", metrics);
  write_timing(out, "eval", clock.seconds());
  return metrics;
}

// ---------------------------------------------------------------------------
// ablation
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string variant;
  double train_l1 = 0.0;
  double test_l1 = 0.0;
  bool diverged = false;
  std::string message;
};

inline std::string render_ablation(const std::vector<AblationRow>& rows) {
  std::ostringstream s;
  s << std::left << std::setw(16) << "variant" << std::right << std::setw(14) << "train L1 (%)" << std::setw(14)
    << "test L1 (%)" << "\n";
  for (const auto& r : rows) {
    char a[32], b[32];
    std::snprintf(a, sizeof a, "%.3f", 100.0 * r.train_l1);
    std::snprintf(b, sizeof b, "%.3f", 100.0 * r.test_l1);
    s << std::left << std::setw(16) << r.variant << std::right << std::setw(14) << a << std::setw(14) << b
      << (r.diverged ? "  (diverged)" : "") << "\n";
  }
  return s.str();
}

/// Trains the full model, the MAE-only graph model and the coordinate MLP on
/// the training mesh and evaluates all three on cfg.test_mesh.
inline json cmd_ablation(const RunConfig& cfg, std::ostream* log = nullptr) {
  if (!cfg.test_mesh) throw ValidationError("ablation needs a 'test_mesh' entry in the config");
  Stopwatch clock;
  const fs::path out = cfg.out;
  ensure_dir(out);
  write_json(out / "config.resolved.json", cfg.resolved());
  const Problem train = build_problem(cfg, cfg.mesh);
  const Problem test = build_problem(cfg, *cfg.test_mesh);

  struct Variant {
    std::string name;
    RunConfig cfg;
  };
  std::vector<Variant> variants{{"pigmen", cfg}, {"graphnet_mae", cfg}, {"coordinate_mlp", cfg}};
  variants[1].cfg.loss = physics::LossWeights::mae_only();
  const int dim = train.mesh().dim;
  const int k = train.physics_case.components;
  variants[2].cfg.model = nn::ModelConfig::coordinate_mlp(dim, static_cast<int>(train.features.cols()), 2 * k);

  std::vector<AblationRow> rows;
  json per_variant = json::array();
  for (const auto& v : variants) {
    AblationRow row;
    row.variant = v.name;
    const auto o = train_on(v.cfg, train, log, v.name + ": ");
    row.train_l1 = o.metrics["relative_l1"].get<double>();
    row.test_l1 = physics::relative_error(nn::predict(o.params, test.graph, coords_for(o.params, test)).first,
                                          test.u_star, physics::Norm::L1);
    row.diverged = o.result.diverged;
    row.message = o.result.message;
    rows.push_back(row);
    per_variant.push_back({{"variant", row.variant},
                           {"train_relative_l1", row.train_l1},
                           {"test_relative_l1", row.test_l1},
                           {"final_loss", report_json(o.result.history.back().report)},
                           {"diverged", row.diverged}});
    nn::save_checkpoint((out / ("checkpoint_" + v.name + ".json")).string(), o.params, checkpoint_extra(v.cfg));
  }

  const bool mlp_worst = rows[2].test_l1 > rows[0].test_l1 && rows[2].test_l1 > rows[1].test_l1;
  const bool hybrid_beats_mae = rows[0].test_l1 <= rows[1].test_l1;
  std::ostringstream csv;
  csv << "variant,train_relative_l1,test_relative_l1,diverged\n";
  for (const auto& r : rows) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%.17g,%.17g", r.train_l1, r.test_l1);
    csv << r.variant << ',' << buf << ',' << (r.diverged ? 1 : 0) << '\n';
  }
  write_text(out / "ablation.csv", csv.str());
  write_text(out / "ablation.txt", render_ablation(rows));
  const json metrics = {{"command", "ablation"},
                        {"config_hash", cfg.hash()},
                        {"train_nodes", train.mesh().n_nodes()},
                        {"test_nodes", test.mesh().n_nodes()},
                        {"variants", per_variant},
                        {"orderings",
                         {{"coordinate_mlp_worst_on_test", mlp_worst},
                          {"hybrid_not_worse_than_mae_on_test", hybrid_beats_mae}}}};
  write_json(out / "metrics.json", metrics);
  write_timing(out, "ablation", clock.seconds());
  return metrics;
}

// ---------------------------------------------------------------------------
// demo-gap
// ---------------------------------------------------------------------------

struct GapOptions {
  double alpha = 2.0;
  std::vector<double> beta{3.0};  // broadcast when a single value is given
  double gamma = 0.0;
  std::string phi = "x^2";        // x^2, x^3 or x*y (x, y = first two coordinates)
  std::vector<double> points{1.0};  // x-coordinates on the strip's mid-line
  int levels = 5;
};

namespace detail {

/// phi recorded on the tape as a function of the coordinate row x (1 x 2).
inline ad::Value phi_on_tape(const std::string& spec, const ad::Value& x) {
  ad::Value x1 = ad::slice_cols(x, 0, 1);
  if (spec == "x^2") return ad::mul(x1, x1);
  if (spec == "x^3") return ad::mul(ad::mul(x1, x1), x1);
  if (spec == "x*y") return ad::mul(x1, ad::slice_cols(x, 1, 1));
  throw UsageError("unknown phi spec '" + spec + "' (expected x^2, x^3 or x*y)");
}

inline double phi_value(const std::string& spec, double x, double y) {
  if (spec == "x^2") return x * x;
  if (spec == "x^3") return x * x * x;
  if (spec == "x*y") return x * y;
  throw UsageError("unknown phi spec '" + spec + "'");
}

/// dM/dx_1 of M(phi, x) = alpha phi(x) + beta^T x + gamma, by reverse mode.
/// With `link` phi is recorded as a function of x; without it phi enters as
/// a constant, the way an input field is fed to a network.
inline double model_derivative(const GapOptions& o, const Eigen::RowVector2d& beta, const Eigen::RowVector2d& pt,
                               bool link) {
  ad::Tape t;
  ad::Value x = t.leaf(Matrix(pt));
  ad::Value phi = link ? phi_on_tape(o.phi, x) : t.constant(Matrix::Constant(1, 1, phi_value(o.phi, pt(0), pt(1))));
  ad::Value m = ad::add(ad::scale(phi, o.alpha),
                        ad::matmul(x, t.constant(Matrix(beta.transpose()))));
  m = ad::add(m, t.constant(Matrix::Constant(1, 1, o.gamma)));
  t.backward(m);
  return x.grad()(0, 0);
}

inline int containing_element(const mesh::Mesh& m, const Eigen::RowVector2d& p) {
  for (int e = 0; e < m.n_elements(); ++e) {
    const Eigen::RowVector2d a = m.coords.row(m.elements(e, 0)), b = m.coords.row(m.elements(e, 1)),
                             c = m.coords.row(m.elements(e, 2));
    Eigen::Matrix2d J;
    J << (b - a).transpose(), (c - a).transpose();
    const Eigen::Vector2d l = J.colPivHouseholderQr().solve((p - a).transpose());
    if (l(0) >= -1e-12 && l(1) >= -1e-12 && l(0) + l(1) <= 1.0 + 1e-12) return e;
  }
  return -1;
}

}  // namespace detail

/// Strip [0, 2] x [0, 0.25] refined uniformly; level r has 8 * 2^r cells along x.
inline mesh::Mesh gap_strip(int level) { return mesh::rectangle(8 << level, 1 << level, 2.0, 0.25); }

inline json cmd_demo_gap(const GapOptions& o) {
  if (o.beta.empty() || o.beta.size() > 2) throw UsageError("beta needs one or two values");
  if (o.levels < 2) throw UsageError("demo-gap needs at least two refinement levels");
  const Eigen::RowVector2d beta(o.beta[0], o.beta.size() > 1 ? o.beta[1] : o.beta[0]);
  const double y_mid = 0.125;

  std::vector<mesh::Mesh> meshes;
  std::vector<fem::ElementGradientOperator> grads;
  std::vector<Vector> fields;
  for (int r = 0; r < o.levels; ++r) {
    meshes.push_back(gap_strip(r));
    const auto& m = meshes.back();
    grads.push_back(fem::element_gradient_operator(m));
    Vector f(m.n_nodes());
    for (int i = 0; i < m.n_nodes(); ++i) {
      const double x = m.coords(i, 0), y = m.coords(i, 1);
      f(i) = o.alpha * detail::phi_value(o.phi, x, y) + beta(0) * x + beta(1) * y + o.gamma;
    }
    fields.push_back(f);
  }

  json points = json::array();
  for (double px : o.points) {
    const Eigen::RowVector2d pt(px, y_mid);
    if (px < 0.0 || px > 2.0) throw UsageError("demo-gap points must lie in [0, 2]");
    const double truth = detail::model_derivative(o, beta, pt, true);
    const double missing = detail::model_derivative(o, beta, pt, false);
    const auto& m = meshes.back();
    const int e = detail::containing_element(m, pt);
    const double fem_d = grads.back().apply(fields.back())(e, 0);
    points.push_back({{"x", px}, {"y", y_mid}, {"true", truth}, {"missing_link", missing}, {"fem_kernel", fem_d}});
  }

  // L2 norm over the strip of the error in dM/dx_1; edge-midpoint quadrature is
  // exact for the quadratic integrand on each triangle.
  json refinement = json::array();
  double prev_err = 0.0, prev_h = 0.0;
  for (int r = 0; r < o.levels; ++r) {
    const auto& m = meshes[r];
    const Matrix g = grads[r].apply(fields[r]);
    double err2 = 0.0;
    for (int e = 0; e < m.n_elements(); ++e) {
      double s = 0.0;
      for (int a = 0; a < 3; ++a) {
        const Eigen::RowVector2d mid =
            0.5 * (m.coords.row(m.elements(e, a)) + m.coords.row(m.elements(e, (a + 1) % 3)));
        const double d = g(e, 0) - detail::model_derivative(o, beta, mid, true);
        s += d * d;
      }
      err2 += grads[r].volumes(e) * s / 3.0;
    }
    const double err = std::sqrt(err2), h = 2.0 / (8 << r);
    json row = {{"level", r}, {"h", h}, {"n_nodes", m.n_nodes()}, {"l2_error", err}};
    if (r > 0) row["observed_order"] = (prev_err > 0.0 && err > 0.0) ? std::log(prev_err / err) / std::log(prev_h / h) : 0.0;
    refinement.push_back(row);
    prev_err = err;
    prev_h = h;
  }
  return {{"command", "demo-gap"},
          {"alpha", o.alpha},
          {"beta", {beta(0), beta(1)}},
          {"gamma", o.gamma},
          {"phi", o.phi},
          {"points", points},
          {"refinement", refinement}};
}

inline std::string render_demo_gap(const json& r) {
  std::ostringstream s;
  char buf[256];
  s << "M(phi, x) = alpha phi(x) + beta^T x + gamma, phi = " << r["phi"].get<std::string>() << ", alpha = "
    << r["alpha"].get<double>() << "\n\n";
  std::snprintf(buf, sizeof buf, "%10s %16s %16s %16s\n", "x", "true dM/dx", "missing link", "FEM kernel");
  s << buf;
  for (const auto& p : r["points"]) {
    std::snprintf(buf, sizeof buf, "%10.4g %16.10g %16.10g %16.10g\n", p["x"].get<double>(), p["true"].get<double>(),
                  p["missing_link"].get<double>(), p["fem_kernel"].get<double>());
    s << buf;
  }
  s << "\nFEM-kernel derivative, L2 error under refinement\n";
  std::snprintf(buf, sizeof buf, "%6s %12s %14s %8s\n", "level", "h", "L2 error", "order");
  s << buf;
  for (const auto& row : r["refinement"]) {
    char order[32] = "-";
    if (row.contains("observed_order")) std::snprintf(order, sizeof order, "%.3f", row["observed_order"].get<double>());
    std::snprintf(buf, sizeof buf, "%6d %12.5g %14.6e %8s\n", row["level"].get<int>(), row["h"].get<double>(),
                  row["l2_error"].get<double>(), order);
    s << buf;
  }
  return s.str();
}

// ---------------------------------------------------------------------------
// export
// ---------------------------------------------------------------------------

enum class ExportFormat { VtkLegacy, Csv };

inline ExportFormat parse_export_format(const std::string& s) {
  if (s == "vtk" || s == "vtk_legacy") return ExportFormat::VtkLegacy;
  if (s == "csv") return ExportFormat::Csv;
  throw UsageError("unknown export format '" + s + "' (expected vtk_legacy or csv)");
}

inline void write_vtk(std::ostream& out, const mesh::Mesh& m, const Matrix& f, const std::string& name = "field") {
  const auto num = [](double v) { return mesh::detail::format_double(v); };
  out << "# vtk DataFile Version 3.0\npigmen " << name << "\nASCII\nDATASET UNSTRUCTURED_GRID\n";
  out << "POINTS " << m.n_nodes() << " double\n";
  for (int i = 0; i < m.n_nodes(); ++i) {
    out << num(m.coords(i, 0)) << ' ' << num(m.coords(i, 1)) << ' ' << (m.dim == 3 ? num(m.coords(i, 2)) : "0")
        << '\n';
  }
  const int nv = m.dim + 1;
  out << "CELLS " << m.n_elements() << ' ' << m.n_elements() * (nv + 1) << '\n';
  for (int e = 0; e < m.n_elements(); ++e) {
    out << nv;
    for (int a = 0; a < nv; ++a) out << ' ' << m.elements(e, a);
    out << '\n';
  }
  out << "CELL_TYPES " << m.n_elements() << '\n';
  const int type = m.dim == 2 ? 5 : 10;  // VTK_TRIANGLE, VTK_TETRA
  for (int e = 0; e < m.n_elements(); ++e) out << type << '\n';
  out << "POINT_DATA " << m.n_nodes() << '\n';
  if (f.cols() == 1) {
    out << "SCALARS " << name << " double 1\nLOOKUP_TABLE default\n";
    for (int i = 0; i < m.n_nodes(); ++i) out << num(f(i, 0)) << '\n';
  } else if (f.cols() == m.dim) {
    out << "VECTORS " << name << " double\n";
    for (int i = 0; i < m.n_nodes(); ++i) {
      out << num(f(i, 0)) << ' ' << num(f(i, 1)) << ' ' << (m.dim == 3 ? num(f(i, 2)) : "0") << '\n';
    }
  } else {
    for (Eigen::Index c = 0; c < f.cols(); ++c) {
      out << "SCALARS " << name << '_' << c << " double 1\nLOOKUP_TABLE default\n";
      for (int i = 0; i < m.n_nodes(); ++i) out << num(f(i, c)) << '\n';
    }
  }
}

inline void write_csv(std::ostream& out, const mesh::Mesh& m, const Matrix& f) {
  out << (m.dim == 3 ? "x,y,z" : "x,y");
  if (f.cols() == 1) {
    out << ",v";
  } else {
    for (Eigen::Index c = 0; c < f.cols(); ++c) out << ",v" << c;
  }
  out << '\n';
  for (int i = 0; i < m.n_nodes(); ++i) {
    for (int d = 0; d < m.dim; ++d) out << (d ? "," : "") << mesh::detail::format_double(m.coords(i, d));
    for (Eigen::Index c = 0; c < f.cols(); ++c) out << ',' << mesh::detail::format_double(f(i, c));
    out << '\n';
  }
}

inline void cmd_export(const std::string& field_path, const std::string& mesh_path, ExportFormat format,
                       const std::string& out_path) {
  const auto m = mesh::load_mesh(mesh_path);
  const Matrix f = solver::load_field(field_path);
  if (f.rows() != m.n_nodes()) {
    throw ValidationError("node count mismatch: field has " + std::to_string(f.rows()) + " rows, mesh has " +
                          std::to_string(m.n_nodes()) + " nodes");
  }
  std::ostringstream s;
  if (format == ExportFormat::VtkLegacy) {
    write_vtk(s, m, f);
  } else {
    write_csv(s, m, f);
  }
  write_text(out_path, s.str());
}

}  // namespace pigmen::app

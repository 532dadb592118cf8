#pragma once

// Adam and fixed-step L-BFGS over flat parameter vectors, and the two-phase
// full-batch training loop (Adam epochs, then L-BFGS epochs).

#include "pigmen/graphnet.hpp"
#include "pigmen/physics.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

namespace pigmen::optim {

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long t = 0;
  Vector m;
  Vector v;
};

inline void adam_step(AdamState& s, Vector& x, const Vector& g) {
  if (g.size() != x.size()) throw ShapeError("adam_step: gradient length != parameter length");
  if (!g.allFinite()) {
    Eigen::Index bad = 0;
    while (bad < g.size() && std::isfinite(g(bad))) ++bad;
    throw NumericalError("adam_step: non-finite gradient at coordinate " + std::to_string(bad) + " (step " +
                         std::to_string(s.t + 1) + ")");
  }
  if (s.m.size() != x.size()) {
    s.m = Vector::Zero(x.size());
    s.v = Vector::Zero(x.size());
  }
  ++s.t;
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * g;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * g.cwiseAbs2();
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  x.array() -= s.lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + s.eps);
}

struct LbfgsState {
  double lr = 2e-3;
  int history = 10;
  double curvature_threshold = 1e-10;
  std::deque<std::pair<Vector, Vector>> pairs;  // (s, y), oldest first
  long steps = 0;
  long skipped = 0;
  long resets = 0;
};

/// Two-loop recursion: returns -H g with H0 = (s^T y / y^T y) I from the
/// newest pair, or -g when the history is empty.
inline Vector lbfgs_direction(const LbfgsState& st, const Vector& g) {
  Vector q = g;
  const std::size_t n = st.pairs.size();
  std::vector<double> alpha(n), rho(n);
  for (std::size_t i = n; i-- > 0;) {
    const auto& [s, y] = st.pairs[i];
    rho[i] = 1.0 / y.dot(s);
    alpha[i] = rho[i] * s.dot(q);
    q -= alpha[i] * y;
  }
  if (n > 0) {
    const auto& [s, y] = st.pairs.back();
    q *= s.dot(y) / y.dot(y);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto& [s, y] = st.pairs[i];
    const double beta = rho[i] * y.dot(q);
    q += (alpha[i] - beta) * s;
  }
  return -q;
}

/// Pushes (s, y) when s^T y exceeds the curvature threshold. Returns whether
/// the pair was stored.
inline bool lbfgs_update(LbfgsState& st, Vector s, Vector y) {
  if (!(s.dot(y) > st.curvature_threshold)) {
    ++st.skipped;
    return false;
  }
  st.pairs.emplace_back(std::move(s), std::move(y));
  while (static_cast<int>(st.pairs.size()) > st.history) st.pairs.pop_front();
  return true;
}

struct Evaluation {
  double loss = 0.0;
  Vector grad;
  physics::LossReport report;

  bool finite() const { return std::isfinite(loss) && grad.allFinite(); }
};

using Objective = std::function<Evaluation(const Vector&)>;

/// One fixed-step L-BFGS iteration from (x, here). On return x holds the new
/// point and the returned Evaluation belongs to it. A non-finite trial point
/// clears the history and retries with a steepest-descent step.
inline Evaluation lbfgs_step(LbfgsState& st, Vector& x, const Evaluation& here, const Objective& f) {
  if (here.grad.size() != x.size()) throw ShapeError("lbfgs_step: gradient length != parameter length");
  ++st.steps;
  // Without curvature pairs the direction is -g; its length is capped at
  // lr / |g|_1 so a large initial gradient cannot throw the iterate away.
  const double t = st.pairs.empty() ? st.lr * std::min(1.0, 1.0 / here.grad.lpNorm<1>()) : st.lr;
  Vector step = t * lbfgs_direction(st, here.grad);
  Vector trial = x + step;
  Evaluation next = f(trial);
  if (!next.finite()) {
    st.pairs.clear();
    ++st.resets;
    step = -(st.lr * std::min(1.0, 1.0 / here.grad.lpNorm<1>())) * here.grad;
    trial = x + step;
    next = f(trial);
    if (!next.finite()) throw NumericalError("lbfgs_step: non-finite loss after steepest-descent fallback");
  }
  lbfgs_update(st, step, next.grad - here.grad);
  x = std::move(trial);
  return next;
}

struct Schedule {
  int adam_epochs = 50;
  double adam_lr = 1e-4;
  int lbfgs_epochs = 100;
  double lbfgs_lr = 2e-3;
  int lbfgs_history = 10;
};

struct HistoryRow {
  int epoch = 0;
  std::string phase;
  physics::LossReport report;
};

struct TrainResult {
  Vector params;
  std::vector<HistoryRow> history;
  bool diverged = false;
  std::string message;

  double final_loss() const { return history.empty() ? 0.0 : history.back().report.total; }
};

using EpochCallback = std::function<void(const HistoryRow&, const Vector& params)>;

/// Rows are the loss at the start of each epoch, plus a "final" row for the
/// returned parameters. One objective evaluation per epoch.
inline TrainResult minimize(const Objective& f, Vector x, const Schedule& sch, const EpochCallback& on_epoch = {},
                            double divergence_factor = 1e6) {
  TrainResult res;
  if (sch.adam_epochs < 0 || sch.lbfgs_epochs < 0) throw ValidationError("schedule epochs must be >= 0");
  Evaluation cur = f(x);
  if (!cur.finite()) throw NumericalError("initial loss is not finite");
  const double initial = cur.loss;
  int epoch = 0;
  auto guard = [&](const Evaluation& e) {
    if (!e.finite()) {
      res.diverged = true;
      res.message = "non-finite loss or gradient at epoch " + std::to_string(epoch);
      return false;
    }
    if (e.loss > divergence_factor * std::max(initial, 1e-300)) {
      res.diverged = true;
      res.message = "loss diverged at epoch " + std::to_string(epoch) + " (" + std::to_string(e.loss) + " vs initial " +
                    std::to_string(initial) + ")";
      return false;
    }
    return true;
  };
  try {
    AdamState adam;
    adam.lr = sch.adam_lr;
    for (int i = 0; i < sch.adam_epochs; ++i, ++epoch) {
      res.history.push_back({epoch, "adam", cur.report});
      if (on_epoch) on_epoch(res.history.back(), x);
      adam_step(adam, x, cur.grad);
      cur = f(x);
      if (!guard(cur)) break;
    }
    LbfgsState lb;
    lb.lr = sch.lbfgs_lr;
    lb.history = sch.lbfgs_history;
    for (int i = 0; i < sch.lbfgs_epochs && !res.diverged; ++i, ++epoch) {
      res.history.push_back({epoch, "lbfgs", cur.report});
      if (on_epoch) on_epoch(res.history.back(), x);
      cur = lbfgs_step(lb, x, cur, f);
      if (!guard(cur)) break;
    }
  } catch (const NumericalError& e) {
    res.diverged = true;
    res.message = e.what();
  }
  res.history.push_back({epoch, "final", cur.report});
  if (on_epoch) on_epoch(res.history.back(), x);
  res.params = std::move(x);
  return res;
}

/// Model + case + target bundled into an objective over the flat parameters.
struct TrainingProblem {
  const physics::PhysicsCase* physics_case = nullptr;
  const mesh::Graph* graph = nullptr;
  const Matrix* coords = nullptr;
  Matrix u_true;
  physics::LossWeights weights;
};

inline Evaluation evaluate(const TrainingProblem& prob, const nn::ModelParams& p) {
  ad::Tape tape;
  nn::BoundParams bp(tape, p);
  auto pred = nn::forward(tape, p, bp, *prob.graph, prob.coords);
  auto loss = physics::hybrid_loss(*prob.physics_case, pred.u, pred.lambda, prob.u_true, prob.weights);
  tape.backward(loss.value);
  return {loss.report.total, bp.gradient(), loss.report};
}

inline Objective make_objective(const TrainingProblem& prob, const nn::ModelParams& base) {
  auto scratch = std::make_shared<nn::ModelParams>(base);
  return [prob, scratch](const Vector& x) {
    scratch->flat = x;
    return evaluate(prob, *scratch);
  };
}

inline TrainResult train(const TrainingProblem& prob, nn::ModelParams& params, const Schedule& sch,
                         const EpochCallback& on_epoch = {}) {
  auto res = minimize(make_objective(prob, params), params.flat, sch, on_epoch);
  params.flat = res.params;
  return res;
}

inline void write_history_csv(std::ostream& out, const std::vector<HistoryRow>& rows) {
  out << "epoch,phase,stat_u,stat_lambda,data,total\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%s,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.phase.c_str(), r.report.stat_u,
                  r.report.stat_lambda, r.report.data, r.report.total);
    out << buf;
  }
}

}  // namespace pigmen::optim

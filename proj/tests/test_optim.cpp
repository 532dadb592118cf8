#include "pigmen/meshgen.hpp"
#include "pigmen/optim.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <limits>
#include <sstream>

using namespace pigmen;
using namespace pigmen::optim;
using namespace testing_support;

namespace {

/// f(x) = 1/2 x^T Q x - b^T x with a random SPD Q of given condition number.
struct Quadratic {
  Matrix Q;
  Vector b;

  Quadratic(int n, double cond, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Eigen::HouseholderQR<Matrix> qr(random_matrix(rng, n, n));
    const Matrix U = qr.householderQ();
    Vector eig(n);
    for (int i = 0; i < n; ++i) eig(i) = std::pow(cond, static_cast<double>(i) / std::max(1, n - 1));
    Q = U * eig.asDiagonal() * U.transpose();
    Q = 0.5 * (Q + Q.transpose());
    b = random_vector(rng, n);
  }

  Objective objective() const {
    return [this](const Vector& x) {
      Evaluation e;
      e.grad = Q * x - b;
      e.loss = 0.5 * x.dot(Q * x) - b.dot(x);
      e.report.total = e.loss;
      return e;
    };
  }
};

}  // namespace

TEST(Adam, FirstStepIsMinusLrTimesSign) {
  AdamState s;
  s.lr = 0.01;
  Vector x = Vector::Zero(4), g(4);
  g << 3.0, -0.5, 0.1, -200.0;
  adam_step(s, x, g);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(x(i), -s.lr * (g(i) > 0 ? 1.0 : -1.0), 1e-6 * s.lr);
}

TEST(Adam, ZeroGradientDecaysMoments) {
  AdamState s;
  Vector x(2), g(2);
  x << 1.0, -2.0;
  g << 0.4, -0.3;
  adam_step(s, x, g);
  const Vector x1 = x, m1 = s.m, v1 = s.v;
  adam_step(s, x, Vector::Zero(2));
  EXPECT_TRUE(s.m.isApprox(s.beta1 * m1));
  EXPECT_TRUE(s.v.isApprox(s.beta2 * v1));
  EXPECT_EQ(s.t, 2);
  // The bias-corrected first moment is still nonzero, so only a fresh state stays put.
  AdamState fresh;
  Vector y = x1;
  adam_step(fresh, y, Vector::Zero(2));
  EXPECT_EQ(y, x1);
}

TEST(Adam, ScalarBowlMatchesIndependentRecursion) {
  AdamState s;
  s.lr = 0.1;
  Vector x = Vector::Constant(1, 1.0);
  double xr = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 200; ++t) {
    const double g = 2.0 * xr;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    xr -= 0.1 * (m / (1.0 - std::pow(0.9, t))) / (std::sqrt(v / (1.0 - std::pow(0.999, t))) + 1e-8);
    adam_step(s, x, Vector::Constant(1, 2.0 * x(0)));
  }
  EXPECT_NEAR(x(0), xr, 1e-12);
  EXPECT_LT(std::abs(x(0)), 1e-2);
}

TEST(Adam, NonFiniteGradientAborts) {
  AdamState s;
  Vector x = Vector::Zero(3), g = Vector::Zero(3);
  g(1) = std::numeric_limits<double>::quiet_NaN();
  try {
    adam_step(s, x, g);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("coordinate 1"), std::string::npos);
  }
  EXPECT_THROW(adam_step(s, x, Vector::Zero(2)), ShapeError);
}

TEST(Lbfgs, EmptyHistoryIsSteepestDescent) {
  LbfgsState st;
  std::mt19937_64 rng(1);
  Vector g = random_vector(rng, 7);
  EXPECT_EQ(lbfgs_direction(st, g), -g);
}

TEST(Lbfgs, CurvatureGuardSkipsPair) {
  LbfgsState st;
  Vector s(2), y(2);
  s << 1.0, 0.0;
  y << -1.0, 0.0;
  EXPECT_FALSE(lbfgs_update(st, s, y));
  EXPECT_TRUE(st.pairs.empty());
  EXPECT_EQ(st.skipped, 1);
  y << 1e-11, 0.0;
  EXPECT_FALSE(lbfgs_update(st, s, y));
  y << 1.0, 0.0;
  EXPECT_TRUE(lbfgs_update(st, s, y));
  EXPECT_EQ(st.pairs.size(), 1u);
}

TEST(Lbfgs, HistoryIsBounded) {
  LbfgsState st;
  st.history = 3;
  for (int i = 0; i < 8; ++i) lbfgs_update(st, Vector::Constant(2, 1.0 + i), Vector::Constant(2, 1.0));
  EXPECT_EQ(st.pairs.size(), 3u);
  EXPECT_EQ(st.pairs.front().first(0), 6.0);
}

TEST(Lbfgs, DirectionSatisfiesSecantEquation) {
  // With one pair the inverse-Hessian estimate maps y onto s.
  LbfgsState st;
  std::mt19937_64 rng(4);
  Vector s = random_vector(rng, 5), y = s + 0.1 * random_vector(rng, 5);
  ASSERT_TRUE(lbfgs_update(st, s, y));
  EXPECT_LE((-lbfgs_direction(st, y) - s).norm(), 1e-12 * s.norm());
}

TEST(Lbfgs, ConvexQuadraticFiveVariables) {
  Quadratic q(5, 20.0, 7);
  const Vector x_star = q.Q.ldlt().solve(q.b);
  auto f = q.objective();
  LbfgsState st;
  st.lr = 1.0;
  Vector x = Vector::Zero(5);
  Evaluation cur = f(x);
  const double g0 = cur.grad.norm();
  for (int i = 0; i < 50; ++i) cur = lbfgs_step(st, x, cur, f);
  EXPECT_LE(cur.grad.norm(), 1e-4 * g0);
  EXPECT_LE((x - x_star).norm(), 1e-4 * x_star.norm());
}

TEST(Lbfgs, NonFiniteTrialFallsBackToSteepestDescent) {
  int calls = 0;
  Objective f = [&](const Vector& x) {
    ++calls;
    Evaluation e;
    e.grad = x;
    e.loss = x.norm() > 5.0 ? std::numeric_limits<double>::infinity() : 0.5 * x.squaredNorm();
    return e;
  };
  LbfgsState st;
  st.lr = 0.5;
  Vector x = Vector::Constant(2, 1.0);
  Evaluation here = f(x);
  // A bogus pair makes the quasi-Newton step huge.
  st.pairs.emplace_back(Vector::Constant(2, 1.0), Vector::Constant(2, 1e-3));
  Evaluation next = lbfgs_step(st, x, here, f);
  EXPECT_TRUE(next.finite());
  EXPECT_EQ(st.resets, 1);
  EXPECT_LT(x.norm(), std::sqrt(2.0));
}

TEST(Optimizers, BothReachTinyGradientOnTenDimensionalQuadratic) {
  Quadratic q(10, 10.0, 11);
  auto f = q.objective();
  {
    AdamState s;
    s.lr = 0.05;
    Vector x = Vector::Zero(10);
    int steps = 0;
    for (; steps < 500 && f(x).grad.norm() >= 1e-6; ++steps) adam_step(s, x, f(x).grad);
    EXPECT_LT(f(x).grad.norm(), 1e-6) << "Adam after " << steps << " steps";
  }
  {
    LbfgsState st;
    st.lr = 1.0;
    Vector x = Vector::Zero(10);
    Evaluation cur = f(x);
    int steps = 0;
    for (; steps < 500 && cur.grad.norm() >= 1e-6; ++steps) cur = lbfgs_step(st, x, cur, f);
    EXPECT_LT(cur.grad.norm(), 1e-6) << "L-BFGS after " << steps << " steps";
  }
}

TEST(Minimize, ZeroEpochScheduleReturnsParamsUnchanged) {
  Quadratic q(4, 3.0, 2);
  Vector x0 = Vector::LinSpaced(4, -1.0, 2.0);
  auto res = minimize(q.objective(), x0, Schedule{0, 1e-3, 0, 1e-3, 10});
  EXPECT_EQ(res.params, x0);
  ASSERT_EQ(res.history.size(), 1u);
  EXPECT_EQ(res.history[0].phase, "final");
  EXPECT_FALSE(res.diverged);
}

TEST(Minimize, HistoryLayoutAndPhases) {
  Quadratic q(4, 3.0, 2);
  std::vector<std::string> seen;
  auto res = minimize(q.objective(), Vector::Zero(4), Schedule{3, 1e-2, 2, 0.5, 10},
                      [&](const HistoryRow& r, const Vector&) { seen.push_back(r.phase); });
  ASSERT_EQ(res.history.size(), 6u);
  EXPECT_EQ(seen, (std::vector<std::string>{"adam", "adam", "adam", "lbfgs", "lbfgs", "final"}));
  for (int i = 0; i < 6; ++i) EXPECT_EQ(res.history[i].epoch, i);
  EXPECT_EQ(res.final_loss(), q.objective()(res.params).loss);
}

TEST(Minimize, NegativeEpochsRejected) {
  Quadratic q(2, 1.0, 2);
  EXPECT_THROW(minimize(q.objective(), Vector::Zero(2), Schedule{-1, 1e-3, 0, 1e-3, 10}), ValidationError);
}

TEST(Minimize, DivergenceGuardStopsWithHistory) {
  Objective f = [](const Vector& x) {
    Evaluation e;
    e.grad = Vector::Constant(x.size(), -1.0);
    e.loss = x(0) == 0.0 ? 1.0 : 1e7;
    return e;
  };
  auto res = minimize(f, Vector::Zero(1), Schedule{10, 0.1, 10, 0.1, 10});
  EXPECT_TRUE(res.diverged);
  EXPECT_NE(res.message.find("diverged"), std::string::npos);
  EXPECT_EQ(res.history.size(), 2u);
}

TEST(Minimize, NonFiniteGradientIsReportedAsDivergence) {
  Objective f = [](const Vector& x) {
    Evaluation e;
    e.loss = 1.0;
    e.grad = Vector::Constant(x.size(), x(0) == 0.0 ? 1.0 : std::numeric_limits<double>::quiet_NaN());
    return e;
  };
  auto res = minimize(f, Vector::Zero(1), Schedule{5, 0.1, 0, 0.1, 10});
  EXPECT_TRUE(res.diverged);
  EXPECT_NE(res.message.find("non-finite"), std::string::npos);
}

TEST(Train, DeterministicHistoryOnGraphProblem) {
  auto m = mesh::generate_mesh(mesh::fixture_spec("annulus_small"));
  auto c = physics::electrostatic_case(m);
  const Matrix u = physics::solve_kkt(c).u;
  auto g = mesh::mesh_to_graph(m, c.dirichlet_values);
  nn::ModelConfig cfg;
  cfg.hidden_width = 8;
  TrainingProblem prob{&c, &g, nullptr, u, {}};
  auto run = [&] {
    auto p = nn::fit_standardizer(nn::init_model(cfg, 5), g);
    return train(prob, p, Schedule{10, 1e-3, 10, 1e-2, 10});
  };
  auto a = run(), b = run();
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(std::memcmp(&a.history[i].report, &b.history[i].report, sizeof(physics::LossReport)), 0);
  }
  EXPECT_EQ(a.params, b.params);
  EXPECT_LT(a.final_loss(), a.history.front().report.total);
}

TEST(Train, TrainUpdatesParamsInPlace) {
  auto m = mesh::generate_mesh(mesh::fixture_spec("rect4"));
  auto c = physics::electrostatic_case(m);
  auto g = mesh::mesh_to_graph(m, c.dirichlet_values);
  nn::ModelConfig cfg;
  cfg.hidden_width = 4;
  auto p = nn::fit_standardizer(nn::init_model(cfg, 5), g);
  const Vector before = p.flat;
  TrainingProblem prob{&c, &g, nullptr, physics::solve_kkt(c).u, {}};
  auto res = train(prob, p, Schedule{2, 1e-3, 0, 1e-3, 10});
  EXPECT_EQ(p.flat, res.params);
  EXPECT_NE(p.flat, before);
  EXPECT_EQ(evaluate(prob, p).loss, res.final_loss());
}

TEST(HistoryCsv, HeaderAndFullPrecision) {
  std::vector<HistoryRow> rows{{0, "adam", {1.0 / 3.0, 0.25, 1e-20, 0.5833333333333334}},
                               {1, "final", {0.0, 0.0, 0.0, 0.0}}};
  std::ostringstream out;
  write_history_csv(out, rows);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "epoch,phase,stat_u,stat_lambda,data,total");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 7), "0,adam,");
  const double su = std::stod(line.substr(7, line.find(',', 7) - 7));
  EXPECT_EQ(su, 1.0 / 3.0);
  std::getline(in, line);
  EXPECT_EQ(line, "1,final,0,0,0,0");
}

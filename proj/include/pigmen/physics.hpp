#pragma once

// Physics cases, the constrained energy functional and the hybrid loss
//
//   L(u, lam) = E(u) + lam^T B (u - g),   E(u) = u^T A u,
//   r_u   = dL/du   = 2 A u + B^T lam,
//   r_lam = dL/dlam = B (u - g),
//   C     = |r_u|^2 + |r_lam|^2 + mean_i sum_c |u_true - u|.
//
// Both residuals are linear-operator applications on the tape, so the loss
// needs first-order reverse mode only.

#include "pigmen/autodiff.hpp"
#include "pigmen/femkernel.hpp"
#include "pigmen/mesh.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace pigmen::physics {

using ad::Tape;
using ad::Value;
using mesh::BoundaryTag;
using mesh::Mesh;

enum class CaseKind { Electrostatic, Elasticity };

inline std::string case_name(CaseKind k) { return k == CaseKind::Electrostatic ? "electrostatic" : "elasticity"; }

inline CaseKind parse_case(const std::string& s) {
  if (s == "electrostatic") return CaseKind::Electrostatic;
  if (s == "elasticity") return CaseKind::Elasticity;
  throw ValidationError("unknown physics case '" + s + "'");
}

struct PhysicsCase {
  CaseKind kind = CaseKind::Electrostatic;
  Mesh mesh;
  /// Unknowns per node: 1 (potential) or dim (displacement).
  int components = 1;
  double lam = 1.0;
  double mu = 1.0;
  fem::AssembledOperator stiffness;      // A (or K), size N_v*k
  fem::AssembledOperator boundary_mass;  // B on Gamma1 u Gamma2, size N_v*k
  ad::LinearOperatorHandle A;
  ad::LinearOperatorHandle B;
  /// g: N_v x k, nonzero only on Dirichlet nodes.
  Matrix dirichlet_values;
  /// Flat (node-major) indices of the Dirichlet dofs, ascending.
  std::vector<int> dirichlet_dofs;
  Vector Bg;

  int n_nodes() const { return mesh.n_nodes(); }
  Eigen::Index n_dofs() const { return static_cast<Eigen::Index>(n_nodes()) * components; }
};

namespace detail {

inline Vector flat(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

inline void finish_case(PhysicsCase& c, const Matrix& g1, const Matrix& g2) {
  const Mesh& m = c.mesh;
  const int k = c.components;
  c.boundary_mass = fem::assemble_boundary_mass(m, {BoundaryTag::Gamma1, BoundaryTag::Gamma2}, k);
  c.A = fem::as_handle(c.stiffness);
  c.B = fem::as_handle(c.boundary_mass);
  c.dirichlet_values = Matrix::Zero(m.n_nodes(), k);
  std::vector<int> nodes;
  for (auto [tag, value] : {std::pair{BoundaryTag::Gamma1, &g1}, std::pair{BoundaryTag::Gamma2, &g2}}) {
    for (int i : mesh::tagged_nodes(m, tag)) {
      c.dirichlet_values.row(i) = *value;
      nodes.push_back(i);
    }
  }
  std::sort(nodes.begin(), nodes.end());
  for (int i : nodes)
    for (int comp = 0; comp < k; ++comp) c.dirichlet_dofs.push_back(i * k + comp);
  c.Bg = c.boundary_mass.matrix * flat(c.dirichlet_values);
}

}  // namespace detail

/// Laplace problem with u = v1 on Gamma1 and u = v2 on Gamma2.
inline PhysicsCase electrostatic_case(Mesh m, double v1 = 0.0, double v2 = 0.01) {
  PhysicsCase c;
  c.kind = CaseKind::Electrostatic;
  c.components = 1;
  c.mesh = std::move(m);
  c.stiffness = fem::assemble_stiffness(c.mesh);
  detail::finish_case(c, Matrix::Constant(1, 1, v1), Matrix::Constant(1, 1, v2));
  return c;
}

/// Linear elasticity with prescribed displacements on Gamma1 / Gamma2
/// (defaults (1, 0, ...) and (-1, 0, ...)).
inline PhysicsCase elasticity_case(Mesh m, double lam = 1.0, double mu = 1.0, Eigen::RowVectorXd d1 = {},
                                   Eigen::RowVectorXd d2 = {}) {
  PhysicsCase c;
  c.kind = CaseKind::Elasticity;
  c.components = m.dim;
  c.lam = lam;
  c.mu = mu;
  if (d1.size() == 0) d1 = Eigen::RowVectorXd::Unit(m.dim, 0);
  if (d2.size() == 0) d2 = -Eigen::RowVectorXd::Unit(m.dim, 0);
  if (d1.size() != m.dim || d2.size() != m.dim) throw ShapeError("elasticity boundary values need dim components");
  c.mesh = std::move(m);
  c.stiffness = fem::assemble_elastic_stiffness(c.mesh, lam, mu);
  detail::finish_case(c, d1, d2);
  return c;
}

namespace detail {

inline void check_field(const PhysicsCase& c, const Value& v, const char* what) {
  if (v.size() != c.n_dofs()) {
    throw ShapeError(std::string(what) + " has " + std::to_string(v.size()) + " entries, case expects " +
                     std::to_string(c.n_dofs()));
  }
}

}  // namespace detail

/// u^T A u, scalar on the tape.
inline Value energy(const PhysicsCase& c, const Value& u) {
  detail::check_field(c, u, "u");
  Value Au = ad::apply_linear_operator(c.A, u);
  return ad::reduce_sum(ad::mul(ad::reshape(u, c.n_dofs(), 1), Au));
}

struct Residuals {
  Value r_u;
  Value r_lambda;
};

inline Residuals stationarity_residuals(const PhysicsCase& c, const Value& u, const Value& lam) {
  detail::check_field(c, u, "u");
  detail::check_field(c, lam, "lambda");
  Tape& t = *u.tape();
  Value r_u = ad::add(ad::scale(ad::apply_linear_operator(c.A, u), 2.0),
                      ad::apply_linear_operator(ad::transpose(c.B), lam));
  Value r_l = ad::sub(ad::apply_linear_operator(c.B, u), t.constant(c.Bg));
  return {r_u, r_l};
}

struct LossWeights {
  double stat_u = 1.0;
  double stat_lambda = 1.0;
  double data = 1.0;

  static LossWeights mae_only() { return {0.0, 0.0, 1.0}; }
};

/// Unweighted term values; total is the weighted sum actually minimized.
struct LossReport {
  double stat_u = 0.0;
  double stat_lambda = 0.0;
  double data = 0.0;
  double total = 0.0;
};

struct Loss {
  Value value;
  LossReport report;
};

inline Loss hybrid_loss(const PhysicsCase& c, const Value& u_theta, const Value& lambda_theta, const Matrix& u_true,
                        const LossWeights& w = {}) {
  detail::check_field(c, u_theta, "u_theta");
  if (u_true.size() != c.n_dofs()) throw ShapeError("u_true does not match the case unknown");
  Tape& t = *u_theta.tape();
  Value target = t.constant(Eigen::Map<const Matrix>(u_true.data(), u_theta.rows(), u_theta.cols()));
  Value data = ad::scale(ad::reduce_sum(ad::abs(ad::sub(target, u_theta))), 1.0 / c.n_nodes());

  LossReport rep;
  rep.data = data.item();
  Value total = ad::scale(data, w.data);
  if (w.stat_u != 0.0 || w.stat_lambda != 0.0) {
    detail::check_field(c, lambda_theta, "lambda_theta");
    auto [r_u, r_l] = stationarity_residuals(c, u_theta, lambda_theta);
    Value su = ad::reduce_sum(ad::square(r_u));
    Value sl = ad::reduce_sum(ad::square(r_l));
    rep.stat_u = su.item();
    rep.stat_lambda = sl.item();
    total = ad::add(total, ad::add(ad::scale(su, w.stat_u), ad::scale(sl, w.stat_lambda)));
  } else if (lambda_theta.valid()) {
    // Report the physics terms even when they carry no weight.
    Tape probe;
    auto r = stationarity_residuals(c, probe.constant(u_theta.data()), probe.constant(lambda_theta.data()));
    rep.stat_u = r.r_u.data().squaredNorm();
    rep.stat_lambda = r.r_lambda.data().squaredNorm();
  }
  rep.total = total.item();
  return {total, rep};
}

/// Scalar Lagrangian u^T A u + lam^T B (u - g), for cross-checking residuals.
inline Value lagrangian(const PhysicsCase& c, const Value& u, const Value& lam) {
  Tape& t = *u.tape();
  Value constraint = ad::sub(ad::apply_linear_operator(c.B, u), t.constant(c.Bg));
  return ad::add(energy(c, u), ad::reduce_sum(ad::mul(ad::reshape(lam, c.n_dofs(), 1), constraint)));
}

struct SaddlePoint {
  Matrix u;       // N_v x k
  Matrix lambda;  // N_v x k, zero off the Dirichlet dofs
};

/// Direct solve of [2A, B_D^T; B_D, 0][u; lam_D] = [0; B_D g], where B_D keeps
/// the Dirichlet rows of B. Dense; meant for small meshes.
inline SaddlePoint solve_kkt(const PhysicsCase& c) {
  const Eigen::Index n = c.n_dofs();
  const auto& D = c.dirichlet_dofs;
  const Eigen::Index m = static_cast<Eigen::Index>(D.size());
  const Eigen::MatrixXd A = Eigen::MatrixXd(c.stiffness.matrix);
  const Eigen::MatrixXd B = Eigen::MatrixXd(c.boundary_mass.matrix);
  Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n + m, n + m);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n + m);
  K.topLeftCorner(n, n) = 2.0 * A;
  for (Eigen::Index r = 0; r < m; ++r) {
    K.block(n + r, 0, 1, n) = B.row(D[r]);
    K.block(0, n + r, n, 1) = B.row(D[r]).transpose();
    rhs(n + r) = c.Bg(D[r]);
  }
  const Eigen::VectorXd x = K.fullPivLu().solve(rhs);
  SaddlePoint s;
  s.u = Eigen::Map<const Matrix>(x.data(), c.n_nodes(), c.components);
  Vector lam = Vector::Zero(n);
  for (Eigen::Index r = 0; r < m; ++r) lam(D[r]) = x(n + r);
  s.lambda = Eigen::Map<const Matrix>(lam.data(), c.n_nodes(), c.components);
  return s;
}

enum class Norm { L1, L2 };

inline double relative_error(const Matrix& pred, const Matrix& truth, Norm norm) {
  if (pred.size() != truth.size()) throw ShapeError("relative_error: size mismatch");
  const Eigen::Map<const Vector> p(pred.data(), pred.size()), t(truth.data(), truth.size());
  const double den = norm == Norm::L1 ? t.lpNorm<1>() : t.norm();
  if (!(den > 0.0)) throw ValidationError("relative_error: reference field has zero norm");
  return (norm == Norm::L1 ? (p - t).lpNorm<1>() : (p - t).norm()) / den;
}

/// sum (pred - truth)^2 / sum truth^2.
inline double relative_mse(const Matrix& pred, const Matrix& truth) {
  const double r = relative_error(pred, truth, Norm::L2);
  return r * r;
}

}  // namespace pigmen::physics

#pragma once

// Reference FEM solutions: Dirichlet elimination plus Jacobi-preconditioned
// conjugate gradients, the smoothed-noise input field, and the field file
// format (`pigfield 1 <n_nodes> <n_channels>`).

#include "pigmen/femkernel.hpp"
#include "pigmen/mesh.hpp"
#include "pigmen/physics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace pigmen::solver {

using fem::SparseMatrix;
using mesh::BoundaryTag;
using mesh::Mesh;

struct CgReport {
  int iterations = 0;
  double relative_residual = 0.0;
};

/// Jacobi-preconditioned CG for SPD `a`. Converged when |b - a x| <= tol |b|.
inline CgReport conjugate_gradient(const SparseMatrix& a, const Vector& b, Vector& x, double tol, int max_iter) {
  const Eigen::Index n = b.size();
  if (a.rows() != n || a.cols() != n) throw ShapeError("conjugate_gradient: matrix/rhs size mismatch");
  if (x.size() != n) x = Vector::Zero(n);
  const double bnorm = b.norm();
  CgReport rep;
  if (bnorm == 0.0) {
    x.setZero();
    return rep;
  }
  const Vector inv_diag = a.diagonal().cwiseInverse();
  if (!inv_diag.allFinite() || (a.diagonal().array() <= 0.0).any()) {
    throw NumericalError("conjugate_gradient: matrix has a non-positive diagonal entry");
  }
  Vector r = b - a * x;
  Vector z = inv_diag.cwiseProduct(r);
  Vector p = z;
  double rz = r.dot(z);
  for (rep.iterations = 0; rep.iterations < max_iter; ++rep.iterations) {
    rep.relative_residual = r.norm() / bnorm;
    if (rep.relative_residual <= tol) return rep;
    const Vector ap = a * p;
    const double alpha = rz / p.dot(ap);
    x += alpha * p;
    r -= alpha * ap;
    z = inv_diag.cwiseProduct(r);
    const double rz_new = r.dot(z);
    p = z + (rz_new / rz) * p;
    rz = rz_new;
  }
  // Recompute from scratch: the recursive residual can drift.
  rep.relative_residual = (b - a * x).norm() / bnorm;
  if (rep.relative_residual <= tol) return rep;
  throw NumericalError("conjugate_gradient: no convergence in " + std::to_string(max_iter) +
                       " iterations (relative residual " + std::to_string(rep.relative_residual) + ")");
}

struct SolveReport {
  int iterations = 0;
  /// |(K u - f)_free| / |f_free - K_FD g_D| on the eliminated rows.
  double relative_residual = 0.0;
  Eigen::Index n_free = 0;
};

inline constexpr double kCgTolerance = 1e-12;

/// Solves K u = 0 with u[d] = values[d] for the listed dofs, by eliminating
/// the constrained rows and columns.
inline Vector solve_constrained(const SparseMatrix& k, const std::vector<int>& fixed_dofs, const Vector& fixed_values,
                                SolveReport* report = nullptr) {
  const Eigen::Index n = k.rows();
  if (fixed_dofs.empty()) throw ValidationError("Dirichlet boundary is empty");
  if (static_cast<Eigen::Index>(fixed_dofs.size()) != fixed_values.size()) {
    throw ShapeError("solve_constrained: dof/value count mismatch");
  }
  std::vector<int> map(n, -1);
  Vector u = Vector::Zero(n);
  std::vector<char> fixed(n, 0);
  for (std::size_t i = 0; i < fixed_dofs.size(); ++i) {
    fixed[fixed_dofs[i]] = 1;
    u(fixed_dofs[i]) = fixed_values(static_cast<Eigen::Index>(i));
  }
  int n_free = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    if (!fixed[i]) map[i] = n_free++;

  std::vector<Eigen::Triplet<double>> trip;
  Vector rhs = Vector::Zero(n_free);
  for (Eigen::Index r = 0; r < k.outerSize(); ++r) {
    if (fixed[r]) continue;
    for (SparseMatrix::InnerIterator it(k, r); it; ++it) {
      if (fixed[it.col()]) {
        rhs(map[r]) -= it.value() * u(it.col());
      } else {
        trip.emplace_back(map[r], map[it.col()], it.value());
      }
    }
  }
  SparseMatrix kff(n_free, n_free);
  kff.setFromTriplets(trip.begin(), trip.end());
  Vector x = Vector::Zero(n_free);
  auto cg = conjugate_gradient(kff, rhs, x, kCgTolerance, std::max(100, 10 * n_free));
  for (Eigen::Index i = 0; i < n; ++i)
    if (!fixed[i]) u(i) = x(map[i]);
  if (report) {
    report->iterations = cg.iterations;
    report->n_free = n_free;
    const Vector full = k * u;
    double num = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      if (!fixed[i]) num += full(i) * full(i);
    const double den = rhs.norm();
    report->relative_residual = den > 0.0 ? std::sqrt(num) / den : std::sqrt(num);
  }
  return u;
}

/// Solves the case's operator with its Dirichlet values; returns N_v x k.
inline Matrix solve_case(const physics::PhysicsCase& c, SolveReport* report = nullptr) {
  Vector vals(static_cast<Eigen::Index>(c.dirichlet_dofs.size()));
  const Eigen::Map<const Vector> g(c.dirichlet_values.data(), c.dirichlet_values.size());
  for (std::size_t i = 0; i < c.dirichlet_dofs.size(); ++i) vals(static_cast<Eigen::Index>(i)) = g(c.dirichlet_dofs[i]);
  const Vector u = solve_constrained(c.stiffness.matrix, c.dirichlet_dofs, vals, report);
  return Eigen::Map<const Matrix>(u.data(), c.n_nodes(), c.components);
}

namespace detail {

/// Node-major Dirichlet dofs and values from per-tag nodal values.
template <class ValueOf>
void collect_dirichlet(const Mesh& m, const std::vector<BoundaryTag>& tags, int k, ValueOf value_of,
                       std::vector<int>& dofs, std::vector<double>& values) {
  std::map<int, BoundaryTag> node_tag;
  for (BoundaryTag t : tags)
    for (int i : mesh::tagged_nodes(m, t)) node_tag.emplace(i, t);
  for (auto [node, tag] : node_tag)
    for (int c = 0; c < k; ++c) {
      dofs.push_back(node * k + c);
      values.push_back(value_of(tag, c));
    }
}

}  // namespace detail

/// Laplace with Dirichlet values per tag; other boundary parts are natural.
inline Vector solve_laplace(const Mesh& m, const std::map<BoundaryTag, double>& bc, SolveReport* report = nullptr) {
  std::vector<BoundaryTag> tags;
  for (const auto& [t, v] : bc) {
    if (t == BoundaryTag::Free) throw ValidationError("free boundary cannot carry Dirichlet values");
    tags.push_back(t);
  }
  std::vector<int> dofs;
  std::vector<double> values;
  detail::collect_dirichlet(m, tags, 1, [&](BoundaryTag t, int) { return bc.at(t); }, dofs, values);
  return solve_constrained(fem::assemble_stiffness(m).matrix, dofs,
                           Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size())), report);
}

/// Elasticity with a prescribed displacement vector per tag; returns N_v x dim.
inline Matrix solve_elasticity(const Mesh& m, const std::map<BoundaryTag, Eigen::RowVectorXd>& bc, double lam,
                               double mu, SolveReport* report = nullptr) {
  std::vector<BoundaryTag> tags;
  for (const auto& [t, v] : bc) {
    if (t == BoundaryTag::Free) throw ValidationError("free boundary cannot carry Dirichlet values");
    if (v.size() != m.dim) throw ShapeError("displacement boundary values need dim components");
    tags.push_back(t);
  }
  std::vector<int> dofs;
  std::vector<double> values;
  detail::collect_dirichlet(m, tags, m.dim, [&](BoundaryTag t, int c) { return bc.at(t)(c); }, dofs, values);
  const Vector u = solve_constrained(fem::assemble_elastic_stiffness(m, lam, mu).matrix, dofs,
                                     Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size())),
                                     report);
  return Eigen::Map<const Matrix>(u.data(), m.n_nodes(), m.dim);
}

/// phi = u* + eta, where eta is seeded Gaussian noise averaged over each
/// node's closed mesh neighbourhood `smoothing_steps` times and scaled so that
/// |phi - u*|_1 = level |u*|_1 exactly.
inline Matrix make_noisy_input(const Mesh& m, const Matrix& u_star, double level, int smoothing_steps,
                               std::uint64_t seed) {
  if (u_star.rows() != m.n_nodes()) throw ShapeError("make_noisy_input: field rows != node count");
  if (!(level >= 0.0)) throw ValidationError("noise level must be >= 0");
  if (smoothing_steps < 0) throw ValidationError("smoothing_steps must be >= 0");
  const double ref = u_star.cwiseAbs().sum();
  if (!(ref > 0.0)) throw ValidationError("make_noisy_input: reference field has zero norm");
  if (level == 0.0) return u_star;

  pigmen::detail::Rng rng(seed);
  Matrix eta(u_star.rows(), u_star.cols());
  for (Eigen::Index i = 0; i < eta.size(); ++i) eta.data()[i] = rng.normal();
  const auto adj = mesh::adjacency(m);
  for (int step = 0; step < smoothing_steps; ++step) {
    Matrix next(eta.rows(), eta.cols());
    for (int i = 0; i < m.n_nodes(); ++i) {
      Eigen::RowVectorXd acc = eta.row(i);
      for (int j : adj[i]) acc += eta.row(j);
      next.row(i) = acc / static_cast<double>(adj[i].size() + 1);
    }
    eta.swap(next);
  }
  const double mag = eta.cwiseAbs().sum();
  if (!(mag > 0.0)) throw NumericalError("make_noisy_input: smoothed noise vanished");
  return u_star + eta * (level * ref / mag);
}

// ---------------------------------------------------------------------------
// Field files
// ---------------------------------------------------------------------------

inline constexpr int kFieldFormatVersion = 1;

inline void write_field(std::ostream& out, const Matrix& f) {
  out << "pigfield " << kFieldFormatVersion << ' ' << f.rows() << ' ' << f.cols() << '\n';
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    for (Eigen::Index c = 0; c < f.cols(); ++c) {
      if (c) out << ' ';
      out << mesh::detail::format_double(f(i, c));
    }
    out << '\n';
  }
}

inline Matrix read_field(std::istream& in) {
  mesh::detail::LineReader r(in);
  auto head = r.expect(4, "field header");
  if (head[0] != "pigfield") r.fail("expected 'pigfield' header");
  if (mesh::detail::to_long(r, head[1]) != kFieldFormatVersion) r.fail("unsupported field version " + head[1]);
  const long n = mesh::detail::to_long(r, head[2]), k = mesh::detail::to_long(r, head[3]);
  if (n < 0 || k < 1) r.fail("bad field dimensions");
  Matrix f(n, k);
  for (long i = 0; i < n; ++i) {
    auto tok = r.expect(static_cast<std::size_t>(k), "field row");
    for (long c = 0; c < k; ++c) f(i, c) = mesh::detail::to_double(r, tok[c]);
  }
  std::vector<std::string> extra;
  if (r.next(extra)) r.fail("trailing content after field rows");
  return f;
}

inline void save_field(const std::string& path, const Matrix& f) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write field file '" + path + "'");
  write_field(out, f);
  if (!out) throw IoError("failed writing field file '" + path + "'");
}

inline Matrix load_field(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open field file '" + path + "'");
  return read_field(in);
}

}  // namespace pigmen::solver

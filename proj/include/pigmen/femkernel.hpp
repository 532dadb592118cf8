#pragma once

// P1 finite-element kernels on simplicial meshes: per-element shape-function
// gradients, Laplace and linear-elastic stiffness, and boundary mass on
// tagged facets. Every operator can be wrapped as an ad::LinearOperatorHandle
// whose backward pass applies the exact transpose.

#include "pigmen/autodiff.hpp"
#include "pigmen/mesh.hpp"

#include <Eigen/Sparse>

#include <cmath>
#include <cstdio>
#include <memory>
#include <ostream>
#include <set>
#include <string>
#include <vector>

namespace pigmen::fem {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using Triplet = Eigen::Triplet<double>;
using mesh::BoundaryTag;
using mesh::Mesh;

/// Shape-function gradients of every element. For element K, rows
/// [K*dim, K*dim + dim) of `grads` hold G_K (dim x (dim+1)): column i is the
/// gradient of the barycentric function of local vertex i.
struct ElementGradientOperator {
  int dim = 0;
  int n_nodes = 0;
  IndexMatrix elements;
  Matrix grads;
  Vector volumes;

  int n_elements() const { return static_cast<int>(elements.rows()); }

  auto element(int e) const { return grads.middleRows(static_cast<Eigen::Index>(e) * dim, dim); }

  /// Per-element gradients of the P1 interpolant of u, as an N_e x dim matrix.
  Matrix apply(const Vector& u) const {
    if (u.size() != n_nodes) throw ShapeError("element_gradients: nodal field length != node count");
    Matrix out(n_elements(), dim);
    for (int e = 0; e < n_elements(); ++e) {
      Eigen::VectorXd local(dim + 1);
      for (int i = 0; i <= dim; ++i) local(i) = u(elements(e, i));
      out.row(e) = (element(e) * local).transpose();
    }
    return out;
  }

  /// Flattened form used by the operator handle: length N_e * dim, element-major.
  Vector apply_flat(const Vector& u) const {
    Matrix g = apply(u);
    return Eigen::Map<const Vector>(g.data(), g.size());
  }

  /// (G^T w)_i = sum_K sum_c G_K[c, local(i)] w[K, c].
  Vector apply_transpose(const Vector& w) const {
    if (w.size() != static_cast<Eigen::Index>(n_elements()) * dim) {
      throw ShapeError("element gradient transpose: input length != N_e * dim");
    }
    Vector out = Vector::Zero(n_nodes);
    for (int e = 0; e < n_elements(); ++e) {
      const auto wk = w.segment(static_cast<Eigen::Index>(e) * dim, dim);
      const Eigen::VectorXd contrib = element(e).transpose() * wk;
      for (int i = 0; i <= dim; ++i) out(elements(e, i)) += contrib(i);
    }
    return out;
  }

  /// Explicit (N_e * dim) x N_v matrix.
  SparseMatrix to_sparse() const {
    std::vector<Triplet> trip;
    trip.reserve(static_cast<std::size_t>(grads.size()));
    for (int e = 0; e < n_elements(); ++e)
      for (int c = 0; c < dim; ++c)
        for (int i = 0; i <= dim; ++i) trip.emplace_back(e * dim + c, elements(e, i), grads(e * dim + c, i));
    SparseMatrix m(static_cast<Eigen::Index>(n_elements()) * dim, n_nodes);
    m.setFromTriplets(trip.begin(), trip.end());
    return m;
  }
};

struct AssembledOperator {
  SparseMatrix matrix;
  bool symmetric = true;

  Eigen::Index rows() const { return matrix.rows(); }
  Eigen::Index cols() const { return matrix.cols(); }
};

namespace detail {

inline double factorial(int n) { return mesh::detail::factorial(n); }

}  // namespace detail

inline ElementGradientOperator element_gradient_operator(const Mesh& m) {
  const int d = m.dim;
  ElementGradientOperator op;
  op.dim = d;
  op.n_nodes = m.n_nodes();
  op.elements = m.elements;
  op.grads.resize(static_cast<Eigen::Index>(m.n_elements()) * d, d + 1);
  op.volumes.resize(m.n_elements());
  const double min_volume = 1e-14 * std::pow(mesh::detail::bbox_scale(m.coords), d);
  Eigen::MatrixXd jac(d, d);
  for (int e = 0; e < m.n_elements(); ++e) {
    for (int c = 0; c < d; ++c) {
      jac.col(c) = (m.coords.row(m.elements(e, c + 1)) - m.coords.row(m.elements(e, 0))).transpose();
    }
    const double det = jac.determinant();
    const double vol = std::abs(det) / detail::factorial(d);
    if (!(vol >= min_volume)) {
      throw SingularElementError("element " + std::to_string(e) + " is degenerate (volume " + std::to_string(vol) + ")");
    }
    // Rows of J^{-1} are the gradients of barycentric functions 1..d.
    const Eigen::MatrixXd inv = jac.inverse();
    auto g = op.grads.middleRows(static_cast<Eigen::Index>(e) * d, d);
    for (int i = 0; i < d; ++i) g.col(i + 1) = inv.row(i).transpose();
    g.col(0) = -g.rightCols(d).rowwise().sum();
    op.volumes(e) = vol;
  }
  return op;
}

/// Gradient of the P1 interpolant of u on each element (N_e x dim).
inline Matrix element_gradients(const Mesh& m, const Vector& u) { return element_gradient_operator(m).apply(u); }

/// A_ij = integral of grad(phi_i) . grad(phi_j). One-point quadrature is exact
/// since P1 gradients are piecewise constant.
inline AssembledOperator assemble_stiffness(const Mesh& m) {
  const auto grads = element_gradient_operator(m);
  const int nv = m.dim + 1;
  std::vector<Triplet> trip;
  trip.reserve(static_cast<std::size_t>(m.n_elements()) * nv * nv);
  for (int e = 0; e < m.n_elements(); ++e) {
    const Eigen::MatrixXd g = grads.element(e);
    const Eigen::MatrixXd local = grads.volumes(e) * (g.transpose() * g);
    for (int i = 0; i < nv; ++i)
      for (int j = 0; j < nv; ++j) trip.emplace_back(m.elements(e, i), m.elements(e, j), local(i, j));
  }
  AssembledOperator op;
  op.matrix.resize(m.n_nodes(), m.n_nodes());
  op.matrix.setFromTriplets(trip.begin(), trip.end());
  return op;
}

/// Linear elasticity, dofs node-major (dof = node * dim + component):
/// u^T K u = integral of lam tr(eps)^2 + 2 mu eps:eps.
inline AssembledOperator assemble_elastic_stiffness(const Mesh& m, double lam, double mu) {
  if (!(lam >= 0.0) || !(mu > 0.0) || !std::isfinite(lam) || !std::isfinite(mu)) {
    throw ValidationError("elastic moduli must satisfy lam >= 0, mu > 0");
  }
  const auto grads = element_gradient_operator(m);
  const int d = m.dim, nv = d + 1;
  std::vector<Triplet> trip;
  trip.reserve(static_cast<std::size_t>(m.n_elements()) * nv * nv * d * d);
  for (int e = 0; e < m.n_elements(); ++e) {
    const Eigen::MatrixXd g = grads.element(e);
    const double vol = grads.volumes(e);
    for (int a = 0; a < nv; ++a)
      for (int b = 0; b < nv; ++b) {
        const double dot = g.col(a).dot(g.col(b));
        for (int i = 0; i < d; ++i)
          for (int j = 0; j < d; ++j) {
            double k = lam * g(i, a) * g(j, b) + mu * g(j, a) * g(i, b);
            if (i == j) k += mu * dot;
            trip.emplace_back(m.elements(e, a) * d + i, m.elements(e, b) * d + j, vol * k);
          }
      }
  }
  AssembledOperator op;
  op.matrix.resize(static_cast<Eigen::Index>(m.n_nodes()) * d, static_cast<Eigen::Index>(m.n_nodes()) * d);
  op.matrix.setFromTriplets(trip.begin(), trip.end());
  return op;
}

/// B_ij = integral over the tagged facets of phi_i phi_j, exact for P1.
/// With `components` > 1 the matrix is expanded as B (x) I over node-major dofs.
inline AssembledOperator assemble_boundary_mass(const Mesh& m, const std::set<BoundaryTag>& tags, int components = 1) {
  if (tags.empty()) throw ValidationError("boundary mass: empty tag set");
  if (tags.count(BoundaryTag::Free)) throw ValidationError("boundary mass: only Gamma1/Gamma2 may be tagged");
  if (components < 1) throw ValidationError("boundary mass: components must be >= 1");
  const int d = m.dim;
  std::vector<Triplet> trip;
  int used = 0;
  for (int f = 0; f < m.n_facets(); ++f) {
    if (!tags.count(m.facet_tags[f])) continue;
    ++used;
    double measure = 0.0;
    if (d == 2) {
      measure = (m.coords.row(m.facets(f, 1)) - m.coords.row(m.facets(f, 0))).norm();
    } else {
      const Eigen::Vector3d a = (m.coords.row(m.facets(f, 1)) - m.coords.row(m.facets(f, 0))).transpose();
      const Eigen::Vector3d b = (m.coords.row(m.facets(f, 2)) - m.coords.row(m.facets(f, 0))).transpose();
      measure = 0.5 * a.cross(b).norm();
    }
    // Segment: (L/6)[[2,1],[1,2]]; triangle: (A/12)[[2,1,1],[1,2,1],[1,1,2]].
    const double off = d == 2 ? measure / 6.0 : measure / 12.0;
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) {
        const double v = (i == j ? 2.0 : 1.0) * off;
        for (int c = 0; c < components; ++c)
          trip.emplace_back(m.facets(f, i) * components + c, m.facets(f, j) * components + c, v);
      }
  }
  if (used == 0) throw ValidationError("boundary mass: no facet carries the requested tags");
  AssembledOperator op;
  const Eigen::Index n = static_cast<Eigen::Index>(m.n_nodes()) * components;
  op.matrix.resize(n, n);
  op.matrix.setFromTriplets(trip.begin(), trip.end());
  return op;
}

inline ad::LinearOperatorHandle as_handle(const AssembledOperator& op) {
  auto a = std::make_shared<const SparseMatrix>(op.matrix);
  ad::LinearOperatorHandle h;
  h.n_rows = a->rows();
  h.n_cols = a->cols();
  h.apply = [a](const Vector& u) -> Vector { return *a * u; };
  if (op.symmetric) {
    h.apply_transpose = h.apply;
  } else {
    h.apply_transpose = [a](const Vector& w) -> Vector { return a->transpose() * w; };
  }
  return h;
}

inline ad::LinearOperatorHandle as_handle(const ElementGradientOperator& op) {
  auto g = std::make_shared<const ElementGradientOperator>(op);
  ad::LinearOperatorHandle h;
  h.n_rows = static_cast<Eigen::Index>(g->n_elements()) * g->dim;
  h.n_cols = g->n_nodes;
  h.apply = [g](const Vector& u) { return g->apply_flat(u); };
  h.apply_transpose = [g](const Vector& w) { return g->apply_transpose(w); };
  return h;
}

/// Debug dump: one `row col value` line per stored entry.
inline void write_coordinate(std::ostream& out, const SparseMatrix& a) {
  char buf[64];
  for (Eigen::Index r = 0; r < a.outerSize(); ++r)
    for (SparseMatrix::InnerIterator it(a, r); it; ++it) {
      std::snprintf(buf, sizeof buf, "%ld %ld %.17g\n", static_cast<long>(it.row()), static_cast<long>(it.col()),
                    it.value());
      out << buf;
    }
}

}  // namespace pigmen::fem

#include "pigmen/femkernel.hpp"
#include "pigmen/meshgen.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace pigmen;
using namespace pigmen::fem;
using namespace testing_support;
using mesh::generate_mesh;
using mesh::fixture_spec;

namespace {

Mesh reference_triangle() {
  Mesh m;
  m.dim = 2;
  m.coords = (Matrix(3, 2) << 0, 0, 1, 0, 0, 1).finished();
  m.elements = (IndexMatrix(1, 3) << 0, 1, 2).finished();
  m.facets = (IndexMatrix(3, 2) << 0, 1, 1, 2, 2, 0).finished();
  m.facet_tags = {BoundaryTag::Gamma1, BoundaryTag::Free, BoundaryTag::Free};
  mesh::validate(m);
  return m;
}

Vector coordinate(const Mesh& m, int c) { return m.coords.col(c); }

Vector interleave(const Vector& a, const Vector& b) {
  Vector out(2 * a.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    out(2 * i) = a(i);
    out(2 * i + 1) = b(i);
  }
  return out;
}

const std::vector<std::string> kFixtures{"unit_square", "rect4", "strip6x3", "annulus_small", "rings2d_coarse",
                                         "lshape3d_small"};

}  // namespace

TEST(ElementGradients, AffineFieldOnReferenceTriangle) {
  Mesh m = reference_triangle();
  Matrix g = element_gradients(m, (Vector(3) << 0, 1, 0).finished());
  EXPECT_EQ(g(0, 0), 1.0);
  EXPECT_EQ(g(0, 1), 0.0);
}

TEST(ElementGradients, ShapeGradientsSumToZero) {
  for (const auto& name : kFixtures) {
    auto op = element_gradient_operator(generate_mesh(fixture_spec(name)));
    for (int e = 0; e < op.n_elements(); ++e) {
      EXPECT_LE(op.element(e).rowwise().sum().cwiseAbs().maxCoeff(), 1e-12) << name;
    }
  }
}

TEST(ElementGradients, ConstantFieldIsExactlyZero) {
  Mesh m = generate_mesh(fixture_spec("rings2d_coarse"));
  Matrix g = element_gradients(m, Vector::Constant(m.n_nodes(), 3.25));
  EXPECT_LE(g.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ElementGradients, AffineExactOnEveryFixture) {
  std::mt19937_64 rng(1);
  for (const auto& name : kFixtures) {
    Mesh m = generate_mesh(fixture_spec(name));
    const Vector a = random_vector(rng, m.dim);
    const Vector u = (m.coords * a).array() + 0.7;
    Matrix g = element_gradients(m, u);
    const double scale = mesh::detail::bbox_scale(m.coords);
    for (int e = 0; e < m.n_elements(); ++e) {
      EXPECT_LE((g.row(e).transpose() - a).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, scale)) << name;
    }
  }
}

TEST(ElementGradients, FirstOrderConvergenceForQuadratic) {
  std::vector<double> h, err;
  for (int n : {4, 8, 16, 32}) {
    Mesh m = mesh::rectangle(n, n);
    const Vector x = coordinate(m, 0);
    auto op = element_gradient_operator(m);
    Matrix g = op.apply(x.cwiseAbs2());
    // L2 error against grad(x^2) = (2x, 0) with the vertex quadrature rule,
    // which is exact for the quadratic error integrand's leading term.
    double e2 = 0.0;
    for (int e = 0; e < m.n_elements(); ++e) {
      double local = 0.0;
      for (int i = 0; i < 3; ++i) {
        const double xi = m.coords(m.elements(e, i), 0);
        local += std::pow(g(e, 0) - 2.0 * xi, 2) + std::pow(g(e, 1), 2);
      }
      e2 += op.volumes(e) * local / 3.0;
    }
    h.push_back(1.0 / n);
    err.push_back(std::sqrt(e2));
  }
  for (std::size_t i = 1; i < h.size(); ++i) {
    const double rate = std::log(err[i - 1] / err[i]) / std::log(h[i - 1] / h[i]);
    EXPECT_GE(rate, 0.9);
  }
}

TEST(ElementGradients, DegenerateElementIsSingular) {
  Mesh m = reference_triangle();
  m.coords(2, 0) = 0.5;
  m.coords(2, 1) = 1e-18;
  EXPECT_THROW(element_gradient_operator(m), SingularElementError);
}

TEST(ElementGradients, WrongFieldLength) {
  Mesh m = reference_triangle();
  EXPECT_THROW(element_gradients(m, Vector::Zero(4)), ShapeError);
}

TEST(Stiffness, ReferenceTriangleMatchesHandIntegration) {
  // grad(phi) = (-1,-1), (1,0), (0,1); area 1/2.
  const Matrix expected = 0.5 * (Matrix(3, 3) << 2, -1, -1, -1, 1, 0, -1, 0, 1).finished();
  const Matrix a = Matrix(assemble_stiffness(reference_triangle()).matrix);
  EXPECT_LE((a - expected).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Stiffness, UnitSquareEnergyOfX) {
  Mesh m = generate_mesh(fixture_spec("unit_square"));
  auto a = assemble_stiffness(m);
  const Vector x = coordinate(m, 0);
  EXPECT_NEAR(x.dot(a.matrix * x), 1.0, 1e-12);
}

TEST(Stiffness, PropertiesOnFixtures) {
  std::mt19937_64 rng(2);
  for (const auto& name : kFixtures) {
    SCOPED_TRACE(name);
    Mesh m = generate_mesh(fixture_spec(name));
    auto a = assemble_stiffness(m);
    EXPECT_LE((a.matrix * Vector::Ones(m.n_nodes())).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((Matrix(a.matrix) - Matrix(a.matrix).transpose()).cwiseAbs().maxCoeff(), 0.0);
    auto grads = element_gradient_operator(m);
    for (int k = 0; k < 50; ++k) {
      const Vector u = random_vector(rng, m.n_nodes());
      const double q = u.dot(a.matrix * u);
      EXPECT_GE(q / u.squaredNorm(), -1e-12);
      // Galerkin consistency with the element gradients.
      const Matrix g = grads.apply(u);
      const double direct = (g.rowwise().squaredNorm().transpose().cwiseProduct(grads.volumes.transpose())).sum();
      EXPECT_LE(std::abs(q - direct), 1e-12 * std::max(1.0, q));
    }
  }
}

TEST(Elastic, RigidTranslationInKernel) {
  for (const char* name : {"rect4", "lshape3d_small"}) {
    Mesh m = generate_mesh(fixture_spec(name));
    auto k = assemble_elastic_stiffness(m, 1.0, 1.0);
    Vector u(m.n_nodes() * m.dim);
    for (int i = 0; i < m.n_nodes(); ++i)
      for (int c = 0; c < m.dim; ++c) u(i * m.dim + c) = 0.3 + c;
    EXPECT_LE((k.matrix * u).cwiseAbs().maxCoeff(), 1e-12) << name;
  }
}

TEST(Elastic, InfinitesimalRotationHasNoEnergy) {
  Mesh m = generate_mesh(fixture_spec("rect4"));
  auto k = assemble_elastic_stiffness(m, 1.0, 1.0);
  const Vector u = interleave(-coordinate(m, 1), coordinate(m, 0));
  EXPECT_LE(std::abs(u.dot(k.matrix * u)), 1e-12);
}

TEST(Elastic, UniaxialStretchEnergy) {
  Mesh m = generate_mesh(fixture_spec("unit_square"));
  auto k = assemble_elastic_stiffness(m, 1.0, 1.0);
  const Vector u = interleave(coordinate(m, 0), Vector::Zero(m.n_nodes()));
  EXPECT_NEAR(u.dot(k.matrix * u), 3.0, 1e-12);
}

TEST(Elastic, EnergyMatchesStrainIntegral) {
  std::mt19937_64 rng(4);
  for (const char* name : {"annulus_small", "lshape3d_small"}) {
    Mesh m = generate_mesh(fixture_spec(name));
    const double lam = 0.7, mu = 1.3;
    auto k = assemble_elastic_stiffness(m, lam, mu);
    auto grads = element_gradient_operator(m);
    const int d = m.dim;
    for (int trial = 0; trial < 5; ++trial) {
      const Vector u = random_vector(rng, m.n_nodes() * d);
      double direct = 0.0;
      for (int e = 0; e < m.n_elements(); ++e) {
        Eigen::MatrixXd du = Eigen::MatrixXd::Zero(d, d);  // du(i, j) = d u_i / d x_j
        for (int a = 0; a <= d; ++a)
          for (int i = 0; i < d; ++i) du.row(i) += u(m.elements(e, a) * d + i) * grads.element(e).col(a).transpose();
        const Eigen::MatrixXd eps = 0.5 * (du + du.transpose());
        direct += grads.volumes(e) * (lam * std::pow(eps.trace(), 2) + 2.0 * mu * eps.cwiseAbs2().sum());
      }
      EXPECT_LE(relative_error(u.dot(k.matrix * u), direct), 1e-12) << name;
      EXPECT_GE(u.dot(k.matrix * u), 0.0);
    }
  }
}

TEST(Elastic, NonPhysicalModuli) {
  Mesh m = generate_mesh(fixture_spec("unit_square"));
  EXPECT_THROW(assemble_elastic_stiffness(m, -1.0, 1.0), ValidationError);
  EXPECT_THROW(assemble_elastic_stiffness(m, 1.0, 0.0), ValidationError);
}

TEST(BoundaryMass, SegmentOfLengthTwo) {
  Mesh m;
  m.dim = 2;
  m.coords = (Matrix(3, 2) << 0, 0, 2, 0, 0, 2).finished();
  m.elements = (IndexMatrix(1, 3) << 0, 1, 2).finished();
  m.facets = (IndexMatrix(3, 2) << 0, 1, 1, 2, 2, 0).finished();
  m.facet_tags = {BoundaryTag::Gamma1, BoundaryTag::Free, BoundaryTag::Free};
  mesh::validate(m);
  const Matrix b = Matrix(assemble_boundary_mass(m, {BoundaryTag::Gamma1}).matrix);
  const Matrix expected = (Matrix(2, 2) << 2, 1, 1, 2).finished() / 3.0;
  EXPECT_LE((b.topLeftCorner(2, 2) - expected).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(b.row(2).cwiseAbs().sum(), 0.0);
  EXPECT_EQ(b.col(2).cwiseAbs().sum(), 0.0);
}

TEST(BoundaryMass, ConstantsIntegrateToMeasure) {
  // rect4 on [0,1]^2: Gamma1 is x = 1, Gamma2 is x = 0.
  Mesh m = generate_mesh(fixture_spec("rect4"));
  auto b = assemble_boundary_mass(m, {BoundaryTag::Gamma1, BoundaryTag::Gamma2});
  const Vector one = Vector::Ones(m.n_nodes());
  EXPECT_NEAR(one.dot(b.matrix * one), 2.0, 1e-14);

  // lshape3d_small: measure summed directly from the facets.
  Mesh l = generate_mesh(fixture_spec("lshape3d_small"));
  double area = 0.0;
  for (int f = 0; f < l.n_facets(); ++f) {
    if (l.facet_tags[f] != BoundaryTag::Gamma1) continue;
    const Eigen::Vector3d a = (l.coords.row(l.facets(f, 1)) - l.coords.row(l.facets(f, 0))).transpose();
    const Eigen::Vector3d c = (l.coords.row(l.facets(f, 2)) - l.coords.row(l.facets(f, 0))).transpose();
    area += 0.5 * a.cross(c).norm();
  }
  auto bl = assemble_boundary_mass(l, {BoundaryTag::Gamma1});
  const Vector ones = Vector::Ones(l.n_nodes());
  EXPECT_NEAR(ones.dot(bl.matrix * ones), area, 1e-12 * area);
}

TEST(BoundaryMass, SupportOnlyOnTaggedNodes) {
  Mesh m = generate_mesh(fixture_spec("annulus_small"));
  auto b = Matrix(assemble_boundary_mass(m, {BoundaryTag::Gamma1}).matrix);
  auto on = mesh::tagged_nodes(m, BoundaryTag::Gamma1);
  std::set<int> tagged(on.begin(), on.end());
  for (int i = 0; i < m.n_nodes(); ++i) {
    if (!tagged.count(i)) {
      EXPECT_EQ(b.row(i).cwiseAbs().sum(), 0.0);
    }
  }
}

TEST(BoundaryMass, VectorExpansionIsKronecker) {
  Mesh m = generate_mesh(fixture_spec("rect4"));
  const Matrix b1 = Matrix(assemble_boundary_mass(m, {BoundaryTag::Gamma1}).matrix);
  const Matrix b2 = Matrix(assemble_boundary_mass(m, {BoundaryTag::Gamma1}, 2).matrix);
  for (int i = 0; i < m.n_nodes(); ++i)
    for (int j = 0; j < m.n_nodes(); ++j)
      for (int c = 0; c < 2; ++c)
        for (int d = 0; d < 2; ++d) EXPECT_EQ(b2(2 * i + c, 2 * j + d), c == d ? b1(i, j) : 0.0);
}

TEST(BoundaryMass, Errors) {
  Mesh m = generate_mesh(fixture_spec("rect4"));
  EXPECT_THROW(assemble_boundary_mass(m, {}), ValidationError);
  EXPECT_THROW(assemble_boundary_mass(m, {BoundaryTag::Free}), ValidationError);
}

TEST(Handles, AdjointIdentityForEveryOperator) {
  std::mt19937_64 rng(8);
  for (const char* name : {"rect4", "annulus_small", "lshape3d_small"}) {
    SCOPED_TRACE(name);
    Mesh m = generate_mesh(fixture_spec(name));
    std::vector<ad::LinearOperatorHandle> ops{
        as_handle(assemble_stiffness(m)),
        as_handle(assemble_elastic_stiffness(m, 1.0, 1.0)),
        as_handle(assemble_boundary_mass(m, {BoundaryTag::Gamma1, BoundaryTag::Gamma2})),
        as_handle(assemble_boundary_mass(m, {BoundaryTag::Gamma2}, m.dim)),
        as_handle(element_gradient_operator(m)),
    };
    for (const auto& op : ops) {
      for (int k = 0; k < 100; ++k) {
        const Vector u = random_vector(rng, op.n_cols), w = random_vector(rng, op.n_rows);
        const double lhs = op.apply(u).dot(w), rhs = u.dot(op.apply_transpose(w));
        EXPECT_LE(std::abs(lhs - rhs), 1e-12 * std::max(1.0, std::abs(lhs)));
      }
    }
  }
}

TEST(Handles, SymmetricApplyAndTransposeAgree) {
  std::mt19937_64 rng(12);
  Mesh m = generate_mesh(fixture_spec("rings2d_coarse"));
  auto h = as_handle(assemble_stiffness(m));
  for (int k = 0; k < 10; ++k) {
    const Vector u = random_vector(rng, m.n_nodes());
    EXPECT_LE((h.apply(u) - h.apply_transpose(u)).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(Handles, ElementGradientTransposeMatchesDenseMatrix) {
  Mesh m = generate_mesh(fixture_spec("rect4"));
  ASSERT_LE(m.n_nodes(), 25);
  auto g = element_gradient_operator(m);
  const Matrix dense = Matrix(g.to_sparse());
  Vector w = Vector::Zero(g.n_elements() * m.dim);
  for (int e = 0; e < g.n_elements(); ++e) w(e * m.dim) = 1.0;
  const Vector expected = dense.transpose() * w;
  EXPECT_LE((as_handle(g).apply_transpose(w) - expected).cwiseAbs().maxCoeff(), 1e-13);
  const Vector u = coordinate(m, 1);
  EXPECT_LE((as_handle(g).apply(u) - dense * u).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Handles, StiffnessProductMatchesHandAssembly) {
  // Unit square split along (0,0)-(1,1) or (1,0)-(0,1); hand-assemble from the
  // element list so the oracle does not depend on the diagonal choice.
  Mesh m = generate_mesh(fixture_spec("unit_square"));
  Matrix hand = Matrix::Zero(4, 4);
  for (int e = 0; e < 2; ++e) {
    // Right isosceles triangle with legs 1: the right-angle vertex r gets 1,
    // the others 1/2 on the diagonal, -1/2 between r and each other vertex.
    int r = -1;
    for (int i = 0; i < 3; ++i) {
      const int a = m.elements(e, i), b = m.elements(e, (i + 1) % 3), c = m.elements(e, (i + 2) % 3);
      if (std::abs((m.coords.row(b) - m.coords.row(a)).dot(m.coords.row(c) - m.coords.row(a))) < 1e-15) r = a;
    }
    ASSERT_GE(r, 0);
    for (int i = 0; i < 3; ++i) {
      const int a = m.elements(e, i);
      hand(a, a) += a == r ? 1.0 : 0.5;
      if (a != r) {
        hand(a, r) -= 0.5;
        hand(r, a) -= 0.5;
      }
    }
  }
  ad::Tape t;
  const Vector x = coordinate(m, 0);
  auto y = ad::apply_linear_operator(as_handle(assemble_stiffness(m)), t.leaf(Matrix(x)));
  const Vector got = Eigen::Map<const Vector>(y.data().data(), 4);
  EXPECT_LE((got - hand * x).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Debug, CoordinateDump) {
  std::ostringstream out;
  write_coordinate(out, assemble_stiffness(reference_triangle()).matrix);
  std::istringstream in(out.str());
  long r = 0, c = 0;
  double v = 0.0;
  int n = 0;
  Matrix rebuilt = Matrix::Zero(3, 3);
  while (in >> r >> c >> v) {
    rebuilt(r, c) = v;
    ++n;
  }
  EXPECT_EQ(n, 9);
  EXPECT_EQ(rebuilt, Matrix(assemble_stiffness(reference_triangle()).matrix));
}

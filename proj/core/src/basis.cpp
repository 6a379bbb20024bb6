#include "msfpca/basis.hpp"

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "msfpca/errors.hpp"

namespace msfpca {

namespace {

// Gauss-Legendre nodes/weights on [-1, 1] via Newton iteration on P_n.
void gauss_legendre(int n, Eigen::VectorXd& x, Eigen::VectorXd& w) {
  x.resize(n);
  w.resize(n);
  const int m = (n + 1) / 2;
  for (int i = 0; i < m; ++i) {
    double z = std::cos(M_PI * (i + 0.75) / (n + 0.5));
    double pp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = 0.0;
      for (int j = 0; j < n; ++j) {
        const double p2 = p1;
        p1 = p0;
        p0 = ((2.0 * j + 1.0) * z * p1 - j * p2) / (j + 1.0);
      }
      pp = n * (z * p0 - p1) / (z * z - 1.0);
      const double z1 = z;
      z = z1 - p0 / pp;
      if (std::abs(z - z1) < 1e-15) break;
    }
    x[i] = -z;
    x[n - 1 - i] = z;
    w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
    w[n - 1 - i] = w[i];
  }
}

// All raw B-spline values (or derivatives) at a single point.
// Cox-de Boor for the values; derivative order r reduces the degree r times
// through the standard difference recurrence.
void eval_bspline_point(const KnotVector& kv, double t, int deriv_order,
                        Eigen::VectorXd& out) {
  const int degree = kv.degree;
  const Eigen::VectorXd& tau = kv.expanded;
  const int n_knots = static_cast<int>(tau.size());
  const int q = kv.size();
  out.setZero(q);
  if (deriv_order > degree) return;

  // Degree-0 seed: indicator of the containing span (right-closed at t = 1).
  const int n0 = n_knots - 1;
  std::vector<double> b(static_cast<size_t>(n0), 0.0);
  int span = -1;
  for (int i = 0; i < n0; ++i) {
    if (tau[i] <= t && t < tau[i + 1]) {
      span = i;
      break;
    }
  }
  if (span < 0) {
    // t == right boundary: last non-degenerate span.
    for (int i = n0 - 1; i >= 0; --i) {
      if (tau[i] < tau[i + 1]) {
        span = i;
        break;
      }
    }
  }
  b[static_cast<size_t>(span)] = 1.0;

  const int d_low = degree - deriv_order;
  for (int r = 1; r <= d_low; ++r) {
    for (int i = 0; i < n_knots - r - 1; ++i) {
      double v = 0.0;
      const double den1 = tau[i + r] - tau[i];
      if (den1 > 0.0) v += (t - tau[i]) / den1 * b[static_cast<size_t>(i)];
      const double den2 = tau[i + r + 1] - tau[i + 1];
      if (den2 > 0.0) v += (tau[i + r + 1] - t) / den2 * b[static_cast<size_t>(i + 1)];
      b[static_cast<size_t>(i)] = v;
    }
  }
  // Derivative recurrence lifts degree back up, differencing as it goes;
  // ascending order so each slot reads this round's inputs before they are
  // overwritten.
  for (int r = d_low + 1; r <= degree; ++r) {
    for (int i = 0; i < n_knots - r - 1; ++i) {
      double v = 0.0;
      const double den1 = tau[i + r] - tau[i];
      if (den1 > 0.0) v += r / den1 * b[static_cast<size_t>(i)];
      const double den2 = tau[i + r + 1] - tau[i + 1];
      if (den2 > 0.0) v -= r / den2 * b[static_cast<size_t>(i + 1)];
      b[static_cast<size_t>(i)] = v;
    }
  }
  for (int i = 0; i < q; ++i) out[i] = b[static_cast<size_t>(i)];
}

}  // namespace

KnotVector KnotVector::equally_spaced(int n_basis, int degree) {
  if (degree < 2) {
    throw ConfigError("spline degree must be at least 2 (curvature penalty needs second derivatives)");
  }
  if (n_basis < degree + 2) {
    throw ConfigError("basis dimension must be at least degree + 2");
  }
  KnotVector kv;
  kv.degree = degree;
  const int n_int = n_basis - degree - 1;
  kv.interior.resize(n_int);
  for (int j = 0; j < n_int; ++j) {
    kv.interior[j] = static_cast<double>(j + 1) / (n_int + 1);
  }
  kv.expanded.resize(n_int + 2 * (degree + 1));
  int pos = 0;
  for (int j = 0; j <= degree; ++j) kv.expanded[pos++] = 0.0;
  for (int j = 0; j < n_int; ++j) kv.expanded[pos++] = kv.interior[j];
  for (int j = 0; j <= degree; ++j) kv.expanded[pos++] = 1.0;
  return kv;
}

QuadratureRule QuadratureRule::composite_gauss(const Eigen::VectorXd& breakpoints,
                                               int nodes_per_span) {
  Eigen::VectorXd gx, gw;
  gauss_legendre(nodes_per_span, gx, gw);
  const int n_span = static_cast<int>(breakpoints.size()) - 1;
  QuadratureRule rule;
  rule.nodes.resize(n_span * nodes_per_span);
  rule.weights.resize(n_span * nodes_per_span);
  int pos = 0;
  for (int s = 0; s < n_span; ++s) {
    const double a = breakpoints[s];
    const double b = breakpoints[s + 1];
    const double half = 0.5 * (b - a);
    const double mid = 0.5 * (a + b);
    for (int j = 0; j < nodes_per_span; ++j) {
      rule.nodes[pos] = mid + half * gx[j];
      rule.weights[pos] = half * gw[j];
      ++pos;
    }
  }
  return rule;
}

Eigen::MatrixXd eval_bspline_matrix(const KnotVector& knots,
                                    const Eigen::VectorXd& points, int deriv_order) {
  const int q = knots.size();
  Eigen::MatrixXd out(points.size(), q);
  Eigen::VectorXd row(q);
  for (Eigen::Index m = 0; m < points.size(); ++m) {
    eval_bspline_point(knots, points[m], deriv_order, row);
    out.row(m) = row;
  }
  return out;
}

OrthoBasis build_basis(int n_basis, int degree, int quad_points_per_span) {
  if (quad_points_per_span < degree + 1) {
    throw ConfigError("quadrature nodes per span too few for exact spline products");
  }
  OrthoBasis basis;
  basis.knots_ = KnotVector::equally_spaced(n_basis, degree);
  basis.quad_per_span_ = quad_points_per_span;

  Eigen::VectorXd breakpoints(basis.knots_.interior.size() + 2);
  breakpoints[0] = 0.0;
  breakpoints.segment(1, basis.knots_.interior.size()) = basis.knots_.interior;
  breakpoints[breakpoints.size() - 1] = 1.0;
  basis.quad_ = QuadratureRule::composite_gauss(breakpoints, quad_points_per_span);

  // Weighted Gram of the raw splines, then its symmetric inverse square root.
  const Eigen::MatrixXd raw = eval_bspline_matrix(basis.knots_, basis.quad_.nodes, 0);
  const Eigen::MatrixXd gram =
      raw.transpose() * basis.quad_.weights.asDiagonal() * raw;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
  if (es.info() != Eigen::Success || es.eigenvalues().minCoeff() <= 0.0) {
    throw NumericalError("raw B-spline Gram matrix is not positive definite");
  }
  basis.coeff_ = es.eigenvectors() *
                 es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
                 es.eigenvectors().transpose();

  if (!basis.coeff_.allFinite()) {
    throw NumericalError("non-finite orthonormalization coefficients");
  }

  basis.p0_ = Eigen::MatrixXd::Identity(n_basis, n_basis);

  const Eigen::MatrixXd raw_d2 = eval_bspline_matrix(basis.knots_, basis.quad_.nodes, 2);
  const Eigen::MatrixXd ortho_d2 = raw_d2 * basis.coeff_;
  Eigen::MatrixXd p2 =
      ortho_d2.transpose() * basis.quad_.weights.asDiagonal() * ortho_d2;
  basis.p2_ = 0.5 * (p2 + p2.transpose());
  if (!basis.p2_.allFinite()) {
    throw NumericalError("non-finite curvature penalty matrix");
  }
  return basis;
}

Eigen::MatrixXd OrthoBasis::evaluate(const Eigen::VectorXd& points) const {
  for (Eigen::Index m = 0; m < points.size(); ++m) {
    if (!(points[m] >= 0.0 && points[m] <= 1.0)) {
      throw DataError("basis evaluation point outside [0, 1]; no extrapolation");
    }
  }
  return eval_bspline_matrix(knots_, points, 0) * coeff_;
}

Eigen::MatrixXd OrthoBasis::evaluate_derivative(const Eigen::VectorXd& points,
                                                int order) const {
  if (order < 1 || order > 2) {
    throw ConfigError("derivative order must be 1 or 2");
  }
  for (Eigen::Index m = 0; m < points.size(); ++m) {
    if (!(points[m] >= 0.0 && points[m] <= 1.0)) {
      throw DataError("basis evaluation point outside [0, 1]; no extrapolation");
    }
  }
  return eval_bspline_matrix(knots_, points, order) * coeff_;
}

Eigen::MatrixXd OrthoBasis::penalty_alpha(double alpha) const {
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw ConfigError("penalty mix alpha must lie in (0, 1]");
  }
  return alpha * p0_ + (1.0 - alpha) * p2_;
}

}  // namespace msfpca

#pragma once

#include <Eigen/Core>

namespace msfpca {

// Knot layout for a B-spline family on [0, 1]: equally spaced interior
// knots, boundary knots replicated degree+1 times in the expanded vector.
struct KnotVector {
  int degree = 3;
  Eigen::VectorXd interior;  // strictly ascending, in (0, 1)
  Eigen::VectorXd expanded;  // replicated boundaries + interior

  // Number of B-splines defined by this layout.
  int size() const { return static_cast<int>(expanded.size()) - degree - 1; }

  static KnotVector equally_spaced(int n_basis, int degree);
};

// Composite Gauss-Legendre rule on [0, 1], exact per knot span for
// polynomials up to degree 2*nodes_per_span - 1.
struct QuadratureRule {
  Eigen::VectorXd nodes;    // ascending, in [0, 1]
  Eigen::VectorXd weights;  // positive, sum to 1

  static QuadratureRule composite_gauss(const Eigen::VectorXd& breakpoints,
                                        int nodes_per_span);
};

// Orthonormalized B-spline basis with its smoothness penalty matrices.
// The raw B-splines are mixed through `coeff` (the symmetric inverse square
// root of their Gram matrix) so the resulting functions are orthonormal in
// L2([0,1]).
class OrthoBasis {
 public:
  OrthoBasis() = default;

  int size() const { return knots_.size(); }
  int degree() const { return knots_.degree; }
  int quad_points_per_span() const { return quad_per_span_; }
  const KnotVector& knots() const { return knots_; }
  const QuadratureRule& quadrature() const { return quad_; }
  const Eigen::MatrixXd& coeff() const { return coeff_; }
  const Eigen::MatrixXd& p0() const { return p0_; }
  const Eigen::MatrixXd& p2() const { return p2_; }

  // Rows are basis evaluations B(points[m]); throws DataError for points
  // outside [0, 1] (no extrapolation).
  Eigen::MatrixXd evaluate(const Eigen::VectorXd& points) const;

  // Same layout for derivatives of order 1 or 2.
  Eigen::MatrixXd evaluate_derivative(const Eigen::VectorXd& points, int order) const;

  // P_alpha = alpha * P0 + (1 - alpha) * P2; strictly positive definite for
  // alpha in (0, 1].
  Eigen::MatrixXd penalty_alpha(double alpha) const;

  friend OrthoBasis build_basis(int n_basis, int degree, int quad_points_per_span);

 private:
  KnotVector knots_;
  QuadratureRule quad_;
  int quad_per_span_ = 0;
  Eigen::MatrixXd coeff_;
  Eigen::MatrixXd p0_;
  Eigen::MatrixXd p2_;
};

// Construct the orthonormal basis. Requires n_basis >= degree + 2 and
// degree >= 2 (the curvature penalty needs piecewise second derivatives).
OrthoBasis build_basis(int n_basis, int degree = 3, int quad_points_per_span = 10);

// Raw (non-orthonormalized) B-spline evaluation; exposed for tests.
Eigen::MatrixXd eval_bspline_matrix(const KnotVector& knots,
                                    const Eigen::VectorXd& points, int deriv_order);

}  // namespace msfpca

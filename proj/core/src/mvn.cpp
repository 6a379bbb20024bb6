#include "msfpca/mvn.hpp"

#include "msfpca/errors.hpp"

namespace msfpca {

Eigen::VectorXd mvn_sample_from_precision(const Eigen::MatrixXd& precision,
                                          const Eigen::VectorXd& rhs, Rng& rng) {
  const Eigen::MatrixXd sym = 0.5 * (precision + precision.transpose());
  Eigen::LLT<Eigen::MatrixXd> llt(sym);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("precision matrix is not positive definite");
  }
  const Eigen::VectorXd mean = llt.solve(rhs);
  const Eigen::VectorXd z = rng.normal_vector(rhs.size());
  // x = mean + L^{-T} z has covariance (L L^T)^{-1}.
  return mean + llt.matrixU().solve(z);
}

Eigen::VectorXd mvn_sample(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov,
                           Rng& rng) {
  const Eigen::MatrixXd sym = 0.5 * (cov + cov.transpose());
  Eigen::LLT<Eigen::MatrixXd> llt(sym);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("covariance matrix is not positive definite");
  }
  const Eigen::VectorXd z = rng.normal_vector(mean.size());
  return mean + llt.matrixL() * z;
}

}  // namespace msfpca

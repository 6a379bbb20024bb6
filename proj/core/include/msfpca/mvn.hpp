#pragma once

#include <Eigen/Dense>

#include "msfpca/rng.hpp"

namespace msfpca {

// Draw from MVN(precision^{-1} rhs, precision^{-1}) given the natural
// parameters; precision must be symmetric positive definite.
Eigen::VectorXd mvn_sample_from_precision(const Eigen::MatrixXd& precision,
                                          const Eigen::VectorXd& rhs, Rng& rng);

// Draw from MVN(mean, cov); cov is symmetrized before factorization.
Eigen::VectorXd mvn_sample(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov,
                           Rng& rng);

}  // namespace msfpca

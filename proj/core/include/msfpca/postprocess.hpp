#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>

#include "msfpca/sampler.hpp"

namespace msfpca {

// Posterior draws after per-draw Procrustes rotation toward a fixed
// reference. Rotations never change the span of the FPC columns or any
// fitted trajectory; they only remove rotational ambiguity between draws.
struct AlignedDraws {
  const PosteriorDraws* source = nullptr;    // non-owning
  std::vector<Eigen::MatrixXd> rotations;    // per flat draw, K x K orthogonal
  std::vector<Eigen::MatrixXd> fpc_coef;     // per flat draw, PQ x K rotated
  std::vector<Eigen::MatrixXd> scores;       // per flat draw, N x K rotated
  Eigen::MatrixXd reference;                 // PM x K
  std::string reference_provenance;          // "posterior-mean-svd" | "external"

  int n_draws() const { return static_cast<int>(rotations.size()); }
};

// Stack the per-variable FPC evaluations of one draw into a PM x K matrix.
Eigen::MatrixXd evaluate_fpc_matrix(const Eigen::MatrixXd& basis_eval,
                                    const Eigen::MatrixXd& fpc_coef, int n_vars);

// Optimal rotation registering `fpc_eval` onto `reference` in Frobenius
// norm: R = U V^T from the SVD of fpc_eval^T reference, with a deterministic
// sign convention on the singular vectors.
Eigen::MatrixXd procrustes_rotation(const Eigen::MatrixXd& fpc_eval,
                                    const Eigen::MatrixXd& reference);

// Align every draw to the reference; scores rotate contragrediently so fits
// are unchanged.
AlignedDraws procrustes_align(const PosteriorDraws& draws, const OrthoBasis& basis,
                              const Eigen::MatrixXd& reference,
                              const std::string& provenance = "external");

// Default reference: right singular vectors of the posterior-mean fitted
// smooth matrix (subjects x PM), scaled so columns have unit quadrature norm
// on the pooled grid. Needs at least two draws.
Eigen::MatrixXd default_reference(const PosteriorDraws& draws, const OrthoBasis& basis);

// Point estimate: Euclidean mean of the rotated weight matrices,
// orthonormalized by SVD, plus its evaluation on the pooled grid.
struct FpcEstimate {
  Eigen::MatrixXd fpc_coef;  // PQ x K, orthonormal
  Eigen::MatrixXd fpc_eval;  // PM x K
};
FpcEstimate posterior_fpc_estimate(const AlignedDraws& aligned, const OrthoBasis& basis);

// Split-chain potential scale reduction factor. Chains are rows; returns NaN
// when the within-chain variance vanishes (undefined diagnostic).
double split_rhat(const Eigen::MatrixXd& chain_draws);

// Effective sample size across chains via initial-positive-sequence
// autocorrelation truncation.
double effective_sample_size(const Eigen::MatrixXd& chain_draws);

// R-hat over every scalar model parameter (aligned FPC weights and scores,
// plus all unaligned scalars).
struct ConvergenceSummary {
  std::vector<std::string> names;
  std::vector<double> rhat;
  double max_rhat = 0.0;  // over defined entries
  int n_undefined = 0;
  int n_flagged = 0;  // rhat > 1.05
};
ConvergenceSummary convergence_summary(const PosteriorDraws& draws,
                                       const AlignedDraws& aligned);

// Proportion of variance explained per truncation level, globally and per
// variable, with equal-tail 95% intervals across draws.
struct VarianceExplained {
  std::vector<int> truncations;
  Eigen::VectorXd global_mean, global_lo, global_hi;
  Eigen::MatrixXd per_var_mean, per_var_lo, per_var_hi;  // truncations x P
};
VarianceExplained variance_explained(const AlignedDraws& aligned,
                                     const std::vector<int>& truncations);

// Equal-tail interval helper (linear interpolation between order statistics).
double empirical_quantile(std::vector<double> values, double prob);

}  // namespace msfpca

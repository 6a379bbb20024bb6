#pragma once

#include <vector>

#include <Eigen/Core>

#include "msfpca/basis.hpp"
#include "msfpca/dataset.hpp"

namespace msfpca {

// Hyperparameters of the variance-component and smoothing priors.
// Inverse-gamma components use (shape, scale) with density proportional to
// x^{-shape-1} exp(-scale/x); gamma components use (shape, rate).
struct PriorConfig {
  double noise_shape = 0.01;
  double noise_scale = 0.01;
  double eigval_shape = 0.01;
  double eigval_scale = 0.01;
  double mean_smooth_shape = 0.01;
  double mean_smooth_rate = 0.01;
  double fpc_smooth_shape = 0.01;
  double fpc_smooth_rate = 0.01;
};

struct ModelConfig {
  int n_components = 1;  // K
  int n_basis = 20;      // Q
  int n_vars = 1;        // P
  double alpha = 0.1;    // penalty mix
  PriorConfig priors;

  void validate() const;
};

// One point of the parameter space in constrained (model) coordinates.
// Eigenvalues are stored ascending (the transform-friendly order); reporting
// flips to descending via reported().
struct ParameterState {
  Eigen::VectorXd noise_var;    // P, sigma_p^2 > 0
  Eigen::VectorXd mean_coef;    // P*Q, per-variable blocks of mean spline weights
  Eigen::VectorXd mean_smooth;  // P, smoothing parameters for the means
  Eigen::VectorXd eigvals;      // K, ascending
  Eigen::MatrixXd fpc_smooth;   // P x K, smoothing parameters for the FPCs
  Eigen::MatrixXd fpc_latent;   // PQ x K, unconstrained pre-image of the FPC weights
  Eigen::MatrixXd scores_raw;   // N x K, unit-scale scores

  // Derived: orthonormal polar factor and rescaled scores.
  Eigen::MatrixXd fpc_coef;  // PQ x K, orthonormal columns
  Eigen::MatrixXd scores;    // N x K, scores_raw * diag(sqrt(eigvals))

  void refresh_derived();  // recompute fpc_coef and scores; throws on rank deficiency

  // Copy with all component-indexed quantities flipped to descending
  // eigenvalue order (the reporting convention).
  ParameterState reported() const;

  int n_subjects() const { return static_cast<int>(scores_raw.rows()); }
  int n_components() const { return static_cast<int>(eigvals.size()); }
};

// Orthonormal factor of the polar decomposition, the closest orthonormal
// matrix to x in Frobenius norm. Throws NumericalError when x is
// rank-deficient (smallest eigenvalue of x^T x below 1e-12 times the largest).
Eigen::MatrixXd polar_orthonormalize(const Eigen::MatrixXd& x);

// Eigendecomposition pieces of x^T x reused by the gradient pullback.
struct PolarFactor {
  bool ok = false;
  Eigen::MatrixXd psi;      // orthonormal factor
  Eigen::MatrixXd evecs;    // K x K eigenvectors of x^T x
  Eigen::VectorXd evals;    // ascending eigenvalues of x^T x
  Eigen::MatrixXd sqrt_inv; // (x^T x)^{-1/2}

  // Adjoint of x -> psi: maps d(objective)/d(psi) to d(objective)/d(x).
  Eigen::MatrixXd pullback(const Eigen::MatrixXd& grad_psi,
                           const Eigen::MatrixXd& x) const;
};

PolarFactor polar_factor(const Eigen::MatrixXd& x);

// Joint posterior of the sparse multivariate FPCA model over a fixed
// dataset/basis/config, with the change of variables to an unconstrained
// vector and its analytic gradient.
//
// Unconstrained layout: log noise_var (P) | mean_coef (PQ) | log mean_smooth
// (P) | ordered-positive eigvals (K) | log fpc_smooth (PK, column-major) |
// fpc_latent (PQK, column-major) | scores_raw (NK, column-major).
class Posterior {
 public:
  Posterior(const SparseFunctionalDataset& data, const OrthoBasis& basis,
            const ModelConfig& config, int n_threads = 1);

  int dim() const { return dim_; }
  const ModelConfig& config() const { return config_; }
  const SparseFunctionalDataset& data() const { return data_; }
  const OrthoBasis& basis() const { return basis_; }
  const Eigen::MatrixXd& basis_at_times() const { return basis_eval_; }
  const Eigen::MatrixXd& penalty() const { return penalty_; }

  // Log joint posterior density in constrained coordinates, up to an
  // additive constant; -inf for invalid/non-finite states.
  double log_posterior(const ParameterState& state) const;

  // Gaussian log likelihood of variable p's block (complete with constants).
  double likelihood_block(int p, const ParameterState& state) const;

  // Sum of blocks in fixed variable order (compensated summation).
  double log_likelihood(const ParameterState& state) const;

  Eigen::VectorXd to_unconstrained(const ParameterState& state) const;
  ParameterState from_unconstrained(const Eigen::VectorXd& v) const;

  // Fitted values mu + scores.phi at every observation, stacked like y.
  Eigen::VectorXd fitted_values(const ParameterState& state) const;

  // Conditional log density of the FPC pre-image given everything else
  // (likelihood + smoothing penalty + standard normal prior), up to a
  // constant. Refreshes state.fpc_coef from state.fpc_latent; fills the
  // gradient with respect to the pre-image when grad_latent is non-null.
  // Returns -inf on rank deficiency.
  double fpc_conditional(ParameterState& state, Eigen::MatrixXd* grad_latent) const;

  int block_offset(int p) const { return block_offset_[static_cast<size_t>(p)]; }
  // Sum of b(t_l) b(t_l)^T over variable p's observations (fixed per dataset).
  const Eigen::MatrixXd& block_btb(int p) const { return block_btb_[static_cast<size_t>(p)]; }
  // (start, count) of subject i's contiguous run inside variable p's block;
  // start indexes the stacked arrays.
  const std::vector<std::pair<int, int>>& subject_spans(int p) const {
    return subject_spans_[static_cast<size_t>(p)];
  }

  // Log density on the unconstrained space (posterior + log Jacobian).
  double log_density(const Eigen::VectorXd& v) const;
  // Same, with the analytic gradient; returns -inf (grad zeroed) on invalid states.
  double log_density_gradient(const Eigen::VectorXd& v, Eigen::VectorXd& grad) const;

  ParameterState blank_state() const;

 private:
  struct BlockGrad {
    double loglik = 0.0;
    double g_noise_var = 0.0;
    Eigen::VectorXd g_mean_coef;  // Q
    Eigen::MatrixXd g_fpc_coef;   // Q x K
    Eigen::MatrixXd g_scores;     // N x K
  };

  double likelihood_block_impl(int p, const ParameterState& state) const;
  BlockGrad likelihood_block_grad(int p, const ParameterState& state) const;

  const SparseFunctionalDataset& data_;
  const OrthoBasis& basis_;
  ModelConfig config_;
  int n_threads_;
  int dim_ = 0;

  Eigen::MatrixXd basis_eval_;  // M x Q at pooled times
  Eigen::MatrixXd penalty_;     // Q x Q, P_alpha
  std::vector<int> block_offset_;
  std::vector<Eigen::MatrixXd> block_btb_;
  std::vector<std::vector<std::pair<int, int>>> subject_spans_;
};

}  // namespace msfpca

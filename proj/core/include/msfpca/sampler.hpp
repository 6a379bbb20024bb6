#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "msfpca/model.hpp"
#include "msfpca/rng.hpp"

namespace msfpca {

enum class SamplerMode { kFullHmc, kBlockedGibbs };

struct SamplerConfig {
  int n_chains = 4;
  int n_warmup = 2000;
  int n_samples = 1000;
  std::uint64_t seed = 1;
  SamplerMode mode = SamplerMode::kFullHmc;
  double target_accept = 0.8;
  int max_treedepth = 10;
  int n_threads = 1;  // chain-level parallelism

  void validate() const;
};

struct DrawDiagnostics {
  double accept_stat = 0.0;
  double step_size = 0.0;
  double log_density = 0.0;
  int treedepth = 0;
  int n_leapfrog = 0;
  bool divergent = false;
};

struct ChainStats {
  int divergences = 0;
  int max_treedepth_hits = 0;
  double mean_accept = 0.0;
  double step_size = 0.0;
};

// Ordered draws across chains, stored in the reporting convention
// (descending eigenvalues), together with everything needed to rebuild the
// fit context downstream.
struct PosteriorDraws {
  ModelConfig model_config;
  SamplerConfig sampler_config;
  int basis_degree = 3;
  int basis_quad_points = 10;
  ScalingRecord scaling;
  Eigen::VectorXd times;  // pooled fit grid on [0, 1]
  std::vector<std::string> subject_names;
  std::vector<std::string> variable_names;

  std::vector<std::vector<ParameterState>> chains;
  std::vector<std::vector<DrawDiagnostics>> diagnostics;
  std::vector<ChainStats> chain_stats;
  bool divergence_flag = false;  // >10% post-warmup divergences in some chain

  int n_chains() const { return static_cast<int>(chains.size()); }
  int n_draws_per_chain() const {
    return chains.empty() ? 0 : static_cast<int>(chains.front().size());
  }
  int n_total_draws() const { return n_chains() * n_draws_per_chain(); }
  const ParameterState& draw(int flat_index) const;

  OrthoBasis rebuild_basis() const;
};

// Generic differentiable log-density target for the gradient kernel.
class LogDensityTarget {
 public:
  virtual ~LogDensityTarget() = default;
  virtual int dim() const = 0;
  virtual double value_and_gradient(const Eigen::VectorXd& v,
                                    Eigen::VectorXd& grad) const = 0;
};

// One no-U-turn transition with fixed step size and diagonal metric.
// (Valid MCMC on its own; adaptation lives in the warmup driver.)
class NutsKernel {
 public:
  NutsKernel(const LogDensityTarget& target, int max_treedepth);

  void set_step_size(double eps) { step_size_ = eps; }
  double step_size() const { return step_size_; }
  void set_inv_metric(const Eigen::VectorXd& inv_metric);
  const Eigen::VectorXd& inv_metric() const { return inv_metric_; }

  // Heuristic initial step size: doubles/halves until the one-step
  // acceptance ratio crosses 1/2.
  void init_step_size(const Eigen::VectorXd& v, Rng& rng);

  Eigen::VectorXd step(const Eigen::VectorXd& v, Rng& rng, DrawDiagnostics& info);

 private:
  struct Tree;
  void leapfrog(Eigen::VectorXd& v, Eigen::VectorXd& r, Eigen::VectorXd& grad,
                double& logp, double eps) const;
  double hamiltonian(double logp, const Eigen::VectorXd& r) const;
  bool no_uturn(const Tree& tree) const;
  Tree build_tree(const Eigen::VectorXd& v, const Eigen::VectorXd& r,
                  const Eigen::VectorXd& grad, double logp, double log_u, int dir,
                  int depth, double h0, Rng& rng) const;

  const LogDensityTarget& target_;
  int max_treedepth_;
  double step_size_ = 1.0;
  Eigen::VectorXd inv_metric_;
};

// Nesterov dual averaging toward a target acceptance statistic.
class DualAveraging {
 public:
  DualAveraging(double target_accept, double initial_step);
  void restart(double initial_step);
  double update(double accept_stat);  // returns the step size to use next
  double adapted() const;             // smoothed final step size

 private:
  double target_;
  double mu_ = 0.0;
  double log_step_ = 0.0;
  double log_step_avg_ = 0.0;
  double h_avg_ = 0.0;
  int iter_ = 0;
};

// Appendix-style conjugate updates (centered coordinates). Each draws from
// the exact full conditional at the current state and keeps the derived
// fields consistent.
void gibbs_noise_var(const Posterior& post, ParameterState& state, Rng& rng);
void gibbs_eigenvalues(const Posterior& post, ParameterState& state, Rng& rng);
void gibbs_smoothing(const Posterior& post, ParameterState& state, Rng& rng);
void gibbs_mean_coef(const Posterior& post, ParameterState& state, Rng& rng);
void gibbs_scores(const Posterior& post, ParameterState& state, Rng& rng);

// Collapsed mean-weight draw: scores integrated out of the conditional, so
// the (mean, scores) pair moves as one Gaussian block. Followed by
// gibbs_scores this is an exact joint draw and removes the slow alternation
// between the two.
void gibbs_mean_coef_collapsed(const Posterior& post, ParameterState& state, Rng& rng);

// Interweaving (non-centered) eigenvalue move: random-walk on log lambda_k
// holding the unit-scale scores fixed, so lambda and the scores move along
// the funnel direction together. Rejected when the proposal breaks the
// stored ascending order. Complements the conjugate centered update.
void eigenvalue_interweaving_move(const Posterior& post, ParameterState& state,
                                  Rng& rng, double log_step = 0.5);

// Fit-preserving rotation move: a Givens rotation of an adjacent component
// pair applied jointly to the FPC pre-image, the weights, and the scores.
// Fitted trajectories are exactly invariant, so the Metropolis ratio reduces
// to the score prior and the smoothing penalties. Mixes the rotation ridge
// that appears when neighboring eigenvalues nearly tie.
void rotation_move(const Posterior& post, ParameterState& state, Rng& rng,
                   double angle_sd = 0.4);

// One full blocked-mode sweep (all conjugate blocks, the rotation move, and
// no-U-turn moves of the FPC pre-image in the target's preconditioned
// coordinates). The kernel must have been built over `target`.
void blocked_sweep(const Posterior& post, ParameterState& state,
                   class FpcConditionalTarget& target, NutsKernel& kernel, Rng& rng,
                   DrawDiagnostics& info);

// Conditional target over the unconstrained FPC pre-image only, with all
// other parameters held fixed; used by the blocked mode and by the joint
// distribution tests.
//
// The kernel runs in preconditioned coordinates u = L^T x per
// (variable, component) block, where L L^T = I + H_pk P_alpha +
// mean(xi_k^2) B^T B / sigma_p^2 is the curvature of that block given the
// conditioning variables. The transform is refreshed from the state each
// sweep; since it never depends on x itself, every transition stays an
// exact conditional update.
class FpcConditionalTarget : public LogDensityTarget {
 public:
  FpcConditionalTarget(const Posterior& post, const ParameterState& state);
  int dim() const override;
  double value_and_gradient(const Eigen::VectorXd& u,
                            Eigen::VectorXd& grad) const override;
  void set_state(const ParameterState& state);

  Eigen::VectorXd to_preconditioned(const Eigen::MatrixXd& latent) const;
  Eigen::MatrixXd from_preconditioned(const Eigen::VectorXd& u) const;

 private:
  void refresh_preconditioner();

  const Posterior& post_;
  const ParameterState* state_;
  std::vector<Eigen::MatrixXd> block_lower_;  // per (k, p), Q x Q Cholesky factors
};

// Full posterior target on the unconstrained space.
class PosteriorTarget : public LogDensityTarget {
 public:
  explicit PosteriorTarget(const Posterior& post) : post_(post) {}
  int dim() const override { return post_.dim(); }
  double value_and_gradient(const Eigen::VectorXd& v,
                            Eigen::VectorXd& grad) const override {
    return post_.log_density_gradient(v, grad);
  }

 private:
  const Posterior& post_;
};

// Random overdispersed initial point (uniform on [-2, 2] per unconstrained
// coordinate, redrawn until the density is finite).
Eigen::VectorXd random_init(const Posterior& post, Rng& rng);

// Data-driven start: ridge fit of the means, eigendecomposition of the
// per-subject projected-residual covariance for the FPC weights and
// eigenvalues, conditional-mean scores, all independently jittered per
// chain. Keeps short-budget chains out of metastable far-from-data modes.
ParameterState data_driven_init(const Posterior& post, Rng& rng, double jitter = 0.15);

// Run the sampler: n_chains x n_samples draws, deterministic given the seed.
PosteriorDraws run_sampler(const SamplerConfig& config,
                           const SparseFunctionalDataset& data,
                           const OrthoBasis& basis, const ModelConfig& model_config,
                           int likelihood_threads = 1);

}  // namespace msfpca

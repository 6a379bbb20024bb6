#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "msfpca/dataset.hpp"
#include "msfpca/sampler.hpp"

namespace msfpca {

// Synthetic-study configuration. The trigonometric mean/FPC families come in
// a multivariate flavor (shared scores across P variables, alternating signs)
// and a univariate flavor; both use eigenvalues 0.5^{k-1} by default and
// noise variance sum(eigenvalues)/snr.
struct SimScenario {
  bool univariate = false;
  int n_vars = 3;           // P (forced to 1 by the univariate design)
  int n_components = 3;     // K of both the generator and the fit
  int n_subjects = 100;     // I
  int grid_size = 100;      // M potential observation points
  int obs_min = 3;
  int obs_max = 7;
  double snr = 4.0;
  Eigen::VectorXd eigenvalues;  // descending; empty -> 0.5^{k-1}
  std::uint64_t seed = 1;
  int n_replicates = 20;

  // Engine settings per replicate.
  int n_basis = 20;
  SamplerConfig sampler;

  // Optional external predictor scored by the same metrics (subprocess,
  // CSV in / CSV out). Empty: use the engine.
  std::string external_command;

  void validate() const;
  Eigen::VectorXd effective_eigenvalues() const;
  double noise_variance() const;  // sum(eigenvalues)/snr
};

// Latent truth accompanying a generated dataset; everything on the design
// grid in design units ([0, 1]).
struct GroundTruth {
  Eigen::VectorXd grid;                  // M design times
  Eigen::MatrixXd mean_true;             // M x P
  std::vector<Eigen::MatrixXd> fpc_true; // per variable, M x K
  std::vector<Eigen::MatrixXd> smooth;   // per variable, I x M latent trajectories
  Eigen::MatrixXd scores_true;           // I x K
  Eigen::VectorXd noise_var_true;        // P

  // FPC evaluations stacked to PM x K, for alignment to the truth.
  Eigen::MatrixXd fpc_matrix() const;
};

// Design mean/FPC families.
double design_mean_multivariate(int p, double t);
double design_fpc_multivariate(int p, int k, int n_vars, double t);
double design_mean_univariate(double t);
double design_fpc_univariate(int k, double t);

// Draw a dataset from the scenario (records are in design units; run them
// through standardize() before fitting). The per-(subject, variable)
// observation count is uniform on [obs_min, obs_max], subsampled without
// replacement from the grid with independent substreams.
std::pair<std::vector<LongRecord>, GroundTruth> generate_scenario(
    const SimScenario& scenario, std::uint64_t replicate);

// Integrated squared error of per-subject trajectory estimates against the
// latent truth, and its ratio to the subject-mean baseline.
struct TrajectoryAccuracy {
  Eigen::VectorXd ise;           // per variable
  Eigen::VectorXd baseline_ise;  // per variable (subject-mean estimator)
  Eigen::VectorXd rise;          // per variable
  std::vector<int> excluded;     // subjects without observations, per variable
};
TrajectoryAccuracy trajectory_accuracy(
    const std::vector<Eigen::MatrixXd>& predicted_mean,  // per var, I x M
    const GroundTruth& truth, const std::vector<LongRecord>& records,
    const std::vector<std::string>& subject_order,
    const std::vector<std::string>& variable_order,
    const std::vector<int>& grid_keep);

// Quadrature ISE of a single estimated function on the grid (uniform 1/M
// weights).
double function_ise(const Eigen::VectorXd& estimate, const Eigen::VectorXd& truth);

// Mean of cover indicators.
double coverage_proportion(const Eigen::MatrixXd& lo, const Eigen::MatrixXd& hi,
                           const Eigen::MatrixXd& truth);

struct ReplicateMetrics {
  int replicate = 0;
  bool failed = false;
  std::string error;
  Eigen::VectorXd rise;                 // per variable
  Eigen::VectorXd trajectory_coverage;  // per variable
  Eigen::VectorXd mean_ise;             // per variable
  Eigen::MatrixXd fpc_ise;              // K x P
  Eigen::VectorXd mean_coverage;        // per variable
  Eigen::MatrixXd fpc_coverage;         // K x P
  double max_rhat = 0.0;
  int rhat_flagged = 0;
  bool divergence_flag = false;
  double seconds_total = 0.0;
};

struct StudyReport {
  SimScenario scenario;
  std::vector<ReplicateMetrics> replicates;

  int n_ok() const;
};

// Full replicated generate -> fit -> align -> predict -> score pipeline.
// Replicates run in parallel batches of `n_workers`; results are assembled
// in replicate order and are deterministic for a fixed seed.
StudyReport run_study(const SimScenario& scenario, int n_workers = 1);

// Wall-clock scaling run: one fit per subject count, timing only.
struct TimingRow {
  int n_subjects = 0;
  double seconds = 0.0;
};
std::vector<TimingRow> run_timing(const SimScenario& scenario,
                                  const std::vector<int>& subject_counts);

}  // namespace msfpca

#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>

#include "msfpca/postprocess.hpp"
#include "msfpca/sampler.hpp"

namespace msfpca {

struct PredictOptions {
  bool add_observation_noise = false;  // widen intervals to observation level
  double interval_mass = 0.95;         // equal-tail
};

// Per-draw latent trajectories for a set of subjects, in original data units.
struct TrajectoryDraws {
  std::vector<std::string> subjects;
  std::vector<std::string> variables;
  Eigen::VectorXd times;  // original units
  // draws[subject][variable]: n_draws x n_times
  std::vector<std::vector<Eigen::MatrixXd>> draws;
};

// Point estimates and equal-tail intervals, same layout as the CSV output.
struct TrajectorySummary {
  std::vector<std::string> subjects;
  std::vector<std::string> variables;
  Eigen::VectorXd times;                            // original units
  std::vector<Eigen::MatrixXd> mean, lo, hi;        // per variable: subjects x times
};

TrajectorySummary summarize(const TrajectoryDraws& draws, double interval_mass = 0.95);

// Per-draw FPC/mean evaluations cached once for a fixed set of times.
class ReconstructionCache {
 public:
  ReconstructionCache(const PosteriorDraws& draws, const OrthoBasis& basis,
                      const Eigen::VectorXd& unit_times,
                      const AlignedDraws* aligned = nullptr);

  int n_draws() const { return n_draws_; }
  int n_times() const { return static_cast<int>(unit_times_.size()); }
  const PosteriorDraws& source() const { return *draws_; }
  const AlignedDraws* aligned() const { return aligned_; }

  // Standardized smooth mu^(p) + Phi^(p) xi at the cached times.
  Eigen::VectorXd smooth(int draw, int p, const Eigen::VectorXd& xi) const;
  // Scores of a fitted subject for one draw (aligned when available).
  Eigen::VectorXd stored_scores(int draw, int subject) const;

 private:
  const PosteriorDraws* draws_;
  const AlignedDraws* aligned_;
  Eigen::VectorXd unit_times_;
  int n_draws_ = 0;
  std::vector<std::vector<Eigen::MatrixXd>> phi_;  // [draw][p], times x K
  std::vector<std::vector<Eigen::VectorXd>> mu_;   // [draw][p]
};

// Latent trajectories of fitted subjects at arbitrary times (original
// units, inside the fitted range). Destandardizes through draws.scaling.
// Aligned draws may be supplied: predictions are identical either way.
TrajectoryDraws static_predict(const PosteriorDraws& draws, const OrthoBasis& basis,
                               const std::vector<int>& subject_indices,
                               const Eigen::VectorXd& times_original,
                               const PredictOptions& options = {},
                               const AlignedDraws* aligned = nullptr,
                               Rng* noise_rng = nullptr);

// Observations of one new subject in original units, per fitted variable.
struct NewSubjectObservations {
  std::vector<Eigen::VectorXd> times;   // per variable
  std::vector<Eigen::VectorXd> values;  // per variable

  NewSubjectObservations() = default;
  explicit NewSubjectObservations(int n_vars) : times(n_vars), values(n_vars) {}
  // Keep only observations with time <= cutoff.
  NewSubjectObservations truncated(double cutoff) const;
  double min_time() const;
  bool empty() const;
};

// Conditional posterior of a new subject's score vector given one draw's
// population parameters; exact normal conditional.
struct ScoreConditional {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};
ScoreConditional score_conditional(const ParameterState& state,
                                   const std::vector<Eigen::MatrixXd>& basis_rows,
                                   const std::vector<Eigen::VectorXd>& values_std);

// One score draw per posterior draw for a new subject (its data standardized
// through the fit's scaling). Aligned draws rotate the conditional
// consistently.
Eigen::MatrixXd conditional_score_sample(const PosteriorDraws& draws,
                                         const OrthoBasis& basis,
                                         const NewSubjectObservations& obs, Rng& rng,
                                         const AlignedDraws* aligned = nullptr);

// Conditional score sampling composed with reconstruction over
// [min observed, cutoff + horizon]; later cutoffs reuse the same draws.
TrajectoryDraws dynamic_predict(const PosteriorDraws& draws, const OrthoBasis& basis,
                                const NewSubjectObservations& obs, double cutoff,
                                double horizon, const Eigen::VectorXd& times_original,
                                Rng& rng, const PredictOptions& options = {},
                                const AlignedDraws* aligned = nullptr);

}  // namespace msfpca

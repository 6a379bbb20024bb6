#include "msfpca/predict.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "msfpca/errors.hpp"
#include "msfpca/mvn.hpp"

namespace msfpca {

TrajectorySummary summarize(const TrajectoryDraws& draws, double interval_mass) {
  const double tail = 0.5 * (1.0 - interval_mass);
  TrajectorySummary out;
  out.subjects = draws.subjects;
  out.variables = draws.variables;
  out.times = draws.times;
  const int n_sub = static_cast<int>(draws.subjects.size());
  const int n_var = static_cast<int>(draws.variables.size());
  const int n_time = static_cast<int>(draws.times.size());
  out.mean.assign(static_cast<size_t>(n_var), Eigen::MatrixXd::Zero(n_sub, n_time));
  out.lo = out.mean;
  out.hi = out.mean;
  for (int s = 0; s < n_sub; ++s) {
    for (int p = 0; p < n_var; ++p) {
      const Eigen::MatrixXd& d = draws.draws[static_cast<size_t>(s)][static_cast<size_t>(p)];
      for (int m = 0; m < n_time; ++m) {
        out.mean[static_cast<size_t>(p)](s, m) = d.col(m).mean();
        std::vector<double> col(d.col(m).data(), d.col(m).data() + d.rows());
        out.lo[static_cast<size_t>(p)](s, m) = empirical_quantile(col, tail);
        out.hi[static_cast<size_t>(p)](s, m) = empirical_quantile(std::move(col), 1.0 - tail);
      }
    }
  }
  return out;
}

ReconstructionCache::ReconstructionCache(const PosteriorDraws& draws,
                                         const OrthoBasis& basis,
                                         const Eigen::VectorXd& unit_times,
                                         const AlignedDraws* aligned)
    : draws_(&draws), aligned_(aligned), unit_times_(unit_times) {
  n_draws_ = draws.n_total_draws();
  const int q = draws.model_config.n_basis;
  const int p_count = draws.model_config.n_vars;
  const Eigen::MatrixXd basis_eval = basis.evaluate(unit_times);
  phi_.resize(static_cast<size_t>(n_draws_));
  mu_.resize(static_cast<size_t>(n_draws_));
  for (int s = 0; s < n_draws_; ++s) {
    const ParameterState& state = draws.draw(s);
    const Eigen::MatrixXd& coef =
        aligned ? aligned->fpc_coef[static_cast<size_t>(s)] : state.fpc_coef;
    auto& phis = phi_[static_cast<size_t>(s)];
    auto& mus = mu_[static_cast<size_t>(s)];
    phis.resize(static_cast<size_t>(p_count));
    mus.resize(static_cast<size_t>(p_count));
    for (int p = 0; p < p_count; ++p) {
      phis[static_cast<size_t>(p)] = basis_eval * coef.middleRows(p * q, q);
      mus[static_cast<size_t>(p)] = basis_eval * state.mean_coef.segment(p * q, q);
    }
  }
}

Eigen::VectorXd ReconstructionCache::smooth(int draw, int p,
                                            const Eigen::VectorXd& xi) const {
  return mu_[static_cast<size_t>(draw)][static_cast<size_t>(p)] +
         phi_[static_cast<size_t>(draw)][static_cast<size_t>(p)] * xi;
}

Eigen::VectorXd ReconstructionCache::stored_scores(int draw, int subject) const {
  if (aligned_) {
    return aligned_->scores[static_cast<size_t>(draw)].row(subject).transpose();
  }
  return draws_->draw(draw).scores.row(subject).transpose();
}

namespace {

Eigen::VectorXd to_unit_times(const Eigen::VectorXd& times_original,
                              const ScalingRecord& scaling) {
  Eigen::VectorXd unit(times_original.size());
  for (Eigen::Index m = 0; m < times_original.size(); ++m) {
    const double u = scaling.time_to_unit(times_original[m]);
    if (!(u >= 0.0 && u <= 1.0)) {
      throw DataError("prediction time " + std::to_string(times_original[m]) +
                      " outside the fitted range; no extrapolation");
    }
    unit[m] = u;
  }
  return unit;
}

}  // namespace

TrajectoryDraws static_predict(const PosteriorDraws& draws, const OrthoBasis& basis,
                               const std::vector<int>& subject_indices,
                               const Eigen::VectorXd& times_original,
                               const PredictOptions& options,
                               const AlignedDraws* aligned, Rng* noise_rng) {
  const ScalingRecord& scaling = draws.scaling;
  const Eigen::VectorXd unit = to_unit_times(times_original, scaling);
  const ReconstructionCache cache(draws, basis, unit, aligned);
  const int p_count = draws.model_config.n_vars;
  const int n_time = static_cast<int>(unit.size());
  const int total = cache.n_draws();

  if (options.add_observation_noise && noise_rng == nullptr) {
    throw ConfigError("observation-noise prediction needs an RNG");
  }

  TrajectoryDraws out;
  out.variables = draws.variable_names;
  out.times = times_original;
  for (int idx : subject_indices) {
    if (idx < 0 || idx >= static_cast<int>(draws.subject_names.size())) {
      throw ConfigError("subject index outside the fitted set");
    }
    out.subjects.push_back(draws.subject_names[static_cast<size_t>(idx)]);
  }
  out.draws.resize(out.subjects.size());
  for (size_t si = 0; si < subject_indices.size(); ++si) {
    const int subject = subject_indices[si];
    auto& per_var = out.draws[si];
    per_var.assign(static_cast<size_t>(p_count), Eigen::MatrixXd(total, n_time));
    for (int s = 0; s < total; ++s) {
      const Eigen::VectorXd xi = cache.stored_scores(s, subject);
      for (int p = 0; p < p_count; ++p) {
        Eigen::VectorXd smooth = cache.smooth(s, p, xi);
        if (options.add_observation_noise) {
          const double sd = std::sqrt(draws.draw(s).noise_var[p]);
          for (int m = 0; m < n_time; ++m) smooth[m] += sd * noise_rng->normal();
        }
        for (int m = 0; m < n_time; ++m) {
          per_var[static_cast<size_t>(p)](s, m) =
              destandardize_value(smooth[m], scaling, p);
        }
      }
    }
  }
  return out;
}

NewSubjectObservations NewSubjectObservations::truncated(double cutoff) const {
  NewSubjectObservations out(static_cast<int>(times.size()));
  for (size_t p = 0; p < times.size(); ++p) {
    std::vector<double> t, v;
    for (Eigen::Index j = 0; j < times[p].size(); ++j) {
      if (times[p][j] <= cutoff) {
        t.push_back(times[p][j]);
        v.push_back(values[p][j]);
      }
    }
    out.times[p] = Eigen::Map<const Eigen::VectorXd>(t.data(), static_cast<Eigen::Index>(t.size()));
    out.values[p] = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  return out;
}

double NewSubjectObservations::min_time() const {
  double lo = std::numeric_limits<double>::infinity();
  for (const auto& t : times) {
    if (t.size() > 0) lo = std::min(lo, t.minCoeff());
  }
  return lo;
}

bool NewSubjectObservations::empty() const {
  for (const auto& t : times) {
    if (t.size() > 0) return false;
  }
  return true;
}

namespace {

// Remark-1 style conditional with an arbitrary score prior precision; the
// diagonal case is the model conditional, the rotated case arises when
// sampling against aligned draws.
ScoreConditional score_conditional_impl(const Eigen::MatrixXd& fpc_coef,
                                        const Eigen::VectorXd& mean_coef,
                                        const Eigen::VectorXd& noise_var,
                                        const Eigen::MatrixXd& prior_precision,
                                        const std::vector<Eigen::MatrixXd>& basis_rows,
                                        const std::vector<Eigen::VectorXd>& values_std) {
  const int k = static_cast<int>(fpc_coef.cols());
  const int q = static_cast<int>(mean_coef.size()) / static_cast<int>(noise_var.size());
  Eigen::MatrixXd precision = prior_precision;
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(k);
  for (size_t p = 0; p < basis_rows.size(); ++p) {
    const Eigen::MatrixXd& b = basis_rows[p];
    if (b.rows() == 0) continue;
    const int pi = static_cast<int>(p);
    const Eigen::MatrixXd phi = b * fpc_coef.middleRows(pi * q, q);
    const Eigen::VectorXd resid = values_std[p] - b * mean_coef.segment(pi * q, q);
    const double inv_s2 = 1.0 / noise_var[pi];
    precision.noalias() += phi.transpose() * phi * inv_s2;
    rhs.noalias() += phi.transpose() * resid * inv_s2;
  }
  ScoreConditional out;
  const Eigen::MatrixXd sym = 0.5 * (precision + precision.transpose());
  Eigen::LLT<Eigen::MatrixXd> llt(sym);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("score conditional precision not positive definite");
  }
  out.cov = llt.solve(Eigen::MatrixXd::Identity(k, k));
  out.mean = llt.solve(rhs);
  return out;
}

}  // namespace

ScoreConditional score_conditional(const ParameterState& state,
                                   const std::vector<Eigen::MatrixXd>& basis_rows,
                                   const std::vector<Eigen::VectorXd>& values_std) {
  return score_conditional_impl(state.fpc_coef, state.mean_coef, state.noise_var,
                                state.eigvals.cwiseInverse().asDiagonal(), basis_rows,
                                values_std);
}

Eigen::MatrixXd conditional_score_sample(const PosteriorDraws& draws,
                                         const OrthoBasis& basis,
                                         const NewSubjectObservations& obs, Rng& rng,
                                         const AlignedDraws* aligned) {
  const ScalingRecord& scaling = draws.scaling;
  const int p_count = draws.model_config.n_vars;
  const int k = draws.model_config.n_components;
  if (static_cast<int>(obs.times.size()) != p_count) {
    throw ConfigError("new-subject observations must cover every fitted variable slot");
  }
  // Standardize once; basis rows are shared across draws.
  std::vector<Eigen::MatrixXd> basis_rows(static_cast<size_t>(p_count));
  std::vector<Eigen::VectorXd> values_std(static_cast<size_t>(p_count));
  for (int p = 0; p < p_count; ++p) {
    const Eigen::VectorXd& t = obs.times[static_cast<size_t>(p)];
    basis_rows[static_cast<size_t>(p)] = basis.evaluate(to_unit_times(t, scaling));
    values_std[static_cast<size_t>(p)].resize(t.size());
    for (Eigen::Index j = 0; j < t.size(); ++j) {
      values_std[static_cast<size_t>(p)][j] =
          standardize_value(obs.values[static_cast<size_t>(p)][j], scaling, p);
    }
  }
  const int total = draws.n_total_draws();
  Eigen::MatrixXd out(total, k);
  for (int s = 0; s < total; ++s) {
    const ParameterState& state = draws.draw(s);
    ScoreConditional cond;
    if (aligned) {
      // Rotated coordinates: prior precision becomes R^T Lambda^{-1} R.
      const Eigen::MatrixXd& rot = aligned->rotations[static_cast<size_t>(s)];
      const Eigen::MatrixXd prior_precision =
          rot.transpose() * state.eigvals.cwiseInverse().asDiagonal() * rot;
      cond = score_conditional_impl(aligned->fpc_coef[static_cast<size_t>(s)],
                                    state.mean_coef, state.noise_var, prior_precision,
                                    basis_rows, values_std);
    } else {
      cond = score_conditional(state, basis_rows, values_std);
    }
    out.row(s) = mvn_sample(cond.mean, cond.cov, rng).transpose();
  }
  return out;
}

TrajectoryDraws dynamic_predict(const PosteriorDraws& draws, const OrthoBasis& basis,
                                const NewSubjectObservations& obs, double cutoff,
                                double horizon, const Eigen::VectorXd& times_original,
                                Rng& rng, const PredictOptions& options,
                                const AlignedDraws* aligned) {
  if (horizon < 0.0) throw ConfigError("horizon must be nonnegative");
  const NewSubjectObservations used = obs.truncated(cutoff);
  if (used.empty()) throw DataError("no observations at or before the cutoff");
  if (cutoff < used.min_time()) {
    throw DataError("cutoff precedes the earliest observation");
  }
  const ScalingRecord& scaling = draws.scaling;
  const double window_lo = used.min_time();
  const double window_hi = cutoff + horizon;
  if (scaling.time_to_unit(window_hi) > 1.0 + 1e-12) {
    throw DataError("prediction horizon extends beyond the fitted time range");
  }

  std::vector<double> kept;
  for (Eigen::Index m = 0; m < times_original.size(); ++m) {
    const double t = times_original[m];
    if (t >= window_lo - 1e-12 && t <= window_hi + 1e-12) kept.push_back(t);
  }
  const Eigen::VectorXd window_times =
      Eigen::Map<const Eigen::VectorXd>(kept.data(), static_cast<Eigen::Index>(kept.size()));

  const Eigen::MatrixXd xi_draws = conditional_score_sample(draws, basis, used, rng, aligned);
  const Eigen::VectorXd unit = to_unit_times(window_times, scaling);
  const ReconstructionCache cache(draws, basis, unit, aligned);

  const int p_count = draws.model_config.n_vars;
  const int total = cache.n_draws();
  TrajectoryDraws out;
  out.subjects = {"new"};
  out.variables = draws.variable_names;
  out.times = window_times;
  out.draws.resize(1);
  out.draws[0].assign(static_cast<size_t>(p_count),
                      Eigen::MatrixXd(total, window_times.size()));
  for (int s = 0; s < total; ++s) {
    const Eigen::VectorXd xi = xi_draws.row(s).transpose();
    for (int p = 0; p < p_count; ++p) {
      Eigen::VectorXd smooth = cache.smooth(s, p, xi);
      if (options.add_observation_noise) {
        const double sd = std::sqrt(draws.draw(s).noise_var[p]);
        for (Eigen::Index m = 0; m < smooth.size(); ++m) smooth[m] += sd * rng.normal();
      }
      for (Eigen::Index m = 0; m < smooth.size(); ++m) {
        out.draws[0][static_cast<size_t>(p)](s, m) =
            destandardize_value(smooth[m], scaling, p);
      }
    }
  }
  return out;
}

}  // namespace msfpca

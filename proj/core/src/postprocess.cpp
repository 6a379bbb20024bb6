#include "msfpca/postprocess.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "msfpca/errors.hpp"

namespace msfpca {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Deterministic SVD orientation: largest-magnitude entry of each left
// singular vector is made positive, with the matching right vector flipped.
void fix_svd_signs(Eigen::MatrixXd& u, Eigen::MatrixXd& v) {
  for (Eigen::Index j = 0; j < u.cols(); ++j) {
    Eigen::Index imax = 0;
    u.col(j).cwiseAbs().maxCoeff(&imax);
    if (u(imax, j) < 0.0) {
      u.col(j) = -u.col(j);
      v.col(j) = -v.col(j);
    }
  }
}

}  // namespace

Eigen::MatrixXd evaluate_fpc_matrix(const Eigen::MatrixXd& basis_eval,
                                    const Eigen::MatrixXd& fpc_coef, int n_vars) {
  const int m = static_cast<int>(basis_eval.rows());
  const int q = static_cast<int>(basis_eval.cols());
  const int k = static_cast<int>(fpc_coef.cols());
  Eigen::MatrixXd out(n_vars * m, k);
  for (int p = 0; p < n_vars; ++p) {
    out.middleRows(p * m, m) = basis_eval * fpc_coef.middleRows(p * q, q);
  }
  return out;
}

Eigen::MatrixXd procrustes_rotation(const Eigen::MatrixXd& fpc_eval,
                                    const Eigen::MatrixXd& reference) {
  if (fpc_eval.rows() != reference.rows() || fpc_eval.cols() != reference.cols()) {
    throw ConfigError("reference dimensions do not match FPC evaluation");
  }
  const Eigen::MatrixXd cross = fpc_eval.transpose() * reference;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(cross,
                                        Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::MatrixXd u = svd.matrixU();
  Eigen::MatrixXd v = svd.matrixV();
  fix_svd_signs(u, v);
  return u * v.transpose();
}

AlignedDraws procrustes_align(const PosteriorDraws& draws, const OrthoBasis& basis,
                              const Eigen::MatrixXd& reference,
                              const std::string& provenance) {
  if (!reference.allFinite()) throw DataError("non-finite alignment reference");
  const int n_vars = draws.model_config.n_vars;
  const Eigen::MatrixXd basis_eval = basis.evaluate(draws.times);

  AlignedDraws out;
  out.source = &draws;
  out.reference = reference;
  out.reference_provenance = provenance;
  const int total = draws.n_total_draws();
  out.rotations.reserve(static_cast<size_t>(total));
  out.fpc_coef.reserve(static_cast<size_t>(total));
  out.scores.reserve(static_cast<size_t>(total));
  for (int s = 0; s < total; ++s) {
    const ParameterState& state = draws.draw(s);
    const Eigen::MatrixXd fpc_eval =
        evaluate_fpc_matrix(basis_eval, state.fpc_coef, n_vars);
    const Eigen::MatrixXd rot = procrustes_rotation(fpc_eval, reference);
    out.rotations.push_back(rot);
    out.fpc_coef.push_back(state.fpc_coef * rot);
    // Row-stacked scores: xi_i -> R^T xi_i is Xi -> Xi R.
    out.scores.push_back(state.scores * rot);
  }
  return out;
}

Eigen::MatrixXd default_reference(const PosteriorDraws& draws, const OrthoBasis& basis) {
  const int total = draws.n_total_draws();
  if (total < 2) throw ConfigError("default reference needs at least two draws");
  const int n_vars = draws.model_config.n_vars;
  const int q = draws.model_config.n_basis;
  const int k = draws.model_config.n_components;
  const int m = static_cast<int>(draws.times.size());
  const int n = static_cast<int>(draws.subject_names.size());
  const Eigen::MatrixXd basis_eval = basis.evaluate(draws.times);

  // Posterior-mean fitted smooths, subjects x PM.
  Eigen::MatrixXd fitted = Eigen::MatrixXd::Zero(n, n_vars * m);
  for (int s = 0; s < total; ++s) {
    const ParameterState& state = draws.draw(s);
    for (int p = 0; p < n_vars; ++p) {
      const Eigen::MatrixXd phi = basis_eval * state.fpc_coef.middleRows(p * q, q);
      const Eigen::VectorXd mu = basis_eval * state.mean_coef.segment(p * q, q);
      // rows: subjects; smooth_i = mu + phi * xi_i.
      fitted.middleCols(p * m, m).noalias() += state.scores * phi.transpose();
      fitted.middleCols(p * m, m).rowwise() += mu.transpose();
    }
  }
  fitted /= static_cast<double>(total);

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(fitted, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.rank() < 1 || svd.matrixV().cols() < k) {
    throw NumericalError("posterior mean matrix has rank below K");
  }
  Eigen::MatrixXd u = svd.matrixU();
  Eigen::MatrixXd v = svd.matrixV();
  fix_svd_signs(v, u);  // orient by the PM-dimensional vectors
  // Unit quadrature norm on the pooled grid (uniform weights 1/M).
  return v.leftCols(k) * std::sqrt(static_cast<double>(m));
}

FpcEstimate posterior_fpc_estimate(const AlignedDraws& aligned, const OrthoBasis& basis) {
  if (aligned.n_draws() == 0) throw ConfigError("no aligned draws");
  const PosteriorDraws& draws = *aligned.source;
  Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(aligned.fpc_coef.front().rows(),
                                               aligned.fpc_coef.front().cols());
  for (const auto& w : aligned.fpc_coef) mean += w;
  mean /= static_cast<double>(aligned.n_draws());

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(mean, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const double tiny = 1e-10 * svd.singularValues()[0];
  if (svd.singularValues().minCoeff() <= tiny) {
    throw NumericalError("mean of rotated weights is rank-deficient (severe multimodality)");
  }
  Eigen::MatrixXd u = svd.matrixU();
  Eigen::MatrixXd v = svd.matrixV();
  fix_svd_signs(u, v);
  FpcEstimate est;
  est.fpc_coef = u * v.transpose();
  est.fpc_eval = evaluate_fpc_matrix(basis.evaluate(draws.times), est.fpc_coef,
                                     draws.model_config.n_vars);
  return est;
}

double split_rhat(const Eigen::MatrixXd& chain_draws) {
  const int n_chains = static_cast<int>(chain_draws.rows());
  const int len = static_cast<int>(chain_draws.cols());
  if (n_chains < 1 || len < 4) return kNaN;
  const int half = len / 2;
  const int m = 2 * n_chains;  // split chains
  Eigen::VectorXd means(m), vars(m);
  for (int c = 0; c < n_chains; ++c) {
    for (int s = 0; s < 2; ++s) {
      const auto seg = chain_draws.row(c).segment(s * half, half);
      const double mu = seg.mean();
      means[2 * c + s] = mu;
      vars[2 * c + s] = (seg.array() - mu).square().sum() / (half - 1);
    }
  }
  const double w = vars.mean();
  if (!(w > 0.0)) return kNaN;
  const double grand = means.mean();
  const double b = static_cast<double>(half) / (m - 1) *
                   (means.array() - grand).square().sum();
  const double var_plus = (half - 1.0) / half * w + b / half;
  return std::sqrt(var_plus / w);
}

double effective_sample_size(const Eigen::MatrixXd& chain_draws) {
  const int n_chains = static_cast<int>(chain_draws.rows());
  const int len = static_cast<int>(chain_draws.cols());
  if (len < 4) return kNaN;
  double ess_total = 0.0;
  for (int c = 0; c < n_chains; ++c) {
    const auto x = chain_draws.row(c);
    const double mu = x.mean();
    const double var = (x.array() - mu).square().sum() / len;
    if (!(var > 0.0)) continue;
    // Initial positive sequence on paired autocorrelations.
    double sum_rho = 0.0;
    for (int lag = 1; lag + 1 < len; lag += 2) {
      double a0 = 0.0, a1 = 0.0;
      for (int t = 0; t + lag < len; ++t) a0 += (x[t] - mu) * (x[t + lag] - mu);
      for (int t = 0; t + lag + 1 < len; ++t) a1 += (x[t] - mu) * (x[t + lag + 1] - mu);
      const double pair = (a0 / len + a1 / len) / var;
      if (pair <= 0.0) break;
      sum_rho += pair;
    }
    ess_total += len / (1.0 + 2.0 * sum_rho);
  }
  return ess_total > 0.0 ? ess_total : kNaN;
}

namespace {

// Gather a scalar across draws into a chains x draws matrix.
template <typename Extract>
Eigen::MatrixXd gather(const PosteriorDraws& draws, Extract&& f) {
  const int c = draws.n_chains();
  const int n = draws.n_draws_per_chain();
  Eigen::MatrixXd out(c, n);
  for (int i = 0; i < c; ++i) {
    for (int s = 0; s < n; ++s) out(i, s) = f(i * n + s);
  }
  return out;
}

}  // namespace

ConvergenceSummary convergence_summary(const PosteriorDraws& draws,
                                       const AlignedDraws& aligned) {
  ConvergenceSummary out;
  const int p_count = draws.model_config.n_vars;
  const int q = draws.model_config.n_basis;
  const int k = draws.model_config.n_components;
  const int n = static_cast<int>(draws.subject_names.size());

  auto push = [&](const std::string& name, const Eigen::MatrixXd& series) {
    const double r = split_rhat(series);
    out.names.push_back(name);
    out.rhat.push_back(r);
    if (std::isnan(r)) {
      ++out.n_undefined;
    } else {
      out.max_rhat = std::max(out.max_rhat, r);
      if (r > 1.05) ++out.n_flagged;
    }
  };

  for (int p = 0; p < p_count; ++p) {
    push("noise_var[" + std::to_string(p + 1) + "]",
         gather(draws, [&](int s) { return draws.draw(s).noise_var[p]; }));
    push("mean_smooth[" + std::to_string(p + 1) + "]",
         gather(draws, [&](int s) { return draws.draw(s).mean_smooth[p]; }));
    for (int j = 0; j < q; ++j) {
      push("mean_coef[" + std::to_string(p + 1) + "," + std::to_string(j + 1) + "]",
           gather(draws, [&](int s) { return draws.draw(s).mean_coef[p * q + j]; }));
    }
  }
  for (int j = 0; j < k; ++j) {
    push("eigval[" + std::to_string(j + 1) + "]",
         gather(draws, [&](int s) { return draws.draw(s).eigvals[j]; }));
    for (int p = 0; p < p_count; ++p) {
      push("fpc_smooth[" + std::to_string(p + 1) + "," + std::to_string(j + 1) + "]",
           gather(draws, [&](int s) { return draws.draw(s).fpc_smooth(p, j); }));
    }
    for (int r = 0; r < p_count * q; ++r) {
      push("fpc_coef[" + std::to_string(r + 1) + "," + std::to_string(j + 1) + "]",
           gather(draws, [&](int s) { return aligned.fpc_coef[static_cast<size_t>(s)](r, j); }));
    }
    for (int i = 0; i < n; ++i) {
      push("score[" + std::to_string(i + 1) + "," + std::to_string(j + 1) + "]",
           gather(draws, [&](int s) { return aligned.scores[static_cast<size_t>(s)](i, j); }));
    }
  }
  return out;
}

double empirical_quantile(std::vector<double> values, double prob) {
  if (values.empty()) return kNaN;
  std::sort(values.begin(), values.end());
  const double idx = prob * (static_cast<double>(values.size()) - 1.0);
  const size_t lo = static_cast<size_t>(idx);
  const size_t hi = std::min(lo + 1, values.size() - 1);
  const double w = idx - static_cast<double>(lo);
  return (1.0 - w) * values[lo] + w * values[hi];
}

VarianceExplained variance_explained(const AlignedDraws& aligned,
                                     const std::vector<int>& truncations) {
  const PosteriorDraws& draws = *aligned.source;
  const int k = draws.model_config.n_components;
  const int p_count = draws.model_config.n_vars;
  const int q = draws.model_config.n_basis;
  const int total = aligned.n_draws();

  VarianceExplained out;
  out.truncations = truncations;
  const int n_trunc = static_cast<int>(truncations.size());
  out.global_mean.resize(n_trunc);
  out.global_lo.resize(n_trunc);
  out.global_hi.resize(n_trunc);
  out.per_var_mean.resize(n_trunc, p_count);
  out.per_var_lo.resize(n_trunc, p_count);
  out.per_var_hi.resize(n_trunc, p_count);

  for (int ti = 0; ti < n_trunc; ++ti) {
    const int trunc = truncations[static_cast<size_t>(ti)];
    if (trunc < 1 || trunc > k) throw ConfigError("truncation level outside [1, K]");
    std::vector<double> global(static_cast<size_t>(total));
    std::vector<std::vector<double>> per_var(
        static_cast<size_t>(p_count), std::vector<double>(static_cast<size_t>(total)));
    for (int s = 0; s < total; ++s) {
      const ParameterState& state = draws.draw(s);  // eigvals descending
      const Eigen::MatrixXd& coef = aligned.fpc_coef[static_cast<size_t>(s)];
      const double lam_total = state.eigvals.sum();
      const double noise_total = state.noise_var.sum();
      const double lam_head = state.eigvals.head(trunc).sum();
      global[static_cast<size_t>(s)] = lam_head / (lam_total + noise_total);
      for (int p = 0; p < p_count; ++p) {
        double head = 0.0, full = 0.0;
        for (int j = 0; j < k; ++j) {
          const double mass =
              state.eigvals[j] * coef.col(j).segment(p * q, q).squaredNorm();
          full += mass;
          if (j < trunc) head += mass;
        }
        per_var[static_cast<size_t>(p)][static_cast<size_t>(s)] =
            head / (full + state.noise_var[p]);
      }
    }
    auto mean_of = [](const std::vector<double>& v) {
      double s = 0.0;
      for (double x : v) s += x;
      return s / static_cast<double>(v.size());
    };
    out.global_mean[ti] = mean_of(global);
    out.global_lo[ti] = empirical_quantile(global, 0.025);
    out.global_hi[ti] = empirical_quantile(global, 0.975);
    for (int p = 0; p < p_count; ++p) {
      out.per_var_mean(ti, p) = mean_of(per_var[static_cast<size_t>(p)]);
      out.per_var_lo(ti, p) = empirical_quantile(per_var[static_cast<size_t>(p)], 0.025);
      out.per_var_hi(ti, p) = empirical_quantile(per_var[static_cast<size_t>(p)], 0.975);
    }
  }
  return out;
}

}  // namespace msfpca

#include "doctest.h"

#include <Eigen/Dense>

#include "msfpca/basis.hpp"
#include "msfpca/model.hpp"
#include "msfpca/rng.hpp"
#include "msfpca/sampler.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace msfpca;

namespace {

struct TinyProblem {
  SparseFunctionalDataset data;
  OrthoBasis basis;
  ModelConfig config;

  TinyProblem(int n, int p_count, int q, int k, int m, int obs, Rng& rng)
      : data(fixtures::random_dataset(n, p_count, m, obs, rng)), basis(build_basis(q, 3)) {
    config.n_components = k;
    config.n_basis = q;
    config.n_vars = p_count;
  }
};

}  // namespace

TEST_CASE("noise-variance conditional") {
  Rng rng(3);
  TinyProblem prob(5, 1, 6, 1, 8, 4, rng);
  const Posterior post(prob.data, prob.basis, prob.config, 1);
  ParameterState state = fixtures::random_state(1, 6, 1, 5, rng);

  SUBCASE("one-observation sufficient statistics") {
    // Shrink to a single observation; conditional must be
    // InvGamma(shape + 1/2, scale + r^2/2).
    SparseFunctionalDataset single = prob.data;
    single.y.conservativeResize(1);
    single.subj.resize(1);
    single.time_idx.resize(1);
    single.var_card = {1};
    const Posterior post1(single, prob.basis, prob.config, 1);
    const double r = single.y[0] - post1.fitted_values(state)[0];

    // Empirical check through the update itself.
    const int n_draws = 100000;
    std::vector<double> draws(n_draws);
    Rng draw_rng(17);
    ParameterState work = state;
    for (int i = 0; i < n_draws; ++i) {
      gibbs_noise_var(post1, work, draw_rng);
      draws[static_cast<size_t>(i)] = work.noise_var[0];
    }
    const double shape = prob.config.priors.noise_shape + 0.5;
    const double scale = prob.config.priors.noise_scale + 0.5 * r * r;
    const double ks = oracles::ks_statistic(
        draws, [&](double x) { return oracles::inv_gamma_cdf(x, shape, scale); });
    CHECK(ks < 0.01);
  }
  SUBCASE("no data reduces to the prior") {
    const SparseFunctionalDataset empty = fixtures::empty_dataset(1, 2);
    const Posterior post0(empty, prob.basis, prob.config, 1);
    ParameterState work = fixtures::random_state(1, 6, 1, 2, rng);
    Rng draw_rng(23);
    const int n_draws = 100000;
    std::vector<double> draws(n_draws);
    for (int i = 0; i < n_draws; ++i) {
      gibbs_noise_var(post0, work, draw_rng);
      draws[static_cast<size_t>(i)] = std::log(work.noise_var[0]);
    }
    // Compare on the log scale where the tiny-shape prior is usable.
    const double ks = oracles::ks_statistic(draws, [&](double x) {
      return oracles::inv_gamma_cdf(std::exp(x), prob.config.priors.noise_shape,
                                    prob.config.priors.noise_scale);
    });
    CHECK(ks < 0.01);
  }
}

TEST_CASE("eigenvalue conditional with K = 1 follows the inverse gamma") {
  Rng rng(5);
  TinyProblem prob(6, 1, 6, 1, 8, 3, rng);
  const Posterior post(prob.data, prob.basis, prob.config, 1);
  ParameterState state = fixtures::random_state(1, 6, 1, 6, rng);
  const double sum_sq = state.scores.col(0).squaredNorm();
  const double shape = 0.5 * 6 + prob.config.priors.eigval_shape;
  const double scale = 0.5 * sum_sq + prob.config.priors.eigval_scale;

  Rng draw_rng(31);
  const int n_draws = 100000;
  std::vector<double> draws(n_draws);
  ParameterState work = state;
  for (int i = 0; i < n_draws; ++i) {
    // Keep the sufficient statistic fixed: restore scores each sweep.
    work.scores = state.scores;
    gibbs_eigenvalues(post, work, draw_rng);
    draws[static_cast<size_t>(i)] = work.eigvals[0];
  }
  const double ks = oracles::ks_statistic(
      draws, [&](double x) { return oracles::inv_gamma_cdf(x, shape, scale); });
  CHECK(ks < 0.01);

  SUBCASE("raw scores stay consistent after the update") {
    CHECK((work.scores_raw * work.eigvals.cwiseSqrt().asDiagonal() - work.scores)
              .cwiseAbs()
              .maxCoeff() <= 1e-12);
  }
}

TEST_CASE("ordered eigenvalue constraint is enforced by rejection") {
  Rng rng(7);
  TinyProblem prob(10, 1, 6, 3, 10, 4, rng);
  const Posterior post(prob.data, prob.basis, prob.config, 1);
  ParameterState state = fixtures::random_state(1, 6, 3, 10, rng);
  // Near-equal eigenvalues make the constraint active.
  state.eigvals << 1.0, 1.001, 1.002;
  state.scores_raw = 0.01 * state.scores_raw;
  state.refresh_derived();

  Rng draw_rng(41);
  int retained = 0;
  ParameterState work = state;
  for (int i = 0; i < 2000; ++i) {
    const Eigen::VectorXd before = work.eigvals;
    gibbs_eigenvalues(post, work, draw_rng);
    for (int j = 1; j < 3; ++j) CHECK(work.eigvals[j] >= work.eigvals[j - 1]);
    if (work.eigvals == before) ++retained;
  }
  CHECK(retained > 0);
}

TEST_CASE("smoothing conditionals") {
  Rng rng(11);
  TinyProblem prob(4, 1, 6, 1, 8, 3, rng);
  const Posterior post(prob.data, prob.basis, prob.config, 1);
  ParameterState state = fixtures::random_state(1, 6, 1, 4, rng);

  SUBCASE("zero mean weights give the pure-prior-plus-rank conditional") {
    ParameterState work = state;
    work.mean_coef.setZero();
    Rng draw_rng(43);
    const int n_draws = 100000;
    std::vector<double> draws(n_draws);
    for (int i = 0; i < n_draws; ++i) {
      gibbs_smoothing(post, work, draw_rng);
      work.mean_coef.setZero();
      draws[static_cast<size_t>(i)] = work.mean_smooth[0];
    }
    const double shape = prob.config.priors.mean_smooth_shape + 0.5 * 6;
    const double rate = prob.config.priors.mean_smooth_rate;
    const double ks = oracles::ks_statistic(
        draws, [&](double x) { return oracles::gamma_cdf(x, shape, rate); });
    CHECK(ks < 0.01);
  }
  SUBCASE("quadratic form enters the rate") {
    // With the documented conditional, quadform 2 gives rate prior + 1.
    ParameterState work = state;
    const Eigen::MatrixXd penalty = post.penalty();
    // Rescale the weights so the quadratic form equals exactly 2.
    const double quad = work.mean_coef.dot(penalty * work.mean_coef);
    work.mean_coef *= std::sqrt(2.0 / quad);
    Rng draw_rng(47);
    const int n_draws = 100000;
    const Eigen::VectorXd frozen = work.mean_coef;
    std::vector<double> draws(n_draws);
    for (int i = 0; i < n_draws; ++i) {
      gibbs_smoothing(post, work, draw_rng);
      work.mean_coef = frozen;
      draws[static_cast<size_t>(i)] = work.mean_smooth[0];
    }
    const double shape = prob.config.priors.mean_smooth_shape + 0.5 * 6;
    const double rate = prob.config.priors.mean_smooth_rate + 1.0;
    const double ks = oracles::ks_statistic(
        draws, [&](double x) { return oracles::gamma_cdf(x, shape, rate); });
    CHECK(ks < 0.01);
  }
  SUBCASE("FPC smoothing parameters follow the same family") {
    ParameterState work = state;
    Rng draw_rng(53);
    const int n_draws = 100000;
    const double quad = work.fpc_coef.col(0).dot(post.penalty() * work.fpc_coef.col(0));
    std::vector<double> draws(n_draws);
    for (int i = 0; i < n_draws; ++i) {
      gibbs_smoothing(post, work, draw_rng);
      draws[static_cast<size_t>(i)] = work.fpc_smooth(0, 0);
    }
    const double shape = prob.config.priors.fpc_smooth_shape + 0.5 * 6;
    const double rate = prob.config.priors.fpc_smooth_rate + 0.5 * quad;
    const double ks = oracles::ks_statistic(
        draws, [&](double x) { return oracles::gamma_cdf(x, shape, rate); });
    CHECK(ks < 0.01);
  }
}

TEST_CASE("mean-weight conditional matches penalized least squares") {
  Rng rng(13);
  TinyProblem prob(6, 1, 6, 1, 12, 8, rng);
  const Posterior post(prob.data, prob.basis, prob.config, 1);
  ParameterState state = fixtures::random_state(1, 6, 1, 6, rng);
  state.scores_raw.setZero();
  state.refresh_derived();

  // Conditional mean must equal the ridge solution
  //   (h P + B'B/s2)^{-1} B'y / s2  (scores are zero, so D = y).
  const Eigen::MatrixXd basis_eval = post.basis_at_times();
  Eigen::MatrixXd bt = Eigen::MatrixXd::Zero(6, 6);
  Eigen::VectorXd by = Eigen::VectorXd::Zero(6);
  for (int l = 0; l < prob.data.n_obs(); ++l) {
    const Eigen::VectorXd row = basis_eval.row(prob.data.time_idx[static_cast<size_t>(l)]);
    bt += row * row.transpose();
    by += row * prob.data.y[l];
  }
  const double s2 = state.noise_var[0];
  const Eigen::MatrixXd precision = state.mean_smooth[0] * post.penalty() + bt / s2;
  const Eigen::VectorXd expected_mean = precision.ldlt().solve(by / s2);
  const Eigen::MatrixXd expected_cov = precision.inverse();

  Rng draw_rng(59);
  const int n_draws = 200000;
  Eigen::VectorXd mean_acc = Eigen::VectorXd::Zero(6);
  Eigen::MatrixXd cov_acc = Eigen::MatrixXd::Zero(6, 6);
  ParameterState work = state;
  for (int i = 0; i < n_draws; ++i) {
    gibbs_mean_coef(post, work, draw_rng);
    mean_acc += work.mean_coef;
    cov_acc += work.mean_coef * work.mean_coef.transpose();
  }
  mean_acc /= n_draws;
  cov_acc = cov_acc / n_draws - mean_acc * mean_acc.transpose();
  CHECK((mean_acc - expected_mean).cwiseAbs().maxCoeff() <= 0.01);
  CHECK((cov_acc - expected_cov).cwiseAbs().maxCoeff() <= 0.01);

  SUBCASE("posterior mean is hit to Monte Carlo accuracy with tight noise") {
    // Same identity, exact to linear-algebra accuracy via the precision
    // solve used internally: verify the analytic mean directly.
    CHECK((precision * expected_mean - by / s2).cwiseAbs().maxCoeff() <= 1e-8);
  }
}

TEST_CASE("score conditional update matches the dense Gaussian oracle") {
  Rng rng(17);
  TinyProblem prob(3, 2, 6, 2, 8, 4, rng);
  const Posterior post(prob.data, prob.basis, prob.config, 1);
  ParameterState state = fixtures::random_state(2, 6, 2, 3, rng);

  // Oracle for subject 0: stack all its observations across variables.
  const int subject = 0;
  std::vector<double> y_rows, noise_rows, offset_rows;
  std::vector<Eigen::RowVectorXd> load_rows;
  const Eigen::MatrixXd basis_eval = post.basis_at_times();
  for (int p = 0; p < 2; ++p) {
    const Eigen::MatrixXd phi = basis_eval * state.fpc_coef.middleRows(p * 6, 6);
    const Eigen::VectorXd mu = basis_eval * state.mean_coef.segment(p * 6, 6);
    const auto [start, len] = post.subject_spans(p)[subject];
    for (int l = start; l < start + len; ++l) {
      const int m = prob.data.time_idx[static_cast<size_t>(l)];
      y_rows.push_back(prob.data.y[l]);
      offset_rows.push_back(mu[m]);
      noise_rows.push_back(state.noise_var[p]);
      load_rows.push_back(phi.row(m));
    }
  }
  const int total = static_cast<int>(y_rows.size());
  REQUIRE(total > 0);
  Eigen::MatrixXd loading(total, 2);
  Eigen::VectorXd offset(total), noise(total), y(total);
  for (int i = 0; i < total; ++i) {
    loading.row(i) = load_rows[static_cast<size_t>(i)];
    offset[i] = offset_rows[static_cast<size_t>(i)];
    noise[i] = noise_rows[static_cast<size_t>(i)];
    y[i] = y_rows[static_cast<size_t>(i)];
  }
  const auto oracle = oracles::condition_scores(
      loading, offset, noise, Eigen::MatrixXd(state.eigvals.asDiagonal()), y);

  Rng draw_rng(61);
  const int n_draws = 200000;
  Eigen::VectorXd mean_acc = Eigen::VectorXd::Zero(2);
  Eigen::MatrixXd cov_acc = Eigen::MatrixXd::Zero(2, 2);
  ParameterState work = state;
  for (int i = 0; i < n_draws; ++i) {
    gibbs_scores(post, work, draw_rng);
    const Eigen::VectorXd xi = work.scores.row(subject).transpose();
    mean_acc += xi;
    cov_acc += xi * xi.transpose();
    work.scores = state.scores;
    work.scores_raw = state.scores_raw;
  }
  mean_acc /= n_draws;
  cov_acc = cov_acc / n_draws - mean_acc * mean_acc.transpose();
  CHECK((mean_acc - oracle.mean).cwiseAbs().maxCoeff() <= 0.01);
  CHECK((cov_acc - oracle.cov).cwiseAbs().maxCoeff() <= 0.01);

  SUBCASE("subjects with no observations draw from the score prior") {
    const SparseFunctionalDataset empty = fixtures::empty_dataset(2, 2);
    ModelConfig cfg = prob.config;
    const Posterior post0(empty, prob.basis, cfg, 1);
    ParameterState s0 = fixtures::random_state(2, 6, 2, 2, rng);
    Rng draw_rng2(67);
    const int reps = 200000;
    Eigen::VectorXd m_acc = Eigen::VectorXd::Zero(2);
    Eigen::VectorXd v_acc = Eigen::VectorXd::Zero(2);
    for (int i = 0; i < reps; ++i) {
      gibbs_scores(post0, s0, draw_rng2);
      const Eigen::VectorXd xi = s0.scores.row(0).transpose();
      m_acc += xi;
      v_acc += xi.cwiseAbs2();
    }
    m_acc /= reps;
    v_acc = v_acc / reps - m_acc.cwiseAbs2();
    CHECK(m_acc.cwiseAbs().maxCoeff() <= 0.02);
    CHECK((v_acc - s0.eigvals).cwiseAbs().maxCoeff() <= 0.05);
  }
}

#include "doctest.h"

#include <Eigen/Dense>

#include "msfpca/basis.hpp"
#include "msfpca/errors.hpp"
#include "msfpca/predict.hpp"
#include "msfpca/rng.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace msfpca;

namespace {

PosteriorDraws small_draws(int n_chains, int per_chain, int p_count, int q, int k,
                           int n_subjects, Rng& rng, const ParameterState* fixed = nullptr,
                           const ScalingRecord* scaling = nullptr) {
  PosteriorDraws draws;
  draws.model_config.n_components = k;
  draws.model_config.n_basis = q;
  draws.model_config.n_vars = p_count;
  draws.sampler_config.n_chains = n_chains;
  draws.sampler_config.n_samples = per_chain;
  draws.basis_degree = 3;
  draws.basis_quad_points = 10;
  draws.times = Eigen::VectorXd::LinSpaced(11, 0.0, 1.0);
  for (int i = 0; i < n_subjects; ++i) draws.subject_names.push_back("s" + std::to_string(i + 1));
  for (int p = 0; p < p_count; ++p) draws.variable_names.push_back("v" + std::to_string(p + 1));
  draws.scaling = scaling != nullptr ? *scaling : unit_scaling(draws.variable_names);
  draws.chains.resize(static_cast<size_t>(n_chains));
  draws.diagnostics.assign(static_cast<size_t>(n_chains),
                           std::vector<DrawDiagnostics>(static_cast<size_t>(per_chain)));
  draws.chain_stats.resize(static_cast<size_t>(n_chains));
  for (int c = 0; c < n_chains; ++c) {
    for (int s = 0; s < per_chain; ++s) {
      ParameterState st = fixed != nullptr
                              ? *fixed
                              : fixtures::random_state(p_count, q, k, n_subjects, rng);
      std::sort(st.eigvals.data(), st.eigvals.data() + st.eigvals.size(),
                std::greater<double>());
      draws.chains[static_cast<size_t>(c)].push_back(std::move(st));
    }
  }
  return draws;
}

}  // namespace

TEST_CASE("null model reconstructs the standardization offset") {
  Rng rng(3);
  const int q = 6;
  const OrthoBasis basis = build_basis(q, 3);
  ScalingRecord scaling;
  scaling.variables = {"v1"};
  scaling.mean = Eigen::VectorXd::Constant(1, 7.5);
  scaling.sd = Eigen::VectorXd::Constant(1, 2.0);
  scaling.t_min = 0.0;
  scaling.t_max = 10.0;
  ParameterState st = fixtures::random_state(1, q, 1, 2, rng);
  st.mean_coef.setZero();
  st.scores_raw.setZero();
  st.refresh_derived();
  PosteriorDraws draws = small_draws(1, 3, 1, q, 1, 2, rng, &st, &scaling);

  Eigen::VectorXd times(3);
  times << 0.0, 5.0, 10.0;
  const TrajectoryDraws out = static_predict(draws, basis, {0, 1}, times);
  for (const auto& per_var : out.draws) {
    CHECK((per_var[0].array() - 7.5).abs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("predictions are invariant under alignment") {
  Rng rng(7);
  const int p_count = 2, q = 6, k = 2, n = 4;
  const OrthoBasis basis = build_basis(q, 3);
  PosteriorDraws draws = small_draws(2, 4, p_count, q, k, n, rng);
  const Eigen::MatrixXd reference = default_reference(draws, basis);
  const AlignedDraws aligned = procrustes_align(draws, basis, reference, "posterior-mean-svd");

  Eigen::VectorXd times(4);
  times << 0.1, 0.3, 0.6, 0.9;
  const TrajectoryDraws raw = static_predict(draws, basis, {0, 2}, times);
  const TrajectoryDraws rot = static_predict(draws, basis, {0, 2}, times, {}, &aligned);
  for (size_t s = 0; s < raw.draws.size(); ++s) {
    for (size_t p = 0; p < raw.draws[s].size(); ++p) {
      CHECK((raw.draws[s][p] - rot.draws[s][p]).cwiseAbs().maxCoeff() <= 1e-10);
    }
  }
}

TEST_CASE("single-component toy matches hand reconstruction") {
  Rng rng(11);
  const int q = 6;
  const OrthoBasis basis = build_basis(q, 3);
  ScalingRecord scaling;
  scaling.variables = {"v1"};
  scaling.mean = Eigen::VectorXd::Constant(1, 1.0);
  scaling.sd = Eigen::VectorXd::Constant(1, 3.0);
  scaling.t_min = 0.0;
  scaling.t_max = 1.0;
  const ParameterState st = fixtures::random_state(1, q, 1, 1, rng);
  PosteriorDraws draws = small_draws(1, 2, 1, q, 1, 1, rng, &st, &scaling);

  Eigen::VectorXd times(1);
  times << 0.42;
  const TrajectoryDraws out = static_predict(draws, basis, {0}, times);
  Eigen::VectorXd unit(1);
  unit << 0.42;
  const Eigen::MatrixXd row = basis.evaluate(unit);
  const double smooth =
      (row * st.mean_coef)(0, 0) + st.scores(0, 0) * (row * st.fpc_coef.col(0))(0, 0);
  CHECK(out.draws[0][0](0, 0) == doctest::Approx(smooth * 3.0 + 1.0).epsilon(1e-12));
}

TEST_CASE("prediction refuses extrapolation") {
  Rng rng(13);
  const OrthoBasis basis = build_basis(6, 3);
  PosteriorDraws draws = small_draws(1, 2, 1, 6, 1, 2, rng);
  Eigen::VectorXd times(1);
  times << 1.5;
  CHECK_THROWS_AS(static_predict(draws, basis, {0}, times), DataError);
}

TEST_CASE("score conditional") {
  Rng rng(17);
  const int q = 6, k = 2;
  const OrthoBasis basis = build_basis(q, 3);
  const ParameterState st = fixtures::random_state(1, q, k, 1, rng);

  SUBCASE("no observations collapse to the prior") {
    std::vector<Eigen::MatrixXd> rows(1, Eigen::MatrixXd(0, q));
    std::vector<Eigen::VectorXd> values(1, Eigen::VectorXd());
    const ScoreConditional cond = score_conditional(st, rows, values);
    CHECK(cond.mean.cwiseAbs().maxCoeff() <= 1e-14);
    CHECK((cond.cov - Eigen::MatrixXd(st.eigvals.asDiagonal())).cwiseAbs().maxCoeff() <=
          1e-12);
  }
  SUBCASE("scalar case matches the closed form") {
    ParameterState s1 = fixtures::random_state(1, q, 1, 1, rng);
    Eigen::VectorXd t(1);
    t << 0.37;
    const Eigen::MatrixXd b = basis.evaluate(t);
    const double phi = (b * s1.fpc_coef.col(0))(0, 0);
    const double y = 0.8;
    const double resid = y - (b * s1.mean_coef)(0, 0);
    const double sigma2 = s1.noise_var[0];
    const double lambda = s1.eigvals[0];
    std::vector<Eigen::MatrixXd> rows(1, b);
    std::vector<Eigen::VectorXd> values(1, Eigen::VectorXd::Constant(1, y));
    const ScoreConditional cond = score_conditional(s1, rows, values);
    const double prec = phi * phi / sigma2 + 1.0 / lambda;
    CHECK(cond.cov(0, 0) == doctest::Approx(1.0 / prec).epsilon(1e-12));
    CHECK(cond.mean[0] == doctest::Approx((phi * resid / sigma2) / prec).epsilon(1e-12));
  }
  SUBCASE("matches dense joint-Gaussian conditioning") {
    const int p_count = 2;
    const ParameterState s2 = fixtures::random_state(p_count, q, k, 1, rng);
    std::vector<Eigen::MatrixXd> rows;
    std::vector<Eigen::VectorXd> values;
    std::vector<int> counts = {3, 2};
    Rng obs_rng(99);
    for (int p = 0; p < p_count; ++p) {
      Eigen::VectorXd t(counts[static_cast<size_t>(p)]);
      for (int j = 0; j < counts[static_cast<size_t>(p)]; ++j) t[j] = obs_rng.uniform();
      std::sort(t.data(), t.data() + t.size());
      rows.push_back(basis.evaluate(t));
      values.push_back(obs_rng.normal_vector(counts[static_cast<size_t>(p)]));
    }
    const ScoreConditional cond = score_conditional(s2, rows, values);

    // Dense oracle: stack loadings/offsets/noise across variables.
    const int total = counts[0] + counts[1];
    Eigen::MatrixXd loading(total, k);
    Eigen::VectorXd offset(total), noise(total), y(total);
    int pos = 0;
    for (int p = 0; p < p_count; ++p) {
      const Eigen::MatrixXd phi = rows[static_cast<size_t>(p)] *
                                  s2.fpc_coef.middleRows(p * q, q);
      const Eigen::VectorXd mu =
          rows[static_cast<size_t>(p)] * s2.mean_coef.segment(p * q, q);
      for (int j = 0; j < counts[static_cast<size_t>(p)]; ++j) {
        loading.row(pos) = phi.row(j);
        offset[pos] = mu[j];
        noise[pos] = s2.noise_var[p];
        y[pos] = values[static_cast<size_t>(p)][j];
        ++pos;
      }
    }
    const auto oracle = oracles::condition_scores(
        loading, offset, noise, Eigen::MatrixXd(s2.eigvals.asDiagonal()), y);
    CHECK((cond.mean - oracle.mean).cwiseAbs().maxCoeff() <= 1e-8);
    CHECK((cond.cov - oracle.cov).cwiseAbs().maxCoeff() <= 1e-8);
  }
}

TEST_CASE("dynamic prediction windows and errors") {
  Rng rng(19);
  const int q = 6;
  const OrthoBasis basis = build_basis(q, 3);
  PosteriorDraws draws = small_draws(1, 5, 1, q, 1, 3, rng);

  NewSubjectObservations obs(1);
  obs.times[0] = Eigen::VectorXd::LinSpaced(4, 0.1, 0.5);
  obs.values[0] = rng.normal_vector(4);
  const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(21, 0.0, 1.0);
  Rng sample_rng(1);

  SUBCASE("zero horizon predicts only the observed window") {
    const TrajectoryDraws out =
        dynamic_predict(draws, basis, obs, 0.5, 0.0, grid, sample_rng);
    CHECK(out.times.minCoeff() >= 0.1 - 1e-12);
    CHECK(out.times.maxCoeff() <= 0.5 + 1e-12);
  }
  SUBCASE("horizon beyond the fitted range is rejected") {
    CHECK_THROWS_AS(dynamic_predict(draws, basis, obs, 0.5, 0.8, grid, sample_rng),
                    DataError);
  }
  SUBCASE("cutoff before all observations is rejected") {
    CHECK_THROWS_AS(dynamic_predict(draws, basis, obs, 0.05, 0.1, grid, sample_rng),
                    DataError);
  }
  SUBCASE("later cutoffs shrink intervals over the observed window on average") {
    // Pin the population draw so across-draw spread comes only from the
    // score conditional; extra observations then cannot widen it.
    const ParameterState fixed = fixtures::random_state(1, q, 2, 3, rng);
    PosteriorDraws fixed_draws = small_draws(1, 400, 1, q, 2, 3, rng, &fixed);
    NewSubjectObservations rich(1);
    rich.times[0] = Eigen::VectorXd::LinSpaced(10, 0.05, 0.95);
    rich.values[0] = 0.4 * rng.normal_vector(10);
    Rng rng_few(5), rng_many(5);
    const TrajectoryDraws few =
        dynamic_predict(fixed_draws, basis, rich, 0.3, 0.65, grid, rng_few);
    const TrajectoryDraws many =
        dynamic_predict(fixed_draws, basis, rich, 0.95, 0.0, grid, rng_many);
    const TrajectorySummary s_few = summarize(few);
    const TrajectorySummary s_many = summarize(many);
    // Compare on the common window [0.05, 0.3].
    double width_few = 0.0, width_many = 0.0;
    int count = 0;
    for (Eigen::Index m = 0; m < s_few.times.size(); ++m) {
      const double t = s_few.times[m];
      if (t > 0.3 + 1e-9) continue;
      for (Eigen::Index m2 = 0; m2 < s_many.times.size(); ++m2) {
        if (std::abs(s_many.times[m2] - t) < 1e-9) {
          width_few += s_few.hi[0](0, m) - s_few.lo[0](0, m);
          width_many += s_many.hi[0](0, m2) - s_many.lo[0](0, m2);
          ++count;
        }
      }
    }
    REQUIRE(count > 0);
    CHECK(width_many <= width_few * 1.05);

    // Per-draw certainty: the conditional covariance cannot grow when
    // observations are added.
    std::vector<Eigen::MatrixXd> rows_few, rows_many;
    std::vector<Eigen::VectorXd> vals_few, vals_many;
    const NewSubjectObservations trunc = rich.truncated(0.3);
    rows_few.push_back(basis.evaluate(trunc.times[0]));
    vals_few.push_back(trunc.values[0]);
    rows_many.push_back(basis.evaluate(rich.times[0]));
    vals_many.push_back(rich.values[0]);
    const ScoreConditional c_few = score_conditional(fixed, rows_few, vals_few);
    const ScoreConditional c_many = score_conditional(fixed, rows_many, vals_many);
    CHECK(c_many.cov.trace() <= c_few.cov.trace() + 1e-12);
  }
}

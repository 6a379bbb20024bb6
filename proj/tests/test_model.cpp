#include "doctest.h"

#include <cmath>
#include <numbers>

#include <Eigen/Dense>

#include "msfpca/basis.hpp"
#include "msfpca/errors.hpp"
#include "msfpca/model.hpp"
#include "msfpca/rng.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace msfpca;

namespace {

Eigen::MatrixXd random_orthonormal(int rows, int cols, Rng& rng) {
  return polar_orthonormalize(rng.normal_matrix(rows, cols));
}

}  // namespace

TEST_CASE("polar factor basics") {
  Rng rng(7);

  SUBCASE("orthonormal input is a fixed point") {
    const Eigen::MatrixXd u = random_orthonormal(12, 3, rng);
    CHECK((polar_orthonormalize(u) - u).cwiseAbs().maxCoeff() <= 1e-12);
  }
  SUBCASE("scaling invariance") {
    const Eigen::MatrixXd u = random_orthonormal(10, 2, rng);
    CHECK((polar_orthonormalize(2.0 * u) - u).cwiseAbs().maxCoeff() <= 1e-12);
  }
  SUBCASE("matches the SVD polar-factor oracle") {
    for (int rep = 0; rep < 25; ++rep) {
      const Eigen::MatrixXd x = rng.normal_matrix(10, 3);
      const Eigen::MatrixXd psi = polar_orthonormalize(x);
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
      const Eigen::MatrixXd oracle = svd.matrixU() * svd.matrixV().transpose();
      CHECK((psi - oracle).cwiseAbs().maxCoeff() <= 1e-10);
      CHECK((psi.transpose() * psi - Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() <=
            1e-10);
    }
  }
  SUBCASE("rank deficiency is detected") {
    Eigen::MatrixXd x = rng.normal_matrix(8, 3);
    x.col(2) = x.col(0) + x.col(1);
    CHECK_THROWS_AS(polar_orthonormalize(x), NumericalError);
  }
  SUBCASE("closest orthonormal matrix in Frobenius norm") {
    const Eigen::MatrixXd x = rng.normal_matrix(9, 3);
    const Eigen::MatrixXd psi = polar_orthonormalize(x);
    const double best = (x - psi).norm();
    for (int rep = 0; rep < 100; ++rep) {
      const Eigen::MatrixXd omega = random_orthonormal(9, 3, rng);
      CHECK((x - omega).norm() >= best - 1e-12);
    }
  }
}

TEST_CASE("scores scale exactly with the root eigenvalues") {
  Rng rng(3);
  const ParameterState s = fixtures::random_state(2, 6, 2, 5, rng);
  for (int i = 0; i < 5; ++i) {
    for (int k = 0; k < 2; ++k) {
      CHECK(s.scores(i, k) == s.scores_raw(i, k) * std::sqrt(s.eigvals[k]));
    }
  }
}

TEST_CASE("sum-inner-product orthonormality of evaluated FPCs") {
  Rng rng(11);
  const int p_count = 2, q = 8, k = 3;
  const OrthoBasis basis = build_basis(q, 3);
  const Eigen::MatrixXd psi = random_orthonormal(p_count * q, k, rng);
  const Eigen::MatrixXd eval = basis.evaluate(basis.quadrature().nodes);
  const Eigen::VectorXd w = basis.quadrature().weights;
  for (int j = 0; j < k; ++j) {
    for (int l = 0; l < k; ++l) {
      double inner = 0.0;
      for (int p = 0; p < p_count; ++p) {
        const Eigen::VectorXd fj = eval * psi.col(j).segment(p * q, q);
        const Eigen::VectorXd fl = eval * psi.col(l).segment(p * q, q);
        inner += (fj.array() * fl.array() * w.array()).sum();
      }
      CHECK(inner == doctest::Approx(psi.col(j).dot(psi.col(l))).epsilon(1e-8));
    }
  }
}

TEST_CASE("prior-only log posterior differences match closed forms") {
  Rng rng(5);
  const OrthoBasis basis = build_basis(6, 3);
  const SparseFunctionalDataset data = fixtures::empty_dataset(1, 3);
  ModelConfig config;
  config.n_components = 1;
  config.n_basis = 6;
  config.n_vars = 1;
  const Posterior post(data, basis, config, 1);

  ParameterState s = fixtures::random_state(1, 6, 1, 3, rng);

  SUBCASE("noise variance term is the inverse-gamma kernel") {
    ParameterState s2 = s;
    s2.noise_var[0] = 2.0 * s.noise_var[0];
    const double delta = post.log_posterior(s2) - post.log_posterior(s);
    const auto kernel = [&](double v) {
      return -(config.priors.noise_shape + 1.0) * std::log(v) - config.priors.noise_scale / v;
    };
    CHECK(delta == doctest::Approx(kernel(s2.noise_var[0]) - kernel(s.noise_var[0]))
                       .epsilon(1e-10));
  }
  SUBCASE("doubling a mean smoothing parameter moves by the documented closed form") {
    ParameterState s2 = s;
    s2.mean_smooth[0] = 2.0 * s.mean_smooth[0];
    const double h = s.mean_smooth[0];
    const auto w = s.mean_coef;
    const double quad = w.dot(basis.penalty_alpha(config.alpha) * w);
    const double expected = 0.5 * config.n_basis * std::log(2.0) - 0.5 * h * quad +
                            (config.priors.mean_smooth_shape - 1.0) * std::log(2.0) -
                            config.priors.mean_smooth_rate * h;
    CHECK(post.log_posterior(s2) - post.log_posterior(s) ==
          doctest::Approx(expected).epsilon(1e-10));
  }
  SUBCASE("prior-only gradient of the raw scores is minus the scores") {
    const Eigen::VectorXd v = post.to_unconstrained(s);
    Eigen::VectorXd grad;
    post.log_density_gradient(v, grad);
    // scores_raw occupy the trailing N*K coordinates.
    const int nk = 3;
    const Eigen::VectorXd tail = grad.tail(nk);
    const Eigen::VectorXd expect =
        -Eigen::Map<const Eigen::VectorXd>(s.scores_raw.data(), nk);
    CHECK((tail - expect).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("single-observation likelihood equals the normal log density") {
  Rng rng(9);
  const int q = 6;
  const OrthoBasis basis = build_basis(q, 3);
  SparseFunctionalDataset data;
  data.n_subjects = 1;
  data.n_vars = 1;
  data.subject_names = {"a"};
  data.variable_names = {"w"};
  data.times = Eigen::VectorXd::Constant(1, 0.4);
  data.var_card = {1};
  data.subj = {0};
  data.time_idx = {0};
  data.y = Eigen::VectorXd::Constant(1, 1.3);

  ModelConfig config;
  config.n_components = 1;
  config.n_basis = q;
  config.n_vars = 1;
  const Posterior post(data, basis, config, 1);
  const ParameterState s = fixtures::random_state(1, q, 1, 1, rng);

  Eigen::VectorXd t(1);
  t << 0.4;
  const Eigen::MatrixXd row = basis.evaluate(t);
  const double mean = (row * s.mean_coef)(0, 0) + s.scores(0, 0) * (row * s.fpc_coef.col(0))(0, 0);
  const double sigma2 = s.noise_var[0];
  const double expected = -0.5 * std::log(2.0 * std::numbers::pi * sigma2) -
                          (data.y[0] - mean) * (data.y[0] - mean) / (2.0 * sigma2);
  CHECK(post.likelihood_block(0, s) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(post.log_likelihood(s) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("likelihood blocks sum independently of variable order") {
  Rng rng(23);
  const int q = 6, k = 2, n = 6, p_count = 3;
  const OrthoBasis basis = build_basis(q, 3);
  const SparseFunctionalDataset data = fixtures::random_dataset(n, p_count, 9, 4, rng);
  ModelConfig config;
  config.n_components = k;
  config.n_basis = q;
  config.n_vars = p_count;
  const Posterior post(data, basis, config, 1);
  const ParameterState s = fixtures::random_state(p_count, q, k, n, rng);

  // Permuted copy: reverse the variable order everywhere.
  SparseFunctionalDataset rdata = data;
  rdata.variable_names = {data.variable_names[2], data.variable_names[1], data.variable_names[0]};
  rdata.var_card = {data.var_card[2], data.var_card[1], data.var_card[0]};
  rdata.y.setZero(data.n_obs());
  rdata.subj.clear();
  rdata.time_idx.clear();
  int pos = 0;
  for (int p = p_count - 1; p >= 0; --p) {
    const int off = data.block_offset(p);
    for (int l = 0; l < data.var_card[static_cast<size_t>(p)]; ++l) {
      rdata.y[pos++] = data.y[off + l];
      rdata.subj.push_back(data.subj[static_cast<size_t>(off + l)]);
      rdata.time_idx.push_back(data.time_idx[static_cast<size_t>(off + l)]);
    }
  }
  ParameterState rs = s;
  for (int p = 0; p < p_count; ++p) {
    const int src = p_count - 1 - p;
    rs.noise_var[p] = s.noise_var[src];
    rs.mean_smooth[p] = s.mean_smooth[src];
    rs.fpc_smooth.row(p) = s.fpc_smooth.row(src);
    rs.mean_coef.segment(p * q, q) = s.mean_coef.segment(src * q, q);
    rs.fpc_latent.middleRows(p * q, q) = s.fpc_latent.middleRows(src * q, q);
  }
  rs.refresh_derived();
  const Posterior rpost(rdata, basis, config, 1);
  CHECK(rpost.log_likelihood(rs) == doctest::Approx(post.log_likelihood(s)).epsilon(1e-12));

  SUBCASE("single-variable block equals the total") {
    const SparseFunctionalDataset d1 = fixtures::random_dataset(4, 1, 7, 3, rng);
    ModelConfig c1 = config;
    c1.n_vars = 1;
    const Posterior post1(d1, basis, c1, 1);
    const ParameterState s1 = fixtures::random_state(1, q, k, 4, rng);
    CHECK(post1.likelihood_block(0, s1) == post1.log_likelihood(s1));
  }
  SUBCASE("empty block contributes zero") {
    SparseFunctionalDataset d2 = fixtures::random_dataset(4, 2, 7, 3, rng);
    // Strip all observations of the second variable.
    d2.y.conservativeResize(d2.var_card[0]);
    d2.subj.resize(static_cast<size_t>(d2.var_card[0]));
    d2.time_idx.resize(static_cast<size_t>(d2.var_card[0]));
    d2.var_card[1] = 0;
    ModelConfig c2 = config;
    c2.n_vars = 2;
    const Posterior post2(d2, basis, c2, 1);
    const ParameterState s2 = fixtures::random_state(2, q, k, 4, rng);
    CHECK(post2.likelihood_block(1, s2) == 0.0);
  }
}

TEST_CASE("unconstrained transform round trip") {
  Rng rng(31);
  const OrthoBasis basis = build_basis(6, 3);
  const SparseFunctionalDataset data = fixtures::random_dataset(4, 2, 8, 3, rng);
  ModelConfig config;
  config.n_components = 2;
  config.n_basis = 6;
  config.n_vars = 2;
  const Posterior post(data, basis, config, 1);

  for (int rep = 0; rep < 10; ++rep) {
    const ParameterState s = fixtures::random_state(2, 6, 2, 4, rng);
    const Eigen::VectorXd v = post.to_unconstrained(s);
    const ParameterState back = post.from_unconstrained(v);
    const Eigen::VectorXd v2 = post.to_unconstrained(back);
    CHECK((v - v2).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((back.eigvals - s.eigvals).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("analytic gradient matches central finite differences") {
  Rng rng(17);
  const int n = 4, p_count = 2, q = 6, k = 2, m = 8;
  const OrthoBasis basis = build_basis(q, 3);
  const SparseFunctionalDataset data = fixtures::random_dataset(n, p_count, m, 4, rng);
  ModelConfig config;
  config.n_components = k;
  config.n_basis = q;
  config.n_vars = p_count;
  const Posterior post(data, basis, config, 1);

  for (int rep = 0; rep < 5; ++rep) {
    const ParameterState s = fixtures::random_state(p_count, q, k, n, rng);
    const Eigen::VectorXd v = post.to_unconstrained(s);
    Eigen::VectorXd grad;
    const double lp = post.log_density_gradient(v, grad);
    REQUIRE(std::isfinite(lp));
    CHECK(lp == doctest::Approx(post.log_density(v)).epsilon(1e-12));
    const Eigen::VectorXd fd = oracles::finite_difference_gradient(
        [&](const Eigen::VectorXd& x) { return post.log_density(x); }, v, 1e-5);
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double scale = std::max({1.0, std::abs(grad[i]), std::abs(fd[i])});
      CHECK(std::abs(grad[i] - fd[i]) / scale <= 1e-4);
    }
  }
}

TEST_CASE("likelihood gradient vanishes for variables with no data") {
  Rng rng(41);
  const int q = 6;
  const OrthoBasis basis = build_basis(q, 3);
  SparseFunctionalDataset data = fixtures::random_dataset(4, 2, 8, 3, rng);
  // Remove variable 2's observations so only its priors remain.
  data.y.conservativeResize(data.var_card[0]);
  data.subj.resize(static_cast<size_t>(data.var_card[0]));
  data.time_idx.resize(static_cast<size_t>(data.var_card[0]));
  data.var_card[1] = 0;
  ModelConfig config;
  config.n_components = 1;
  config.n_basis = q;
  config.n_vars = 2;
  const Posterior post(data, basis, config, 1);
  const ParameterState s = fixtures::random_state(2, q, 1, 4, rng);
  const Eigen::VectorXd v = post.to_unconstrained(s);
  Eigen::VectorXd grad;
  post.log_density_gradient(v, grad);

  // The mean-coefficient gradient of an empty block is pure penalty.
  const Eigen::VectorXd expected =
      -s.mean_smooth[1] * (basis.penalty_alpha(config.alpha) * s.mean_coef.segment(q, q));
  const Eigen::VectorXd got = grad.segment(2 + q, q);  // after log-noise (2), block 1 (q)
  CHECK((got - expected).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("parallel likelihood evaluation is deterministic") {
  Rng rng(53);
  const OrthoBasis basis = build_basis(6, 3);
  const SparseFunctionalDataset data = fixtures::random_dataset(6, 3, 9, 4, rng);
  ModelConfig config;
  config.n_components = 2;
  config.n_basis = 6;
  config.n_vars = 3;
  const Posterior serial(data, basis, config, 1);
  const Posterior parallel(data, basis, config, 3);
  const ParameterState s = fixtures::random_state(3, 6, 2, 6, rng);
  CHECK(serial.log_likelihood(s) == parallel.log_likelihood(s));
  const Eigen::VectorXd v = serial.to_unconstrained(s);
  Eigen::VectorXd g1, g2;
  const double l1 = serial.log_density_gradient(v, g1);
  const double l2 = parallel.log_density_gradient(v, g2);
  CHECK(l1 == l2);
  CHECK((g1 - g2).cwiseAbs().maxCoeff() == 0.0);
}

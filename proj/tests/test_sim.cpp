#include "doctest.h"

#include <set>
#include <map>
#include <tuple>

#include "msfpca/postprocess.hpp"
#include "msfpca/sim.hpp"
#include "support/oracles.hpp"

using namespace msfpca;

TEST_CASE("noise variance follows the signal-to-noise definition") {
  SimScenario sc;
  sc.n_vars = 3;
  sc.snr = 4.0;
  CHECK(sc.noise_variance() == doctest::Approx(1.75 / 4.0));  // 0.4375

  SimScenario u;
  u.univariate = true;
  u.snr = 2.0;
  CHECK(u.noise_variance() == doctest::Approx(0.875));
  u.snr = 5.0;
  CHECK(u.noise_variance() == doctest::Approx(0.35));
}

TEST_CASE("design components are orthonormal on the dense grid") {
  const int m = 100;
  const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(m, 0.0, 1.0);

  SUBCASE("multivariate family under the sum inner product") {
    const int p_count = 3, k = 3;
    for (int j = 0; j < k; ++j) {
      for (int l = 0; l < k; ++l) {
        double inner = 0.0;
        for (int p = 0; p < p_count; ++p) {
          Eigen::VectorXd fj(m), fl(m);
          for (int g = 0; g < m; ++g) {
            fj[g] = design_fpc_multivariate(p, j, p_count, grid[g]);
            fl[g] = design_fpc_multivariate(p, l, p_count, grid[g]);
          }
          inner += oracles::trapezoid(grid, fj.cwiseProduct(fl));
        }
        CHECK(inner == doctest::Approx(j == l ? 1.0 : 0.0).epsilon(1e-3).scale(1.0));
      }
    }
  }
  SUBCASE("univariate family") {
    for (int j = 0; j < 3; ++j) {
      for (int l = 0; l < 3; ++l) {
        Eigen::VectorXd fj(m), fl(m);
        for (int g = 0; g < m; ++g) {
          fj[g] = design_fpc_univariate(j, grid[g]);
          fl[g] = design_fpc_univariate(l, grid[g]);
        }
        const double inner = oracles::trapezoid(grid, fj.cwiseProduct(fl));
        CHECK(inner == doctest::Approx(j == l ? 1.0 : 0.0).epsilon(1e-3).scale(1.0));
      }
    }
  }
}

TEST_CASE("generator respects counts, uniqueness, and the seed") {
  SimScenario sc;
  sc.n_subjects = 25;
  sc.n_vars = 3;
  sc.obs_min = 3;
  sc.obs_max = 7;
  sc.seed = 11;
  auto [records, truth] = generate_scenario(sc, 0);

  SUBCASE("per-(subject, variable) counts stay inside the configured range") {
    std::map<std::pair<std::string, std::string>, int> counts;
    for (const auto& r : records) ++counts[{r.subject, r.variable}];
    CHECK(counts.size() == 75);
    for (const auto& [key, c] : counts) {
      CHECK(c >= 3);
      CHECK(c <= 7);
    }
  }
  SUBCASE("no duplicate (subject, variable, time)") {
    std::set<std::tuple<std::string, std::string, double>> seen;
    for (const auto& r : records) {
      CHECK(seen.insert({r.subject, r.variable, r.time}).second);
    }
  }
  SUBCASE("same seed reproduces the records") {
    auto [again, truth2] = generate_scenario(sc, 0);
    REQUIRE(again.size() == records.size());
    for (size_t i = 0; i < records.size(); ++i) {
      CHECK(again[i].subject == records[i].subject);
      CHECK(again[i].value == records[i].value);
    }
  }
  SUBCASE("different replicates differ") {
    auto [other, truth3] = generate_scenario(sc, 1);
    bool any_diff = other.size() != records.size();
    for (size_t i = 0; !any_diff && i < std::min(other.size(), records.size()); ++i) {
      any_diff = other[i].value != records[i].value;
    }
    CHECK(any_diff);
  }
}

TEST_CASE("empirical score variance matches the eigenvalues") {
  SimScenario sc;
  sc.n_subjects = 10000;
  sc.n_vars = 2;
  sc.grid_size = 10;
  sc.obs_min = 1;
  sc.obs_max = 1;
  auto [records, truth] = generate_scenario(sc, 0);
  const Eigen::VectorXd lam = sc.effective_eigenvalues();
  for (int k = 0; k < sc.n_components; ++k) {
    const double var =
        truth.scores_true.col(k).squaredNorm() / static_cast<double>(sc.n_subjects);
    CHECK(std::abs(var - lam[k]) / lam[k] <= 0.05);
  }
}

TEST_CASE("trajectory metrics against brute-force arithmetic") {
  // Two subjects, one variable, two grid points.
  GroundTruth truth;
  truth.grid = Eigen::VectorXd::LinSpaced(2, 0.0, 1.0);
  truth.mean_true = Eigen::MatrixXd::Zero(2, 1);
  truth.fpc_true = {Eigen::MatrixXd::Zero(2, 1)};
  truth.smooth = {Eigen::MatrixXd(2, 2)};
  truth.smooth[0] << 1.0, 2.0, 3.0, 5.0;
  truth.scores_true = Eigen::MatrixXd::Zero(2, 1);
  truth.noise_var_true = Eigen::VectorXd::Constant(1, 0.1);

  std::vector<LongRecord> records = {
      {"a", "v", 0.0, 1.5}, {"a", "v", 1.0, 2.5}, {"b", "v", 0.0, 4.0}};
  const std::vector<std::string> subjects = {"a", "b"};
  const std::vector<std::string> variables = {"v"};
  const std::vector<int> keep = {0, 1};

  SUBCASE("subject-mean predictions give RISE exactly one") {
    std::vector<Eigen::MatrixXd> pred = {Eigen::MatrixXd(2, 2)};
    pred[0] << 2.0, 2.0, 4.0, 4.0;  // subject means of observed values
    const TrajectoryAccuracy acc =
        trajectory_accuracy(pred, truth, records, subjects, variables, keep);
    CHECK(acc.rise[0] == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("perfect predictions give RISE zero") {
    std::vector<Eigen::MatrixXd> pred = {truth.smooth[0]};
    const TrajectoryAccuracy acc =
        trajectory_accuracy(pred, truth, records, subjects, variables, keep);
    CHECK(acc.rise[0] == 0.0);
  }
  SUBCASE("hand-computed ratio for an arbitrary prediction") {
    std::vector<Eigen::MatrixXd> pred = {Eigen::MatrixXd(2, 2)};
    pred[0] << 1.5, 2.5, 3.5, 4.5;
    const TrajectoryAccuracy acc =
        trajectory_accuracy(pred, truth, records, subjects, variables, keep);
    // ISE = mean over subjects of mean over grid of squared error.
    const double ise = 0.5 * ((0.25 + 0.25) / 2.0 + (0.25 + 0.25) / 2.0);
    // Baseline: subject a mean 2 -> errors (1, 0); subject b mean 4 -> (1, 1).
    const double base = 0.5 * ((1.0 + 0.0) / 2.0 + (1.0 + 1.0) / 2.0);
    CHECK(acc.ise[0] == doctest::Approx(ise).epsilon(1e-12));
    CHECK(acc.baseline_ise[0] == doctest::Approx(base).epsilon(1e-12));
    CHECK(acc.rise[0] == doctest::Approx(ise / base).epsilon(1e-12));
  }
  SUBCASE("subjects without observations are excluded and counted") {
    std::vector<LongRecord> only_a = {{"a", "v", 0.0, 1.5}, {"a", "v", 1.0, 2.5}};
    std::vector<Eigen::MatrixXd> pred = {truth.smooth[0]};
    const TrajectoryAccuracy acc =
        trajectory_accuracy(pred, truth, only_a, subjects, variables, keep);
    CHECK(acc.excluded[0] == 1);
    CHECK(acc.rise[0] == 0.0);
  }
}

TEST_CASE("component ISE basics") {
  Eigen::VectorXd truth(5);
  truth << 1.0, 2.0, 0.5, -1.0, 0.0;
  SUBCASE("exact estimate") { CHECK(function_ise(truth, truth) == 0.0); }
  SUBCASE("constant offset squares") {
    const Eigen::VectorXd est = truth.array() + 0.3;
    CHECK(function_ise(est, truth) == doctest::Approx(0.09).epsilon(1e-12));
  }
  SUBCASE("a sign flip is absorbed by Procrustes alignment") {
    // One-column alignment of -phi onto phi is the rotation -1.
    Eigen::MatrixXd phi(5, 1);
    phi << 0.3, -0.7, 1.1, 0.2, -0.4;
    const Eigen::MatrixXd rot = procrustes_rotation(-phi, phi);
    CHECK(rot(0, 0) == doctest::Approx(-1.0));
    const Eigen::VectorXd aligned = (-phi) * rot(0, 0);
    CHECK(function_ise(aligned, phi) <= 1e-24);
  }
}

TEST_CASE("coverage counting") {
  Eigen::MatrixXd truth(1, 3), lo(1, 3), hi(1, 3);
  truth << 0.0, 1.0, 2.0;
  SUBCASE("infinite intervals always cover") {
    lo.setConstant(-1e300);
    hi.setConstant(1e300);
    CHECK(coverage_proportion(lo, hi, truth) == 1.0);
  }
  SUBCASE("zero-width wrong intervals never cover") {
    lo << 5.0, 5.0, 5.0;
    hi = lo;
    CHECK(coverage_proportion(lo, hi, truth) == 0.0);
  }
  SUBCASE("two of three") {
    lo << -0.5, 0.5, 3.0;
    hi << 0.5, 1.5, 4.0;
    CHECK(coverage_proportion(lo, hi, truth) == doctest::Approx(2.0 / 3.0));
  }
}

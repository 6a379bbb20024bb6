#include "msfpca/sim.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

#include "msfpca/errors.hpp"
#include "msfpca/postprocess.hpp"
#include "msfpca/predict.hpp"

namespace msfpca {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::string padded_name(const char* prefix, int index, int width) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%0*d", prefix, width, index + 1);
  return std::string(buf);
}

}  // namespace

void SimScenario::validate() const {
  if (n_subjects < 2) throw ConfigError("scenario needs at least two subjects");
  if (grid_size < 4) throw ConfigError("scenario grid too small");
  if (obs_min < 1 || obs_max < obs_min || obs_max > grid_size) {
    throw ConfigError("observation count range must satisfy 1 <= min <= max <= grid");
  }
  if (!(snr > 0.0)) throw ConfigError("signal-to-noise ratio must be positive");
  if (n_components < 1) throw ConfigError("need at least one component");
  if (n_replicates < 1) throw ConfigError("need at least one replicate");
  if (univariate && n_components > 3) {
    throw ConfigError("the univariate design defines only three components");
  }
  const Eigen::VectorXd lam = effective_eigenvalues();
  for (Eigen::Index j = 1; j < lam.size(); ++j) {
    if (!(lam[j] <= lam[j - 1]) || !(lam[j] > 0.0)) {
      throw ConfigError("eigenvalues must be positive descending");
    }
  }
}

Eigen::VectorXd SimScenario::effective_eigenvalues() const {
  if (eigenvalues.size() > 0) return eigenvalues;
  Eigen::VectorXd lam(n_components);
  for (int k = 0; k < n_components; ++k) lam[k] = std::pow(0.5, k);
  return lam;
}

double SimScenario::noise_variance() const {
  return effective_eigenvalues().sum() / snr;
}

Eigen::MatrixXd GroundTruth::fpc_matrix() const {
  const int m = static_cast<int>(grid.size());
  const int p_count = static_cast<int>(fpc_true.size());
  const int k = static_cast<int>(fpc_true.front().cols());
  Eigen::MatrixXd out(p_count * m, k);
  for (int p = 0; p < p_count; ++p) {
    out.middleRows(p * m, m) = fpc_true[static_cast<size_t>(p)];
  }
  return out;
}

double design_mean_multivariate(int p, double t) {
  const int p1 = p + 1;
  const double sign = (p1 % 2 == 0) ? 1.0 : -1.0;
  return sign * 2.0 * std::sin((kTwoPi + p1) * t);
}

double design_fpc_multivariate(int p, int k, int n_vars, double t) {
  const int p1 = p + 1;
  const int k1 = k + 1;
  const double sign = (p1 % 2 == 0) ? 1.0 : -1.0;
  const double amp = std::sqrt(2.0 / n_vars);
  const double freq = 2.0 * ((k1 - 1) / 2 + 1) * std::numbers::pi;
  return k1 % 2 == 1 ? sign * amp * std::sin(freq * t) : sign * amp * std::cos(freq * t);
}

double design_mean_univariate(double t) { return 5.0 * std::sin(kTwoPi * t); }

double design_fpc_univariate(int k, double t) {
  const double amp = std::sqrt(2.0);
  switch (k) {
    case 0:
      return amp * std::sin(kTwoPi * t);
    case 1:
      return amp * std::cos(2.0 * kTwoPi * t);
    case 2:
      return amp * std::sin(2.0 * kTwoPi * t);
    default:
      throw ConfigError("univariate design has three components");
  }
}

std::pair<std::vector<LongRecord>, GroundTruth> generate_scenario(
    const SimScenario& scenario, std::uint64_t replicate) {
  scenario.validate();
  const int p_count = scenario.univariate ? 1 : scenario.n_vars;
  const int k = scenario.n_components;
  const int n = scenario.n_subjects;
  const int m = scenario.grid_size;
  const Eigen::VectorXd lam = scenario.effective_eigenvalues();
  const double sigma2 = scenario.noise_variance();

  GroundTruth truth;
  truth.grid = Eigen::VectorXd::LinSpaced(m, 0.0, 1.0);
  truth.mean_true.resize(m, p_count);
  truth.fpc_true.assign(static_cast<size_t>(p_count), Eigen::MatrixXd(m, k));
  for (int p = 0; p < p_count; ++p) {
    for (int g = 0; g < m; ++g) {
      const double t = truth.grid[g];
      truth.mean_true(g, p) = scenario.univariate ? design_mean_univariate(t)
                                                  : design_mean_multivariate(p, t);
      for (int j = 0; j < k; ++j) {
        truth.fpc_true[static_cast<size_t>(p)](g, j) =
            scenario.univariate ? design_fpc_univariate(j, t)
                                : design_fpc_multivariate(p, j, p_count, t);
      }
    }
  }
  truth.noise_var_true = Eigen::VectorXd::Constant(p_count, sigma2);

  Rng score_rng = Rng::substream(scenario.seed, replicate, 0);
  truth.scores_true.resize(n, k);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) {
      truth.scores_true(i, j) = std::sqrt(lam[j]) * score_rng.normal();
    }
  }
  truth.smooth.assign(static_cast<size_t>(p_count), Eigen::MatrixXd(n, m));
  for (int p = 0; p < p_count; ++p) {
    truth.smooth[static_cast<size_t>(p)] =
        truth.scores_true * truth.fpc_true[static_cast<size_t>(p)].transpose();
    truth.smooth[static_cast<size_t>(p)].rowwise() += truth.mean_true.col(p).transpose();
  }

  const double noise_sd = std::sqrt(sigma2);
  const int subj_width = n >= 1000 ? 5 : 4;
  std::vector<LongRecord> records;
  records.reserve(static_cast<size_t>(n * p_count * scenario.obs_max));
  for (int i = 0; i < n; ++i) {
    for (int p = 0; p < p_count; ++p) {
      // Independent substream per (subject, variable).
      Rng obs_rng = Rng::substream(scenario.seed, replicate,
                                   1 + static_cast<std::uint64_t>(i) * p_count + p);
      const int span = scenario.obs_max - scenario.obs_min + 1;
      const int count =
          scenario.obs_min + static_cast<int>(obs_rng.uniform_int(static_cast<std::uint64_t>(span)));
      const std::vector<int> picks = obs_rng.sample_without_replacement(m, count);
      for (int g : picks) {
        LongRecord rec;
        rec.subject = padded_name("s", i, subj_width);
        rec.variable = padded_name("v", p, 2);
        rec.time = truth.grid[g];
        rec.value = truth.smooth[static_cast<size_t>(p)](i, g) + noise_sd * obs_rng.normal();
        records.push_back(std::move(rec));
      }
    }
  }
  return {records, truth};
}

TrajectoryAccuracy trajectory_accuracy(
    const std::vector<Eigen::MatrixXd>& predicted_mean, const GroundTruth& truth,
    const std::vector<LongRecord>& records,
    const std::vector<std::string>& subject_order,
    const std::vector<std::string>& variable_order,
    const std::vector<int>& grid_keep) {
  const int p_count = static_cast<int>(variable_order.size());
  const int n = static_cast<int>(subject_order.size());
  std::map<std::string, int> subj_idx, var_idx;
  for (int i = 0; i < n; ++i) subj_idx[subject_order[static_cast<size_t>(i)]] = i;
  for (int p = 0; p < p_count; ++p) var_idx[variable_order[static_cast<size_t>(p)]] = p;

  // Subject-mean baseline from the observed values.
  Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(n, p_count);
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(n, p_count);
  for (const auto& r : records) {
    const int i = subj_idx.at(r.subject);
    const int p = var_idx.at(r.variable);
    sums(i, p) += r.value;
    counts(i, p) += 1.0;
  }

  TrajectoryAccuracy out;
  out.ise.setZero(p_count);
  out.baseline_ise.setZero(p_count);
  out.rise.setZero(p_count);
  out.excluded.assign(static_cast<size_t>(p_count), 0);
  const double weight = 1.0 / static_cast<double>(grid_keep.size());
  for (int p = 0; p < p_count; ++p) {
    int used = 0;
    double ise = 0.0, base = 0.0;
    for (int i = 0; i < n; ++i) {
      if (counts(i, p) == 0.0) {
        ++out.excluded[static_cast<size_t>(p)];
        continue;
      }
      ++used;
      const double mean_value = sums(i, p) / counts(i, p);
      for (size_t gi = 0; gi < grid_keep.size(); ++gi) {
        const int g = grid_keep[gi];
        const double y_true = truth.smooth[static_cast<size_t>(p)](i, g);
        const double e1 = predicted_mean[static_cast<size_t>(p)](i, static_cast<int>(gi)) - y_true;
        const double e2 = mean_value - y_true;
        ise += weight * e1 * e1;
        base += weight * e2 * e2;
      }
    }
    if (used > 0) {
      ise /= used;
      base /= used;
    }
    out.ise[p] = ise;
    out.baseline_ise[p] = base;
    out.rise[p] = base > 0.0 ? ise / base : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

double function_ise(const Eigen::VectorXd& estimate, const Eigen::VectorXd& truth) {
  return (estimate - truth).squaredNorm() / static_cast<double>(truth.size());
}

double coverage_proportion(const Eigen::MatrixXd& lo, const Eigen::MatrixXd& hi,
                           const Eigen::MatrixXd& truth) {
  double covered = 0.0;
  for (Eigen::Index i = 0; i < truth.rows(); ++i) {
    for (Eigen::Index j = 0; j < truth.cols(); ++j) {
      if (lo(i, j) <= truth(i, j) && truth(i, j) <= hi(i, j)) covered += 1.0;
    }
  }
  return covered / static_cast<double>(truth.size());
}

int StudyReport::n_ok() const {
  int count = 0;
  for (const auto& r : replicates) {
    if (!r.failed) ++count;
  }
  return count;
}

namespace {

std::uint64_t replicate_seed(std::uint64_t base, std::uint64_t replicate) {
  return base ^ (0x9e3779b97f4a7c15ULL * (replicate + 1));
}

// Read back an external predictor's CSV: subject,variable,time,mean,lo95,hi95.
void read_external_predictions(const std::string& path,
                               const std::map<std::string, int>& subj_idx,
                               const std::map<std::string, int>& var_idx,
                               const std::map<double, int>& time_idx,
                               std::vector<Eigen::MatrixXd>& mean,
                               std::vector<Eigen::MatrixXd>& lo,
                               std::vector<Eigen::MatrixXd>& hi) {
  std::ifstream in(path);
  if (!in) throw DataError("external predictor produced no output file");
  std::string line;
  if (!std::getline(in, line)) throw DataError("external prediction file is empty");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string subject, variable, field;
    std::getline(ss, subject, ',');
    std::getline(ss, variable, ',');
    std::getline(ss, field, ',');
    const double t = std::stod(field);
    const auto ti = time_idx.lower_bound(t - 1e-6);
    if (ti == time_idx.end() || std::abs(ti->first - t) > 1e-6) {
      throw DataError("external prediction at unknown time " + field);
    }
    const int g = ti->second;
    const int i = subj_idx.at(subject);
    const int p = var_idx.at(variable);
    std::getline(ss, field, ',');
    mean[static_cast<size_t>(p)](i, g) = std::stod(field);
    std::getline(ss, field, ',');
    lo[static_cast<size_t>(p)](i, g) = std::stod(field);
    std::getline(ss, field, ',');
    hi[static_cast<size_t>(p)](i, g) = std::stod(field);
  }
}

ReplicateMetrics run_replicate(const SimScenario& scenario, int replicate) {
  ReplicateMetrics out;
  out.replicate = replicate;
  const auto t_start = std::chrono::steady_clock::now();
  try {
    auto [records, truth] = generate_scenario(scenario, static_cast<std::uint64_t>(replicate));
    auto [data, scaling] = standardize(records);
    const int p_count = data.n_vars;
    const int k = scenario.n_components;

    // Grid points inside the observed range (prediction never extrapolates).
    std::vector<int> grid_keep;
    Eigen::VectorXd kept_times;
    {
      std::vector<double> kept;
      for (int g = 0; g < scenario.grid_size; ++g) {
        const double u = scaling.time_to_unit(truth.grid[g]);
        if (u >= -1e-12 && u <= 1.0 + 1e-12) {
          grid_keep.push_back(g);
          kept.push_back(truth.grid[g]);
        }
      }
      kept_times = Eigen::Map<const Eigen::VectorXd>(kept.data(),
                                                     static_cast<Eigen::Index>(kept.size()));
    }

    if (!scenario.external_command.empty()) {
      // Subprocess contract: <cmd> <data.csv> <targets.csv> <out.csv>.
      namespace fs = std::filesystem;
      const fs::path dir = fs::temp_directory_path() /
                           ("msfpca_ext_" + std::to_string(scenario.seed) + "_" +
                            std::to_string(replicate));
      fs::create_directories(dir);
      const fs::path data_csv = dir / "data.csv";
      const fs::path targets_csv = dir / "targets.csv";
      const fs::path out_csv = dir / "predictions.csv";
      {
        std::ofstream f(data_csv);
        f << "subject,variable,time,value\n";
        char tb[40], vb[40];
        for (const auto& r : records) {
          std::snprintf(tb, sizeof(tb), "%.17g", r.time);
          std::snprintf(vb, sizeof(vb), "%.17g", r.value);
          f << r.subject << ',' << r.variable << ',' << tb << ',' << vb << '\n';
        }
        std::ofstream g(targets_csv);
        g << "time\n";
        char buf[40];
        for (int gk : grid_keep) {
          std::snprintf(buf, sizeof(buf), "%.17g", truth.grid[gk]);
          g << buf << '\n';
        }
      }
      const std::string cmd = scenario.external_command + " \"" + data_csv.string() +
                              "\" \"" + targets_csv.string() + "\" \"" +
                              out_csv.string() + "\"";
      if (std::system(cmd.c_str()) != 0) {
        throw DataError("external predictor command failed");
      }
      std::map<std::string, int> subj_idx, var_idx;
      for (size_t i = 0; i < data.subject_names.size(); ++i) {
        subj_idx[data.subject_names[i]] = static_cast<int>(i);
      }
      for (size_t p = 0; p < data.variable_names.size(); ++p) {
        var_idx[data.variable_names[p]] = static_cast<int>(p);
      }
      std::map<double, int> time_idx;
      for (size_t gi = 0; gi < grid_keep.size(); ++gi) {
        time_idx[truth.grid[grid_keep[gi]]] = static_cast<int>(gi);
      }
      std::vector<Eigen::MatrixXd> mean(static_cast<size_t>(p_count),
                                        Eigen::MatrixXd::Zero(data.n_subjects,
                                                              static_cast<int>(grid_keep.size())));
      std::vector<Eigen::MatrixXd> lo = mean, hi = mean;
      read_external_predictions(out_csv.string(), subj_idx, var_idx, time_idx, mean, lo, hi);
      const TrajectoryAccuracy acc = trajectory_accuracy(
          mean, truth, records, data.subject_names, data.variable_names, grid_keep);
      out.rise = acc.rise;
      out.trajectory_coverage.setZero(p_count);
      for (int p = 0; p < p_count; ++p) {
        Eigen::MatrixXd truth_keep(data.n_subjects, static_cast<int>(grid_keep.size()));
        for (size_t gi = 0; gi < grid_keep.size(); ++gi) {
          truth_keep.col(static_cast<int>(gi)) =
              truth.smooth[static_cast<size_t>(p)].col(grid_keep[gi]);
        }
        out.trajectory_coverage[p] = coverage_proportion(
            lo[static_cast<size_t>(p)], hi[static_cast<size_t>(p)], truth_keep);
      }
      out.mean_ise = Eigen::VectorXd::Constant(p_count, std::numeric_limits<double>::quiet_NaN());
      out.fpc_ise = Eigen::MatrixXd::Constant(k, p_count, std::numeric_limits<double>::quiet_NaN());
      out.mean_coverage = out.mean_ise;
      out.fpc_coverage = out.fpc_ise;
      out.seconds_total =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
      return out;
    }

    const OrthoBasis basis = build_basis(scenario.n_basis);
    ModelConfig model;
    model.n_components = k;
    model.n_basis = scenario.n_basis;
    model.n_vars = p_count;
    SamplerConfig sampler = scenario.sampler;
    sampler.seed = replicate_seed(scenario.seed, static_cast<std::uint64_t>(replicate));
    sampler.n_threads = 1;  // replicates own the parallelism

    PosteriorDraws draws = run_sampler(sampler, data, basis, model);
    draws.scaling = scaling;
    out.divergence_flag = draws.divergence_flag;

    // Align to the truth FPCs evaluated on the pooled fit grid.
    Eigen::MatrixXd reference(p_count * draws.times.size(), k);
    for (int p = 0; p < p_count; ++p) {
      for (Eigen::Index mi = 0; mi < draws.times.size(); ++mi) {
        const double t = scaling.time_from_unit(draws.times[mi]);
        for (int j = 0; j < k; ++j) {
          reference(p * draws.times.size() + mi, j) =
              scenario.univariate ? design_fpc_univariate(j, t)
                                  : design_fpc_multivariate(p, j, p_count, t);
        }
      }
    }
    const AlignedDraws aligned = procrustes_align(draws, basis, reference, "truth");
    const ConvergenceSummary conv = convergence_summary(draws, aligned);
    out.max_rhat = conv.max_rhat;
    out.rhat_flagged = conv.n_flagged;

    // Subject trajectories: stream subjects through the cached reconstruction.
    const int n_keep = static_cast<int>(grid_keep.size());
    Eigen::VectorXd unit_keep(n_keep);
    for (int gi = 0; gi < n_keep; ++gi) {
      unit_keep[gi] = scaling.time_to_unit(truth.grid[grid_keep[static_cast<size_t>(gi)]]);
    }
    const ReconstructionCache cache(draws, basis, unit_keep, nullptr);
    const int total = cache.n_draws();
    std::vector<Eigen::MatrixXd> pred_mean(static_cast<size_t>(p_count),
                                           Eigen::MatrixXd::Zero(data.n_subjects, n_keep));
    out.trajectory_coverage.setZero(p_count);
    std::vector<double> cover_acc(static_cast<size_t>(p_count), 0.0);
    Eigen::MatrixXd subject_draws(total, n_keep);
    for (int i = 0; i < data.n_subjects; ++i) {
      for (int p = 0; p < p_count; ++p) {
        for (int s = 0; s < total; ++s) {
          const Eigen::VectorXd xi = cache.stored_scores(s, i);
          Eigen::VectorXd smooth = cache.smooth(s, p, xi);
          for (int g = 0; g < n_keep; ++g) {
            subject_draws(s, g) = destandardize_value(smooth[g], scaling, p);
          }
        }
        for (int g = 0; g < n_keep; ++g) {
          const double truth_val =
              truth.smooth[static_cast<size_t>(p)](i, grid_keep[static_cast<size_t>(g)]);
          pred_mean[static_cast<size_t>(p)](i, g) = subject_draws.col(g).mean();
          std::vector<double> col(subject_draws.col(g).data(),
                                  subject_draws.col(g).data() + total);
          const double lo = empirical_quantile(col, 0.025);
          const double hi = empirical_quantile(std::move(col), 0.975);
          if (lo <= truth_val && truth_val <= hi) {
            cover_acc[static_cast<size_t>(p)] += 1.0;
          }
        }
      }
    }
    for (int p = 0; p < p_count; ++p) {
      out.trajectory_coverage[p] =
          cover_acc[static_cast<size_t>(p)] / static_cast<double>(data.n_subjects * n_keep);
    }
    const TrajectoryAccuracy acc = trajectory_accuracy(
        pred_mean, truth, records, data.subject_names, data.variable_names, grid_keep);
    out.rise = acc.rise;

    // Component estimates: destandardized means, aligned standardized FPCs.
    const Eigen::MatrixXd basis_keep = basis.evaluate(unit_keep);
    out.mean_ise.setZero(p_count);
    out.mean_coverage.setZero(p_count);
    Eigen::MatrixXd mean_draws(total, n_keep);
    for (int p = 0; p < p_count; ++p) {
      for (int s = 0; s < total; ++s) {
        const Eigen::VectorXd mu =
            basis_keep * draws.draw(s).mean_coef.segment(p * scenario.n_basis, scenario.n_basis);
        for (int g = 0; g < n_keep; ++g) {
          mean_draws(s, g) = destandardize_value(mu[g], scaling, p);
        }
      }
      Eigen::VectorXd mu_hat(n_keep), truth_vec(n_keep);
      double covered = 0.0;
      for (int g = 0; g < n_keep; ++g) {
        truth_vec[g] = truth.mean_true(grid_keep[static_cast<size_t>(g)], p);
        mu_hat[g] = mean_draws.col(g).mean();
        std::vector<double> col(mean_draws.col(g).data(), mean_draws.col(g).data() + total);
        const double lo = empirical_quantile(col, 0.025);
        const double hi = empirical_quantile(std::move(col), 0.975);
        if (lo <= truth_vec[g] && truth_vec[g] <= hi) covered += 1.0;
      }
      out.mean_ise[p] = function_ise(mu_hat, truth_vec);
      out.mean_coverage[p] = covered / n_keep;
    }

    const FpcEstimate est = posterior_fpc_estimate(aligned, basis);
    out.fpc_ise.setZero(k, p_count);
    out.fpc_coverage.setZero(k, p_count);
    Eigen::MatrixXd fpc_draws(total, n_keep);
    for (int p = 0; p < p_count; ++p) {
      for (int j = 0; j < k; ++j) {
        for (int s = 0; s < total; ++s) {
          const Eigen::VectorXd phi =
              basis_keep * aligned.fpc_coef[static_cast<size_t>(s)].col(j).segment(
                               p * scenario.n_basis, scenario.n_basis);
          fpc_draws.row(s) = phi.transpose();
        }
        Eigen::VectorXd phi_hat =
            basis_keep * est.fpc_coef.col(j).segment(p * scenario.n_basis, scenario.n_basis);
        Eigen::VectorXd truth_vec(n_keep);
        double covered = 0.0;
        for (int g = 0; g < n_keep; ++g) {
          truth_vec[g] = truth.fpc_true[static_cast<size_t>(p)](grid_keep[static_cast<size_t>(g)], j);
          std::vector<double> col(fpc_draws.col(g).data(), fpc_draws.col(g).data() + total);
          const double lo = empirical_quantile(col, 0.025);
          const double hi = empirical_quantile(std::move(col), 0.975);
          if (lo <= truth_vec[g] && truth_vec[g] <= hi) covered += 1.0;
        }
        out.fpc_ise(j, p) = function_ise(phi_hat, truth_vec);
        out.fpc_coverage(j, p) = covered / n_keep;
      }
    }
  } catch (const std::exception& e) {
    out.failed = true;
    out.error = e.what();
  }
  out.seconds_total =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return out;
}

}  // namespace

StudyReport run_study(const SimScenario& scenario, int n_workers) {
  scenario.validate();
  StudyReport report;
  report.scenario = scenario;
  report.replicates.resize(static_cast<size_t>(scenario.n_replicates));
  if (n_workers > 1) {
    int next = 0;
    while (next < scenario.n_replicates) {
      const int batch = std::min(n_workers, scenario.n_replicates - next);
      std::vector<std::future<ReplicateMetrics>> futures;
      futures.reserve(static_cast<size_t>(batch));
      for (int b = 0; b < batch; ++b) {
        const int r = next + b;
        futures.push_back(std::async(std::launch::async,
                                     [&scenario, r] { return run_replicate(scenario, r); }));
      }
      for (int b = 0; b < batch; ++b) {
        report.replicates[static_cast<size_t>(next + b)] = futures[static_cast<size_t>(b)].get();
      }
      next += batch;
    }
  } else {
    for (int r = 0; r < scenario.n_replicates; ++r) {
      report.replicates[static_cast<size_t>(r)] = run_replicate(scenario, r);
    }
  }
  return report;
}

std::vector<TimingRow> run_timing(const SimScenario& scenario,
                                  const std::vector<int>& subject_counts) {
  std::vector<TimingRow> rows;
  for (int count : subject_counts) {
    SimScenario s = scenario;
    s.n_subjects = count;
    s.n_replicates = 1;
    const auto t0 = std::chrono::steady_clock::now();
    auto [records, truth] = generate_scenario(s, 0);
    auto [data, scaling] = standardize(records);
    const OrthoBasis basis = build_basis(s.n_basis);
    ModelConfig model;
    model.n_components = s.n_components;
    model.n_basis = s.n_basis;
    model.n_vars = data.n_vars;
    SamplerConfig cfg = s.sampler;
    cfg.seed = replicate_seed(s.seed, 0);
    PosteriorDraws draws = run_sampler(cfg, data, basis, model);
    (void)draws;
    TimingRow row;
    row.n_subjects = count;
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(row);
  }
  return rows;
}

}  // namespace msfpca

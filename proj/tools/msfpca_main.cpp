// Command-line front end: fit, align, predict, dynamic-predict, simulate,
// and report subcommands over the core engine.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "msfpca/errors.hpp"
#include "msfpca/postprocess.hpp"
#include "msfpca/predict.hpp"
#include "msfpca/sampler.hpp"
#include "msfpca/sim.hpp"
#include "msfpca/store.hpp"
#include "msfpca/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace msfpca;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitConvergence = 4;

int default_threads() {
  if (const char* env = std::getenv("MSFPCA_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError("cannot parse '" + path + "': " + std::string(e.what()));
  }
  return j;
}

template <typename T>
T require_key(const json& j, const std::string& key) {
  if (!j.contains(key)) throw ConfigError("missing config key '" + key + "'");
  return j.at(key).get<T>();
}

struct FitConfig {
  ModelConfig model;
  SamplerConfig sampler;
  int degree = 3;
  int quad_points = 10;
};

FitConfig parse_fit_config(const json& j, int n_vars) {
  FitConfig out;
  out.model.n_components = require_key<int>(j, "K");
  out.model.n_basis = require_key<int>(j, "Q");
  out.model.n_vars = n_vars;
  out.model.alpha = j.value("alpha", 0.1);
  out.degree = j.value("degree", 3);
  out.quad_points = j.value("quad_points", 10);
  if (j.contains("priors")) {
    const json& p = j.at("priors");
    PriorConfig& pr = out.model.priors;
    pr.noise_shape = p.value("noise_shape", pr.noise_shape);
    pr.noise_scale = p.value("noise_scale", pr.noise_scale);
    pr.eigval_shape = p.value("eigval_shape", pr.eigval_shape);
    pr.eigval_scale = p.value("eigval_scale", pr.eigval_scale);
    pr.mean_smooth_shape = p.value("mean_smooth_shape", pr.mean_smooth_shape);
    pr.mean_smooth_rate = p.value("mean_smooth_rate", pr.mean_smooth_rate);
    pr.fpc_smooth_shape = p.value("fpc_smooth_shape", pr.fpc_smooth_shape);
    pr.fpc_smooth_rate = p.value("fpc_smooth_rate", pr.fpc_smooth_rate);
  }
  if (j.contains("sampler")) {
    const json& s = j.at("sampler");
    out.sampler.n_chains = s.value("chains", out.sampler.n_chains);
    out.sampler.n_warmup = s.value("warmup", out.sampler.n_warmup);
    out.sampler.n_samples = s.value("samples", out.sampler.n_samples);
    out.sampler.seed = s.value("seed", out.sampler.seed);
    out.sampler.target_accept = s.value("target_accept", out.sampler.target_accept);
    out.sampler.max_treedepth = s.value("max_treedepth", out.sampler.max_treedepth);
    const std::string mode = s.value("mode", std::string("blocked-gibbs"));
    if (mode == "full-hmc") {
      out.sampler.mode = SamplerMode::kFullHmc;
    } else if (mode == "blocked-gibbs") {
      out.sampler.mode = SamplerMode::kBlockedGibbs;
    } else {
      throw ConfigError("unknown sampler mode '" + mode + "'");
    }
  }
  return out;
}

json effective_config_json(const FitConfig& cfg) {
  json j;
  j["K"] = cfg.model.n_components;
  j["Q"] = cfg.model.n_basis;
  j["alpha"] = cfg.model.alpha;
  j["degree"] = cfg.degree;
  j["quad_points"] = cfg.quad_points;
  j["priors"] = {{"noise_shape", cfg.model.priors.noise_shape},
                 {"noise_scale", cfg.model.priors.noise_scale},
                 {"eigval_shape", cfg.model.priors.eigval_shape},
                 {"eigval_scale", cfg.model.priors.eigval_scale},
                 {"mean_smooth_shape", cfg.model.priors.mean_smooth_shape},
                 {"mean_smooth_rate", cfg.model.priors.mean_smooth_rate},
                 {"fpc_smooth_shape", cfg.model.priors.fpc_smooth_shape},
                 {"fpc_smooth_rate", cfg.model.priors.fpc_smooth_rate}};
  j["sampler"] = {{"chains", cfg.sampler.n_chains},
                  {"warmup", cfg.sampler.n_warmup},
                  {"samples", cfg.sampler.n_samples},
                  {"seed", cfg.sampler.seed},
                  {"mode", cfg.sampler.mode == SamplerMode::kFullHmc ? "full-hmc"
                                                                     : "blocked-gibbs"},
                  {"target_accept", cfg.sampler.target_accept},
                  {"max_treedepth", cfg.sampler.max_treedepth}};
  return j;
}

SimScenario parse_scenario(const json& j) {
  SimScenario sc;
  sc.univariate = j.value("univariate", false);
  sc.n_vars = j.value("P", sc.univariate ? 1 : 3);
  sc.n_components = j.value("K", 3);
  sc.n_subjects = require_key<int>(j, "I");
  sc.grid_size = j.value("M", 100);
  sc.obs_min = j.value("obs_min", 3);
  sc.obs_max = j.value("obs_max", 7);
  sc.snr = j.value("snr", 4.0);
  sc.seed = j.value("seed", static_cast<std::uint64_t>(1));
  sc.n_replicates = j.value("replicates", 20);
  sc.n_basis = j.value("Q", 20);
  sc.external_command = j.value("external_command", std::string());
  if (j.contains("eigenvalues")) {
    const auto vals = j.at("eigenvalues").get<std::vector<double>>();
    sc.eigenvalues = Eigen::Map<const Eigen::VectorXd>(
        vals.data(), static_cast<Eigen::Index>(vals.size()));
  }
  sc.sampler.n_chains = 2;
  sc.sampler.n_warmup = 500;
  sc.sampler.n_samples = 500;
  sc.sampler.mode = SamplerMode::kBlockedGibbs;
  if (j.contains("sampler")) {
    const json& s = j.at("sampler");
    sc.sampler.n_chains = s.value("chains", sc.sampler.n_chains);
    sc.sampler.n_warmup = s.value("warmup", sc.sampler.n_warmup);
    sc.sampler.n_samples = s.value("samples", sc.sampler.n_samples);
    sc.sampler.target_accept = s.value("target_accept", sc.sampler.target_accept);
    sc.sampler.max_treedepth = s.value("max_treedepth", sc.sampler.max_treedepth);
    const std::string mode = s.value("mode", std::string("blocked-gibbs"));
    sc.sampler.mode =
        mode == "full-hmc" ? SamplerMode::kFullHmc : SamplerMode::kBlockedGibbs;
  }
  return sc;
}

// Aligned draws if persisted; otherwise a fresh default alignment.
AlignedDraws alignment_for(const std::string& dir, const PosteriorDraws& draws,
                           const OrthoBasis& basis) {
  if (has_aligned(dir)) return load_aligned(dir, draws);
  return procrustes_align(draws, basis, default_reference(draws, basis),
                          "posterior-mean-svd");
}

int subject_index(const PosteriorDraws& draws, const std::string& name) {
  for (size_t i = 0; i < draws.subject_names.size(); ++i) {
    if (draws.subject_names[i] == name) return static_cast<int>(i);
  }
  throw DataError("subject '" + name + "' is not in the fitted data");
}

int cmd_fit(const std::string& data_path, const std::string& config_path,
            const std::string& outdir, int threads) {
  const std::vector<LongRecord> records = ingest_long_csv(data_path);
  auto [data, scaling] = standardize(records);
  const FitConfig cfg = parse_fit_config(read_json_file(config_path), data.n_vars);
  cfg.model.validate();
  cfg.sampler.validate();
  const OrthoBasis basis = build_basis(cfg.model.n_basis, cfg.degree, cfg.quad_points);

  SamplerConfig sampler = cfg.sampler;
  sampler.n_threads = threads;
  PosteriorDraws draws = run_sampler(sampler, data, basis, cfg.model);
  draws.scaling = scaling;

  fs::create_directories(outdir);
  std::map<std::string, std::string> digests;
  digests[fs::path(data_path).filename().string()] = file_digest(data_path);
  digests[fs::path(config_path).filename().string()] = file_digest(config_path);
  save_draws(outdir, draws, digests, &data);
  {
    std::ofstream out(fs::path(outdir) / "effective_config.json");
    out << effective_config_json(cfg).dump(2) << "\n";
  }
  int total_div = 0;
  for (const auto& cs : draws.chain_stats) total_div += cs.divergences;
  std::cerr << "fit: " << draws.n_total_draws() << " draws, " << total_div
            << " divergences" << (draws.divergence_flag ? " (flagged)" : "") << "\n";
  return draws.divergence_flag ? kExitConvergence : 0;
}

int cmd_align(const std::string& dir, const std::string& reference_path) {
  const PosteriorDraws draws = load_draws(dir);
  const OrthoBasis basis = draws.rebuild_basis();
  AlignedDraws aligned;
  if (reference_path.empty()) {
    aligned = procrustes_align(draws, basis, default_reference(draws, basis),
                               "posterior-mean-svd");
  } else {
    const Eigen::MatrixXd reference = read_matrix_csv(reference_path);
    aligned = procrustes_align(draws, basis, reference, "external");
  }
  const ConvergenceSummary conv = convergence_summary(draws, aligned);
  save_aligned(dir, aligned, conv);
  std::cerr << "align: max split R-hat " << conv.max_rhat << " over "
            << conv.names.size() << " scalars (" << conv.n_flagged << " above 1.05)\n";
  return conv.n_flagged > 0 ? kExitConvergence : 0;
}

int cmd_predict(const std::string& dir, std::vector<std::string> subjects,
                bool all_subjects, std::vector<double> times, int grid,
                bool with_noise, const std::string& out_path) {
  const PosteriorDraws draws = load_draws(dir);
  const OrthoBasis basis = draws.rebuild_basis();
  const AlignedDraws aligned = alignment_for(dir, draws, basis);

  if (all_subjects) subjects = draws.subject_names;
  std::vector<int> indices;
  for (const auto& name : subjects) indices.push_back(subject_index(draws, name));

  if (grid > 0) {
    times.clear();
    for (int g = 0; g < grid; ++g) {
      const double u = grid == 1 ? 0.0 : static_cast<double>(g) / (grid - 1);
      times.push_back(draws.scaling.time_from_unit(u));
    }
  }
  // Deduplicate targets; out-of-range rows are reported and skipped.
  std::vector<double> valid;
  std::set<double> seen;
  for (double t : times) {
    if (!seen.insert(t).second) {
      std::cerr << "predict: duplicate target time " << t << " dropped\n";
      continue;
    }
    const double u = draws.scaling.time_to_unit(t);
    if (u < 0.0 || u > 1.0) {
      std::cerr << "predict: time " << t << " outside the fitted range ["
                << draws.scaling.t_min << ", " << draws.scaling.t_max << "]\n";
      continue;
    }
    valid.push_back(t);
  }
  std::sort(valid.begin(), valid.end());
  TrajectorySummary summary;
  summary.subjects = subjects;
  summary.variables = draws.variable_names;
  if (!valid.empty()) {
    const Eigen::VectorXd t = Eigen::Map<const Eigen::VectorXd>(
        valid.data(), static_cast<Eigen::Index>(valid.size()));
    PredictOptions options;
    options.add_observation_noise = with_noise;
    Rng noise_rng = Rng::substream(draws.sampler_config.seed, 9001);
    const TrajectoryDraws traj = static_predict(draws, basis, indices, t, options,
                                                &aligned, with_noise ? &noise_rng : nullptr);
    summary = summarize(traj);
  } else {
    summary.times = Eigen::VectorXd();
    summary.mean.assign(draws.variable_names.size(),
                        Eigen::MatrixXd::Zero(static_cast<int>(subjects.size()), 0));
    summary.lo = summary.mean;
    summary.hi = summary.mean;
  }
  write_prediction_csv(out_path, summary);
  std::cerr << "predict: wrote " << out_path << " (" << valid.size() << " times, "
            << subjects.size() << " subjects)\n";
  return 0;
}

int cmd_dynamic(const std::string& dir, const std::string& new_data_path,
                const std::string& subject, double cutoff, double horizon, int grid,
                bool with_noise, const std::string& out_path) {
  const PosteriorDraws draws = load_draws(dir);
  const OrthoBasis basis = draws.rebuild_basis();
  const AlignedDraws aligned = alignment_for(dir, draws, basis);

  const std::vector<LongRecord> records = ingest_long_csv(new_data_path);
  std::set<std::string> subjects_present;
  for (const auto& r : records) subjects_present.insert(r.subject);
  std::string chosen = subject;
  if (chosen.empty()) {
    if (subjects_present.size() != 1) {
      throw ConfigError("new data holds several subjects; pass --subject");
    }
    chosen = *subjects_present.begin();
  }
  std::map<std::string, int> var_index;
  for (size_t p = 0; p < draws.variable_names.size(); ++p) {
    var_index[draws.variable_names[p]] = static_cast<int>(p);
  }
  NewSubjectObservations obs(static_cast<int>(draws.variable_names.size()));
  std::vector<std::vector<double>> t_acc(draws.variable_names.size()),
      v_acc(draws.variable_names.size());
  for (const auto& r : records) {
    if (r.subject != chosen) continue;
    const auto it = var_index.find(r.variable);
    if (it == var_index.end()) {
      throw DataError("variable '" + r.variable + "' was not part of the fit");
    }
    t_acc[static_cast<size_t>(it->second)].push_back(r.time);
    v_acc[static_cast<size_t>(it->second)].push_back(r.value);
  }
  for (size_t p = 0; p < t_acc.size(); ++p) {
    obs.times[p] = Eigen::Map<const Eigen::VectorXd>(
        t_acc[p].data(), static_cast<Eigen::Index>(t_acc[p].size()));
    obs.values[p] = Eigen::Map<const Eigen::VectorXd>(
        v_acc[p].data(), static_cast<Eigen::Index>(v_acc[p].size()));
  }
  if (obs.empty()) throw DataError("no observations for subject '" + chosen + "'");

  const int n_grid = grid > 0 ? grid : 101;
  Eigen::VectorXd targets(n_grid);
  for (int g = 0; g < n_grid; ++g) {
    targets[g] = draws.scaling.time_from_unit(static_cast<double>(g) / (n_grid - 1));
  }
  PredictOptions options;
  options.add_observation_noise = with_noise;
  Rng rng = Rng::substream(draws.sampler_config.seed, 9002);
  const TrajectoryDraws traj = dynamic_predict(draws, basis, obs, cutoff, horizon,
                                               targets, rng, options, &aligned);
  TrajectorySummary summary = summarize(traj);
  summary.subjects = {chosen};
  write_prediction_csv(out_path, summary);
  std::cerr << "dynamic-predict: wrote " << out_path << " over ["
            << traj.times.minCoeff() << ", " << traj.times.maxCoeff() << "]\n";
  return 0;
}

int cmd_simulate(const std::string& scenario_path, const std::string& outdir,
                 int workers, const std::vector<int>& timing_subjects) {
  const SimScenario scenario = parse_scenario(read_json_file(scenario_path));
  fs::create_directories(outdir);
  if (!timing_subjects.empty()) {
    const auto rows = run_timing(scenario, timing_subjects);
    write_timing_csv((fs::path(outdir) / "timing.csv").string(), rows);
    std::cerr << "simulate: timing study written\n";
    return 0;
  }
  const StudyReport report = run_study(scenario, workers);
  write_study_report(outdir, report);
  std::cerr << "simulate: " << report.n_ok() << "/" << scenario.n_replicates
            << " replicates ok\n";
  return report.n_ok() == scenario.n_replicates ? 0 : kExitNumerical;
}

int cmd_report(const std::string& dir, std::vector<int> truncations) {
  const PosteriorDraws draws = load_draws(dir);
  const OrthoBasis basis = draws.rebuild_basis();
  const AlignedDraws aligned = alignment_for(dir, draws, basis);
  if (truncations.empty()) {
    for (int k = 1; k <= draws.model_config.n_components; ++k) truncations.push_back(k);
  }
  const VarianceExplained ve = variance_explained(aligned, truncations);
  write_variance_explained_csv((fs::path(dir) / "variance_explained.csv").string(), ve,
                               draws.variable_names);
  write_fpc_estimate_csv((fs::path(dir) / "fpc_estimate.csv").string(), aligned, basis);
  std::cerr << "report: wrote variance_explained.csv and fpc_estimate.csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian multivariate sparse functional principal components"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  auto* fit = app.add_subcommand("fit", "Fit the model to a long-format CSV");
  std::string fit_data, fit_config, fit_out;
  int threads = default_threads();
  fit->add_option("--data", fit_data, "long CSV: subject,variable,time,value")->required();
  fit->add_option("--config", fit_config, "model/sampler config JSON")->required();
  fit->add_option("--out", fit_out, "output directory")->required();
  fit->add_option("--threads", threads, "worker cap");

  auto* align = app.add_subcommand("align", "Procrustes-align persisted draws");
  std::string align_dir, align_ref;
  align->add_option("--draws", align_dir, "fit output directory")->required();
  align->add_option("--reference", align_ref, "external reference matrix CSV (PM x K)");

  auto* predict = app.add_subcommand("predict", "Latent trajectories of fitted subjects");
  std::string pred_dir, pred_out = "predictions.csv";
  std::vector<std::string> pred_subjects;
  std::vector<double> pred_times;
  int pred_grid = 0;
  bool pred_all = false, pred_noise = false;
  predict->add_option("--draws", pred_dir)->required();
  predict->add_option("--subjects", pred_subjects)->delimiter(',');
  predict->add_flag("--all-subjects", pred_all);
  predict->add_option("--times", pred_times)->delimiter(',');
  predict->add_option("--grid", pred_grid, "evaluate on an equally spaced grid");
  predict->add_flag("--with-noise", pred_noise, "observation-level intervals");
  predict->add_option("--out", pred_out);

  auto* dynamic = app.add_subcommand("dynamic-predict",
                                     "Score-resampling prediction for a new subject");
  std::string dyn_dir, dyn_data, dyn_subject, dyn_out = "dynamic_predictions.csv";
  double dyn_cutoff = 0.0, dyn_horizon = 0.0;
  int dyn_grid = 0;
  bool dyn_noise = false;
  dynamic->add_option("--draws", dyn_dir)->required();
  dynamic->add_option("--new-data", dyn_data, "long CSV of the new subject")->required();
  dynamic->add_option("--subject", dyn_subject);
  dynamic->add_option("--cutoff", dyn_cutoff, "use observations up to this time")->required();
  dynamic->add_option("--horizon", dyn_horizon, "predict this far past the cutoff")
      ->required();
  dynamic->add_option("--grid", dyn_grid);
  dynamic->add_flag("--with-noise", dyn_noise);
  dynamic->add_option("--out", dyn_out);

  auto* simulate = app.add_subcommand("simulate", "Replicated synthetic study");
  std::string sim_scenario, sim_out;
  int sim_workers = default_threads();
  std::vector<int> sim_timing;
  simulate->add_option("--scenario", sim_scenario, "scenario JSON")->required();
  simulate->add_option("--out", sim_out, "output directory")->required();
  simulate->add_option("--workers", sim_workers);
  simulate->add_option("--timing", sim_timing, "subject counts for a timing run")
      ->delimiter(',');

  auto* report = app.add_subcommand("report", "Variance explained and FPC estimates");
  std::string report_dir;
  std::vector<int> report_trunc;
  report->add_option("--draws", report_dir)->required();
  report->add_option("--truncations", report_trunc)->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  try {
    if (*fit) return cmd_fit(fit_data, fit_config, fit_out, threads);
    if (*align) return cmd_align(align_dir, align_ref);
    if (*predict) {
      return cmd_predict(pred_dir, pred_subjects, pred_all, pred_times, pred_grid,
                         pred_noise, pred_out);
    }
    if (*dynamic) {
      return cmd_dynamic(dyn_dir, dyn_data, dyn_subject, dyn_cutoff, dyn_horizon,
                         dyn_grid, dyn_noise, dyn_out);
    }
    if (*simulate) return cmd_simulate(sim_scenario, sim_out, sim_workers, sim_timing);
    if (*report) return cmd_report(report_dir, report_trunc);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  }
  return kExitUsage;
}

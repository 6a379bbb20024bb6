#include "msfpca/store.hpp"

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "json.hpp"

#include "msfpca/errors.hpp"
#include "msfpca/version.hpp"

namespace msfpca {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return std::string(buf);
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return std::string(buf);
}

json scaling_to_json(const ScalingRecord& s) {
  json j;
  j["variables"] = s.variables;
  j["mean"] = std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size());
  j["sd"] = std::vector<double>(s.sd.data(), s.sd.data() + s.sd.size());
  j["t_min"] = s.t_min;
  j["t_max"] = s.t_max;
  return j;
}

ScalingRecord scaling_from_json(const json& j) {
  ScalingRecord s;
  s.variables = j.at("variables").get<std::vector<std::string>>();
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto sd = j.at("sd").get<std::vector<double>>();
  s.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  s.sd = Eigen::Map<const Eigen::VectorXd>(sd.data(), static_cast<Eigen::Index>(sd.size()));
  s.t_min = j.at("t_min").get<double>();
  s.t_max = j.at("t_max").get<double>();
  return s;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << text;
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  json j;
  in >> j;
  return j;
}

// Dotted index suffixes; CSV headers cannot carry commas.
std::vector<std::string> indexed_names(const std::string& stem, int rows, int cols) {
  std::vector<std::string> names;
  names.reserve(static_cast<size_t>(rows * cols));
  for (int j = 0; j < cols; ++j) {
    for (int i = 0; i < rows; ++i) {
      names.push_back(stem + "." + std::to_string(i + 1) + "." + std::to_string(j + 1));
    }
  }
  return names;
}

std::vector<std::string> indexed_names(const std::string& stem, int n) {
  std::vector<std::string> names;
  names.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) names.push_back(stem + "." + std::to_string(i + 1));
  return names;
}

// One draws group: leading chain,draw columns then flattened values.
void write_group_csv(const std::string& path, const PosteriorDraws& draws,
                     const std::vector<std::string>& names,
                     const std::function<void(const ParameterState&, std::vector<double>&)>& fill) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << "chain,draw";
  for (const auto& n : names) out << ',' << n;
  out << '\n';
  std::vector<double> row(names.size());
  for (int c = 0; c < draws.n_chains(); ++c) {
    for (int s = 0; s < draws.n_draws_per_chain(); ++s) {
      fill(draws.chains[static_cast<size_t>(c)][static_cast<size_t>(s)], row);
      out << (c + 1) << ',' << (s + 1);
      for (double x : row) out << ',' << format_double(x);
      out << '\n';
    }
  }
}

Eigen::MatrixXd read_group_csv(const std::string& path, int expect_rows) {
  std::vector<std::string> names;
  const Eigen::MatrixXd m = read_matrix_csv(path, &names);
  if (m.rows() != expect_rows) {
    throw DataError("draw file '" + path + "' has unexpected row count");
  }
  return m.rightCols(m.cols() - 2);  // drop chain,draw
}

}  // namespace

std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "' for digest");
  std::uint64_t hash = 1469598103934665603ULL;
  char buf[65536];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    const std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      hash ^= static_cast<unsigned char>(buf[i]);
      hash *= 1099511628211ULL;
    }
  }
  char out[24];
  std::snprintf(out, sizeof(out), "fnv1a:%016llx", static_cast<unsigned long long>(hash));
  return std::string(out);
}

void write_matrix_csv(const std::string& path, const Eigen::MatrixXd& matrix,
                      const std::vector<std::string>& column_names) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  for (size_t j = 0; j < column_names.size(); ++j) {
    out << (j ? "," : "") << column_names[j];
  }
  out << '\n';
  for (Eigen::Index i = 0; i < matrix.rows(); ++i) {
    for (Eigen::Index j = 0; j < matrix.cols(); ++j) {
      out << (j ? "," : "") << format_double(matrix(i, j));
    }
    out << '\n';
  }
}

Eigen::MatrixXd read_matrix_csv(const std::string& path,
                                std::vector<std::string>* column_names) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty CSV '" + path + "'");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) header.push_back(f);
  }
  if (column_names) *column_names = header;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    row.reserve(header.size());
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) row.push_back(std::stod(f));
    if (row.size() != header.size()) {
      throw DataError("ragged CSV row in '" + path + "'");
    }
    rows.push_back(std::move(row));
  }
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()),
                    static_cast<Eigen::Index>(header.size()));
  for (size_t i = 0; i < rows.size(); ++i) {
    for (size_t j = 0; j < header.size(); ++j) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
  }
  return m;
}

void save_draws(const std::string& dir, const PosteriorDraws& draws,
                const std::map<std::string, std::string>& input_digests,
                const SparseFunctionalDataset* data) {
  fs::create_directories(fs::path(dir) / "draws");
  const ModelConfig& mc = draws.model_config;
  const int p = mc.n_vars;
  const int q = mc.n_basis;
  const int k = mc.n_components;
  const int n = static_cast<int>(draws.subject_names.size());

  json sampler_j;
  sampler_j["chains"] = draws.sampler_config.n_chains;
  sampler_j["warmup"] = draws.sampler_config.n_warmup;
  sampler_j["samples"] = draws.sampler_config.n_samples;
  sampler_j["seed"] = draws.sampler_config.seed;
  sampler_j["mode"] =
      draws.sampler_config.mode == SamplerMode::kFullHmc ? "full-hmc" : "blocked-gibbs";
  sampler_j["target_accept"] = draws.sampler_config.target_accept;
  sampler_j["max_treedepth"] = draws.sampler_config.max_treedepth;

  json model_j;
  model_j["K"] = mc.n_components;
  model_j["Q"] = mc.n_basis;
  model_j["P"] = mc.n_vars;
  model_j["alpha"] = mc.alpha;
  model_j["priors"] = {{"noise_shape", mc.priors.noise_shape},
                       {"noise_scale", mc.priors.noise_scale},
                       {"eigval_shape", mc.priors.eigval_shape},
                       {"eigval_scale", mc.priors.eigval_scale},
                       {"mean_smooth_shape", mc.priors.mean_smooth_shape},
                       {"mean_smooth_rate", mc.priors.mean_smooth_rate},
                       {"fpc_smooth_shape", mc.priors.fpc_smooth_shape},
                       {"fpc_smooth_rate", mc.priors.fpc_smooth_rate}};

  json manifest;
  manifest["engine_version"] = kVersion;
  manifest["created_utc"] = utc_now();
  manifest["seed"] = draws.sampler_config.seed;
  manifest["model"] = model_j;
  manifest["sampler"] = sampler_j;
  manifest["basis"] = {{"degree", draws.basis_degree},
                       {"quad_points_per_span", draws.basis_quad_points}};
  manifest["dims"] = {{"N", n}, {"P", p}, {"M", draws.times.size()}};
  manifest["times"] =
      std::vector<double>(draws.times.data(), draws.times.data() + draws.times.size());
  manifest["subjects"] = draws.subject_names;
  manifest["variables"] = draws.variable_names;
  manifest["input_digests"] = input_digests;
  manifest["divergence_flag"] = draws.divergence_flag;
  {
    json stats = json::array();
    for (const auto& cs : draws.chain_stats) {
      stats.push_back({{"divergences", cs.divergences},
                       {"max_treedepth_hits", cs.max_treedepth_hits},
                       {"mean_accept", cs.mean_accept},
                       {"step_size", cs.step_size}});
    }
    manifest["chain_stats"] = stats;
  }
  {
    // Hash of the reproducibility-relevant configuration.
    const std::string cfg = model_j.dump() + sampler_j.dump() +
                            manifest["basis"].dump() +
                            std::to_string(draws.sampler_config.seed);
    std::uint64_t hash = 1469598103934665603ULL;
    for (char c : cfg) {
      hash ^= static_cast<unsigned char>(c);
      hash *= 1099511628211ULL;
    }
    char buf[24];
    std::snprintf(buf, sizeof(buf), "fnv1a:%016llx", static_cast<unsigned long long>(hash));
    manifest["config_hash"] = std::string(buf);
  }
  write_text((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
  write_text((fs::path(dir) / "scaling.json").string(),
             scaling_to_json(draws.scaling).dump(2) + "\n");

  const fs::path droot = fs::path(dir) / "draws";
  write_group_csv((droot / "noise_var.csv").string(), draws, indexed_names("noise_var", p),
                  [&](const ParameterState& s, std::vector<double>& row) {
                    for (int i = 0; i < p; ++i) row[static_cast<size_t>(i)] = s.noise_var[i];
                  });
  write_group_csv((droot / "mean_coef.csv").string(), draws, indexed_names("mean_coef", p * q),
                  [&](const ParameterState& s, std::vector<double>& row) {
                    for (int i = 0; i < p * q; ++i) row[static_cast<size_t>(i)] = s.mean_coef[i];
                  });
  write_group_csv((droot / "mean_smooth.csv").string(), draws, indexed_names("mean_smooth", p),
                  [&](const ParameterState& s, std::vector<double>& row) {
                    for (int i = 0; i < p; ++i) row[static_cast<size_t>(i)] = s.mean_smooth[i];
                  });
  write_group_csv((droot / "eigvals.csv").string(), draws, indexed_names("eigval", k),
                  [&](const ParameterState& s, std::vector<double>& row) {
                    for (int i = 0; i < k; ++i) row[static_cast<size_t>(i)] = s.eigvals[i];
                  });
  write_group_csv((droot / "fpc_smooth.csv").string(), draws, indexed_names("fpc_smooth", p, k),
                  [&](const ParameterState& s, std::vector<double>& row) {
                    int pos = 0;
                    for (int j = 0; j < k; ++j)
                      for (int i = 0; i < p; ++i) row[static_cast<size_t>(pos++)] = s.fpc_smooth(i, j);
                  });
  write_group_csv((droot / "fpc_latent.csv").string(), draws,
                  indexed_names("fpc_latent", p * q, k),
                  [&](const ParameterState& s, std::vector<double>& row) {
                    int pos = 0;
                    for (int j = 0; j < k; ++j)
                      for (int i = 0; i < p * q; ++i)
                        row[static_cast<size_t>(pos++)] = s.fpc_latent(i, j);
                  });
  write_group_csv((droot / "fpc_coef.csv").string(), draws, indexed_names("fpc_coef", p * q, k),
                  [&](const ParameterState& s, std::vector<double>& row) {
                    int pos = 0;
                    for (int j = 0; j < k; ++j)
                      for (int i = 0; i < p * q; ++i)
                        row[static_cast<size_t>(pos++)] = s.fpc_coef(i, j);
                  });
  write_group_csv((droot / "scores.csv").string(), draws, indexed_names("score", n, k),
                  [&](const ParameterState& s, std::vector<double>& row) {
                    int pos = 0;
                    for (int j = 0; j < k; ++j)
                      for (int i = 0; i < n; ++i) row[static_cast<size_t>(pos++)] = s.scores(i, j);
                  });
  {
    std::ofstream out((droot / "diagnostics.csv").string(), std::ios::binary);
    out << "chain,draw,accept_stat,step_size,treedepth,n_leapfrog,divergent,log_density\n";
    for (int c = 0; c < draws.n_chains(); ++c) {
      for (int s = 0; s < draws.n_draws_per_chain(); ++s) {
        const DrawDiagnostics& d =
            draws.diagnostics[static_cast<size_t>(c)][static_cast<size_t>(s)];
        out << (c + 1) << ',' << (s + 1) << ',' << format_double(d.accept_stat) << ','
            << format_double(d.step_size) << ',' << d.treedepth << ',' << d.n_leapfrog
            << ',' << (d.divergent ? 1 : 0) << ',' << format_double(d.log_density) << '\n';
      }
    }
  }

  // Plot-ready basis and penalty matrices.
  const OrthoBasis basis = draws.rebuild_basis();
  const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(201, 0.0, 1.0);
  Eigen::MatrixXd basis_table(grid.size(), q + 1);
  basis_table.col(0) = grid;
  basis_table.rightCols(q) = basis.evaluate(grid);
  std::vector<std::string> basis_names{"t"};
  for (const auto& nm : indexed_names("b", q)) basis_names.push_back(nm);
  write_matrix_csv((fs::path(dir) / "basis_eval.csv").string(), basis_table, basis_names);
  write_matrix_csv((fs::path(dir) / "penalty_p2.csv").string(), basis.p2(),
                   indexed_names("b", q));
  write_matrix_csv((fs::path(dir) / "penalty_alpha.csv").string(),
                   basis.penalty_alpha(mc.alpha), indexed_names("b", q));

  if (data != nullptr) {
    write_dataset_summary((fs::path(dir) / "dataset_summary.json").string(), *data);
  }
}

PosteriorDraws load_draws(const std::string& dir) {
  const json manifest = read_json((fs::path(dir) / "manifest.json").string());
  PosteriorDraws draws;
  const json& model_j = manifest.at("model");
  draws.model_config.n_components = model_j.at("K").get<int>();
  draws.model_config.n_basis = model_j.at("Q").get<int>();
  draws.model_config.n_vars = model_j.at("P").get<int>();
  draws.model_config.alpha = model_j.at("alpha").get<double>();
  const json& priors = model_j.at("priors");
  draws.model_config.priors.noise_shape = priors.at("noise_shape").get<double>();
  draws.model_config.priors.noise_scale = priors.at("noise_scale").get<double>();
  draws.model_config.priors.eigval_shape = priors.at("eigval_shape").get<double>();
  draws.model_config.priors.eigval_scale = priors.at("eigval_scale").get<double>();
  draws.model_config.priors.mean_smooth_shape = priors.at("mean_smooth_shape").get<double>();
  draws.model_config.priors.mean_smooth_rate = priors.at("mean_smooth_rate").get<double>();
  draws.model_config.priors.fpc_smooth_shape = priors.at("fpc_smooth_shape").get<double>();
  draws.model_config.priors.fpc_smooth_rate = priors.at("fpc_smooth_rate").get<double>();

  const json& sampler_j = manifest.at("sampler");
  draws.sampler_config.n_chains = sampler_j.at("chains").get<int>();
  draws.sampler_config.n_warmup = sampler_j.at("warmup").get<int>();
  draws.sampler_config.n_samples = sampler_j.at("samples").get<int>();
  draws.sampler_config.seed = sampler_j.at("seed").get<std::uint64_t>();
  draws.sampler_config.mode = sampler_j.at("mode").get<std::string>() == "blocked-gibbs"
                                  ? SamplerMode::kBlockedGibbs
                                  : SamplerMode::kFullHmc;
  draws.sampler_config.target_accept = sampler_j.at("target_accept").get<double>();
  draws.sampler_config.max_treedepth = sampler_j.at("max_treedepth").get<int>();

  draws.basis_degree = manifest.at("basis").at("degree").get<int>();
  draws.basis_quad_points = manifest.at("basis").at("quad_points_per_span").get<int>();
  const auto times = manifest.at("times").get<std::vector<double>>();
  draws.times = Eigen::Map<const Eigen::VectorXd>(times.data(),
                                                  static_cast<Eigen::Index>(times.size()));
  draws.subject_names = manifest.at("subjects").get<std::vector<std::string>>();
  draws.variable_names = manifest.at("variables").get<std::vector<std::string>>();
  draws.divergence_flag = manifest.at("divergence_flag").get<bool>();
  for (const auto& cs : manifest.at("chain_stats")) {
    ChainStats stats;
    stats.divergences = cs.at("divergences").get<int>();
    stats.max_treedepth_hits = cs.at("max_treedepth_hits").get<int>();
    stats.mean_accept = cs.at("mean_accept").get<double>();
    stats.step_size = cs.at("step_size").get<double>();
    draws.chain_stats.push_back(stats);
  }
  draws.scaling = scaling_from_json(read_json((fs::path(dir) / "scaling.json").string()));

  const int n_chains = draws.sampler_config.n_chains;
  const int n_samples = draws.sampler_config.n_samples;
  const int total = n_chains * n_samples;
  const int p = draws.model_config.n_vars;
  const int q = draws.model_config.n_basis;
  const int k = draws.model_config.n_components;
  const int n = static_cast<int>(draws.subject_names.size());

  const fs::path droot = fs::path(dir) / "draws";
  const Eigen::MatrixXd noise = read_group_csv((droot / "noise_var.csv").string(), total);
  const Eigen::MatrixXd mean_coef = read_group_csv((droot / "mean_coef.csv").string(), total);
  const Eigen::MatrixXd mean_smooth = read_group_csv((droot / "mean_smooth.csv").string(), total);
  const Eigen::MatrixXd eigvals = read_group_csv((droot / "eigvals.csv").string(), total);
  const Eigen::MatrixXd fpc_smooth = read_group_csv((droot / "fpc_smooth.csv").string(), total);
  const Eigen::MatrixXd fpc_latent = read_group_csv((droot / "fpc_latent.csv").string(), total);
  const Eigen::MatrixXd fpc_coef = read_group_csv((droot / "fpc_coef.csv").string(), total);
  const Eigen::MatrixXd scores = read_group_csv((droot / "scores.csv").string(), total);

  draws.chains.resize(static_cast<size_t>(n_chains));
  for (int c = 0; c < n_chains; ++c) {
    auto& chain = draws.chains[static_cast<size_t>(c)];
    chain.reserve(static_cast<size_t>(n_samples));
    for (int s = 0; s < n_samples; ++s) {
      const int rowi = c * n_samples + s;
      auto reshape = [&](const Eigen::MatrixXd& flat, int rows, int cols) {
        const Eigen::VectorXd row = flat.row(rowi).transpose();
        return Eigen::MatrixXd(Eigen::Map<const Eigen::MatrixXd>(row.data(), rows, cols));
      };
      ParameterState st;
      st.noise_var = noise.row(rowi).transpose();
      st.mean_coef = mean_coef.row(rowi).transpose();
      st.mean_smooth = mean_smooth.row(rowi).transpose();
      st.eigvals = eigvals.row(rowi).transpose();
      st.fpc_smooth = reshape(fpc_smooth, p, k);
      st.fpc_latent = reshape(fpc_latent, p * q, k);
      st.fpc_coef = reshape(fpc_coef, p * q, k);
      st.scores = reshape(scores, n, k);
      st.scores_raw = st.scores * st.eigvals.cwiseSqrt().cwiseInverse().asDiagonal();
      chain.push_back(std::move(st));
    }
  }
  // Diagnostics are informational; reload what is there.
  draws.diagnostics.assign(static_cast<size_t>(n_chains),
                           std::vector<DrawDiagnostics>(static_cast<size_t>(n_samples)));
  const Eigen::MatrixXd diag = read_matrix_csv((droot / "diagnostics.csv").string());
  for (Eigen::Index r = 0; r < diag.rows(); ++r) {
    const int c = static_cast<int>(diag(r, 0)) - 1;
    const int s = static_cast<int>(diag(r, 1)) - 1;
    DrawDiagnostics& d = draws.diagnostics[static_cast<size_t>(c)][static_cast<size_t>(s)];
    d.accept_stat = diag(r, 2);
    d.step_size = diag(r, 3);
    d.treedepth = static_cast<int>(diag(r, 4));
    d.n_leapfrog = static_cast<int>(diag(r, 5));
    d.divergent = diag(r, 6) != 0.0;
    d.log_density = diag(r, 7);
  }
  return draws;
}

void save_aligned(const std::string& dir, const AlignedDraws& aligned,
                  const ConvergenceSummary& convergence) {
  const fs::path aroot = fs::path(dir) / "aligned";
  fs::create_directories(aroot);
  const PosteriorDraws& draws = *aligned.source;
  const int k = draws.model_config.n_components;
  const int pq = draws.model_config.n_vars * draws.model_config.n_basis;
  const int n = static_cast<int>(draws.subject_names.size());
  const int total = aligned.n_draws();

  auto flatten = [&](const std::vector<Eigen::MatrixXd>& mats, int rows,
                     const std::string& path, const std::string& stem) {
    std::ofstream out(path, std::ios::binary);
    out << "chain,draw";
    for (const auto& nm : indexed_names(stem, rows, k)) out << ',' << nm;
    out << '\n';
    const int per = draws.n_draws_per_chain();
    for (int s = 0; s < total; ++s) {
      out << (s / per + 1) << ',' << (s % per + 1);
      const Eigen::MatrixXd& m = mats[static_cast<size_t>(s)];
      for (int j = 0; j < k; ++j) {
        for (int i = 0; i < rows; ++i) out << ',' << format_double(m(i, j));
      }
      out << '\n';
    }
  };
  flatten(aligned.rotations, k, (aroot / "rotations.csv").string(), "r");
  flatten(aligned.fpc_coef, pq, (aroot / "fpc_coef.csv").string(), "fpc_coef");
  flatten(aligned.scores, n, (aroot / "scores.csv").string(), "score");
  write_matrix_csv((aroot / "reference.csv").string(), aligned.reference,
                   indexed_names("ref", static_cast<int>(aligned.reference.cols())));

  int total_div = 0;
  for (const auto& cs : draws.chain_stats) total_div += cs.divergences;
  json report;
  report["reference_provenance"] = aligned.reference_provenance;
  report["max_rhat"] = convergence.max_rhat;
  report["n_rhat_flagged"] = convergence.n_flagged;
  report["n_rhat_undefined"] = convergence.n_undefined;
  report["n_scalars"] = convergence.names.size();
  report["divergences"] = total_div;
  report["divergence_flag"] = draws.divergence_flag;
  write_text((fs::path(dir) / "alignment_report.json").string(), report.dump(2) + "\n");
}

bool has_aligned(const std::string& dir) {
  return fs::exists(fs::path(dir) / "aligned" / "fpc_coef.csv");
}

AlignedDraws load_aligned(const std::string& dir, const PosteriorDraws& draws) {
  const fs::path aroot = fs::path(dir) / "aligned";
  AlignedDraws out;
  out.source = &draws;
  const int k = draws.model_config.n_components;
  const int pq = draws.model_config.n_vars * draws.model_config.n_basis;
  const int n = static_cast<int>(draws.subject_names.size());
  const int total = draws.n_total_draws();

  auto unflatten = [&](const std::string& path, int rows) {
    const Eigen::MatrixXd flat = read_group_csv(path, total);
    std::vector<Eigen::MatrixXd> mats(static_cast<size_t>(total));
    for (int s = 0; s < total; ++s) {
      const Eigen::VectorXd row = flat.row(s).transpose();
      mats[static_cast<size_t>(s)] = Eigen::Map<const Eigen::MatrixXd>(row.data(), rows, k);
    }
    return mats;
  };
  out.rotations = unflatten((aroot / "rotations.csv").string(), k);
  out.fpc_coef = unflatten((aroot / "fpc_coef.csv").string(), pq);
  out.scores = unflatten((aroot / "scores.csv").string(), n);
  out.reference = read_matrix_csv((aroot / "reference.csv").string());
  const json report = read_json((fs::path(dir) / "alignment_report.json").string());
  out.reference_provenance = report.at("reference_provenance").get<std::string>();
  return out;
}

void write_prediction_csv(const std::string& path, const TrajectorySummary& summary) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << "subject,variable,time,mean,lo95,hi95\n";
  for (size_t si = 0; si < summary.subjects.size(); ++si) {
    for (size_t p = 0; p < summary.variables.size(); ++p) {
      for (Eigen::Index m = 0; m < summary.times.size(); ++m) {
        out << summary.subjects[si] << ',' << summary.variables[p] << ','
            << format_double(summary.times[m]) << ','
            << format_double(summary.mean[p](static_cast<Eigen::Index>(si), m)) << ','
            << format_double(summary.lo[p](static_cast<Eigen::Index>(si), m)) << ','
            << format_double(summary.hi[p](static_cast<Eigen::Index>(si), m)) << '\n';
      }
    }
  }
}

void write_variance_explained_csv(const std::string& path, const VarianceExplained& ve,
                                  const std::vector<std::string>& variables) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << "k,global_mean,global_lo95,global_hi95";
  for (const auto& v : variables) {
    out << ',' << v << "_mean," << v << "_lo95," << v << "_hi95";
  }
  out << '\n';
  for (size_t ti = 0; ti < ve.truncations.size(); ++ti) {
    const Eigen::Index t = static_cast<Eigen::Index>(ti);
    out << ve.truncations[ti] << ',' << format_double(ve.global_mean[t]) << ','
        << format_double(ve.global_lo[t]) << ',' << format_double(ve.global_hi[t]);
    for (size_t p = 0; p < variables.size(); ++p) {
      out << ',' << format_double(ve.per_var_mean(t, static_cast<Eigen::Index>(p))) << ','
          << format_double(ve.per_var_lo(t, static_cast<Eigen::Index>(p))) << ','
          << format_double(ve.per_var_hi(t, static_cast<Eigen::Index>(p)));
    }
    out << '\n';
  }
}

void write_fpc_estimate_csv(const std::string& path, const AlignedDraws& aligned,
                            const OrthoBasis& basis) {
  const PosteriorDraws& draws = *aligned.source;
  const int k = draws.model_config.n_components;
  const int q = draws.model_config.n_basis;
  const int m = static_cast<int>(draws.times.size());
  const int total = aligned.n_draws();
  const Eigen::MatrixXd basis_eval = basis.evaluate(draws.times);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << "time,variable,component,mean,lo95,hi95\n";
  Eigen::MatrixXd draws_eval(total, m);
  for (int p = 0; p < draws.model_config.n_vars; ++p) {
    for (int j = 0; j < k; ++j) {
      for (int s = 0; s < total; ++s) {
        draws_eval.row(s) =
            (basis_eval * aligned.fpc_coef[static_cast<size_t>(s)].col(j).segment(p * q, q))
                .transpose();
      }
      for (int g = 0; g < m; ++g) {
        std::vector<double> col(draws_eval.col(g).data(), draws_eval.col(g).data() + total);
        const double lo = empirical_quantile(col, 0.025);
        const double hi = empirical_quantile(col, 0.975);
        out << format_double(draws.scaling.time_from_unit(draws.times[g])) << ','
            << draws.variable_names[static_cast<size_t>(p)] << ',' << (j + 1) << ','
            << format_double(draws_eval.col(g).mean()) << ',' << format_double(lo) << ','
            << format_double(hi) << '\n';
      }
    }
  }
}

void write_study_report(const std::string& dir, const StudyReport& report) {
  fs::create_directories(dir);
  const std::vector<std::string> variables = [&] {
    std::vector<std::string> v;
    const int p_count = report.scenario.univariate ? 1 : report.scenario.n_vars;
    for (int p = 0; p < p_count; ++p) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "v%02d", p + 1);
      v.emplace_back(buf);
    }
    return v;
  }();
  const int k = report.scenario.n_components;

  {
    std::ofstream out((fs::path(dir) / "rise.csv").string(), std::ios::binary);
    out << "replicate,variable,rise\n";
    for (const auto& r : report.replicates) {
      if (r.failed) continue;
      for (size_t p = 0; p < variables.size(); ++p) {
        out << r.replicate << ',' << variables[p] << ','
            << format_double(r.rise[static_cast<Eigen::Index>(p)]) << '\n';
      }
    }
  }
  {
    std::ofstream out((fs::path(dir) / "ise_components.csv").string(), std::ios::binary);
    out << "replicate,component,variable,ise\n";
    for (const auto& r : report.replicates) {
      if (r.failed) continue;
      for (size_t p = 0; p < variables.size(); ++p) {
        out << r.replicate << ",mean," << variables[p] << ','
            << format_double(r.mean_ise[static_cast<Eigen::Index>(p)]) << '\n';
        for (int j = 0; j < k; ++j) {
          out << r.replicate << ",fpc" << (j + 1) << ',' << variables[p] << ','
              << format_double(r.fpc_ise(j, static_cast<Eigen::Index>(p))) << '\n';
        }
      }
    }
  }
  {
    std::ofstream out((fs::path(dir) / "coverage.csv").string(), std::ios::binary);
    out << "replicate,target,variable,coverage\n";
    for (const auto& r : report.replicates) {
      if (r.failed) continue;
      for (size_t p = 0; p < variables.size(); ++p) {
        out << r.replicate << ",trajectory," << variables[p] << ','
            << format_double(r.trajectory_coverage[static_cast<Eigen::Index>(p)]) << '\n';
        out << r.replicate << ",mean," << variables[p] << ','
            << format_double(r.mean_coverage[static_cast<Eigen::Index>(p)]) << '\n';
        for (int j = 0; j < k; ++j) {
          out << r.replicate << ",fpc" << (j + 1) << ',' << variables[p] << ','
              << format_double(r.fpc_coverage(j, static_cast<Eigen::Index>(p))) << '\n';
        }
      }
    }
  }
  {
    std::ofstream out((fs::path(dir) / "timing.csv").string(), std::ios::binary);
    out << "replicate,seconds\n";
    for (const auto& r : report.replicates) {
      out << r.replicate << ',' << format_double(r.seconds_total) << '\n';
    }
  }
  json summary;
  summary["n_replicates"] = report.scenario.n_replicates;
  summary["n_ok"] = report.n_ok();
  summary["seed"] = report.scenario.seed;
  summary["univariate"] = report.scenario.univariate;
  summary["snr"] = report.scenario.snr;
  summary["obs_min"] = report.scenario.obs_min;
  summary["obs_max"] = report.scenario.obs_max;
  {
    json failures = json::array();
    double rise_acc = 0.0, cover_acc = 0.0, rhat_max = 0.0;
    int count = 0;
    for (const auto& r : report.replicates) {
      if (r.failed) {
        failures.push_back({{"replicate", r.replicate}, {"error", r.error}});
        continue;
      }
      rise_acc += r.rise.mean();
      cover_acc += r.trajectory_coverage.mean();
      rhat_max = std::max(rhat_max, r.max_rhat);
      ++count;
    }
    summary["failures"] = failures;
    if (count > 0) {
      summary["mean_rise"] = rise_acc / count;
      summary["mean_trajectory_coverage"] = cover_acc / count;
      summary["max_rhat"] = rhat_max;
    }
  }
  write_text((fs::path(dir) / "summary.json").string(), summary.dump(2) + "\n");
}

void write_timing_csv(const std::string& path, const std::vector<TimingRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  out << "n_subjects,seconds\n";
  for (const auto& r : rows) {
    out << r.n_subjects << ',' << format_double(r.seconds) << '\n';
  }
}

void write_dataset_summary(const std::string& path, const SparseFunctionalDataset& data) {
  json j;
  j["N"] = data.n_subjects;
  j["P"] = data.n_vars;
  j["M"] = data.n_times();
  j["L"] = data.n_obs();
  const Eigen::MatrixXd q = per_variable_count_quantiles(data);
  json per_var = json::object();
  for (int p = 0; p < data.n_vars; ++p) {
    per_var[data.variable_names[static_cast<size_t>(p)]] = {
        {"count", data.var_card[static_cast<size_t>(p)]}, {"min", q(p, 0)},
        {"q25", q(p, 1)},  {"median", q(p, 2)},
        {"q75", q(p, 3)},  {"max", q(p, 4)}};
  }
  j["per_variable"] = per_var;
  write_text(path, j.dump(2) + "\n");
}

}  // namespace msfpca

#pragma once

#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "msfpca/postprocess.hpp"
#include "msfpca/predict.hpp"
#include "msfpca/sampler.hpp"
#include "msfpca/sim.hpp"

namespace msfpca {

// FNV-1a 64-bit digest of a file's bytes, hex encoded.
std::string file_digest(const std::string& path);

// Matrix as CSV with %.17g formatting (digits chosen so doubles round-trip).
void write_matrix_csv(const std::string& path, const Eigen::MatrixXd& matrix,
                      const std::vector<std::string>& column_names);
Eigen::MatrixXd read_matrix_csv(const std::string& path,
                                std::vector<std::string>* column_names = nullptr);

// Draws directory layout:
//   manifest.json scaling.json dataset_summary.json
//   draws/<group>.csv (chain,draw leading columns) draws/diagnostics.csv
//   basis_eval.csv penalty_p2.csv penalty_alpha.csv
void save_draws(const std::string& dir, const PosteriorDraws& draws,
                const std::map<std::string, std::string>& input_digests,
                const SparseFunctionalDataset* data = nullptr);
PosteriorDraws load_draws(const std::string& dir);

// Alignment artifacts inside a draws directory:
//   aligned/rotations.csv aligned/fpc_coef.csv aligned/scores.csv
//   aligned/reference.csv alignment_report.json
void save_aligned(const std::string& dir, const AlignedDraws& aligned,
                  const ConvergenceSummary& convergence);
AlignedDraws load_aligned(const std::string& dir, const PosteriorDraws& draws);
bool has_aligned(const std::string& dir);

// Prediction table: subject,variable,time,mean,lo95,hi95.
void write_prediction_csv(const std::string& path, const TrajectorySummary& summary);

// Variance-explained table: one row per truncation level.
void write_variance_explained_csv(const std::string& path, const VarianceExplained& ve,
                                  const std::vector<std::string>& variables);

// FPC estimate with equal-tail bands: time,variable,component,mean,lo95,hi95.
void write_fpc_estimate_csv(const std::string& path, const AlignedDraws& aligned,
                            const OrthoBasis& basis);

// Study outputs: rise.csv, ise_components.csv, coverage.csv, timing.csv,
// summary.json.
void write_study_report(const std::string& dir, const StudyReport& report);
void write_timing_csv(const std::string& path, const std::vector<TimingRow>& rows);

// N, P, M, L plus per-variable observation-count quantiles.
void write_dataset_summary(const std::string& path, const SparseFunctionalDataset& data);

}  // namespace msfpca

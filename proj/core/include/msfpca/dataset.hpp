#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>

namespace msfpca {

// One long-format observation row.
struct LongRecord {
  std::string subject;
  std::string variable;
  double time = 0.0;
  double value = 0.0;
};

// Column names for long-format CSV ingestion.
struct ColumnSpec {
  std::string subject = "subject";
  std::string variable = "variable";
  std::string time = "time";
  std::string value = "value";
};

// Per-variable standardization plus the affine time map, kept so that every
// fitted quantity can be carried back to original units.
struct ScalingRecord {
  std::vector<std::string> variables;
  Eigen::VectorXd mean;  // per variable, original units
  Eigen::VectorXd sd;    // per variable, positive, original units
  double t_min = 0.0;
  double t_max = 1.0;

  double time_to_unit(double t) const { return (t - t_min) / (t_max - t_min); }
  double time_from_unit(double u) const { return t_min + u * (t_max - t_min); }
};

// Stacked sparse observations, ordered by variable then (subject, time).
// Block contiguity by variable is what makes the per-variable likelihood
// split possible.
struct SparseFunctionalDataset {
  Eigen::VectorXd y;           // standardized observations, length L
  std::vector<int> subj;       // 0-based subject index per observation
  std::vector<int> time_idx;   // 0-based index into `times` per observation
  std::vector<int> var_card;   // observations per variable, sums to L
  Eigen::VectorXd times;       // pooled sorted unique times on [0, 1]
  int n_subjects = 0;
  int n_vars = 0;
  std::vector<std::string> subject_names;
  std::vector<std::string> variable_names;

  int n_obs() const { return static_cast<int>(y.size()); }
  int n_times() const { return static_cast<int>(times.size()); }

  // Offset of variable p's contiguous block in the stacked arrays.
  int block_offset(int p) const;

  // Throws DataError/ConfigError if any structural invariant is violated.
  void validate() const;
};

// Parse and validate a long-format CSV. Rejects missing columns, non-finite
// numerics, and duplicate (subject, variable, time) triples.
std::vector<LongRecord> ingest_long_csv(const std::string& path,
                                        const ColumnSpec& columns = {});

// Standardize values per variable (sample mean 0, sd 1 with the n-1
// denominator) and map pooled times affinely onto [0, 1]. Times equal within
// 1e-12 after rescaling are merged onto one grid point.
std::pair<SparseFunctionalDataset, ScalingRecord> standardize(
    const std::vector<LongRecord>& records);

// Inverse maps back to original units.
double destandardize_value(double standardized, const ScalingRecord& scaling, int variable);
double standardize_value(double original, const ScalingRecord& scaling, int variable);
// Noise/FPC draws scale multiplicatively by the variable sd.
double destandardize_scale(double standardized, const ScalingRecord& scaling, int variable);

// Per-variable observation-count quantiles (min, q25, median, q75, max) of
// the per-subject counts; used in the dataset summary.
Eigen::MatrixXd per_variable_count_quantiles(const SparseFunctionalDataset& data);

// Identity scaling (mean 0, sd 1, time already on [0, 1]); for data
// constructed directly on the model scale.
ScalingRecord unit_scaling(const std::vector<std::string>& variables);

}  // namespace msfpca

#pragma once

// Shared builders for small synthetic fit problems used across test suites.

#include <string>
#include <vector>

#include <Eigen/Core>

#include "msfpca/dataset.hpp"
#include "msfpca/model.hpp"
#include "msfpca/rng.hpp"

namespace fixtures {

// Dataset on the model scale (no standardization applied): every subject
// observes `obs_per_subject` random grid points per variable; values filled
// with standard normal noise unless a filler is given.
inline msfpca::SparseFunctionalDataset random_dataset(int n_subjects, int n_vars,
                                                      int n_times, int obs_per_subject,
                                                      msfpca::Rng& rng) {
  msfpca::SparseFunctionalDataset data;
  data.n_subjects = n_subjects;
  data.n_vars = n_vars;
  data.times = (Eigen::VectorXd::LinSpaced(n_times, 0.05, 0.95));
  for (int i = 0; i < n_subjects; ++i) data.subject_names.push_back("s" + std::to_string(i + 1));
  for (int p = 0; p < n_vars; ++p) data.variable_names.push_back("v" + std::to_string(p + 1));

  std::vector<double> values;
  for (int p = 0; p < n_vars; ++p) {
    int count = 0;
    for (int i = 0; i < n_subjects; ++i) {
      const auto picks = rng.sample_without_replacement(n_times, obs_per_subject);
      for (int m : picks) {
        data.subj.push_back(i);
        data.time_idx.push_back(m);
        values.push_back(rng.normal());
        ++count;
      }
    }
    data.var_card.push_back(count);
  }
  data.y = Eigen::Map<const Eigen::VectorXd>(values.data(),
                                             static_cast<Eigen::Index>(values.size()));
  data.validate();
  return data;
}

// Empty dataset (prior-only problems).
inline msfpca::SparseFunctionalDataset empty_dataset(int n_vars, int n_subjects = 0) {
  msfpca::SparseFunctionalDataset data;
  data.n_vars = n_vars;
  data.n_subjects = n_subjects;
  data.times = Eigen::VectorXd();
  data.var_card.assign(static_cast<size_t>(n_vars), 0);
  for (int i = 0; i < n_subjects; ++i) data.subject_names.push_back("s" + std::to_string(i + 1));
  for (int p = 0; p < n_vars; ++p) data.variable_names.push_back("v" + std::to_string(p + 1));
  data.y = Eigen::VectorXd();
  return data;
}

// Random valid parameter state for a given problem shape.
inline msfpca::ParameterState random_state(int n_vars, int n_basis, int n_components,
                                           int n_subjects, msfpca::Rng& rng) {
  msfpca::ParameterState s;
  s.noise_var = Eigen::VectorXd::Ones(n_vars);
  s.mean_smooth = Eigen::VectorXd::Ones(n_vars);
  s.fpc_smooth = Eigen::MatrixXd::Ones(n_vars, n_components);
  for (int p = 0; p < n_vars; ++p) {
    s.noise_var[p] = 0.3 + rng.uniform();
    s.mean_smooth[p] = 0.5 + rng.uniform();
    for (int k = 0; k < n_components; ++k) s.fpc_smooth(p, k) = 0.5 + rng.uniform();
  }
  s.mean_coef = rng.normal_vector(n_vars * n_basis);
  s.eigvals.resize(n_components);
  double lam = 0.2 + rng.uniform();
  for (int k = 0; k < n_components; ++k) {
    s.eigvals[k] = lam;
    lam += 0.3 + rng.uniform();
  }
  s.fpc_latent = rng.normal_matrix(n_vars * n_basis, n_components);
  s.scores_raw = rng.normal_matrix(n_subjects, n_components);
  s.refresh_derived();
  return s;
}

}  // namespace fixtures

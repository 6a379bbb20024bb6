#include "msfpca/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "msfpca/errors.hpp"

namespace msfpca {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) {
    // Trim surrounding whitespace.
    const auto first = field.find_first_not_of(" \t\r");
    const auto last = field.find_last_not_of(" \t\r");
    fields.push_back(first == std::string::npos ? std::string()
                                                : field.substr(first, last - first + 1));
  }
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

double parse_double(const std::string& s, size_t row, const std::string& col) {
  try {
    size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError("row " + std::to_string(row) + ": cannot parse '" + s +
                    "' in column '" + col + "'");
  }
}

}  // namespace

int SparseFunctionalDataset::block_offset(int p) const {
  int offset = 0;
  for (int q = 0; q < p; ++q) offset += var_card[q];
  return offset;
}

void SparseFunctionalDataset::validate() const {
  const int total = static_cast<int>(y.size());
  int card_sum = 0;
  for (int c : var_card) card_sum += c;
  if (card_sum != total) throw DataError("per-variable counts do not sum to L");
  if (static_cast<int>(var_card.size()) != n_vars) throw DataError("var_card length != P");
  if (static_cast<int>(subj.size()) != total || static_cast<int>(time_idx.size()) != total) {
    throw DataError("index arrays do not match observation count");
  }
  for (int i : subj) {
    if (i < 0 || i >= n_subjects) throw DataError("subject index out of range");
  }
  for (int m : time_idx) {
    if (m < 0 || m >= n_times()) throw DataError("time index out of range");
  }
  for (Eigen::Index m = 1; m < times.size(); ++m) {
    if (!(times[m] > times[m - 1])) throw DataError("pooled times not strictly ascending");
  }
  if (times.size() > 0 && (times.minCoeff() < 0.0 || times.maxCoeff() > 1.0)) {
    throw DataError("pooled times not on [0, 1]");
  }
}

std::vector<LongRecord> ingest_long_csv(const std::string& path,
                                        const ColumnSpec& columns) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");

  std::string line;
  if (!std::getline(in, line)) throw DataError("empty file: '" + path + "'");
  const std::vector<std::string> header = split_csv_line(line);

  auto find_col = [&](const std::string& name) {
    for (size_t j = 0; j < header.size(); ++j) {
      if (header[j] == name) return static_cast<int>(j);
    }
    throw DataError("missing column '" + name + "' in '" + path + "'");
  };
  const int c_subj = find_col(columns.subject);
  const int c_var = find_col(columns.variable);
  const int c_time = find_col(columns.time);
  const int c_val = find_col(columns.value);

  std::vector<LongRecord> records;
  std::set<std::tuple<std::string, std::string, double>> seen;
  size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::vector<std::string> fields = split_csv_line(line);
    const size_t needed = static_cast<size_t>(std::max({c_subj, c_var, c_time, c_val})) + 1;
    if (fields.size() < needed) {
      throw DataError("row " + std::to_string(row) + ": too few fields");
    }
    LongRecord rec;
    rec.subject = fields[static_cast<size_t>(c_subj)];
    rec.variable = fields[static_cast<size_t>(c_var)];
    rec.time = parse_double(fields[static_cast<size_t>(c_time)], row, columns.time);
    rec.value = parse_double(fields[static_cast<size_t>(c_val)], row, columns.value);
    if (!std::isfinite(rec.time) || !std::isfinite(rec.value)) {
      throw DataError("row " + std::to_string(row) + ": non-finite time or value");
    }
    if (!seen.insert({rec.subject, rec.variable, rec.time}).second) {
      throw DataError("row " + std::to_string(row) + ": duplicate (subject, variable, time) = (" +
                      rec.subject + ", " + rec.variable + ", " + std::to_string(rec.time) + ")");
    }
    records.push_back(std::move(rec));
  }
  if (records.empty()) {
    throw DataError("no observations in '" + path + "' (need at least one)");
  }
  return records;
}

std::pair<SparseFunctionalDataset, ScalingRecord> standardize(
    const std::vector<LongRecord>& records) {
  if (records.empty()) throw DataError("empty record set");

  // Deterministic variable/subject order.
  std::set<std::string> var_set, subj_set;
  for (const auto& r : records) {
    var_set.insert(r.variable);
    subj_set.insert(r.subject);
  }
  std::vector<std::string> variables(var_set.begin(), var_set.end());
  std::vector<std::string> subjects(subj_set.begin(), subj_set.end());
  std::map<std::string, int> var_index, subj_index;
  for (size_t j = 0; j < variables.size(); ++j) var_index[variables[j]] = static_cast<int>(j);
  for (size_t j = 0; j < subjects.size(); ++j) subj_index[subjects[j]] = static_cast<int>(j);

  const int n_vars = static_cast<int>(variables.size());
  ScalingRecord scaling;
  scaling.variables = variables;
  scaling.mean.setZero(n_vars);
  scaling.sd.setZero(n_vars);

  // Per-variable sample moments with the n-1 denominator.
  std::vector<int> counts(static_cast<size_t>(n_vars), 0);
  for (const auto& r : records) {
    const int p = var_index[r.variable];
    scaling.mean[p] += r.value;
    ++counts[static_cast<size_t>(p)];
  }
  for (int p = 0; p < n_vars; ++p) scaling.mean[p] /= counts[static_cast<size_t>(p)];
  for (const auto& r : records) {
    const int p = var_index[r.variable];
    const double d = r.value - scaling.mean[p];
    scaling.sd[p] += d * d;
  }
  for (int p = 0; p < n_vars; ++p) {
    if (counts[static_cast<size_t>(p)] < 2) {
      throw DataError("variable '" + variables[static_cast<size_t>(p)] +
                      "' needs at least two observations to standardize");
    }
    scaling.sd[p] = std::sqrt(scaling.sd[p] / (counts[static_cast<size_t>(p)] - 1));
    if (!(scaling.sd[p] > 0.0)) {
      throw DataError("variable '" + variables[static_cast<size_t>(p)] +
                      "' is constant (sample sd = 0)");
    }
  }

  // Pooled time domain onto [0, 1].
  scaling.t_min = records.front().time;
  scaling.t_max = records.front().time;
  for (const auto& r : records) {
    scaling.t_min = std::min(scaling.t_min, r.time);
    scaling.t_max = std::max(scaling.t_max, r.time);
  }
  if (!(scaling.t_max > scaling.t_min)) {
    throw DataError("all observations share one time point; domain has no extent");
  }

  // Pooled sorted unique grid, merging points within 1e-12 after rescale.
  std::vector<double> scaled;
  scaled.reserve(records.size());
  for (const auto& r : records) scaled.push_back(scaling.time_to_unit(r.time));
  std::sort(scaled.begin(), scaled.end());
  std::vector<double> grid;
  for (double t : scaled) {
    if (grid.empty() || t - grid.back() > 1e-12) grid.push_back(t);
  }

  auto grid_lookup = [&](double t) {
    const auto it = std::lower_bound(grid.begin(), grid.end(), t - 1e-12);
    return static_cast<int>(it - grid.begin());
  };

  SparseFunctionalDataset data;
  data.n_vars = n_vars;
  data.n_subjects = static_cast<int>(subjects.size());
  data.subject_names = subjects;
  data.variable_names = variables;
  data.times = Eigen::Map<const Eigen::VectorXd>(grid.data(), static_cast<Eigen::Index>(grid.size()));

  // Stack by variable, ordering each block by (subject, time) for determinism.
  struct Obs {
    int subj;
    int time;
    double value;
  };
  std::vector<std::vector<Obs>> blocks(static_cast<size_t>(n_vars));
  for (const auto& r : records) {
    const int p = var_index[r.variable];
    Obs o;
    o.subj = subj_index[r.subject];
    o.time = grid_lookup(scaling.time_to_unit(r.time));
    o.value = (r.value - scaling.mean[p]) / scaling.sd[p];
    blocks[static_cast<size_t>(p)].push_back(o);
  }
  const int total = static_cast<int>(records.size());
  data.y.resize(total);
  data.subj.reserve(static_cast<size_t>(total));
  data.time_idx.reserve(static_cast<size_t>(total));
  data.var_card.resize(static_cast<size_t>(n_vars));
  int pos = 0;
  for (int p = 0; p < n_vars; ++p) {
    auto& block = blocks[static_cast<size_t>(p)];
    std::sort(block.begin(), block.end(), [](const Obs& a, const Obs& b) {
      return std::tie(a.subj, a.time, a.value) < std::tie(b.subj, b.time, b.value);
    });
    data.var_card[static_cast<size_t>(p)] = static_cast<int>(block.size());
    for (const Obs& o : block) {
      data.y[pos] = o.value;
      data.subj.push_back(o.subj);
      data.time_idx.push_back(o.time);
      ++pos;
    }
  }
  data.validate();
  return {data, scaling};
}

double destandardize_value(double standardized, const ScalingRecord& scaling, int variable) {
  return standardized * scaling.sd[variable] + scaling.mean[variable];
}

double standardize_value(double original, const ScalingRecord& scaling, int variable) {
  return (original - scaling.mean[variable]) / scaling.sd[variable];
}

double destandardize_scale(double standardized, const ScalingRecord& scaling, int variable) {
  return standardized * scaling.sd[variable];
}

ScalingRecord unit_scaling(const std::vector<std::string>& variables) {
  ScalingRecord s;
  s.variables = variables;
  s.mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(variables.size()));
  s.sd = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(variables.size()));
  s.t_min = 0.0;
  s.t_max = 1.0;
  return s;
}

Eigen::MatrixXd per_variable_count_quantiles(const SparseFunctionalDataset& data) {
  Eigen::MatrixXd out(data.n_vars, 5);
  int offset = 0;
  for (int p = 0; p < data.n_vars; ++p) {
    std::vector<int> counts(static_cast<size_t>(data.n_subjects), 0);
    for (int l = offset; l < offset + data.var_card[static_cast<size_t>(p)]; ++l) {
      ++counts[static_cast<size_t>(data.subj[static_cast<size_t>(l)])];
    }
    std::vector<int> nonzero;
    for (int c : counts) {
      if (c > 0) nonzero.push_back(c);
    }
    std::sort(nonzero.begin(), nonzero.end());
    auto q = [&](double f) {
      if (nonzero.empty()) return 0.0;
      const double idx = f * (static_cast<double>(nonzero.size()) - 1.0);
      const size_t lo = static_cast<size_t>(idx);
      const size_t hi = std::min(lo + 1, nonzero.size() - 1);
      const double w = idx - static_cast<double>(lo);
      return (1.0 - w) * nonzero[lo] + w * nonzero[hi];
    };
    out(p, 0) = q(0.0);
    out(p, 1) = q(0.25);
    out(p, 2) = q(0.5);
    out(p, 3) = q(0.75);
    out(p, 4) = q(1.0);
    offset += data.var_card[static_cast<size_t>(p)];
  }
  return out;
}

}  // namespace msfpca

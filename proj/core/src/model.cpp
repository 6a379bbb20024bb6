#include "msfpca/model.hpp"

#include <cmath>
#include <future>
#include <limits>
#include <numbers>

#include <Eigen/Dense>

#include "msfpca/errors.hpp"

namespace msfpca {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kLog2Pi = 1.8378770664093454836;

// Compensated (Kahan) accumulator; keeps block sums stable under permutation.
struct KahanSum {
  double sum = 0.0;
  double carry = 0.0;
  void add(double x) {
    const double y = x - carry;
    const double t = sum + y;
    carry = (t - sum) - y;
    sum = t;
  }
};

}  // namespace

void ModelConfig::validate() const {
  if (n_components < 1) throw ConfigError("need at least one component");
  if (n_basis < 4) throw ConfigError("basis dimension too small");
  if (n_vars < 1) throw ConfigError("need at least one variable");
  if (n_components > n_vars * n_basis) {
    throw ConfigError("number of components exceeds total spline dimension");
  }
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in (0, 1]");
  const double hp[] = {priors.noise_shape,      priors.noise_scale,
                       priors.eigval_shape,     priors.eigval_scale,
                       priors.mean_smooth_shape, priors.mean_smooth_rate,
                       priors.fpc_smooth_shape, priors.fpc_smooth_rate};
  for (double h : hp) {
    if (!(h > 0.0)) throw ConfigError("prior hyperparameters must be positive");
  }
}

PolarFactor polar_factor(const Eigen::MatrixXd& x) {
  PolarFactor f;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(x.transpose() * x);
  if (es.info() != Eigen::Success) return f;
  f.evals = es.eigenvalues();
  f.evecs = es.eigenvectors();
  const double largest = f.evals[f.evals.size() - 1];
  if (!(largest > 0.0) || f.evals[0] <= 1e-12 * largest) return f;
  f.sqrt_inv = f.evecs * f.evals.cwiseSqrt().cwiseInverse().asDiagonal() *
               f.evecs.transpose();
  f.psi = x * f.sqrt_inv;
  f.ok = f.psi.allFinite();
  return f;
}

Eigen::MatrixXd polar_orthonormalize(const Eigen::MatrixXd& x) {
  const PolarFactor f = polar_factor(x);
  if (!f.ok) {
    throw NumericalError("polar factor undefined: matrix is (near) rank-deficient");
  }
  return f.psi;
}

Eigen::MatrixXd PolarFactor::pullback(const Eigen::MatrixXd& grad_psi,
                                      const Eigen::MatrixXd& x) const {
  // Differentiates psi = x (x^T x)^{-1/2} through the matrix square root:
  // the Sylvester solve in the eigenbasis divides by sqrt(d_i) + sqrt(d_j),
  // which stays bounded away from zero for full-rank x.
  const Eigen::MatrixXd t = sqrt_inv * (grad_psi.transpose() * psi);
  const Eigen::MatrixXd t_eig = evecs.transpose() * t * evecs;
  const Eigen::VectorXd root = evals.cwiseSqrt();
  Eigen::MatrixXd w(t_eig.rows(), t_eig.cols());
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      w(i, j) = t_eig(i, j) / (root[i] + root[j]);
    }
  }
  const Eigen::MatrixXd v = evecs * w * evecs.transpose();
  return grad_psi * sqrt_inv - x * (v + v.transpose());
}

void ParameterState::refresh_derived() {
  fpc_coef = polar_orthonormalize(fpc_latent);
  scores = scores_raw * eigvals.cwiseSqrt().asDiagonal();
}

ParameterState ParameterState::reported() const {
  ParameterState out = *this;
  out.eigvals = eigvals.reverse();
  out.fpc_smooth = fpc_smooth.rowwise().reverse();
  out.fpc_latent = fpc_latent.rowwise().reverse();
  out.fpc_coef = fpc_coef.rowwise().reverse();
  out.scores_raw = scores_raw.rowwise().reverse();
  out.scores = scores.rowwise().reverse();
  return out;
}

Posterior::Posterior(const SparseFunctionalDataset& data, const OrthoBasis& basis,
                     const ModelConfig& config, int n_threads)
    : data_(data), basis_(basis), config_(config), n_threads_(n_threads) {
  config_.validate();
  if (config_.n_vars != data.n_vars) {
    throw ConfigError("model P does not match dataset variable count");
  }
  if (config_.n_basis != basis.size()) {
    throw ConfigError("model Q does not match basis dimension");
  }
  basis_eval_ = basis.evaluate(data.times);
  penalty_ = basis.penalty_alpha(config_.alpha);
  block_offset_.resize(static_cast<size_t>(data.n_vars));
  int pos = 0;
  for (int p = 0; p < data.n_vars; ++p) {
    block_offset_[static_cast<size_t>(p)] = pos;
    pos += data.var_card[static_cast<size_t>(p)];
  }
  block_btb_.resize(static_cast<size_t>(data.n_vars));
  subject_spans_.resize(static_cast<size_t>(data.n_vars));
  for (int p = 0; p < data.n_vars; ++p) {
    const int offset = block_offset_[static_cast<size_t>(p)];
    const int count = data.var_card[static_cast<size_t>(p)];
    Eigen::MatrixXd btb = Eigen::MatrixXd::Zero(config_.n_basis, config_.n_basis);
    auto& spans = subject_spans_[static_cast<size_t>(p)];
    spans.assign(static_cast<size_t>(data.n_subjects), {0, 0});
    for (int l = 0; l < count; ++l) {
      const int m = data.time_idx[static_cast<size_t>(offset + l)];
      btb.noalias() += basis_eval_.row(m).transpose() * basis_eval_.row(m);
      const int i = data.subj[static_cast<size_t>(offset + l)];
      auto& span = spans[static_cast<size_t>(i)];
      if (span.second == 0) span.first = offset + l;
      ++span.second;
    }
    block_btb_[static_cast<size_t>(p)] = btb;
  }
  const int p_count = config_.n_vars;
  const int q = config_.n_basis;
  const int k = config_.n_components;
  dim_ = p_count + p_count * q + p_count + k + p_count * k + p_count * q * k +
         data.n_subjects * k;
}

ParameterState Posterior::blank_state() const {
  const int p = config_.n_vars;
  const int q = config_.n_basis;
  const int k = config_.n_components;
  ParameterState s;
  s.noise_var = Eigen::VectorXd::Ones(p);
  s.mean_coef = Eigen::VectorXd::Zero(p * q);
  s.mean_smooth = Eigen::VectorXd::Ones(p);
  s.eigvals = Eigen::VectorXd::LinSpaced(k, 1.0, static_cast<double>(k));
  s.fpc_smooth = Eigen::MatrixXd::Ones(p, k);
  s.fpc_latent = Eigen::MatrixXd::Identity(p * q, k);
  s.scores_raw = Eigen::MatrixXd::Zero(data_.n_subjects, k);
  s.refresh_derived();
  return s;
}

double Posterior::likelihood_block_impl(int p, const ParameterState& state) const {
  const int q = config_.n_basis;
  const int count = data_.var_card[static_cast<size_t>(p)];
  if (count == 0) return 0.0;
  const int offset = block_offset_[static_cast<size_t>(p)];
  const Eigen::MatrixXd phi = basis_eval_ * state.fpc_coef.middleRows(p * q, q);
  const Eigen::VectorXd mu = basis_eval_ * state.mean_coef.segment(p * q, q);
  const double sigma2 = state.noise_var[p];
  KahanSum ssr;
  for (int l = 0; l < count; ++l) {
    const int i = data_.subj[static_cast<size_t>(offset + l)];
    const int m = data_.time_idx[static_cast<size_t>(offset + l)];
    const double fit = mu[m] + state.scores.row(i).dot(phi.row(m));
    const double r = data_.y[offset + l] - fit;
    ssr.add(r * r);
  }
  return -0.5 * count * (kLog2Pi + std::log(sigma2)) - ssr.sum / (2.0 * sigma2);
}

double Posterior::likelihood_block(int p, const ParameterState& state) const {
  if (p < 0 || p >= config_.n_vars) throw ConfigError("variable index out of range");
  return likelihood_block_impl(p, state);
}

double Posterior::log_likelihood(const ParameterState& state) const {
  KahanSum total;
  if (n_threads_ > 1 && config_.n_vars > 1) {
    std::vector<std::future<double>> futures;
    futures.reserve(static_cast<size_t>(config_.n_vars));
    for (int p = 0; p < config_.n_vars; ++p) {
      futures.push_back(std::async(std::launch::async,
                                   [this, p, &state] { return likelihood_block_impl(p, state); }));
    }
    for (auto& f : futures) total.add(f.get());
  } else {
    for (int p = 0; p < config_.n_vars; ++p) total.add(likelihood_block_impl(p, state));
  }
  return total.sum;
}

double Posterior::log_posterior(const ParameterState& state) const {
  const int p_count = config_.n_vars;
  const int q = config_.n_basis;
  const int k = config_.n_components;
  const PriorConfig& pr = config_.priors;

  if (!(state.noise_var.array() > 0.0).all() ||
      !(state.mean_smooth.array() > 0.0).all() ||
      !(state.fpc_smooth.array() > 0.0).all() ||
      !(state.eigvals.array() > 0.0).all()) {
    return kNegInf;
  }
  for (int j = 1; j < k; ++j) {
    if (!(state.eigvals[j] >= state.eigvals[j - 1])) return kNegInf;
  }

  double lp = log_likelihood(state);

  for (int p = 0; p < p_count; ++p) {
    const double s2 = state.noise_var[p];
    lp += -(pr.noise_shape + 1.0) * std::log(s2) - pr.noise_scale / s2;

    const double h = state.mean_smooth[p];
    const auto w = state.mean_coef.segment(p * q, q);
    const double quad = w.dot(penalty_ * w);
    lp += (pr.mean_smooth_shape - 1.0) * std::log(h) - pr.mean_smooth_rate * h;
    lp += 0.5 * q * std::log(h) - 0.5 * h * quad;

    for (int j = 0; j < k; ++j) {
      const double hj = state.fpc_smooth(p, j);
      const auto psi = state.fpc_coef.col(j).segment(p * q, q);
      const double quad_psi = psi.dot(penalty_ * psi);
      lp += (pr.fpc_smooth_shape - 1.0) * std::log(hj) - pr.fpc_smooth_rate * hj;
      lp += 0.5 * q * std::log(hj) - 0.5 * hj * quad_psi;
    }
  }
  for (int j = 0; j < k; ++j) {
    const double lam = state.eigvals[j];
    lp += -(pr.eigval_shape + 1.0) * std::log(lam) - pr.eigval_scale / lam;
  }
  lp += -0.5 * state.fpc_latent.squaredNorm();
  lp += -0.5 * state.scores_raw.squaredNorm();

  return std::isfinite(lp) ? lp : kNegInf;
}

Eigen::VectorXd Posterior::to_unconstrained(const ParameterState& state) const {
  const int p_count = config_.n_vars;
  const int q = config_.n_basis;
  const int k = config_.n_components;
  const int n = data_.n_subjects;
  Eigen::VectorXd v(dim_);
  int pos = 0;
  for (int p = 0; p < p_count; ++p) v[pos++] = std::log(state.noise_var[p]);
  v.segment(pos, p_count * q) = state.mean_coef;
  pos += p_count * q;
  for (int p = 0; p < p_count; ++p) v[pos++] = std::log(state.mean_smooth[p]);
  v[pos++] = std::log(state.eigvals[0]);
  for (int j = 1; j < k; ++j) {
    v[pos++] = std::log(state.eigvals[j] - state.eigvals[j - 1]);
  }
  for (int j = 0; j < k; ++j) {
    for (int p = 0; p < p_count; ++p) v[pos++] = std::log(state.fpc_smooth(p, j));
  }
  Eigen::Map<Eigen::VectorXd>(v.data() + pos, p_count * q * k) =
      Eigen::Map<const Eigen::VectorXd>(state.fpc_latent.data(), p_count * q * k);
  pos += p_count * q * k;
  Eigen::Map<Eigen::VectorXd>(v.data() + pos, n * k) =
      Eigen::Map<const Eigen::VectorXd>(state.scores_raw.data(), n * k);
  pos += n * k;
  return v;
}

ParameterState Posterior::from_unconstrained(const Eigen::VectorXd& v) const {
  if (v.size() != dim_) throw ConfigError("unconstrained vector has wrong length");
  const int p_count = config_.n_vars;
  const int q = config_.n_basis;
  const int k = config_.n_components;
  const int n = data_.n_subjects;
  ParameterState s;
  int pos = 0;
  s.noise_var = v.segment(pos, p_count).array().exp();
  pos += p_count;
  s.mean_coef = v.segment(pos, p_count * q);
  pos += p_count * q;
  s.mean_smooth = v.segment(pos, p_count).array().exp();
  pos += p_count;
  s.eigvals.resize(k);
  s.eigvals[0] = std::exp(v[pos]);
  for (int j = 1; j < k; ++j) s.eigvals[j] = s.eigvals[j - 1] + std::exp(v[pos + j]);
  pos += k;
  s.fpc_smooth.resize(p_count, k);
  for (int j = 0; j < k; ++j) {
    for (int p = 0; p < p_count; ++p) s.fpc_smooth(p, j) = std::exp(v[pos++]);
  }
  s.fpc_latent.resize(p_count * q, k);
  Eigen::Map<Eigen::VectorXd>(s.fpc_latent.data(), p_count * q * k) =
      v.segment(pos, p_count * q * k);
  pos += p_count * q * k;
  s.scores_raw.resize(n, k);
  Eigen::Map<Eigen::VectorXd>(s.scores_raw.data(), n * k) = v.segment(pos, n * k);
  pos += n * k;
  s.refresh_derived();
  return s;
}

double Posterior::log_density(const Eigen::VectorXd& v) const {
  ParameterState state;
  try {
    state = from_unconstrained(v);
  } catch (const NumericalError&) {
    return kNegInf;
  }
  const int p_count = config_.n_vars;
  const int q = config_.n_basis;
  const int k = config_.n_components;
  // Log Jacobian: one y per positive coordinate, including the ordered gaps.
  double log_jac = v.segment(0, p_count).sum();
  log_jac += v.segment(p_count + p_count * q, p_count + k + p_count * k).sum();
  const double lp = log_posterior(state);
  return std::isfinite(lp) ? lp + log_jac : kNegInf;
}

double Posterior::log_density_gradient(const Eigen::VectorXd& v,
                                       Eigen::VectorXd& grad) const {
  grad.setZero(dim_);
  const int p_count = config_.n_vars;
  const int q = config_.n_basis;
  const int k = config_.n_components;
  const int n = data_.n_subjects;
  const PriorConfig& pr = config_.priors;

  ParameterState state;
  try {
    state = from_unconstrained(v);
  } catch (const NumericalError&) {
    return kNegInf;
  }
  const PolarFactor polar = polar_factor(state.fpc_latent);
  if (!polar.ok) return kNegInf;

  // Constrained-coordinate accumulators.
  Eigen::VectorXd g_noise = Eigen::VectorXd::Zero(p_count);
  Eigen::VectorXd g_mean_coef = Eigen::VectorXd::Zero(p_count * q);
  Eigen::VectorXd g_mean_smooth = Eigen::VectorXd::Zero(p_count);
  Eigen::VectorXd g_eigvals = Eigen::VectorXd::Zero(k);
  Eigen::MatrixXd g_fpc_smooth = Eigen::MatrixXd::Zero(p_count, k);
  Eigen::MatrixXd g_fpc_coef = Eigen::MatrixXd::Zero(p_count * q, k);
  Eigen::MatrixXd g_scores = Eigen::MatrixXd::Zero(n, k);

  double lp = 0.0;

  // Likelihood blocks (optionally parallel; reduction order is fixed).
  std::vector<BlockGrad> blocks(static_cast<size_t>(p_count));
  if (n_threads_ > 1 && p_count > 1) {
    std::vector<std::future<BlockGrad>> futures;
    futures.reserve(static_cast<size_t>(p_count));
    for (int p = 0; p < p_count; ++p) {
      futures.push_back(std::async(std::launch::async,
                                   [this, p, &state] { return likelihood_block_grad(p, state); }));
    }
    for (int p = 0; p < p_count; ++p) blocks[static_cast<size_t>(p)] = futures[static_cast<size_t>(p)].get();
  } else {
    for (int p = 0; p < p_count; ++p) blocks[static_cast<size_t>(p)] = likelihood_block_grad(p, state);
  }
  KahanSum loglik;
  for (int p = 0; p < p_count; ++p) {
    const BlockGrad& b = blocks[static_cast<size_t>(p)];
    loglik.add(b.loglik);
    g_noise[p] += b.g_noise_var;
    g_mean_coef.segment(p * q, q) += b.g_mean_coef;
    g_fpc_coef.middleRows(p * q, q) += b.g_fpc_coef;
    if (b.g_scores.size() > 0) g_scores += b.g_scores;
  }
  lp += loglik.sum;

  // Priors and smoothing penalties.
  for (int p = 0; p < p_count; ++p) {
    const double s2 = state.noise_var[p];
    lp += -(pr.noise_shape + 1.0) * std::log(s2) - pr.noise_scale / s2;
    g_noise[p] += -(pr.noise_shape + 1.0) / s2 + pr.noise_scale / (s2 * s2);

    const double h = state.mean_smooth[p];
    const auto w = state.mean_coef.segment(p * q, q);
    const Eigen::VectorXd pw = penalty_ * w;
    const double quad = w.dot(pw);
    lp += (pr.mean_smooth_shape - 1.0) * std::log(h) - pr.mean_smooth_rate * h;
    lp += 0.5 * q * std::log(h) - 0.5 * h * quad;
    g_mean_coef.segment(p * q, q) -= h * pw;
    g_mean_smooth[p] = (pr.mean_smooth_shape - 1.0) / h - pr.mean_smooth_rate +
                       0.5 * q / h - 0.5 * quad;

    for (int j = 0; j < k; ++j) {
      const double hj = state.fpc_smooth(p, j);
      const auto psi = state.fpc_coef.col(j).segment(p * q, q);
      const Eigen::VectorXd ppsi = penalty_ * psi;
      const double quad_psi = psi.dot(ppsi);
      lp += (pr.fpc_smooth_shape - 1.0) * std::log(hj) - pr.fpc_smooth_rate * hj;
      lp += 0.5 * q * std::log(hj) - 0.5 * hj * quad_psi;
      g_fpc_coef.col(j).segment(p * q, q) -= hj * ppsi;
      g_fpc_smooth(p, j) = (pr.fpc_smooth_shape - 1.0) / hj - pr.fpc_smooth_rate +
                           0.5 * q / hj - 0.5 * quad_psi;
    }
  }
  for (int j = 0; j < k; ++j) {
    const double lam = state.eigvals[j];
    lp += -(pr.eigval_shape + 1.0) * std::log(lam) - pr.eigval_scale / lam;
    g_eigvals[j] += -(pr.eigval_shape + 1.0) / lam + pr.eigval_scale / (lam * lam);
  }
  lp += -0.5 * state.fpc_latent.squaredNorm();
  lp += -0.5 * state.scores_raw.squaredNorm();

  if (!std::isfinite(lp)) return kNegInf;

  // Scores chain rule: scores = scores_raw * diag(sqrt(eigvals)).
  Eigen::MatrixXd g_scores_raw = -state.scores_raw;
  for (int j = 0; j < k; ++j) {
    const double root = std::sqrt(state.eigvals[j]);
    g_scores_raw.col(j) += g_scores.col(j) * root;
    g_eigvals[j] += g_scores.col(j).dot(state.scores_raw.col(j)) / (2.0 * root);
  }

  // FPC chain rule through the polar factor, plus the standard normal prior.
  const Eigen::MatrixXd g_latent =
      polar.pullback(g_fpc_coef, state.fpc_latent) - state.fpc_latent;

  // Map to unconstrained coordinates; each log transform contributes its
  // Jacobian term (the +1).
  int pos = 0;
  double log_jac = 0.0;
  for (int p = 0; p < p_count; ++p) {
    grad[pos] = state.noise_var[p] * g_noise[p] + 1.0;
    log_jac += v[pos];
    ++pos;
  }
  grad.segment(pos, p_count * q) = g_mean_coef;
  pos += p_count * q;
  for (int p = 0; p < p_count; ++p) {
    grad[pos] = state.mean_smooth[p] * g_mean_smooth[p] + 1.0;
    log_jac += v[pos];
    ++pos;
  }
  // Ordered eigenvalues: lambda_j depends on all gaps up to j.
  double suffix = 0.0;
  Eigen::VectorXd suffix_sums(k);
  for (int j = k - 1; j >= 0; --j) {
    suffix += g_eigvals[j];
    suffix_sums[j] = suffix;
  }
  for (int j = 0; j < k; ++j) {
    grad[pos] = std::exp(v[pos]) * suffix_sums[j] + 1.0;
    log_jac += v[pos];
    ++pos;
  }
  for (int j = 0; j < k; ++j) {
    for (int p = 0; p < p_count; ++p) {
      grad[pos] = state.fpc_smooth(p, j) * g_fpc_smooth(p, j) + 1.0;
      log_jac += v[pos];
      ++pos;
    }
  }
  Eigen::Map<Eigen::VectorXd>(grad.data() + pos, p_count * q * k) =
      Eigen::Map<const Eigen::VectorXd>(g_latent.data(), p_count * q * k);
  pos += p_count * q * k;
  Eigen::Map<Eigen::VectorXd>(grad.data() + pos, n * k) =
      Eigen::Map<const Eigen::VectorXd>(g_scores_raw.data(), n * k);

  if (!grad.allFinite()) {
    grad.setZero(dim_);
    return kNegInf;
  }
  return lp + log_jac;
}

double Posterior::fpc_conditional(ParameterState& state, Eigen::MatrixXd* grad_latent) const {
  const int p_count = config_.n_vars;
  const int q = config_.n_basis;
  const int k = config_.n_components;
  const PolarFactor polar = polar_factor(state.fpc_latent);
  if (!polar.ok) return kNegInf;
  state.fpc_coef = polar.psi;

  double lp = 0.0;
  Eigen::MatrixXd g_fpc_coef;
  if (grad_latent != nullptr) {
    g_fpc_coef = Eigen::MatrixXd::Zero(p_count * q, k);
    KahanSum ll;
    for (int p = 0; p < p_count; ++p) {
      const BlockGrad b = likelihood_block_grad(p, state);
      ll.add(b.loglik);
      g_fpc_coef.middleRows(p * q, q) += b.g_fpc_coef;
    }
    lp += ll.sum;
  } else {
    lp += log_likelihood(state);
  }
  for (int p = 0; p < p_count; ++p) {
    for (int j = 0; j < k; ++j) {
      const double hj = state.fpc_smooth(p, j);
      const auto psi = state.fpc_coef.col(j).segment(p * q, q);
      const Eigen::VectorXd ppsi = penalty_ * psi;
      lp += -0.5 * hj * psi.dot(ppsi);
      if (grad_latent != nullptr) g_fpc_coef.col(j).segment(p * q, q) -= hj * ppsi;
    }
  }
  lp += -0.5 * state.fpc_latent.squaredNorm();
  if (grad_latent != nullptr) {
    *grad_latent = polar.pullback(g_fpc_coef, state.fpc_latent) - state.fpc_latent;
    if (!grad_latent->allFinite()) {
      grad_latent->setZero();
      return kNegInf;
    }
  }
  return std::isfinite(lp) ? lp : kNegInf;
}

Eigen::VectorXd Posterior::fitted_values(const ParameterState& state) const {
  const int q = config_.n_basis;
  Eigen::VectorXd fit(data_.n_obs());
  for (int p = 0; p < config_.n_vars; ++p) {
    const int offset = block_offset_[static_cast<size_t>(p)];
    const int count = data_.var_card[static_cast<size_t>(p)];
    if (count == 0) continue;
    const Eigen::MatrixXd phi = basis_eval_ * state.fpc_coef.middleRows(p * q, q);
    const Eigen::VectorXd mu = basis_eval_ * state.mean_coef.segment(p * q, q);
    for (int l = 0; l < count; ++l) {
      const int i = data_.subj[static_cast<size_t>(offset + l)];
      const int m = data_.time_idx[static_cast<size_t>(offset + l)];
      fit[offset + l] = mu[m] + state.scores.row(i).dot(phi.row(m));
    }
  }
  return fit;
}

Posterior::BlockGrad Posterior::likelihood_block_grad(int p, const ParameterState& state) const {
  const int q = config_.n_basis;
  const int k = config_.n_components;
  const int n = data_.n_subjects;
  const int count = data_.var_card[static_cast<size_t>(p)];
  BlockGrad out;
  out.g_mean_coef = Eigen::VectorXd::Zero(q);
  out.g_fpc_coef = Eigen::MatrixXd::Zero(q, k);
  out.g_scores = Eigen::MatrixXd::Zero(n, k);
  if (count == 0) return out;

  const int offset = block_offset_[static_cast<size_t>(p)];
  const int m_count = data_.n_times();
  const Eigen::MatrixXd phi = basis_eval_ * state.fpc_coef.middleRows(p * q, q);
  const Eigen::VectorXd mu = basis_eval_ * state.mean_coef.segment(p * q, q);
  const double sigma2 = state.noise_var[p];

  Eigen::VectorXd g_mu_eval = Eigen::VectorXd::Zero(m_count);
  Eigen::MatrixXd g_phi = Eigen::MatrixXd::Zero(m_count, k);
  KahanSum ssr;
  for (int l = 0; l < count; ++l) {
    const int i = data_.subj[static_cast<size_t>(offset + l)];
    const int m = data_.time_idx[static_cast<size_t>(offset + l)];
    const double fit = mu[m] + state.scores.row(i).dot(phi.row(m));
    const double r = data_.y[offset + l] - fit;
    ssr.add(r * r);
    const double c = r / sigma2;
    g_mu_eval[m] += c;
    g_phi.row(m) += c * state.scores.row(i);
    out.g_scores.row(i) += c * phi.row(m);
  }
  out.loglik = -0.5 * count * (kLog2Pi + std::log(sigma2)) - ssr.sum / (2.0 * sigma2);
  out.g_noise_var = -0.5 * count / sigma2 + ssr.sum / (2.0 * sigma2 * sigma2);
  out.g_mean_coef = basis_eval_.transpose() * g_mu_eval;
  out.g_fpc_coef = basis_eval_.transpose() * g_phi;
  return out;
}

}  // namespace msfpca

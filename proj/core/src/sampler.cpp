#include "msfpca/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>

#include <Eigen/Dense>

#include "msfpca/errors.hpp"
#include "msfpca/mvn.hpp"

namespace msfpca {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kDeltaMax = 1000.0;

// Running mean/variance per coordinate (Welford).
class RunningVariance {
 public:
  explicit RunningVariance(int dim)
      : count_(0), mean_(Eigen::VectorXd::Zero(dim)), m2_(Eigen::VectorXd::Zero(dim)) {}

  void add(const Eigen::VectorXd& x) {
    ++count_;
    const Eigen::VectorXd delta = x - mean_;
    mean_ += delta / count_;
    m2_ += delta.cwiseProduct(x - mean_);
  }

  int count() const { return count_; }

  // Sample variance shrunk toward a small constant, as commonly done for
  // warmup metric estimates.
  Eigen::VectorXd regularized_variance() const {
    const double n = static_cast<double>(count_);
    Eigen::VectorXd var = m2_ / std::max(1.0, n - 1.0);
    return (n / (n + 5.0)) * var +
           Eigen::VectorXd::Constant(var.size(), 1e-3 * (5.0 / (n + 5.0)));
  }

 private:
  int count_;
  Eigen::VectorXd mean_;
  Eigen::VectorXd m2_;
};

}  // namespace

void SamplerConfig::validate() const {
  if (n_chains < 1) throw ConfigError("need at least one chain");
  if (n_warmup < 0) throw ConfigError("warmup count must be nonnegative");
  if (n_samples < 1) throw ConfigError("need at least one retained sample");
  if (!(target_accept > 0.0 && target_accept < 1.0)) {
    throw ConfigError("target acceptance must lie in (0, 1)");
  }
  if (max_treedepth < 1 || max_treedepth > 14) {
    throw ConfigError("max tree depth must lie in [1, 14]");
  }
  if (n_threads < 1) throw ConfigError("thread count must be positive");
}

const ParameterState& PosteriorDraws::draw(int flat_index) const {
  const int per = n_draws_per_chain();
  return chains[static_cast<size_t>(flat_index / per)][static_cast<size_t>(flat_index % per)];
}

OrthoBasis PosteriorDraws::rebuild_basis() const {
  return build_basis(model_config.n_basis, basis_degree, basis_quad_points);
}

// ---------------------------------------------------------------------------
// NUTS kernel

struct NutsKernel::Tree {
  Eigen::VectorXd v_minus, r_minus, grad_minus;
  double logp_minus = kNegInf;
  Eigen::VectorXd v_plus, r_plus, grad_plus;
  double logp_plus = kNegInf;
  Eigen::VectorXd v_sample;
  double logp_sample = kNegInf;
  double n_keep = 0.0;
  bool ok = false;
  double accept_sum = 0.0;
  int n_leapfrog = 0;
  bool divergent = false;
};

NutsKernel::NutsKernel(const LogDensityTarget& target, int max_treedepth)
    : target_(target), max_treedepth_(max_treedepth) {
  inv_metric_ = Eigen::VectorXd::Ones(target.dim());
}

void NutsKernel::set_inv_metric(const Eigen::VectorXd& inv_metric) {
  if (inv_metric.size() != target_.dim()) {
    throw ConfigError("metric dimension mismatch");
  }
  inv_metric_ = inv_metric;
}

double NutsKernel::hamiltonian(double logp, const Eigen::VectorXd& r) const {
  return logp - 0.5 * r.cwiseProduct(r).dot(inv_metric_);
}

void NutsKernel::leapfrog(Eigen::VectorXd& v, Eigen::VectorXd& r,
                          Eigen::VectorXd& grad, double& logp, double eps) const {
  r += 0.5 * eps * grad;
  v += eps * inv_metric_.cwiseProduct(r);
  logp = target_.value_and_gradient(v, grad);
  if (!std::isfinite(logp)) {
    logp = kNegInf;
    return;
  }
  r += 0.5 * eps * grad;
}

void NutsKernel::init_step_size(const Eigen::VectorXd& v0, Rng& rng) {
  Eigen::VectorXd grad0(target_.dim());
  const double logp0 = target_.value_and_gradient(v0, grad0);
  if (!std::isfinite(logp0)) {
    step_size_ = 0.1;
    return;
  }
  Eigen::VectorXd r0(target_.dim());
  for (Eigen::Index i = 0; i < r0.size(); ++i) {
    r0[i] = rng.normal() / std::sqrt(inv_metric_[i]);
  }
  const double h0 = hamiltonian(logp0, r0);
  step_size_ = 1.0;

  auto one_step_ratio = [&]() {
    Eigen::VectorXd v = v0;
    Eigen::VectorXd r = r0;
    Eigen::VectorXd grad = grad0;
    double logp = logp0;
    leapfrog(v, r, grad, logp, step_size_);
    return std::isfinite(logp) ? hamiltonian(logp, r) - h0 : kNegInf;
  };

  double log_ratio = one_step_ratio();
  const double a = log_ratio > std::log(0.5) ? 1.0 : -1.0;
  for (int it = 0; it < 100; ++it) {
    if (!(a * log_ratio > -a * std::log(2.0))) break;
    step_size_ *= std::pow(2.0, a);
    if (step_size_ < 1e-10 || step_size_ > 1e10) break;
    log_ratio = one_step_ratio();
  }
}

bool NutsKernel::no_uturn(const Tree& tree) const {
  const Eigen::VectorXd dv = tree.v_plus - tree.v_minus;
  return dv.dot(inv_metric_.cwiseProduct(tree.r_minus)) >= 0.0 &&
         dv.dot(inv_metric_.cwiseProduct(tree.r_plus)) >= 0.0;
}

NutsKernel::Tree NutsKernel::build_tree(const Eigen::VectorXd& v,
                                        const Eigen::VectorXd& r,
                                        const Eigen::VectorXd& grad, double logp,
                                        double log_u, int dir, int depth, double h0,
                                        Rng& rng) const {
  if (depth == 0) {
    Tree t;
    Eigen::VectorXd v1 = v, r1 = r, grad1 = grad;
    double logp1 = logp;
    leapfrog(v1, r1, grad1, logp1, dir * step_size_);
    const double h = std::isfinite(logp1) ? hamiltonian(logp1, r1) : kNegInf;
    t.v_minus = t.v_plus = v1;
    t.r_minus = t.r_plus = r1;
    t.grad_minus = t.grad_plus = grad1;
    t.logp_minus = t.logp_plus = logp1;
    t.v_sample = std::move(v1);
    t.logp_sample = logp1;
    t.n_keep = (log_u <= h) ? 1.0 : 0.0;
    t.ok = (log_u < kDeltaMax + h);
    t.divergent = !t.ok;
    t.accept_sum = std::min(1.0, std::exp(h - h0));
    if (!std::isfinite(t.accept_sum)) t.accept_sum = 0.0;
    t.n_leapfrog = 1;
    return t;
  }
  Tree t = build_tree(v, r, grad, logp, log_u, dir, depth - 1, h0, rng);
  if (!t.ok) return t;
  Tree outer = dir < 0 ? build_tree(t.v_minus, t.r_minus, t.grad_minus, t.logp_minus,
                                    log_u, dir, depth - 1, h0, rng)
                       : build_tree(t.v_plus, t.r_plus, t.grad_plus, t.logp_plus,
                                    log_u, dir, depth - 1, h0, rng);
  if (dir < 0) {
    t.v_minus = outer.v_minus;
    t.r_minus = outer.r_minus;
    t.grad_minus = outer.grad_minus;
    t.logp_minus = outer.logp_minus;
  } else {
    t.v_plus = outer.v_plus;
    t.r_plus = outer.r_plus;
    t.grad_plus = outer.grad_plus;
    t.logp_plus = outer.logp_plus;
  }
  if (outer.n_keep > 0.0 && rng.uniform() * (t.n_keep + outer.n_keep) < outer.n_keep) {
    t.v_sample = outer.v_sample;
    t.logp_sample = outer.logp_sample;
  }
  t.n_keep += outer.n_keep;
  t.accept_sum += outer.accept_sum;
  t.n_leapfrog += outer.n_leapfrog;
  t.divergent = t.divergent || outer.divergent;
  t.ok = outer.ok && no_uturn(t);
  return t;
}

Eigen::VectorXd NutsKernel::step(const Eigen::VectorXd& v0, Rng& rng,
                                 DrawDiagnostics& info) {
  Eigen::VectorXd grad0(target_.dim());
  const double logp0 = target_.value_and_gradient(v0, grad0);
  info = DrawDiagnostics{};
  info.step_size = step_size_;
  info.log_density = logp0;
  if (!std::isfinite(logp0)) {
    return v0;
  }
  Eigen::VectorXd r0(target_.dim());
  for (Eigen::Index i = 0; i < r0.size(); ++i) {
    r0[i] = rng.normal() / std::sqrt(inv_metric_[i]);
  }
  const double h0 = hamiltonian(logp0, r0);
  const double log_u = h0 + std::log(rng.uniform_open());

  Eigen::VectorXd v_minus = v0, v_plus = v0;
  Eigen::VectorXd r_minus = r0, r_plus = r0;
  Eigen::VectorXd grad_minus = grad0, grad_plus = grad0;
  double logp_minus = logp0, logp_plus = logp0;

  Eigen::VectorXd v_sample = v0;
  double logp_sample = logp0;
  double n_total = 1.0;
  double accept_sum = 0.0;
  int n_leapfrog = 0;
  bool divergent = false;
  bool ok = true;
  int depth = 0;

  while (ok && depth < max_treedepth_) {
    const int dir = rng.uniform() < 0.5 ? -1 : 1;
    Tree sub = dir < 0 ? build_tree(v_minus, r_minus, grad_minus, logp_minus, log_u,
                                    dir, depth, h0, rng)
                       : build_tree(v_plus, r_plus, grad_plus, logp_plus, log_u, dir,
                                    depth, h0, rng);
    if (dir < 0) {
      v_minus = sub.v_minus;
      r_minus = sub.r_minus;
      grad_minus = sub.grad_minus;
      logp_minus = sub.logp_minus;
    } else {
      v_plus = sub.v_plus;
      r_plus = sub.r_plus;
      grad_plus = sub.grad_plus;
      logp_plus = sub.logp_plus;
    }
    accept_sum += sub.accept_sum;
    n_leapfrog += sub.n_leapfrog;
    divergent = divergent || sub.divergent;
    if (sub.ok && sub.n_keep > 0.0 && rng.uniform() * n_total < sub.n_keep) {
      v_sample = sub.v_sample;
      logp_sample = sub.logp_sample;
    }
    n_total += sub.n_keep;
    const Eigen::VectorXd dv = v_plus - v_minus;
    ok = sub.ok && dv.dot(inv_metric_.cwiseProduct(r_minus)) >= 0.0 &&
         dv.dot(inv_metric_.cwiseProduct(r_plus)) >= 0.0;
    ++depth;
  }

  info.accept_stat = n_leapfrog > 0 ? accept_sum / n_leapfrog : 0.0;
  info.treedepth = depth;
  info.n_leapfrog = n_leapfrog;
  info.divergent = divergent;
  info.log_density = logp_sample;
  return v_sample;
}

// ---------------------------------------------------------------------------
// Dual averaging

DualAveraging::DualAveraging(double target_accept, double initial_step)
    : target_(target_accept) {
  restart(initial_step);
}

void DualAveraging::restart(double initial_step) {
  mu_ = std::log(10.0 * initial_step);
  log_step_ = std::log(initial_step);
  log_step_avg_ = std::log(initial_step);
  h_avg_ = 0.0;
  iter_ = 0;
}

double DualAveraging::update(double accept_stat) {
  ++iter_;
  constexpr double kGamma = 0.05;
  constexpr double kT0 = 10.0;
  constexpr double kKappa = 0.75;
  const double w = 1.0 / (iter_ + kT0);
  h_avg_ = (1.0 - w) * h_avg_ + w * (target_ - accept_stat);
  log_step_ = mu_ - std::sqrt(static_cast<double>(iter_)) / kGamma * h_avg_;
  const double w2 = std::pow(static_cast<double>(iter_), -kKappa);
  log_step_avg_ = w2 * log_step_ + (1.0 - w2) * log_step_avg_;
  return std::exp(log_step_);
}

double DualAveraging::adapted() const { return std::exp(log_step_avg_); }

// ---------------------------------------------------------------------------
// Conjugate updates

void gibbs_noise_var(const Posterior& post, ParameterState& state, Rng& rng) {
  const auto& data = post.data();
  const PriorConfig& pr = post.config().priors;
  const Eigen::VectorXd fit = post.fitted_values(state);
  for (int p = 0; p < data.n_vars; ++p) {
    const int offset = post.block_offset(p);
    const int count = data.var_card[static_cast<size_t>(p)];
    double ssr = 0.0;
    for (int l = 0; l < count; ++l) {
      const double r = data.y[offset + l] - fit[offset + l];
      ssr += r * r;
    }
    state.noise_var[p] =
        rng.inv_gamma(pr.noise_shape + 0.5 * count, pr.noise_scale + 0.5 * ssr);
  }
}

void gibbs_eigenvalues(const Posterior& post, ParameterState& state, Rng& rng) {
  const PriorConfig& pr = post.config().priors;
  const int k = post.config().n_components;
  const int n = state.n_subjects();
  Eigen::VectorXd proposal(k);
  for (int j = 0; j < k; ++j) {
    const double sum_sq = state.scores.col(j).squaredNorm();
    proposal[j] = rng.inv_gamma(pr.eigval_shape + 0.5 * n, pr.eigval_scale + 0.5 * sum_sq);
  }
  // Joint independent proposal, accepted only if the stored (ascending)
  // ordering is preserved; otherwise keep the current values.
  bool ordered = true;
  for (int j = 1; j < k; ++j) {
    if (!(proposal[j] >= proposal[j - 1])) {
      ordered = false;
      break;
    }
  }
  if (ordered) {
    state.eigvals = proposal;
    // Scores stay fixed; their unit-scale representation shifts.
    state.scores_raw = state.scores * state.eigvals.cwiseSqrt().cwiseInverse().asDiagonal();
  }
}

void gibbs_smoothing(const Posterior& post, ParameterState& state, Rng& rng) {
  const PriorConfig& pr = post.config().priors;
  const int q = post.config().n_basis;
  const int k = post.config().n_components;
  const Eigen::MatrixXd& penalty = post.penalty();
  for (int p = 0; p < post.config().n_vars; ++p) {
    const auto w = state.mean_coef.segment(p * q, q);
    const double quad = w.dot(penalty * w);
    state.mean_smooth[p] =
        rng.gamma(pr.mean_smooth_shape + 0.5 * q, pr.mean_smooth_rate + 0.5 * quad);
    for (int j = 0; j < k; ++j) {
      const auto psi = state.fpc_coef.col(j).segment(p * q, q);
      const double quad_psi = psi.dot(penalty * psi);
      state.fpc_smooth(p, j) =
          rng.gamma(pr.fpc_smooth_shape + 0.5 * q, pr.fpc_smooth_rate + 0.5 * quad_psi);
    }
  }
}

void gibbs_mean_coef(const Posterior& post, ParameterState& state, Rng& rng) {
  const auto& data = post.data();
  const int q = post.config().n_basis;
  const Eigen::MatrixXd& basis_eval = post.basis_at_times();
  for (int p = 0; p < data.n_vars; ++p) {
    const int offset = post.block_offset(p);
    const int count = data.var_card[static_cast<size_t>(p)];
    const double sigma2 = state.noise_var[p];
    const Eigen::MatrixXd phi = basis_eval * state.fpc_coef.middleRows(p * q, q);
    Eigen::VectorXd agg = Eigen::VectorXd::Zero(data.n_times());
    for (int l = 0; l < count; ++l) {
      const int i = data.subj[static_cast<size_t>(offset + l)];
      const int m = data.time_idx[static_cast<size_t>(offset + l)];
      const double resid = data.y[offset + l] - state.scores.row(i).dot(phi.row(m));
      agg[m] += resid / sigma2;
    }
    const Eigen::MatrixXd precision =
        state.mean_smooth[p] * post.penalty() + post.block_btb(p) / sigma2;
    const Eigen::VectorXd rhs = basis_eval.transpose() * agg;
    state.mean_coef.segment(p * q, q) = mvn_sample_from_precision(precision, rhs, rng);
  }
}

void gibbs_mean_coef_collapsed(const Posterior& post, ParameterState& state, Rng& rng) {
  const auto& data = post.data();
  const int q = post.config().n_basis;
  const int k = post.config().n_components;
  const int p_count = data.n_vars;
  const int pq = p_count * q;
  const Eigen::MatrixXd& basis_eval = post.basis_at_times();

  std::vector<Eigen::MatrixXd> phis(static_cast<size_t>(p_count));
  for (int p = 0; p < p_count; ++p) {
    phis[static_cast<size_t>(p)] = basis_eval * state.fpc_coef.middleRows(p * q, q);
  }
  // Prior precision: block-diagonal h_p P_alpha.
  Eigen::MatrixXd precision = Eigen::MatrixXd::Zero(pq, pq);
  for (int p = 0; p < p_count; ++p) {
    precision.block(p * q, p * q, q, q) = state.mean_smooth[p] * post.penalty();
  }
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(pq);

  // Marginal covariance of subject i's stacked observations is
  // Phi_i Lambda Phi_i^T + diag(noise); Woodbury keeps the inverse K x K.
  for (int i = 0; i < data.n_subjects; ++i) {
    int j_total = 0;
    for (int p = 0; p < p_count; ++p) j_total += post.subject_spans(p)[static_cast<size_t>(i)].second;
    if (j_total == 0) continue;
    Eigen::MatrixXd loading(j_total, k);
    Eigen::MatrixXd design = Eigen::MatrixXd::Zero(j_total, pq);
    Eigen::VectorXd inv_noise(j_total);
    Eigen::VectorXd y(j_total);
    int row = 0;
    for (int p = 0; p < p_count; ++p) {
      const auto [start, len] = post.subject_spans(p)[static_cast<size_t>(i)];
      for (int l = start; l < start + len; ++l) {
        const int m = data.time_idx[static_cast<size_t>(l)];
        loading.row(row) = phis[static_cast<size_t>(p)].row(m);
        design.block(row, p * q, 1, q) = basis_eval.row(m);
        inv_noise[row] = 1.0 / state.noise_var[p];
        y[row] = data.y[l];
        ++row;
      }
    }
    const Eigen::MatrixXd dphi = inv_noise.asDiagonal() * loading;
    const Eigen::MatrixXd core =
        Eigen::MatrixXd(state.eigvals.cwiseInverse().asDiagonal()) +
        loading.transpose() * dphi;
    const Eigen::MatrixXd core_inv_phit_d = core.ldlt().solve(dphi.transpose());
    // V^{-1} z = D^{-1} z - D^{-1} Phi core^{-1} Phi^T D^{-1} z.
    auto apply_vinv = [&](const Eigen::MatrixXd& z) -> Eigen::MatrixXd {
      return inv_noise.asDiagonal() * z - dphi * (core_inv_phit_d * z);
    };
    precision.noalias() += design.transpose() * apply_vinv(design);
    rhs.noalias() += design.transpose() * apply_vinv(y);
  }
  state.mean_coef = mvn_sample_from_precision(precision, rhs, rng);
}

void gibbs_scores(const Posterior& post, ParameterState& state, Rng& rng) {
  const auto& data = post.data();
  const int q = post.config().n_basis;
  const int k = post.config().n_components;
  const Eigen::MatrixXd& basis_eval = post.basis_at_times();

  std::vector<Eigen::MatrixXd> phis(static_cast<size_t>(data.n_vars));
  std::vector<Eigen::VectorXd> mus(static_cast<size_t>(data.n_vars));
  for (int p = 0; p < data.n_vars; ++p) {
    phis[static_cast<size_t>(p)] = basis_eval * state.fpc_coef.middleRows(p * q, q);
    mus[static_cast<size_t>(p)] = basis_eval * state.mean_coef.segment(p * q, q);
  }
  const Eigen::VectorXd inv_root = state.eigvals.cwiseSqrt().cwiseInverse();
  for (int i = 0; i < data.n_subjects; ++i) {
    Eigen::MatrixXd precision = state.eigvals.cwiseInverse().asDiagonal();
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(k);
    for (int p = 0; p < data.n_vars; ++p) {
      const auto [start, len] = post.subject_spans(p)[static_cast<size_t>(i)];
      if (len == 0) continue;
      const double inv_s2 = 1.0 / state.noise_var[p];
      for (int l = start; l < start + len; ++l) {
        const int m = data.time_idx[static_cast<size_t>(l)];
        const auto row = phis[static_cast<size_t>(p)].row(m);
        precision.noalias() += (row.transpose() * row) * inv_s2;
        rhs.noalias() +=
            row.transpose() * ((data.y[l] - mus[static_cast<size_t>(p)][m]) * inv_s2);
      }
    }
    const Eigen::VectorXd xi = mvn_sample_from_precision(precision, rhs, rng);
    state.scores.row(i) = xi.transpose();
    state.scores_raw.row(i) = xi.cwiseProduct(inv_root).transpose();
  }
}

// ---------------------------------------------------------------------------
// Targets

FpcConditionalTarget::FpcConditionalTarget(const Posterior& post,
                                           const ParameterState& state)
    : post_(post), state_(&state) {
  refresh_preconditioner();
}

void FpcConditionalTarget::set_state(const ParameterState& state) {
  state_ = &state;
  refresh_preconditioner();
}

void FpcConditionalTarget::refresh_preconditioner() {
  const int k = post_.config().n_components;
  const int q = post_.config().n_basis;
  const int p_count = post_.config().n_vars;
  const int n = std::max(1, state_->n_subjects());
  block_lower_.resize(static_cast<size_t>(k * p_count));
  for (int j = 0; j < k; ++j) {
    const double mean_sq = state_->scores.col(j).squaredNorm() / n;
    for (int p = 0; p < p_count; ++p) {
      Eigen::MatrixXd curvature = Eigen::MatrixXd::Identity(q, q) +
                                  state_->fpc_smooth(p, j) * post_.penalty() +
                                  (mean_sq / state_->noise_var[p]) * post_.block_btb(p);
      Eigen::LLT<Eigen::MatrixXd> llt(curvature);
      if (llt.info() != Eigen::Success) {
        throw NumericalError("FPC conditional curvature is not positive definite");
      }
      block_lower_[static_cast<size_t>(j * p_count + p)] = llt.matrixL();
    }
  }
}

int FpcConditionalTarget::dim() const {
  return post_.config().n_vars * post_.config().n_basis * post_.config().n_components;
}

Eigen::VectorXd FpcConditionalTarget::to_preconditioned(const Eigen::MatrixXd& latent) const {
  const int k = post_.config().n_components;
  const int q = post_.config().n_basis;
  const int p_count = post_.config().n_vars;
  Eigen::VectorXd u(dim());
  for (int j = 0; j < k; ++j) {
    for (int p = 0; p < p_count; ++p) {
      const Eigen::MatrixXd& lower = block_lower_[static_cast<size_t>(j * p_count + p)];
      u.segment((j * p_count + p) * q, q) =
          lower.transpose() * latent.col(j).segment(p * q, q);
    }
  }
  return u;
}

Eigen::MatrixXd FpcConditionalTarget::from_preconditioned(const Eigen::VectorXd& u) const {
  const int k = post_.config().n_components;
  const int q = post_.config().n_basis;
  const int p_count = post_.config().n_vars;
  Eigen::MatrixXd latent(p_count * q, k);
  for (int j = 0; j < k; ++j) {
    for (int p = 0; p < p_count; ++p) {
      const Eigen::MatrixXd& lower = block_lower_[static_cast<size_t>(j * p_count + p)];
      latent.col(j).segment(p * q, q) = lower.transpose().triangularView<Eigen::Upper>().solve(
          u.segment((j * p_count + p) * q, q));
    }
  }
  return latent;
}

double FpcConditionalTarget::value_and_gradient(const Eigen::VectorXd& u,
                                                Eigen::VectorXd& grad) const {
  ParameterState work = *state_;
  const int rows = post_.config().n_vars * post_.config().n_basis;
  const int k = post_.config().n_components;
  const int q = post_.config().n_basis;
  const int p_count = post_.config().n_vars;
  work.fpc_latent = from_preconditioned(u);
  Eigen::MatrixXd grad_latent;
  const double lp = post_.fpc_conditional(work, &grad_latent);
  if (!std::isfinite(lp)) {
    grad.setZero(rows * k);
    return kNegInf;
  }
  grad.resize(rows * k);
  for (int j = 0; j < k; ++j) {
    for (int p = 0; p < p_count; ++p) {
      const Eigen::MatrixXd& lower = block_lower_[static_cast<size_t>(j * p_count + p)];
      grad.segment((j * p_count + p) * q, q) =
          lower.triangularView<Eigen::Lower>().solve(grad_latent.col(j).segment(p * q, q));
    }
  }
  return lp;
}

void eigenvalue_interweaving_move(const Posterior& post, ParameterState& state,
                                  Rng& rng, double log_step) {
  const int k = post.config().n_components;
  const PriorConfig& pr = post.config().priors;
  for (int j = 0; j < k; ++j) {
    const double lam = state.eigvals[j];
    const double proposal = lam * std::exp(log_step * rng.normal());
    const bool ordered = (j == 0 || proposal >= state.eigvals[j - 1]) &&
                         (j == k - 1 || proposal <= state.eigvals[j + 1]);
    if (!ordered) continue;
    const double old_loglik = post.log_likelihood(state);
    ParameterState trial = state;
    trial.eigvals[j] = proposal;
    trial.scores.col(j) = trial.scores_raw.col(j) * std::sqrt(proposal);
    const double new_loglik = post.log_likelihood(trial);
    // Inverse-gamma prior kernel plus the log-scale proposal Jacobian; the
    // unit-scale score prior does not move.
    double delta = new_loglik - old_loglik;
    delta += -(pr.eigval_shape + 1.0) * (std::log(proposal) - std::log(lam)) -
             pr.eigval_scale * (1.0 / proposal - 1.0 / lam);
    delta += std::log(proposal) - std::log(lam);
    if (std::log(rng.uniform_open()) < delta) {
      state.eigvals[j] = proposal;
      state.scores.col(j) = trial.scores.col(j);
    }
  }
}

void rotation_move(const Posterior& post, ParameterState& state, Rng& rng,
                   double angle_sd) {
  const int k = post.config().n_components;
  if (k < 2) return;
  const int q = post.config().n_basis;
  const int p_count = post.config().n_vars;
  const Eigen::MatrixXd& penalty = post.penalty();

  for (int j = 0; j + 1 < k; ++j) {
    const double theta = angle_sd * rng.normal();
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    // Rotated pair of weight columns and score columns.
    const Eigen::VectorXd psi_a = c * state.fpc_coef.col(j) + s * state.fpc_coef.col(j + 1);
    const Eigen::VectorXd psi_b = -s * state.fpc_coef.col(j) + c * state.fpc_coef.col(j + 1);
    const Eigen::VectorXd xi_a = c * state.scores.col(j) + s * state.scores.col(j + 1);
    const Eigen::VectorXd xi_b = -s * state.scores.col(j) + c * state.scores.col(j + 1);

    double delta = 0.0;
    // Score prior N(0, lambda) per column.
    delta -= 0.5 * (xi_a.squaredNorm() - state.scores.col(j).squaredNorm()) / state.eigvals[j];
    delta -= 0.5 * (xi_b.squaredNorm() - state.scores.col(j + 1).squaredNorm()) /
             state.eigvals[j + 1];
    // Smoothing penalties of the two columns.
    for (int p = 0; p < p_count; ++p) {
      const auto seg_a = psi_a.segment(p * q, q);
      const auto seg_b = psi_b.segment(p * q, q);
      const auto old_a = state.fpc_coef.col(j).segment(p * q, q);
      const auto old_b = state.fpc_coef.col(j + 1).segment(p * q, q);
      delta -= 0.5 * state.fpc_smooth(p, j) *
               (seg_a.dot(penalty * seg_a) - old_a.dot(penalty * old_a));
      delta -= 0.5 * state.fpc_smooth(p, j + 1) *
               (seg_b.dot(penalty * seg_b) - old_b.dot(penalty * old_b));
    }
    // The pre-image prior and the likelihood are exactly invariant.
    if (std::log(rng.uniform_open()) < delta) {
      const Eigen::VectorXd x_a =
          c * state.fpc_latent.col(j) + s * state.fpc_latent.col(j + 1);
      const Eigen::VectorXd x_b =
          -s * state.fpc_latent.col(j) + c * state.fpc_latent.col(j + 1);
      state.fpc_latent.col(j) = x_a;
      state.fpc_latent.col(j + 1) = x_b;
      state.fpc_coef.col(j) = psi_a;
      state.fpc_coef.col(j + 1) = psi_b;
      state.scores.col(j) = xi_a;
      state.scores.col(j + 1) = xi_b;
      state.scores_raw.col(j) = xi_a / std::sqrt(state.eigvals[j]);
      state.scores_raw.col(j + 1) = xi_b / std::sqrt(state.eigvals[j + 1]);
    }
  }
}

void blocked_sweep(const Posterior& post, ParameterState& state,
                   FpcConditionalTarget& target, NutsKernel& kernel, Rng& rng,
                   DrawDiagnostics& info) {
  gibbs_noise_var(post, state, rng);
  gibbs_eigenvalues(post, state, rng);
  eigenvalue_interweaving_move(post, state, rng);
  gibbs_smoothing(post, state, rng);
  gibbs_mean_coef_collapsed(post, state, rng);
  gibbs_scores(post, state, rng);
  rotation_move(post, state, rng);
  target.set_state(state);
  Eigen::VectorXd u = target.to_preconditioned(state.fpc_latent);
  u = kernel.step(u, rng, info);
  DrawDiagnostics second;
  u = kernel.step(u, rng, second);
  info.accept_stat = 0.5 * (info.accept_stat + second.accept_stat);
  info.n_leapfrog += second.n_leapfrog;
  info.treedepth = std::max(info.treedepth, second.treedepth);
  info.divergent = info.divergent || second.divergent;
  state.fpc_latent = target.from_preconditioned(u);
  state.refresh_derived();
}

Eigen::VectorXd random_init(const Posterior& post, Rng& rng) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    Eigen::VectorXd v(post.dim());
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = 4.0 * rng.uniform() - 2.0;
    if (std::isfinite(post.log_density(v))) return v;
  }
  throw NumericalError("failed to find a finite starting point in 100 attempts");
}

ParameterState data_driven_init(const Posterior& post, Rng& rng, double jitter) {
  const auto& data = post.data();
  const ModelConfig& cfg = post.config();
  const int q = cfg.n_basis;
  const int k = cfg.n_components;
  const int p_count = cfg.n_vars;
  const int pq = p_count * q;
  const int n = data.n_subjects;
  const Eigen::MatrixXd& basis_eval = post.basis_at_times();

  ParameterState s = post.blank_state();
  if (data.n_obs() == 0 || n == 0) {
    // Prior-only problems keep the diffuse random start.
    return post.from_unconstrained(random_init(post, rng));
  }

  // Ridge mean fit per variable.
  for (int p = 0; p < p_count; ++p) {
    const int offset = post.block_offset(p);
    const int count = data.var_card[static_cast<size_t>(p)];
    Eigen::VectorXd bty = Eigen::VectorXd::Zero(q);
    for (int l = 0; l < count; ++l) {
      bty += basis_eval.row(data.time_idx[static_cast<size_t>(offset + l)]).transpose() *
             data.y[offset + l];
    }
    const Eigen::MatrixXd a = post.block_btb(p) + Eigen::MatrixXd::Identity(q, q);
    s.mean_coef.segment(p * q, q) = a.ldlt().solve(bty);
  }

  // Per-subject ridge projection of the residuals, then its covariance.
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(n, pq);
  Eigen::VectorXd resid_var = Eigen::VectorXd::Zero(p_count);
  for (int p = 0; p < p_count; ++p) {
    const int count = data.var_card[static_cast<size_t>(p)];
    double ss = 0.0;
    for (int i = 0; i < n; ++i) {
      const auto [start, len] = post.subject_spans(p)[static_cast<size_t>(i)];
      if (len == 0) continue;
      Eigen::MatrixXd rows(len, q);
      Eigen::VectorXd r(len);
      for (int l = 0; l < len; ++l) {
        const int m = data.time_idx[static_cast<size_t>(start + l)];
        rows.row(l) = basis_eval.row(m);
        r[l] = data.y[start + l] -
               basis_eval.row(m).dot(s.mean_coef.segment(p * q, q));
        ss += r[l] * r[l];
      }
      const Eigen::MatrixXd a =
          rows.transpose() * rows + Eigen::MatrixXd::Identity(q, q);
      z.block(i, p * q, 1, q) = a.ldlt().solve(rows.transpose() * r).transpose();
    }
    resid_var[p] = count > 0 ? ss / count : 1.0;
  }
  Eigen::MatrixXd cov = z.transpose() * z / static_cast<double>(n);
  cov += 1e-8 * Eigen::MatrixXd::Identity(pq, pq);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);

  // Top-K directions, stored in ascending eigenvalue order.
  Eigen::MatrixXd directions(pq, k);
  Eigen::VectorXd values(k);
  for (int j = 0; j < k; ++j) {
    directions.col(j) = es.eigenvectors().col(pq - k + j);
    values[j] = std::max(es.eigenvalues()[pq - k + j], 1e-3);
  }
  for (int j = 1; j < k; ++j) {
    if (values[j] <= values[j - 1]) values[j] = values[j - 1] * 1.05;
  }

  s.noise_var = resid_var.cwiseMax(1e-3) * 0.5;
  s.eigvals = values;
  s.fpc_latent =
      directions + (jitter / std::sqrt(static_cast<double>(pq))) * rng.normal_matrix(pq, k);
  s.refresh_derived();
  const Eigen::MatrixXd scores = z * s.fpc_coef;  // projections onto the directions
  s.scores_raw =
      (scores * s.eigvals.cwiseSqrt().cwiseInverse().asDiagonal()) +
      jitter * rng.normal_matrix(n, k);
  // Chain-specific jitter on the positive blocks.
  for (int p = 0; p < p_count; ++p) {
    s.noise_var[p] *= std::exp(jitter * rng.normal());
    s.mean_smooth[p] = std::exp(jitter * rng.normal());
    for (int j = 0; j < k; ++j) s.fpc_smooth(p, j) = std::exp(jitter * rng.normal());
  }
  Eigen::VectorXd lam = s.eigvals;
  for (int j = 0; j < k; ++j) lam[j] *= std::exp(jitter * rng.normal());
  std::sort(lam.data(), lam.data() + k);
  for (int j = 1; j < k; ++j) {
    if (lam[j] <= lam[j - 1]) lam[j] = lam[j - 1] * 1.01;
  }
  s.eigvals = lam;
  s.refresh_derived();
  return s;
}

// ---------------------------------------------------------------------------
// Chain drivers

namespace {

struct ChainResult {
  std::vector<ParameterState> draws;
  std::vector<DrawDiagnostics> diagnostics;
  ChainStats stats;
};

// Warmup: the first three quarters adapt both the step size and the diagonal
// metric over expanding windows; the final quarter refines the step size
// against the frozen metric.
class WarmupDriver {
 public:
  WarmupDriver(NutsKernel& kernel, double target_accept, int n_warmup, int dim,
               bool adapt_metric = true)
      : kernel_(kernel),
        da_(target_accept, kernel.step_size()),
        warmup_(n_warmup),
        phase1_((3 * n_warmup) / 4),
        adapt_metric_(adapt_metric),
        acc_(dim) {
    init_buffer_ = std::max(10, phase1_ / 10);
    window_len_ = std::max(15, phase1_ / 15);
    window_end_ = std::min(init_buffer_ + window_len_, phase1_);
  }

  void observe(int iter, const Eigen::VectorXd& v, double accept_stat, Rng& rng) {
    kernel_.set_step_size(da_.update(accept_stat));
    if (!adapt_metric_) {
      // No metric windows; re-anchor the step-size average once the chain
      // has reached its typical set so early transients stop dominating.
      if (iter + 1 == phase1_) {
        kernel_.init_step_size(v, rng);
        da_.restart(kernel_.step_size());
      }
      return;
    }
    if (iter + 1 > init_buffer_ && iter + 1 <= phase1_) acc_.add(v);
    if (iter + 1 == window_end_ && window_end_ <= phase1_) {
      if (acc_.count() >= 10) {
        kernel_.set_inv_metric(acc_.regularized_variance());
        kernel_.init_step_size(v, rng);
        da_.restart(kernel_.step_size());
      }
      acc_ = RunningVariance(static_cast<int>(v.size()));
      window_len_ *= 2;
      window_end_ = window_end_ + window_len_;
      if (window_end_ + 2 * window_len_ > phase1_) window_end_ = phase1_;
    }
  }

  void finish() {
    if (warmup_ > 0) kernel_.set_step_size(da_.adapted());
  }

 private:
  NutsKernel& kernel_;
  DualAveraging da_;
  int warmup_;
  int phase1_;
  bool adapt_metric_;
  int init_buffer_;
  int window_len_;
  int window_end_;
  RunningVariance acc_;
};

void finalize_stats(ChainResult& chain, int n_samples) {
  double accept = 0.0;
  for (const auto& d : chain.diagnostics) {
    accept += d.accept_stat;
    if (d.divergent) ++chain.stats.divergences;
  }
  chain.stats.mean_accept = chain.diagnostics.empty()
                                ? 0.0
                                : accept / static_cast<double>(chain.diagnostics.size());
  (void)n_samples;
}

ChainResult run_chain_hmc(const Posterior& post, const SamplerConfig& config,
                          int chain_index) {
  Rng rng = Rng::substream(config.seed, static_cast<std::uint64_t>(chain_index));
  Eigen::VectorXd v = post.to_unconstrained(data_driven_init(post, rng));

  PosteriorTarget target(post);
  NutsKernel kernel(target, config.max_treedepth);
  kernel.init_step_size(v, rng);
  WarmupDriver warmup(kernel, config.target_accept, config.n_warmup, post.dim());

  DrawDiagnostics info;
  for (int m = 0; m < config.n_warmup; ++m) {
    v = kernel.step(v, rng, info);
    warmup.observe(m, v, info.accept_stat, rng);
  }
  warmup.finish();

  ChainResult out;
  out.draws.reserve(static_cast<size_t>(config.n_samples));
  out.diagnostics.reserve(static_cast<size_t>(config.n_samples));
  for (int m = 0; m < config.n_samples; ++m) {
    v = kernel.step(v, rng, info);
    if (info.treedepth >= config.max_treedepth) ++out.stats.max_treedepth_hits;
    out.draws.push_back(post.from_unconstrained(v).reported());
    out.diagnostics.push_back(info);
  }
  out.stats.step_size = kernel.step_size();
  finalize_stats(out, config.n_samples);
  return out;
}

ChainResult run_chain_gibbs(const Posterior& post, const SamplerConfig& config,
                            int chain_index) {
  Rng rng = Rng::substream(config.seed, static_cast<std::uint64_t>(chain_index));
  ParameterState state = data_driven_init(post, rng);

  FpcConditionalTarget target(post, state);
  NutsKernel kernel(target, config.max_treedepth);
  const int x_dim = target.dim();
  Eigen::VectorXd x = target.to_preconditioned(state.fpc_latent);
  kernel.init_step_size(x, rng);
  // The analytic preconditioner owns the geometry; warmup tunes the step only.
  WarmupDriver warmup(kernel, config.target_accept, config.n_warmup, x_dim,
                      /*adapt_metric=*/false);

  ChainResult out;
  out.draws.reserve(static_cast<size_t>(config.n_samples));
  DrawDiagnostics info;
  const int total = config.n_warmup + config.n_samples;
  for (int m = 0; m < total; ++m) {
    blocked_sweep(post, state, target, kernel, rng, info);
    const bool in_warmup = m < config.n_warmup;
    if (in_warmup) {
      x = target.to_preconditioned(state.fpc_latent);
      warmup.observe(m, x, info.accept_stat, rng);
      if (m + 1 == config.n_warmup) warmup.finish();
    } else {
      if (info.treedepth >= config.max_treedepth) ++out.stats.max_treedepth_hits;
      info.log_density = post.log_posterior(state);
      out.draws.push_back(state.reported());
      out.diagnostics.push_back(info);
    }
  }
  out.stats.step_size = kernel.step_size();
  finalize_stats(out, config.n_samples);
  return out;
}

}  // namespace

PosteriorDraws run_sampler(const SamplerConfig& config,
                           const SparseFunctionalDataset& data,
                           const OrthoBasis& basis, const ModelConfig& model_config,
                           int likelihood_threads) {
  config.validate();
  const Posterior post(data, basis, model_config, likelihood_threads);

  PosteriorDraws out;
  out.model_config = model_config;
  out.sampler_config = config;
  out.basis_degree = basis.degree();
  out.basis_quad_points = basis.quad_points_per_span();
  out.scaling = unit_scaling(data.variable_names);
  out.times = data.times;
  out.subject_names = data.subject_names;
  out.variable_names = data.variable_names;

  std::vector<ChainResult> results(static_cast<size_t>(config.n_chains));
  auto run_one = [&](int c) {
    return config.mode == SamplerMode::kFullHmc ? run_chain_hmc(post, config, c)
                                                : run_chain_gibbs(post, config, c);
  };
  if (config.n_threads > 1 && config.n_chains > 1) {
    std::vector<std::future<ChainResult>> futures;
    futures.reserve(static_cast<size_t>(config.n_chains));
    for (int c = 0; c < config.n_chains; ++c) {
      futures.push_back(std::async(std::launch::async, run_one, c));
    }
    for (int c = 0; c < config.n_chains; ++c) {
      results[static_cast<size_t>(c)] = futures[static_cast<size_t>(c)].get();
    }
  } else {
    for (int c = 0; c < config.n_chains; ++c) results[static_cast<size_t>(c)] = run_one(c);
  }

  for (auto& r : results) {
    if (r.stats.divergences > 0.1 * config.n_samples) out.divergence_flag = true;
    out.chains.push_back(std::move(r.draws));
    out.diagnostics.push_back(std::move(r.diagnostics));
    out.chain_stats.push_back(r.stats);
  }
  return out;
}

}  // namespace msfpca

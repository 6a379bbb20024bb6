#include "msfpca/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "msfpca/errors.hpp"

namespace msfpca {

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

Rng::Rng(std::uint64_t seed) {
  std::uint64_t s = seed;
  engine_.seed(splitmix64(s));
}

Rng Rng::substream(std::uint64_t seed, std::uint64_t id) {
  std::uint64_t s = seed;
  std::uint64_t a = splitmix64(s);
  s = a ^ (id * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL);
  return Rng(splitmix64(s));
}

Rng Rng::substream(std::uint64_t seed, std::uint64_t id1, std::uint64_t id2) {
  std::uint64_t s = seed;
  std::uint64_t a = splitmix64(s);
  s = a ^ (id1 * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL);
  std::uint64_t b = splitmix64(s);
  s = b ^ (id2 * 0xd1342543de82ef95ULL + 0x6a09e667f3bcc909ULL);
  return Rng(splitmix64(s));
}

std::uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform_open() {
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  // Rejection to remove modulo bias.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  if (have_cached_normal_) {
    have_cached_normal_ = false;
    return cached_normal_;
  }
  const double u1 = uniform_open();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  cached_normal_ = r * std::sin(theta);
  have_cached_normal_ = true;
  return r * std::cos(theta);
}

double Rng::gamma(double shape, double rate) {
  if (!(shape > 0.0) || !(rate > 0.0)) {
    throw NumericalError("gamma draw requires positive shape and rate");
  }
  if (shape < 1.0) {
    // Boost: G(a) = G(a+1) * U^{1/a}.
    const double g = gamma(shape + 1.0, 1.0);
    const double u = uniform_open();
    return g * std::pow(u, 1.0 / shape) / rate;
  }
  // Marsaglia-Tsang squeeze.
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x;
    double v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform_open();
    const double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2) return d * v / rate;
    if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v / rate;
  }
}

double Rng::log_gamma_draw(double shape) {
  if (shape >= 1.0) {
    return std::log(gamma(shape, 1.0));
  }
  const double g = gamma(shape + 1.0, 1.0);
  const double u = uniform_open();
  return std::log(g) + std::log(u) / shape;
}

double Rng::inv_gamma(double shape, double scale) {
  if (!(scale > 0.0)) {
    throw NumericalError("inverse gamma draw requires positive scale");
  }
  // b / Gamma(a, 1), computed in log space so tiny-shape draws stay finite
  // as long as the result itself is representable.
  return std::exp(std::log(scale) - log_gamma_draw(shape));
}

Eigen::VectorXd Rng::normal_vector(Eigen::Index n) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
  return v;
}

Eigen::MatrixXd Rng::normal_matrix(Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal();
  return m;
}

std::vector<int> Rng::sample_without_replacement(int n, int k) {
  std::vector<int> pool(n);
  for (int i = 0; i < n; ++i) pool[i] = i;
  for (int i = 0; i < k; ++i) {
    const int j = i + static_cast<int>(uniform_int(static_cast<std::uint64_t>(n - i)));
    std::swap(pool[i], pool[j]);
  }
  std::vector<int> out(pool.begin(), pool.begin() + k);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace msfpca

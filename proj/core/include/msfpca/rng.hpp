#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Core>

namespace msfpca {

// Deterministic RNG with self-contained distribution transforms.
// All transforms (uniform -> normal/gamma) are implemented here so that a
// given seed yields the same draw sequence regardless of the standard
// library in use. Substreams are derived from a master seed with SplitMix64,
// giving independent, reproducible streams per chain / replicate / subject.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  // Independent substream identified by a small integer path, e.g.
  // (seed, chain) or (seed, replicate, stage).
  static Rng substream(std::uint64_t seed, std::uint64_t id);
  static Rng substream(std::uint64_t seed, std::uint64_t id1, std::uint64_t id2);

  // Uniform on [0, 1).
  double uniform();
  // Uniform on (0, 1); never returns 0.
  double uniform_open();
  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n);

  // Standard normal (Box-Muller with one cached variate).
  double normal();

  // Gamma(shape, rate); Marsaglia-Tsang, boosted below shape 1.
  double gamma(double shape, double rate);
  // log of a Gamma(shape, 1) draw; stable for tiny shapes where the draw
  // itself would underflow.
  double log_gamma_draw(double shape);
  // Inverse gamma with density proportional to x^{-shape-1} exp(-scale/x).
  double inv_gamma(double shape, double scale);

  // Vector/matrix of iid standard normals.
  Eigen::VectorXd normal_vector(Eigen::Index n);
  Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols);

  // Sample k distinct indices from {0, ..., n-1}, ascending (partial Fisher-Yates).
  std::vector<int> sample_without_replacement(int n, int k);

 private:
  std::uint64_t next_u64();

  std::mt19937_64 engine_;
  bool have_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

}  // namespace msfpca

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>

namespace salgpode {

/// Mixes a parent seed with a stream key (SplitMix64 finalizer).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t key);

/// Seeded random stream. Child streams obtained with split() depend only on
/// the seed this stream was constructed with and the key, never on how many
/// numbers have been consumed, so parallel workers can each own a stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }
  Rng split(std::uint64_t key) const { return Rng(derive_seed(seed_, key)); }

  double uniform();
  double uniform(double lo, double hi);
  double normal();
  Eigen::VectorXd normal_vector(Eigen::Index n);
  Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace salgpode

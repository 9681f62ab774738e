#include "salgpode/rng.hpp"

namespace salgpode {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t key) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (key + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(derive_seed(seed, 0x5A17)) {}

double Rng::uniform() { return uniform_(engine_); }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform_(engine_); }

double Rng::normal() { return normal_(engine_); }

Eigen::VectorXd Rng::normal_vector(Eigen::Index n) {
  Eigen::VectorXd out(n);
  for (Eigen::Index i = 0; i < n; ++i) out[i] = normal_(engine_);
  return out;
}

Eigen::MatrixXd Rng::normal_matrix(Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd out(rows, cols);
  // Row-major fill order so the draw sequence does not depend on storage order.
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = normal_(engine_);
  return out;
}

}  // namespace salgpode

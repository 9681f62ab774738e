#include "vector_math.hpp"

#include <cmath>

namespace salgpode::detail {

void cos_inplace(double* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) data[i] = std::cos(data[i]);
}

void sin_inplace(double* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) data[i] = std::sin(data[i]);
}

}  // namespace salgpode::detail

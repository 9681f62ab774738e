#pragma once

#include <cstddef>

namespace salgpode::detail {

// In-place cosine over a contiguous buffer; built with glibc's vector math
// routines (compiled in its own translation unit with fast-math enabled).
void cos_inplace(double* data, std::size_t n);
void sin_inplace(double* data, std::size_t n);

}  // namespace salgpode::detail

#pragma once

#include <string>

#include "sparseloc/tensor.hpp"

namespace sparseloc {

// Tensor file format, bit-exact:
//   magic "STEN", u32 little-endian rank, rank x u32 little-endian extents,
//   then product(extents) x f64 little-endian row-major payload.
// Files are written atomically (temp + rename).
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path, bool requires_grad = false);

}  // namespace sparseloc

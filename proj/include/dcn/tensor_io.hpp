#pragma once

// Binary tensor file: magic "DCT1", u32 rank, rank x u32 extents
// (little-endian), then row-major 32-bit IEEE-754 values. Used for
// checkpoints, masks and synthetic data caches.

#include <iosfwd>
#include <string>

#include "dcn/tensor.hpp"

namespace dcn {

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is, const std::string& context);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

} // namespace dcn

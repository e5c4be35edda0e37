#pragma once

#include <string>

#include "moelab/model.hpp"

namespace moelab {

// Binary format: magic "MOELABCK", u32 version, config block, then named
// tensors as (u32 name length, name bytes, u32 rank, u32 dims...,
// row-major little-endian f32 data). Self-describing and byte-stable:
// saving the same params twice yields identical files.
void save_checkpoint(const Params& params, const std::string& path);
Params load_checkpoint(const std::string& path);

}  // namespace moelab

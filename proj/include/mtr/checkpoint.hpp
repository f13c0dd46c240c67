#pragma once

#include <cstdint>
#include <string>

#include "mtr/tensor.hpp"

namespace mtr {

// Self-describing container of named arrays. Layout (all little-endian):
//   magic "MTRCKPT0" | u32 version | u64 fingerprint | u64 array count
//   per array: u32 name length | name bytes | u32 rank | u64 dims[rank]
//              | f64 data[numel]
// Round-trips are bit-exact. Writes go to a temp file first and are renamed
// into place so an interrupted run never leaves a partial checkpoint.
void save_checkpoint(const ParamStore& params, const std::string& path,
                     std::uint64_t fingerprint);

struct Checkpoint {
  ParamStore params;
  std::uint64_t fingerprint = 0;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace mtr

#pragma once

#include <stdexcept>
#include <string>

#include "mimo/model.hpp"

namespace mimo {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary layout, all integers and doubles little-endian:
///
///   magic        8 bytes  "MIMOCKPT"
///   version      u32      1
///   config_len   u64      followed by config_len bytes of `key = value` text
///   tensor_count u32
///   per tensor:  u32 name_len, name bytes, u64 rows, u64 cols, rows*cols f64
///   checksum     u64      FNV-1a over every byte after the magic
void save_checkpoint(const std::string& path, const HybridModel& model);
HybridModel load_checkpoint(const std::string& path);

// FNV-1a over the raw parameter bytes; a cheap fingerprint for `load`.
std::uint64_t parameter_fingerprint(const HybridModel& model);

}  // namespace mimo

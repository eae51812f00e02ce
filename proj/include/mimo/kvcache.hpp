#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mimo/config.hpp"
#include "mimo/tensor.hpp"

namespace mimo {

/// Keys and values for a contiguous run of positions, ascending.
struct KvEntries {
  std::vector<std::int64_t> positions;
  Matrix keys;
  Matrix values;
};

/// Fixed-capacity ring buffer holding the newest `capacity` positions.
class WindowKvCache {
 public:
  WindowKvCache(std::size_t capacity, std::size_t key_width, std::size_t value_width);

  // position must be newest + 1 (or 0 when empty); evicts the oldest entry when full.
  void append(std::int64_t position, std::span<const double> key, std::span<const double> value);

  // Entries inside swa_window(query_position, capacity), ascending.
  KvEntries gather(std::int64_t query_position) const;

  std::size_t size() const { return count_; }
  std::size_t capacity() const { return capacity_; }
  std::optional<std::int64_t> newest() const;
  std::vector<std::int64_t> positions() const;

 private:
  std::size_t slot(std::size_t logical) const;  // logical 0 = oldest

  std::size_t capacity_;
  std::size_t key_width_;
  std::size_t value_width_;
  Matrix keys_;
  Matrix values_;
  std::vector<std::int64_t> positions_;
  std::size_t next_write_ = 0;
  std::size_t count_ = 0;
};

/// Append-only cache holding every position since 0.
class GlobalKvCache {
 public:
  GlobalKvCache(std::size_t key_width, std::size_t value_width);

  void append(std::int64_t position, std::span<const double> key, std::span<const double> value);
  KvEntries gather(std::int64_t query_position) const;

  std::size_t size() const { return positions_.size(); }
  std::optional<std::int64_t> newest() const;
  std::vector<std::int64_t> positions() const { return positions_; }

 private:
  std::size_t key_width_;
  std::size_t value_width_;
  std::vector<double> keys_;
  std::vector<double> values_;
  std::vector<std::int64_t> positions_;
};

struct CacheReport {
  std::int64_t seq_len = 0;
  int bytes_per_scalar = 2;
  int swa_layers = 0;
  int ga_layers = 0;
  std::int64_t swa_entries_per_layer = 0;  // min(L, W)
  std::int64_t ga_entries_per_layer = 0;   // L
  std::int64_t swa_bytes_per_entry = 0;    // kv_heads * (dqk + dv) * bytes
  std::int64_t ga_bytes_per_entry = 0;
  std::int64_t swa_bytes = 0;  // over all SWA layers
  std::int64_t ga_bytes = 0;   // over all GA layers
  std::int64_t hybrid_bytes = 0;
  std::int64_t baseline_bytes = 0;  // every layer caches L entries at its own width
  std::int64_t hybrid_entries = 0;  // layer-normalized (equal width per layer)
  std::int64_t baseline_entries = 0;
  double ratio_layer_normalized = 1.0;
  double ratio_byte_exact = 1.0;
  double limit_layer_normalized = 1.0;  // L -> infinity
  double limit_byte_exact = 1.0;
};

/// KV-cache footprint of the hybrid layout against an all-global baseline.
/// Two baselines are reported: layer-normalized (every layer counted with the
/// same width, the "layers that cache everything" view) and byte-exact (each
/// layer's own kv-head count and head dims).
CacheReport memory_report(const ModelConfig& config, std::int64_t seq_len, int bytes_per_scalar = 2);

std::string format_report(const CacheReport& report);

}  // namespace mimo

#include "mimo/kvcache.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "mimo/attention.hpp"

namespace mimo {
namespace {

void check_next(std::optional<std::int64_t> newest, std::int64_t position) {
  const std::int64_t expected = newest ? *newest + 1 : 0;
  if (position != expected) {
    throw std::invalid_argument("kv cache: non-contiguous position " + std::to_string(position) + " (expected " +
                                std::to_string(expected) + ")");
  }
}

void check_widths(std::span<const double> key, std::span<const double> value, std::size_t kw, std::size_t vw) {
  if (key.size() != kw || value.size() != vw) throw std::invalid_argument("kv cache: entry width mismatch");
}

void check_query(std::optional<std::int64_t> newest, std::int64_t query) {
  if (newest && query < *newest) throw std::invalid_argument("kv cache: query position precedes newest stored position");
}

}  // namespace

WindowKvCache::WindowKvCache(std::size_t capacity, std::size_t key_width, std::size_t value_width)
    : capacity_(capacity),
      key_width_(key_width),
      value_width_(value_width),
      keys_(capacity, key_width),
      values_(capacity, value_width),
      positions_(capacity, -1) {
  if (capacity == 0) throw std::invalid_argument("window cache: capacity must be >= 1");
}

std::size_t WindowKvCache::slot(std::size_t logical) const {
  const std::size_t oldest = count_ < capacity_ ? 0 : next_write_;
  return (oldest + logical) % capacity_;
}

std::optional<std::int64_t> WindowKvCache::newest() const {
  if (count_ == 0) return std::nullopt;
  return positions_[(next_write_ + capacity_ - 1) % capacity_];
}

void WindowKvCache::append(std::int64_t position, std::span<const double> key, std::span<const double> value) {
  check_next(newest(), position);
  check_widths(key, value, key_width_, value_width_);
  std::copy(key.begin(), key.end(), keys_.row(next_write_).begin());
  std::copy(value.begin(), value.end(), values_.row(next_write_).begin());
  positions_[next_write_] = position;
  next_write_ = (next_write_ + 1) % capacity_;
  count_ = std::min(count_ + 1, capacity_);
}

std::vector<std::int64_t> WindowKvCache::positions() const {
  std::vector<std::int64_t> out(count_);
  for (std::size_t l = 0; l < count_; ++l) out[l] = positions_[slot(l)];
  return out;
}

KvEntries WindowKvCache::gather(std::int64_t query_position) const {
  check_query(newest(), query_position);
  const KeyRange range = swa_window(query_position, static_cast<std::int64_t>(capacity_));
  std::vector<std::size_t> picked;
  for (std::size_t l = 0; l < count_; ++l)
    if (range.contains(positions_[slot(l)])) picked.push_back(slot(l));
  KvEntries out{{}, Matrix(picked.size(), key_width_), Matrix(picked.size(), value_width_)};
  for (std::size_t r = 0; r < picked.size(); ++r) {
    out.positions.push_back(positions_[picked[r]]);
    std::ranges::copy(keys_.row(picked[r]), out.keys.row(r).begin());
    std::ranges::copy(values_.row(picked[r]), out.values.row(r).begin());
  }
  return out;
}

GlobalKvCache::GlobalKvCache(std::size_t key_width, std::size_t value_width)
    : key_width_(key_width), value_width_(value_width) {}

std::optional<std::int64_t> GlobalKvCache::newest() const {
  if (positions_.empty()) return std::nullopt;
  return positions_.back();
}

void GlobalKvCache::append(std::int64_t position, std::span<const double> key, std::span<const double> value) {
  check_next(newest(), position);
  check_widths(key, value, key_width_, value_width_);
  keys_.insert(keys_.end(), key.begin(), key.end());
  values_.insert(values_.end(), value.begin(), value.end());
  positions_.push_back(position);
}

KvEntries GlobalKvCache::gather(std::int64_t query_position) const {
  check_query(newest(), query_position);
  KvEntries out;
  out.positions = positions_;
  out.keys.rows = out.values.rows = positions_.size();
  out.keys.cols = key_width_;
  out.values.cols = value_width_;
  out.keys.data = keys_;
  out.values.data = values_;
  return out;
}

CacheReport memory_report(const ModelConfig& config, std::int64_t seq_len, int bytes_per_scalar) {
  if (seq_len < 1) throw std::invalid_argument("memory_report: seq_len must be >= 1");
  if (bytes_per_scalar < 1) throw std::invalid_argument("memory_report: bytes_per_scalar must be >= 1");
  const auto counts = count_layout(build_layout(config));
  CacheReport r;
  r.seq_len = seq_len;
  r.bytes_per_scalar = bytes_per_scalar;
  r.swa_layers = counts.swa();
  r.ga_layers = counts.ga();
  r.swa_entries_per_layer = std::min<std::int64_t>(seq_len, config.window);
  r.ga_entries_per_layer = seq_len;
  const std::int64_t entry_dims = config.head_dim_qk + config.head_dim_v;
  r.swa_bytes_per_entry = std::int64_t{config.swa_kv_heads} * entry_dims * bytes_per_scalar;
  r.ga_bytes_per_entry = std::int64_t{config.ga_kv_heads} * entry_dims * bytes_per_scalar;
  r.swa_bytes = r.swa_layers * r.swa_entries_per_layer * r.swa_bytes_per_entry;
  r.ga_bytes = r.ga_layers * r.ga_entries_per_layer * r.ga_bytes_per_entry;
  r.hybrid_bytes = r.swa_bytes + r.ga_bytes;
  r.baseline_bytes = seq_len * (r.swa_layers * r.swa_bytes_per_entry + r.ga_layers * r.ga_bytes_per_entry);
  r.hybrid_entries = r.ga_layers * seq_len + r.swa_layers * r.swa_entries_per_layer;
  r.baseline_entries = std::int64_t{config.num_layers} * seq_len;
  r.ratio_layer_normalized = static_cast<double>(r.baseline_entries) / static_cast<double>(r.hybrid_entries);
  r.ratio_byte_exact = static_cast<double>(r.baseline_bytes) / static_cast<double>(r.hybrid_bytes);
  r.limit_layer_normalized = static_cast<double>(config.num_layers) / r.ga_layers;
  r.limit_byte_exact = static_cast<double>(r.swa_layers * r.swa_bytes_per_entry + r.ga_layers * r.ga_bytes_per_entry) /
                       static_cast<double>(r.ga_layers * r.ga_bytes_per_entry);
  return r;
}

std::string format_report(const CacheReport& r) {
  std::ostringstream os;
  auto line = [&](const char* key, const std::string& value) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-24s = %s\n", key, value.c_str());
    os << buf;
  };
  auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  line("seq_len", std::to_string(r.seq_len));
  line("bytes_per_scalar", std::to_string(r.bytes_per_scalar));
  line("swa_layers", std::to_string(r.swa_layers));
  line("ga_layers", std::to_string(r.ga_layers));
  line("swa_entries_per_layer", std::to_string(r.swa_entries_per_layer));
  line("ga_entries_per_layer", std::to_string(r.ga_entries_per_layer));
  line("swa_bytes_per_entry", std::to_string(r.swa_bytes_per_entry));
  line("ga_bytes_per_entry", std::to_string(r.ga_bytes_per_entry));
  line("swa_bytes", std::to_string(r.swa_bytes));
  line("ga_bytes", std::to_string(r.ga_bytes));
  line("hybrid_bytes", std::to_string(r.hybrid_bytes));
  line("baseline_bytes", std::to_string(r.baseline_bytes));
  line("ratio_layer_normalized", num(r.ratio_layer_normalized));
  line("ratio_byte_exact", num(r.ratio_byte_exact));
  line("limit_layer_normalized", num(r.limit_layer_normalized));
  line("limit_byte_exact", num(r.limit_byte_exact));
  return os.str();
}

}  // namespace mimo

#include "mimo/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

namespace mimo {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'M', 'I', 'M', 'O', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

struct Fnv {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  void feed(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  }
};

class Writer {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const char*>(p);
    buf_.insert(buf_.end(), b, b + n);
    fnv_.feed(p, n);
  }
  template <typename T>
  void pod(T v) { raw(&v, sizeof v); }
  std::vector<char>& buffer() { return buf_; }
  std::uint64_t checksum() const { return fnv_.h; }

 private:
  std::vector<char> buf_;
  Fnv fnv_;
};

class Reader {
 public:
  Reader(const std::vector<char>& buf, std::size_t pos) : buf_(buf), pos_(pos) {}
  void raw(void* p, std::size_t n) {
    if (pos_ + n > buf_.size()) throw CheckpointError("checkpoint truncated");
    std::memcpy(p, buf_.data() + pos_, n);
    fnv_.feed(buf_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T pod() {
    T v{};
    raw(&v, sizeof v);
    return v;
  }
  std::uint64_t checksum() const { return fnv_.h; }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  const std::vector<char>& buf_;
  std::size_t pos_;
  Fnv fnv_;
};

}  // namespace

void save_checkpoint(const std::string& path, const HybridModel& model) {
  Writer w;
  w.buffer().insert(w.buffer().end(), std::begin(kMagic), std::end(kMagic));
  w.pod(kVersion);
  const std::string cfg = serialize_config(model.config);
  w.pod<std::uint64_t>(cfg.size());
  w.raw(cfg.data(), cfg.size());

  std::uint32_t count = 0;
  for_each_parameter(model, [&](const std::string&, std::span<const double>, std::size_t, std::size_t) { ++count; });
  w.pod(count);
  for_each_parameter(model, [&](const std::string& name, std::span<const double> data, std::size_t rows,
                                        std::size_t cols) {
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.raw(name.data(), name.size());
    w.pod<std::uint64_t>(rows);
    w.pod<std::uint64_t>(cols);
    w.raw(data.data(), data.size_bytes());
  });
  const std::uint64_t sum = w.checksum();
  w.buffer().insert(w.buffer().end(), reinterpret_cast<const char*>(&sum), reinterpret_cast<const char*>(&sum) + 8);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open '" + path + "' for writing");
  out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
  if (!out) throw CheckpointError("write failed for '" + path + "'");
}

HybridModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  const std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof kMagic + 4 || std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0)
    throw CheckpointError("checkpoint header mismatch");
  Reader r(buf, sizeof kMagic);
  if (r.pod<std::uint32_t>() != kVersion) throw CheckpointError("checkpoint header mismatch");

  const auto cfg_len = r.pod<std::uint64_t>();
  if (cfg_len > r.remaining()) throw CheckpointError("checkpoint truncated");
  std::string cfg(cfg_len, '\0');
  r.raw(cfg.data(), cfg.size());
  ModelConfig config;
  try {
    config = parse_config(cfg);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
  }

  HybridModel model = init_model(config, 0);
  const auto count = r.pod<std::uint32_t>();
  std::uint32_t seen = 0;
  for_each_parameter(model, [&](const std::string& name, std::span<double> data, std::size_t rows, std::size_t cols) {
    ++seen;
    if (seen > count) throw CheckpointError("checkpoint tensor count mismatch");
    const auto len = r.pod<std::uint32_t>();
    if (len > r.remaining()) throw CheckpointError("checkpoint truncated");
    std::string stored(len, '\0');
    r.raw(stored.data(), len);
    const auto srows = r.pod<std::uint64_t>();
    const auto scols = r.pod<std::uint64_t>();
    if (stored != name || srows != rows || scols != cols)
      throw CheckpointError("checkpoint tensor mismatch at '" + name + "'");
    r.raw(data.data(), data.size_bytes());
  });
  if (seen != count) throw CheckpointError("checkpoint tensor count mismatch");
  const std::uint64_t expected = r.checksum();
  if (r.pod<std::uint64_t>() != expected) throw CheckpointError("checkpoint checksum mismatch");
  if (r.remaining() != 0) throw CheckpointError("checkpoint has trailing bytes");
  return model;
}

std::uint64_t parameter_fingerprint(const HybridModel& model) {
  Fnv f;
  for_each_parameter(model, [&](const std::string&, std::span<const double> data, std::size_t, std::size_t) {
    f.feed(data.data(), data.size_bytes());
  });
  return f.h;
}

}  // namespace mimo

#pragma once

#include <cstring>
#include <fstream>

#include "config.hpp"
#include "model.hpp"

namespace ressformer {

namespace detail {
constexpr uint64_t kFnvOffset = 1469598103934665603ull;
constexpr uint64_t kFnvPrime = 1099511628211ull;

struct Fnv {
  uint64_t h = kFnvOffset;
  void feed(const void* p, size_t len) {
    const unsigned char* b = (const unsigned char*)p;
    for (size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= kFnvPrime;
    }
  }
};

template <class T>
void put(std::string& buf, const T& v) {
  static_assert(std::is_trivially_copyable_v<T>);
  buf.append((const char*)&v, sizeof(T));
}

template <class T>
T take(const std::string& buf, size_t& off) {
  if (off + sizeof(T) > buf.size()) throw std::runtime_error("checkpoint: truncated file");
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}
}  // namespace detail

constexpr uint32_t kCheckpointVersion = 1;

// Layout: "RSSF", u32 version, u64 config length + bytes (resolved key=value
// text), u32 parameter count, then per parameter: u32 name length, name,
// u32 rank, i64 extents, f64 data; closed by a FNV-1a 64 checksum of all
// preceding bytes. Doubles round-trip bit-exactly.
inline void save_checkpoint(const std::string& path, const RunConfig& cfg, const ParamSet& params,
                            long vocab_size) {
  std::string buf;
  buf.append("RSSF");
  detail::put(buf, kCheckpointVersion);
  std::string cfg_text = serialize_config(cfg) + "# vocab_size " + std::to_string(vocab_size) + "\n";
  detail::put(buf, (uint64_t)cfg_text.size());
  buf.append(cfg_text);
  detail::put(buf, (uint32_t)params.items.size());
  for (const auto& [name, t] : params.items) {
    detail::put(buf, (uint32_t)name.size());
    buf.append(name);
    detail::put(buf, (uint32_t)t.shape.size());
    for (long ext : t.shape) detail::put(buf, (int64_t)ext);
    buf.append((const char*)t.data(), sizeof(double) * t.size());
  }
  detail::Fnv fnv;
  fnv.feed(buf.data(), buf.size());
  detail::put(buf, fnv.h);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  f.write(buf.data(), (long)buf.size());
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

struct Checkpoint {
  RunConfig config;
  long vocab_size = 0;
  ParamSet params;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  std::string buf = ss.str();
  if (buf.size() < 16 || buf.compare(0, 4, "RSSF") != 0)
    throw std::runtime_error("checkpoint: " + path + " is not a checkpoint file");
  detail::Fnv fnv;
  fnv.feed(buf.data(), buf.size() - 8);
  size_t off = buf.size() - 8;
  uint64_t stored = detail::take<uint64_t>(buf, off);
  if (stored != fnv.h) throw std::runtime_error("checkpoint: checksum mismatch in " + path);

  off = 4;
  uint32_t version = detail::take<uint32_t>(buf, off);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  uint64_t cfg_len = detail::take<uint64_t>(buf, off);
  if (off + cfg_len > buf.size()) throw std::runtime_error("checkpoint: truncated file");
  std::string cfg_text = buf.substr(off, cfg_len);
  off += cfg_len;

  Checkpoint ck;
  std::string cfg_body, vocab_line;
  std::istringstream lines(cfg_text);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.rfind("# vocab_size ", 0) == 0)
      ck.vocab_size = std::stol(line.substr(13));
    else
      cfg_body += line + "\n";
  }
  ck.config = parse_config_string(cfg_body);
  ck.config.model.vocab_size = ck.vocab_size;

  uint32_t count = detail::take<uint32_t>(buf, off);
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = detail::take<uint32_t>(buf, off);
    if (off + name_len > buf.size()) throw std::runtime_error("checkpoint: truncated file");
    std::string name = buf.substr(off, name_len);
    off += name_len;
    uint32_t rank = detail::take<uint32_t>(buf, off);
    Shape shape(rank);
    for (uint32_t r = 0; r < rank; ++r) shape[r] = (long)detail::take<int64_t>(buf, off);
    Tensor& t = ck.params.add(name, shape);
    size_t bytes = sizeof(double) * t.size();
    if (off + bytes > buf.size() - 8) throw std::runtime_error("checkpoint: truncated file");
    std::memcpy(t.data(), buf.data() + off, bytes);
    off += bytes;
  }
  return ck;
}

}  // namespace ressformer

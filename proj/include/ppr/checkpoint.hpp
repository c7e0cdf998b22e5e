#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ppr/autograd.hpp"
#include "ppr/cores.hpp"

namespace ppr {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'P', 'P', 'R', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { kF64 = 0, kBytes = 1 };

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kIo, kMagic, kChecksum, kVersion, kFormat, kShape, kMissing };
  CheckpointError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Ordered named arrays: float64 tensors plus opaque byte blobs (config text,
/// generator states).
class Checkpoint {
 public:
  struct Entry {
    std::string name;
    DType dtype = DType::kF64;
    Shape shape;
    std::vector<double> f64;
    std::string bytes;
  };

  void put(const std::string& name, const Tensor& t) {
    Entry e{name, DType::kF64, t.shape(), t.vec(), {}};
    insert(std::move(e));
  }

  void put_vector(const std::string& name, std::vector<double> v) {
    const std::size_t n = v.size();
    insert({name, DType::kF64, Shape{n}, std::move(v), {}});
  }

  void put_bytes(const std::string& name, std::string bytes) {
    const std::size_t n = bytes.size();
    insert({name, DType::kBytes, Shape{n}, {}, std::move(bytes)});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Entry& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw CheckpointError(CheckpointError::Kind::kMissing, "checkpoint has no entry " + name);
    return entries_[it->second];
  }

  Tensor tensor(const std::string& name) const {
    const Entry& e = entry(name);
    if (e.dtype != DType::kF64) throw CheckpointError(CheckpointError::Kind::kFormat, name + " is not a float64 array");
    if (e.shape.empty() && e.f64.size() == 1) return Tensor::scalar(e.f64[0]);
    return Tensor(e.shape, e.f64);
  }

  const std::vector<double>& vector(const std::string& name) const {
    const Entry& e = entry(name);
    if (e.dtype != DType::kF64) throw CheckpointError(CheckpointError::Kind::kFormat, name + " is not a float64 array");
    return e.f64;
  }

  const std::string& bytes(const std::string& name) const {
    const Entry& e = entry(name);
    if (e.dtype != DType::kBytes) throw CheckpointError(CheckpointError::Kind::kFormat, name + " is not a byte blob");
    return e.bytes;
  }

  const std::vector<Entry>& entries() const { return entries_; }

  std::string serialize() const;
  static Checkpoint deserialize(const std::string& buf);

 private:
  void insert(Entry e) {
    if (index_.count(e.name)) throw std::invalid_argument("duplicate checkpoint entry " + e.name);
    index_.emplace(e.name, entries_.size());
    entries_.push_back(std::move(e));
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.append(b, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw CheckpointError(CheckpointError::Kind::kFormat, "checkpoint entry runs past the end");
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc_of(const char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

/// "PPRCKPT1", u32 version, u32 count, entries, then u64 length and u32 CRC32
/// of everything before the trailer. All integers little-endian.
inline std::string Checkpoint::serialize() const {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
  for (const Entry& e : entries_) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.shape.size()));
    for (std::size_t d : e.shape) detail::put_le<std::uint64_t>(out, d);
    if (e.dtype == DType::kF64) {
      out.append(reinterpret_cast<const char*>(e.f64.data()), e.f64.size() * sizeof(double));
    } else {
      out += e.bytes;
    }
  }
  const std::uint64_t len = out.size();
  const std::uint32_t crc = detail::crc_of(out.data(), out.size());
  detail::put_le<std::uint64_t>(out, len);
  detail::put_le<std::uint32_t>(out, crc);
  return out;
}

inline Checkpoint Checkpoint::deserialize(const std::string& buf) {
  using K = CheckpointError::Kind;
  constexpr std::size_t kTrailer = sizeof(std::uint64_t) + sizeof(std::uint32_t);
  if (buf.size() < sizeof kCheckpointMagic || std::memcmp(buf.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw CheckpointError(K::kMagic, "not a checkpoint (bad magic bytes)");
  }
  if (buf.size() < sizeof kCheckpointMagic + 8 + kTrailer) {
    throw CheckpointError(K::kChecksum, "checkpoint truncated: no trailer");
  }
  const std::size_t body = buf.size() - kTrailer;
  std::uint64_t len;
  std::uint32_t crc;
  std::memcpy(&len, buf.data() + body, sizeof len);
  std::memcpy(&crc, buf.data() + body + sizeof len, sizeof crc);
  if (len != body || detail::crc_of(buf.data(), body) != crc) {
    throw CheckpointError(K::kChecksum, "checkpoint checksum mismatch (truncated or corrupt file)");
  }
  detail::Reader r(buf, body);
  r.seek(sizeof kCheckpointMagic);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(K::kVersion, "unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.take(r.get<std::uint32_t>());
    const auto dtype = r.get<std::uint8_t>();
    if (dtype > 1) throw CheckpointError(K::kFormat, "entry " + e.name + ": unknown dtype " + std::to_string(dtype));
    e.dtype = static_cast<DType>(dtype);
    const auto rank = r.get<std::uint8_t>();
    std::size_t n = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const auto dim = r.get<std::uint64_t>();
      if (dim > body) throw CheckpointError(K::kShape, "entry " + e.name + ": implausible dimension");
      e.shape.push_back(dim);
      n *= dim;
    }
    if (e.dtype == DType::kBytes) {
      if (rank != 1) throw CheckpointError(K::kShape, "entry " + e.name + ": byte blob must have rank 1");
      e.bytes = r.take(n);
    } else {
      if (n > body / sizeof(double)) throw CheckpointError(K::kShape, "entry " + e.name + ": payload too large");
      const std::string raw = r.take(n * sizeof(double));
      e.f64.resize(n);
      std::memcpy(e.f64.data(), raw.data(), raw.size());
    }
    ck.insert(std::move(e));
  }
  if (r.pos() != body) throw CheckpointError(K::kFormat, "trailing bytes after the last checkpoint entry");
  return ck;
}

/// Writes to a sibling temp file, then renames over the target.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string data = ck.serialize();
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError(CheckpointError::Kind::kIo, "cannot write " + tmp.string());
    f.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!f) throw CheckpointError(CheckpointError::Kind::kIo, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CheckpointError::Kind::kIo, "cannot open checkpoint " + path.string());
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return Checkpoint::deserialize(buf);
}

/// Parameters are stored under "param/<name>".
inline void put_params(Checkpoint& ck, const ParamStore& store) {
  for (const auto& e : store.entries()) ck.put("param/" + e.name, e.value);
}

/// Fills `store` from the checkpoint. Every expected name must be present with
/// the stored shape; all problems are reported together.
inline void load_params(const Checkpoint& ck, ParamStore& store) {
  std::vector<std::string> missing, mismatched;
  for (const auto& e : store.entries()) {
    const std::string key = "param/" + e.name;
    if (!ck.contains(key)) {
      missing.push_back(e.name);
    } else if (ck.entry(key).dtype != DType::kF64 || ck.entry(key).shape != e.value.shape()) {
      mismatched.push_back(e.name + " (expected " + shape_str(e.value.shape()) + ", found " +
                           shape_str(ck.entry(key).shape) + ")");
    }
  }
  std::vector<std::string> unexpected;
  for (const auto& e : ck.entries()) {
    if (e.name.rfind("param/", 0) == 0 && !store.contains(e.name.substr(6))) unexpected.push_back(e.name.substr(6));
  }
  if (!missing.empty() || !mismatched.empty() || !unexpected.empty()) {
    std::string msg = "checkpoint parameters do not match the architecture:";
    auto list = [&](const char* what, const std::vector<std::string>& v) {
      if (v.empty()) return;
      msg += std::string("\n  ") + what + ":";
      for (const auto& s : v) msg += " " + s;
    };
    list("missing", missing);
    list("shape mismatch", mismatched);
    list("unexpected", unexpected);
    throw CheckpointError(missing.empty() && unexpected.empty() ? CheckpointError::Kind::kShape
                                                                 : CheckpointError::Kind::kMissing,
                          msg);
  }
  for (const auto& e : store.entries()) store.set(e.name, ck.tensor("param/" + e.name));
}

}  // namespace ppr

#pragma once

// Named-tensor checkpoint archive.
//
// Layout (all integers little-endian):
//
//   "KADP"                      4 bytes magic
//   version                     u32 (currently 1)
//   metadata length M           u64
//   metadata                    M bytes of UTF-8 JSON
//   entry count E               u32
//   E entries, each:
//     name length n             u32
//     name                      n bytes
//     rank r                    u32
//     dims                      r x u64
//     payload byte offset       u64
//   payload length P            u64
//   payload                     P bytes of IEEE-754 binary32 values
//
// Entries are written in name order with contiguous payload ranges, so a
// given parameter set always serializes to the same bytes.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <string_view>
#include <unistd.h>

#include "json.hpp"

#include "kadapter/errors.hpp"
#include "kadapter/params.hpp"

namespace kadapter {

inline constexpr char kCheckpointMagic[4] = {'K', 'A', 'D', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  ParamStore params;
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void bytes(std::string_view s) { out_.append(s); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view in) : in_(in) {}

  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8, "u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string_view bytes(std::uint64_t n, const char* what) {
    need(n, what);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::uint64_t n, const char* what) const {
    if (n > in_.size() - pos_) {
      throw TruncatedError(std::string("checkpoint truncated while reading ") + what);
    }
  }

  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  detail::ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  const std::string meta = ckpt.metadata.dump();
  w.u64(meta.size());
  w.bytes(meta);
  const auto& params = ckpt.params.all();
  w.u32(static_cast<std::uint32_t>(params.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u64(d);
    w.u64(offset);
    offset += 4 * t.size();
  }
  w.u64(offset);
  for (const auto& [name, t] : params) {
    for (double v : t.data()) w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return w.take();
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.remaining() < 4) throw TruncatedError("checkpoint shorter than its magic");
  if (r.bytes(4, "magic") != std::string_view(kCheckpointMagic, 4)) {
    throw BadMagicError("not a checkpoint: bad magic");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw BadVersionError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint64_t meta_len = r.u64();
  Checkpoint ckpt;
  const auto meta = r.bytes(meta_len, "metadata");
  try {
    ckpt.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint metadata is not JSON: ") + e.what());
  }

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  const std::uint32_t n_entries = r.u32();
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < n_entries; ++i) {
    Entry e;
    const std::uint32_t name_len = r.u32();
    e.name = std::string(r.bytes(name_len, "entry name"));
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) {
      throw FormatError("entry " + e.name + " has invalid rank " + std::to_string(rank));
    }
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::uint64_t d = r.u64();
      if (d == 0 || d > (std::uint64_t{1} << 32)) {
        throw FormatError("entry " + e.name + " has invalid dimension");
      }
      e.shape.push_back(static_cast<std::size_t>(d));
    }
    e.offset = r.u64();
    entries.push_back(std::move(e));
  }
  const std::uint64_t payload_len = r.u64();
  const auto payload = r.bytes(payload_len, "payload");
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint payload");

  // Offsets must tile the payload without overlap.
  std::uint64_t expected = 0;
  for (const auto& e : entries) {
    const std::uint64_t n = ndgrad::numel(e.shape);
    if (e.offset != expected) {
      throw FormatError("entry " + e.name + " offset " + std::to_string(e.offset) +
                        " overlaps or leaves a gap (expected " +
                        std::to_string(expected) + ")");
    }
    if (e.offset + 4 * n > payload_len) {
      throw TruncatedError("entry " + e.name + " extends past the payload");
    }
    std::vector<double> values(n);
    for (std::uint64_t k = 0; k < n; ++k) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b)
        bits |= static_cast<std::uint32_t>(
                    static_cast<unsigned char>(payload[e.offset + 4 * k + b]))
                << (8 * b);
      values[k] = static_cast<double>(std::bit_cast<float>(bits));
    }
    expected += 4 * n;
    ckpt.params.insert(e.name, Tensor::from(e.shape, std::move(values), false));
  }
  if (expected != payload_len) throw FormatError("payload has unreferenced bytes");
  return ckpt;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// Writes through a temporary file in the same directory, then renames.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw IoError("cannot rename onto " + path.string() + ": " + ec.message());
  }
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file_bytes(path));
}

// FNV-1a, used for byte-level identity checks in reports.
inline std::uint64_t fingerprint(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

// Rounds every value to the nearest binary32, matching what a save/load
// cycle would produce.
inline void quantize_to_f32(ParamStore& store) {
  for (auto& [name, t] : store.all()) {
    for (double& v : t.mutable_data()) v = static_cast<double>(static_cast<float>(v));
  }
}

}  // namespace kadapter

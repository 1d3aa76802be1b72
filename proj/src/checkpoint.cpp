#include "calliope/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

#include "calliope/error.hpp"

namespace calliope {

namespace {

constexpr char kMagic[4] = {'C', 'L', 'L', 'P'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

class ByteReader {
 public:
  ByteReader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = std::uint32_t(p_[pos_]) | std::uint32_t(p_[pos_ + 1]) << 8 |
                      std::uint32_t(p_[pos_ + 2]) << 16 |
                      std::uint32_t(p_[pos_ + 3]) << 24;
    pos_ += 4;
    return v;
  }

  std::string str(std::size_t len) {
    need(len);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), len);
    pos_ += len;
    return s;
  }

  std::vector<std::uint8_t> raw(std::size_t len) {
    need(len);
    std::vector<std::uint8_t> b(p_ + pos_, p_ + pos_ + len);
    pos_ += len;
    return b;
  }

  std::size_t remaining() const { return n_ - pos_; }

 private:
  void need(std::size_t len) const {
    if (pos_ + len > n_) throw TruncatedChunk("checkpoint ends mid-entry");
  }
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

}  // namespace

std::size_t dtype_size(DType dt) {
  switch (dt) {
    case DType::f32:
    case DType::u32:
      return 4;
    case DType::f64:
    case DType::u64:
      return 8;
    case DType::u16:
      return 2;
    case DType::u8:
      return 1;
  }
  throw MalformedHeader("unknown dtype code");
}

std::uint64_t CheckpointEntry::numel() const {
  std::uint64_t n = 1;
  for (std::uint32_t d : dims) n *= d;
  return n;
}

CheckpointEntry make_entry_f32(const std::string& name, const Tensor& t) {
  CheckpointEntry e;
  e.name = name;
  e.dtype = DType::f32;
  for (int d : t.shape) e.dims.push_back(static_cast<std::uint32_t>(d));
  e.bytes.reserve(t.data.size() * 4);
  for (float f : t.data) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(e.bytes, bits);
  }
  return e;
}

CheckpointEntry make_entry_u64(const std::string& name, std::uint64_t value) {
  CheckpointEntry e;
  e.name = name;
  e.dtype = DType::u64;
  e.dims = {1};
  put_u32(e.bytes, static_cast<std::uint32_t>(value & 0xffffffffu));
  put_u32(e.bytes, static_cast<std::uint32_t>(value >> 32));
  return e;
}

CheckpointEntry make_entry_u32_list(const std::string& name,
                                    const std::vector<std::uint32_t>& values) {
  CheckpointEntry e;
  e.name = name;
  e.dtype = DType::u32;
  e.dims = {static_cast<std::uint32_t>(values.size())};
  for (std::uint32_t v : values) put_u32(e.bytes, v);
  return e;
}

Tensor entry_as_f32(const CheckpointEntry& e) {
  if (e.dtype != DType::f32) {
    throw MalformedHeader("entry " + e.name + " is not f32");
  }
  std::vector<int> shape;
  for (std::uint32_t d : e.dims) shape.push_back(static_cast<int>(d));
  std::vector<float> data(e.numel());
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::uint32_t bits = std::uint32_t(e.bytes[i * 4]) |
                         std::uint32_t(e.bytes[i * 4 + 1]) << 8 |
                         std::uint32_t(e.bytes[i * 4 + 2]) << 16 |
                         std::uint32_t(e.bytes[i * 4 + 3]) << 24;
    std::memcpy(&data[i], &bits, 4);
  }
  return Tensor(std::move(shape), std::move(data));
}

std::uint64_t entry_as_u64(const CheckpointEntry& e) {
  if (e.dtype != DType::u64 || e.numel() != 1) {
    throw MalformedHeader("entry " + e.name + " is not a u64 scalar");
  }
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | e.bytes[i];
  return v;
}

std::vector<std::uint32_t> entry_as_u32_list(const CheckpointEntry& e) {
  if (e.dtype != DType::u32) {
    throw MalformedHeader("entry " + e.name + " is not u32");
  }
  std::vector<std::uint32_t> out(e.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::uint32_t(e.bytes[i * 4]) |
             std::uint32_t(e.bytes[i * 4 + 1]) << 8 |
             std::uint32_t(e.bytes[i * 4 + 2]) << 16 |
             std::uint32_t(e.bytes[i * 4 + 3]) << 24;
  }
  return out;
}

void write_checkpoint(const std::string& path,
                      const std::vector<CheckpointEntry>& entries) {
  std::vector<std::uint8_t> buf;
  buf.insert(buf.end(), kMagic, kMagic + 4);
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.bytes.size() != e.numel() * dtype_size(e.dtype)) {
      throw ShapeMismatch("entry " + e.name + " payload/dims mismatch");
    }
    put_u32(buf, static_cast<std::uint32_t>(e.name.size()));
    buf.insert(buf.end(), e.name.begin(), e.name.end());
    put_u32(buf, static_cast<std::uint32_t>(e.dtype));
    put_u32(buf, static_cast<std::uint32_t>(e.dims.size()));
    for (std::uint32_t d : e.dims) put_u32(buf, d);
    buf.insert(buf.end(), e.bytes.begin(), e.bytes.end());
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp + " for writing");
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw IoError("cannot rename " + tmp + " to " + path);
  }
}

std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
  if (buf.size() < 12) throw MalformedHeader("file too short for header");
  if (std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw MalformedHeader("bad magic");
  }
  ByteReader r(buf.data() + 4, buf.size() - 4);
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw MalformedHeader("unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  std::vector<CheckpointEntry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.str(r.u32());
    const std::uint32_t dt = r.u32();
    if (dt > 5) throw MalformedHeader("unknown dtype for " + e.name);
    e.dtype = static_cast<DType>(dt);
    const std::uint32_t rank = r.u32();
    for (std::uint32_t k = 0; k < rank; ++k) e.dims.push_back(r.u32());
    e.bytes = r.raw(e.numel() * dtype_size(e.dtype));
    entries.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw TruncatedChunk("trailing bytes after entries");
  return entries;
}

std::uint64_t fnv1a_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char c;
  while (f.get(c)) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace calliope

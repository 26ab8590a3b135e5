#pragma once
// GRID1 binary container: magic "GRD1", format version u16, record count u32;
// per record — name length u16 + UTF-8 name, dtype code u8 (1 = f32,
// 2 = f64), ndim u8, dims as u32 each, then the row-major little-endian
// payload. All parse failures report the byte offset of the offending field.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "scalemix/common.hpp"
#include "scalemix/tensor.hpp"

namespace scalemix {

constexpr uint8_t kGrid1F32 = 1;
constexpr uint8_t kGrid1F64 = 2;
constexpr uint16_t kGrid1Version = 1;

struct Grid1Record {
  std::string name;
  uint8_t dtype = kGrid1F64;
  Tensor data;  // held as f64 in memory; dtype selects on-disk width
};

namespace detail {

inline void put_u16(std::string& b, uint16_t v) {
  b.push_back(static_cast<char>(v & 0xff));
  b.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& b, uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& b, uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::vector<char>& bytes;
  size_t off = 0;

  void need(size_t n, const char* what) const {
    if (off + n > bytes.size())
      throw ParseError(std::string("truncated file while reading ") + what, off);
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<uint8_t>(bytes[off++]);
  }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v = 0;
    for (int i = 0; i < 2; ++i)
      v = static_cast<uint16_t>(v | (static_cast<uint16_t>(
                                         static_cast<uint8_t>(bytes[off + static_cast<size_t>(i)]))
                                     << (8 * i)));
    off += 2;
    return v;
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<uint8_t>(bytes[off + static_cast<size_t>(i)]))
           << (8 * i);
    off += 4;
    return v;
  }
  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<uint64_t>(static_cast<uint8_t>(bytes[off + static_cast<size_t>(i)]))
           << (8 * i);
    off += 8;
    return v;
  }
  std::string str(size_t n, const char* what) {
    need(n, what);
    std::string s(bytes.data() + off, n);
    off += n;
    return s;
  }
};

}  // namespace detail

inline void grid1_write(const std::string& path,
                        const std::vector<Grid1Record>& records) {
  std::string buf;
  buf.append("GRD1");
  detail::put_u16(buf, kGrid1Version);
  if (records.size() > 0xffffffffull)
    throw ContractError("grid1: too many records");
  detail::put_u32(buf, static_cast<uint32_t>(records.size()));
  for (const auto& rec : records) {
    if (rec.name.size() > 0xffff)
      throw ContractError("grid1: record name longer than 65535 bytes");
    if (rec.dtype != kGrid1F32 && rec.dtype != kGrid1F64)
      throw ContractError("grid1: unknown dtype code " + std::to_string(rec.dtype));
    if (!rec.data.valid()) throw ContractError("grid1: record without data");
    if (rec.data.ndim() > 255) throw ContractError("grid1: too many dims");
    detail::put_u16(buf, static_cast<uint16_t>(rec.name.size()));
    buf.append(rec.name);
    buf.push_back(static_cast<char>(rec.dtype));
    buf.push_back(static_cast<char>(rec.data.ndim()));
    for (int i = 0; i < rec.data.ndim(); ++i) {
      if (rec.data.dim(i) > 0xffffffffll)
        throw ContractError("grid1: dimension exceeds u32");
      detail::put_u32(buf, static_cast<uint32_t>(rec.data.dim(i)));
    }
    if (rec.dtype == kGrid1F64) {
      for (int64_t i = 0; i < rec.data.numel(); ++i)
        detail::put_u64(buf, std::bit_cast<uint64_t>(rec.data[i]));
    } else {
      for (int64_t i = 0; i < rec.data.numel(); ++i)
        detail::put_u32(buf,
                        std::bit_cast<uint32_t>(static_cast<float>(rec.data[i])));
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PipelineError("grid1: cannot open for writing: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw PipelineError("grid1: write failed: " + path);
}

inline std::vector<Grid1Record> grid1_read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("grid1: cannot open file: " + path, 0);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  detail::Reader r{bytes};
  {
    r.need(4, "magic");
    if (std::memcmp(bytes.data(), "GRD1", 4) != 0)
      throw ParseError("grid1: bad magic", 0);
    r.off = 4;
  }
  const size_t version_off = r.off;
  const uint16_t version = r.u16("version");
  if (version != kGrid1Version)
    throw ParseError("grid1: unsupported version " + std::to_string(version),
                     version_off);
  const uint32_t count = r.u32("record count");
  std::vector<Grid1Record> records;
  records.reserve(count);
  for (uint32_t rec = 0; rec < count; ++rec) {
    const uint16_t name_len = r.u16("name length");
    std::string name = r.str(name_len, "record name");
    const size_t dtype_off = r.off;
    const uint8_t dtype = r.u8("dtype");
    if (dtype != kGrid1F32 && dtype != kGrid1F64)
      throw ParseError("grid1: unknown dtype code " + std::to_string(dtype),
                       dtype_off);
    const uint8_t ndim = r.u8("ndim");
    Shape shape(ndim);
    int64_t numel = 1;
    for (int i = 0; i < ndim; ++i) {
      const size_t dim_off = r.off;
      const uint32_t ext = r.u32("dimension");
      if (ext == 0) throw ParseError("grid1: zero dimension", dim_off);
      shape[static_cast<size_t>(i)] = static_cast<int64_t>(ext);
      numel *= static_cast<int64_t>(ext);
    }
    if (ndim == 0) throw ParseError("grid1: zero-rank record", dtype_off + 1);
    std::vector<double> values(static_cast<size_t>(numel));
    if (dtype == kGrid1F64) {
      for (int64_t i = 0; i < numel; ++i)
        values[static_cast<size_t>(i)] = std::bit_cast<double>(r.u64("payload"));
    } else {
      for (int64_t i = 0; i < numel; ++i)
        values[static_cast<size_t>(i)] =
            static_cast<double>(std::bit_cast<float>(r.u32("payload")));
    }
    records.push_back({std::move(name), dtype, Tensor(shape, std::move(values), true)});
  }
  if (r.off != bytes.size())
    throw ParseError("grid1: trailing bytes after last record", r.off);
  return records;
}

}  // namespace scalemix

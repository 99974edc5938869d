#pragma once

#include <zlib.h>

#include <cctype>
#include <cerrno>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dpsplit/common.hpp"

namespace dpsplit::formats {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open: " + path);
  const std::streamsize size = in.tellg();
  in.seekg(0);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
  in.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!in) throw IoError("short read: " + path);
  return bytes;
}

// window_bits: 15 + 32 auto-detects zlib/gzip wrapping; -15 is raw deflate
// (zip members). `what` names the stream in error messages.
inline std::vector<std::uint8_t> inflate_bytes(const std::uint8_t* data, std::size_t size,
                                               int window_bits, const std::string& what) {
  z_stream zs{};
  if (inflateInit2(&zs, window_bits) != Z_OK) throw IngestError("zlib init failed: " + what);
  std::vector<std::uint8_t> out;
  out.reserve(size * 3);
  std::vector<std::uint8_t> buf(1 << 16);
  zs.next_in = const_cast<Bytef*>(data);
  zs.avail_in = static_cast<uInt>(size);
  int rc = Z_OK;
  do {
    zs.next_out = buf.data();
    zs.avail_out = static_cast<uInt>(buf.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw IngestError("corrupt compressed stream (" + std::to_string(rc) + "): " + what);
    }
    out.insert(out.end(), buf.data(), buf.data() + (buf.size() - zs.avail_out));
  } while (rc != Z_STREAM_END && (zs.avail_in > 0 || zs.avail_out == 0));
  inflateEnd(&zs);
  if (rc != Z_STREAM_END) throw IngestError("truncated compressed stream: " + what);
  return out;
}

inline std::uint16_t le16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline std::uint32_t le32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

// ---------------------------------------------------------------------------
// Tar (ustar): regular files only, other entry types skipped.
struct ArchiveEntry {
  std::string name;
  std::vector<std::uint8_t> data;
};

inline std::vector<ArchiveEntry> untar(const std::vector<std::uint8_t>& bytes,
                                       const std::string& what) {
  std::vector<ArchiveEntry> out;
  std::size_t pos = 0;
  while (pos + 512 <= bytes.size()) {
    const std::uint8_t* hdr = bytes.data() + pos;
    bool all_zero = true;
    for (int i = 0; i < 512 && all_zero; ++i) all_zero = hdr[i] == 0;
    if (all_zero) break;

    char namebuf[101] = {};
    std::memcpy(namebuf, hdr, 100);
    std::string name(namebuf);
    char prefixbuf[156] = {};
    std::memcpy(prefixbuf, hdr + 345, 155);
    if (prefixbuf[0] != '\0') name = std::string(prefixbuf) + "/" + name;

    char sizebuf[13] = {};
    std::memcpy(sizebuf, hdr + 124, 12);
    errno = 0;
    const unsigned long long size = std::strtoull(sizebuf, nullptr, 8);
    if (errno != 0) throw IngestError("bad tar size field at offset " + std::to_string(pos) + ": " + what);

    const char type = static_cast<char>(hdr[156]);
    pos += 512;
    if (pos + size > bytes.size())
      throw IngestError("tar entry '" + name + "' overruns the archive: " + what);
    if (type == '0' || type == '\0') {
      ArchiveEntry e;
      e.name = std::move(name);
      e.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + size));
      out.push_back(std::move(e));
    }
    pos += (static_cast<std::size_t>(size) + 511) / 512 * 512;
  }
  return out;
}

inline std::vector<ArchiveEntry> untar_gz(const std::vector<std::uint8_t>& bytes,
                                          const std::string& what) {
  return untar(inflate_bytes(bytes.data(), bytes.size(), 15 + 32, what), what);
}

// ---------------------------------------------------------------------------
// Zip: central-directory driven, supports stored and deflate members.
inline std::vector<ArchiveEntry> unzip(const std::vector<std::uint8_t>& bytes,
                                       const std::string& what) {
  constexpr std::uint32_t kEocd = 0x06054b50;
  constexpr std::uint32_t kCentral = 0x02014b50;
  constexpr std::uint32_t kLocal = 0x04034b50;
  if (bytes.size() < 22) throw IngestError("too small for a zip archive: " + what);

  std::size_t eocd = std::string::npos;
  const std::size_t scan_from = bytes.size() >= 22 + 65535 ? bytes.size() - 22 - 65535 : 0;
  for (std::size_t i = bytes.size() - 22 + 1; i-- > scan_from;) {
    if (le32(bytes.data() + i) == kEocd) {
      eocd = i;
      break;
    }
  }
  if (eocd == std::string::npos) throw IngestError("zip end record not found: " + what);

  const std::uint16_t n_entries = le16(bytes.data() + eocd + 10);
  std::size_t pos = le32(bytes.data() + eocd + 16);

  std::vector<ArchiveEntry> out;
  out.reserve(n_entries);
  for (std::uint16_t e = 0; e < n_entries; ++e) {
    if (pos + 46 > bytes.size() || le32(bytes.data() + pos) != kCentral)
      throw IngestError("corrupt zip central directory: " + what);
    const std::uint8_t* cd = bytes.data() + pos;
    const std::uint16_t method = le16(cd + 10);
    const std::uint32_t comp_size = le32(cd + 20);
    const std::uint32_t uncomp_size = le32(cd + 24);
    const std::uint16_t name_len = le16(cd + 28);
    const std::uint16_t extra_len = le16(cd + 30);
    const std::uint16_t comment_len = le16(cd + 32);
    const std::uint32_t local_off = le32(cd + 42);
    std::string name(reinterpret_cast<const char*>(cd + 46), name_len);
    pos += 46u + name_len + extra_len + comment_len;

    if (!name.empty() && name.back() == '/') continue;  // directory entry
    if (local_off + 30 > bytes.size() || le32(bytes.data() + local_off) != kLocal)
      throw IngestError("zip member '" + name + "' has a bad local header: " + what);
    const std::uint8_t* lh = bytes.data() + local_off;
    const std::size_t data_off = local_off + 30u + le16(lh + 26) + le16(lh + 28);
    if (data_off + comp_size > bytes.size())
      throw IngestError("zip member '" + name + "' overruns the archive: " + what);

    ArchiveEntry entry;
    entry.name = std::move(name);
    if (method == 0) {
      entry.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(data_off),
                        bytes.begin() + static_cast<std::ptrdiff_t>(data_off + comp_size));
    } else if (method == 8) {
      entry.data = inflate_bytes(bytes.data() + data_off, comp_size, -15, what + ":" + entry.name);
    } else {
      throw IngestError("zip member '" + entry.name + "' uses unsupported method " +
                        std::to_string(method) + ": " + what);
    }
    if (entry.data.size() != uncomp_size)
      throw IngestError("zip member '" + entry.name + "' inflated to the wrong size: " + what);
    out.push_back(std::move(entry));
  }
  return out;
}

// ---------------------------------------------------------------------------
// MATLAB level-5 .mat container, numeric arrays only (what the digit-image
// archives use). Compressed elements are inflated transparently.
namespace mat5 {
inline constexpr int kMiInt8 = 1, kMiUint8 = 2, kMiInt16 = 3, kMiUint16 = 4, kMiInt32 = 5,
                     kMiUint32 = 6, kMiSingle = 7, kMiDouble = 9, kMiMatrix = 14,
                     kMiCompressed = 15;
inline constexpr int kMxDouble = 6, kMxSingle = 7, kMxInt8 = 8, kMxUint8 = 9, kMxInt16 = 10,
                     kMxUint16 = 11, kMxInt32 = 12, kMxUint32 = 13;

inline std::size_t scalar_width(int data_type) {
  switch (data_type) {
    case kMiInt8:
    case kMiUint8: return 1;
    case kMiInt16:
    case kMiUint16: return 2;
    case kMiInt32:
    case kMiUint32:
    case kMiSingle: return 4;
    case kMiDouble: return 8;
    default: return 0;
  }
}
}  // namespace mat5

struct MatVariable {
  std::string name;
  int class_id = 0;
  int data_type = 0;  // element type of the real part
  std::vector<int> dims;
  std::vector<std::uint8_t> raw;  // real-part payload, column-major

  std::size_t count() const {
    std::size_t n = 1;
    for (int d : dims) n *= static_cast<std::size_t>(d);
    return n;
  }

  double value_at(std::size_t i) const {
    const std::uint8_t* p = raw.data() + i * mat5::scalar_width(data_type);
    switch (data_type) {
      case mat5::kMiInt8: return static_cast<double>(static_cast<std::int8_t>(p[0]));
      case mat5::kMiUint8: return static_cast<double>(p[0]);
      case mat5::kMiInt16: return static_cast<double>(static_cast<std::int16_t>(le16(p)));
      case mat5::kMiUint16: return static_cast<double>(le16(p));
      case mat5::kMiInt32: return static_cast<double>(static_cast<std::int32_t>(le32(p)));
      case mat5::kMiUint32: return static_cast<double>(le32(p));
      case mat5::kMiSingle: {
        float f;
        std::memcpy(&f, p, 4);
        return static_cast<double>(f);
      }
      case mat5::kMiDouble: {
        double d;
        std::memcpy(&d, p, 8);
        return d;
      }
      default: throw IngestError("mat variable '" + name + "' has unsupported element type");
    }
  }
};

namespace mat5 {

struct Element {
  int type = 0;
  const std::uint8_t* data = nullptr;
  std::size_t size = 0;
  std::size_t next = 0;  // offset of the following element
};

inline Element read_element(const std::uint8_t* base, std::size_t pos, std::size_t limit,
                            const std::string& what) {
  if (pos + 8 > limit) throw IngestError("truncated mat element: " + what);
  const std::uint32_t word = le32(base + pos);
  Element e;
  if (word & 0xFFFF0000u) {  // small data element: type and size share the tag
    e.type = static_cast<int>(word & 0xFFFFu);
    e.size = word >> 16;
    if (e.size > 4) throw IngestError("bad small mat element: " + what);
    e.data = base + pos + 4;
    e.next = pos + 8;
  } else {
    e.type = static_cast<int>(word);
    e.size = le32(base + pos + 4);
    e.data = base + pos + 8;
    const std::size_t padded = (e.size + 7) / 8 * 8;
    if (pos + 8 + e.size > limit) throw IngestError("mat element overruns file: " + what);
    e.next = pos + 8 + (e.type == kMiCompressed ? e.size : padded);
  }
  return e;
}

inline MatVariable parse_matrix(const std::uint8_t* data, std::size_t size, const std::string& what) {
  MatVariable var;
  std::size_t pos = 0;

  const Element flags = read_element(data, pos, size, what);
  if (flags.type != kMiUint32 || flags.size < 8)
    throw IngestError("mat matrix lacks array flags: " + what);
  var.class_id = static_cast<int>(le32(flags.data) & 0xFFu);
  pos = flags.next;

  const Element dims = read_element(data, pos, size, what);
  if (dims.type != kMiInt32) throw IngestError("mat matrix lacks dimensions: " + what);
  for (std::size_t i = 0; i + 4 <= dims.size; i += 4)
    var.dims.push_back(static_cast<int>(le32(dims.data + i)));
  pos = dims.next;

  const Element name = read_element(data, pos, size, what);
  if (name.type != kMiInt8) throw IngestError("mat matrix lacks a name: " + what);
  var.name.assign(reinterpret_cast<const char*>(name.data), name.size);
  pos = name.next;

  const Element real = read_element(data, pos, size, what);
  if (scalar_width(real.type) == 0)
    throw IngestError("mat variable '" + var.name + "' is not numeric: " + what);
  var.data_type = real.type;
  if (real.size < var.count() * scalar_width(real.type))
    throw IngestError("mat variable '" + var.name + "' payload is short: " + what);
  var.raw.assign(real.data, real.data + real.size);
  return var;
}

}  // namespace mat5

inline std::map<std::string, MatVariable> read_mat5(const std::vector<std::uint8_t>& bytes,
                                                    const std::string& what) {
  if (bytes.size() < 128) throw IngestError("too small for a mat file: " + what);
  if (!(bytes[126] == 'I' && bytes[127] == 'M'))
    throw IngestError("mat file is not little-endian level 5: " + what);

  std::map<std::string, MatVariable> out;
  std::size_t pos = 128;
  while (pos + 8 <= bytes.size()) {
    const mat5::Element e = mat5::read_element(bytes.data(), pos, bytes.size(), what);
    if (e.type == mat5::kMiCompressed) {
      const auto inner = inflate_bytes(e.data, e.size, 15 + 32, what);
      const mat5::Element m = mat5::read_element(inner.data(), 0, inner.size(), what);
      if (m.type == mat5::kMiMatrix) {
        MatVariable var = mat5::parse_matrix(m.data, m.size, what);
        out.emplace(var.name, std::move(var));
      }
    } else if (e.type == mat5::kMiMatrix) {
      MatVariable var = mat5::parse_matrix(e.data, e.size, what);
      out.emplace(var.name, std::move(var));
    }
    pos = e.next;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary PPM (P6), 8-bit samples, interleaved RGB.
struct PpmImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;
};

inline PpmImage read_ppm(const std::vector<std::uint8_t>& bytes, const std::string& what) {
  std::size_t pos = 0;
  const auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  const auto read_int = [&]() -> int {
    skip_space();
    int v = 0;
    bool any = false;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      v = v * 10 + (bytes[pos] - '0');
      ++pos;
      any = true;
    }
    if (!any) throw IngestError("malformed ppm header: " + what);
    return v;
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6')
    throw IngestError("not a binary ppm: " + what);
  pos = 2;
  PpmImage img;
  img.width = read_int();
  img.height = read_int();
  const int maxval = read_int();
  if (maxval != 255) throw IngestError("ppm maxval " + std::to_string(maxval) + " unsupported: " + what);
  ++pos;  // single whitespace after maxval
  const std::size_t need = static_cast<std::size_t>(img.width) * img.height * 3;
  if (pos + need > bytes.size()) throw IngestError("ppm pixel data is short: " + what);
  img.rgb.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                 bytes.begin() + static_cast<std::ptrdiff_t>(pos + need));
  return img;
}

}  // namespace dpsplit::formats

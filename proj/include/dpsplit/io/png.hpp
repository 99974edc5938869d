#pragma once

#include <zlib.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dpsplit/common.hpp"

namespace dpsplit::io {

// Minimal PNG writer: 8-bit RGB, no interlace, filter 0 on every scanline,
// one IDAT chunk compressed at a fixed level. Identical pixels produce
// identical file bytes.
inline void write_png(const std::string& path, const std::uint8_t* rgb, int width, int height) {
  check(width > 0 && height > 0, "png dimensions must be positive");

  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(height) * (1 + static_cast<std::size_t>(width) * 3));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);  // filter type none
    const std::uint8_t* row = rgb + static_cast<std::size_t>(y) * width * 3;
    raw.insert(raw.end(), row, row + static_cast<std::size_t>(width) * 3);
  }

  uLongf comp_cap = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> comp(comp_cap);
  if (compress2(comp.data(), &comp_cap, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw IoError("png deflate failed: " + path);
  comp.resize(comp_cap);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);

  const auto be32 = [](std::uint32_t v) {
    return std::array<std::uint8_t, 4>{static_cast<std::uint8_t>(v >> 24),
                                       static_cast<std::uint8_t>(v >> 16),
                                       static_cast<std::uint8_t>(v >> 8),
                                       static_cast<std::uint8_t>(v)};
  };
  const auto chunk = [&](const char* type, const std::uint8_t* data, std::size_t size) {
    const auto len = be32(static_cast<std::uint32_t>(size));
    out.write(reinterpret_cast<const char*>(len.data()), 4);
    out.write(type, 4);
    if (size > 0) out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(size));
    uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(type), 4);
    if (size > 0) crc = crc32(crc, data, static_cast<uInt>(size));
    const auto crc_be = be32(static_cast<std::uint32_t>(crc));
    out.write(reinterpret_cast<const char*>(crc_be.data()), 4);
  };

  static const std::uint8_t kSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  out.write(reinterpret_cast<const char*>(kSig), 8);

  std::uint8_t ihdr[13];
  const auto wbe = be32(static_cast<std::uint32_t>(width));
  const auto hbe = be32(static_cast<std::uint32_t>(height));
  std::memcpy(ihdr, wbe.data(), 4);
  std::memcpy(ihdr + 4, hbe.data(), 4);
  ihdr[8] = 8;   // bit depth
  ihdr[9] = 2;   // color type: truecolor
  ihdr[10] = 0;  // compression
  ihdr[11] = 0;  // filter method
  ihdr[12] = 0;  // no interlace
  chunk("IHDR", ihdr, sizeof(ihdr));
  chunk("IDAT", comp.data(), comp.size());
  chunk("IEND", nullptr, 0);
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace dpsplit::io

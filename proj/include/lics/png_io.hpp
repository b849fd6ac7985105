#pragma once

// Minimal PNG writer/reader (8-bit grayscale or RGB, filter 0, no interlace)
// on top of zlib. Covers exactly what the grid exporter produces.

#include <cstdint>
#include <cstring>
#include <vector>

#include <zlib.h>

#include "lics/error.hpp"
#include "lics/io_util.hpp"

namespace lics::png {

struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;  // 1 gray, 3 rgb
  std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

namespace detail {

inline void put_u32be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline std::uint32_t get_u32be(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) |
         (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

inline void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
                      const std::uint8_t* data, std::size_t n) {
  put_u32be(out, static_cast<std::uint32_t>(n));
  std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data, data + n);
  std::uint32_t crc = static_cast<std::uint32_t>(
      ::crc32(0, out.data() + start, static_cast<uInt>(4 + n)));
  put_u32be(out, crc);
}

}  // namespace detail

inline void write_png(const fs::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw ConfigError("png: only grayscale or RGB supported");
  if (img.pixels.size() != static_cast<std::size_t>(img.width) * img.height *
                               img.channels)
    throw ShapeError("png: pixel buffer size mismatch");

  // filter byte 0 in front of every scanline
  std::size_t row = static_cast<std::size_t>(img.width) * img.channels;
  std::vector<std::uint8_t> raw((row + 1) * static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) {
    raw[y * (row + 1)] = 0;
    std::memcpy(raw.data() + y * (row + 1) + 1, img.pixels.data() + y * row,
                row);
  }
  uLongf bound = ::compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> compressed(bound);
  if (::compress2(compressed.data(), &bound, raw.data(),
                  static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw IoError("png: deflate failed for " + path.string());
  compressed.resize(bound);

  std::vector<std::uint8_t> out{0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  std::vector<std::uint8_t> ihdr;
  detail::put_u32be(ihdr, static_cast<std::uint32_t>(img.width));
  detail::put_u32be(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.push_back(8);                                   // bit depth
  ihdr.push_back(img.channels == 1 ? 0 : 2);           // color type
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  detail::put_chunk(out, "IHDR", ihdr.data(), ihdr.size());
  detail::put_chunk(out, "IDAT", compressed.data(), compressed.size());
  detail::put_chunk(out, "IEND", nullptr, 0);
  atomic_write(path, out.data(), out.size());
}

inline Image read_png(const fs::path& path) {
  auto bytes = read_file_bytes(path);
  const auto* p = reinterpret_cast<const std::uint8_t*>(bytes.data());
  std::size_t n = bytes.size();
  static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (n < 8 || std::memcmp(p, sig, 8) != 0)
    throw IoError("png: bad signature in " + path.string());

  Image img;
  std::vector<std::uint8_t> idat;
  std::size_t pos = 8;
  while (pos + 12 <= n) {
    std::uint32_t len = detail::get_u32be(p + pos);
    if (pos + 12 + len > n) throw IoError("png: truncated " + path.string());
    const char* type = reinterpret_cast<const char*>(p + pos + 4);
    const std::uint8_t* data = p + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      img.width = static_cast<int>(detail::get_u32be(data));
      img.height = static_cast<int>(detail::get_u32be(data + 4));
      int depth = data[8], color = data[9];
      if (depth != 8 || (color != 0 && color != 2) || data[12] != 0)
        throw IoError("png: unsupported format in " + path.string());
      img.channels = color == 0 ? 1 : 3;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  if (img.width <= 0 || img.height <= 0)
    throw IoError("png: missing IHDR in " + path.string());

  std::size_t row = static_cast<std::size_t>(img.width) * img.channels;
  std::vector<std::uint8_t> raw((row + 1) * static_cast<std::size_t>(img.height));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (::uncompress(raw.data(), &raw_len, idat.data(),
                   static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw IoError("png: inflate failed for " + path.string());

  img.pixels.resize(row * static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) {
    if (raw[y * (row + 1)] != 0)
      throw IoError("png: unsupported filter in " + path.string());
    std::memcpy(img.pixels.data() + y * row, raw.data() + y * (row + 1) + 1,
                row);
  }
  return img;
}

}  // namespace lics::png

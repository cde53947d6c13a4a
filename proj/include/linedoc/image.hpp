#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace linedoc {

// Grayscale page image, values in [0, 1], row-major.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w, double fill = 1.0)
      : height(h), width(w), pixels(static_cast<size_t>(h) * w, fill) {}

  double& at(int y, int x) { return pixels[static_cast<size_t>(y) * width + x]; }
  double at(int y, int x) const {
    return pixels[static_cast<size_t>(y) * width + x];
  }
};

inline uint8_t to_byte(double v) {
  double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return static_cast<uint8_t>(c * 255.0 + 0.5);
}

// ---- PGM (binary P5) ----

inline void write_pgm(const Image& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "P5\n" << img.width << " " << img.height << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(img.width));
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      row[static_cast<size_t>(x)] = to_byte(img.at(y, x));
    f.write(reinterpret_cast<const char*>(row.data()), img.width);
  }
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline Image read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255)
    throw std::runtime_error("unsupported PGM: " + path);
  f.get();  // single whitespace after header
  Image img(h, w);
  std::vector<uint8_t> row(static_cast<size_t>(w));
  for (int y = 0; y < h; ++y) {
    f.read(reinterpret_cast<char*>(row.data()), w);
    if (!f) throw std::runtime_error("truncated PGM: " + path);
    for (int x = 0; x < w; ++x) img.at(y, x) = row[static_cast<size_t>(x)] / 255.0;
  }
  return img;
}

// ---- PNG (8-bit RGB, zlib-compressed) ----

namespace detail {
inline void png_chunk(std::string& out, const char type[4],
                      const std::vector<uint8_t>& payload) {
  uint32_t len = static_cast<uint32_t>(payload.size());
  uint8_t lenbuf[4] = {static_cast<uint8_t>(len >> 24),
                       static_cast<uint8_t>(len >> 16),
                       static_cast<uint8_t>(len >> 8),
                       static_cast<uint8_t>(len)};
  out.append(reinterpret_cast<char*>(lenbuf), 4);
  std::vector<uint8_t> body(payload.size() + 4);
  std::memcpy(body.data(), type, 4);
  std::memcpy(body.data() + 4, payload.data(), payload.size());
  out.append(reinterpret_cast<char*>(body.data()), body.size());
  uint32_t crc = static_cast<uint32_t>(
      crc32(0L, body.data(), static_cast<uInt>(body.size())));
  uint8_t crcbuf[4] = {static_cast<uint8_t>(crc >> 24),
                       static_cast<uint8_t>(crc >> 16),
                       static_cast<uint8_t>(crc >> 8),
                       static_cast<uint8_t>(crc)};
  out.append(reinterpret_cast<char*>(crcbuf), 4);
}
}  // namespace detail

// rgb: height*width*3 bytes, row-major
inline void write_png_rgb(const std::vector<uint8_t>& rgb, int height,
                          int width, const std::string& path) {
  if (rgb.size() != static_cast<size_t>(height) * width * 3)
    throw std::invalid_argument("write_png_rgb: buffer size mismatch");
  // raw scanlines with filter byte 0
  std::vector<uint8_t> raw(static_cast<size_t>(height) * (1 + 3 * width));
  for (int y = 0; y < height; ++y) {
    size_t off = static_cast<size_t>(y) * (1 + 3 * width);
    raw[off] = 0;
    std::memcpy(raw.data() + off + 1,
                rgb.data() + static_cast<size_t>(y) * width * 3,
                static_cast<size_t>(width) * 3);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> compressed(bound);
  // level 9 for deterministic, well-defined output bytes
  if (compress2(compressed.data(), &bound, raw.data(),
                static_cast<uLong>(raw.size()), 9) != Z_OK)
    throw std::runtime_error("write_png_rgb: deflate failed");
  compressed.resize(bound);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::vector<uint8_t> ihdr(13);
  auto put_u32 = [](std::vector<uint8_t>& v, size_t off, uint32_t x) {
    v[off] = static_cast<uint8_t>(x >> 24);
    v[off + 1] = static_cast<uint8_t>(x >> 16);
    v[off + 2] = static_cast<uint8_t>(x >> 8);
    v[off + 3] = static_cast<uint8_t>(x);
  };
  put_u32(ihdr, 0, static_cast<uint32_t>(width));
  put_u32(ihdr, 4, static_cast<uint32_t>(height));
  ihdr[8] = 8;   // bit depth
  ihdr[9] = 2;   // color type RGB
  ihdr[10] = ihdr[11] = ihdr[12] = 0;
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", compressed);
  detail::png_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

}  // namespace linedoc

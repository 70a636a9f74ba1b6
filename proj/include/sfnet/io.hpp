// SPDX-License-Identifier: Apache-2.0
#pragma once

// SFG1 grid files and 8-bit PPM/PGM rasters.
//
// SFG1 layout: "SFG1", then height, width, depth as little-endian uint32,
// then height*width*depth little-endian float32 in (y, x, channel) order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sfnet/grid.hpp"

namespace sfnet {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace detail

inline constexpr char kSfgMagic[4] = {'S', 'F', 'G', '1'};

/// Encodes a rank-3 tensor. Values are narrowed to float32.
inline std::vector<std::uint8_t> encode_sfg(const Tensor& t) {
  if (t.rank() != 3) throw std::invalid_argument("SFG1 requires a rank-3 tensor, got " + shape_string(t.shape()));
  std::vector<std::uint8_t> out;
  out.reserve(16 + 4 * t.size());
  out.insert(out.end(), kSfgMagic, kSfgMagic + 4);
  for (std::size_t i = 0; i < 3; ++i) detail::put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
  for (double v : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

inline Tensor decode_sfg(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4) throw ParseError("SFG1: file too short for magic", bytes.size());
  if (std::memcmp(bytes.data(), kSfgMagic, 4) != 0) throw ParseError("SFG1: bad magic", 0);
  if (bytes.size() < 16) throw ParseError("SFG1: truncated header, expected 16 bytes, got " + std::to_string(bytes.size()), bytes.size());
  const std::uint64_t h = detail::get_u32(&bytes[4]);
  const std::uint64_t w = detail::get_u32(&bytes[8]);
  const std::uint64_t d = detail::get_u32(&bytes[12]);
  const std::uint64_t expected = 16 + 4 * h * w * d;
  if (bytes.size() != expected)
    throw ParseError("SFG1: expected " + std::to_string(expected) + " bytes for " + std::to_string(h) + "x" +
                         std::to_string(w) + "x" + std::to_string(d) + ", got " + std::to_string(bytes.size()),
                     std::min<std::size_t>(bytes.size(), expected));
  Tensor t(Shape{h, w, d});
  for (std::size_t i = 0; i < t.size(); ++i) {
    const float f = std::bit_cast<float>(detail::get_u32(&bytes[16 + 4 * i]));
    if (!std::isfinite(f)) throw ParseError("SFG1: non-finite value", 16 + 4 * i);
    t[i] = f;
  }
  return t;
}

inline void save_sfg(const std::filesystem::path& path, const Tensor& t) { detail::write_file(path, encode_sfg(t)); }
inline void save_sfg(const std::filesystem::path& path, const Grid& g) { save_sfg(path, g.tensor()); }

inline Tensor load_sfg(const std::filesystem::path& path) { return decode_sfg(detail::read_file(path)); }

inline FlowField load_flow(const std::filesystem::path& path) {
  Tensor t = load_sfg(path);
  if (t.dim(2) != 2) throw ParseError("SFG1: flow file must have depth 2, got " + std::to_string(t.dim(2)), 12);
  return FlowField(std::move(t));
}

inline BinaryMask load_mask_sfg(const std::filesystem::path& path) {
  Tensor t = load_sfg(path);
  if (t.dim(2) != 1) throw ParseError("SFG1: mask file must have depth 1, got " + std::to_string(t.dim(2)), 12);
  return BinaryMask(std::move(t));
}

/// 8-bit raster, 1 (gray) or 3 (RGB) channels, stored (y, x, channel).
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c) : height(h), width(w), channels(c), pixels(h * w * c, 0) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }

  friend bool operator==(const Image&, const Image&) = default;
};

inline std::vector<std::uint8_t> encode_pnm(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("PNM supports 1 or 3 channels");
  const std::string header = std::string(img.channels == 3 ? "P6" : "P5") + "\n" + std::to_string(img.width) + " " +
                             std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

inline Image decode_pnm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  auto skip_ws = [&] {
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
  auto read_int = [&]() -> std::size_t {
    skip_ws();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0');
    if (pos == start) throw ParseError("PNM: expected integer", start);
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
    throw ParseError("PNM: expected P5 or P6 magic", 0);
  pos = 2;
  Image img;
  img.channels = bytes[1] == '6' ? 3 : 1;
  img.width = read_int();
  img.height = read_int();
  const std::size_t maxval = read_int();
  if (maxval != 255) throw ParseError("PNM: only 8-bit (maxval 255) rasters are supported", pos);
  ++pos;  // single whitespace byte before the raster
  const std::size_t n = img.width * img.height * img.channels;
  if (bytes.size() < pos + n)
    throw ParseError("PNM: expected " + std::to_string(n) + " raster bytes, got " + std::to_string(bytes.size() - pos),
                     bytes.size());
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

inline void save_pnm(const std::filesystem::path& path, const Image& img) { detail::write_file(path, encode_pnm(img)); }
inline Image load_pnm(const std::filesystem::path& path) { return decode_pnm(detail::read_file(path)); }

/// Pixel intensities scaled to [0, 1].
inline FeatureGrid image_to_grid(const Image& img) {
  FeatureGrid g(img.height, img.width, img.channels);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) g.tensor()[i] = img.pixels[i] / 255.0;
  return g;
}

inline Image grid_to_image(const Grid& g) {
  Image img(g.height(), g.width(), g.depth());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const double v = std::clamp(g.tensor()[i], 0.0, 1.0);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return img;
}

/// Gray raster to {0, 1} mask (>= 128 is foreground).
inline BinaryMask image_to_mask(const Image& img) {
  if (img.channels != 1) throw std::invalid_argument("mask raster must be single-channel");
  BinaryMask m(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) m.tensor()[i] = img.pixels[i] >= 128 ? 1.0 : 0.0;
  return m;
}

inline Image mask_to_image(const BinaryMask& m) {
  Image img(m.height(), m.width(), 1);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = m.tensor()[i] >= 0.5 ? 255 : 0;
  return img;
}

}  // namespace sfnet

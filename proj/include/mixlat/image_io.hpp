#pragma once

// 16-bit grayscale PNG read/write. Intensities map linearly [0,1] <-> [0,65535].

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <string>
#include <vector>

#include "mixlat/error.hpp"
#include "mixlat/patches.hpp"

namespace mixlat {

/// Receives non-fatal diagnostics; defaults to stderr.
inline std::function<void(const std::string&)>& warning_sink() {
  static std::function<void(const std::string&)> sink = [](const std::string& m) {
    std::cerr << "warning: " << m << "\n";
  };
  return sink;
}

inline void warn(const std::string& m) { warning_sink()(m); }

/// Integer label map (organ masks etc.), row-major.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint16_t> labels;

  LabelMap() = default;
  LabelMap(int h, int w) : height(h), width(w), labels(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), 0) {}
  std::uint16_t& at(int r, int c) { return labels[static_cast<std::size_t>(r) * width + c]; }
  std::uint16_t at(int r, int c) const { return labels[static_cast<std::size_t>(r) * width + c]; }
  bool operator==(const LabelMap&) const = default;
};

namespace detail {

struct PngMemReader {
  const std::vector<unsigned char>* data;
  std::size_t offset = 0;
};

struct PngMemWriter {
  std::vector<unsigned char> out;
};

[[noreturn]] inline void png_fail(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  if (err) *err = msg;
  png_longjmp(png, 1);
}

inline void png_quiet(png_structp, png_const_charp) {}

inline void png_read_mem(png_structp png, png_bytep dst, png_size_t n) {
  auto* r = static_cast<PngMemReader*>(png_get_io_ptr(png));
  if (r->offset + n > r->data->size()) png_error(png, "unexpected end of file");
  std::copy_n(r->data->begin() + static_cast<std::ptrdiff_t>(r->offset), n, dst);
  r->offset += n;
}

inline void png_write_mem(png_structp png, png_bytep src, png_size_t n) {
  auto* w = static_cast<PngMemWriter*>(png_get_io_ptr(png));
  w->out.insert(w->out.end(), src, src + n);
}

inline void png_flush_mem(png_structp) {}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes_atomic(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

/// Decodes any PNG to 16-bit gray samples.
inline std::vector<std::uint16_t> decode_png16(const std::vector<unsigned char>& bytes, int& height, int& width,
                                               const std::string& source = "PNG") {
  PngMemReader reader{&bytes, 0};
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_quiet);
  if (!png) throw Error("libpng: cannot allocate read struct");
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint16_t> out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError(source + ": malformed PNG: " + err, reader.offset);
  }
  png_set_read_fn(png, &reader, png_read_mem);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color & PNG_COLOR_MASK_COLOR || color == PNG_COLOR_TYPE_PALETTE) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  if (depth < 16) png_set_expand_16(png);
  png_set_swap(png);  // native little-endian 16-bit samples
  png_read_update_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  out.resize(static_cast<std::size_t>(height) * static_cast<std::size_t>(width));
  rows.resize(static_cast<std::size_t>(height));
  for (int r = 0; r < height; ++r)
    rows[static_cast<std::size_t>(r)] = reinterpret_cast<png_bytep>(out.data() + static_cast<std::size_t>(r) * width);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

inline std::vector<unsigned char> encode_png16(const std::vector<std::uint16_t>& samples, int height, int width) {
  PngMemWriter writer;
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_quiet);
  if (!png) throw Error("libpng: cannot allocate write struct");
  png_infop info = png_create_info_struct(png);
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  std::vector<std::uint16_t> data = samples;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encoding failed: " + err);
  }
  png_set_write_fn(png, &writer, png_write_mem, png_flush_mem);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 16, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  png_set_swap(png);
  for (int r = 0; r < height; ++r)
    rows[static_cast<std::size_t>(r)] = reinterpret_cast<png_bytep>(data.data() + static_cast<std::size_t>(r) * width);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return std::move(writer.out);
}

}  // namespace detail

inline std::uint16_t to_u16(float v) {
  return static_cast<std::uint16_t>(std::lround(static_cast<double>(v) * 65535.0));
}

/// Writes a 16-bit grayscale PNG. Values outside [0,1] are clamped with a
/// warning; returns the number of clamped pixels.
inline std::size_t write_image(const Image& img, const std::filesystem::path& path) {
  require(img.height > 0 && img.width > 0 && img.size() == static_cast<std::size_t>(img.height) * img.width,
          "write_image: empty or inconsistent image");
  std::vector<std::uint16_t> s(img.size());
  std::size_t clamped = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    float v = img.pixels[i];
    if (!std::isfinite(v)) throw NumericError("write_image: non-finite pixel at index " + std::to_string(i));
    if (v < 0.0f || v > 1.0f) {
      ++clamped;
      v = std::clamp(v, 0.0f, 1.0f);
    }
    s[i] = to_u16(v);
  }
  if (clamped) warn(std::to_string(clamped) + " pixel(s) outside [0,1] clamped while writing " + path.string());
  detail::write_bytes_atomic(path, detail::encode_png16(s, img.height, img.width));
  return clamped;
}

inline Image decode_image(const std::vector<unsigned char>& bytes, const std::string& source = "PNG") {
  Image img;
  const auto s = detail::decode_png16(bytes, img.height, img.width, source);
  img.pixels.resize(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) img.pixels[i] = static_cast<float>(s[i] / 65535.0);
  return img;
}

inline Image read_image(const std::filesystem::path& path) {
  return decode_image(detail::read_bytes(path), path.string());
}

/// Label maps are stored with the raw label as the 16-bit sample.
inline void write_labels(const LabelMap& m, const std::filesystem::path& path) {
  detail::write_bytes_atomic(path, detail::encode_png16(m.labels, m.height, m.width));
}

inline LabelMap read_labels(const std::filesystem::path& path) {
  LabelMap m;
  m.labels = detail::decode_png16(detail::read_bytes(path), m.height, m.width, path.string());
  return m;
}

}  // namespace mixlat

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "causalfs/tensor.hpp"

// Binary PPM/PGM image files; pixel values map linearly between [0,1] floats
// and 8-bit channel values.

namespace causalfs {

inline void write_ppm(const std::string& path, const FeatureMap<float>& img) {
  if (img.channels() != 3) throw std::invalid_argument("write_ppm: need 3 channels");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
  f << "P6\n" << img.w << ' ' << img.h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(img.w) * 3);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = img.at(c, y, x);
        v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
        row[static_cast<std::size_t>(x) * 3 + c] =
            static_cast<unsigned char>(v * 255.0f + 0.5f);
      }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw std::runtime_error("write_ppm: write failed for " + path);
}

namespace detail {
inline void skip_ppm_space(std::istream& is) {
  for (;;) {
    int ch = is.peek();
    if (ch == '#') {
      std::string line;
      std::getline(is, line);
    } else if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r') {
      is.get();
    } else {
      return;
    }
  }
}
inline int read_ppm_int(std::istream& is) {
  skip_ppm_space(is);
  int v = -1;
  is >> v;
  if (!is || v < 0) throw std::runtime_error("ppm: malformed header field");
  return v;
}
}  // namespace detail

// Reads P6 (binary) and P3 (ascii) files.
inline FeatureMap<float> read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6" && magic != "P3")
    throw std::runtime_error("read_ppm: " + path + " is not a P6/P3 file");
  const int w = detail::read_ppm_int(f);
  const int h = detail::read_ppm_int(f);
  const int maxval = detail::read_ppm_int(f);
  if (w < 1 || h < 1 || maxval < 1 || maxval > 255)
    throw std::runtime_error("read_ppm: unsupported header in " + path);
  FeatureMap<float> img = FeatureMap<float>::zeros(3, h, w);
  const float scale = 1.0f / static_cast<float>(maxval);
  if (magic == "P6") {
    f.get();  // single whitespace byte after maxval
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("read_ppm: truncated pixel data in " + path);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c)
          img.at(c, y, x) = buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] * scale;
  } else {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = detail::read_ppm_int(f) * scale;
  }
  return img;
}

inline void write_pgm(const std::string& path, const MatrixX<float>& gray, int h, int w) {
  if (gray.rows() != 1 || gray.cols() != Eigen::Index(h) * w)
    throw std::invalid_argument("write_pgm: expected a 1 x (h*w) matrix");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_pgm: cannot open " + path);
  f << "P5\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> buf(static_cast<std::size_t>(h) * w);
  for (Eigen::Index j = 0; j < gray.cols(); ++j) {
    float v = gray(0, j);
    v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
    buf[static_cast<std::size_t>(j)] = static_cast<unsigned char>(v * 255.0f + 0.5f);
  }
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("write_pgm: write failed for " + path);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return s;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << content;
  if (!f) throw std::runtime_error("write failed for " + path);
}

// FNV-1a, for content fingerprints.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace causalfs

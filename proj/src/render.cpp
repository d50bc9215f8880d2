#include "thoraxdiff/render.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "thoraxdiff/error.hpp"

namespace thoraxdiff {

namespace {

void put_u32(std::string& s, std::uint32_t v) {
  s.push_back(static_cast<char>(v >> 24));
  s.push_back(static_cast<char>(v >> 16));
  s.push_back(static_cast<char>(v >> 8));
  s.push_back(static_cast<char>(v));
}

void chunk(std::string& png, const char* type, const std::string& data) {
  put_u32(png, static_cast<std::uint32_t>(data.size()));
  const std::string body = std::string(type, 4) + data;
  png += body;
  put_u32(png, static_cast<std::uint32_t>(
                   crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

}  // namespace

std::string encode_png(const GrayImage& img) {
  require(img.width > 0 && img.height > 0, ErrorKind::Dimension, "png: empty image");
  require(img.pixels.size() == static_cast<std::size_t>(img.width) * img.height, ErrorKind::Dimension,
          "png: pixel count does not match the image size");
  std::string raw;
  raw.reserve(static_cast<std::size_t>(img.width + 1) * img.height);
  for (int y = 0; y < img.height; ++y) {
    raw.push_back('\0');  // filter: none
    raw.append(reinterpret_cast<const char*>(img.pixels.data()) + static_cast<std::size_t>(y) * img.width,
               static_cast<std::size_t>(img.width));
  }
  uLongf len = compressBound(static_cast<uLong>(raw.size()));
  std::string z(len, '\0');
  const int rc = compress2(reinterpret_cast<Bytef*>(z.data()), &len,
                           reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()), 6);
  require(rc == Z_OK, ErrorKind::Io, "png: deflate failed");
  z.resize(len);

  std::string png("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(img.width));
  put_u32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr += std::string("\x08\x00\x00\x00\x00", 5);  // 8-bit gray, deflate, no filter, no interlace
  chunk(png, "IHDR", ihdr);
  chunk(png, "IDAT", z);
  chunk(png, "IEND", "");
  return png;
}

std::uint8_t to_gray(float v) noexcept {
  const double c = std::clamp(static_cast<double>(v), -1.0, 1.0);
  return static_cast<std::uint8_t>(std::lround((c + 1.0) * 127.5));
}

std::vector<int> slice_positions(int n, int count) {
  require(count >= 1, ErrorKind::Config, "montage: need at least one slice");
  require(count <= n, ErrorKind::Config,
          "montage: grid asks for " + std::to_string(count) + " slices but the axis has " +
              std::to_string(n));
  std::vector<int> pos(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    pos[static_cast<std::size_t>(i)] = static_cast<int>((2L * i + 1) * n / (2L * count));
  return pos;
}

GrayImage montage(const Volume& vol, int axis, int rows, int cols) {
  require(axis >= 0 && axis <= 2, ErrorKind::Config, "montage: axis must be z, y or x");
  require(rows >= 1 && cols >= 1, ErrorKind::Config, "montage: grid must be at least 1x1");
  const Shape3 s = vol.shape();
  const int dims[3] = {s.d, s.h, s.w};
  // Slice plane extents: the two remaining axes in (z, y, x) order.
  const int ph = axis == 0 ? s.h : s.d;
  const int pw = axis == 2 ? s.h : s.w;
  const std::vector<int> pos = slice_positions(dims[axis], rows * cols);

  GrayImage img;
  img.width = pw * cols;
  img.height = ph * rows;
  img.pixels.assign(static_cast<std::size_t>(img.width) * img.height, 0);
  for (int tile = 0; tile < rows * cols; ++tile) {
    const int k = pos[static_cast<std::size_t>(tile)];
    const int oy = (tile / cols) * ph, ox = (tile % cols) * pw;
    for (int r = 0; r < ph; ++r)
      for (int c = 0; c < pw; ++c) {
        float v;
        if (axis == 0) v = vol.values(k, r, c);
        else if (axis == 1) v = vol.values(r, k, c);
        else v = vol.values(r, c, k);
        img.pixels[static_cast<std::size_t>(oy + r) * img.width + ox + c] = to_gray(v);
      }
  }
  return img;
}

std::string scatter_svg(const std::vector<ScatterSeries>& series, int size_px) {
  static const char* colors[] = {"#d62728", "#1f77b4", "#2ca02c", "#9467bd",
                                 "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};
  double lo_x = INFINITY, hi_x = -INFINITY, lo_y = INFINITY, hi_y = -INFINITY;
  const auto grow = [&](double x, double y) {
    lo_x = std::min(lo_x, x), hi_x = std::max(hi_x, x);
    lo_y = std::min(lo_y, y), hi_y = std::max(hi_y, y);
  };
  for (const auto& s : series) {
    for (Eigen::Index i = 0; i < s.points.rows(); ++i) grow(s.points(i, 0), s.points(i, 1));
    if (s.ellipse) {
      const Ellipse& e = *s.ellipse;
      const double r = std::max(e.a, e.b);
      grow(e.center.x() - r, e.center.y() - r);
      grow(e.center.x() + r, e.center.y() + r);
    }
  }
  if (!std::isfinite(lo_x)) lo_x = lo_y = -1, hi_x = hi_y = 1;
  const double span = std::max({hi_x - lo_x, hi_y - lo_y, 1e-12}) * 1.1;
  const double cx = 0.5 * (lo_x + hi_x), cy = 0.5 * (lo_y + hi_y);
  const double margin = 40.0, scale = (size_px - 2 * margin) / span;
  const auto px = [&](double x) { return size_px / 2.0 + (x - cx) * scale; };
  const auto py = [&](double y) { return size_px / 2.0 - (y - cy) * scale; };

  std::string out;
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" viewBox=\"0 0 %d %d\">\n"
                "<rect width=\"100%%\" height=\"100%%\" fill=\"white\"/>\n",
                size_px, size_px, size_px, size_px);
  out += buf;
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* col = colors[k % 8];
    for (Eigen::Index i = 0; i < s.points.rows(); ++i) {
      std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"%s\"/>\n",
                    px(s.points(i, 0)), py(s.points(i, 1)), col);
      out += buf;
    }
    if (s.ellipse) {
      const Ellipse& e = *s.ellipse;
      // y is flipped on screen, so the rotation flips sign too.
      std::snprintf(buf, sizeof buf,
                    "<ellipse cx=\"%.2f\" cy=\"%.2f\" rx=\"%.2f\" ry=\"%.2f\" "
                    "transform=\"rotate(%.3f %.2f %.2f)\" fill=\"none\" stroke=\"%s\" stroke-width=\"2\"/>\n",
                    px(e.center.x()), py(e.center.y()), e.a * scale, e.b * scale,
                    -e.angle * 180.0 / std::numbers::pi, px(e.center.x()), py(e.center.y()), col);
      out += buf;
    }
    std::snprintf(buf, sizeof buf,
                  "<text x=\"12\" y=\"%d\" font-family=\"sans-serif\" font-size=\"14\" fill=\"%s\">%s</text>\n",
                  20 + 18 * static_cast<int>(k), col, s.name.c_str());
    out += buf;
  }
  out += "</svg>\n";
  return out;
}

}  // namespace thoraxdiff

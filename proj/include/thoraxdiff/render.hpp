#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "thoraxdiff/metrics.hpp"
#include "thoraxdiff/volume.hpp"

namespace thoraxdiff {

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

// 8-bit grayscale PNG, no interlacing, fixed compression level, so equal
// images always encode to equal bytes.
std::string encode_png(const GrayImage& img);

// [-1, 1] -> [0, 255], clamped and rounded.
std::uint8_t to_gray(float v) noexcept;

// Slice indices spread evenly through n slices; one slice picks the middle.
std::vector<int> slice_positions(int n, int count);

// rows x cols tile of evenly spaced slices perpendicular to `axis` (0 = z, 1 = y, 2 = x).
GrayImage montage(const Volume& vol, int axis, int rows, int cols);

struct ScatterSeries {
  std::string name;
  Eigen::MatrixXd points;  // n x 2
  std::optional<Ellipse> ellipse;
};

// Scatter plot of 2-D embeddings with their fitted ellipses.
std::string scatter_svg(const std::vector<ScatterSeries>& series, int size_px = 640);

}  // namespace thoraxdiff

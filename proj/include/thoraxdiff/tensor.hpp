#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "thoraxdiff/grid.hpp"

namespace thoraxdiff {

// Multi-channel 3D feature grid, channel-last: element (z, y, x, c) lives at
// ((z*H + y)*W + x)*C + c. A single-channel tensor has the same memory
// layout as a Grid3.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(int channels, Shape3 shape, T fill = T{})
      : channels_(channels), shape_(shape), data_(shape.size() * channels, fill) {}

  int channels() const noexcept { return channels_; }
  const Shape3& shape() const noexcept { return shape_; }
  std::size_t voxels() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  T* voxel(std::size_t v) noexcept { return data_.data() + v * channels_; }
  const T* voxel(std::size_t v) const noexcept { return data_.data() + v * channels_; }
  T& at(int z, int y, int x, int c) noexcept {
    return data_[((static_cast<std::size_t>(z) * shape_.h + y) * shape_.w + x) * channels_ + c];
  }
  const T& at(int z, int y, int x, int c) const noexcept {
    return data_[((static_cast<std::size_t>(z) * shape_.h + y) * shape_.w + x) * channels_ + c];
  }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  bool same_layout(const Tensor& o) const noexcept {
    return channels_ == o.channels_ && shape_ == o.shape_;
  }
  std::string describe() const { return std::to_string(channels_) + "x" + shape_.str(); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  int channels_ = 0;
  Shape3 shape_{};
  std::vector<T> data_;
};

template <class T, class U>
Tensor<T> tensor_from_grid(const Grid3<U>& g) {
  Tensor<T> t(1, g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) t[i] = static_cast<T>(g[i]);
  return t;
}

template <class U, class T>
Grid3<U> grid_from_tensor(const Tensor<T>& t) {
  require(t.channels() == 1, ErrorKind::Dimension,
          "expected a single-channel tensor, got " + t.describe());
  Grid3<U> g(t.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<U>(t[i]);
  return g;
}

// Channel concatenation of a list of tensors sharing one spatial shape.
template <class T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> parts) {
  require(!parts.empty(), ErrorKind::Dimension, "concat_channels: no inputs");
  int total = 0;
  for (const auto* p : parts) {
    require(p->shape() == parts[0]->shape(), ErrorKind::Dimension,
            "concat_channels: spatial shape mismatch");
    total += p->channels();
  }
  Tensor<T> out(total, parts[0]->shape());
  const std::size_t n = out.voxels();
  for (std::size_t v = 0; v < n; ++v) {
    T* dst = out.voxel(v);
    for (const auto* p : parts) {
      const T* src = p->voxel(v);
      for (int c = 0; c < p->channels(); ++c) *dst++ = src[c];
    }
  }
  return out;
}

}  // namespace thoraxdiff

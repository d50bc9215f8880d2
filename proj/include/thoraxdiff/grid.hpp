#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "thoraxdiff/error.hpp"

namespace thoraxdiff {

// Grid extent (D, H, W). Storage is row-major with z (D) slowest.
struct Shape3 {
  int d = 0;
  int h = 0;
  int w = 0;

  std::size_t size() const noexcept {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) *
           static_cast<std::size_t>(w);
  }
  bool is_cube() const noexcept { return d == h && h == w; }
  friend bool operator==(const Shape3&, const Shape3&) = default;

  std::string str() const {
    return "[" + std::to_string(d) + "," + std::to_string(h) + "," + std::to_string(w) + "]";
  }
};

inline Shape3 cube(int side) noexcept { return {side, side, side}; }

template <class T>
class Grid3 {
 public:
  using value_type = T;

  Grid3() = default;
  explicit Grid3(Shape3 shape, T fill = T{}) : shape_(shape), data_(shape.size(), fill) {}
  Grid3(Shape3 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    require(data_.size() == shape_.size(), ErrorKind::Dimension,
            "grid data length does not match shape " + shape_.str());
  }

  const Shape3& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::size_t index(int z, int y, int x) const noexcept {
    return (static_cast<std::size_t>(z) * shape_.h + y) * shape_.w + x;
  }
  T& operator()(int z, int y, int x) noexcept { return data_[index(z, y, x)]; }
  const T& operator()(int z, int y, int x) const noexcept { return data_[index(z, y, x)]; }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  friend bool operator==(const Grid3&, const Grid3&) = default;

 private:
  Shape3 shape_{};
  std::vector<T> data_;
};

template <class A, class B>
void require_same_shape(const Grid3<A>& a, const Grid3<B>& b, const char* what) {
  require(a.shape() == b.shape(), ErrorKind::Dimension,
          std::string(what) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

}  // namespace thoraxdiff

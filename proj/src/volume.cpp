#include "thoraxdiff/volume.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace thoraxdiff {

const char* to_string(Conditioning c) noexcept {
  return c == Conditioning::LungAndNodule ? "lung+nodule" : "nodule";
}

Conditioning conditioning_from_string(const std::string& s) {
  if (s == "lung+nodule" || s == "lung_and_nodule") return Conditioning::LungAndNodule;
  if (s == "nodule" || s == "nodule_only") return Conditioning::NoduleOnly;
  fail(ErrorKind::Config, "unknown conditioning '" + s + "' (expected lung+nodule or nodule)");
}

int conditioning_channels(Conditioning c) noexcept {
  return c == Conditioning::LungAndNodule ? 2 : 1;
}

void validate_volume(const Volume& v) {
  const auto vals = v.values.values();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const float x = vals[i];
    if (!std::isfinite(x) || x < -1.0f - 1e-6f || x > 1.0f + 1e-6f) {
      fail(ErrorKind::Domain, "volume value " + std::to_string(x) + " at voxel " +
                                  std::to_string(i) + " outside [-1,1]");
    }
  }
}

void validate_layout(const SemanticLayout& layout) {
  const auto vals = layout.labels.values();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    if (vals[i] > kNodule) {
      fail(ErrorKind::Domain, "layout label " + std::to_string(vals[i]) + " at voxel " +
                                  std::to_string(i) + " outside {0,1,2}");
    }
  }
}

Volume normalize_intensity(const Grid3<float>& raw, double lo, double hi, Spacing spacing_mm) {
  require(lo < hi, ErrorKind::Config, "normalize_intensity: window requires lo < hi");
  Volume out{Grid3<float>(raw.shape()), spacing_mm};
  const double scale = 2.0 / (hi - lo);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const double v = std::clamp(static_cast<double>(raw[i]), lo, hi);
    out.values[i] = static_cast<float>(std::clamp((v - lo) * scale - 1.0, -1.0, 1.0));
  }
  return out;
}

MaskPair derive_masks(const SemanticLayout& layout) {
  validate_layout(layout);
  MaskPair m{Grid3<std::uint8_t>(layout.shape()), Grid3<std::uint8_t>(layout.shape())};
  for (std::size_t i = 0; i < layout.labels.size(); ++i) {
    const std::uint8_t lung = layout.labels[i] != kBackground ? 1 : 0;
    m.lung[i] = lung;
    m.extra[i] = static_cast<std::uint8_t>(1 - lung);
  }
  return m;
}

Tensor<float> layout_to_channels(const SemanticLayout& layout, Conditioning conditioning) {
  validate_layout(layout);
  const int nc = conditioning_channels(conditioning);
  Tensor<float> out(nc, layout.shape());
  for (std::size_t v = 0; v < layout.labels.size(); ++v) {
    const auto label = layout.labels[v];
    float* dst = out.voxel(v);
    if (conditioning == Conditioning::LungAndNodule) {
      dst[0] = label == kLung ? 1.0f : 0.0f;
      dst[1] = label == kNodule ? 1.0f : 0.0f;
    } else {
      dst[0] = label == kNodule ? 1.0f : 0.0f;
    }
  }
  return out;
}

namespace {

struct AxisMap {
  std::vector<int> i0;
  std::vector<int> i1;
  std::vector<double> frac;
  std::vector<int> nearest;
};

AxisMap axis_map(int src, int dst) {
  AxisMap m;
  m.i0.resize(dst);
  m.i1.resize(dst);
  m.frac.resize(dst);
  m.nearest.resize(dst);
  for (int i = 0; i < dst; ++i) {
    const double pos = static_cast<double>(i) * (src - 1) / (dst - 1);
    int lo = static_cast<int>(std::floor(pos));
    lo = std::clamp(lo, 0, src - 1);
    const int hi = std::min(lo + 1, src - 1);
    m.i0[i] = lo;
    m.i1[i] = hi;
    m.frac[i] = pos - lo;
    m.nearest[i] = std::clamp(static_cast<int>(std::lround(pos)), 0, src - 1);
  }
  return m;
}

void check_resample(const Shape3& s, int side) {
  require(side >= 2, ErrorKind::Config, "resample_cubic: target side must be >= 2");
  require(s.d >= 2 && s.h >= 2 && s.w >= 2, ErrorKind::Dimension,
          "resample_cubic: degenerate input shape " + s.str());
}

Spacing rescale(const Spacing& sp, const Shape3& s, int side) {
  return {sp[0] * (s.d - 1) / (side - 1), sp[1] * (s.h - 1) / (side - 1),
          sp[2] * (s.w - 1) / (side - 1)};
}

}  // namespace

Volume resample_cubic(const Volume& vol, int side) {
  const Shape3 s = vol.shape();
  check_resample(s, side);
  const AxisMap mz = axis_map(s.d, side), my = axis_map(s.h, side), mx = axis_map(s.w, side);
  Volume out{Grid3<float>(cube(side)), rescale(vol.spacing_mm, s, side)};
  const auto& src = vol.values;
  for (int z = 0; z < side; ++z) {
    const double fz = mz.frac[z];
    for (int y = 0; y < side; ++y) {
      const double fy = my.frac[y];
      for (int x = 0; x < side; ++x) {
        const double fx = mx.frac[x];
        const auto at = [&](int zz, int yy, int xx) { return static_cast<double>(src(zz, yy, xx)); };
        const int z0 = mz.i0[z], z1 = mz.i1[z], y0 = my.i0[y], y1 = my.i1[y], x0 = mx.i0[x],
                  x1 = mx.i1[x];
        const double c00 = at(z0, y0, x0) * (1 - fx) + at(z0, y0, x1) * fx;
        const double c01 = at(z0, y1, x0) * (1 - fx) + at(z0, y1, x1) * fx;
        const double c10 = at(z1, y0, x0) * (1 - fx) + at(z1, y0, x1) * fx;
        const double c11 = at(z1, y1, x0) * (1 - fx) + at(z1, y1, x1) * fx;
        const double c0 = c00 * (1 - fy) + c01 * fy;
        const double c1 = c10 * (1 - fy) + c11 * fy;
        out.values(z, y, x) = static_cast<float>(c0 * (1 - fz) + c1 * fz);
      }
    }
  }
  return out;
}

SemanticLayout resample_cubic(const SemanticLayout& layout, int side) {
  const Shape3 s = layout.shape();
  check_resample(s, side);
  const AxisMap mz = axis_map(s.d, side), my = axis_map(s.h, side), mx = axis_map(s.w, side);
  SemanticLayout out{Grid3<std::uint8_t>(cube(side)), rescale(layout.spacing_mm, s, side)};
  for (int z = 0; z < side; ++z)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x)
        out.labels(z, y, x) = layout.labels(mz.nearest[z], my.nearest[y], mx.nearest[x]);
  return out;
}

}  // namespace thoraxdiff

#pragma once

#include <array>
#include <cstdint>

#include "thoraxdiff/grid.hpp"
#include "thoraxdiff/tensor.hpp"

namespace thoraxdiff {

using Spacing = std::array<double, 3>;  // (z, y, x) voxel size in mm

// Intensity volume normalized to [-1, 1].
struct Volume {
  Grid3<float> values;
  Spacing spacing_mm{1.0, 1.0, 1.0};

  const Shape3& shape() const noexcept { return values.shape(); }
  friend bool operator==(const Volume&, const Volume&) = default;
};

enum Label : std::uint8_t { kBackground = 0, kLung = 1, kNodule = 2 };

struct SemanticLayout {
  Grid3<std::uint8_t> labels;
  Spacing spacing_mm{1.0, 1.0, 1.0};

  const Shape3& shape() const noexcept { return labels.shape(); }
  friend bool operator==(const SemanticLayout&, const SemanticLayout&) = default;
};

// lung = 1 on lung or nodule voxels; extra = 1 - lung.
struct MaskPair {
  Grid3<std::uint8_t> lung;
  Grid3<std::uint8_t> extra;
};

enum class Conditioning { LungAndNodule, NoduleOnly };

const char* to_string(Conditioning c) noexcept;
Conditioning conditioning_from_string(const std::string& s);
int conditioning_channels(Conditioning c) noexcept;

// Throws Domain if any value is non-finite or outside [-1-1e-6, 1+1e-6].
void validate_volume(const Volume& v);
// Throws Domain on labels outside {0, 1, 2}.
void validate_layout(const SemanticLayout& layout);

// Clip to [lo, hi] then map affinely onto [-1, 1].
Volume normalize_intensity(const Grid3<float>& raw, double lo, double hi,
                           Spacing spacing_mm = {1.0, 1.0, 1.0});

MaskPair derive_masks(const SemanticLayout& layout);

// LungAndNodule -> channels [label == 1, label == 2]; NoduleOnly -> [label == 2].
Tensor<float> layout_to_channels(const SemanticLayout& layout, Conditioning conditioning);

// Trilinear (volumes) / nearest-neighbor (layouts) resampling onto a cube
// of the given side. Voxel centers of the first and last sample are aligned
// with the source corners, so spacing scales by (n_src - 1)/(side - 1).
Volume resample_cubic(const Volume& vol, int side);
SemanticLayout resample_cubic(const SemanticLayout& layout, int side);

}  // namespace thoraxdiff

#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "thoraxdiff/volume.hpp"

namespace thoraxdiff {

struct PhantomConfig {
  int resolution = 32;
  double spacing_mm = 10.0;
  // Radii are fractions of the grid side; each is jittered by up to +/- jitter.
  std::array<double, 3> body_radii{0.44, 0.36, 0.46};
  std::array<double, 3> lung_radii{0.30, 0.22, 0.15};
  double lung_offset = 0.20;  // lung center distance from the midline (x)
  double jitter = 0.1;        // relative
  int min_nodules = 1;
  int max_nodules = 3;
  double nodule_radius_min = 0.05;  // fraction of side
  double nodule_radius_max = 0.09;
  float background_intensity = -1.0f;
  float body_intensity = 0.1f;
  float lung_intensity = -0.8f;
  float nodule_intensity = 0.35f;
  float noise_amplitude = 0.02f;
};

// Axis-aligned ellipsoid in voxel coordinates (z, y, x).
struct Ellipsoid {
  std::array<double, 3> center{};
  std::array<double, 3> radii{};

  double level(double z, double y, double x) const noexcept;  // < 1 inside
  bool contains(double z, double y, double x) const noexcept { return level(z, y, x) < 1.0; }
};

struct PhantomGeometry {
  Ellipsoid body;
  std::array<Ellipsoid, 2> lungs;
  std::vector<Ellipsoid> nodules;   // spheres (equal radii)
  std::vector<int> nodule_lung;     // index of the lung hosting each nodule
};

struct Phantom {
  Volume volume;
  SemanticLayout layout;
  PhantomGeometry geometry;
};

// Deterministic procedural thorax: body ellipsoid on air, two lungs inside
// the body, 1-3 nodules strictly inside the lungs, plus seeded texture noise.
Phantom generate_phantom(std::uint64_t seed, const PhantomConfig& cfg = {});

// Seed of the index-th phantom in a set generated from one base seed.
std::uint64_t phantom_seed(std::uint64_t base, std::uint32_t index) noexcept;

}  // namespace thoraxdiff

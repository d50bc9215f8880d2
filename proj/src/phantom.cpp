#include "thoraxdiff/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "thoraxdiff/rng.hpp"

namespace thoraxdiff {

double Ellipsoid::level(double z, double y, double x) const noexcept {
  const double dz = (z - center[0]) / radii[0];
  const double dy = (y - center[1]) / radii[1];
  const double dx = (x - center[2]) / radii[2];
  return dz * dz + dy * dy + dx * dx;
}

namespace {

bool ellipsoid_inside(const Ellipsoid& inner, const Ellipsoid& outer) {
  constexpr int kRings = 24;
  constexpr int kSegments = 48;
  for (int i = 0; i <= kRings; ++i) {
    const double theta = std::numbers::pi * i / kRings;
    for (int j = 0; j < kSegments; ++j) {
      const double phi = 2.0 * std::numbers::pi * j / kSegments;
      const double z = inner.center[0] + inner.radii[0] * std::cos(theta);
      const double y = inner.center[1] + inner.radii[1] * std::sin(theta) * std::sin(phi);
      const double x = inner.center[2] + inner.radii[2] * std::sin(theta) * std::cos(phi);
      if (!outer.contains(z, y, x)) return false;
    }
  }
  return true;
}

void validate_config(const PhantomConfig& cfg) {
  require(cfg.resolution >= 16, ErrorKind::Config, "phantom: resolution must be >= 16");
  require(cfg.min_nodules >= 1 && cfg.max_nodules >= cfg.min_nodules, ErrorKind::Config,
          "phantom: nodule count range must satisfy 1 <= min <= max");
  require(cfg.nodule_radius_min > 0 && cfg.nodule_radius_max >= cfg.nodule_radius_min,
          ErrorKind::Config, "phantom: invalid nodule radius range");
  require(cfg.jitter >= 0 && cfg.jitter < 1, ErrorKind::Config, "phantom: jitter must lie in [0,1)");
  require(cfg.noise_amplitude >= 0, ErrorKind::Config, "phantom: noise_amplitude must be >= 0");
  for (float v : {cfg.background_intensity, cfg.body_intensity, cfg.lung_intensity,
                  cfg.nodule_intensity}) {
    require(v >= -1.0f && v <= 1.0f, ErrorKind::Config, "phantom: intensities must lie in [-1,1]");
  }
}

}  // namespace

Phantom generate_phantom(std::uint64_t seed, const PhantomConfig& cfg) {
  validate_config(cfg);
  const int n = cfg.resolution;
  const double mid = (n - 1) / 2.0;
  Stream geo(StreamKey{seed, 0, 0, Purpose::Phantom});
  const auto jit = [&] { return 1.0 + cfg.jitter * (2.0 * geo.uniform() - 1.0); };

  PhantomGeometry g;
  g.body.center = {mid, mid, mid};
  for (int a = 0; a < 3; ++a) g.body.radii[a] = cfg.body_radii[a] * n * jit();

  const double dz = 0.03 * n * (2.0 * geo.uniform() - 1.0);
  for (int side = 0; side < 2; ++side) {
    auto& lung = g.lungs[side];
    const double offset = cfg.lung_offset * n * jit();
    lung.center = {mid + dz, mid, side == 0 ? mid - offset : mid + offset};
    for (int a = 0; a < 3; ++a) lung.radii[a] = cfg.lung_radii[a] * n * jit();
    if (!ellipsoid_inside(lung, g.body)) {
      fail(ErrorKind::Config, "phantom: lung ellipsoid does not fit inside the body");
    }
  }

  SemanticLayout layout{Grid3<std::uint8_t>(cube(n)), {cfg.spacing_mm, cfg.spacing_mm, cfg.spacing_mm}};
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        if (g.lungs[0].contains(z, y, x) || g.lungs[1].contains(z, y, x)) layout.labels(z, y, x) = kLung;

  const auto nodule_count = static_cast<int>(geo.uniform_int(cfg.min_nodules, cfg.max_nodules));
  for (int k = 0; k < nodule_count; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const int host = static_cast<int>(geo.uniform_int(0, 1));
      const auto& lung = g.lungs[host];
      const double r = std::max(
          1.0, n * (cfg.nodule_radius_min +
                    (cfg.nodule_radius_max - cfg.nodule_radius_min) * geo.uniform()));
      // Candidate center uniformly inside the inner 60% of the lung.
      std::array<double, 3> u{};
      do {
        for (auto& c : u) c = 2.0 * geo.uniform() - 1.0;
      } while (u[0] * u[0] + u[1] * u[1] + u[2] * u[2] >= 1.0);
      Ellipsoid sphere;
      for (int a = 0; a < 3; ++a) {
        sphere.center[a] = lung.center[a] + 0.6 * lung.radii[a] * u[a];
        sphere.radii[a] = r;
      }
      if (!ellipsoid_inside(sphere, lung)) continue;
      // Every voxel the sphere claims must sit inside the host lung, and the
      // sphere must claim at least one voxel.
      int claimed = 0;
      bool ok = true;
      const int z0 = std::max(0, static_cast<int>(std::floor(sphere.center[0] - r)));
      const int z1 = std::min(n - 1, static_cast<int>(std::ceil(sphere.center[0] + r)));
      const int y0 = std::max(0, static_cast<int>(std::floor(sphere.center[1] - r)));
      const int y1 = std::min(n - 1, static_cast<int>(std::ceil(sphere.center[1] + r)));
      const int x0 = std::max(0, static_cast<int>(std::floor(sphere.center[2] - r)));
      const int x1 = std::min(n - 1, static_cast<int>(std::ceil(sphere.center[2] + r)));
      for (int z = z0; z <= z1 && ok; ++z)
        for (int y = y0; y <= y1 && ok; ++y)
          for (int x = x0; x <= x1; ++x)
            if (sphere.contains(z, y, x)) {
              ++claimed;
              if (!lung.contains(z, y, x)) {
                ok = false;
                break;
              }
            }
      if (!ok || claimed == 0) continue;
      for (int z = z0; z <= z1; ++z)
        for (int y = y0; y <= y1; ++y)
          for (int x = x0; x <= x1; ++x)
            if (sphere.contains(z, y, x)) layout.labels(z, y, x) = kNodule;
      g.nodules.push_back(sphere);
      g.nodule_lung.push_back(host);
      placed = true;
    }
    if (!placed) fail(ErrorKind::Config, "phantom: could not place a nodule inside the lungs");
  }

  Volume volume{Grid3<float>(cube(n)), layout.spacing_mm};
  Stream texture(StreamKey{seed, 1, 0, Purpose::Phantom});
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        float base = cfg.background_intensity;
        switch (layout.labels(z, y, x)) {
          case kNodule: base = cfg.nodule_intensity; break;
          case kLung: base = cfg.lung_intensity; break;
          default:
            if (g.body.contains(z, y, x)) base = cfg.body_intensity;
        }
        const double noisy = base + cfg.noise_amplitude * texture.normal();
        volume.values(z, y, x) = static_cast<float>(std::clamp(noisy, -1.0, 1.0));
      }

  return Phantom{std::move(volume), std::move(layout), std::move(g)};
}

std::uint64_t phantom_seed(std::uint64_t base, std::uint32_t index) noexcept {
  Stream s(StreamKey{base, index, 1, Purpose::Phantom});
  const std::uint64_t hi = s.next_u32();
  return (hi << 32) | s.next_u32();
}

}  // namespace thoraxdiff

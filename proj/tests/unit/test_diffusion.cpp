#include <cmath>

#include "doctest.h"
#include "thoraxdiff/diffusion.hpp"
#include "thoraxdiff/error.hpp"
#include "thoraxdiff/phantom.hpp"
#include "thoraxdiff/rng.hpp"

using namespace thoraxdiff;

namespace {

Grid3<float> normal_grid(Shape3 shape, std::uint64_t seed) {
  Grid3<float> g(shape);
  Stream({seed, 0, 0, Purpose::Test}).fill_normal(g.values());
  return g;
}

// Knows x0 and returns the exact noise that produced x_t from it.
class OraclePredictor : public NoisePredictor {
 public:
  OraclePredictor(Grid3<float> x0, const NoiseSchedule& s, int in_channels)
      : x0_(std::move(x0)), s_(s), in_(in_channels) {}
  int in_channels() const override { return in_; }
  Tensor<float> predict_noise(const Tensor<float>& cond, int t) const override {
    const double ab = s_.alpha_bar(t);
    Tensor<float> out(1, cond.shape());
    for (std::size_t v = 0; v < cond.voxels(); ++v)
      out[v] = static_cast<float>((cond.voxel(v)[0] - std::sqrt(ab) * x0_[v]) / std::sqrt(1.0 - ab));
    return out;
  }

 private:
  Grid3<float> x0_;
  const NoiseSchedule& s_;
  int in_;
};

class ConstantPredictor : public NoisePredictor {
 public:
  explicit ConstantPredictor(float v, int in = 3) : v_(v), in_(in) {}
  int in_channels() const override { return in_; }
  Tensor<float> predict_noise(const Tensor<float>& cond, int) const override {
    return Tensor<float>(1, cond.shape(), v_);
  }

 private:
  float v_;
  int in_;
};

DenoiserConfig tiny_config() {
  DenoiserConfig c;
  c.resolution = 8;
  c.base_width = 4;
  c.channel_multipliers = {1};
  c.attention_levels = {0};
  c.time_embed_dim = 8;
  c.groups = 2;
  return c;
}

Phantom small_phantom(std::uint64_t seed) {
  Phantom p = generate_phantom(seed);
  p.volume = resample_cubic(p.volume, 8);
  p.layout = resample_cubic(p.layout, 8);
  return p;
}

SamplerConfig sampler(SamplerMode mode, std::uint64_t seed = 5) {
  SamplerConfig c;
  c.mode = mode;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("forward_diffuse scalar probe") {
  const NoiseSchedule s = build_linear_schedule(1, 0.36, 0.36);
  const LatentVolume x = forward_diffuse(Grid3<float>(cube(1), 0.5f), 1, Grid3<float>(cube(1), 1.0f), s);
  CHECK(x.t == 1);
  CHECK(std::abs(x.values[0] - 1.0f) <= 1e-6f);
}

TEST_CASE("forward_diffuse at t=0 is the identity") {
  const NoiseSchedule s = build_cosine_schedule(20);
  const Grid3<float> x0 = normal_grid(cube(5), 1), eps = normal_grid(cube(5), 2);
  CHECK(forward_diffuse(x0, 0, eps, s).values == x0);
  CHECK_THROWS_AS(forward_diffuse(x0, 0, normal_grid(cube(4), 2), s), Error);
  CHECK_THROWS_AS(forward_diffuse(x0, 21, eps, s), Error);
}

TEST_CASE("forward_diffuse at t=T is almost pure noise") {
  const NoiseSchedule s = build_cosine_schedule(250);
  const Phantom p = generate_phantom(3);
  const Grid3<float> eps = normal_grid(p.volume.shape(), 4);
  const LatentVolume x = forward_diffuse(p.volume.values, 250, eps, s);
  double sxy = 0, sxx = 0, syy = 0, mx = 0, my = 0;
  const double n = static_cast<double>(eps.size());
  for (std::size_t i = 0; i < eps.size(); ++i) {
    mx += x.values[i];
    my += eps[i];
  }
  mx /= n;
  my /= n;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    sxy += (x.values[i] - mx) * (eps[i] - my);
    sxx += (x.values[i] - mx) * (x.values[i] - mx);
    syy += (eps[i] - my) * (eps[i] - my);
  }
  CHECK(sxy / std::sqrt(sxx * syy) > 0.999);
}

TEST_CASE("forward_diffuse marginal moments") {
  const NoiseSchedule s = build_cosine_schedule(50);
  const Grid3<float> x0(cube(40), 0.3f);
  for (int t : {1, 10, 25, 50}) {
    const LatentVolume x = forward_diffuse(x0, t, normal_grid(cube(40), 100 + t), s);
    double m = 0, v = 0;
    for (float f : x.values.values()) m += f;
    m /= static_cast<double>(x.values.size());
    for (float f : x.values.values()) v += (f - m) * (f - m);
    v /= static_cast<double>(x.values.size() - 1);
    const double ab = s.alpha_bar(t);
    CHECK(std::abs(m - std::sqrt(ab) * 0.3) <= 0.01);
    CHECK(std::abs(v / (1.0 - ab) - 1.0) <= 0.05);
  }
}

TEST_CASE("build_condition puts the latent first") {
  const Phantom p = small_phantom(1);
  const Tensor<float> ch = layout_to_channels(p.layout, Conditioning::LungAndNodule);
  const Grid3<float> lat = normal_grid(cube(8), 7);
  const Tensor<float> c = build_condition(lat, ch);
  REQUIRE(c.channels() == 3);
  for (std::size_t v = 0; v < c.voxels(); ++v) {
    CHECK(c.voxel(v)[0] == lat[v]);
    CHECK(c.voxel(v)[1] == ch.voxel(v)[0]);
    CHECK(c.voxel(v)[2] == ch.voxel(v)[1]);
  }
  CHECK_THROWS_AS(build_condition(normal_grid(cube(4), 7), ch), Error);
}

TEST_CASE("single-step inversion with the true noise") {
  const NoiseSchedule s = build_cosine_schedule(1);
  const Phantom p = small_phantom(2);
  const Grid3<float> eps = normal_grid(cube(8), 3);
  const LatentVolume x1 = forward_diffuse(p.volume.values, 1, eps, s);
  const OraclePredictor oracle(p.volume.values, s, 3);
  const Tensor<float> ch = layout_to_channels(p.layout, Conditioning::LungAndNodule);
  const LatentVolume x0 = denoise_step_lung(x1, ch, oracle, s, Grid3<float>(cube(8), 0.0f));
  CHECK(x0.t == 0);
  for (std::size_t i = 0; i < eps.size(); ++i) CHECK(std::abs(x0.values[i] - p.volume.values[i]) <= 1e-5f);
}

TEST_CASE("zero noise estimate rescales by 1/sqrt(alpha)") {
  const NoiseSchedule s = build_cosine_schedule(10);
  const Tensor<float> ch(2, cube(4), 0.0f);
  const LatentVolume x{normal_grid(cube(4), 9), 6};
  const LatentVolume y = denoise_step_lung(x, ch, ConstantPredictor(0.0f), s, Grid3<float>(cube(4), 0.0f));
  CHECK(y.t == 5);
  for (std::size_t i = 0; i < y.values.size(); ++i)
    CHECK(std::abs(y.values[i] - x.values[i] / std::sqrt(s.alpha(6))) <= 1e-6f);

  // With eps_theta = 0, the added noise enters scaled by sigma_t.
  const Grid3<float> z = normal_grid(cube(4), 10);
  const LatentVolume w = denoise_step_lung(x, ch, ConstantPredictor(0.0f), s, z);
  for (std::size_t i = 0; i < w.values.size(); ++i)
    CHECK(std::abs(w.values[i] - (x.values[i] / std::sqrt(s.alpha(6)) + s.sigma(6) * z[i])) <= 1e-5f);
}

TEST_CASE("denoise_step_lung input checks") {
  const NoiseSchedule s = build_cosine_schedule(10);
  const Tensor<float> ch(2, cube(4), 0.0f);
  const Grid3<float> z(cube(4), 0.0f);
  try {
    denoise_step_lung(LatentVolume{Grid3<float>(cube(4)), 0}, ch, ConstantPredictor(0.0f), s, z);
    FAIL("expected a domain error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Domain);
  }
  CHECK_THROWS_AS(denoise_step_lung(LatentVolume{Grid3<float>(cube(4)), 11}, ch, ConstantPredictor(0.0f), s, z),
                  Error);
  CHECK_THROWS_AS(denoise_step_lung(LatentVolume{Grid3<float>(cube(4)), 3}, ch, ConstantPredictor(0.0f, 2), s, z),
                  Error);
  CHECK_THROWS_AS(denoise_step_lung(LatentVolume{Grid3<float>(cube(4)), 3}, ch, ConstantPredictor(0.0f), s,
                                    Grid3<float>(cube(3))),
                  Error);
}

TEST_CASE("aas_blend") {
  const LatentVolume a{normal_grid(cube(3), 1), 4}, b{normal_grid(cube(3), 2), 4};
  CHECK(aas_blend(a, b, Grid3<std::uint8_t>(cube(3), 0)).values == a.values);
  CHECK(aas_blend(a, b, Grid3<std::uint8_t>(cube(3), 1)).values == b.values);
  Grid3<std::uint8_t> m(cube(3), 0);
  for (std::size_t i = 0; i < m.size(); i += 2) m[i] = 1;
  const LatentVolume c = aas_blend(a, b, m);
  CHECK(c.t == 4);
  for (std::size_t i = 0; i < m.size(); ++i) CHECK(c.values[i] == (m[i] ? b.values[i] : a.values[i]));

  m[1] = 2;
  try {
    aas_blend(a, b, m);
    FAIL("expected a domain error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Domain);
  }
  try {
    aas_blend(a, LatentVolume{b.values, 3}, Grid3<std::uint8_t>(cube(3), 0));
    FAIL("expected a dimension error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Dimension);
  }
}

TEST_CASE("sampler noise helpers") {
  const Grid3<float> z1 = reverse_noise(cube(4), 1, 3, 0);
  for (float v : z1.values()) CHECK(v == 0.0f);
  const Grid3<float> z2 = reverse_noise(cube(4), 2, 3, 0);
  CHECK(z2 == reverse_noise(cube(4), 2, 3, 0));
  CHECK_FALSE(z2 == reverse_noise(cube(4), 2, 3, 1));
  CHECK_FALSE(z2 == reference_noise(cube(4), 2, 3, 0));
  CHECK_FALSE(initial_latent(cube(4), 3, 0) == initial_latent(cube(4), 4, 0));
}

TEST_CASE("aas with an all-extra mask returns the reference") {
  const NoiseSchedule s = build_cosine_schedule(6);
  Phantom p = small_phantom(4);
  const SemanticLayout empty{Grid3<std::uint8_t>(cube(8), kBackground)};
  const Volume out = aas_sample(ConstantPredictor(0.5f), p.volume, empty, s, sampler(SamplerMode::Aas));
  CHECK(out.values == p.volume.values);
  CHECK(out.spacing_mm == p.volume.spacing_mm);
}

TEST_CASE("aas keeps extra-pulmonary voxels exact under a random network") {
  const NoiseSchedule s = build_cosine_schedule(8);
  const auto net = Denoiser<float>::initialized(tiny_config(), 17, true);
  for (std::uint64_t seed : {6, 7}) {
    const Phantom p = small_phantom(seed);
    const MaskPair m = derive_masks(p.layout);
    const Volume out = aas_sample(net, p.volume, p.layout, s, sampler(SamplerMode::Aas, seed));
    std::size_t lung_changed = 0, lung = 0;
    for (std::size_t i = 0; i < m.extra.size(); ++i) {
      if (m.extra[i]) {
        CHECK(out.values[i] == p.volume.values[i]);
      } else {
        ++lung;
        lung_changed += out.values[i] != p.volume.values[i];
      }
      CHECK(out.values[i] >= -1.0f);
      CHECK(out.values[i] <= 1.0f);
    }
    REQUIRE(lung > 0);
    CHECK(lung_changed > 0);
  }
}

TEST_CASE("oracle noise reconstructs the target through a full chain") {
  const NoiseSchedule s = build_cosine_schedule(10);
  const Phantom p = small_phantom(8);
  const OraclePredictor oracle(p.volume.values, s, 3);
  const Volume plain = plain_sample(oracle, p.layout, s, sampler(SamplerMode::Plain));
  const Volume aas = aas_sample(oracle, p.volume, p.layout, s, sampler(SamplerMode::Aas));
  for (std::size_t i = 0; i < plain.values.size(); ++i) {
    CHECK(std::abs(plain.values[i] - p.volume.values[i]) <= 1e-3f);
    CHECK(std::abs(aas.values[i] - p.volume.values[i]) <= 1e-3f);
  }
}

TEST_CASE("sampling is deterministic in (seed, sample id)") {
  const NoiseSchedule s = build_cosine_schedule(5);
  const auto net = Denoiser<float>::initialized(tiny_config(), 3, true);
  const Phantom p = small_phantom(9);
  SamplerConfig c = sampler(SamplerMode::Plain, 11);
  const Volume a = plain_sample(net, p.layout, s, c), b = plain_sample(net, p.layout, s, c);
  CHECK(a.values == b.values);
  c.sample_id = 1;
  CHECK_FALSE(plain_sample(net, p.layout, s, c).values == a.values);
  c.mode = SamplerMode::Aas;
  CHECK(sample(net, &p.volume, p.layout, s, c).values == aas_sample(net, p.volume, p.layout, s, c).values);
  CHECK_THROWS_AS(plain_sample(net, p.layout, s, c), Error);
  CHECK_THROWS_AS(sample(net, nullptr, p.layout, s, c), Error);
}

TEST_CASE("nodule-only conditioning needs a two-channel model") {
  const NoiseSchedule s = build_cosine_schedule(3);
  const Phantom p = small_phantom(10);
  SamplerConfig c = sampler(SamplerMode::Plain);
  c.conditioning = Conditioning::NoduleOnly;
  CHECK_NOTHROW(plain_sample(ConstantPredictor(0.0f, 2), p.layout, s, c));
  CHECK_THROWS_AS(plain_sample(ConstantPredictor(0.0f, 3), p.layout, s, c), Error);
}

TEST_CASE("non-finite predictions abort with the step") {
  const NoiseSchedule s = build_cosine_schedule(4);
  const Phantom p = small_phantom(10);
  try {
    plain_sample(ConstantPredictor(std::numeric_limits<float>::infinity()), p.layout, s,
                 sampler(SamplerMode::Plain));
    FAIL("expected a numeric error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NumericHealth);
  }
}

TEST_CASE("sampler config JSON") {
  SamplerConfig c = sampler(SamplerMode::Plain, 99);
  c.sample_id = 4;
  c.use_ema_weights = false;
  const nlohmann::json j = c;
  const auto back = j.get<SamplerConfig>();
  CHECK(back.mode == c.mode);
  CHECK(back.seed == 99);
  CHECK(back.sample_id == 4);
  CHECK_FALSE(back.use_ema_weights);
  CHECK_THROWS_AS((nlohmann::json{{"mode", "aas"}, {"guidance", 1}}.get<SamplerConfig>()), Error);
  CHECK_THROWS_AS(sampler_mode_from_string("ddim"), Error);
}

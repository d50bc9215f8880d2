#include "thoraxdiff/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "thoraxdiff/error.hpp"
#include "thoraxdiff/rng.hpp"

namespace thoraxdiff {

const char* to_string(SamplerMode m) noexcept { return m == SamplerMode::Aas ? "aas" : "plain"; }

SamplerMode sampler_mode_from_string(const std::string& s) {
  if (s == "aas" || s == "AAS") return SamplerMode::Aas;
  if (s == "plain" || s == "PLAIN") return SamplerMode::Plain;
  fail(ErrorKind::Config, "unknown sampler mode '" + s + "' (expected aas or plain)");
}

void to_json(nlohmann::json& j, const SamplerConfig& c) {
  j = {{"mode", to_string(c.mode)},
       {"conditioning", to_string(c.conditioning)},
       {"use_ema_weights", c.use_ema_weights},
       {"seed", c.seed},
       {"sample_id", c.sample_id}};
}

void from_json(const nlohmann::json& j, SamplerConfig& c) {
  require(j.is_object(), ErrorKind::Config, "sampler config must be an object");
  for (const auto& [key, value] : j.items()) {
    if (key == "mode") c.mode = sampler_mode_from_string(value.get<std::string>());
    else if (key == "conditioning") c.conditioning = conditioning_from_string(value.get<std::string>());
    else if (key == "use_ema_weights") c.use_ema_weights = value.get<bool>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "sample_id") c.sample_id = value.get<std::uint32_t>();
    else fail(ErrorKind::Config, "sampler: unknown key '" + key + "'");
  }
}

namespace {

LatentVolume mix(const Grid3<float>& x, int t, const Grid3<float>& eps,
                 const NoiseSchedule& schedule, const char* what) {
  require_same_shape(x, eps, what);
  const double ab = schedule.alpha_bar(t);
  const double a = std::sqrt(ab);
  const double b = std::sqrt(1.0 - ab);
  LatentVolume out{Grid3<float>(x.shape()), t};
  for (std::size_t i = 0; i < x.size(); ++i)
    out.values[i] = static_cast<float>(a * x[i] + b * eps[i]);
  return out;
}

Grid3<float> normal_grid(Shape3 shape, StreamKey key) {
  Grid3<float> g(shape);
  Stream(key).fill_normal(g.values());
  return g;
}

void check_finite(const Grid3<float>& g, int t, const char* what) {
  for (float v : g.values())
    if (!std::isfinite(v)) throw NumericError(t, std::string(what) + ": non-finite latent");
}

void check_model(const NoisePredictor& denoiser, const Tensor<float>& channels) {
  require(denoiser.in_channels() == 1 + channels.channels(), ErrorKind::Dimension,
          "denoiser expects " + std::to_string(denoiser.in_channels()) +
              " input channels but the conditioning provides " +
              std::to_string(1 + channels.channels()));
}

}  // namespace

LatentVolume forward_diffuse(const Grid3<float>& x0, int t, const Grid3<float>& eps,
                             const NoiseSchedule& schedule) {
  return mix(x0, t, eps, schedule, "forward_diffuse");
}

LatentVolume reference_diffuse(const Grid3<float>& x_ref, int t_minus_1, const Grid3<float>& eps,
                               const NoiseSchedule& schedule) {
  return mix(x_ref, t_minus_1, eps, schedule, "reference_diffuse");
}

Tensor<float> build_condition(const Grid3<float>& latent, const Tensor<float>& layout_channels) {
  require(latent.shape() == layout_channels.shape(), ErrorKind::Dimension,
          "conditioning: latent " + latent.shape().str() + " vs layout " +
              layout_channels.shape().str());
  const int lc = layout_channels.channels();
  Tensor<float> out(1 + lc, latent.shape());
  for (std::size_t v = 0; v < latent.size(); ++v) {
    float* dst = out.voxel(v);
    dst[0] = latent[v];
    const float* src = layout_channels.voxel(v);
    for (int c = 0; c < lc; ++c) dst[1 + c] = src[c];
  }
  return out;
}

LatentVolume denoise_step_lung(const LatentVolume& x_t, const Tensor<float>& layout_channels,
                               const NoisePredictor& denoiser, const NoiseSchedule& schedule,
                               const Grid3<float>& z) {
  const int t = x_t.t;
  require(t >= 1, ErrorKind::Domain, "denoise step: step underflow (t = " + std::to_string(t) + ")");
  require(t <= schedule.steps(), ErrorKind::Domain,
          "denoise step: t = " + std::to_string(t) + " beyond schedule length");
  require_same_shape(x_t.values, z, "denoise step noise");
  check_model(denoiser, layout_channels);

  const Tensor<float> eps = denoiser.predict_noise(build_condition(x_t.values, layout_channels), t);
  require(eps.channels() == 1 && eps.shape() == x_t.values.shape(), ErrorKind::Dimension,
          "denoiser returned " + eps.describe() + " for a latent of shape " +
              x_t.values.shape().str());

  const double a = schedule.alpha(t);
  const double inv_sqrt_a = 1.0 / std::sqrt(a);
  const double coef = (1.0 - a) / std::sqrt(1.0 - schedule.alpha_bar(t));
  const double sigma = schedule.sigma(t);
  LatentVolume out{Grid3<float>(x_t.values.shape()), t - 1};
  for (std::size_t i = 0; i < z.size(); ++i)
    out.values[i] =
        static_cast<float>(inv_sqrt_a * (x_t.values[i] - coef * eps[i]) + sigma * z[i]);
  return out;
}

LatentVolume aas_blend(const LatentVolume& x_lung, const LatentVolume& x_extra,
                       const Grid3<std::uint8_t>& m_e) {
  require_same_shape(x_lung.values, x_extra.values, "aas_blend");
  require_same_shape(x_lung.values, m_e, "aas_blend mask");
  require(x_lung.t == x_extra.t, ErrorKind::Dimension,
          "aas_blend: latents at different steps (" + std::to_string(x_lung.t) + " vs " +
              std::to_string(x_extra.t) + ")");
  LatentVolume out{Grid3<float>(m_e.shape()), x_lung.t};
  for (std::size_t i = 0; i < m_e.size(); ++i) {
    const std::uint8_t m = m_e[i];
    require(m <= 1, ErrorKind::Domain,
            "aas_blend: extra-pulmonary mask is not binary (value " + std::to_string(m) + ")");
    // A select rather than arithmetic keeps both branches bit-exact.
    out.values[i] = m ? x_extra.values[i] : x_lung.values[i];
  }
  return out;
}

Grid3<float> reverse_noise(Shape3 shape, int t, std::uint64_t seed, std::uint32_t sample_id) {
  if (t <= 1) return Grid3<float>(shape, 0.0f);
  return normal_grid(shape, {seed, sample_id, static_cast<std::uint32_t>(t), Purpose::ReverseNoise});
}

Grid3<float> reference_noise(Shape3 shape, int t, std::uint64_t seed, std::uint32_t sample_id) {
  return normal_grid(shape,
                     {seed, sample_id, static_cast<std::uint32_t>(t), Purpose::ReferenceNoise});
}

Grid3<float> initial_latent(Shape3 shape, std::uint64_t seed, std::uint32_t sample_id) {
  return normal_grid(shape, {seed, sample_id, 0, Purpose::InitialLatent});
}

namespace {

Volume finish(LatentVolume&& x, const Spacing& spacing) {
  // The model may overshoot slightly; volumes live in [-1, 1]. Reference
  // voxels already do, so clamping never touches them.
  for (float& v : x.values.values()) v = std::clamp(v, -1.0f, 1.0f);
  return Volume{std::move(x.values), spacing};
}

}  // namespace

Volume aas_sample(const NoisePredictor& denoiser, const Volume& x_ref,
                  const SemanticLayout& layout, const NoiseSchedule& schedule,
                  const SamplerConfig& cfg) {
  require(cfg.mode == SamplerMode::Aas, ErrorKind::Config, "aas_sample called with mode plain");
  validate_volume(x_ref);
  validate_layout(layout);
  require_same_shape(x_ref.values, layout.labels, "aas_sample reference/layout");
  const Shape3 shape = layout.shape();
  const Tensor<float> channels = layout_to_channels(layout, cfg.conditioning);
  check_model(denoiser, channels);
  const MaskPair masks = derive_masks(layout);

  LatentVolume x{initial_latent(shape, cfg.seed, cfg.sample_id), schedule.steps()};
  for (int t = schedule.steps(); t >= 1; --t) {
    const Grid3<float> z = reverse_noise(shape, t, cfg.seed, cfg.sample_id);
    LatentVolume lung = denoise_step_lung(x, channels, denoiser, schedule, z);
    check_finite(lung.values, t, "aas_sample");
    const Grid3<float> eps = reference_noise(shape, t, cfg.seed, cfg.sample_id);
    LatentVolume extra = reference_diffuse(x_ref.values, t - 1, eps, schedule);
    x = aas_blend(lung, extra, masks.extra);
  }
  return finish(std::move(x), x_ref.spacing_mm);
}

Volume plain_sample(const NoisePredictor& denoiser, const SemanticLayout& layout,
                    const NoiseSchedule& schedule, const SamplerConfig& cfg) {
  require(cfg.mode == SamplerMode::Plain, ErrorKind::Config, "plain_sample called with mode aas");
  validate_layout(layout);
  const Shape3 shape = layout.shape();
  const Tensor<float> channels = layout_to_channels(layout, cfg.conditioning);
  check_model(denoiser, channels);

  LatentVolume x{initial_latent(shape, cfg.seed, cfg.sample_id), schedule.steps()};
  for (int t = schedule.steps(); t >= 1; --t) {
    const Grid3<float> z = reverse_noise(shape, t, cfg.seed, cfg.sample_id);
    x = denoise_step_lung(x, channels, denoiser, schedule, z);
    check_finite(x.values, t, "plain_sample");
  }
  return finish(std::move(x), layout.spacing_mm);
}

Volume sample(const NoisePredictor& denoiser, const Volume* x_ref, const SemanticLayout& layout,
              const NoiseSchedule& schedule, const SamplerConfig& cfg) {
  if (cfg.mode == SamplerMode::Plain) return plain_sample(denoiser, layout, schedule, cfg);
  require(x_ref != nullptr, ErrorKind::Config, "AAS sampling needs a reference volume");
  return aas_sample(denoiser, *x_ref, layout, schedule, cfg);
}

nlohmann::json provenance_json(const SampleProvenance& p) {
  nlohmann::json j;
  j["seed"] = p.sampler.seed;
  j["sample_id"] = p.sampler.sample_id;
  j["mode"] = to_string(p.sampler.mode);
  j["conditioning"] = to_string(p.sampler.conditioning);
  j["weights"] = p.sampler.use_ema_weights ? "ema" : "raw";
  j["schedule"] = p.schedule;
  j["checkpoint_id"] = p.checkpoint_id;
  j["reference_id"] = p.reference_id.empty() ? nlohmann::json(nullptr) : nlohmann::json(p.reference_id);
  return j;
}

}  // namespace thoraxdiff

#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"
#include "thoraxdiff/denoiser.hpp"
#include "thoraxdiff/grid.hpp"
#include "thoraxdiff/schedule.hpp"
#include "thoraxdiff/volume.hpp"

namespace thoraxdiff {

// Diffusion-space grid tagged with the step it belongs to.
struct LatentVolume {
  Grid3<float> values;
  int t = 0;
};

enum class SamplerMode { Aas, Plain };

const char* to_string(SamplerMode m) noexcept;
SamplerMode sampler_mode_from_string(const std::string& s);

struct SamplerConfig {
  SamplerMode mode = SamplerMode::Aas;
  Conditioning conditioning = Conditioning::LungAndNodule;
  bool use_ema_weights = true;  // consumed by whoever picks the weight set
  std::uint64_t seed = 0;
  std::uint32_t sample_id = 0;  // substream id, lets many samples share a seed
};

void to_json(nlohmann::json& j, const SamplerConfig& c);
void from_json(const nlohmann::json& j, SamplerConfig& c);

// sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps
LatentVolume forward_diffuse(const Grid3<float>& x0, int t, const Grid3<float>& eps,
                             const NoiseSchedule& schedule);

// Same as forward_diffuse, evaluated at t - 1 for the reference branch.
LatentVolume reference_diffuse(const Grid3<float>& x_ref, int t_minus_1, const Grid3<float>& eps,
                               const NoiseSchedule& schedule);

// Latent first, then the layout channels.
Tensor<float> build_condition(const Grid3<float>& latent, const Tensor<float>& layout_channels);

// One reverse step on the whole grid:
//   (x_t - (1 - a_t)/sqrt(1 - abar_t) * eps_theta(x_t + cond, t)) / sqrt(a_t) + sigma_t * z
// The result carries t - 1. Pass an all-zero z at t = 1.
LatentVolume denoise_step_lung(const LatentVolume& x_t, const Tensor<float>& layout_channels,
                               const NoisePredictor& denoiser, const NoiseSchedule& schedule,
                               const Grid3<float>& z);

// (1 - m_e) * x_lung + m_e * x_extra. The mask must be 0/1.
LatentVolume aas_blend(const LatentVolume& x_lung, const LatentVolume& x_extra,
                       const Grid3<std::uint8_t>& m_e);

// Reverse-step noise for (seed, sample, t). Exactly zero at t = 1.
Grid3<float> reverse_noise(Shape3 shape, int t, std::uint64_t seed, std::uint32_t sample_id);
Grid3<float> reference_noise(Shape3 shape, int t, std::uint64_t seed, std::uint32_t sample_id);
Grid3<float> initial_latent(Shape3 shape, std::uint64_t seed, std::uint32_t sample_id);

// Reference-guided sampling: the extra-pulmonary region of the result
// equals x_ref, the lung region is generated under the layout.
Volume aas_sample(const NoisePredictor& denoiser, const Volume& x_ref,
                  const SemanticLayout& layout, const NoiseSchedule& schedule,
                  const SamplerConfig& cfg);

// Ordinary ancestral sampling conditioned on the layout only.
Volume plain_sample(const NoisePredictor& denoiser, const SemanticLayout& layout,
                    const NoiseSchedule& schedule, const SamplerConfig& cfg);

// Dispatches on cfg.mode. `x_ref` may be null in PLAIN mode.
Volume sample(const NoisePredictor& denoiser, const Volume* x_ref, const SemanticLayout& layout,
              const NoiseSchedule& schedule, const SamplerConfig& cfg);

struct SampleProvenance {
  SamplerConfig sampler;
  ScheduleDescriptor schedule;
  std::string checkpoint_id;
  std::string reference_id;  // empty for plain sampling
};

nlohmann::json provenance_json(const SampleProvenance& p);

}  // namespace thoraxdiff

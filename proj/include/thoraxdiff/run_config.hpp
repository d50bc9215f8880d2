#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "json.hpp"
#include "thoraxdiff/denoiser.hpp"
#include "thoraxdiff/diffusion.hpp"
#include "thoraxdiff/metrics.hpp"
#include "thoraxdiff/phantom.hpp"
#include "thoraxdiff/trainer.hpp"

namespace thoraxdiff {

struct MetricOptions {
  std::optional<double> mmd_bandwidth;  // median heuristic when empty
  MmdEstimator mmd_estimator = MmdEstimator::Unbiased;
  std::size_t overlap_samples = 100000;
  std::uint64_t overlap_seed = 0;
};

// Everything a command can be configured with. Sections and keys mirror the
// library structs; unknown keys anywhere are rejected.
struct RunConfig {
  DenoiserConfig denoiser;
  TrainConfig train;
  SamplerConfig sampler;
  PhantomConfig phantom;
  MetricOptions metrics;
};

void to_json(nlohmann::json& j, const PhantomConfig& c);
void from_json(const nlohmann::json& j, PhantomConfig& c);
void to_json(nlohmann::json& j, const MetricOptions& c);
void from_json(const nlohmann::json& j, MetricOptions& c);

// Parses a config document. Keys "command" and "inputs" are accepted and
// ignored so a resolved copy can be fed back in. Missing denoiser.in_channels
// is derived from train.conditioning; an explicit inconsistent value is an error.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::json run_config_json(const RunConfig& c);

}  // namespace thoraxdiff

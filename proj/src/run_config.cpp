#include "thoraxdiff/run_config.hpp"

#include "thoraxdiff/error.hpp"
#include "thoraxdiff/volume_io.hpp"

namespace thoraxdiff {

using nlohmann::json;

void to_json(json& j, const PhantomConfig& c) {
  j = {{"resolution", c.resolution},
       {"spacing_mm", c.spacing_mm},
       {"body_radii", c.body_radii},
       {"lung_radii", c.lung_radii},
       {"lung_offset", c.lung_offset},
       {"jitter", c.jitter},
       {"min_nodules", c.min_nodules},
       {"max_nodules", c.max_nodules},
       {"nodule_radius_min", c.nodule_radius_min},
       {"nodule_radius_max", c.nodule_radius_max},
       {"background_intensity", c.background_intensity},
       {"body_intensity", c.body_intensity},
       {"lung_intensity", c.lung_intensity},
       {"nodule_intensity", c.nodule_intensity},
       {"noise_amplitude", c.noise_amplitude}};
}

void from_json(const json& j, PhantomConfig& c) {
  require(j.is_object(), ErrorKind::Config, "phantom config must be an object");
  for (const auto& [key, v] : j.items()) {
    if (key == "resolution") c.resolution = v.get<int>();
    else if (key == "spacing_mm") c.spacing_mm = v.get<double>();
    else if (key == "body_radii") c.body_radii = v.get<std::array<double, 3>>();
    else if (key == "lung_radii") c.lung_radii = v.get<std::array<double, 3>>();
    else if (key == "lung_offset") c.lung_offset = v.get<double>();
    else if (key == "jitter") c.jitter = v.get<double>();
    else if (key == "min_nodules") c.min_nodules = v.get<int>();
    else if (key == "max_nodules") c.max_nodules = v.get<int>();
    else if (key == "nodule_radius_min") c.nodule_radius_min = v.get<double>();
    else if (key == "nodule_radius_max") c.nodule_radius_max = v.get<double>();
    else if (key == "background_intensity") c.background_intensity = v.get<float>();
    else if (key == "body_intensity") c.body_intensity = v.get<float>();
    else if (key == "lung_intensity") c.lung_intensity = v.get<float>();
    else if (key == "nodule_intensity") c.nodule_intensity = v.get<float>();
    else if (key == "noise_amplitude") c.noise_amplitude = v.get<float>();
    else fail(ErrorKind::Config, "phantom: unknown key '" + key + "'");
  }
}

void to_json(json& j, const MetricOptions& c) {
  j = {{"mmd_bandwidth", c.mmd_bandwidth ? json(*c.mmd_bandwidth) : json(nullptr)},
       {"mmd_estimator", to_string(c.mmd_estimator)},
       {"overlap_samples", c.overlap_samples},
       {"overlap_seed", c.overlap_seed}};
}

void from_json(const json& j, MetricOptions& c) {
  require(j.is_object(), ErrorKind::Config, "metrics config must be an object");
  for (const auto& [key, v] : j.items()) {
    if (key == "mmd_bandwidth") {
      if (v.is_null()) c.mmd_bandwidth.reset();
      else c.mmd_bandwidth = v.get<double>();
    } else if (key == "mmd_estimator") {
      const auto s = v.get<std::string>();
      if (s == "unbiased") c.mmd_estimator = MmdEstimator::Unbiased;
      else if (s == "biased") c.mmd_estimator = MmdEstimator::Biased;
      else fail(ErrorKind::Config, "metrics: field 'mmd_estimator' must be unbiased or biased");
    } else if (key == "overlap_samples") {
      c.overlap_samples = v.get<std::size_t>();
    } else if (key == "overlap_seed") {
      c.overlap_seed = v.get<std::uint64_t>();
    } else {
      fail(ErrorKind::Config, "metrics: unknown key '" + key + "'");
    }
  }
}

RunConfig parse_run_config(const json& j) {
  require(j.is_object(), ErrorKind::Config, "config must be a JSON object");
  RunConfig c;
  bool explicit_in_channels = false;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "denoiser") {
        c.denoiser = v.get<DenoiserConfig>();
        explicit_in_channels = v.contains("in_channels");
      } else if (key == "train") {
        from_json(v, c.train);
      } else if (key == "sampler") {
        from_json(v, c.sampler);
      } else if (key == "phantom") {
        from_json(v, c.phantom);
      } else if (key == "metrics") {
        from_json(v, c.metrics);
      } else if (key != "command" && key != "inputs") {
        fail(ErrorKind::Config, "config: unknown key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("config: ") + e.what());
  }
  const int want = 1 + conditioning_channels(c.train.conditioning);
  if (explicit_in_channels) {
    require(c.denoiser.in_channels == want, ErrorKind::Config,
            "config: field 'denoiser.in_channels' is " + std::to_string(c.denoiser.in_channels) +
                " but conditioning '" + to_string(c.train.conditioning) + "' needs " +
                std::to_string(want));
  } else {
    c.denoiser.in_channels = want;
  }
  c.denoiser.validate();
  c.train.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorKind::Io, "config file not found: " + path.string());
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, path.string() + ": malformed config (" + e.what() + ")");
  }
  return parse_run_config(j);
}

json run_config_json(const RunConfig& c) {
  json j;
  j["denoiser"] = c.denoiser;
  j["train"] = c.train;
  j["sampler"] = c.sampler;
  j["phantom"] = c.phantom;
  j["metrics"] = c.metrics;
  return j;
}

}  // namespace thoraxdiff

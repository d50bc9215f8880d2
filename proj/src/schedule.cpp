#include "thoraxdiff/schedule.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "thoraxdiff/error.hpp"

namespace thoraxdiff {

NoiseSchedule::NoiseSchedule(ScheduleDescriptor descriptor, std::vector<double> betas)
    : descriptor_(descriptor), betas_(std::move(betas)) {
  require(!betas_.empty(), ErrorKind::Config, "schedule: steps must be >= 1");
  alphas_.reserve(betas_.size());
  sigmas_.reserve(betas_.size());
  alpha_bars_.reserve(betas_.size() + 1);
  alpha_bars_.push_back(1.0);
  for (std::size_t i = 0; i < betas_.size(); ++i) {
    const double b = betas_[i];
    require(b > 0.0 && b < 1.0, ErrorKind::Config,
            "schedule: beta_" + std::to_string(i + 1) + " outside (0,1)");
    alphas_.push_back(1.0 - b);
    sigmas_.push_back(std::sqrt(b));
    alpha_bars_.push_back(alpha_bars_.back() * alphas_.back());
  }
}

int NoiseSchedule::checked(int t, int lo) const {
  require(t >= lo && t <= steps(), ErrorKind::Domain,
          "schedule: time step " + std::to_string(t) + " outside [" + std::to_string(lo) + "," +
              std::to_string(steps()) + "]");
  return t;
}

NoiseSchedule build_cosine_schedule(int steps, double s, double beta_max) {
  require(steps >= 1, ErrorKind::Config, "cosine schedule: field 'T' must be >= 1");
  require(s > 0.0 && s < 1.0, ErrorKind::Config, "cosine schedule: field 's' must lie in (0,1)");
  require(beta_max > 0.0 && beta_max < 1.0, ErrorKind::Config,
          "cosine schedule: field 'beta_max' must lie in (0,1)");
  const auto f = [&](int t) {
    const double c = std::cos(((static_cast<double>(t) / steps + s) / (1.0 + s)) *
                              std::numbers::pi / 2.0);
    return c * c;
  };
  const double f0 = f(0);
  std::vector<double> betas(static_cast<std::size_t>(steps));
  double prev = 1.0;
  for (int t = 1; t <= steps; ++t) {
    const double cur = f(t) / f0;
    double b = 1.0 - cur / prev;
    if (b > beta_max) b = beta_max;
    betas[static_cast<std::size_t>(t - 1)] = b;
    prev = cur;
  }
  ScheduleDescriptor d;
  d.type = ScheduleDescriptor::Type::Cosine;
  d.steps = steps;
  d.s = s;
  d.beta_max = beta_max;
  return NoiseSchedule(d, std::move(betas));
}

NoiseSchedule build_linear_schedule(int steps, double beta_start, double beta_end) {
  require(steps >= 1, ErrorKind::Config, "linear schedule: field 'T' must be >= 1");
  require(beta_start > 0.0 && beta_start < 1.0, ErrorKind::Config,
          "linear schedule: field 'beta_start' must lie in (0,1)");
  require(beta_end > 0.0 && beta_end < 1.0, ErrorKind::Config,
          "linear schedule: field 'beta_end' must lie in (0,1)");
  require(beta_start <= beta_end, ErrorKind::Config,
          "linear schedule: field 'beta_start' must not exceed 'beta_end'");
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int t = 1; t <= steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / (steps - 1);
    betas[static_cast<std::size_t>(t - 1)] = beta_start + (beta_end - beta_start) * frac;
  }
  ScheduleDescriptor d;
  d.type = ScheduleDescriptor::Type::Linear;
  d.steps = steps;
  d.beta_start = beta_start;
  d.beta_end = beta_end;
  return NoiseSchedule(d, std::move(betas));
}

NoiseSchedule build_schedule(const ScheduleDescriptor& d) {
  return d.type == ScheduleDescriptor::Type::Cosine
             ? build_cosine_schedule(d.steps, d.s, d.beta_max)
             : build_linear_schedule(d.steps, d.beta_start, d.beta_end);
}

void to_json(nlohmann::json& j, const ScheduleDescriptor& d) {
  if (d.type == ScheduleDescriptor::Type::Cosine) {
    j = {{"type", "cosine"}, {"T", d.steps}, {"s", d.s}, {"beta_max", d.beta_max}};
  } else {
    j = {{"type", "linear"}, {"T", d.steps}, {"beta_start", d.beta_start},
         {"beta_end", d.beta_end}};
  }
}

void from_json(const nlohmann::json& j, ScheduleDescriptor& d) {
  require(j.is_object(), ErrorKind::Config, "schedule: descriptor must be an object");
  const std::string type = j.value("type", "cosine");
  d = ScheduleDescriptor{};
  if (type == "cosine") {
    d.type = ScheduleDescriptor::Type::Cosine;
    for (const auto& [key, _] : j.items()) {
      require(key == "type" || key == "T" || key == "s" || key == "beta_max", ErrorKind::Config,
              "schedule: unknown key '" + key + "'");
    }
    d.s = j.value("s", d.s);
    d.beta_max = j.value("beta_max", d.beta_max);
  } else if (type == "linear") {
    d.type = ScheduleDescriptor::Type::Linear;
    for (const auto& [key, _] : j.items()) {
      require(key == "type" || key == "T" || key == "beta_start" || key == "beta_end",
              ErrorKind::Config, "schedule: unknown key '" + key + "'");
    }
    d.beta_start = j.value("beta_start", d.beta_start);
    d.beta_end = j.value("beta_end", d.beta_end);
  } else {
    fail(ErrorKind::Config, "schedule: field 'type' must be 'cosine' or 'linear'");
  }
  d.steps = j.value("T", d.steps);
}

}  // namespace thoraxdiff

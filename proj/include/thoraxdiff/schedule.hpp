#pragma once

#include <vector>

#include "json.hpp"

namespace thoraxdiff {

// Describes how a schedule was built, so checkpoints can rebuild it.
struct ScheduleDescriptor {
  enum class Type { Cosine, Linear };

  Type type = Type::Cosine;
  int steps = 250;
  double s = 0.008;          // cosine offset
  double beta_max = 0.999;   // cosine clip bound
  double beta_start = 1e-4;  // linear
  double beta_end = 0.02;    // linear

  friend bool operator==(const ScheduleDescriptor&, const ScheduleDescriptor&) = default;
};

void to_json(nlohmann::json& j, const ScheduleDescriptor& d);
void from_json(const nlohmann::json& j, ScheduleDescriptor& d);

// Precomputed diffusion coefficients. Index t = 0 is the clean image, so
// alpha_bar(0) == 1 and beta/alpha/sigma are defined for t in [1, T].
// Immutable after construction.
class NoiseSchedule {
 public:
  NoiseSchedule(ScheduleDescriptor descriptor, std::vector<double> betas);

  int steps() const noexcept { return static_cast<int>(betas_.size()); }
  double beta(int t) const { return betas_.at(checked(t, 1) - 1); }
  double alpha(int t) const { return alphas_.at(checked(t, 1) - 1); }
  double alpha_bar(int t) const { return alpha_bars_.at(checked(t, 0)); }
  double sigma(int t) const { return sigmas_.at(checked(t, 1) - 1); }

  const std::vector<double>& betas() const noexcept { return betas_; }
  const std::vector<double>& alphas() const noexcept { return alphas_; }
  const std::vector<double>& alpha_bars() const noexcept { return alpha_bars_; }
  const std::vector<double>& sigmas() const noexcept { return sigmas_; }
  const ScheduleDescriptor& descriptor() const noexcept { return descriptor_; }

 private:
  int checked(int t, int lo) const;

  ScheduleDescriptor descriptor_;
  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
  std::vector<double> sigmas_;
};

// alpha_bar(t) = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2);
// beta_t = 1 - alpha_bar(t)/alpha_bar(t-1), clipped at beta_max.
NoiseSchedule build_cosine_schedule(int steps, double s = 0.008, double beta_max = 0.999);

// beta_t linearly spaced from beta_start (t = 1) to beta_end (t = T).
NoiseSchedule build_linear_schedule(int steps, double beta_start, double beta_end);

NoiseSchedule build_schedule(const ScheduleDescriptor& descriptor);

}  // namespace thoraxdiff

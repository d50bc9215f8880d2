#pragma once

#include <array>
#include <cstdint>
#include <span>

namespace thoraxdiff {

// Philox4x32-10 counter-based generator. Output is a pure function of
// (key, counter), so any draw can be reproduced without replaying a sequence.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter,
                                        std::array<std::uint32_t, 2> key) noexcept;

// What a stream of draws is used for. Distinct purposes never share counters.
enum class Purpose : std::uint32_t {
  Init = 1,         // parameter initialization
  InitialLatent,    // x_T in the samplers
  ReverseNoise,     // z in the reverse step
  ReferenceNoise,   // eps in the reference diffusion
  TrainTime,        // t ~ Uniform{1..T}
  TrainNoise,       // eps in training
  TrainData,        // dataset index selection
  Phantom,          // phantom geometry and texture
  Metric,           // Monte Carlo estimates in metrics
  Test,             // reserved for test fixtures
};

// Identifies one independent substream: (seed, id, step, purpose).
struct StreamKey {
  std::uint64_t seed = 0;
  std::uint32_t id = 0;
  std::uint32_t step = 0;
  Purpose purpose = Purpose::Test;
};

// Sequential reader over one substream. Cheap to construct; holds only the
// key and a block counter.
class Stream {
 public:
  explicit Stream(StreamKey key) noexcept : key_(key) {}

  std::uint32_t next_u32() noexcept;
  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  // Uniform in (0, 1].
  double uniform_open_low() noexcept;
  // Uniform integer in [lo, hi] (inclusive).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) noexcept;
  // Standard normal via Box-Muller.
  double normal() noexcept;

  void fill_normal(std::span<float> out) noexcept;
  void fill_normal(std::span<double> out) noexcept;

  // Number of 32-bit words consumed so far.
  std::uint64_t position() const noexcept { return block_ * 4 + lane_ - 4; }

 private:
  void refill() noexcept;

  StreamKey key_;
  std::uint64_t block_ = 0;
  unsigned lane_ = 4;
  std::array<std::uint32_t, 4> buffer_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace thoraxdiff

#include "thoraxdiff/rng.hpp"

#include <cmath>
#include <numbers>

namespace thoraxdiff {

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi,
                    std::uint32_t& lo) noexcept {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

}  // namespace

std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                        std::array<std::uint32_t, 2> key) noexcept {
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kMul0, ctr[0], hi0, lo0);
    mulhilo(kMul1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return ctr;
}

void Stream::refill() noexcept {
  // Counter words: [block lo, block hi ^ id, step, purpose]. The block index
  // never exceeds 2^32 for volumes handled here, so the id stays separable.
  const std::array<std::uint32_t, 4> ctr = {
      static_cast<std::uint32_t>(block_),
      static_cast<std::uint32_t>(block_ >> 32) ^ key_.id, key_.step,
      static_cast<std::uint32_t>(key_.purpose)};
  const std::array<std::uint32_t, 2> k = {static_cast<std::uint32_t>(key_.seed),
                                          static_cast<std::uint32_t>(key_.seed >> 32)};
  buffer_ = philox4x32(ctr, k);
  ++block_;
  lane_ = 0;
}

std::uint32_t Stream::next_u32() noexcept {
  if (lane_ == 4) refill();
  return buffer_[lane_++];
}

double Stream::uniform() noexcept {
  const std::uint64_t hi = next_u32() >> 5;  // 27 bits
  const std::uint64_t lo = next_u32() >> 6;  // 26 bits
  return static_cast<double>((hi << 26) | lo) * 0x1.0p-53;
}

double Stream::uniform_open_low() noexcept { return 1.0 - uniform(); }

std::int64_t Stream::uniform_int(std::int64_t lo, std::int64_t hi) noexcept {
  const auto span = static_cast<double>(hi - lo + 1);
  auto v = lo + static_cast<std::int64_t>(std::floor(uniform() * span));
  return v > hi ? hi : v;
}

double Stream::normal() noexcept {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = uniform_open_low();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

void Stream::fill_normal(std::span<float> out) noexcept {
  for (auto& v : out) v = static_cast<float>(normal());
}

void Stream::fill_normal(std::span<double> out) noexcept {
  for (auto& v : out) v = normal();
}

}  // namespace thoraxdiff

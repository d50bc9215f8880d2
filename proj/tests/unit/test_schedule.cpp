#include <cmath>
#include <numbers>

#include "doctest.h"
#include "thoraxdiff/error.hpp"
#include "thoraxdiff/rng.hpp"
#include "thoraxdiff/schedule.hpp"

using namespace thoraxdiff;

namespace {

void check_invariants(const NoiseSchedule& s) {
  REQUIRE(s.alpha_bars().size() == static_cast<std::size_t>(s.steps()) + 1);
  CHECK(s.alpha_bar(0) == 1.0);
  double prod = 1.0;
  for (int t = 1; t <= s.steps(); ++t) {
    CHECK(s.beta(t) > 0.0);
    CHECK(s.beta(t) < 1.0);
    CHECK(s.alpha(t) == 1.0 - s.beta(t));
    CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    prod *= s.alpha(t);
    CHECK(std::abs(s.alpha_bar(t) - prod) <= 1e-12);
    CHECK(std::abs(s.sigma(t) * s.sigma(t) - s.beta(t)) <= 4 * std::numeric_limits<double>::epsilon());
  }
}

}  // namespace

TEST_CASE("cosine schedule with 250 steps") {
  const NoiseSchedule s = build_cosine_schedule(250, 0.008, 0.999);
  CHECK(s.steps() == 250);
  check_invariants(s);
  CHECK(s.alpha_bar(250) < 1e-3);
}

TEST_CASE("cosine schedule matches the closed form at T=4") {
  const NoiseSchedule s = build_cosine_schedule(4, 0.008);
  const auto f = [](double t) {
    const double c = std::cos((t / 4.0 + 0.008) / 1.008 * std::numbers::pi / 2.0);
    return c * c;
  };
  // Steps 1..3 are unclipped; at t = T, f vanishes and beta hits the 0.999 cap.
  double expected = 1.0;
  for (int t = 1; t <= 4; ++t) {
    const double beta = std::min(1.0 - (f(t) / f(0)) / (f(t - 1) / f(0)), 0.999);
    expected *= 1.0 - beta;
    if (t < 4) CHECK(std::abs(expected - f(t) / f(0)) <= 1e-12);
    CHECK(std::abs(s.alpha_bar(t) - expected) <= 1e-12);
  }
  CHECK(s.beta(4) == 0.999);
  CHECK(s.alpha_bar(0) == 1.0);
  check_invariants(s);
}

TEST_CASE("cosine schedule clips beta") {
  const NoiseSchedule s = build_cosine_schedule(10, 0.008, 0.5);
  for (int t = 1; t <= 10; ++t) CHECK(s.beta(t) <= 0.5);
  check_invariants(s);
}

TEST_CASE("linear schedule") {
  SUBCASE("single step") {
    const NoiseSchedule s = build_linear_schedule(1, 0.1, 0.1);
    CHECK(s.betas() == std::vector<double>{0.1});
    CHECK(s.alpha_bar(0) == 1.0);
    CHECK(s.alpha_bar(1) == doctest::Approx(0.9).epsilon(1e-15));
  }
  SUBCASE("two steps") {
    const NoiseSchedule s = build_linear_schedule(2, 0.1, 0.3);
    CHECK(std::abs(s.alpha_bar(2) - 0.63) <= 1e-15);
  }
  SUBCASE("interpolation") {
    const NoiseSchedule s = build_linear_schedule(5, 0.1, 0.5);
    for (int t = 1; t <= 5; ++t) CHECK(s.beta(t) == doctest::Approx(0.1 * t));
    check_invariants(s);
  }
  CHECK_THROWS_AS(build_linear_schedule(3, 0.3, 0.1), Error);
  CHECK_THROWS_AS(build_linear_schedule(3, 0.0, 0.1), Error);
  CHECK_THROWS_AS(build_linear_schedule(0, 0.1, 0.2), Error);
}

TEST_CASE("schedule configuration errors name the field") {
  const auto message = [](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Config);
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message([] { build_cosine_schedule(0); }).find("'T'") != std::string::npos);
  CHECK(message([] { build_cosine_schedule(10, 1.5); }).find("'s'") != std::string::npos);
  CHECK(message([] { build_cosine_schedule(10, 0.008, 1.0); }).find("'beta_max'") != std::string::npos);
}

TEST_CASE("schedule index bounds") {
  const NoiseSchedule s = build_cosine_schedule(10);
  CHECK_THROWS_AS(s.beta(0), Error);
  CHECK_THROWS_AS(s.alpha_bar(11), Error);
  CHECK_NOTHROW(s.alpha_bar(10));
}

TEST_CASE("schedule descriptor round-trips through JSON") {
  for (const NoiseSchedule& s : {build_cosine_schedule(250), build_linear_schedule(7, 0.01, 0.2)}) {
    nlohmann::json j = s.descriptor();
    const auto d = j.get<ScheduleDescriptor>();
    CHECK(d == s.descriptor());
    CHECK(build_schedule(d).betas() == s.betas());
  }
  nlohmann::json bad = {{"type", "cosine"}, {"T", 10}, {"offset", 0.1}};
  CHECK_THROWS_AS(bad.get<ScheduleDescriptor>(), Error);
}

TEST_CASE("philox known answers") {
  using A4 = std::array<std::uint32_t, 4>;
  CHECK(philox4x32({0, 0, 0, 0}, {0, 0}) == A4{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8});
  CHECK(philox4x32({0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, {0xffffffff, 0xffffffff}) ==
        A4{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd});
  CHECK(philox4x32({0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, {0xa4093822, 0x299f31d0}) ==
        A4{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1});
}

TEST_CASE("streams are reproducible and independent") {
  Stream a({42, 1, 2, Purpose::TrainNoise}), b({42, 1, 2, Purpose::TrainNoise});
  for (int i = 0; i < 100; ++i) CHECK(a.next_u32() == b.next_u32());
  CHECK(a.position() == 100);

  const StreamKey keys[] = {{42, 1, 2, Purpose::TrainNoise}, {43, 1, 2, Purpose::TrainNoise},
                            {42, 2, 2, Purpose::TrainNoise}, {42, 1, 3, Purpose::TrainNoise},
                            {42, 1, 2, Purpose::TrainTime}};
  std::vector<std::uint32_t> firsts;
  for (const auto& k : keys) firsts.push_back(Stream(k).next_u32());
  for (std::size_t i = 0; i < firsts.size(); ++i)
    for (std::size_t j = i + 1; j < firsts.size(); ++j) CHECK(firsts[i] != firsts[j]);
}

TEST_CASE("stream distributions") {
  Stream s({7, 0, 0, Purpose::Test});
  const int n = 200000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    const double x = s.normal();
    sum += x;
    sq += x * x;
  }
  CHECK(std::abs(sum / n) < 0.01);
  CHECK(std::abs(sq / n - 1.0) < 0.02);

  int counts[4] = {};
  for (int i = 0; i < 40000; ++i) {
    const auto k = s.uniform_int(1, 4);
    REQUIRE(k >= 1);
    REQUIRE(k <= 4);
    ++counts[k - 1];
  }
  for (int c : counts) CHECK(std::abs(c - 10000) < 500);
  for (int i = 0; i < 1000; ++i) {
    const double u = s.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

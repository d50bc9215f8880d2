#include <cmath>
#include <numbers>

#include "doctest.h"
#include "thoraxdiff/error.hpp"
#include "thoraxdiff/metrics.hpp"
#include "thoraxdiff/phantom.hpp"
#include "thoraxdiff/rng.hpp"

using namespace thoraxdiff;

namespace {

Eigen::MatrixXd random_matrix(int rows, int cols, std::uint64_t seed, double shift = 0.0) {
  Stream s({seed, 0, 0, Purpose::Test});
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = s.normal() + shift;
  return m;
}

double k(const Eigen::MatrixXd& x, int i, const Eigen::MatrixXd& y, int j, double h) {
  return std::exp(-(x.row(i) - y.row(j)).squaredNorm() / (2 * h * h));
}

// Straight transcription of the estimators, loop by loop.
double mmd_oracle(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double h, bool unbiased) {
  const int m = static_cast<int>(a.rows()), n = static_cast<int>(b.rows());
  if (!unbiased) {
    double aa = 0, bb = 0, ab = 0;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) aa += k(a, i, a, j, h);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) bb += k(b, i, b, j, h);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) ab += k(a, i, b, j, h);
    return aa / (m * m) + bb / (n * n) - 2 * ab / (m * n);
  }
  if (m == n) {
    double s = 0;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j)
        if (i != j) s += k(a, i, a, j, h) + k(b, i, b, j, h) - k(a, i, b, j, h) - k(a, j, b, i, h);
    return s / (m * (m - 1.0));
  }
  double aa = 0, bb = 0, ab = 0;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      if (i != j) aa += k(a, i, a, j, h);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j) bb += k(b, i, b, j, h);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) ab += k(a, i, b, j, h);
  return aa / (m * (m - 1.0)) + bb / (n * (n - 1.0)) - 2 * ab / (m * n);
}

Grid3<std::uint8_t> mask_from_bits(unsigned bits) {
  Grid3<std::uint8_t> g(cube(2));
  for (std::size_t i = 0; i < 8; ++i) g[i] = (bits >> i) & 1u;
  return g;
}

Eigen::MatrixXd ellipse_points(double cx, double cy, double a, double b, double angle, int n) {
  Eigen::MatrixXd p(n, 2);
  for (int i = 0; i < n; ++i) {
    const double th = 2 * std::numbers::pi * i / n;
    const double x = a * std::cos(th), y = b * std::sin(th);
    p(i, 0) = cx + x * std::cos(angle) - y * std::sin(angle);
    p(i, 1) = cy + x * std::sin(angle) + y * std::cos(angle);
  }
  return p;
}

}  // namespace

TEST_CASE("masked mse against a brute-force sum") {
  const Phantom p = generate_phantom(1), q = generate_phantom(2);
  const Volume a = resample_cubic(p.volume, 4), b = resample_cubic(q.volume, 4);
  Grid3<std::uint8_t> m(cube(4));
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = (i % 3 == 0) ? 1 : 0;
  double num = 0, den = 0;
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x)
        if (m(z, y, x)) {
          const double d = a.values(z, y, x) - b.values(z, y, x);
          num += d * d;
          den += 1;
        }
  CHECK(masked_mse(a, b, m) == doctest::Approx(num / den).epsilon(1e-12));
  CHECK(masked_mse(a, a, m) == 0.0);
  try {
    masked_mse(a, b, Grid3<std::uint8_t>(cube(4), 0));
    FAIL("expected a degenerate-input error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Degenerate);
  }
  CHECK_THROWS_AS(masked_mse(a, b, Grid3<std::uint8_t>(cube(3), 1)), Error);
}

TEST_CASE("psd_sqrt squares back") {
  const Eigen::MatrixXd g = random_matrix(12, 6, 3);
  const Eigen::MatrixXd s = g.transpose() * g;
  const Eigen::MatrixXd r = psd_sqrt(s);
  CHECK((r * r - s).norm() <= 1e-8);
  CHECK((r - r.transpose()).norm() <= 1e-10);
}

TEST_CASE("fid of a shifted set is the squared shift") {
  const Eigen::MatrixXd a = random_matrix(40, 5, 4);
  Eigen::RowVectorXd v(5);
  v << 0.5, -1.0, 2.0, 0.0, 0.25;
  const Eigen::MatrixXd b = a.rowwise() + v;
  CHECK(fid(a, b) == doctest::Approx(v.squaredNorm()).epsilon(1e-8));
  CHECK(std::abs(fid(a, a)) <= 1e-9);
  const Eigen::MatrixXd c = random_matrix(30, 5, 5, 0.3);
  CHECK(fid(a, c) == doctest::Approx(fid(c, a)).epsilon(1e-9));
  CHECK(fid(a, c) >= 0.0);
  CHECK_THROWS_AS(fid(a.topRows(1), c), Error);
  CHECK_THROWS_AS(fid(a, random_matrix(30, 4, 5)), Error);
}

TEST_CASE("fid from stats closed form for diagonal covariances") {
  Eigen::VectorXd mu_a(2), mu_b(2);
  mu_a << 0, 0;
  mu_b << 1, 2;
  Eigen::MatrixXd ca = Eigen::Vector2d(1, 4).asDiagonal(), cb = Eigen::Vector2d(9, 1).asDiagonal();
  // sum (sqrt(a) - sqrt(b))^2 over the diagonal: (1-3)^2 + (2-1)^2
  CHECK(fid_from_stats(mu_a, ca, mu_b, cb) == doctest::Approx(5.0 + 4.0 + 1.0));
}

TEST_CASE("mmd matches the estimator definitions") {
  const Eigen::MatrixXd a = random_matrix(9, 4, 6), b = random_matrix(9, 4, 7, 0.5);
  const Eigen::MatrixXd c = random_matrix(6, 4, 8, 0.2);
  for (double h : {0.5, 1.0, 3.0}) {
    CHECK(mmd(a, b, {h}).value == doctest::Approx(mmd_oracle(a, b, h, true)).epsilon(1e-12));
    CHECK(mmd(a, c, {h}).value == doctest::Approx(mmd_oracle(a, c, h, true)).epsilon(1e-12));
    CHECK(mmd(a, c, {h}, MmdEstimator::Biased).value ==
          doctest::Approx(mmd_oracle(a, c, h, false)).epsilon(1e-12));
  }
}

TEST_CASE("mmd hand case in one dimension") {
  Eigen::MatrixXd a(2, 1), b(2, 1);
  a << 0, 2;
  b << 1, 3;
  const MmdResult r = mmd(a, b, {1.0});
  CHECK(r.bandwidth == 1.0);
  CHECK(r.value == doctest::Approx(2 * std::exp(-2.0) - std::exp(-4.5) - std::exp(-0.5)));
}

TEST_CASE("mmd of a set with itself vanishes") {
  const Eigen::MatrixXd a = random_matrix(10, 3, 9);
  CHECK(std::abs(mmd(a, a).value) <= 1e-12);
  CHECK(std::abs(mmd(a, a, {2.0}, MmdEstimator::Biased).value) <= 1e-12);
  const MmdResult r = mmd(a, a);
  CHECK(r.bandwidth == doctest::Approx(median_pairwise_distance(a, a)));
}

TEST_CASE("mmd with identical points is flagged degenerate") {
  const Eigen::MatrixXd a = Eigen::MatrixXd::Ones(4, 2);
  const MmdResult r = mmd(a, a);
  CHECK(r.degenerate);
  CHECK(r.value == 0.0);
  CHECK_THROWS_AS(mmd(a, a, {-1.0}), Error);
}

TEST_CASE("dice over every pair of 2x2x2 masks") {
  for (unsigned x = 0; x < 256; ++x) {
    const auto a = mask_from_bits(x);
    for (unsigned y = 0; y < 256; ++y) {
      const auto b = mask_from_bits(y);
      const int inter = __builtin_popcount(x & y), sa = __builtin_popcount(x), sb = __builtin_popcount(y);
      const double want = sa + sb == 0 ? 1.0 : 2.0 * inter / (sa + sb);
      REQUIRE(dice(a, b) == doctest::Approx(want).epsilon(1e-15));
      REQUIRE(dice(a, b) == dice(b, a));
    }
  }
}

TEST_CASE("sensitivity and specificity") {
  const auto pred = mask_from_bits(0b00001111), truth = mask_from_bits(0b00111100);
  const Confusion c = confusion(pred, truth);
  CHECK(c.tp == 2);
  CHECK(c.fp == 2);
  CHECK(c.fn == 2);
  CHECK(c.tn == 2);
  CHECK(sensitivity(pred, truth) == 0.5);
  CHECK(specificity(pred, truth) == 0.5);
  CHECK_THROWS_AS(sensitivity(pred, mask_from_bits(0)), Error);
  CHECK_THROWS_AS(specificity(pred, mask_from_bits(255)), Error);
}

TEST_CASE("mds reproduces planar distances") {
  Eigen::MatrixXd tri(3, 2);
  tri << 0, 0, 1, 0, 0.5, std::sqrt(3.0) / 2;
  const Eigen::MatrixXd d = pairwise_distances(tri);
  CHECK(d(0, 1) == doctest::Approx(1.0));
  const Eigen::MatrixXd e = mds_embed(d);
  CHECK((pairwise_distances(e) - d).norm() <= 1e-9);

  const Eigen::MatrixXd pts = random_matrix(15, 2, 10);
  const Eigen::MatrixXd dp = pairwise_distances(pts);
  CHECK((pairwise_distances(mds_embed(dp)) - dp).norm() <= 1e-8);

  Eigen::MatrixXd bad = dp;
  bad(0, 1) += 1.0;
  CHECK_THROWS_AS(mds_embed(bad), Error);
  CHECK_THROWS_AS(mds_embed(Eigen::MatrixXd::Zero(2, 3)), Error);
}

TEST_CASE("ellipse fit recovers circles and rotated ellipses") {
  const Ellipse c = fit_ellipse(ellipse_points(1, -1, 2, 2, 0, 24));
  CHECK(c.center.x() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(c.center.y() == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(c.a == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(c.b == doctest::Approx(2.0).epsilon(1e-9));

  const Ellipse e = fit_ellipse(ellipse_points(-3, 4, 3, 1, 0.5, 40));
  CHECK(e.a == doctest::Approx(3.0).epsilon(1e-8));
  CHECK(e.b == doctest::Approx(1.0).epsilon(1e-8));
  const double dang = std::remainder(e.angle - 0.5, std::numbers::pi);
  CHECK(std::abs(dang) <= 1e-8);
  CHECK(e.contains(-3, 4));
  CHECK_FALSE(e.contains(-3, 6));
  CHECK(e.area() == doctest::Approx(3 * std::numbers::pi));

  Eigen::MatrixXd line(6, 2);
  for (int i = 0; i < 6; ++i) line.row(i) << i, 2 * i;
  CHECK_THROWS_AS(fit_ellipse(line), Error);
  CHECK_THROWS_AS(fit_ellipse(ellipse_points(0, 0, 1, 1, 0, 4)), Error);
}

TEST_CASE("ellipse overlap") {
  Ellipse a;
  a.a = 2;
  a.b = 1;
  a.angle = 0.3;
  const Overlap self = ellipse_overlap(a, a);
  CHECK(self.fraction_of_a == 1.0);
  CHECK(self.fraction_of_b == 1.0);

  Ellipse far = a;
  far.center = {20, 0};
  CHECK(ellipse_overlap(a, far).fraction_of_a == 0.0);

  Ellipse small, big;
  small.a = small.b = 1;
  big.a = big.b = 2;
  const Overlap o = ellipse_overlap(small, big, 200000, 3);
  CHECK(o.fraction_of_a == 1.0);
  CHECK(std::abs(o.fraction_of_b - 0.25) <= 0.01);
  CHECK(std::abs(o.intersection_area - std::numbers::pi) <= 0.05);
  CHECK(ellipse_overlap(small, big, 1000, 4).fraction_of_b == ellipse_overlap(small, big, 1000, 4).fraction_of_b);
}

TEST_CASE("fold aggregation") {
  const std::vector<double> v{0.0, 1.0};
  const FoldSummary s = aggregate_folds(v);
  CHECK(s.mean == 0.5);
  CHECK(s.ci95 == doctest::Approx(0.98).epsilon(1e-12));
  CHECK(s.n == 2);
  const std::vector<double> one{3.0};
  CHECK_THROWS_AS(aggregate_folds(one), Error);
  CHECK_THROWS_AS(aggregate_folds(std::vector<double>{}), Error);
}

TEST_CASE("handcrafted features") {
  const HandcraftedExtractor ex;
  const FeatureVector f = ex.extract(generate_phantom(3).volume);
  CHECK(f.values.size() == 121);
  CHECK(f.extractor_id == "handcrafted-v1");
  for (double v : f.values) CHECK(std::isfinite(v));
  CHECK(extract_features(generate_phantom(3).volume).values == f.values);

  const Volume flat{Grid3<float>(cube(8), 0.25f)};
  const FeatureVector g = ex.extract(flat);
  for (int o = 0; o < 8; ++o) {
    CHECK(g.values[o * 4 + 0] == doctest::Approx(0.25));
    CHECK(g.values[o * 4 + 1] == doctest::Approx(0.0));
    CHECK(g.values[o * 4 + 2] == doctest::Approx(0.25));
    CHECK(g.values[o * 4 + 3] == doctest::Approx(0.25));
  }
  double hist = 0;
  int nonzero = 0;
  for (int i = 32; i < 48; ++i) {
    hist += g.values[i];
    nonzero += g.values[i] != 0.0;
  }
  CHECK(hist == doctest::Approx(1.0));
  CHECK(nonzero == 1);
  for (std::size_t i = 48; i < 121; ++i) CHECK(g.values[i] == doctest::Approx(0.25));

  CHECK_THROWS_AS(ex.extract(Volume{Grid3<float>(cube(3))}), Error);
  std::vector<FeatureVector> mixed{f, g};
  mixed[1].extractor_id = "other";
  CHECK_THROWS_AS(feature_matrix(mixed), Error);
  mixed[1].extractor_id = f.extractor_id;
  CHECK(feature_matrix(mixed).rows() == 2);
}

TEST_CASE("metric report serialization") {
  MetricReport r;
  r.extractor_id = "handcrafted-v1";
  r.folds.push_back({0, 1.5, 0.1, 0.02, 4, 4, 4});
  r.folds.push_back({1, 2.5, 0.3, std::nullopt, 4, 4, 0});
  const nlohmann::json j = r.to_json();
  CHECK(j.dump().find("handcrafted-v1") != std::string::npos);
  const std::string csv = r.to_csv();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}

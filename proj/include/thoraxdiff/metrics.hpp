#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "thoraxdiff/volume.hpp"

namespace thoraxdiff {

// --- features ---------------------------------------------------------------

struct FeatureVector {
  std::vector<double> values;
  std::string extractor_id;
};

// Pluggable feature extractor. Reports carry id() so numbers from different
// extractors are never compared silently.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string id() const = 0;
  virtual std::size_t length() const = 0;
  virtual FeatureVector extract(const Volume& vol) const = 0;
};

// Deterministic handcrafted features:
//   8 octants x {mean, std, min, max}                 32
//   16-bin intensity histogram over [-1, 1] (fractions) 16
//   block-mean pyramid at 4^3, 2^3 and 1^3               73
// for 121 values in total, independent of resolution (side >= 4).
class HandcraftedExtractor final : public FeatureExtractor {
 public:
  static constexpr const char* kId = "handcrafted-v1";
  static constexpr std::size_t kLength = 121;

  std::string id() const override { return kId; }
  std::size_t length() const override { return kLength; }
  FeatureVector extract(const Volume& vol) const override;
};

FeatureVector extract_features(const Volume& vol);

// Stack feature vectors as rows. All must share extractor and length.
Eigen::MatrixXd feature_matrix(std::span<const FeatureVector> features);

// --- image quality ------------------------------------------------------------

// sum(m * (real - syn)^2) / sum(m)
double masked_mse(const Volume& real, const Volume& syn, const Grid3<std::uint8_t>& m_l);

// Square root of a symmetric PSD matrix via eigendecomposition, negative
// eigenvalues clamped at zero.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& s);

// Frechet distance between Gaussians (mu_a, cov_a) and (mu_b, cov_b).
double fid_from_stats(const Eigen::VectorXd& mu_a, const Eigen::MatrixXd& cov_a,
                      const Eigen::VectorXd& mu_b, const Eigen::MatrixXd& cov_b);
// Rows are samples; needs at least two per set.
double fid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

enum class MmdEstimator { Unbiased, Biased };
const char* to_string(MmdEstimator e) noexcept;

struct RbfKernel {
  std::optional<double> bandwidth;  // median heuristic when empty
};

struct MmdResult {
  double value = 0.0;  // squared MMD
  double bandwidth = 0.0;
  bool degenerate = false;  // zero median distance, value forced to 0
  MmdEstimator estimator = MmdEstimator::Unbiased;
};

// Squared MMD with k(x, y) = exp(-|x - y|^2 / (2 h^2)).
// Unbiased: for equal set sizes the paired U-statistic
//   1/(m(m-1)) sum_{i != j} [k(a_i,a_j) + k(b_i,b_j) - k(a_i,b_j) - k(a_j,b_i)],
// otherwise the two-sample form with within-set diagonals removed.
// Biased: the V-statistic mean(Kaa) + mean(Kbb) - 2 mean(Kab).
MmdResult mmd(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const RbfKernel& kernel = {},
              MmdEstimator estimator = MmdEstimator::Unbiased);

// Median over distinct pairs of the pooled rows.
double median_pairwise_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

// --- segmentation -------------------------------------------------------------

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

Confusion confusion(const Grid3<std::uint8_t>& pred, const Grid3<std::uint8_t>& truth);
// Two empty masks score 1.
double dice(const Grid3<std::uint8_t>& pred, const Grid3<std::uint8_t>& truth);
double sensitivity(const Grid3<std::uint8_t>& pred, const Grid3<std::uint8_t>& truth);
double specificity(const Grid3<std::uint8_t>& pred, const Grid3<std::uint8_t>& truth);

// --- diversity analysis -------------------------------------------------------

Eigen::MatrixXd pairwise_distances(const Eigen::MatrixXd& points);

// Classical MDS into two dimensions; returns n x 2.
Eigen::MatrixXd mds_embed(const Eigen::MatrixXd& d);

struct Ellipse {
  Eigen::Vector2d center{0.0, 0.0};
  double a = 1.0, b = 1.0;  // semi-axes
  double angle = 0.0;       // rotation of the a-axis, radians

  bool contains(double x, double y) const noexcept;
  double area() const noexcept;
};

// Algebraic least-squares conic fit constrained to ellipses (numerically
// stable direct method). Needs >= 5 non-collinear points (n x 2).
Ellipse fit_ellipse(const Eigen::MatrixXd& points);

struct Overlap {
  double intersection_area = 0.0;
  double fraction_of_a = 0.0;  // intersection / area(a)
  double fraction_of_b = 0.0;
  std::size_t samples = 0;
};

// Seeded Monte Carlo over the bounding box of both ellipses.
Overlap ellipse_overlap(const Ellipse& a, const Ellipse& b, std::size_t samples = 100000,
                        std::uint64_t seed = 0);

// --- reporting ------------------------------------------------------------------

struct FoldSummary {
  double mean = 0.0;
  double ci95 = 0.0;  // half-width, 1.96 * sd / sqrt(n)
  std::size_t n = 0;
};

FoldSummary aggregate_folds(std::span<const double> per_fold);

struct FoldMetrics {
  int fold = 0;
  double fid = 0.0;
  double mmd = 0.0;
  std::optional<double> mse;  // absent when the fold has no pairs
  std::size_t n_real = 0, n_syn = 0, n_pairs = 0;
};

struct MetricReport {
  std::string extractor_id;
  MmdEstimator mmd_estimator = MmdEstimator::Unbiased;
  std::optional<double> mmd_bandwidth;  // fixed bandwidth, or empty for the median heuristic
  std::vector<FoldMetrics> folds;

  nlohmann::json to_json() const;
  // Header plus one row per fold.
  std::string to_csv() const;
};

}  // namespace thoraxdiff

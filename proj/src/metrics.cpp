#include "thoraxdiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "thoraxdiff/error.hpp"
#include "thoraxdiff/rng.hpp"

namespace thoraxdiff {

// --- features ---------------------------------------------------------------

namespace {

// Block index of coordinate i when n cells are split into k bins.
inline int bin_of(int i, int n, int k) { return static_cast<int>(static_cast<long>(i) * k / n); }

void pyramid_level(const Volume& vol, int k, std::vector<double>& out) {
  const Shape3 s = vol.shape();
  std::vector<double> sum(static_cast<std::size_t>(k) * k * k, 0.0);
  std::vector<std::size_t> cnt(sum.size(), 0);
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        const std::size_t b =
            (static_cast<std::size_t>(bin_of(z, s.d, k)) * k + bin_of(y, s.h, k)) * k + bin_of(x, s.w, k);
        sum[b] += vol.values(z, y, x);
        ++cnt[b];
      }
  for (std::size_t b = 0; b < sum.size(); ++b) out.push_back(sum[b] / static_cast<double>(cnt[b]));
}

}  // namespace

FeatureVector HandcraftedExtractor::extract(const Volume& vol) const {
  const Shape3 s = vol.shape();
  require(s.d >= 4 && s.h >= 4 && s.w >= 4, ErrorKind::Dimension,
          "feature extraction needs every side >= 4, got " + s.str());
  for (float v : vol.values.values())
    if (!std::isfinite(v)) throw NumericError(-1, "feature extraction: non-finite voxel");

  FeatureVector f;
  f.extractor_id = kId;
  f.values.reserve(kLength);

  // Octant statistics. The ladder below is the same binning with k = 2.
  struct Acc {
    double sum = 0, sq = 0, lo = INFINITY, hi = -INFINITY;
    std::size_t n = 0;
  };
  Acc oct[8];
  std::array<double, 16> hist{};
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        const double v = vol.values(z, y, x);
        Acc& a = oct[(bin_of(z, s.d, 2) * 2 + bin_of(y, s.h, 2)) * 2 + bin_of(x, s.w, 2)];
        a.sum += v;
        a.sq += v * v;
        a.lo = std::min(a.lo, v);
        a.hi = std::max(a.hi, v);
        ++a.n;
        const int b = std::clamp(static_cast<int>(std::floor((v + 1.0) * 8.0)), 0, 15);
        hist[static_cast<std::size_t>(b)] += 1.0;
      }
  for (const Acc& a : oct) {
    const double mean = a.sum / static_cast<double>(a.n);
    const double var = std::max(0.0, a.sq / static_cast<double>(a.n) - mean * mean);
    f.values.insert(f.values.end(), {mean, std::sqrt(var), a.lo, a.hi});
  }
  const double total = static_cast<double>(s.size());
  for (double h : hist) f.values.push_back(h / total);
  for (int k : {4, 2, 1}) pyramid_level(vol, k, f.values);
  return f;
}

FeatureVector extract_features(const Volume& vol) { return HandcraftedExtractor{}.extract(vol); }

Eigen::MatrixXd feature_matrix(std::span<const FeatureVector> features) {
  require(!features.empty(), ErrorKind::InsufficientData, "feature set is empty");
  const std::size_t d = features[0].values.size();
  Eigen::MatrixXd m(static_cast<Eigen::Index>(features.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < features.size(); ++i) {
    require(features[i].values.size() == d, ErrorKind::Dimension, "feature vectors differ in length");
    require(features[i].extractor_id == features[0].extractor_id, ErrorKind::Domain,
            "feature set mixes extractors '" + features[0].extractor_id + "' and '" +
                features[i].extractor_id + "'");
    for (std::size_t j = 0; j < d; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = features[i].values[j];
  }
  return m;
}

// --- image quality ------------------------------------------------------------

double masked_mse(const Volume& real, const Volume& syn, const Grid3<std::uint8_t>& m_l) {
  require_same_shape(real.values, syn.values, "masked_mse");
  require_same_shape(real.values, m_l, "masked_mse mask");
  double num = 0.0;
  std::size_t den = 0;
  for (std::size_t i = 0; i < m_l.size(); ++i) {
    require(m_l[i] <= 1, ErrorKind::Domain, "masked_mse: lung mask is not binary");
    if (!m_l[i]) continue;
    const double r = static_cast<double>(real.values[i]) - static_cast<double>(syn.values[i]);
    num += r * r;
    ++den;
  }
  require(den > 0, ErrorKind::Degenerate, "masked_mse: lung mask is empty");
  return num / static_cast<double>(den);
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& s) {
  require(s.rows() == s.cols(), ErrorKind::Dimension, "psd_sqrt: matrix is not square");
  const Eigen::MatrixXd sym = 0.5 * (s + s.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

double fid_from_stats(const Eigen::VectorXd& mu_a, const Eigen::MatrixXd& cov_a,
                      const Eigen::VectorXd& mu_b, const Eigen::MatrixXd& cov_b) {
  const auto d = mu_a.size();
  require(mu_b.size() == d && cov_a.rows() == d && cov_a.cols() == d && cov_b.rows() == d &&
              cov_b.cols() == d,
          ErrorKind::Dimension, "fid: statistics have inconsistent dimensions");
  // Tr((A B)^1/2) = Tr((A^1/2 B A^1/2)^1/2), and the inner product is symmetric.
  const Eigen::MatrixXd ra = psd_sqrt(cov_a);
  const Eigen::MatrixXd inner = ra * cov_b * ra;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()),
                                                    Eigen::EigenvaluesOnly);
  const double tr_cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross;
  return std::max(value, 0.0);
}

namespace {

void gaussian_fit(const Eigen::MatrixXd& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
  mu = x.colwise().mean().transpose();
  const Eigen::MatrixXd c = x.rowwise() - mu.transpose();
  cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
}

}  // namespace

double fid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  require(a.rows() >= 2 && b.rows() >= 2, ErrorKind::InsufficientData,
          "fid needs at least 2 samples per set");
  require(a.cols() == b.cols(), ErrorKind::Dimension, "fid: feature dimensions differ");
  Eigen::VectorXd ma, mb;
  Eigen::MatrixXd ca, cb;
  gaussian_fit(a, ma, ca);
  gaussian_fit(b, mb, cb);
  return fid_from_stats(ma, ca, mb, cb);
}

const char* to_string(MmdEstimator e) noexcept {
  return e == MmdEstimator::Unbiased ? "unbiased" : "biased";
}

double median_pairwise_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd all(a.rows() + b.rows(), a.cols());
  all << a, b;
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(all.rows() * (all.rows() - 1) / 2));
  for (Eigen::Index i = 0; i < all.rows(); ++i)
    for (Eigen::Index j = i + 1; j < all.rows(); ++j) d.push_back((all.row(i) - all.row(j)).norm());
  require(!d.empty(), ErrorKind::InsufficientData, "median distance needs at least 2 points");
  const std::size_t mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
  if (d.size() % 2 == 1) return d[mid];
  const double upper = d[mid];
  const double lower = *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

MmdResult mmd(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const RbfKernel& kernel,
              MmdEstimator estimator) {
  require(a.rows() >= 2 && b.rows() >= 2, ErrorKind::InsufficientData,
          "mmd needs at least 2 samples per set");
  require(a.cols() == b.cols(), ErrorKind::Dimension, "mmd: feature dimensions differ");
  MmdResult r;
  r.estimator = estimator;
  if (kernel.bandwidth) {
    require(*kernel.bandwidth > 0.0, ErrorKind::Config, "mmd: bandwidth must be > 0");
    r.bandwidth = *kernel.bandwidth;
  } else {
    r.bandwidth = median_pairwise_distance(a, b);
    if (r.bandwidth == 0.0) {
      r.degenerate = true;
      return r;
    }
  }
  const double g = 1.0 / (2.0 * r.bandwidth * r.bandwidth);
  const auto gram = [&](const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    Eigen::MatrixXd k(x.rows(), y.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < y.rows(); ++j) k(i, j) = std::exp(-g * (x.row(i) - y.row(j)).squaredNorm());
    return k;
  };
  const Eigen::MatrixXd kaa = gram(a, a), kbb = gram(b, b), kab = gram(a, b);
  const double m = static_cast<double>(a.rows()), n = static_cast<double>(b.rows());

  if (estimator == MmdEstimator::Biased) {
    r.value = kaa.mean() + kbb.mean() - 2.0 * kab.mean();
    return r;
  }
  const double off_aa = kaa.sum() - kaa.trace();
  const double off_bb = kbb.sum() - kbb.trace();
  if (a.rows() == b.rows()) {
    const double off_ab = kab.sum() - kab.trace();
    r.value = (off_aa + off_bb - 2.0 * off_ab) / (m * (m - 1.0));
  } else {
    r.value = off_aa / (m * (m - 1.0)) + off_bb / (n * (n - 1.0)) - 2.0 * kab.mean();
  }
  return r;
}

// --- segmentation -------------------------------------------------------------

Confusion confusion(const Grid3<std::uint8_t>& pred, const Grid3<std::uint8_t>& truth) {
  require_same_shape(pred, truth, "confusion");
  Confusion c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    require(pred[i] <= 1 && truth[i] <= 1, ErrorKind::Domain, "segmentation masks must be binary");
    if (pred[i]) (truth[i] ? c.tp : c.fp)++;
    else (truth[i] ? c.fn : c.tn)++;
  }
  return c;
}

double dice(const Grid3<std::uint8_t>& pred, const Grid3<std::uint8_t>& truth) {
  const Confusion c = confusion(pred, truth);
  const std::size_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

double sensitivity(const Grid3<std::uint8_t>& pred, const Grid3<std::uint8_t>& truth) {
  const Confusion c = confusion(pred, truth);
  require(c.tp + c.fn > 0, ErrorKind::Degenerate, "sensitivity undefined: ground truth is empty");
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

double specificity(const Grid3<std::uint8_t>& pred, const Grid3<std::uint8_t>& truth) {
  const Confusion c = confusion(pred, truth);
  require(c.tn + c.fp > 0, ErrorKind::Degenerate, "specificity undefined: ground truth has no negatives");
  return static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
}

// --- diversity analysis -------------------------------------------------------

Eigen::MatrixXd pairwise_distances(const Eigen::MatrixXd& p) {
  Eigen::MatrixXd d(p.rows(), p.rows());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    d(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < p.rows(); ++j) d(i, j) = d(j, i) = (p.row(i) - p.row(j)).norm();
  }
  return d;
}

Eigen::MatrixXd mds_embed(const Eigen::MatrixXd& d) {
  require(d.rows() == d.cols(), ErrorKind::Dimension, "mds: distance matrix is not square");
  const Eigen::Index n = d.rows();
  const double scale = std::max(1.0, d.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < n; ++i) {
    require(d(i, i) == 0.0, ErrorKind::Domain, "mds: distance matrix has a non-zero diagonal");
    for (Eigen::Index j = 0; j < n; ++j) {
      require(std::isfinite(d(i, j)) && d(i, j) >= 0.0, ErrorKind::Domain,
              "mds: distances must be finite and non-negative");
      require(std::abs(d(i, j) - d(j, i)) <= 1e-12 * scale, ErrorKind::Domain,
              "mds: distance matrix is not symmetric");
    }
  }
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, 2);
  if (n < 2) return out;
  const Eigen::MatrixXd sq = d.cwiseProduct(d);
  const Eigen::MatrixXd j = Eigen::MatrixXd::Identity(n, n) - Eigen::MatrixXd::Constant(n, n, 1.0 / n);
  const Eigen::MatrixXd bmat = -0.5 * j * sq * j;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (bmat + bmat.transpose()));
  // Eigen sorts ascending; the top two come last.
  for (int k = 0; k < 2 && k < n; ++k) {
    const Eigen::Index idx = n - 1 - k;
    const double lambda = std::max(0.0, es.eigenvalues()(idx));
    out.col(k) = es.eigenvectors().col(idx) * std::sqrt(lambda);
  }
  return out;
}

bool Ellipse::contains(double x, double y) const noexcept {
  const double dx = x - center.x(), dy = y - center.y();
  const double c = std::cos(angle), s = std::sin(angle);
  const double u = (c * dx + s * dy) / a, w = (-s * dx + c * dy) / b;
  return u * u + w * w <= 1.0;
}

double Ellipse::area() const noexcept { return std::numbers::pi * a * b; }

Ellipse fit_ellipse(const Eigen::MatrixXd& points) {
  require(points.cols() == 2, ErrorKind::Dimension, "fit_ellipse expects n x 2 points");
  const Eigen::Index n = points.rows();
  require(n >= 5, ErrorKind::Degenerate,
          "fit_ellipse needs at least 5 points, got " + std::to_string(n));

  // Center and scale first; the conic fit is badly conditioned otherwise.
  const Eigen::RowVector2d mean = points.colwise().mean();
  const Eigen::MatrixXd c = points.rowwise() - mean;
  const double scale = std::sqrt(c.squaredNorm() / static_cast<double>(n));
  require(scale > 0.0, ErrorKind::Degenerate, "fit_ellipse: all points coincide");
  const Eigen::MatrixXd p = c / scale;
  {
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(p.transpose() * p / static_cast<double>(n));
    require(es.eigenvalues()(0) > 1e-10 * es.eigenvalues()(1), ErrorKind::Degenerate,
            "fit_ellipse: points are collinear");
  }

  Eigen::MatrixXd d1(n, 3), d2(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x = p(i, 0), y = p(i, 1);
    d1.row(i) << x * x, x * y, y * y;
    d2.row(i) << x, y, 1.0;
  }
  const Eigen::Matrix3d s1 = d1.transpose() * d1;
  const Eigen::Matrix3d s2 = d1.transpose() * d2;
  const Eigen::Matrix3d s3 = d2.transpose() * d2;
  const Eigen::FullPivLU<Eigen::Matrix3d> lu(s3);
  require(lu.isInvertible(), ErrorKind::Degenerate, "fit_ellipse: singular scatter matrix");
  const Eigen::Matrix3d t = -lu.solve(s2.transpose());
  const Eigen::Matrix3d m = s1 + s2 * t;
  // Premultiply by the inverse of the ellipse constraint matrix.
  Eigen::Matrix3d mc;
  mc.row(0) = m.row(2) / 2.0;
  mc.row(1) = -m.row(1);
  mc.row(2) = m.row(0) / 2.0;
  Eigen::EigenSolver<Eigen::Matrix3d> es(mc);
  int pick = -1;
  double best = 0.0;
  for (int k = 0; k < 3; ++k) {
    const Eigen::Vector3d v = es.eigenvectors().col(k).real();
    const double cond = 4.0 * v(0) * v(2) - v(1) * v(1);
    if (cond > best) {
      best = cond;
      pick = k;
    }
  }
  require(pick >= 0, ErrorKind::Degenerate, "fit_ellipse: no elliptical solution");
  Eigen::Vector3d a1 = es.eigenvectors().col(pick).real();
  if (a1(0) + a1(2) < 0.0) a1 = -a1;  // positive-definite quadratic part
  const Eigen::Vector3d a2 = t * a1;
  const double A = a1(0), B = a1(1), C = a1(2), D = a2(0), E = a2(1), F = a2(2);

  Eigen::Matrix2d q;
  q << 2.0 * A, B, B, 2.0 * C;
  const Eigen::Vector2d ctr = q.fullPivLu().solve(Eigen::Vector2d(-D, -E));
  const double f0 = F + 0.5 * (D * ctr.x() + E * ctr.y());
  Eigen::Matrix2d quad;
  quad << A, B / 2.0, B / 2.0, C;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> qs(quad);
  const double r0 = -f0 / qs.eigenvalues()(0), r1 = -f0 / qs.eigenvalues()(1);
  require(r0 > 0.0 && r1 > 0.0 && std::isfinite(r0) && std::isfinite(r1), ErrorKind::Degenerate,
          "fit_ellipse: fitted conic is not a real ellipse");

  Ellipse e;
  e.center = ctr * scale + mean.transpose();
  // Smaller eigenvalue -> longer axis; report that one as a.
  e.a = std::sqrt(r0) * scale;
  e.b = std::sqrt(r1) * scale;
  const Eigen::Vector2d dir = qs.eigenvectors().col(0);
  e.angle = std::atan2(dir.y(), dir.x());
  return e;
}

Overlap ellipse_overlap(const Ellipse& a, const Ellipse& b, std::size_t samples,
                        std::uint64_t seed) {
  require(samples > 0, ErrorKind::Config, "ellipse_overlap: samples must be > 0");
  require(a.a > 0 && a.b > 0 && b.a > 0 && b.b > 0, ErrorKind::Domain,
          "ellipse_overlap: semi-axes must be positive");
  const auto half = [](const Ellipse& e) {
    const double c = std::cos(e.angle), s = std::sin(e.angle);
    return Eigen::Vector2d(std::hypot(e.a * c, e.b * s), std::hypot(e.a * s, e.b * c));
  };
  const Eigen::Vector2d ha = half(a), hb = half(b);
  const Eigen::Vector2d lo = (a.center - ha).cwiseMin(b.center - hb);
  const Eigen::Vector2d hi = (a.center + ha).cwiseMax(b.center + hb);
  const double box = (hi.x() - lo.x()) * (hi.y() - lo.y());

  Stream rng({seed, 0, 0, Purpose::Metric});
  std::size_t in_a = 0, in_b = 0, both = 0;
  for (std::size_t i = 0; i < samples; ++i) {
    const double x = lo.x() + (hi.x() - lo.x()) * rng.uniform();
    const double y = lo.y() + (hi.y() - lo.y()) * rng.uniform();
    const bool ia = a.contains(x, y), ib = b.contains(x, y);
    in_a += ia;
    in_b += ib;
    both += ia && ib;
  }
  Overlap o;
  o.samples = samples;
  o.intersection_area = box * static_cast<double>(both) / static_cast<double>(samples);
  o.fraction_of_a = in_a ? static_cast<double>(both) / static_cast<double>(in_a) : 0.0;
  o.fraction_of_b = in_b ? static_cast<double>(both) / static_cast<double>(in_b) : 0.0;
  return o;
}

// --- reporting ------------------------------------------------------------------

FoldSummary aggregate_folds(std::span<const double> v) {
  require(v.size() >= 2, ErrorKind::InsufficientData,
          "confidence interval needs at least 2 folds, got " + std::to_string(v.size()));
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  return {mean, 1.96 * sd / std::sqrt(n), v.size()};
}

namespace {

nlohmann::json summary_json(const std::vector<double>& values) {
  if (values.size() < 2) {
    if (values.empty()) return nullptr;
    return {{"mean", values[0]}, {"ci95", nullptr}, {"n", 1}};
  }
  const FoldSummary s = aggregate_folds(values);
  return {{"mean", s.mean}, {"ci95", s.ci95}, {"n", s.n}};
}

}  // namespace

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j;
  j["extractor_id"] = extractor_id;
  j["mmd"] = {{"kernel", "rbf"},
              {"estimator", to_string(mmd_estimator)},
              {"bandwidth", mmd_bandwidth ? nlohmann::json(*mmd_bandwidth) : nlohmann::json("median")}};
  j["ci_method"] = "normal approximation, mean +- 1.96*sd/sqrt(n) over folds";
  std::vector<double> f, m, e;
  nlohmann::json folds_j = nlohmann::json::array();
  for (const auto& fm : folds) {
    f.push_back(fm.fid);
    m.push_back(fm.mmd);
    if (fm.mse) e.push_back(*fm.mse);
    folds_j.push_back({{"fold", fm.fold},
                       {"fid", fm.fid},
                       {"mmd", fm.mmd},
                       {"mse", fm.mse ? nlohmann::json(*fm.mse) : nlohmann::json(nullptr)},
                       {"n_real", fm.n_real},
                       {"n_syn", fm.n_syn},
                       {"n_pairs", fm.n_pairs}});
  }
  j["folds"] = std::move(folds_j);
  j["summary"] = {{"fid", summary_json(f)}, {"mmd", summary_json(m)}, {"mse", summary_json(e)}};
  return j;
}

std::string MetricReport::to_csv() const {
  std::string out = "fold,fid,mmd,mse,n_real,n_syn,n_pairs\n";
  char line[256];
  for (const auto& fm : folds) {
    char mse[32] = "";
    if (fm.mse) std::snprintf(mse, sizeof mse, "%.17g", *fm.mse);
    std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%s,%zu,%zu,%zu\n", fm.fold, fm.fid, fm.mmd, mse,
                  fm.n_real, fm.n_syn, fm.n_pairs);
    out += line;
  }
  return out;
}

}  // namespace thoraxdiff

// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. `--only 3,7` restricts the run.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "thoraxdiff/cli.hpp"
#include "thoraxdiff/diffusion.hpp"
#include "thoraxdiff/error.hpp"
#include "thoraxdiff/metrics.hpp"
#include "thoraxdiff/phantom.hpp"
#include "thoraxdiff/rng.hpp"
#include "thoraxdiff/schedule.hpp"
#include "thoraxdiff/trainer.hpp"
#include "thoraxdiff/volume_io.hpp"

using namespace thoraxdiff;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

const fs::path& root() {
  static const fs::path r = [] {
    const fs::path p = fs::temp_directory_path() / "thoraxdiff_acceptance";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return r;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = root() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (code != 0) std::fprintf(stderr, "  command failed (%d): %s\n", code, err.str().c_str());
  return code;
}

// Noise predictor that knows x0 and returns the noise consistent with x_t.
class OraclePredictor : public NoisePredictor {
 public:
  OraclePredictor(const Grid3<float>& x0, const NoiseSchedule& s) : x0_(x0), s_(s) {}
  int in_channels() const override { return 3; }
  Tensor<float> predict_noise(const Tensor<float>& cond, int t) const override {
    const double ab = s_.alpha_bar(t);
    Tensor<float> out(1, cond.shape());
    for (std::size_t v = 0; v < cond.voxels(); ++v)
      out[v] = static_cast<float>((cond.voxel(v)[0] - std::sqrt(ab) * x0_[v]) / std::sqrt(1.0 - ab));
    return out;
  }

 private:
  const Grid3<float>& x0_;
  const NoiseSchedule& s_;
};

// --- 1 ----------------------------------------------------------------------

Outcome schedule_suite() {
  const NoiseSchedule s = build_cosine_schedule(250, 0.008);
  double worst_mono = INFINITY;
  for (int t = 1; t <= 250; ++t) worst_mono = std::min(worst_mono, s.alpha_bar(t - 1) - s.alpha_bar(t));
  const bool ok250 = std::abs(s.alpha_bar(0) - 1.0) <= 1e-12 && worst_mono > 0 && s.alpha_bar(250) < 1e-3;

  const NoiseSchedule s4 = build_cosine_schedule(4, 0.008);
  const auto f = [](double t) {
    const double c = std::cos((t / 4.0 + 0.008) / 1.008 * std::numbers::pi / 2.0);
    return c * c;
  };
  double err4 = 0, oracle = 1.0;
  for (int t = 1; t <= 4; ++t) {
    oracle *= 1.0 - std::min(1.0 - f(t) / f(t - 1), 0.999);
    err4 = std::max(err4, std::abs(s4.alpha_bar(t) - oracle));
  }
  err4 = std::max(err4, std::abs(s4.alpha_bar(0) - 1.0));
  return {ok250 && err4 <= 1e-12,
          fmt("abar_0=%.17g min_decrease=%.3g abar_T=%.3g T4_err=%.3g", s.alpha_bar(0), worst_mono,
              s.alpha_bar(250), err4)};
}

// --- 2 ----------------------------------------------------------------------

Outcome extra_pulmonary_exactness() {
  // Short chain: the property holds at every step, and 10 runs of the full
  // 250-step chain on the desk network would not fit the time budget.
  const NoiseSchedule s = build_cosine_schedule(25);
  double worst = 0;
  std::size_t lung_changed = 0;
  for (std::uint32_t i = 0; i < 10; ++i) {
    const std::uint64_t seed = phantom_seed(2000, i);
    const auto net = Denoiser<float>::initialized(DenoiserConfig{}, seed, true);
    const Phantom p = generate_phantom(seed);
    SamplerConfig c;
    c.seed = seed;
    const Volume out = aas_sample(net, p.volume, p.layout, s, c);
    const MaskPair m = derive_masks(p.layout);
    for (std::size_t v = 0; v < m.extra.size(); ++v) {
      if (m.extra[v]) worst = std::max(worst, static_cast<double>(std::abs(out.values[v] - p.volume.values[v])));
      else lung_changed += out.values[v] != p.volume.values[v];
    }
  }
  return {worst <= 1e-6 && lung_changed > 0,
          fmt("max |out-ref| on extra-pulmonary voxels = %.3g over 10 seeds (T=25), lung voxels changed: %zu", worst,
              lung_changed)};
}

// --- 3 ----------------------------------------------------------------------

Outcome perfect_denoiser_inversion() {
  const NoiseSchedule s = build_cosine_schedule(10);
  const Phantom p = generate_phantom(31);
  const OraclePredictor oracle(p.volume.values, s);
  const Tensor<float> ch = layout_to_channels(p.layout, Conditioning::LungAndNodule);
  Grid3<float> eps(p.volume.shape());
  Stream({31, 0, 0, Purpose::Test}).fill_normal(eps.values());
  LatentVolume x = forward_diffuse(p.volume.values, 10, eps, s);
  const Grid3<float> zero(p.volume.shape(), 0.0f);
  while (x.t > 0) x = denoise_step_lung(x, ch, oracle, s, zero);
  double err = 0;
  for (std::size_t i = 0; i < zero.size(); ++i)
    err = std::max(err, static_cast<double>(std::abs(x.values[i] - p.volume.values[i])));
  return {err <= 1e-3, fmt("max |x0_hat - x0| = %.3g", err)};
}

// --- 4 ----------------------------------------------------------------------

Outcome gradient_correctness() {
  DenoiserConfig cfg;
  cfg.resolution = 8;
  cfg.base_width = 4;
  cfg.channel_multipliers = {1};
  cfg.attention_levels = {0};
  cfg.time_embed_dim = 8;
  cfg.groups = 2;
  auto d = Denoiser<double>::initialized(cfg, 4, true);
  Stream r({4, 1, 0, Purpose::Test});
  for (double& p : d.params()) p += 0.05 * r.normal();
  Tensor<double> input(3, cube(8));
  for (double& v : input.values()) v = r.normal();
  std::vector<double> eps(512);
  for (double& v : eps) v = r.normal();

  std::vector<double> grad(d.param_count(), 0.0);
  l1_objective<double>(d.net(), std::span<const double>(d.params()), input, 42, eps, grad);
  double worst = 0;
  const int n = 24;
  for (int k = 0; k < n; ++k) {
    const auto i = static_cast<std::size_t>(r.uniform_int(0, static_cast<std::int64_t>(grad.size()) - 1));
    std::vector<double> q = d.params();
    const double h = 1e-6;
    q[i] += h;
    const double up = l1_objective<double>(d.net(), q, input, 42, eps, {});
    q[i] -= 2 * h;
    const double dn = l1_objective<double>(d.net(), q, input, 42, eps, {});
    const double fd = (up - dn) / (2 * h);
    const double rel = std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-8});
    worst = std::max(worst, rel);
  }
  return {worst < 1e-3, fmt("%d coordinates, worst relative error %.3g", n, worst)};
}

// --- 5 (shared with 6 and 10) -----------------------------------------------

struct Trained {
  fs::path checkpoint;
  std::vector<double> losses;
};

const Trained& trained_model() {
  static const Trained t = [] {
    Trained out;
    std::vector<Volume> vols;
    std::vector<SemanticLayout> lays;
    for (int i = 0; i < 4; ++i) {
      const Phantom p = generate_phantom(100 + i);
      vols.push_back(p.volume);
      lays.push_back(p.layout);
    }
    const auto data = make_examples(vols, lays, Conditioning::LungAndNodule);
    TrainConfig c;
    c.lr = 1e-4;
    c.total_steps = 2000;
    c.batch_size = 1;
    c.checkpoint_every = 0;
    c.seed = 7;
    FitOptions o;
    o.on_step = [&](long, double l) { out.losses.push_back(l); };
    out.checkpoint = fit(DenoiserConfig{}, c, data, fresh_dir("overfit"), o);
    return out;
  }();
  return t;
}

Outcome overfit_smoke() {
  const Trained& t = trained_model();
  if (t.losses.size() != 2000) return {false, "unexpected number of steps"};
  double lead = 0, trail = 0;
  for (int i = 0; i < 100; ++i) {
    lead += t.losses[static_cast<std::size_t>(i)] / 100;
    trail += t.losses[t.losses.size() - 100 + static_cast<std::size_t>(i)] / 100;
  }
  const double base = std::sqrt(2.0 / std::numbers::pi);
  return {trail <= 0.5 * lead && lead < base && trail < base,
          fmt("leading-100 mean %.4f, trailing-100 mean %.4f, ratio %.3f, zero-predictor %.4f", lead, trail,
              trail / lead, base)};
}

Denoiser<float> trained_ema() {
  const Checkpoint ck = load_checkpoint(trained_model().checkpoint);
  return Denoiser<float>(std::make_shared<UNet>(ck.denoiser), ck.state.ema);
}

// --- 6 ----------------------------------------------------------------------

Outcome generative_sanity() {
  const Denoiser<float> net = trained_ema();
  const NoiseSchedule s = build_cosine_schedule(250);
  const int n = 16;
  std::vector<FeatureVector> gen, held, noise;
  for (std::uint32_t i = 0; i < n; ++i) {
    const Phantom ref = generate_phantom(phantom_seed(6000, i));
    SamplerConfig c;
    c.seed = 60;
    c.sample_id = i;
    gen.push_back(extract_features(aas_sample(net, ref.volume, ref.layout, s, c)));
    held.push_back(extract_features(generate_phantom(phantom_seed(6001, i)).volume));
    Volume v{Grid3<float>(cube(32))};
    Stream({6002, i, 0, Purpose::Test}).fill_normal(v.values.values());
    for (float& x : v.values.values()) x = std::clamp(x, -1.0f, 1.0f);
    noise.push_back(extract_features(v));
  }
  const double f_gen = fid(feature_matrix(gen), feature_matrix(held));
  const double f_noise = fid(feature_matrix(noise), feature_matrix(held));
  return {f_gen <= 0.1 * f_noise,
          fmt("FID(generated, held-out) = %.4g, FID(noise, held-out) = %.4g, ratio %.4f", f_gen, f_noise,
              f_gen / f_noise)};
}

// --- 7 ----------------------------------------------------------------------

Grid3<std::uint8_t> mask_bits(unsigned bits) {
  Grid3<std::uint8_t> g(cube(2));
  for (std::size_t i = 0; i < 8; ++i) g[i] = (bits >> i) & 1u;
  return g;
}

Outcome metric_oracles() {
  Stream r({7, 0, 0, Purpose::Test});
  double mse_err = 0;
  for (int c = 0; c < 50; ++c) {
    Volume a{Grid3<float>(cube(4))}, b{Grid3<float>(cube(4))};
    Grid3<std::uint8_t> m(cube(4));
    for (std::size_t i = 0; i < m.size(); ++i) {
      a.values[i] = static_cast<float>(2 * r.uniform() - 1);
      b.values[i] = static_cast<float>(2 * r.uniform() - 1);
      m[i] = r.uniform() < 0.5 ? 1 : 0;
    }
    m[static_cast<std::size_t>(c)] = 1;
    double num = 0, den = 0;
    for (int z = 0; z < 4; ++z)
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
          if (m(z, y, x)) {
            const double d = static_cast<double>(a.values(z, y, x)) - b.values(z, y, x);
            num += d * d;
            den += 1;
          }
    mse_err = std::max(mse_err, std::abs(masked_mse(a, b, m) - num / den));
  }

  Eigen::MatrixXd x(30, 6);
  for (int i = 0; i < 30; ++i)
    for (int j = 0; j < 6; ++j) x(i, j) = r.normal();
  Eigen::RowVectorXd v(6);
  v << 1.0, -0.5, 0.25, 2.0, 0.0, -1.5;
  const Eigen::MatrixXd y = x.rowwise() + v;
  const double fid_err = std::abs(fid(x, y) - v.squaredNorm());
  const double mmd_same = std::abs(mmd(x, x).value);

  std::size_t mismatches = 0, pairs = 0;
  for (unsigned p = 0; p < 256; ++p)
    for (unsigned t = 0; t < 256; ++t) {
      ++pairs;
      const auto pm = mask_bits(p), tm = mask_bits(t);
      std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
      for (std::size_t i = 0; i < 8; ++i) {
        const bool a = pm[i], b = tm[i];
        tp += a && b;
        fp += a && !b;
        fn += !a && b;
        tn += !a && !b;
      }
      const double want_dice = tp + fp + fn == 0 ? 1.0 : 2.0 * tp / (2.0 * tp + fp + fn);
      bool ok = std::abs(dice(pm, tm) - want_dice) <= 1e-15;
      if (tp + fn > 0) ok = ok && std::abs(sensitivity(pm, tm) - double(tp) / double(tp + fn)) <= 1e-15;
      if (tn + fp > 0) ok = ok && std::abs(specificity(pm, tm) - double(tn) / double(tn + fp)) <= 1e-15;
      mismatches += !ok;
    }
  return {mse_err <= 1e-10 && fid_err <= 1e-6 && mmd_same <= 1e-9 && mismatches == 0,
          fmt("mse err %.3g, fid err %.3g, mmd(A,A) %.3g, segmentation mismatches %zu/%zu", mse_err, fid_err,
              mmd_same, mismatches, pairs)};
}

// --- 8 ----------------------------------------------------------------------

Outcome mds_ellipse_suite() {
  Stream r({8, 0, 0, Purpose::Test});
  Eigen::MatrixXd pts(20, 2);
  for (int i = 0; i < 20; ++i) pts.row(i) << r.normal(), r.normal();
  const Eigen::MatrixXd d = pairwise_distances(pts);
  const double rt = (pairwise_distances(mds_embed(d)) - d).cwiseAbs().maxCoeff();

  Eigen::MatrixXd circle(36, 2);
  for (int i = 0; i < 36; ++i) {
    const double th = 2 * std::numbers::pi * i / 36;
    circle.row(i) << 0.7 + 3 * std::cos(th), -2 + 3 * std::sin(th);
  }
  const Ellipse e = fit_ellipse(circle);
  const double rad = std::max(std::abs(e.a - 3), std::abs(e.b - 3));
  const Overlap o = ellipse_overlap(e, e);
  return {rt <= 1e-6 && rad <= 1e-3 && std::abs(o.fraction_of_a - 1) <= 0.01 && std::abs(o.fraction_of_b - 1) <= 0.01,
          fmt("round-trip distance err %.3g, radius err %.3g, self-overlap %.4f", rt, rad, o.fraction_of_a)};
}

// --- 9 ----------------------------------------------------------------------

// loss.csv carries wall-clock time in its last column; everything else must match.
std::string comparable(const fs::path& p) {
  std::string text = slurp(p);
  if (p.filename() != "loss.csv") return text;
  std::stringstream in(text);
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

bool same_tree(const fs::path& a, const fs::path& b, std::size_t& files) {
  std::set<fs::path> names;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) names.insert(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file() && !names.count(fs::relative(e.path(), b))) return false;
  for (const auto& n : names) {
    if (!fs::exists(b / n) || comparable(a / n) != comparable(b / n)) return false;
    ++files;
  }
  return true;
}

// Runs a command twice into the same output directory, keeping each result
// under `<name>.1` and `<name>.2`, so recorded paths agree as well.
bool twice(const fs::path& dir, const std::string& name, const std::vector<std::string>& args,
           std::size_t& files, const std::string& leaf = "") {
  const fs::path work = dir / name;
  for (const char* k : {".1", ".2"}) {
    fs::remove_all(work);
    std::vector<std::string> a = args;
    a.push_back((leaf.empty() ? work : work / leaf).string());
    if (cli(a) != 0) return false;
    fs::rename(work, dir / (name + k));
  }
  fs::rename(dir / (name + ".1"), work);
  return same_tree(work, dir / (name + ".2"), files);
}

Outcome determinism_persistence() {
  const fs::path dir = fresh_dir("determinism");
  std::ofstream(dir / "cfg.json") << R"({"train": {"lr": 1e-4, "seed": 11, "checkpoint_every": 50}})";
  const std::string cfg = (dir / "cfg.json").string();
  std::size_t files = 0;

  const bool pg = twice(dir, "data", {"--config", cfg, "phantom-gen", "--n", "2", "--seed", "9", "--out"}, files);
  const std::string data = (dir / "data").string();
  const bool tr = pg && twice(dir, "run", {"--config", cfg, "train", "--data", data, "--steps", "100", "--out"}, files);

  // Resume from the step-50 checkpoint and finish in a new directory.
  const fs::path fin = fs::path("checkpoints") / "step-0000100";
  bool rs = tr && cli({"--config", cfg, "train", "--data", data, "--steps", "100", "--resume",
                       (dir / "run" / "checkpoints" / "step-0000050").string(), "--out",
                       (dir / "resumed").string()}) == 0;
  rs = rs && same_tree(dir / "run" / fin, dir / "resumed" / fin, files);

  const std::string ck = (dir / "run" / fin).string();
  const bool sm = tr && twice(dir, "sample",
                              {"sample", "--checkpoint", ck, "--layout", data + "/phantom_0000_layout", "--reference",
                               data + "/phantom_0000", "--seed", "3", "--out"},
                              files, "vol");

  Volume odd{Grid3<float>(Shape3{3, 5, 7}), {0.5, 0.75, 1.25}};
  Stream r({9, 0, 0, Purpose::Test});
  for (float& x : odd.values.values()) x = static_cast<float>(r.uniform() * 2 - 1);
  odd.values[0] = -1.0f;
  odd.values[1] = std::nextafter(1.0f, 0.0f);
  odd.values[2] = 1e-38f;
  save_volume(dir / "odd", odd);
  const Phantom p = generate_phantom(99);
  save_layout(dir / "lay", p.layout);
  const bool io = load_volume(dir / "odd") == odd && load_layout(dir / "lay") == p.layout &&
                  slurp(dir / "odd.raw").size() == odd.values.size() * sizeof(float);

  const auto word = [](bool b) { return b ? "identical" : "DIFFERS"; };
  return {pg && tr && rs && sm && io,
          fmt("phantom-gen %s, train %s, resume %s, sample %s, volume I/O %s (%zu files compared)", word(pg),
              word(tr), word(rs), word(sm), io ? "bitwise" : "DIFFERS", files)};
}

// --- 10 ---------------------------------------------------------------------

Outcome ablation_flags() {
  const fs::path dir = fresh_dir("ablation");
  const std::string ck = trained_model().checkpoint.string();
  const Phantom p = generate_phantom(phantom_seed(1000, 0));
  save_volume(dir / "ref", p.volume);
  save_layout(dir / "ref_layout", p.layout);
  const std::string lay = (dir / "ref_layout").string(), ref = (dir / "ref").string();
  bool ok = cli({"sample", "--checkpoint", ck, "--layout", lay, "--reference", ref, "--mode", "aas", "--seed", "10",
                 "--out", (dir / "aas").string()}) == 0;
  ok = ok && cli({"sample", "--checkpoint", ck, "--layout", lay, "--mode", "plain", "--seed", "10", "--out",
                  (dir / "plain").string()}) == 0;
  if (!ok) return {false, "sampling command failed"};
  const Volume aas = load_volume(dir / "aas"), plain = load_volume(dir / "plain");
  const MaskPair m = derive_masks(p.layout);
  double diff = 0, exact = 0;
  for (std::size_t i = 0; i < m.extra.size(); ++i)
    if (m.extra[i]) {
      diff = std::max(diff, static_cast<double>(std::abs(plain.values[i] - aas.values[i])));
      exact = std::max(exact, static_cast<double>(std::abs(aas.values[i] - p.volume.values[i])));
    }
  return {diff > 0.01 && exact <= 1e-6,
          fmt("max |plain-aas| on extra-pulmonary voxels = %.4f, aas max |out-ref| = %.3g", diff, exact)};
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string tok;
      while (std::getline(ss, tok, ',')) only.insert(std::stoi(tok));
    } else {
      std::fprintf(stderr, "usage: %s [--only N[,N...]]\n", argv[0]);
      return 2;
    }
  }

  const std::vector<Criterion> all = {
      {1, "schedule suite", 1, schedule_suite},
      {2, "extra-pulmonary exactness", 120, extra_pulmonary_exactness},
      {3, "perfect-denoiser inversion", 10, perfect_denoiser_inversion},
      {4, "gradient correctness", 60, gradient_correctness},
      {5, "overfit smoke test", 900, overfit_smoke},
      {6, "generative sanity", 600, generative_sanity},
      {7, "metric oracles", 60, metric_oracles},
      {8, "MDS and ellipse suite", 60, mds_ellipse_suite},
      {9, "determinism and persistence", 300, determinism_persistence},
      {10, "ablation flags", 300, ablation_flags},
  };

  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs <= c.budget_s;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::printf("%s criterion %2d  %-28s %s [%.1f s of %.0f s%s]\n", pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs, c.budget_s, in_time ? "" : ", over budget");
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}

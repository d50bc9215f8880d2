#include "thoraxdiff/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "thoraxdiff/diffusion.hpp"
#include "thoraxdiff/error.hpp"
#include "thoraxdiff/phantom.hpp"
#include "thoraxdiff/render.hpp"
#include "thoraxdiff/run_config.hpp"
#include "thoraxdiff/trainer.hpp"
#include "thoraxdiff/volume_io.hpp"

namespace thoraxdiff {

namespace fs = std::filesystem;
using nlohmann::json;

// --- shared helpers -----------------------------------------------------------

namespace {

json parse_json_file(const fs::path& p, ErrorKind on_bad) {
  require(fs::exists(p), ErrorKind::Io, "file not found: " + p.string());
  try {
    return json::parse(read_file(p));
  } catch (const json::exception& e) {
    fail(on_bad, p.string() + ": malformed JSON (" + e.what() + ")");
  }
}

void write_json(const fs::path& p, const json& j) { write_file_atomic(p, j.dump(2) + "\n"); }

// Relative output paths are placed under $THORAXDIFF_OUTPUT_ROOT when set.
fs::path output_path(const std::string& p) {
  fs::path path(p);
  if (path.is_relative()) {
    if (const char* root = std::getenv("THORAXDIFF_OUTPUT_ROOT"); root && *root) return fs::path(root) / path;
  }
  return path;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) fail(ErrorKind::Io, "cannot create directory " + dir.string());
}

json resolved(const std::string& command, const RunConfig& cfg, json inputs) {
  json j = run_config_json(cfg);
  j["command"] = command;
  j["inputs"] = std::move(inputs);
  return j;
}

std::optional<std::string> sidecar_dtype(const fs::path& p) {
  try {
    const json j = json::parse(read_file(p));
    if (j.is_object() && j.contains("dtype") && j["dtype"].is_string() && j.contains("shape"))
      return j["dtype"].get<std::string>();
  } catch (const json::exception&) {
  }
  return std::nullopt;
}

}  // namespace

std::vector<DataEntry> list_dataset(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorKind::Io, "data directory not found: " + dir.string());
  std::vector<DataEntry> out;
  const fs::path index = dir / "index.json";
  if (fs::exists(index)) {
    const json j = parse_json_file(index, ErrorKind::Format);
    require(j.is_object() && j.contains("entries") && j["entries"].is_array(), ErrorKind::Format,
            index.string() + ": field 'entries' must be an array");
    for (const auto& e : j["entries"]) {
      require(e.is_object() && e.contains("id") && e.contains("volume"), ErrorKind::Format,
              index.string() + ": every entry needs 'id' and 'volume'");
      DataEntry d;
      d.id = e["id"].get<std::string>();
      d.volume = dir / e["volume"].get<std::string>();
      if (e.contains("layout") && !e["layout"].is_null()) d.layout = dir / e["layout"].get<std::string>();
      out.push_back(std::move(d));
    }
  } else {
    std::set<std::string> layouts;
    std::vector<std::string> volumes;
    for (const auto& f : fs::directory_iterator(dir)) {
      if (!f.is_regular_file() || f.path().extension() != ".json") continue;
      const auto dtype = sidecar_dtype(f.path());
      if (!dtype) continue;
      const std::string stem = f.path().stem().string();
      if (*dtype == "f32") volumes.push_back(stem);
      else if (*dtype == "u8") layouts.insert(stem);
    }
    for (const auto& v : volumes) {
      DataEntry d{v, dir / v, std::nullopt};
      if (layouts.count(v + "_layout")) d.layout = dir / (v + "_layout");
      out.push_back(std::move(d));
    }
  }
  std::sort(out.begin(), out.end(), [](const DataEntry& a, const DataEntry& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < out.size(); ++i)
    require(out[i].id != out[i - 1].id, ErrorKind::Format,
            dir.string() + ": duplicate entry id '" + out[i].id + "'");
  return out;
}

std::string features_csv(const std::vector<std::string>& ids, const std::vector<FeatureVector>& f) {
  require(ids.size() == f.size(), ErrorKind::Dimension, "features_csv: ids and vectors differ in count");
  std::string out = "id";
  const std::size_t d = f.empty() ? 0 : f[0].values.size();
  for (std::size_t k = 0; k < d; ++k) out += ",f" + std::to_string(k);
  out += "\n";
  char buf[40];
  for (std::size_t i = 0; i < f.size(); ++i) {
    out += ids[i];
    for (double v : f[i].values) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

void read_features_csv(const fs::path& path, std::vector<std::string>& ids, Eigen::MatrixXd& features) {
  require(fs::exists(path), ErrorKind::Io, "feature file not found: " + path.string());
  std::istringstream in(read_file(path));
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line.rfind("id", 0) == 0, ErrorKind::Format,
          path.string() + ": expected a header starting with 'id'");
  const auto cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  std::vector<std::vector<double>> rows;
  ids.clear();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::getline(ls, cell, ',');
    ids.push_back(cell);
    std::vector<double> row;
    while (std::getline(ls, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      require(end && *end == '\0' && !cell.empty(), ErrorKind::Format,
              path.string() + ": non-numeric value '" + cell + "'");
      row.push_back(v);
    }
    require(row.size() == cols, ErrorKind::Format,
            path.string() + ": row '" + ids.back() + "' has " + std::to_string(row.size()) +
                " values, header has " + std::to_string(cols));
    rows.push_back(std::move(row));
  }
  features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t k = 0; k < cols; ++k)
      features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
}

std::vector<FeatureVector> extract_all(const std::vector<DataEntry>& entries, int threads) {
  std::vector<FeatureVector> out(entries.size());
  std::vector<std::exception_ptr> errors(entries.size());
  const auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < entries.size(); i += stride) {
      try {
        out[i] = extract_features(load_volume(entries[i].volume));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1,
                                                std::max<std::size_t>(entries.size(), 1));
  if (n == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(work, t, n);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

// --- commands -----------------------------------------------------------------

namespace {

struct Globals {
  int threads = 1;
  std::string config;
  RunConfig run;
};

int cmd_phantom_gen(const Globals& g, int n, std::uint64_t seed, const std::string& out_arg,
                    std::ostream& out) {
  require(n >= 0, ErrorKind::Config, "phantom-gen: --n must be >= 0");
  const fs::path dir = output_path(out_arg);
  ensure_dir(dir);
  json entries = json::array();
  char name[32];
  for (int i = 0; i < n; ++i) {
    const std::uint64_t s = phantom_seed(seed, static_cast<std::uint32_t>(i));
    const Phantom p = generate_phantom(s, g.run.phantom);
    std::snprintf(name, sizeof name, "phantom_%04d", i);
    save_volume(dir / name, p.volume);
    save_layout(dir / (std::string(name) + "_layout"), p.layout);
    entries.push_back({{"id", name}, {"volume", name}, {"layout", std::string(name) + "_layout"}, {"seed", s}});
  }
  json index = {{"generator", "phantom"}, {"seed", seed}, {"count", n}, {"phantom", g.run.phantom},
                {"entries", std::move(entries)}};
  write_json(dir / "index.json", index);
  write_json(dir / "config.resolved.json",
             resolved("phantom-gen", g.run, {{"n", n}, {"seed", seed}, {"out", dir.string()}}));
  out << (dir / "index.json").string() << "\n";
  return 0;
}

int cmd_train(const Globals& g, const std::string& data_arg, const std::string& out_arg,
              const std::string& resume, std::optional<long> steps, std::ostream& out) {
  RunConfig run = g.run;
  if (steps) run.train.total_steps = *steps;
  run.train.validate();
  const std::vector<DataEntry> entries = list_dataset(data_arg);
  require(!entries.empty(), ErrorKind::Format, "train: no volumes in " + data_arg);
  std::vector<Volume> vols;
  std::vector<SemanticLayout> lays;
  for (const auto& e : entries) {
    require(e.layout.has_value(), ErrorKind::Format, "train: volume '" + e.id + "' has no layout");
    vols.push_back(load_volume(e.volume));
    lays.push_back(load_layout(*e.layout));
  }
  const auto examples = make_examples(vols, lays, run.train.conditioning);
  const fs::path dir = output_path(out_arg);
  ensure_dir(dir);
  json inputs = {{"data", data_arg}, {"out", dir.string()}};
  if (!resume.empty()) inputs["resume"] = resume;
  write_json(dir / "config.resolved.json", resolved("train", run, inputs));
  FitOptions opt;
  if (!resume.empty()) opt.resume_from = fs::path(resume);
  const fs::path ckpt = fit(run.denoiser, run.train, examples, dir, opt);
  out << ckpt.string() << "\n";
  return 0;
}

struct SampleArgs {
  std::string checkpoint, layout, reference, out;
  std::optional<std::string> mode, conditioning;
  std::optional<std::uint64_t> seed;
  bool ema = false, raw = false;
};

int cmd_sample(const Globals& g, const SampleArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig run = g.run;
  SamplerConfig sc = run.sampler;
  if (a.mode) sc.mode = sampler_mode_from_string(*a.mode);
  if (a.seed) sc.seed = *a.seed;
  if (a.ema) sc.use_ema_weights = true;
  if (a.raw) sc.use_ema_weights = false;

  const Checkpoint ck = load_checkpoint(a.checkpoint);
  sc.conditioning = a.conditioning ? conditioning_from_string(*a.conditioning) : ck.train.conditioning;
  require(1 + conditioning_channels(sc.conditioning) == ck.denoiser.in_channels, ErrorKind::Config,
          std::string("sample: conditioning '") + to_string(sc.conditioning) +
              "' does not match the checkpoint, which was trained with '" +
              to_string(ck.train.conditioning) + "'");
  if (sc.mode == SamplerMode::Aas)
    require(!a.reference.empty(), ErrorKind::Config, "sample: --mode aas requires --reference");
  else if (!a.reference.empty())
    err << "warning: --mode plain ignores --reference\n";

  const SemanticLayout layout = load_layout(a.layout);
  require(layout.shape() == cube(ck.denoiser.resolution), ErrorKind::Dimension,
          "sample: layout shape " + layout.shape().str() + " differs from the model resolution " +
              std::to_string(ck.denoiser.resolution));
  const Denoiser<float> model(std::make_shared<UNet>(ck.denoiser),
                              sc.use_ema_weights ? ck.state.ema : ck.state.params);
  const NoiseSchedule schedule = build_schedule(ck.train.schedule);

  std::optional<Volume> ref;
  if (sc.mode == SamplerMode::Aas) ref = load_volume(a.reference);
  const Volume result = sample(model, ref ? &*ref : nullptr, layout, schedule, sc);

  const fs::path base = volume_base(output_path(a.out));
  if (base.has_parent_path()) ensure_dir(base.parent_path());
  save_volume(base, result);
  SampleProvenance prov{sc, ck.train.schedule, checkpoint_id(ck.state),
                        sc.mode == SamplerMode::Aas ? volume_base(a.reference).filename().string() : ""};
  write_json(base.string() + ".provenance.json", provenance_json(prov));
  run.sampler = sc;
  write_json(base.string() + ".config.json",
             resolved("sample", run,
                      {{"checkpoint", a.checkpoint}, {"layout", a.layout},
                       {"reference", a.reference.empty() ? json(nullptr) : json(a.reference)},
                       {"out", base.string()}}));
  out << base.string() << ".json\n";
  return 0;
}

struct PairSpec {
  std::string real, syn;
  int fold = 0;
};

int cmd_evaluate(const Globals& g, const std::string& real_dir, const std::string& syn_dir,
                 const std::string& pairs_path, const std::string& out_arg, std::ostream& out) {
  const auto reals = list_dataset(real_dir);
  const auto syns = list_dataset(syn_dir);
  std::map<std::string, std::size_t> real_at, syn_at;
  for (std::size_t i = 0; i < reals.size(); ++i) real_at[reals[i].id] = i;
  for (std::size_t i = 0; i < syns.size(); ++i) syn_at[syns[i].id] = i;

  std::vector<PairSpec> pairs;
  if (!pairs_path.empty()) {
    const json m = parse_json_file(pairs_path, ErrorKind::Format);
    require(m.is_object() && m.contains("pairs") && m["pairs"].is_array(), ErrorKind::Format,
            pairs_path + ": field 'pairs' must be an array");
    for (const auto& p : m["pairs"]) {
      require(p.is_object() && p.contains("real") && p.contains("syn"), ErrorKind::Format,
              pairs_path + ": every pair needs 'real' and 'syn'");
      PairSpec s{p["real"].get<std::string>(), p["syn"].get<std::string>(), p.value("fold", 0)};
      require(real_at.count(s.real) > 0, ErrorKind::Format,
              pairs_path + ": real entry '" + s.real + "' not found in " + real_dir);
      require(syn_at.count(s.syn) > 0, ErrorKind::Format,
              pairs_path + ": synthetic entry '" + s.syn + "' not found in " + syn_dir);
      pairs.push_back(s);
    }
    require(!pairs.empty(), ErrorKind::Format, pairs_path + ": no pairs listed");
  } else {
    for (const auto& r : reals)
      if (syn_at.count(r.id)) pairs.push_back({r.id, r.id, 0});
  }

  const auto rf = extract_all(reals, g.threads);
  const auto sf = extract_all(syns, g.threads);

  std::map<int, std::vector<const PairSpec*>> by_fold;
  for (const auto& p : pairs) by_fold[p.fold].push_back(&p);
  if (by_fold.empty()) by_fold[0] = {};

  MetricReport report;
  report.extractor_id = HandcraftedExtractor::kId;
  report.mmd_estimator = g.run.metrics.mmd_estimator;
  report.mmd_bandwidth = g.run.metrics.mmd_bandwidth;
  for (const auto& [fold, list] : by_fold) {
    std::vector<FeatureVector> fr, fs_;
    if (pairs_path.empty()) {
      fr = rf;
      fs_ = sf;
    } else {
      std::set<std::string> seen_r, seen_s;
      for (const auto* p : list) {
        if (seen_r.insert(p->real).second) fr.push_back(rf[real_at[p->real]]);
        if (seen_s.insert(p->syn).second) fs_.push_back(sf[syn_at[p->syn]]);
      }
    }
    FoldMetrics fm;
    fm.fold = fold;
    fm.n_real = fr.size();
    fm.n_syn = fs_.size();
    fm.n_pairs = list.size();
    const Eigen::MatrixXd a = feature_matrix(fr), b = feature_matrix(fs_);
    fm.fid = fid(a, b);
    fm.mmd = mmd(a, b, RbfKernel{g.run.metrics.mmd_bandwidth}, g.run.metrics.mmd_estimator).value;
    if (!list.empty()) {
      double sum = 0.0;
      for (const auto* p : list) {
        const DataEntry& r = reals[real_at[p->real]];
        require(r.layout.has_value(), ErrorKind::Format,
                "evaluate: real entry '" + r.id + "' has no layout for the lung mask");
        const MaskPair masks = derive_masks(load_layout(*r.layout));
        sum += masked_mse(load_volume(r.volume), load_volume(syns[syn_at[p->syn]].volume), masks.lung);
      }
      fm.mse = sum / static_cast<double>(list.size());
    }
    report.folds.push_back(fm);
  }

  const fs::path dir = output_path(out_arg);
  ensure_dir(dir);
  write_json(dir / "report.json", report.to_json());
  write_file_atomic(dir / "report.csv", report.to_csv());
  write_json(dir / "config.resolved.json",
             resolved("evaluate", g.run,
                      {{"real", real_dir}, {"syn", syn_dir},
                       {"pairs", pairs_path.empty() ? json(nullptr) : json(pairs_path)},
                       {"out", dir.string()}}));
  out << (dir / "report.json").string() << "\n";
  return 0;
}

int parse_axis(const std::string& s) {
  if (s == "z" || s == "0") return 0;
  if (s == "y" || s == "1") return 1;
  if (s == "x" || s == "2") return 2;
  fail(ErrorKind::Config, "montage: --axis must be z, y or x");
}

void parse_grid(const std::string& s, int& rows, int& cols) {
  const auto x = s.find_first_of("xX");
  require(x != std::string::npos, ErrorKind::Config, "montage: --grid must look like RxC");
  try {
    std::size_t u1 = 0, u2 = 0;
    rows = std::stoi(s.substr(0, x), &u1);
    cols = std::stoi(s.substr(x + 1), &u2);
    require(u1 == x && u2 == s.size() - x - 1, ErrorKind::Config, "montage: --grid must look like RxC");
  } catch (const std::logic_error&) {
    fail(ErrorKind::Config, "montage: --grid must look like RxC");
  }
}

int cmd_montage(const Globals& g, const std::string& volume, const std::string& axis,
                const std::string& grid, const std::string& out_arg, std::ostream& out) {
  int rows = 0, cols = 0;
  parse_grid(grid, rows, cols);
  const int ax = parse_axis(axis);
  const Volume vol = load_volume(volume);
  const fs::path path = output_path(out_arg);
  write_file_atomic(path, encode_png(montage(vol, ax, rows, cols)));
  write_json(path.string() + ".config.json",
             resolved("montage", g.run, {{"volume", volume}, {"axis", axis}, {"grid", grid}, {"out", path.string()}}));
  out << path.string() << "\n";
  return 0;
}

int cmd_extract(const Globals& g, const std::string& dir, const std::string& out_arg, std::ostream& out) {
  const auto entries = list_dataset(dir);
  const auto feats = extract_all(entries, g.threads);
  std::vector<std::string> ids;
  for (const auto& e : entries) ids.push_back(e.id);
  const fs::path path = output_path(out_arg);
  write_file_atomic(path, features_csv(ids, feats));
  out << path.string() << "\n";
  return 0;
}

int cmd_mds_plot(const Globals& g, const std::vector<std::string>& sources, const std::string& real,
                 const std::string& out_arg, std::ostream& out) {
  require(!sources.empty(), ErrorKind::Config, "mds-plot: at least one --source NAME=CSV is required");
  std::vector<std::string> names;
  std::vector<Eigen::MatrixXd> feats;
  std::vector<std::vector<std::string>> ids;
  for (const auto& s : sources) {
    const auto eq = s.find('=');
    require(eq != std::string::npos && eq > 0, ErrorKind::Config,
            "mds-plot: --source must be NAME=CSV, got '" + s + "'");
    names.push_back(s.substr(0, eq));
    require(std::count(names.begin(), names.end(), names.back()) == 1, ErrorKind::Config,
            "mds-plot: duplicate source name '" + names.back() + "'");
    Eigen::MatrixXd m;
    std::vector<std::string> id;
    read_features_csv(s.substr(eq + 1), id, m);
    require(feats.empty() || m.cols() == feats[0].cols(), ErrorKind::Format,
            "mds-plot: source '" + names.back() + "' has a different feature length");
    feats.push_back(std::move(m));
    ids.push_back(std::move(id));
  }
  const std::string real_name = real.empty() ? names[0] : real;
  const auto real_it = std::find(names.begin(), names.end(), real_name);
  require(real_it != names.end(), ErrorKind::Config, "mds-plot: --real '" + real_name + "' is not a source");

  Eigen::Index total = 0;
  for (const auto& m : feats) total += m.rows();
  Eigen::MatrixXd all(total, feats[0].cols());
  Eigen::Index row = 0;
  for (const auto& m : feats) {
    all.middleRows(row, m.rows()) = m;
    row += m.rows();
  }
  const Eigen::MatrixXd emb = mds_embed(pairwise_distances(all));

  std::vector<ScatterSeries> series;
  std::string points_csv = "source,id,x,y\n", ellipses_csv = "source,cx,cy,a,b,angle\n";
  char buf[256];
  row = 0;
  for (std::size_t k = 0; k < names.size(); ++k) {
    ScatterSeries s{names[k], emb.middleRows(row, feats[k].rows()), std::nullopt};
    for (Eigen::Index i = 0; i < s.points.rows(); ++i) {
      std::snprintf(buf, sizeof buf, ",%.17g,%.17g\n", s.points(i, 0), s.points(i, 1));
      points_csv += names[k] + "," + ids[k][static_cast<std::size_t>(i)] + buf;
    }
    try {
      s.ellipse = fit_ellipse(s.points);
    } catch (const Error& e) {
      throw Error(e.kind(), "mds-plot: source '" + names[k] + "': " + e.what());
    }
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g,%.17g,%.17g\n", s.ellipse->center.x(),
                  s.ellipse->center.y(), s.ellipse->a, s.ellipse->b, s.ellipse->angle);
    ellipses_csv += names[k] + buf;
    row += feats[k].rows();
    series.push_back(std::move(s));
  }
  const Ellipse& ref = *series[static_cast<std::size_t>(real_it - names.begin())].ellipse;
  std::string overlap_csv = "source,real,intersection_area,fraction_of_source,fraction_of_real\n";
  for (const auto& s : series) {
    const Overlap o = ellipse_overlap(*s.ellipse, ref, g.run.metrics.overlap_samples, g.run.metrics.overlap_seed);
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g\n", o.intersection_area, o.fraction_of_a, o.fraction_of_b);
    overlap_csv += s.name + "," + real_name + buf;
  }

  const fs::path dir = output_path(out_arg);
  ensure_dir(dir);
  write_file_atomic(dir / "points.csv", points_csv);
  write_file_atomic(dir / "ellipses.csv", ellipses_csv);
  write_file_atomic(dir / "overlaps.csv", overlap_csv);
  write_file_atomic(dir / "plot.svg", scatter_svg(series));
  write_json(dir / "config.resolved.json",
             resolved("mds-plot", g.run, {{"sources", sources}, {"real", real_name}, {"out", dir.string()}}));
  out << (dir / "overlaps.csv").string() << "\n";
  return 0;
}

void report_error(std::ostream& err, const std::string& kind, const std::string& message, int code) {
  err << json{{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}}.dump() << "\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Layout-guided volumetric diffusion: phantoms, training, sampling, evaluation"};
  app.name("thoraxdiff");
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--threads", g.threads, "Worker threads for feature extraction (results do not depend on it)")
      ->check(CLI::PositiveNumber);
  app.add_option("--config", g.config, "JSON run configuration; unknown keys are rejected");

  auto* pg = app.add_subcommand("phantom-gen", "Generate procedural thorax phantoms");
  int pg_n = 0;
  std::uint64_t pg_seed = 0;
  std::string pg_out;
  pg->add_option("-n,--n", pg_n, "Number of phantoms")->required();
  pg->add_option("--seed", pg_seed, "Base seed");
  pg->add_option("--out", pg_out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train a denoiser");
  std::string tr_data, tr_out, tr_resume;
  std::optional<long> tr_steps;
  tr->add_option("--data", tr_data, "Directory of volumes and layouts")->required();
  tr->add_option("--out", tr_out, "Output directory")->required();
  tr->add_option("--resume", tr_resume, "Checkpoint directory to continue from");
  tr->add_option("--steps", tr_steps, "Override train.total_steps");

  auto* sm = app.add_subcommand("sample", "Sample a volume from a checkpoint");
  SampleArgs sa;
  sm->add_option("--checkpoint", sa.checkpoint, "Checkpoint directory")->required();
  sm->add_option("--layout", sa.layout, "Semantic layout")->required();
  sm->add_option("--reference", sa.reference, "Reference volume (required for aas)");
  sm->add_option("--mode", sa.mode, "aas or plain");
  sm->add_option("--conditioning", sa.conditioning, "lung+nodule or nodule");
  sm->add_option("--seed", sa.seed, "Sampler seed");
  auto* ema = sm->add_flag("--ema", sa.ema, "Use EMA weights (default)");
  sm->add_flag("--raw", sa.raw, "Use raw training weights")->excludes(ema);
  sm->add_option("--out", sa.out, "Output volume path")->required();

  auto* ev = app.add_subcommand("evaluate", "Compute FID, MMD and masked MSE");
  std::string ev_real, ev_syn, ev_pairs, ev_out;
  ev->add_option("--real", ev_real, "Directory of real volumes")->required();
  ev->add_option("--syn", ev_syn, "Directory of synthetic volumes")->required();
  ev->add_option("--pairs", ev_pairs, "Pairing manifest {\"pairs\":[{\"real\",\"syn\",\"fold\"}]}");
  ev->add_option("--out", ev_out, "Output directory")->required();

  auto* mo = app.add_subcommand("montage", "Render a slice montage as PNG");
  std::string mo_vol, mo_axis = "z", mo_grid = "1x1", mo_out;
  mo->add_option("--volume", mo_vol, "Volume path")->required();
  mo->add_option("--axis", mo_axis, "z, y or x");
  mo->add_option("--grid", mo_grid, "RxC tiles");
  mo->add_option("--out", mo_out, "Output PNG")->required();

  auto* mds = app.add_subcommand("mds-plot", "MDS embedding with ellipse overlap analysis");
  std::vector<std::string> mds_sources;
  std::string mds_real, mds_out;
  mds->add_option("--source", mds_sources, "NAME=features.csv, repeatable")->required();
  mds->add_option("--real", mds_real, "Name of the reference source (default: first)");
  mds->add_option("--out", mds_out, "Output directory")->required();

  auto* ex = app.add_subcommand("extract-features", "Write handcrafted features of a directory as CSV");
  std::string ex_dir, ex_out;
  ex->add_option("--data", ex_dir, "Directory of volumes")->required();
  ex->add_option("--out", ex_out, "Output CSV")->required();

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    report_error(err, "usage", e.what(), 2);
    return 2;
  }

  try {
    if (!g.config.empty()) g.run = load_run_config(g.config);
    else g.run = parse_run_config(json::object());
    if (pg->parsed()) return cmd_phantom_gen(g, pg_n, pg_seed, pg_out, out);
    if (tr->parsed()) return cmd_train(g, tr_data, tr_out, tr_resume, tr_steps, out);
    if (sm->parsed()) return cmd_sample(g, sa, out, err);
    if (ev->parsed()) return cmd_evaluate(g, ev_real, ev_syn, ev_pairs, ev_out, out);
    if (mo->parsed()) return cmd_montage(g, mo_vol, mo_axis, mo_grid, mo_out, out);
    if (mds->parsed()) return cmd_mds_plot(g, mds_sources, mds_real, mds_out, out);
    if (ex->parsed()) return cmd_extract(g, ex_dir, ex_out, out);
  } catch (const Error& e) {
    report_error(err, to_string(e.kind()), e.what(), exit_code(e.kind()));
    return exit_code(e.kind());
  } catch (const json::exception& e) {
    report_error(err, "config", e.what(), 2);
    return 2;
  } catch (const fs::filesystem_error& e) {
    report_error(err, "io", e.what(), 5);
    return 5;
  } catch (const std::exception& e) {
    report_error(err, "internal", e.what(), 1);
    return 1;
  }
  return 2;
}

}  // namespace thoraxdiff

#include "thoraxdiff/trainer.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "thoraxdiff/diffusion.hpp"
#include "thoraxdiff/error.hpp"
#include "thoraxdiff/rng.hpp"
#include "thoraxdiff/volume_io.hpp"

namespace thoraxdiff {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written in host order, which must be little-endian");

void TrainConfig::validate() const {
  require(std::isfinite(lr) && lr > 0.0, ErrorKind::Config, "train: field 'lr' must be > 0");
  require(ema_decay >= 0.0 && ema_decay <= 1.0, ErrorKind::Config,
          "train: field 'ema_decay' must lie in [0,1]");
  require(total_steps >= 0, ErrorKind::Config, "train: field 'total_steps' must be >= 0");
  require(batch_size >= 1, ErrorKind::Config, "train: field 'batch_size' must be >= 1");
  require(checkpoint_every >= 0, ErrorKind::Config, "train: field 'checkpoint_every' must be >= 0");
  require(adam.beta1 >= 0.0 && adam.beta1 < 1.0, ErrorKind::Config,
          "train: field 'adam.beta1' must lie in [0,1)");
  require(adam.beta2 >= 0.0 && adam.beta2 < 1.0, ErrorKind::Config,
          "train: field 'adam.beta2' must lie in [0,1)");
  require(adam.eps > 0.0, ErrorKind::Config, "train: field 'adam.eps' must be > 0");
  build_schedule(schedule);  // validates the descriptor
}

void to_json(json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"ema_decay", c.ema_decay},
       {"total_steps", c.total_steps},
       {"batch_size", c.batch_size},
       {"schedule", c.schedule},
       {"seed", c.seed},
       {"conditioning", to_string(c.conditioning)},
       {"checkpoint_every", c.checkpoint_every},
       {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}}};
}

void from_json(const json& j, TrainConfig& c) {
  require(j.is_object(), ErrorKind::Config, "train config must be an object");
  for (const auto& [key, v] : j.items()) {
    if (key == "lr") c.lr = v.get<double>();
    else if (key == "ema_decay") c.ema_decay = v.get<double>();
    else if (key == "total_steps") c.total_steps = v.get<long>();
    else if (key == "batch_size") c.batch_size = v.get<int>();
    else if (key == "schedule") c.schedule = v.get<ScheduleDescriptor>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "conditioning") c.conditioning = conditioning_from_string(v.get<std::string>());
    else if (key == "checkpoint_every") c.checkpoint_every = v.get<long>();
    else if (key == "adam") {
      require(v.is_object(), ErrorKind::Config, "train: field 'adam' must be an object");
      for (const auto& [k2, v2] : v.items()) {
        if (k2 == "beta1") c.adam.beta1 = v2.get<double>();
        else if (k2 == "beta2") c.adam.beta2 = v2.get<double>();
        else if (k2 == "eps") c.adam.eps = v2.get<double>();
        else fail(ErrorKind::Config, "train.adam: unknown key '" + k2 + "'");
      }
    } else {
      fail(ErrorKind::Config, "train: unknown key '" + key + "'");
    }
  }
}

TrainState TrainState::from_params(std::vector<float> params, std::uint64_t seed) {
  TrainState s;
  s.ema = params;
  s.adam_m.assign(params.size(), 0.0f);
  s.adam_v.assign(params.size(), 0.0f);
  s.params = std::move(params);
  s.seed = seed;
  return s;
}

std::vector<TrainExample> make_examples(std::span<const Volume> volumes,
                                        std::span<const SemanticLayout> layouts,
                                        Conditioning conditioning) {
  require(volumes.size() == layouts.size(), ErrorKind::Dimension,
          "training data: " + std::to_string(volumes.size()) + " volumes but " +
              std::to_string(layouts.size()) + " layouts");
  std::vector<TrainExample> out;
  out.reserve(volumes.size());
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    validate_volume(volumes[i]);
    validate_layout(layouts[i]);
    require_same_shape(volumes[i].values, layouts[i].labels, "training pair");
    out.push_back({volumes[i].values, layout_to_channels(layouts[i], conditioning)});
  }
  return out;
}

UNetModel::UNetModel(std::shared_ptr<const UNet> net) : net_(std::move(net)) {}

std::size_t UNetModel::param_count() const { return net_->layout().total(); }

void UNetModel::forward(std::span<const float> params, const Tensor<float>& input, int t,
                        const StepContext&, Tensor<float>& pred) {
  net_->forward<float>(params, input, t, tape_, pred);
}

void UNetModel::backward(std::span<const float> params, const Tensor<float>& d_pred,
                         std::span<float> grad) {
  net_->backward<float>(params, tape_, d_pred, grad);
}

TrainingDraw training_draw(std::uint64_t seed, long step, int element, std::size_t n_examples,
                           int T, Shape3 shape) {
  require(n_examples >= 1, ErrorKind::Config, "training data is empty");
  const auto id = static_cast<std::uint32_t>(element);
  const auto st = static_cast<std::uint32_t>(step);
  TrainingDraw d;
  d.example = static_cast<std::size_t>(
      Stream({seed, id, st, Purpose::TrainData}).uniform_int(0, static_cast<std::int64_t>(n_examples) - 1));
  d.t = static_cast<int>(Stream({seed, id, st, Purpose::TrainTime}).uniform_int(1, T));
  d.eps = Grid3<float>(shape);
  Stream({seed, id, st, Purpose::TrainNoise}).fill_normal(d.eps.values());
  return d;
}

template <class T>
double l1_loss(std::span<const T> eps, std::span<const T> pred, std::span<T> d_pred,
               double weight) {
  require(eps.size() == pred.size(), ErrorKind::Dimension, "l1 loss: size mismatch");
  const double n = static_cast<double>(eps.size());
  const T g = static_cast<T>(weight / n);
  double sum = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const double r = static_cast<double>(pred[i]) - static_cast<double>(eps[i]);
    sum += std::abs(r);
    if (!d_pred.empty()) d_pred[i] = r > 0 ? g : (r < 0 ? -g : T(0));
  }
  return sum / n;
}

template <class T>
double l1_objective(const UNet& net, std::span<const T> params, const Tensor<T>& input, int t,
                    std::span<const T> eps, std::span<T> grad) {
  Tape<T> tape;
  Tensor<T> pred;
  net.forward<T>(params, input, t, tape, pred);
  if (grad.empty()) return l1_loss<T>(eps, pred.values(), {}, 1.0);
  Tensor<T> d_pred(1, pred.shape());
  const double loss = l1_loss<T>(eps, pred.values(), d_pred.values(), 1.0);
  net.backward<T>(params, tape, d_pred, grad);
  return loss;
}

template double l1_loss<float>(std::span<const float>, std::span<const float>, std::span<float>, double);
template double l1_loss<double>(std::span<const double>, std::span<const double>, std::span<double>, double);
template double l1_objective<float>(const UNet&, std::span<const float>, const Tensor<float>&, int,
                                    std::span<const float>, std::span<float>);
template double l1_objective<double>(const UNet&, std::span<const double>, const Tensor<double>&,
                                     int, std::span<const double>, std::span<double>);

void ema_update(std::span<float> ema, std::span<const float> params, double decay) {
  require(ema.size() == params.size(), ErrorKind::Dimension,
          "ema_update: " + std::to_string(ema.size()) + " shadow values for " +
              std::to_string(params.size()) + " parameters");
  const double keep = decay, take = 1.0 - decay;
  for (std::size_t i = 0; i < ema.size(); ++i)
    ema[i] = static_cast<float>(keep * ema[i] + take * params[i]);
}

void adam_update(std::span<float> params, std::span<float> m, std::span<float> v,
                 std::span<const float> grad, double lr, const AdamConfig& adam, long k) {
  require(m.size() == params.size() && v.size() == params.size() && grad.size() == params.size(),
          ErrorKind::Dimension, "adam: buffer sizes differ");
  const double c1 = 1.0 - std::pow(adam.beta1, static_cast<double>(k));
  const double c2 = 1.0 - std::pow(adam.beta2, static_cast<double>(k));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    const double mi = adam.beta1 * m[i] + (1.0 - adam.beta1) * g;
    const double vi = adam.beta2 * v[i] + (1.0 - adam.beta2) * g * g;
    m[i] = static_cast<float>(mi);
    v[i] = static_cast<float>(vi);
    params[i] = static_cast<float>(params[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + adam.eps));
  }
}

double train_step(TrainState& state, TrainableModel& model, std::span<const TrainExample> data,
                  const NoiseSchedule& schedule, const TrainConfig& cfg) {
  require(!data.empty(), ErrorKind::Config, "train_step: empty batch source");
  require(cfg.batch_size >= 1, ErrorKind::Config, "train: field 'batch_size' must be >= 1");
  const std::size_t P = model.param_count();
  require(state.params.size() == P && state.ema.size() == P && state.adam_m.size() == P &&
              state.adam_v.size() == P,
          ErrorKind::Dimension, "train_step: state does not match the model's parameter count");

  std::vector<float> grad(P, 0.0f);
  Tensor<float> pred, d_pred;
  double loss = 0.0;
  for (int b = 0; b < cfg.batch_size; ++b) {
    const Shape3 shape = data[0].x0.shape();
    TrainingDraw draw = training_draw(state.seed, state.step, b, data.size(), schedule.steps(), shape);
    const TrainExample& ex = data[draw.example];
    const LatentVolume xt = forward_diffuse(ex.x0, draw.t, draw.eps, schedule);
    const Tensor<float> input = build_condition(xt.values, ex.layout_channels);
    model.forward(state.params, input, draw.t, {state.step, b}, pred);
    require(pred.channels() == 1 && pred.shape() == shape, ErrorKind::Dimension,
            "train_step: model returned " + pred.describe());
    d_pred = Tensor<float>(1, shape);
    loss += l1_loss<float>(draw.eps.values(), pred.values(), d_pred.values(),
                           1.0 / cfg.batch_size) /
            cfg.batch_size;
    model.backward(state.params, d_pred, grad);
  }
  if (!std::isfinite(loss)) throw NumericError(state.step, "train_step: non-finite loss");
  if (!all_finite<float>(grad)) throw NumericError(state.step, "train_step: non-finite gradient");

  adam_update(state.params, state.adam_m, state.adam_v, grad, cfg.lr, cfg.adam, state.step + 1);
  if (!all_finite<float>(state.params))
    throw NumericError(state.step, "train_step: non-finite parameters after update");
  ema_update(state.ema, state.params, cfg.ema_decay);
  ++state.step;
  return loss;
}

// --- checkpoints -----------------------------------------------------------

namespace {

constexpr const char* kFormat = "thoraxdiff-checkpoint";
constexpr int kVersion = 1;
constexpr const char* kGroups[] = {"params", "ema", "adam_m", "adam_v"};

std::vector<float>* group(TrainState& s, int g) {
  switch (g) {
    case 0: return &s.params;
    case 1: return &s.ema;
    case 2: return &s.adam_m;
    default: return &s.adam_v;
  }
}

void fnv1a(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
}

void write_blob(const fs::path& path, const float* data, std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  if (!out) fail(ErrorKind::Io, "write failed: " + path.string());
}

}  // namespace

std::string checkpoint_id(const TrainState& state) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  fnv1a(h, state.params.data(), state.params.size() * sizeof(float));
  fnv1a(h, state.ema.data(), state.ema.size() * sizeof(float));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  const UNet net(ckpt.denoiser);
  const ParamLayout& layout = net.layout();
  TrainState state = ckpt.state;
  for (int g = 0; g < 4; ++g)
    require(group(state, g)->size() == layout.total(), ErrorKind::Dimension,
            std::string("checkpoint: group '") + kGroups[g] + "' has the wrong size");

  json tensors = json::array();
  for (const auto& e : layout.entries()) tensors.push_back({{"name", e.name}, {"shape", e.shape}, {"dtype", "f32"}});
  json m;
  m["format"] = kFormat;
  m["version"] = kVersion;
  m["id"] = checkpoint_id(state);
  m["step"] = state.step;
  m["rng"] = {{"generator", "philox4x32-10"}, {"seed", state.seed}, {"next_step", state.step}};
  m["denoiser"] = ckpt.denoiser;
  m["train"] = ckpt.train;
  m["optimizer"] = {{"name", "adam"},
                    {"lr", ckpt.train.lr},
                    {"beta1", ckpt.train.adam.beta1},
                    {"beta2", ckpt.train.adam.beta2},
                    {"eps", ckpt.train.adam.eps}};
  m["groups"] = {"params", "ema", "adam_m", "adam_v"};
  m["tensors"] = std::move(tensors);

  const fs::path tmp = dir.string() + ".partial";
  std::error_code ec;
  fs::remove_all(tmp, ec);
  fs::create_directories(tmp, ec);
  if (ec) fail(ErrorKind::Io, "cannot create " + tmp.string() + ": " + ec.message());
  for (int g = 0; g < 4; ++g) {
    fs::create_directories(tmp / kGroups[g], ec);
    if (ec) fail(ErrorKind::Io, "cannot create " + (tmp / kGroups[g]).string());
    const std::vector<float>& buf = *group(state, g);
    for (const auto& e : layout.entries())
      write_blob(tmp / kGroups[g] / (e.name + ".f32"), buf.data() + e.offset, e.size);
  }
  write_file_atomic(tmp / "manifest.json", m.dump(2) + "\n");
  fs::remove_all(dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot replace " + dir.string() + ": " + ec.message());
  fs::rename(tmp, dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot move checkpoint into " + dir.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  require(fs::exists(mpath), ErrorKind::Io, "checkpoint manifest not found: " + mpath.string());
  json m;
  try {
    m = json::parse(read_file(mpath));
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, mpath.string() + ": malformed manifest (" + e.what() + ")");
  }
  const std::string where = mpath.string() + ": ";
  Checkpoint ck;
  try {
    require(m.value("format", "") == kFormat, ErrorKind::Format, where + "field 'format' is not " + kFormat);
    require(m.value("version", 0) == kVersion, ErrorKind::Format, where + "unsupported field 'version'");
    ck.denoiser = m.at("denoiser").get<DenoiserConfig>();
    ck.train = m.at("train").get<TrainConfig>();
    ck.state.step = m.at("step").get<long>();
    ck.state.seed = m.at("rng").at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, where + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Format) throw;
    fail(ErrorKind::Format, where + e.what());
  }
  const UNet net(ck.denoiser);
  const ParamLayout& layout = net.layout();
  const json& tensors = m.at("tensors");
  require(tensors.is_array() && tensors.size() == layout.entries().size(), ErrorKind::Format,
          where + "field 'tensors' does not match the denoiser config");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& e = layout.entries()[i];
    require(tensors[i].value("name", "") == e.name, ErrorKind::Format,
            where + "tensor " + std::to_string(i) + " should be '" + e.name + "'");
    require(tensors[i].at("shape").get<std::vector<int>>() == e.shape, ErrorKind::Format,
            where + "field 'shape' of '" + e.name + "' does not match the denoiser config");
    require(tensors[i].value("dtype", "") == "f32", ErrorKind::Format,
            where + "field 'dtype' of '" + e.name + "' must be f32");
  }
  for (int g = 0; g < 4; ++g) {
    std::vector<float>& buf = *group(ck.state, g);
    buf.assign(layout.total(), 0.0f);
    for (const auto& e : layout.entries()) {
      const fs::path p = dir / kGroups[g] / (e.name + ".f32");
      require(fs::exists(p), ErrorKind::Io, "checkpoint blob missing: " + p.string());
      const std::string blob = read_file(p);
      require(blob.size() == e.size * sizeof(float), ErrorKind::Format,
              p.string() + ": byte count " + std::to_string(blob.size()) + ", expected " +
                  std::to_string(e.size * sizeof(float)));
      std::memcpy(buf.data() + e.offset, blob.data(), blob.size());
    }
  }
  require(checkpoint_id(ck.state) == m.value("id", ""), ErrorKind::Format,
          where + "parameter blobs do not match field 'id'");
  return ck;
}

// --- fit ---------------------------------------------------------------------

namespace {

fs::path step_dir(const fs::path& out_dir, long step) {
  char name[32];
  std::snprintf(name, sizeof name, "step-%07ld", step);
  return out_dir / "checkpoints" / name;
}

}  // namespace

fs::path fit(const DenoiserConfig& dcfg, const TrainConfig& cfg, std::span<const TrainExample> data,
             const fs::path& out_dir, const FitOptions& options) {
  dcfg.validate();
  cfg.validate();
  require(!data.empty(), ErrorKind::Config, "fit: dataset is empty");
  for (const auto& ex : data) {
    require(ex.x0.shape() == cube(dcfg.resolution), ErrorKind::Dimension,
            "fit: example shape " + ex.x0.shape().str() + " differs from the model resolution " +
                std::to_string(dcfg.resolution));
    require(ex.layout_channels.channels() + 1 == dcfg.in_channels, ErrorKind::Dimension,
            "fit: conditioning has " + std::to_string(ex.layout_channels.channels()) +
                " channels, the model expects " + std::to_string(dcfg.in_channels - 1));
  }
  const NoiseSchedule schedule = build_schedule(cfg.schedule);

  Checkpoint ck{dcfg, cfg, {}};
  if (options.resume_from) {
    Checkpoint prev = load_checkpoint(*options.resume_from);
    require(prev.denoiser == dcfg, ErrorKind::Config,
            "resume: checkpoint denoiser config differs from the requested one");
    ck.state = std::move(prev.state);
  } else {
    ck.state = TrainState::from_params(Denoiser<float>::initialized(dcfg, cfg.seed).params(), cfg.seed);
  }

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create output directory " + out_dir.string());
  const fs::path log_path = out_dir / "loss.csv";
  const bool append = options.resume_from.has_value() && fs::exists(log_path);
  std::ofstream log(log_path, append ? std::ios::app : std::ios::trunc);
  if (!log) fail(ErrorKind::Io, "cannot open " + log_path.string());
  if (!append) log << "step,loss,wall_time_s\n";

  UNetModel model(std::make_shared<UNet>(dcfg));
  const auto start = std::chrono::steady_clock::now();
  while (ck.state.step < cfg.total_steps) {
    const double loss = train_step(ck.state, model, data, schedule, cfg);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    char line[96];
    std::snprintf(line, sizeof line, "%ld,%.9g,%.3f\n", ck.state.step, loss, wall);
    log << line;
    log.flush();
    if (options.on_step) options.on_step(ck.state.step, loss);
    if (cfg.checkpoint_every > 0 && ck.state.step % cfg.checkpoint_every == 0 &&
        ck.state.step < cfg.total_steps)
      save_checkpoint(step_dir(out_dir, ck.state.step), ck);
  }
  if (!log) fail(ErrorKind::Io, "write failed: " + log_path.string());
  const fs::path final_dir = step_dir(out_dir, ck.state.step);
  save_checkpoint(final_dir, ck);
  return final_dir;
}

}  // namespace thoraxdiff

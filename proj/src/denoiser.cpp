#include "thoraxdiff/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "thoraxdiff/error.hpp"
#include "thoraxdiff/rng.hpp"

namespace thoraxdiff {

using nlohmann::json;

bool DenoiserConfig::has_attention(int level) const noexcept {
  return std::find(attention_levels.begin(), attention_levels.end(), level) !=
         attention_levels.end();
}

void DenoiserConfig::validate() const {
  auto bad = [](const char* field, const std::string& why) {
    fail(ErrorKind::Config, std::string("denoiser config: field '") + field + "' " + why);
  };
  if (channel_multipliers.empty()) bad("channel_multipliers", "must not be empty");
  for (int m : channel_multipliers)
    if (m < 1) bad("channel_multipliers", "entries must be >= 1");
  if (base_width < 1) bad("base_width", "must be >= 1");
  if (in_channels < 2) bad("in_channels", "must be >= 2 (latent + layout)");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) bad("time_embed_dim", "must be even and >= 2");
  if (groups < 1) bad("groups", "must be >= 1");
  const int factor = 1 << (levels() - 1);
  if (resolution < 1 || resolution % factor != 0)
    bad("resolution", "must be divisible by 2^(levels-1) = " + std::to_string(factor));
  std::set<int> seen;
  for (int l : attention_levels) {
    if (l < 0 || l >= levels()) bad("attention_levels", "entry out of range");
    if (!seen.insert(l).second) bad("attention_levels", "duplicate entry");
  }
}

void to_json(json& j, const DenoiserConfig& c) {
  j = json{{"resolution", c.resolution},
           {"in_channels", c.in_channels},
           {"base_width", c.base_width},
           {"channel_multipliers", c.channel_multipliers},
           {"attention_levels", c.attention_levels},
           {"time_embed_dim", c.time_embed_dim},
           {"groups", c.groups}};
}

void from_json(const json& j, DenoiserConfig& c) {
  require(j.is_object(), ErrorKind::Config, "denoiser config must be an object");
  static const std::set<std::string> known{"resolution",       "in_channels",  "base_width",
                                           "channel_multipliers", "attention_levels",
                                           "time_embed_dim",   "groups"};
  for (const auto& [key, _] : j.items())
    require(known.count(key) > 0, ErrorKind::Config, "denoiser config: unknown key '" + key + "'");
  DenoiserConfig out;
  try {
    if (j.contains("resolution")) out.resolution = j.at("resolution").get<int>();
    if (j.contains("in_channels")) out.in_channels = j.at("in_channels").get<int>();
    if (j.contains("base_width")) out.base_width = j.at("base_width").get<int>();
    if (j.contains("channel_multipliers"))
      out.channel_multipliers = j.at("channel_multipliers").get<std::vector<int>>();
    if (j.contains("attention_levels"))
      out.attention_levels = j.at("attention_levels").get<std::vector<int>>();
    if (j.contains("time_embed_dim")) out.time_embed_dim = j.at("time_embed_dim").get<int>();
    if (j.contains("groups")) out.groups = j.at("groups").get<int>();
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("denoiser config: ") + e.what());
  }
  out.validate();
  c = std::move(out);
}

DenoiserConfig full_scale_config() {
  DenoiserConfig c;
  c.resolution = 128;
  c.base_width = 64;
  c.channel_multipliers = {1, 1, 2, 2, 4, 4};
  c.attention_levels = {3};
  c.time_embed_dim = 256;
  c.groups = 32;
  return c;
}

// ---------------------------------------------------------------- UNet

UNet::UNet(const DenoiserConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int L = cfg_.levels();
  const int E = cfg_.time_embed_dim;
  time_ = TimeEncoder(layout_, "time", E);
  conv_in_.declare(layout_, "conv_in", cfg_.in_channels, cfg_.width(0), 1);
  int cur = cfg_.width(0);
  enc_att_.resize(L);
  dec_att_.resize(L);
  down_.resize(L);
  up_.resize(L);
  for (int l = 0; l < L; ++l) {
    const std::string n = "enc" + std::to_string(l);
    enc_res_.emplace_back(layout_, n + ".res", cur, cfg_.width(l), E, cfg_.groups);
    cur = cfg_.width(l);
    if (cfg_.has_attention(l)) enc_att_[l].emplace(layout_, n + ".att", cur, cfg_.groups);
    if (l + 1 < L) down_[l].declare(layout_, n + ".down", cur, cur, 2);
  }
  mid_res1_ = ResBlock(layout_, "mid.res1", cur, cur, E, cfg_.groups);
  if (cfg_.has_attention(L - 1)) mid_att_.emplace(layout_, "mid.att", cur, cfg_.groups);
  mid_res2_ = ResBlock(layout_, "mid.res2", cur, cur, E, cfg_.groups);
  dec_res_.resize(L);
  for (int l = L - 1; l >= 0; --l) {
    const std::string n = "dec" + std::to_string(l);
    dec_res_[l] = ResBlock(layout_, n + ".res", 2 * cfg_.width(l), cfg_.width(l), E, cfg_.groups);
    if (cfg_.has_attention(l)) dec_att_[l].emplace(layout_, n + ".att", cfg_.width(l), cfg_.groups);
    if (l > 0) up_[l].declare(layout_, n + ".up", cfg_.width(l), cfg_.width(l - 1), 1);
  }
  out_gn_.declare(layout_, "out.norm", cfg_.width(0), cfg_.groups);
  out_conv_.declare(layout_, "out.conv", cfg_.width(0), 1, 1, InitRule::Zero);
}

const AttBlock* UNet::attention_block(int level) const {
  const auto& a = enc_att_.at(level);
  return a ? &*a : nullptr;
}

namespace {

template <class T>
std::span<const T> sub(std::span<const T> p, std::size_t off, std::size_t n) {
  return p.subspan(off, n);
}
template <class T>
std::span<T> sub(std::span<T> p, std::size_t off, std::size_t n) {
  return p.subspan(off, n);
}

template <class T>
void conv_fwd(const Conv3Layer& l, std::span<const T> p, const Tensor<T>& in, Tensor<T>& out) {
  nn::conv3_forward<T>(in, sub(p, l.w, 27u * l.in * l.out), sub(p, l.b, l.out), l.out, l.stride,
                       out);
}
template <class T>
void conv_bwd(const Conv3Layer& l, std::span<const T> p, const Tensor<T>& in, const Tensor<T>& d_out,
              std::span<T> grad, Tensor<T>* d_in) {
  nn::conv3_backward<T>(in, sub(p, l.w, 27u * l.in * l.out), l.out, l.stride, d_out, d_in,
                        sub(grad, l.w, 27u * l.in * l.out), sub(grad, l.b, l.out));
}

// Split a gradient over concat(a, b) channel-wise.
template <class T>
void split_channels(const Tensor<T>& d, int ca, Tensor<T>& da, Tensor<T>& db) {
  const int cb = d.channels() - ca;
  da = Tensor<T>(ca, d.shape());
  db = Tensor<T>(cb, d.shape());
  for (std::size_t v = 0; v < d.voxels(); ++v) {
    const T* src = d.voxel(v);
    std::copy(src, src + ca, da.voxel(v));
    std::copy(src + ca, src + ca + cb, db.voxel(v));
  }
}

}  // namespace

template <class T>
void UNet::forward(std::span<const T> p, const Tensor<T>& x, double t, Tape<T>& tp,
                   Tensor<T>& out) const {
  require(p.size() == layout_.total(), ErrorKind::Dimension, "denoiser: parameter count mismatch");
  require(x.channels() == cfg_.in_channels, ErrorKind::Dimension,
          "denoiser: expected " + std::to_string(cfg_.in_channels) + " input channels, got " +
              x.describe());
  const int L = cfg_.levels();
  const int f = 1 << (L - 1);
  const auto& s = x.shape();
  require(s.d % f == 0 && s.h % f == 0 && s.w % f == 0, ErrorKind::Dimension,
          "denoiser: input extent " + s.str() + " not divisible by " + std::to_string(f));

  time_.forward(p, t, tp.time);
  tp.temb_act.resize(tp.time.out.size());
  nn::silu_forward<T>(tp.time.out, tp.temb_act);
  const std::span<const T> temb(tp.temb_act);

  tp.enc_res.resize(L);
  tp.dec_res.resize(L);
  tp.enc_att.resize(L);
  tp.dec_att.resize(L);
  tp.skips.resize(L);
  tp.up_in.resize(L);

  tp.input = x;
  Tensor<T> h, tmp;
  conv_fwd(conv_in_, p, x, h);
  for (int l = 0; l < L; ++l) {
    enc_res_[l].forward(p, h, temb, tp.enc_res[l], tmp);
    std::swap(h, tmp);
    if (enc_att_[l]) {
      enc_att_[l]->forward(p, h, tp.enc_att[l], tmp);
      std::swap(h, tmp);
    }
    tp.skips[l] = h;
    if (l + 1 < L) {
      conv_fwd(down_[l], p, h, tmp);
      std::swap(h, tmp);
    }
  }
  mid_res1_.forward(p, h, temb, tp.mid_res1, tmp);
  std::swap(h, tmp);
  if (mid_att_) {
    mid_att_->forward(p, h, tp.mid_att, tmp);
    std::swap(h, tmp);
  }
  mid_res2_.forward(p, h, temb, tp.mid_res2, tmp);
  std::swap(h, tmp);
  for (int l = L - 1; l >= 0; --l) {
    const Tensor<T>* parts[2] = {&h, &tp.skips[l]};
    tmp = concat_channels<T>(parts);
    dec_res_[l].forward(p, tmp, temb, tp.dec_res[l], h);
    if (dec_att_[l]) {
      dec_att_[l]->forward(p, h, tp.dec_att[l], tmp);
      std::swap(h, tmp);
    }
    if (l > 0) {
      nn::upsample_nearest2_forward<T>(h, tp.up_in[l]);
      conv_fwd(up_[l], p, tp.up_in[l], h);
    }
  }
  tp.h_final = h;
  nn::group_norm_forward<T>(h, out_gn_.groups, sub(p, out_gn_.gamma, out_gn_.channels),
                            sub(p, out_gn_.beta, out_gn_.channels), tp.n_out, tp.s_out);
  if (!tp.a_out.same_layout(tp.n_out)) tp.a_out = Tensor<T>(tp.n_out.channels(), tp.n_out.shape());
  nn::silu_forward<T>(tp.n_out.values(), tp.a_out.values());
  conv_fwd(out_conv_, p, tp.a_out, out);
}

template <class T>
void UNet::backward(std::span<const T> p, Tape<T>& tp, const Tensor<T>& d_out,
                    std::span<T> grad) const {
  require(grad.size() == layout_.total(), ErrorKind::Dimension,
          "denoiser: gradient buffer size mismatch");
  const int L = cfg_.levels();
  std::vector<T> d_temb(tp.temb_act.size(), T{0});
  const std::span<const T> temb(tp.temb_act);

  Tensor<T> d_a, d_h, tmp;
  conv_bwd(out_conv_, p, tp.a_out, d_out, grad, &d_a);
  nn::silu_backward<T>(tp.n_out.values(), d_a.values(), d_a.values());
  nn::group_norm_backward<T>(tp.h_final, out_gn_.groups, sub(p, out_gn_.gamma, out_gn_.channels),
                             tp.s_out, d_a, d_h, sub(grad, out_gn_.gamma, out_gn_.channels),
                             sub(grad, out_gn_.beta, out_gn_.channels));

  std::vector<Tensor<T>> d_skip(L);
  for (int l = 0; l < L; ++l) {
    if (l > 0) {
      conv_bwd(up_[l], p, tp.up_in[l], d_h, grad, &tmp);
      nn::upsample_nearest2_backward<T>(tmp, d_h);
    }
    if (dec_att_[l]) {
      dec_att_[l]->backward(p, tp.dec_att[l], d_h, grad, tmp);
      std::swap(d_h, tmp);
    }
    dec_res_[l].backward(p, tp.dec_res[l], temb, d_h, grad, tmp, std::span<T>(d_temb));
    split_channels(tmp, dec_res_[l].in_channels() - tp.skips[l].channels(), d_h, d_skip[l]);
  }

  mid_res2_.backward(p, tp.mid_res2, temb, d_h, grad, tmp, std::span<T>(d_temb));
  std::swap(d_h, tmp);
  if (mid_att_) {
    mid_att_->backward(p, tp.mid_att, d_h, grad, tmp);
    std::swap(d_h, tmp);
  }
  mid_res1_.backward(p, tp.mid_res1, temb, d_h, grad, tmp, std::span<T>(d_temb));
  std::swap(d_h, tmp);

  for (int l = L - 1; l >= 0; --l) {
    if (l + 1 < L) {
      conv_bwd(down_[l], p, tp.skips[l], d_h, grad, &tmp);
      std::swap(d_h, tmp);
    }
    for (std::size_t i = 0; i < d_h.size(); ++i) d_h[i] += d_skip[l][i];
    if (enc_att_[l]) {
      enc_att_[l]->backward(p, tp.enc_att[l], d_h, grad, tmp);
      std::swap(d_h, tmp);
    }
    enc_res_[l].backward(p, tp.enc_res[l], temb, d_h, grad, tmp, std::span<T>(d_temb));
    std::swap(d_h, tmp);
  }
  conv_bwd(conv_in_, p, tp.input, d_h, grad, static_cast<Tensor<T>*>(nullptr));

  std::vector<T> d_time(d_temb.size());
  nn::silu_backward<T>(tp.time.out, d_temb, d_time);
  time_.backward(p, tp.time, std::span<const T>(d_time), grad);
}

// ---------------------------------------------------------------- params

template <class T>
void initialize_params(const ParamLayout& layout, std::span<T> params, std::uint64_t seed,
                       bool randomize_zero_weights) {
  require(params.size() == layout.total(), ErrorKind::Dimension,
          "initialize_params: buffer size mismatch");
  const auto& entries = layout.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    auto dst = params.subspan(e.offset, e.size);
    InitRule rule = e.init;
    if (randomize_zero_weights && rule == InitRule::Zero && e.fan_in > 0) rule = InitRule::FanIn;
    switch (rule) {
      case InitRule::Zero:
        std::fill(dst.begin(), dst.end(), T{0});
        break;
      case InitRule::One:
        std::fill(dst.begin(), dst.end(), T{1});
        break;
      case InitRule::FanIn: {
        Stream s({seed, static_cast<std::uint32_t>(i), 0, Purpose::Init});
        const double limit = std::sqrt(3.0 / std::max(e.fan_in, 1));
        for (auto& v : dst) v = static_cast<T>((2.0 * s.uniform() - 1.0) * limit);
        break;
      }
    }
  }
}

template <class T>
bool all_finite(std::span<const T> v) noexcept {
  bool ok = true;
  for (const T x : v) ok &= std::isfinite(x);
  return ok;
}

template <class T>
Denoiser<T>::Denoiser(const DenoiserConfig& cfg)
    : net_(std::make_shared<const UNet>(cfg)), params_(net_->layout().total(), T{0}) {}

template <class T>
Denoiser<T>::Denoiser(std::shared_ptr<const UNet> net, std::vector<T> params)
    : net_(std::move(net)), params_(std::move(params)) {
  require(params_.size() == net_->layout().total(), ErrorKind::Dimension,
          "denoiser: parameter count " + std::to_string(params_.size()) + " does not match layout " +
              std::to_string(net_->layout().total()));
}

template <class T>
Denoiser<T> Denoiser<T>::initialized(const DenoiserConfig& cfg, std::uint64_t seed,
                                     bool randomize_zero_weights) {
  Denoiser d(cfg);
  initialize_params<T>(d.net().layout(), d.params_, seed, randomize_zero_weights);
  return d;
}

template <class T>
Tensor<T> Denoiser<T>::predict_noise(const Tensor<T>& cond_input, int t) const {
  require(t >= 1, ErrorKind::Domain, "predict_noise: t must be >= 1, got " + std::to_string(t));
  require(cond_input.shape() == cube(config().resolution), ErrorKind::Dimension,
          "predict_noise: input shape " + cond_input.shape().str() + " differs from resolution " +
              std::to_string(config().resolution));
  thread_local Tape<T> tape;
  Tensor<T> out;
  net_->forward(std::span<const T>(params_), cond_input, static_cast<double>(t), tape, out);
  if (!all_finite<T>(out.values())) throw NumericError(t, "denoiser produced non-finite output");
  return out;
}

template class Denoiser<float>;
template class Denoiser<double>;

#define THORAXDIFF_INSTANTIATE(T)                                                              \
  template void UNet::forward<T>(std::span<const T>, const Tensor<T>&, double, Tape<T>&,       \
                                 Tensor<T>&) const;                                            \
  template void UNet::backward<T>(std::span<const T>, Tape<T>&, const Tensor<T>&,              \
                                  std::span<T>) const;                                         \
  template void initialize_params<T>(const ParamLayout&, std::span<T>, std::uint64_t, bool);   \
  template bool all_finite<T>(std::span<const T>) noexcept;

THORAXDIFF_INSTANTIATE(float)
THORAXDIFF_INSTANTIATE(double)

#undef THORAXDIFF_INSTANTIATE

}  // namespace thoraxdiff

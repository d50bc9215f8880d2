#include "thoraxdiff/layers.hpp"

#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "thoraxdiff/error.hpp"

namespace thoraxdiff {

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
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <class T>
CMapMat<T> as_matrix(const Tensor<T>& t) {
  return CMapMat<T>(t.data(), static_cast<Eigen::Index>(t.voxels()), t.channels());
}
template <class T>
MapMat<T> as_matrix(Tensor<T>& t) {
  return MapMat<T>(t.data(), static_cast<Eigen::Index>(t.voxels()), t.channels());
}

template <class T>
void ensure(Tensor<T>& t, int channels, const Shape3& shape) {
  if (t.channels() != channels || !(t.shape() == shape)) t = Tensor<T>(channels, shape);
}

// Layer wrappers binding a flat parameter buffer.
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
template <class T>
void pw_fwd(const PointwiseLayer& l, std::span<const T> p, const Tensor<T>& in, Tensor<T>& out) {
  nn::pointwise_forward<T>(in, sub(p, l.w, std::size_t(l.in) * l.out), sub(p, l.b, l.out), l.out,
                           out);
}
template <class T>
void pw_bwd(const PointwiseLayer& l, std::span<const T> p, const Tensor<T>& in,
            const Tensor<T>& d_out, std::span<T> grad, Tensor<T>* d_in) {
  nn::pointwise_backward<T>(in, sub(p, l.w, std::size_t(l.in) * l.out), l.out, d_out, d_in,
                            sub(grad, l.w, std::size_t(l.in) * l.out), sub(grad, l.b, l.out));
}
template <class T>
void gn_fwd(const GroupNormLayer& l, std::span<const T> p, const Tensor<T>& in, Tensor<T>& out,
            nn::GroupStats<T>& st) {
  nn::group_norm_forward<T>(in, l.groups, sub(p, l.gamma, l.channels), sub(p, l.beta, l.channels),
                            out, st);
}
template <class T>
void gn_bwd(const GroupNormLayer& l, std::span<const T> p, const Tensor<T>& in,
            const nn::GroupStats<T>& st, const Tensor<T>& d_out, std::span<T> grad,
            Tensor<T>& d_in) {
  nn::group_norm_backward<T>(in, l.groups, sub(p, l.gamma, l.channels), st, d_out, d_in,
                             sub(grad, l.gamma, l.channels), sub(grad, l.beta, l.channels));
}
template <class T>
void silu_fwd(const Tensor<T>& in, Tensor<T>& out) {
  ensure(out, in.channels(), in.shape());
  nn::silu_forward<T>(in.values(), out.values());
}
// In-place on the gradient: d <- d * silu'(x).
template <class T>
void silu_bwd_inplace(const Tensor<T>& x, Tensor<T>& d) {
  nn::silu_backward<T>(x.values(), d.values(), d.values());
}

}  // namespace

std::size_t ParamLayout::add(std::string name, std::vector<int> shape, InitRule init, int fan_in) {
  for (const auto& e : entries_)
    require(e.name != name, ErrorKind::Config, "duplicate parameter name '" + name + "'");
  std::size_t n = 1;
  for (int s : shape) n *= static_cast<std::size_t>(s);
  ParamEntry e{std::move(name), std::move(shape), total_, n, init, fan_in};
  entries_.push_back(std::move(e));
  total_ += n;
  return entries_.back().offset;
}

const ParamEntry& ParamLayout::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  fail(ErrorKind::Config, "unknown parameter '" + name + "'");
}

int effective_groups(int requested, int channels) noexcept {
  return std::gcd(std::max(requested, 1), channels);
}

void Conv3Layer::declare(ParamLayout& layout, const std::string& name, int in_ch, int out_ch,
                         int stride_, InitRule rule) {
  in = in_ch;
  out = out_ch;
  stride = stride_;
  w = layout.add(name + ".w", {27, in_ch, out_ch}, rule, 27 * in_ch);
  b = layout.add(name + ".b", {out_ch}, InitRule::Zero);
}

void PointwiseLayer::declare(ParamLayout& layout, const std::string& name, int in_ch, int out_ch) {
  in = in_ch;
  out = out_ch;
  w = layout.add(name + ".w", {in_ch, out_ch}, InitRule::FanIn, in_ch);
  b = layout.add(name + ".b", {out_ch}, InitRule::Zero);
}

void LinearLayer::declare(ParamLayout& layout, const std::string& name, int in_dim, int out_dim) {
  in = in_dim;
  out = out_dim;
  w = layout.add(name + ".w", {in_dim, out_dim}, InitRule::FanIn, in_dim);
  b = layout.add(name + ".b", {out_dim}, InitRule::Zero);
}

void GroupNormLayer::declare(ParamLayout& layout, const std::string& name, int ch,
                             int requested_groups) {
  channels = ch;
  groups = effective_groups(requested_groups, ch);
  gamma = layout.add(name + ".gamma", {ch}, InitRule::One);
  beta = layout.add(name + ".beta", {ch}, InitRule::Zero);
}

// ---------------------------------------------------------------- ResBlock

ResBlock::ResBlock(ParamLayout& layout, const std::string& name, int in_ch, int out_ch,
                   int temb_dim, int groups)
    : in_(in_ch), out_(out_ch) {
  gn1_.declare(layout, name + ".norm1", in_ch, groups);
  conv1_.declare(layout, name + ".conv1", in_ch, out_ch, 1);
  temb_.declare(layout, name + ".temb", temb_dim, out_ch);
  gn2_.declare(layout, name + ".norm2", out_ch, groups);
  conv2_.declare(layout, name + ".conv2", out_ch, out_ch, 1);
  if (in_ch != out_ch) skip_.declare(layout, name + ".skip", in_ch, out_ch);
}

template <class T>
void ResBlock::forward(std::span<const T> p, const Tensor<T>& x, std::span<const T> temb_act,
                       Cache<T>& c, Tensor<T>& out) const {
  require(x.channels() == in_, ErrorKind::Dimension,
          "res block: expected " + std::to_string(in_) + " channels, got " + x.describe());
  require(static_cast<int>(temb_act.size()) == temb_.in, ErrorKind::Dimension,
          "res block: time embedding width mismatch");
  c.x = x;
  gn_fwd(gn1_, p, x, c.n1, c.s1);
  silu_fwd(c.n1, c.a1);
  conv_fwd(conv1_, p, c.a1, c.h);
  c.tproj.assign(out_, T{0});
  nn::linear_forward<T>(temb_act, sub(p, temb_.w, std::size_t(temb_.in) * out_),
                        sub(p, temb_.b, out_), c.tproj);
  for (std::size_t v = 0; v < c.h.voxels(); ++v) {
    T* hv = c.h.voxel(v);
    for (int ch = 0; ch < out_; ++ch) hv[ch] += c.tproj[ch];
  }
  gn_fwd(gn2_, p, c.h, c.n2, c.s2);
  silu_fwd(c.n2, c.a2);
  conv_fwd(conv2_, p, c.a2, out);
  if (has_shortcut()) {
    Tensor<T> sk;
    pw_fwd(skip_, p, x, sk);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += sk[i];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += x[i];
  }
}

template <class T>
void ResBlock::backward(std::span<const T> p, Cache<T>& c, std::span<const T> temb_act,
                        const Tensor<T>& d_out, std::span<T> grad, Tensor<T>& d_x,
                        std::span<T> d_temb_act) const {
  Tensor<T> d_a2;
  conv_bwd(conv2_, p, c.a2, d_out, grad, &d_a2);
  silu_bwd_inplace(c.n2, d_a2);
  Tensor<T> d_h;
  gn_bwd(gn2_, p, c.h, c.s2, d_a2, grad, d_h);

  std::vector<T> d_tproj(out_, T{0});
  for (std::size_t v = 0; v < d_h.voxels(); ++v) {
    const T* g = d_h.voxel(v);
    for (int ch = 0; ch < out_; ++ch) d_tproj[ch] += g[ch];
  }
  std::vector<T> d_in(temb_.in);
  nn::linear_backward<T>(temb_act, sub(p, temb_.w, std::size_t(temb_.in) * out_), d_tproj, d_in,
                         sub(grad, temb_.w, std::size_t(temb_.in) * out_), sub(grad, temb_.b, out_));
  for (int i = 0; i < temb_.in; ++i) d_temb_act[i] += d_in[i];

  Tensor<T> d_a1 = std::move(d_a2);  // recycle the buffer; the kernel resizes it if needed
  conv_bwd(conv1_, p, c.a1, d_h, grad, &d_a1);
  silu_bwd_inplace(c.n1, d_a1);
  gn_bwd(gn1_, p, c.x, c.s1, d_a1, grad, d_x);

  if (has_shortcut()) {
    Tensor<T> d_skip;
    pw_bwd(skip_, p, c.x, d_out, grad, &d_skip);
    for (std::size_t i = 0; i < d_x.size(); ++i) d_x[i] += d_skip[i];
  } else {
    for (std::size_t i = 0; i < d_x.size(); ++i) d_x[i] += d_out[i];
  }
}

// ---------------------------------------------------------------- AttBlock

AttBlock::AttBlock(ParamLayout& layout, const std::string& name, int channels, int groups)
    : channels_(channels) {
  gn_.declare(layout, name + ".norm", channels, groups);
  q_.declare(layout, name + ".q", channels, channels);
  k_.declare(layout, name + ".k", channels, channels);
  v_.declare(layout, name + ".v", channels, channels);
  proj_.declare(layout, name + ".proj", channels, channels);
}

template <class T>
void AttBlock::forward(std::span<const T> p, const Tensor<T>& x, Cache<T>& c,
                       Tensor<T>& out) const {
  require(x.channels() == channels_, ErrorKind::Dimension,
          "attention block: expected " + std::to_string(channels_) + " channels, got " +
              x.describe());
  const auto n = static_cast<Eigen::Index>(x.voxels());
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(channels_)));
  c.x = x;
  gn_fwd(gn_, p, x, c.n, c.s);
  pw_fwd(q_, p, c.n, c.q);
  pw_fwd(k_, p, c.n, c.k);
  pw_fwd(v_, p, c.n, c.v);

  c.weights.resize(static_cast<std::size_t>(n) * n);
  MapMat<T> w(c.weights.data(), n, n);
  w.noalias() = as_matrix(c.q) * as_matrix(c.k).transpose();
  w *= scale;
  for (Eigen::Index r = 0; r < n; ++r) {
    auto row = w.row(r);
    const T m = row.maxCoeff();
    if (!std::isfinite(static_cast<double>(m)))
      throw NumericError(-1, "attention block: non-finite softmax input");
    // Plain loops: Eigen's vectorized exp and sum treat an unaligned head
    // differently from the body, so results would follow the allocator.
    T sum = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      row(j) = std::exp(row(j) - m);
      sum += row(j);
    }
    row /= sum;
  }
  ensure(c.o, channels_, x.shape());
  as_matrix(c.o).noalias() = w * as_matrix(c.v);
  pw_fwd(proj_, p, c.o, out);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += x[i];
}

template <class T>
void AttBlock::backward(std::span<const T> p, Cache<T>& c, const Tensor<T>& d_out,
                        std::span<T> grad, Tensor<T>& d_x) const {
  const auto n = static_cast<Eigen::Index>(c.x.voxels());
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(channels_)));
  Tensor<T> d_o;
  pw_bwd(proj_, p, c.o, d_out, grad, &d_o);

  CMapMat<T> w(c.weights.data(), n, n);
  Tensor<T> d_v(channels_, c.x.shape());
  as_matrix(d_v).noalias() = w.transpose() * as_matrix(d_o);
  RowMat<T> d_w = as_matrix(d_o) * as_matrix(c.v).transpose();
  // softmax: dS = W .* (dW - rowsum(dW .* W))
  for (Eigen::Index r = 0; r < n; ++r) {
    T dot = 0;
    for (Eigen::Index j = 0; j < n; ++j) dot += d_w(r, j) * w(r, j);
    d_w.row(r) = (w.row(r).array() * (d_w.row(r).array() - dot)) * scale;
  }
  Tensor<T> d_q(channels_, c.x.shape()), d_k(channels_, c.x.shape());
  as_matrix(d_q).noalias() = d_w * as_matrix(c.k);
  as_matrix(d_k).noalias() = d_w.transpose() * as_matrix(c.q);

  Tensor<T> d_n, tmp;
  pw_bwd(q_, p, c.n, d_q, grad, &d_n);
  pw_bwd(k_, p, c.n, d_k, grad, &tmp);
  for (std::size_t i = 0; i < d_n.size(); ++i) d_n[i] += tmp[i];
  pw_bwd(v_, p, c.n, d_v, grad, &tmp);
  for (std::size_t i = 0; i < d_n.size(); ++i) d_n[i] += tmp[i];
  gn_bwd(gn_, p, c.x, c.s, d_n, grad, d_x);
  for (std::size_t i = 0; i < d_x.size(); ++i) d_x[i] += d_out[i];
}

// ---------------------------------------------------------------- TimeEncoder

TimeEncoder::TimeEncoder(ParamLayout& layout, const std::string& name, int dim) : dim_(dim) {
  require(dim >= 2 && dim % 2 == 0, ErrorKind::Config,
          "time_embed_dim must be even and >= 2, got " + std::to_string(dim));
  l1_.declare(layout, name + ".fc1", dim, dim);
  l2_.declare(layout, name + ".fc2", dim, dim);
}

template <class T>
void TimeEncoder::forward(std::span<const T> p, double t, Cache<T>& c) const {
  c.sinusoid = nn::sinusoidal_embedding<T>(t, dim_);
  c.h.assign(dim_, T{0});
  c.a.assign(dim_, T{0});
  c.out.assign(dim_, T{0});
  const std::size_t nw = std::size_t(dim_) * dim_;
  nn::linear_forward<T>(c.sinusoid, sub(p, l1_.w, nw), sub(p, l1_.b, dim_), c.h);
  nn::silu_forward<T>(c.h, c.a);
  nn::linear_forward<T>(c.a, sub(p, l2_.w, nw), sub(p, l2_.b, dim_), c.out);
}

template <class T>
void TimeEncoder::backward(std::span<const T> p, const Cache<T>& c, std::span<const T> d_out,
                           std::span<T> grad) const {
  const std::size_t nw = std::size_t(dim_) * dim_;
  std::vector<T> d_a(dim_), d_sin(dim_);
  nn::linear_backward<T>(c.a, sub(p, l2_.w, nw), d_out, d_a, sub(grad, l2_.w, nw),
                         sub(grad, l2_.b, dim_));
  std::vector<T> d_h(dim_);
  nn::silu_backward<T>(c.h, d_a, d_h);
  nn::linear_backward<T>(c.sinusoid, sub(p, l1_.w, nw), d_h, d_sin, sub(grad, l1_.w, nw),
                         sub(grad, l1_.b, dim_));
}

#define THORAXDIFF_INSTANTIATE(T)                                                               \
  template void ResBlock::forward<T>(std::span<const T>, const Tensor<T>&, std::span<const T>,  \
                                     Cache<T>&, Tensor<T>&) const;                              \
  template void ResBlock::backward<T>(std::span<const T>, Cache<T>&, std::span<const T>,        \
                                      const Tensor<T>&, std::span<T>, Tensor<T>&,               \
                                      std::span<T>) const;                                      \
  template void AttBlock::forward<T>(std::span<const T>, const Tensor<T>&, Cache<T>&,           \
                                     Tensor<T>&) const;                                         \
  template void AttBlock::backward<T>(std::span<const T>, Cache<T>&, const Tensor<T>&,          \
                                      std::span<T>, Tensor<T>&) const;                          \
  template void TimeEncoder::forward<T>(std::span<const T>, double, Cache<T>&) const;           \
  template void TimeEncoder::backward<T>(std::span<const T>, const Cache<T>&,                   \
                                         std::span<const T>, std::span<T>) const;

THORAXDIFF_INSTANTIATE(float)
THORAXDIFF_INSTANTIATE(double)

#undef THORAXDIFF_INSTANTIATE

}  // namespace thoraxdiff

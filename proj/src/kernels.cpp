#include "thoraxdiff/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <type_traits>

#include <Eigen/Dense>

namespace thoraxdiff::nn {

namespace {

template <class T>
constexpr int kLanes = 64 / static_cast<int>(sizeof(T));

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// Copy `in` into `buf` with a one-voxel zero border: (D+2, H+2, W+2, C).
template <class T>
void pad1(const Tensor<T>& in, std::vector<T>& buf) {
  const auto& s = in.shape();
  const int C = in.channels();
  const int Hp = s.h + 2, Wp = s.w + 2;
  buf.assign(static_cast<std::size_t>(s.d + 2) * Hp * Wp * C, T{0});
  const std::size_t row = static_cast<std::size_t>(s.w) * C;
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y) {
      const T* src = in.data() + (static_cast<std::size_t>(z) * s.h + y) * row;
      T* dst = buf.data() + ((static_cast<std::size_t>(z + 1) * Hp + (y + 1)) * Wp + 1) * C;
      std::memcpy(dst, src, row * sizeof(T));
    }
}

struct ConvGeom {
  int ci, co, stride;
  int hp, wp;          // padded input extents
  int od, oh, ow;      // output extents
};

// Output channels [co0, co0 + CT) for VB consecutive output voxels along x.
template <class T, int CT, int VB>
inline void conv_block(const T* const rows[9], const T* __restrict w, const T* bias,
                       const ConvGeom& g, int co0, int x0, T* __restrict out_row) {
  T acc[VB][CT];
  for (int v = 0; v < VB; ++v)
    for (int c = 0; c < CT; ++c) acc[v][c] = bias ? bias[co0 + c] : T{0};
  const int CI = g.ci, CO = g.co, s = g.stride;
  for (int r = 0; r < 9; ++r) {
    for (int kw = 0; kw < 3; ++kw) {
      const T* __restrict src = rows[r] + static_cast<std::size_t>(x0 * s + kw) * CI;
      const T* __restrict wk = w + static_cast<std::size_t>((r * 3 + kw) * CI) * CO + co0;
      // Voxels are addressed in groups of four off separate base pointers so
      // every operand address stays base + index*scale without spilling.
      const std::ptrdiff_t step = static_cast<std::ptrdiff_t>(s) * CI;
      const T* group[(VB + 3) / 4];
      for (int q = 0; q < (VB + 3) / 4; ++q) group[q] = src + 4 * q * step;
      for (int ci = 0; ci < CI; ++ci) {
        const T* __restrict wv = wk + static_cast<std::size_t>(ci) * CO;
#pragma GCC unroll 16
        for (int v = 0; v < VB; ++v) {
          const T a = group[v >> 2][(v & 3) * step + ci];
#pragma omp simd
          for (int c = 0; c < CT; ++c) acc[v][c] += a * wv[c];
        }
      }
    }
  }
  for (int v = 0; v < VB; ++v) {
    T* o = out_row + static_cast<std::size_t>(x0 + v) * CO + co0;
    for (int c = 0; c < CT; ++c) o[c] = acc[v][c];
  }
}

template <class T, int CT, int VB>
void conv_channels(const T* pad, const T* w, const T* bias, const ConvGeom& g, int co_begin,
                   int co_end, T* out) {
  for (int z = 0; z < g.od; ++z)
    for (int y = 0; y < g.oh; ++y) {
      const T* rows[9];
      for (int kd = 0; kd < 3; ++kd)
        for (int kh = 0; kh < 3; ++kh)
          rows[kd * 3 + kh] =
              pad + (static_cast<std::size_t>(z * g.stride + kd) * g.hp + (y * g.stride + kh)) *
                        g.wp * g.ci;
      T* out_row = out + (static_cast<std::size_t>(z) * g.oh + y) * g.ow * g.co;
      for (int co0 = co_begin; co0 + CT <= co_end; co0 += CT) {
        int x0 = 0;
        for (; x0 + VB <= g.ow; x0 += VB) conv_block<T, CT, VB>(rows, w, bias, g, co0, x0, out_row);
        for (; x0 < g.ow; ++x0) conv_block<T, CT, 1>(rows, w, bias, g, co0, x0, out_row);
      }
    }
}

// Few remaining output channels: vectorize over input channels instead, with
// weights transposed to [27][co][ci] so both operands are contiguous.
template <class T, int VB>
inline void narrow_block(const T* const rows[9], const T* __restrict wt, int nco, int co, int x0,
                         const ConvGeom& g, T* __restrict out_row, T b) {
  constexpr int L = kLanes<T>;
  const int CI = g.ci;
  T acc[VB][L] = {};
  const std::ptrdiff_t step = static_cast<std::ptrdiff_t>(g.stride) * CI;
  for (int r = 0; r < 9; ++r)
    for (int kw = 0; kw < 3; ++kw) {
      const T* __restrict src = rows[r] + static_cast<std::size_t>(x0 * g.stride + kw) * CI;
      const T* __restrict wk = wt + (static_cast<std::size_t>(r * 3 + kw) * nco + co) * CI;
      for (int c0 = 0; c0 < CI; c0 += L) {
#pragma GCC unroll 8
        for (int v = 0; v < VB; ++v) {
          const T* __restrict a = src + v * step + c0;
#pragma omp simd
          for (int l = 0; l < L; ++l) acc[v][l] += a[l] * wk[c0 + l];
        }
      }
    }
  for (int v = 0; v < VB; ++v) {
    T sum = b;
    for (int l = 0; l < L; ++l) sum += acc[v][l];
    out_row[static_cast<std::size_t>(x0 + v) * g.co] = sum;
  }
}

template <class T>
void conv_narrow(const T* pad, const T* w, const T* bias, const ConvGeom& g, int co_begin, T* out) {
  const int nco = g.co - co_begin;
  std::vector<T> wt(static_cast<std::size_t>(27) * nco * g.ci);
  for (int k = 0; k < 27; ++k)
    for (int ci = 0; ci < g.ci; ++ci)
      for (int c = 0; c < nco; ++c)
        wt[(static_cast<std::size_t>(k) * nco + c) * g.ci + ci] =
            w[(static_cast<std::size_t>(k) * g.ci + ci) * g.co + co_begin + c];
  for (int z = 0; z < g.od; ++z)
    for (int y = 0; y < g.oh; ++y) {
      const T* rows[9];
      for (int kd = 0; kd < 3; ++kd)
        for (int kh = 0; kh < 3; ++kh)
          rows[kd * 3 + kh] =
              pad + (static_cast<std::size_t>(z * g.stride + kd) * g.hp + (y * g.stride + kh)) *
                        g.wp * g.ci;
      T* out_row = out + (static_cast<std::size_t>(z) * g.oh + y) * g.ow * g.co + co_begin;
      for (int c = 0; c < nco; ++c) {
        const T b = bias ? bias[co_begin + c] : T{0};
        int x0 = 0;
        for (; x0 + 8 <= g.ow; x0 += 8) narrow_block<T, 8>(rows, wt.data(), nco, c, x0, g, out_row + c, b);
        for (; x0 < g.ow; ++x0) narrow_block<T, 1>(rows, wt.data(), nco, c, x0, g, out_row + c, b);
      }
    }
}

template <class T>
void conv_padded(const T* pad, const T* w, const T* bias, const ConvGeom& g, T* out) {
  constexpr int L = kLanes<T>;
  int done = 0;
  if (g.co % (4 * L) == 0) {
    conv_channels<T, 4 * L, 4>(pad, w, bias, g, 0, g.co, out);
    done = g.co;
  } else if (g.co % (2 * L) == 0) {
    conv_channels<T, 2 * L, 8>(pad, w, bias, g, 0, g.co, out);
    done = g.co;
  } else if (g.co >= L) {
    done = g.co / L * L;
    conv_channels<T, L, 16>(pad, w, bias, g, 0, done, out);
  }
  if (done == g.co) return;
  if (g.ci % L == 0) {
    conv_narrow(pad, w, bias, g, done, out);
  } else {
    conv_channels<T, 1, 8>(pad, w, bias, g, done, g.co, out);
  }
}

// d_weight[k][ci][co] += sum_p pad[p*s + k][ci] * d_out[p][co]
template <class T, int CIB, int CT>
void weight_grad_block(const T* pad, const T* dout, const ConvGeom& g, int z, int k, int ci0,
                       int co0, T* dw) {
  const int kd = k / 9, kh = (k / 3) % 3, kw = k % 3;
  T acc[CIB][CT] = {};
  for (int y = 0; y < g.oh; ++y) {
    const T* __restrict src_row =
        pad + (static_cast<std::size_t>(z * g.stride + kd) * g.hp + (y * g.stride + kh)) * g.wp * g.ci;
    const T* __restrict g_row = dout + (static_cast<std::size_t>(z) * g.oh + y) * g.ow * g.co;
    for (int x = 0; x < g.ow; ++x) {
      const T* __restrict a = src_row + static_cast<std::size_t>(x * g.stride + kw) * g.ci + ci0;
      const T* __restrict gv = g_row + static_cast<std::size_t>(x) * g.co + co0;
#pragma GCC unroll 8
      for (int i = 0; i < CIB; ++i) {
        const T ai = a[i];
#pragma omp simd
        for (int c = 0; c < CT; ++c) acc[i][c] += ai * gv[c];
      }
    }
  }
  T* dst = dw + (static_cast<std::size_t>(k) * g.ci + ci0) * g.co + co0;
  for (int i = 0; i < CIB; ++i)
    for (int c = 0; c < CT; ++c) dst[static_cast<std::size_t>(i) * g.co + c] += acc[i][c];
}

template <class T, int CIB, int CT>
void weight_grad_range(const T* pad, const T* dout, const ConvGeom& g, int z, int k, int ci_begin,
                       int ci_end, int co_begin, int co_end, T* dw) {
  for (int ci0 = ci_begin; ci0 + CIB <= ci_end; ci0 += CIB)
    for (int co0 = co_begin; co0 + CT <= co_end; co0 += CT)
      weight_grad_block<T, CIB, CT>(pad, dout, g, z, k, ci0, co0, dw);
}

// Single output channel at a time, vectorized across L input channels.
template <class T>
void weight_grad_narrow(const T* pad, const T* dout, const ConvGeom& g, int z, int k, int ci_end,
                        int co_begin, T* dw) {
  constexpr int L = kLanes<T>;
  const int kd = k / 9, kh = (k / 3) % 3, kw = k % 3;
  for (int co = co_begin; co < g.co; ++co)
    for (int ci0 = 0; ci0 < ci_end; ci0 += L) {
      T acc[4][L] = {};
      for (int y = 0; y < g.oh; ++y) {
        const T* __restrict src_row = pad + (static_cast<std::size_t>(z * g.stride + kd) * g.hp +
                                             (y * g.stride + kh)) * g.wp * g.ci;
        const T* __restrict g_row = dout + (static_cast<std::size_t>(z) * g.oh + y) * g.ow * g.co;
        for (int x = 0; x < g.ow; ++x) {
          const T* __restrict a = src_row + static_cast<std::size_t>(x * g.stride + kw) * g.ci + ci0;
          const T gv = g_row[static_cast<std::size_t>(x) * g.co + co];
#pragma omp simd
          for (int l = 0; l < L; ++l) acc[x & 3][l] += a[l] * gv;
        }
      }
      T* dst = dw + (static_cast<std::size_t>(k) * g.ci + ci0) * g.co + co;
      for (int l = 0; l < L; ++l)
        dst[static_cast<std::size_t>(l) * g.co] += acc[0][l] + acc[1][l] + acc[2][l] + acc[3][l];
    }
}

template <class T>
void weight_grad(const T* pad, const T* dout, const ConvGeom& g, T* dw) {
  constexpr int L = kLanes<T>;
  constexpr int CIB = 8;
  const int co_fast = g.co / L * L;
  const int ci_fast = g.ci / CIB * CIB;
  // Slab-wise traversal keeps one output plane and its input rows cache-resident.
  for (int z = 0; z < g.od; ++z)
    for (int k = 0; k < 27; ++k) {
      if (co_fast > 0) {
        weight_grad_range<T, CIB, L>(pad, dout, g, z, k, 0, ci_fast, 0, co_fast, dw);
        weight_grad_range<T, 1, L>(pad, dout, g, z, k, ci_fast, g.ci, 0, co_fast, dw);
      }
      if (co_fast < g.co) {
        const int ci_wide = g.ci / L * L;
        weight_grad_narrow<T>(pad, dout, g, z, k, ci_wide, co_fast, dw);
        weight_grad_range<T, 1, 1>(pad, dout, g, z, k, ci_wide, g.ci, co_fast, g.co, dw);
      }
    }
}

template <class T>
thread_local std::vector<T> t_pad;
template <class T>
thread_local std::vector<T> t_pad2;

void check_conv_weight(std::size_t weight_size, std::size_t expected, const char* what) {
  require(weight_size == expected, ErrorKind::Dimension,
          std::string(what) + ": weight size " + std::to_string(weight_size) + " expected " +
              std::to_string(expected));
}

template <class T>
T fast_sigmoid(T x) {
  if constexpr (std::is_same_v<T, float>) {
    // exp(-x) via range reduction and a degree-6 polynomial; vectorizes cleanly.
    float v = std::clamp(-x, -87.0f, 87.0f);
    const float n = std::floor(v * 1.44269504088896341f + 0.5f);
    const float r = v - n * 0.693359375f + n * 2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    const float e = p * r * r + r + 1.0f;
    const int bits = (static_cast<int>(n) + 127) << 23;
    float scale;
    std::memcpy(&scale, &bits, sizeof(scale));
    return 1.0f / (1.0f + e * scale);
  } else {
    return T{1} / (T{1} + std::exp(-x));
  }
}

}  // namespace

template <class T>
void conv3_forward(const Tensor<T>& in, std::span<const T> weight, std::span<const T> bias,
                   int out_channels, int stride, Tensor<T>& out) {
  require(stride == 1 || stride == 2, ErrorKind::Config, "conv3: stride must be 1 or 2");
  const auto& s = in.shape();
  check_conv_weight(weight.size(), static_cast<std::size_t>(27) * in.channels() * out_channels,
                    "conv3_forward");
  require(bias.empty() || static_cast<int>(bias.size()) == out_channels, ErrorKind::Dimension,
          "conv3_forward: bias size mismatch");
  const Shape3 os{(s.d - 1) / stride + 1, (s.h - 1) / stride + 1, (s.w - 1) / stride + 1};
  if (out.channels() != out_channels || !(out.shape() == os)) out = Tensor<T>(out_channels, os);
  auto& pad = t_pad<T>;
  pad1(in, pad);
  const ConvGeom g{in.channels(), out_channels, stride, s.h + 2, s.w + 2, os.d, os.h, os.w};
  conv_padded(pad.data(), weight.data(), bias.empty() ? nullptr : bias.data(), g, out.data());
}

template <class T>
void conv3_backward(const Tensor<T>& in, std::span<const T> weight, int out_channels, int stride,
                    const Tensor<T>& d_out, Tensor<T>* d_in, std::span<T> d_weight,
                    std::span<T> d_bias) {
  const auto& s = in.shape();
  const int CI = in.channels(), CO = out_channels;
  check_conv_weight(weight.size(), static_cast<std::size_t>(27) * CI * CO, "conv3_backward");
  check_conv_weight(d_weight.size(), weight.size(), "conv3_backward (gradient)");
  require(d_out.channels() == CO, ErrorKind::Dimension, "conv3_backward: d_out channel mismatch");
  const ConvGeom g{CI, CO, stride, s.h + 2, s.w + 2, d_out.shape().d, d_out.shape().h,
                   d_out.shape().w};

  if (!d_bias.empty()) {
    for (std::size_t v = 0; v < d_out.voxels(); ++v) {
      const T* gv = d_out.voxel(v);
      for (int c = 0; c < CO; ++c) d_bias[c] += gv[c];
    }
  }

  auto& pad = t_pad<T>;
  pad1(in, pad);
  weight_grad(pad.data(), d_out.data(), g, d_weight.data());

  if (!d_in) return;
  if (d_in->channels() != CI || !(d_in->shape() == s)) *d_in = Tensor<T>(CI, s);

  if (stride == 1) {
    // Correlation with the spatially flipped, channel-transposed kernel.
    std::vector<T> flipped(weight.size());
    for (int k = 0; k < 27; ++k)
      for (int ci = 0; ci < CI; ++ci)
        for (int co = 0; co < CO; ++co)
          flipped[(static_cast<std::size_t>(k) * CO + co) * CI + ci] =
              weight[(static_cast<std::size_t>(26 - k) * CI + ci) * CO + co];
    auto& dpad = t_pad2<T>;
    pad1(d_out, dpad);
    const ConvGeom gb{CO, CI, 1, s.h + 2, s.w + 2, s.d, s.h, s.w};
    conv_padded(dpad.data(), flipped.data(), static_cast<const T*>(nullptr), gb, d_in->data());
    return;
  }

  // Strided: scatter each output gradient back onto its 27 taps.
  std::vector<T> wt(weight.size());
  for (int k = 0; k < 27; ++k)
    for (int ci = 0; ci < CI; ++ci)
      for (int co = 0; co < CO; ++co)
        wt[(static_cast<std::size_t>(k) * CO + co) * CI + ci] =
            weight[(static_cast<std::size_t>(k) * CI + ci) * CO + co];
  auto& dpad = t_pad2<T>;
  dpad.assign(static_cast<std::size_t>(s.d + 2) * g.hp * g.wp * CI, T{0});
  for (int z = 0; z < g.od; ++z)
    for (int y = 0; y < g.oh; ++y)
      for (int x = 0; x < g.ow; ++x) {
        const T* gv = d_out.data() + ((static_cast<std::size_t>(z) * g.oh + y) * g.ow + x) * CO;
        for (int k = 0; k < 27; ++k) {
          const int kd = k / 9, kh = (k / 3) % 3, kw = k % 3;
          T* __restrict dst =
              dpad.data() + ((static_cast<std::size_t>(z * stride + kd) * g.hp + (y * stride + kh)) *
                                 g.wp + (x * stride + kw)) * CI;
          const T* __restrict wk = wt.data() + static_cast<std::size_t>(k) * CO * CI;
          for (int co = 0; co < CO; ++co) {
            const T a = gv[co];
            const T* __restrict wr = wk + static_cast<std::size_t>(co) * CI;
#pragma omp simd
            for (int ci = 0; ci < CI; ++ci) dst[ci] += a * wr[ci];
          }
        }
      }
  const std::size_t row = static_cast<std::size_t>(s.w) * CI;
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      std::memcpy(d_in->data() + (static_cast<std::size_t>(z) * s.h + y) * row,
                  dpad.data() + ((static_cast<std::size_t>(z + 1) * g.hp + (y + 1)) * g.wp + 1) * CI,
                  row * sizeof(T));
}

template <class T>
void pointwise_forward(const Tensor<T>& in, std::span<const T> weight, std::span<const T> bias,
                       int out_channels, Tensor<T>& out) {
  const int CI = in.channels();
  check_conv_weight(weight.size(), static_cast<std::size_t>(CI) * out_channels, "pointwise_forward");
  if (out.channels() != out_channels || !(out.shape() == in.shape()))
    out = Tensor<T>(out_channels, in.shape());
  const auto n = static_cast<Eigen::Index>(in.voxels());
  CMapMat<T> x(in.data(), n, CI);
  CMapMat<T> w(weight.data(), CI, out_channels);
  MapMat<T> y(out.data(), n, out_channels);
  y.noalias() = x * w;
  if (!bias.empty()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias.data(), out_channels);
    y.rowwise() += b;
  }
}

template <class T>
void pointwise_backward(const Tensor<T>& in, std::span<const T> weight, int out_channels,
                        const Tensor<T>& d_out, Tensor<T>* d_in, std::span<T> d_weight,
                        std::span<T> d_bias) {
  const int CI = in.channels();
  const auto n = static_cast<Eigen::Index>(in.voxels());
  CMapMat<T> x(in.data(), n, CI);
  CMapMat<T> w(weight.data(), CI, out_channels);
  CMapMat<T> g(d_out.data(), n, out_channels);
  MapMat<T> dw(d_weight.data(), CI, out_channels);
  dw.noalias() += x.transpose() * g;
  if (!d_bias.empty()) {
    // Not g.colwise().sum(): Eigen peels by pointer alignment there, so the
    // summation order (and the rounding) would depend on the allocator.
    std::vector<T> acc(static_cast<std::size_t>(out_channels), T{0});
    const T* src = d_out.data();
    for (Eigen::Index v = 0; v < n; ++v, src += out_channels)
      for (int o = 0; o < out_channels; ++o) acc[static_cast<std::size_t>(o)] += src[o];
    for (int o = 0; o < out_channels; ++o) d_bias[static_cast<std::size_t>(o)] += acc[static_cast<std::size_t>(o)];
  }
  if (d_in) {
    if (!d_in->same_layout(in)) *d_in = Tensor<T>(CI, in.shape());
    MapMat<T> dx(d_in->data(), n, CI);
    dx.noalias() = g * w.transpose();
  }
}

template <class T>
void linear_forward(std::span<const T> in, std::span<const T> weight, std::span<const T> bias,
                    std::span<T> out) {
  const std::size_t ni = in.size(), no = out.size();
  check_conv_weight(weight.size(), ni * no, "linear_forward");
  for (std::size_t o = 0; o < no; ++o) out[o] = bias.empty() ? T{0} : bias[o];
  for (std::size_t i = 0; i < ni; ++i) {
    const T a = in[i];
    const T* wr = weight.data() + i * no;
    for (std::size_t o = 0; o < no; ++o) out[o] += a * wr[o];
  }
}

template <class T>
void linear_backward(std::span<const T> in, std::span<const T> weight, std::span<const T> d_out,
                     std::span<T> d_in, std::span<T> d_weight, std::span<T> d_bias) {
  const std::size_t ni = in.size(), no = d_out.size();
  for (std::size_t o = 0; o < no && !d_bias.empty(); ++o) d_bias[o] += d_out[o];
  for (std::size_t i = 0; i < ni; ++i) {
    T acc{0};
    const T* wr = weight.data() + i * no;
    T* dwr = d_weight.data() + i * no;
    for (std::size_t o = 0; o < no; ++o) {
      dwr[o] += in[i] * d_out[o];
      acc += wr[o] * d_out[o];
    }
    if (!d_in.empty()) d_in[i] = acc;
  }
}

template <class T>
void group_norm_forward(const Tensor<T>& in, int groups, std::span<const T> gamma,
                        std::span<const T> beta, Tensor<T>& out, GroupStats<T>& stats) {
  const int C = in.channels();
  require(groups >= 1 && C % groups == 0, ErrorKind::Config,
          "group_norm: channels " + std::to_string(C) + " not divisible by groups " +
              std::to_string(groups));
  const int cg = C / groups;
  const std::size_t n = in.voxels();
  std::vector<double> sum(C, 0.0), sq(C, 0.0);
  for (std::size_t v = 0; v < n; ++v) {
    const T* x = in.voxel(v);
    for (int c = 0; c < C; ++c) {
      const double xv = x[c];
      sum[c] += xv;
      sq[c] += xv * xv;
    }
  }
  stats.mean.assign(groups, T{0});
  stats.rstd.assign(groups, T{0});
  std::vector<T> scale(C), shift(C);
  const double count = static_cast<double>(n) * cg;
  for (int gi = 0; gi < groups; ++gi) {
    double s1 = 0.0, s2 = 0.0;
    for (int c = gi * cg; c < (gi + 1) * cg; ++c) {
      s1 += sum[c];
      s2 += sq[c];
    }
    const double mean = s1 / count;
    const double var = std::max(0.0, s2 / count - mean * mean);
    const double rstd = 1.0 / std::sqrt(var + kGroupNormEps);
    stats.mean[gi] = static_cast<T>(mean);
    stats.rstd[gi] = static_cast<T>(rstd);
    for (int c = gi * cg; c < (gi + 1) * cg; ++c) {
      scale[c] = static_cast<T>(rstd * gamma[c]);
      shift[c] = static_cast<T>(beta[c] - mean * rstd * gamma[c]);
    }
  }
  if (!out.same_layout(in)) out = Tensor<T>(C, in.shape());
  for (std::size_t v = 0; v < n; ++v) {
    const T* x = in.voxel(v);
    T* y = out.voxel(v);
    for (int c = 0; c < C; ++c) y[c] = x[c] * scale[c] + shift[c];
  }
}

template <class T>
void group_norm_backward(const Tensor<T>& in, int groups, std::span<const T> gamma,
                         const GroupStats<T>& stats, const Tensor<T>& d_out, Tensor<T>& d_in,
                         std::span<T> d_gamma, std::span<T> d_beta) {
  const int C = in.channels();
  const int cg = C / groups;
  const std::size_t n = in.voxels();
  std::vector<double> sdy(C, 0.0), sdyx(C, 0.0);
  for (std::size_t v = 0; v < n; ++v) {
    const T* x = in.voxel(v);
    const T* g = d_out.voxel(v);
    for (int c = 0; c < C; ++c) {
      sdy[c] += g[c];
      sdyx[c] += static_cast<double>(g[c]) * x[c];
    }
  }
  std::vector<T> a(C), b(C), k(C);
  const double count = static_cast<double>(n) * cg;
  for (int gi = 0; gi < groups; ++gi) {
    const double mean = stats.mean[gi], r = stats.rstd[gi];
    double m1 = 0.0, m2 = 0.0;
    for (int c = gi * cg; c < (gi + 1) * cg; ++c) {
      const double dxhat_sum = sdy[c];
      const double dxhat_xhat = r * (sdyx[c] - mean * sdy[c]);
      d_gamma[c] += static_cast<T>(dxhat_xhat);
      d_beta[c] += static_cast<T>(dxhat_sum);
      m1 += gamma[c] * dxhat_sum;
      m2 += gamma[c] * dxhat_xhat;
    }
    m1 /= count;
    m2 /= count;
    // dx = r*gamma*dy - r*m1 - r^2*m2*(x - mean)
    for (int c = gi * cg; c < (gi + 1) * cg; ++c) {
      a[c] = static_cast<T>(r * gamma[c]);
      b[c] = static_cast<T>(-r * r * m2);
      k[c] = static_cast<T>(-r * m1 + r * r * m2 * mean);
    }
  }
  if (!d_in.same_layout(in)) d_in = Tensor<T>(C, in.shape());
  for (std::size_t v = 0; v < n; ++v) {
    const T* x = in.voxel(v);
    const T* g = d_out.voxel(v);
    T* dx = d_in.voxel(v);
    for (int c = 0; c < C; ++c) dx[c] = a[c] * g[c] + b[c] * x[c] + k[c];
  }
}

template <class T>
void silu_forward(std::span<const T> in, std::span<T> out) {
  const std::size_t n = in.size();
  const T* __restrict x = in.data();
  T* __restrict y = out.data();
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * fast_sigmoid(x[i]);
}

template <class T>
void silu_backward(std::span<const T> in, std::span<const T> d_out, std::span<T> d_in) {
  const std::size_t n = in.size();
  const T* __restrict x = in.data();
  const T* g = d_out.data();  // may alias d_in
  T* dx = d_in.data();
  for (std::size_t i = 0; i < n; ++i) {
    const T s = fast_sigmoid(x[i]);
    dx[i] = g[i] * s * (T{1} + x[i] * (T{1} - s));
  }
}

template <class T>
void upsample_nearest2_forward(const Tensor<T>& in, Tensor<T>& out) {
  const auto& s = in.shape();
  const int C = in.channels();
  const Shape3 os{s.d * 2, s.h * 2, s.w * 2};
  if (out.channels() != C || !(out.shape() == os)) out = Tensor<T>(C, os);
  for (int z = 0; z < os.d; ++z)
    for (int y = 0; y < os.h; ++y)
      for (int x = 0; x < os.w; ++x) {
        const T* src = in.voxel((static_cast<std::size_t>(z / 2) * s.h + y / 2) * s.w + x / 2);
        T* dst = out.voxel((static_cast<std::size_t>(z) * os.h + y) * os.w + x);
        std::memcpy(dst, src, C * sizeof(T));
      }
}

template <class T>
void upsample_nearest2_backward(const Tensor<T>& d_out, Tensor<T>& d_in) {
  const auto& os = d_out.shape();
  const int C = d_out.channels();
  const Shape3 s{os.d / 2, os.h / 2, os.w / 2};
  d_in = Tensor<T>(C, s);
  for (int z = 0; z < os.d; ++z)
    for (int y = 0; y < os.h; ++y)
      for (int x = 0; x < os.w; ++x) {
        const T* src = d_out.voxel((static_cast<std::size_t>(z) * os.h + y) * os.w + x);
        T* dst = d_in.voxel((static_cast<std::size_t>(z / 2) * s.h + y / 2) * s.w + x / 2);
        for (int c = 0; c < C; ++c) dst[c] += src[c];
      }
}

template <class T>
std::vector<T> sinusoidal_embedding(double t, int dim) {
  require(dim >= 2 && dim % 2 == 0, ErrorKind::Config,
          "time embedding: dim must be even and >= 2, got " + std::to_string(dim));
  require(t >= 0.0, ErrorKind::Domain, "time embedding: t must be >= 0");
  const int half = dim / 2;
  std::vector<T> out(dim);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    out[2 * i] = static_cast<T>(std::sin(t * freq));
    out[2 * i + 1] = static_cast<T>(std::cos(t * freq));
  }
  return out;
}

#define THORAXDIFF_INSTANTIATE(T)                                                              \
  template void conv3_forward<T>(const Tensor<T>&, std::span<const T>, std::span<const T>, int, \
                                 int, Tensor<T>&);                                             \
  template void conv3_backward<T>(const Tensor<T>&, std::span<const T>, int, int,              \
                                  const Tensor<T>&, Tensor<T>*, std::span<T>, std::span<T>);   \
  template void pointwise_forward<T>(const Tensor<T>&, std::span<const T>, std::span<const T>, \
                                     int, Tensor<T>&);                                         \
  template void pointwise_backward<T>(const Tensor<T>&, std::span<const T>, int,               \
                                      const Tensor<T>&, Tensor<T>*, std::span<T>,              \
                                      std::span<T>);                                           \
  template void linear_forward<T>(std::span<const T>, std::span<const T>, std::span<const T>,  \
                                  std::span<T>);                                               \
  template void linear_backward<T>(std::span<const T>, std::span<const T>, std::span<const T>, \
                                   std::span<T>, std::span<T>, std::span<T>);                  \
  template void group_norm_forward<T>(const Tensor<T>&, int, std::span<const T>,               \
                                      std::span<const T>, Tensor<T>&, GroupStats<T>&);         \
  template void group_norm_backward<T>(const Tensor<T>&, int, std::span<const T>,              \
                                       const GroupStats<T>&, const Tensor<T>&, Tensor<T>&,     \
                                       std::span<T>, std::span<T>);                            \
  template void silu_forward<T>(std::span<const T>, std::span<T>);                             \
  template void silu_backward<T>(std::span<const T>, std::span<const T>, std::span<T>);        \
  template void upsample_nearest2_forward<T>(const Tensor<T>&, Tensor<T>&);                    \
  template void upsample_nearest2_backward<T>(const Tensor<T>&, Tensor<T>&);                   \
  template std::vector<T> sinusoidal_embedding<T>(double, int);

THORAXDIFF_INSTANTIATE(float)
THORAXDIFF_INSTANTIATE(double)

#undef THORAXDIFF_INSTANTIATE

}  // namespace thoraxdiff::nn

#pragma once

#include <span>
#include <vector>

#include "thoraxdiff/tensor.hpp"

// Forward/backward primitives over channel-last tensors. Instantiated for
// float (training and sampling) and double (gradient verification).
namespace thoraxdiff::nn {

// 3x3x3 convolution, zero padding 1, stride 1 or 2.
// weight layout [27][in_channels][out_channels], tap k = (kd*3 + kh)*3 + kw.
template <class T>
void conv3_forward(const Tensor<T>& in, std::span<const T> weight, std::span<const T> bias,
                   int out_channels, int stride, Tensor<T>& out);

// Accumulates into d_weight / d_bias; overwrites *d_in when non-null.
template <class T>
void conv3_backward(const Tensor<T>& in, std::span<const T> weight, int out_channels, int stride,
                    const Tensor<T>& d_out, Tensor<T>* d_in, std::span<T> d_weight,
                    std::span<T> d_bias);

// 1x1x1 convolution; weight layout [in_channels][out_channels].
template <class T>
void pointwise_forward(const Tensor<T>& in, std::span<const T> weight, std::span<const T> bias,
                       int out_channels, Tensor<T>& out);
template <class T>
void pointwise_backward(const Tensor<T>& in, std::span<const T> weight, int out_channels,
                        const Tensor<T>& d_out, Tensor<T>* d_in, std::span<T> d_weight,
                        std::span<T> d_bias);

// Dense layer on vectors; weight layout [in][out].
template <class T>
void linear_forward(std::span<const T> in, std::span<const T> weight, std::span<const T> bias,
                    std::span<T> out);
template <class T>
void linear_backward(std::span<const T> in, std::span<const T> weight, std::span<const T> d_out,
                     std::span<T> d_in, std::span<T> d_weight, std::span<T> d_bias);

// Per-group statistics saved by the forward pass.
template <class T>
struct GroupStats {
  std::vector<T> mean;
  std::vector<T> rstd;
};

inline constexpr double kGroupNormEps = 1e-5;

template <class T>
void group_norm_forward(const Tensor<T>& in, int groups, std::span<const T> gamma,
                        std::span<const T> beta, Tensor<T>& out, GroupStats<T>& stats);
template <class T>
void group_norm_backward(const Tensor<T>& in, int groups, std::span<const T> gamma,
                         const GroupStats<T>& stats, const Tensor<T>& d_out, Tensor<T>& d_in,
                         std::span<T> d_gamma, std::span<T> d_beta);

// x * sigmoid(x)
template <class T>
void silu_forward(std::span<const T> in, std::span<T> out);
template <class T>
void silu_backward(std::span<const T> in, std::span<const T> d_out, std::span<T> d_in);

template <class T>
void upsample_nearest2_forward(const Tensor<T>& in, Tensor<T>& out);
template <class T>
void upsample_nearest2_backward(const Tensor<T>& d_out, Tensor<T>& d_in);

// Sinusoidal embedding: out[2i] = sin(t*f_i), out[2i+1] = cos(t*f_i),
// f_i = 10000^(-i/(dim/2)).
template <class T>
std::vector<T> sinusoidal_embedding(double t, int dim);

}  // namespace thoraxdiff::nn

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "thoraxdiff/kernels.hpp"
#include "thoraxdiff/tensor.hpp"

namespace thoraxdiff {

// How a parameter tensor is initialized.
enum class InitRule {
  Zero,
  One,
  FanIn,  // uniform in +-sqrt(3/fan_in), i.e. variance 1/fan_in
};

struct ParamEntry {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  InitRule init = InitRule::Zero;
  int fan_in = 0;
};

// Named tensors packed into one flat buffer. Gradients, EMA shadows and
// optimizer moments reuse the same layout.
class ParamLayout {
 public:
  std::size_t add(std::string name, std::vector<int> shape, InitRule init, int fan_in = 0);

  const std::vector<ParamEntry>& entries() const noexcept { return entries_; }
  std::size_t total() const noexcept { return total_; }
  const ParamEntry& find(const std::string& name) const;

 private:
  std::vector<ParamEntry> entries_;
  std::size_t total_ = 0;
};

// GroupNorm uses gcd(requested, channels) groups so that narrow layers in
// small configs stay valid.
int effective_groups(int requested, int channels) noexcept;

struct Conv3Layer {
  int in = 0, out = 0, stride = 1;
  std::size_t w = 0, b = 0;
  void declare(ParamLayout& layout, const std::string& name, int in_ch, int out_ch, int stride_,
               InitRule rule = InitRule::FanIn);
};

struct PointwiseLayer {
  int in = 0, out = 0;
  std::size_t w = 0, b = 0;
  void declare(ParamLayout& layout, const std::string& name, int in_ch, int out_ch);
};

struct LinearLayer {
  int in = 0, out = 0;
  std::size_t w = 0, b = 0;
  void declare(ParamLayout& layout, const std::string& name, int in_dim, int out_dim);
};

struct GroupNormLayer {
  int channels = 0, groups = 1;
  std::size_t gamma = 0, beta = 0;
  void declare(ParamLayout& layout, const std::string& name, int ch, int requested_groups);
};

// GN -> SiLU -> conv3 -> + Linear(temb_act) per channel -> GN -> SiLU -> conv3,
// plus identity or 1x1 shortcut. `temb_act` is SiLU of the shared time embedding.
class ResBlock {
 public:
  template <class T>
  struct Cache {
    Tensor<T> x, n1, a1, h, n2, a2;
    nn::GroupStats<T> s1, s2;
    std::vector<T> tproj;
  };

  ResBlock() = default;
  ResBlock(ParamLayout& layout, const std::string& name, int in_ch, int out_ch, int temb_dim,
           int groups);

  int in_channels() const noexcept { return in_; }
  int out_channels() const noexcept { return out_; }
  bool has_shortcut() const noexcept { return in_ != out_; }
  const Conv3Layer& conv1() const noexcept { return conv1_; }
  const Conv3Layer& conv2() const noexcept { return conv2_; }

  template <class T>
  void forward(std::span<const T> p, const Tensor<T>& x, std::span<const T> temb_act,
               Cache<T>& cache, Tensor<T>& out) const;
  // Accumulates parameter gradients into `grad` and SiLU(temb) gradients
  // into `d_temb_act`; overwrites `d_x`.
  template <class T>
  void backward(std::span<const T> p, Cache<T>& cache, std::span<const T> temb_act,
                const Tensor<T>& d_out, std::span<T> grad, Tensor<T>& d_x,
                std::span<T> d_temb_act) const;

 private:
  int in_ = 0, out_ = 0;
  GroupNormLayer gn1_, gn2_;
  Conv3Layer conv1_, conv2_;
  LinearLayer temb_;
  PointwiseLayer skip_;
};

// Single-head self-attention over all spatial positions, residual output:
// out = x + proj(softmax(q k^T / sqrt(C)) v), with q, k, v 1x1 projections of GN(x).
class AttBlock {
 public:
  template <class T>
  struct Cache {
    Tensor<T> x, n, q, k, v, o;
    nn::GroupStats<T> s;
    std::vector<T> weights;  // N x N row-major, rows sum to 1
  };

  AttBlock() = default;
  AttBlock(ParamLayout& layout, const std::string& name, int channels, int groups);

  int channels() const noexcept { return channels_; }
  const PointwiseLayer& proj() const noexcept { return proj_; }

  template <class T>
  void forward(std::span<const T> p, const Tensor<T>& x, Cache<T>& cache, Tensor<T>& out) const;
  template <class T>
  void backward(std::span<const T> p, Cache<T>& cache, const Tensor<T>& d_out, std::span<T> grad,
                Tensor<T>& d_x) const;

 private:
  int channels_ = 0;
  GroupNormLayer gn_;
  PointwiseLayer q_, k_, v_, proj_;
};

// sinusoid(t) -> Linear -> SiLU -> Linear.
class TimeEncoder {
 public:
  template <class T>
  struct Cache {
    std::vector<T> sinusoid, h, a, out;
  };

  TimeEncoder() = default;
  TimeEncoder(ParamLayout& layout, const std::string& name, int dim);

  int dim() const noexcept { return dim_; }

  template <class T>
  void forward(std::span<const T> p, double t, Cache<T>& cache) const;
  template <class T>
  void backward(std::span<const T> p, const Cache<T>& cache, std::span<const T> d_out,
                std::span<T> grad) const;

 private:
  int dim_ = 0;
  LinearLayer l1_, l2_;
};

}  // namespace thoraxdiff

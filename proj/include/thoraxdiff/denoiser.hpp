#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "thoraxdiff/layers.hpp"
#include "thoraxdiff/tensor.hpp"

namespace thoraxdiff {

struct DenoiserConfig {
  int resolution = 32;
  int in_channels = 3;  // latent + layout channels
  int base_width = 16;
  std::vector<int> channel_multipliers{1, 2, 4};
  std::vector<int> attention_levels{2};
  int time_embed_dim = 64;
  int groups = 8;

  int levels() const noexcept { return static_cast<int>(channel_multipliers.size()); }
  int width(int level) const { return base_width * channel_multipliers.at(level); }
  bool has_attention(int level) const noexcept;
  // Throws Config naming the offending field.
  void validate() const;

  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);

// 128^3 instance with a four-level ladder, for completeness; far beyond desk budgets.
DenoiserConfig full_scale_config();

// Intermediate state recorded by a forward pass and consumed by backward.
template <class T>
struct Tape {
  TimeEncoder::Cache<T> time;
  std::vector<T> temb_act;
  Tensor<T> input;
  std::vector<ResBlock::Cache<T>> enc_res, dec_res;
  std::vector<AttBlock::Cache<T>> enc_att, dec_att;
  ResBlock::Cache<T> mid_res1, mid_res2;
  AttBlock::Cache<T> mid_att;
  std::vector<Tensor<T>> skips;   // encoder output per level
  std::vector<Tensor<T>> up_in;   // upsampled tensors feeding the up convolutions
  Tensor<T> h_final, n_out, a_out;
  nn::GroupStats<T> s_out;
};

// Network topology and parameter layout for one DenoiserConfig.
class UNet {
 public:
  explicit UNet(const DenoiserConfig& cfg);

  const DenoiserConfig& config() const noexcept { return cfg_; }
  const ParamLayout& layout() const noexcept { return layout_; }
  const ResBlock& encoder_block(int level) const { return enc_res_.at(level); }
  const ResBlock& decoder_block(int level) const { return dec_res_.at(level); }
  const AttBlock* attention_block(int level) const;

  template <class T>
  void forward(std::span<const T> p, const Tensor<T>& x, double t, Tape<T>& tape,
               Tensor<T>& out) const;
  // Accumulates dLoss/dParams into `grad`.
  template <class T>
  void backward(std::span<const T> p, Tape<T>& tape, const Tensor<T>& d_out,
                std::span<T> grad) const;

 private:
  DenoiserConfig cfg_;
  ParamLayout layout_;
  TimeEncoder time_;
  Conv3Layer conv_in_;
  std::vector<ResBlock> enc_res_, dec_res_;
  std::vector<std::optional<AttBlock>> enc_att_, dec_att_;
  std::vector<Conv3Layer> down_, up_;
  ResBlock mid_res1_, mid_res2_;
  std::optional<AttBlock> mid_att_;
  GroupNormLayer out_gn_;
  Conv3Layer out_conv_;
};

// Fill `params` from the layout's init rules with a seeded stream per tensor.
// `randomize_zero_weights` also draws the normally zero-initialized output
// convolution, giving a "random-weight" network whose output depends on input.
template <class T>
void initialize_params(const ParamLayout& layout, std::span<T> params, std::uint64_t seed,
                       bool randomize_zero_weights = false);

// Anything that maps a conditioned latent (latent channel first) and a step
// to a single-channel noise estimate.
template <class T>
class NoisePredictorT {
 public:
  virtual ~NoisePredictorT() = default;
  virtual int in_channels() const = 0;
  virtual Tensor<T> predict_noise(const Tensor<T>& cond_input, int t) const = 0;
};
using NoisePredictor = NoisePredictorT<float>;

template <class T>
class Denoiser : public NoisePredictorT<T> {
 public:
  explicit Denoiser(const DenoiserConfig& cfg);
  Denoiser(std::shared_ptr<const UNet> net, std::vector<T> params);

  static Denoiser initialized(const DenoiserConfig& cfg, std::uint64_t seed,
                              bool randomize_zero_weights = false);

  const DenoiserConfig& config() const noexcept { return net_->config(); }
  const UNet& net() const noexcept { return *net_; }
  std::shared_ptr<const UNet> shared_net() const noexcept { return net_; }
  std::size_t param_count() const noexcept { return params_.size(); }
  std::vector<T>& params() noexcept { return params_; }
  const std::vector<T>& params() const noexcept { return params_; }

  int in_channels() const override { return config().in_channels; }
  // Validates channels/shape and t >= 1; throws NumericHealth on non-finite output.
  Tensor<T> predict_noise(const Tensor<T>& cond_input, int t) const override;

  template <class U>
  Denoiser<U> cast() const {
    return Denoiser<U>(net_, std::vector<U>(params_.begin(), params_.end()));
  }

 private:
  std::shared_ptr<const UNet> net_;
  std::vector<T> params_;
};

template <class T>
bool all_finite(std::span<const T> v) noexcept;

}  // namespace thoraxdiff

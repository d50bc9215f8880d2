#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "thoraxdiff/denoiser.hpp"
#include "thoraxdiff/schedule.hpp"
#include "thoraxdiff/volume.hpp"

namespace thoraxdiff {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

struct TrainConfig {
  double lr = 1e-5;
  double ema_decay = 0.995;
  long total_steps = 1000;
  int batch_size = 1;
  ScheduleDescriptor schedule;
  std::uint64_t seed = 0;
  Conditioning conditioning = Conditioning::LungAndNodule;
  long checkpoint_every = 500;  // 0 writes only the final checkpoint
  AdamConfig adam;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Everything needed to continue training bit-exactly. Random draws are keyed
// by (seed, step), so the stream state is fully described by those two.
struct TrainState {
  std::vector<float> params;
  std::vector<float> ema;
  std::vector<float> adam_m;
  std::vector<float> adam_v;
  long step = 0;
  std::uint64_t seed = 0;

  static TrainState from_params(std::vector<float> params, std::uint64_t seed);
  friend bool operator==(const TrainState&, const TrainState&) = default;
};

// One training pair, with the layout already channelized.
struct TrainExample {
  Grid3<float> x0;
  Tensor<float> layout_channels;
};

std::vector<TrainExample> make_examples(std::span<const Volume> volumes,
                                        std::span<const SemanticLayout> layouts,
                                        Conditioning conditioning);

// Where a model is called from, so stochastic or test models can key on it.
struct StepContext {
  long step = 0;
  int element = 0;
};

// A noise predictor the trainer can differentiate. forward() may keep state
// that the following backward() consumes.
class TrainableModel {
 public:
  virtual ~TrainableModel() = default;
  virtual std::size_t param_count() const = 0;
  virtual void forward(std::span<const float> params, const Tensor<float>& input, int t,
                       const StepContext& ctx, Tensor<float>& pred) = 0;
  // Accumulates dLoss/dParams given dLoss/dPred.
  virtual void backward(std::span<const float> params, const Tensor<float>& d_pred,
                        std::span<float> grad) = 0;
};

class UNetModel : public TrainableModel {
 public:
  explicit UNetModel(std::shared_ptr<const UNet> net);
  std::size_t param_count() const override;
  void forward(std::span<const float> params, const Tensor<float>& input, int t,
               const StepContext& ctx, Tensor<float>& pred) override;
  void backward(std::span<const float> params, const Tensor<float>& d_pred,
                std::span<float> grad) override;

 private:
  std::shared_ptr<const UNet> net_;
  Tape<float> tape_;
};

// The random quantities behind batch element `element` of step `step`.
struct TrainingDraw {
  std::size_t example = 0;
  int t = 1;
  Grid3<float> eps;
};
TrainingDraw training_draw(std::uint64_t seed, long step, int element, std::size_t n_examples,
                           int T, Shape3 shape);

// mean |eps - pred|, and dLoss/dPred scaled by `weight` (subgradient 0 at 0).
template <class T>
double l1_loss(std::span<const T> eps, std::span<const T> pred, std::span<T> d_pred, double weight);

// L1 noise-prediction objective of a UNet at one (input, t, eps), with an
// optional gradient accumulated into `grad`. Used for gradient checks.
template <class T>
double l1_objective(const UNet& net, std::span<const T> params, const Tensor<T>& input, int t,
                    std::span<const T> eps, std::span<T> grad);

// ema <- decay * ema + (1 - decay) * params
void ema_update(std::span<float> ema, std::span<const float> params, double decay);

void adam_update(std::span<float> params, std::span<float> m, std::span<float> v,
                 std::span<const float> grad, double lr, const AdamConfig& adam, long k);

// One step of the training algorithm on `batch_size` examples drawn from
// `data`. Returns the batch loss; state.step advances by one.
double train_step(TrainState& state, TrainableModel& model, std::span<const TrainExample> data,
                  const NoiseSchedule& schedule, const TrainConfig& cfg);

// Serialized training state plus the configs that produced it.
struct Checkpoint {
  DenoiserConfig denoiser;
  TrainConfig train;
  TrainState state;
};

// Hash of the parameter and EMA blobs; stable across save/load.
std::string checkpoint_id(const TrainState& state);

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

struct FitOptions {
  std::optional<std::filesystem::path> resume_from;
  // Called after every step with (step just completed, loss).
  std::function<void(long, double)> on_step;
};

// Runs train_step until cfg.total_steps, writing loss.csv (step, loss,
// wall_time_s) and checkpoints under out_dir/checkpoints. Returns the final
// checkpoint directory.
std::filesystem::path fit(const DenoiserConfig& dcfg, const TrainConfig& cfg,
                          std::span<const TrainExample> data, const std::filesystem::path& out_dir,
                          const FitOptions& options = {});

}  // namespace thoraxdiff

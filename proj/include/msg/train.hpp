#pragma once

// Adversarial training: one discriminator update then one generator update
// per step, two Adam optimizers, calibrate-then-freeze loss weights, and
// checkpoints that carry the full training state so a resumed run continues
// the exact same trajectory.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "msg/checkpoint.hpp"
#include "msg/data.hpp"
#include "msg/losses.hpp"
#include "msg/model.hpp"

namespace msg::train {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.9;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t t = 0;
  std::vector<std::vector<double>> m;  // mirrors the parameter list order
  std::vector<std::vector<double>> v;
};

AdamState make_adam(const model::ParameterList& params, const AdamConfig& config = {});

// Bias-corrected Adam on params using their accumulated gradients (missing
// gradients count as zero). DomainError naming the parameter on a non-finite
// gradient; no parameter is modified in that case.
void adam_step(const model::ParameterList& params, AdamState& state);

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  std::size_t calibration_window = 1000;
  std::size_t checkpoint_every = 0;  // 0: only at the end
  std::size_t clip_len = data::kClipLength;
  double swap_prob = 0.1;
  AdamConfig adam;
  model::GeneratorConfig generator = model::GeneratorConfig::paper();
  model::EnsembleConfig discriminators = model::EnsembleConfig::paper();
  losses::MelLossConfig mel = losses::MelLossConfig::paper();
  std::string manifest;
  std::string source = "bass";
  std::string out = "msg.ckpt";
  std::string loss_csv;  // default: <out>.losses.csv
  std::string resume;    // checkpoint to continue from

  void validate() const;
  std::filesystem::path loss_csv_path() const;
};

nlohmann::json to_json(const TrainConfig& c);
// Missing keys keep their defaults; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);

struct StepLosses {
  std::size_t step = 0;  // 1-based
  double l_g = 0.0;      // generator adversarial term
  double l_d = 0.0;
  double l_fm = 0.0;
  double l_mel = 0.0;
  double total = 0.0;  // weighted generator objective
  losses::LossWeights weights;  // weights applied in this step
};

// Gradient norms observed inside one step, for checking that each update
// only touches its own network.
struct GradientAudit {
  double d_grad_in_d_step = 0.0;
  double g_grad_in_d_step = 0.0;
  double d_grad_in_g_step = 0.0;
  double g_grad_in_g_step = 0.0;
  std::vector<double> g_param_grad_norms;  // per generator parameter, G sub-step
  std::vector<double> d_param_grad_norms;  // per discriminator parameter, D sub-step
};

struct Batch {
  ad::DiffArray input;   // [B, 1, L]
  ad::DiffArray target;  // [B, 1, L]
};

class Trainer {
 public:
  Trainer(TrainConfig config, std::vector<data::TrainingExample> examples);

  const TrainConfig& config() const { return config_; }
  std::size_t steps_done() const { return step_; }
  const losses::LossBalancer& balancer() const { return balancer_; }
  const model::Generator& generator() const { return generator_; }
  const model::DiscriminatorEnsemble& discriminators() const { return ensemble_; }
  const GradientAudit& last_audit() const { return audit_; }
  const AdamState& adam_g() const { return adam_g_; }
  const AdamState& adam_d() const { return adam_d_; }

  // Batch for the next step: per-epoch shuffled order, swap augmentation,
  // then input peak normalization with the same gain applied to the target.
  Batch next_batch() const;

  // One D update then one G update on next_batch().
  StepLosses step();
  StepLosses train_step(const Batch& batch);

  void save(const std::filesystem::path& path) const;
  // Restores parameters, optimizer moments, balancer and step count.
  void load(const std::filesystem::path& path);

 private:
  std::vector<std::size_t> epoch_order(std::size_t epoch) const;
  StepLosses run_step(const Batch& batch);

  TrainConfig config_;
  std::vector<data::TrainingExample> examples_;
  model::Generator generator_;
  model::DiscriminatorEnsemble ensemble_;
  losses::MultiScaleMelLoss mel_loss_;
  losses::LossBalancer balancer_;
  AdamState adam_g_;
  AdamState adam_d_;
  std::size_t step_ = 0;
  GradientAudit audit_;
  mutable std::string last_checkpoint_;
};

struct TrainResult {
  std::vector<StepLosses> history;  // steps run in this call
  std::filesystem::path checkpoint;
  std::filesystem::path loss_csv;
};

// Loads examples of cfg.source from cfg.manifest and trains.
TrainResult run_training(const TrainConfig& cfg);
TrainResult run_training(const TrainConfig& cfg, std::vector<data::TrainingExample> examples);

// Generator rebuilt from a training checkpoint.
model::Generator load_generator(const std::filesystem::path& checkpoint);

// Peak-normalizes, runs G, and undoes nothing else: output has the input's
// length and the normalized scale.
dsp::AudioBuffer enhance(const model::Generator& generator, const dsp::AudioBuffer& audio);

}  // namespace msg::train

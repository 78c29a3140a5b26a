#pragma once

// Training objectives: least-squares adversarial losses, discriminator
// feature matching, multi-scale log-mel reconstruction, and the
// calibrate-then-freeze loss weighting.

#include <array>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <span>
#include <vector>

#include "json.hpp"
#include "msg/diffarray.hpp"
#include "msg/dsp.hpp"
#include "msg/model.hpp"

namespace msg::losses {

using model::DiscriminatorOutput;

// (1/K) sum_k mean((D_k(G(x)) - 1)^2).
ad::DiffArray generator_adv_loss(std::span<const DiscriminatorOutput> fake);

// sum_k [mean((D_k(s) - 1)^2) + mean(D_k(s~)^2)].
ad::DiffArray discriminator_adv_loss(std::span<const DiscriminatorOutput> real,
                                     std::span<const DiscriminatorOutput> fake);

// Mean over members of the mean over hidden layers of mean |real - fake|.
// Callers pass real-branch features computed off the tape.
ad::DiffArray feature_matching_loss(std::span<const DiscriminatorOutput> real,
                                    std::span<const DiscriminatorOutput> fake);

struct MelScale {
  dsp::StftParams stft;
  std::size_t n_mels = 80;
};

struct MelLossConfig {
  std::vector<MelScale> scales{{{512, 512, 128}, 80}, {{1024, 1024, 256}, 80}, {{2048, 2048, 512}, 80}};
  double sample_rate = dsp::kCanonicalRate;
  double eps = 1e-5;

  static MelLossConfig paper() { return {}; }
};

nlohmann::json to_json(const MelLossConfig& c);
MelLossConfig mel_loss_config_from_json(const nlohmann::json& j);

// Holds the per-scale filterbank matrices so they are built once.
class MultiScaleMelLoss {
 public:
  explicit MultiScaleMelLoss(MelLossConfig config = {});

  const MelLossConfig& config() const { return config_; }

  // estimate, reference: [B, 1, L] or [B, L] of equal shape. The reference
  // branch is never recorded.
  ad::DiffArray operator()(const ad::DiffArray& estimate, const ad::DiffArray& reference) const;

  // Per-scale values of the last call order; useful for diagnostics.
  std::vector<double> per_scale(const ad::DiffArray& estimate, const ad::DiffArray& reference) const;

 private:
  ad::DiffArray scale_loss(std::size_t i, const ad::DiffArray& estimate, const ad::DiffArray& reference) const;

  MelLossConfig config_;
  std::vector<ad::DiffArray> filterbanks_;
};

ad::DiffArray multiscale_mel_loss(const ad::DiffArray& estimate, const ad::DiffArray& reference,
                                  const MelLossConfig& config = {});

inline constexpr double kWeightMin = 1e-6;
inline constexpr double kWeightMax = 1e6;

struct LossWeights {
  double w_adv = 1.0;
  double w_fm = 1.0;
  double w_mel = 1.0;
  bool frozen = false;
  std::array<double, 3> running_mean{0.0, 0.0, 0.0};  // adv, fm, mel over the window

  bool operator==(const LossWeights&) const = default;
};

// w_i = 1/m_i clamped to [1e-6, 1e6]; warns when a mean is zero.
LossWeights weights_from_means(const std::array<double, 3>& means);

// Unit weights while observing the first `window` steps, then frozen
// reciprocal-mean weights.
class LossBalancer {
 public:
  explicit LossBalancer(std::size_t window = 1000);

  // Records one step's unweighted terms. Ignored once frozen.
  void observe(double adv, double fm, double mel);

  const LossWeights& weights() const { return weights_; }
  bool frozen() const { return weights_.frozen; }
  std::size_t observed() const { return count_; }
  std::size_t window() const { return window_; }

  nlohmann::json state() const;
  void restore(const nlohmann::json& state);

 private:
  std::size_t window_;
  std::size_t count_ = 0;
  std::array<double, 3> sums_{0.0, 0.0, 0.0};
  LossWeights weights_;
};

// Convenience wrapper over LossBalancer for a recorded stream of
// (adv, fm, mel) values: observes up to `window` rows and returns the frozen
// weights.
LossWeights balance_weights(std::span<const std::array<double, 3>> observed, std::size_t window = 1000);

struct LossRow {
  std::size_t step = 0;
  double l_g = 0.0;
  double l_d = 0.0;
  double l_fm = 0.0;
  double l_mel = 0.0;
  LossWeights weights;
};

// step,L_G,L_D,L_FM,L_mel,w_adv,w_fm,w_mel; values written round-trip exact.
class LossCsvWriter {
 public:
  // append=false truncates and writes the header.
  LossCsvWriter(const std::filesystem::path& path, bool append);
  void write(const LossRow& row);

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

std::vector<LossRow> read_loss_csv(const std::filesystem::path& path);

}  // namespace msg::losses

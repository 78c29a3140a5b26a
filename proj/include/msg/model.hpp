#pragma once

// Generator (waveform-to-waveform 1D-conv U-Net with GLU gating and additive
// skips, no recurrent bottleneck) and the discriminator ensemble
// (multi-period waveform discriminators + multi-resolution spectrogram
// discriminators).

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "msg/diffarray.hpp"
#include "msg/dsp.hpp"

namespace msg::model {

struct NamedParameter {
  std::string name;
  ad::DiffArray value;  // shares storage with the owning module
};

using ParameterList = std::vector<NamedParameter>;

std::size_t count_elements(const ParameterList& params);
void set_requires_grad(const ParameterList& params, bool on);
void zero_grad(const ParameterList& params);

struct GeneratorConfig {
  std::size_t depth = 6;
  std::size_t base_channels = 64;
  std::size_t kernel = 8;
  std::size_t stride = 4;
  std::size_t growth = 2;
  // Adds the (padded) input to the decoder output, so G learns a correction.
  bool residual = false;
  // Removes the output's mean over time. The log-mel loss gives the 0 Hz bin
  // no weight, so nothing else in the objective pins the output DC.
  bool zero_mean = true;

  static GeneratorConfig paper() { return {}; }
  static GeneratorConfig toy() { return {2, 4, 8, 4, 2, false, true}; }

  void validate() const;
  // Hidden width after encoder layer i.
  std::size_t channels(std::size_t layer) const;
  // stride^depth: inputs are zero-padded to a multiple of this.
  std::size_t min_length() const;
};

nlohmann::json to_json(const GeneratorConfig& c);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);

class Generator {
 public:
  Generator(const GeneratorConfig& config, std::uint64_t seed);
  Generator(Generator&&) = default;
  Generator& operator=(Generator&&) = default;
  Generator(const Generator&) = delete;
  Generator& operator=(const Generator&) = delete;

  const GeneratorConfig& config() const { return config_; }

  // x: [B, 1, L] with L >= stride^depth. Right zero-pads to a multiple of
  // stride^depth and trims the output back to L.
  ad::DiffArray forward(const ad::DiffArray& x) const;

  ParameterList parameters() const;

 private:
  struct Conv {
    ad::DiffArray weight;
    ad::DiffArray bias;
  };
  struct EncoderLayer {
    Conv down;    // k x stride, c_in -> c
    Conv expand;  // 1x1, c -> 2c, then GLU
  };
  struct DecoderLayer {
    Conv expand;  // 1x1, c -> 2c, then GLU
    Conv up;      // transposed k x stride, c -> c_out
  };

  GeneratorConfig config_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;  // decoder_[i] mirrors encoder_[i]
};

struct DiscriminatorOutput {
  ad::DiffArray score;                  // final 1-channel map, unbounded
  std::vector<ad::DiffArray> features;  // post-activation hidden layers
};

class Discriminator {
 public:
  virtual ~Discriminator() = default;
  virtual DiscriminatorOutput forward(const ad::DiffArray& x) const = 0;
  virtual ParameterList parameters() const = 0;
  virtual std::string name() const = 0;
  virtual std::size_t hidden_layers() const = 0;
};

struct PeriodDiscriminatorConfig {
  std::vector<std::size_t> channels{16, 32, 32};
  std::size_t kernel = 5;  // along time
  std::size_t stride = 3;  // all hidden layers but the last
  std::size_t final_kernel = 3;
  double slope = 0.1;
};

struct ResolutionDiscriminatorConfig {
  std::vector<std::size_t> channels{8, 8, 8};
  std::size_t kernel_time = 3;
  std::size_t kernel_freq = 9;
  std::size_t stride_freq = 2;  // all hidden layers but the first
  std::size_t final_kernel = 3;
  double slope = 0.1;
  double magnitude_eps = 1e-8;
};

struct Conv2dLayer {
  ad::DiffArray weight;
  ad::DiffArray bias;
  ad::Stride2 stride;
  ad::Pad2 pad;
};

// Reshapes the waveform to (len/p, p) and applies (k,1) convolutions.
class PeriodDiscriminator final : public Discriminator {
 public:
  PeriodDiscriminator(std::size_t period, const PeriodDiscriminatorConfig& config, std::uint64_t seed);

  DiscriminatorOutput forward(const ad::DiffArray& x) const override;
  ParameterList parameters() const override;
  std::string name() const override;
  std::size_t hidden_layers() const override { return layers_.size(); }
  std::size_t period() const { return period_; }

 private:
  std::size_t period_;
  PeriodDiscriminatorConfig config_;
  std::vector<Conv2dLayer> layers_;
  Conv2dLayer final_;
};

// Linear STFT magnitude treated as a one-channel image.
class ResolutionDiscriminator final : public Discriminator {
 public:
  ResolutionDiscriminator(const dsp::StftParams& stft, const ResolutionDiscriminatorConfig& config,
                          std::uint64_t seed);

  DiscriminatorOutput forward(const ad::DiffArray& x) const override;
  ParameterList parameters() const override;
  std::string name() const override;
  std::size_t hidden_layers() const override { return layers_.size(); }
  const dsp::StftParams& stft() const { return stft_; }

  // Normalized magnitude spectrogram [B, 1, frames, bins] fed to the convs.
  ad::DiffArray spectrogram(const ad::DiffArray& x) const;

 private:
  dsp::StftParams stft_;
  ResolutionDiscriminatorConfig config_;
  double magnitude_scale_;
  std::vector<Conv2dLayer> layers_;
  Conv2dLayer final_;
};

struct EnsembleConfig {
  std::vector<std::size_t> periods{2, 3, 5, 7, 11};
  std::vector<dsp::StftParams> resolutions{{512, 512, 128}, {1024, 1024, 256}, {2048, 2048, 512}};
  PeriodDiscriminatorConfig period;
  ResolutionDiscriminatorConfig resolution;

  static EnsembleConfig paper() { return {}; }
  // Two period members and one resolution member with narrow layers.
  static EnsembleConfig toy();

  std::size_t size() const { return periods.size() + resolutions.size(); }
};

nlohmann::json to_json(const EnsembleConfig& c);
EnsembleConfig ensemble_config_from_json(const nlohmann::json& j);

class DiscriminatorEnsemble {
 public:
  DiscriminatorEnsemble(const EnsembleConfig& config, std::uint64_t seed);

  const EnsembleConfig& config() const { return config_; }
  std::size_t size() const { return members_.size(); }
  const Discriminator& member(std::size_t k) const { return *members_[k]; }

  // One output per member: periods ascending, then resolutions by fft size.
  std::vector<DiscriminatorOutput> forward(const ad::DiffArray& x) const;

  ParameterList parameters() const;

 private:
  EnsembleConfig config_;
  std::vector<std::unique_ptr<Discriminator>> members_;
};

}  // namespace msg::model

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "msg/dsp.hpp"

namespace msg::data {

std::vector<double> kaiser_window(std::size_t n, double beta);

// Odd-length Kaiser-windowed sinc lowpass with unit DC gain.
std::vector<double> design_lowpass(double cutoff_hz, double sample_rate, std::size_t taps,
                                   double beta = 8.6);

// Zero-phase FIR: output sample n is centered on input sample n. Same length
// as the input, zeros assumed outside it.
std::vector<double> filter_centered(std::span<const double> x, std::span<const double> h);

// Rational-ratio polyphase resampler. The prototype lowpass is a Kaiser
// windowed sinc with `taps_per_phase` taps per polyphase branch and cutoff at
// 0.45 x the lower of the two rates.
class PolyphaseResampler {
 public:
  PolyphaseResampler(double source_rate, double target_rate, std::size_t taps_per_phase = 64);

  std::size_t up() const { return up_; }
  std::size_t down() const { return down_; }
  std::size_t output_length(std::size_t input_length) const;
  std::vector<double> process(std::span<const double> x) const;

 private:
  std::size_t up_ = 1;
  std::size_t down_ = 1;
  std::size_t half_ = 0;
  std::vector<double> prototype_;  // length 2*half_ + 1, gain up_
};

dsp::AudioBuffer resample(const dsp::AudioBuffer& audio, double target_rate);

// Identity when already at 16 kHz. Source rate must be >= 8 kHz.
dsp::AudioBuffer resample_to_16k(const dsp::AudioBuffer& audio);

}  // namespace msg::data

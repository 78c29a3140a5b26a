#pragma once

// Non-learned analysis primitives shared by the losses and the artifact
// metrics. All functions are pure and reentrant.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace msg::dsp {

inline constexpr double kCanonicalRate = 16000.0;

// Mono samples with nominal range [-1, 1].
struct AudioBuffer {
  std::vector<double> samples;
  double sample_rate = kCanonicalRate;

  std::size_t size() const { return samples.size(); }
  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

struct StftParams {
  std::size_t fft_size = 1024;
  std::size_t window_size = 1024;
  std::size_t hop = 512;
};

void validate(const StftParams& p);

// Frames produced by a centered transform over `length` samples.
inline std::size_t frame_count(std::size_t length, std::size_t hop) { return 1 + length / hop; }

// Periodic Hann window.
std::vector<double> hann_window(std::size_t n);

// Frame t covers [t*hop - window/2, t*hop - window/2 + window), reflect-padded
// at both ends. Writes `window` samples into `out` (no windowing applied).
void centered_frame(std::span<const double> x, std::size_t t, std::size_t hop, std::size_t window,
                    std::span<double> out);

// Frames x bins grid of squared magnitudes.
struct SpectrogramMatrix {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::size_t fft_size = 0;
  std::size_t window_size = 0;
  std::size_t hop = 0;
  double sample_rate = kCanonicalRate;
  std::vector<double> energy;  // row-major [frames][bins]

  double at(std::size_t frame, std::size_t bin) const { return energy[frame * bins + bin]; }
  double bin_frequency(std::size_t bin) const {
    return static_cast<double>(bin) * sample_rate / static_cast<double>(fft_size);
  }
};

// Hann-windowed, centered, reflect-padded STFT. Energy = |X|^2 (unnormalized).
SpectrogramMatrix stft(const AudioBuffer& audio, const StftParams& params);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Triangular filters on the mel scale mel(f) = 2595 log10(1 + f/700).
struct MelFilterbank {
  std::size_t n_mels = 0;
  std::size_t bins = 0;
  std::size_t fft_size = 0;
  double sample_rate = kCanonicalRate;
  double fmin = 0.0;
  double fmax = 0.0;
  std::vector<double> edges_hz;  // n_mels + 2 mel-uniform points; filter m peaks at edges_hz[m+1]
  std::vector<double> weights;   // row-major [n_mels][bins]

  double weight(std::size_t mel, std::size_t bin) const { return weights[mel * bins + bin]; }
  double center_hz(std::size_t mel) const { return edges_hz[mel + 1]; }
  // Continuous triangle of filter `mel` evaluated at `hz`.
  double triangle(std::size_t mel, double hz) const;
};

// Rows that would be empty on the FFT grid (very narrow low filters) get unit
// weight at the bin nearest their center.
MelFilterbank mel_filterbank(double sample_rate, std::size_t fft_size, std::size_t n_mels, double fmin,
                             double fmax);

struct MelGrid {
  std::size_t frames = 0;
  std::size_t n_mels = 0;
  std::vector<double> values;  // row-major [frames][n_mels]

  double at(std::size_t frame, std::size_t mel) const { return values[frame * n_mels + mel]; }
};

MelGrid apply_filterbank(const SpectrogramMatrix& spec, const MelFilterbank& fb);

// STFT energies projected through a 0..Nyquist filterbank.
MelGrid mel_spectrogram(const AudioBuffer& audio, const StftParams& params, std::size_t n_mels);

// Per frame: center frequency of the smallest bin whose cumulative energy
// reaches percent * frame energy. Silent frames yield the 0 Hz sentinel.
std::vector<double> spectral_rolloff(const SpectrogramMatrix& spec, double percent);

// 1200 * log2(x / y); nullopt when either frequency is not positive.
std::optional<double> cents_difference(double x, double y);

inline constexpr double kSilenceFloorDb = -120.0;

// RMS level of centered, reflect-padded frames in dBFS, floored at -120.
std::vector<double> frame_rms_dbfs(const AudioBuffer& audio, std::size_t frame_size, std::size_t hop);

struct OnsetEnvelope {
  std::vector<double> strength;
  std::size_t hop = 512;
};

// Spectral flux: mel power -> dB (ref = excerpt max, floor -80 dB) -> first
// difference in time -> half-wave rectify -> mean over bands. Frame 0 is 0.
OnsetEnvelope onset_strength(const AudioBuffer& audio, std::size_t n_mels = 128,
                             std::size_t fft_size = 1024, std::size_t hop = 512);

struct OnsetMatchCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  double f1 = 1.0;
};

// TP / (TP + (FP + FN)/2); 1 when there is nothing to detect.
double f1_score(std::size_t tp, std::size_t fp, std::size_t fn);

// Frames strictly above `threshold` count as onsets.
OnsetMatchCounts onset_f1(const OnsetEnvelope& est, const OnsetEnvelope& ref, double threshold);

}  // namespace msg::dsp

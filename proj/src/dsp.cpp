#include "msg/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <string>

#include "msg/detail/indexing.hpp"
#include "msg/error.hpp"
#include "msg/fft.hpp"

namespace msg::dsp {

using detail::require;

void validate(const StftParams& p) {
  require(p.hop >= 1, "stft: hop must be >= 1");
  require(p.window_size >= 1, "stft: window size must be >= 1");
  require(p.fft_size >= 2, "stft: fft size must be >= 2");
  if (p.window_size > p.fft_size) {
    detail::contract_fail("stft: window size " + std::to_string(p.window_size) + " exceeds fft size " +
                          std::to_string(p.fft_size));
  }
}

std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  }
  return w;
}

void centered_frame(std::span<const double> x, std::size_t t, std::size_t hop, std::size_t window,
                    std::span<double> out) {
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  const auto start = static_cast<std::ptrdiff_t>(t * hop) - static_cast<std::ptrdiff_t>(window / 2);
  for (std::size_t j = 0; j < window; ++j) {
    const std::ptrdiff_t pos = start + static_cast<std::ptrdiff_t>(j);
    out[j] = (pos >= 0 && pos < n) ? x[static_cast<std::size_t>(pos)] : x[detail::reflect_index(pos, n)];
  }
}

SpectrogramMatrix stft(const AudioBuffer& audio, const StftParams& params) {
  validate(params);
  require(!audio.samples.empty(), "stft: empty audio");
  SpectrogramMatrix spec;
  spec.frames = frame_count(audio.size(), params.hop);
  spec.bins = params.fft_size / 2 + 1;
  spec.fft_size = params.fft_size;
  spec.window_size = params.window_size;
  spec.hop = params.hop;
  spec.sample_rate = audio.sample_rate;
  spec.energy.resize(spec.frames * spec.bins);

  const auto window = hann_window(params.window_size);
  const auto& fft = fft::plan_for(params.fft_size);
  std::vector<double> frame(params.fft_size, 0.0);
  std::vector<std::complex<double>> bins(spec.bins);
  for (std::size_t t = 0; t < spec.frames; ++t) {
    centered_frame(audio.samples, t, params.hop, params.window_size,
                   std::span(frame).first(params.window_size));
    for (std::size_t j = 0; j < params.window_size; ++j) frame[j] *= window[j];
    fft.forward(frame, bins);
    for (std::size_t k = 0; k < spec.bins; ++k) spec.energy[t * spec.bins + k] = std::norm(bins[k]);
  }
  return spec;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

double MelFilterbank::triangle(std::size_t mel, double hz) const {
  const double lo = edges_hz[mel], mid = edges_hz[mel + 1], hi = edges_hz[mel + 2];
  if (hz <= lo || hz >= hi) return 0.0;
  if (hz <= mid) return (hz - lo) / (mid - lo);
  return (hi - hz) / (hi - mid);
}

MelFilterbank mel_filterbank(double sample_rate, std::size_t fft_size, std::size_t n_mels, double fmin,
                             double fmax) {
  require(sample_rate > 0.0, "mel_filterbank: sample rate must be positive");
  require(fft_size >= 2, "mel_filterbank: fft size must be >= 2");
  require(n_mels >= 2, "mel_filterbank: need at least 2 mel bands");
  if (!(fmin >= 0.0 && fmin < fmax && fmax <= sample_rate / 2.0)) {
    detail::contract_fail("mel_filterbank: band edges must satisfy 0 <= fmin < fmax <= sr/2, got fmin=" +
                          std::to_string(fmin) + " fmax=" + std::to_string(fmax));
  }
  MelFilterbank fb;
  fb.n_mels = n_mels;
  fb.bins = fft_size / 2 + 1;
  fb.fft_size = fft_size;
  fb.sample_rate = sample_rate;
  fb.fmin = fmin;
  fb.fmax = fmax;
  const double mlo = hz_to_mel(fmin), mhi = hz_to_mel(fmax);
  fb.edges_hz.resize(n_mels + 2);
  for (std::size_t i = 0; i < n_mels + 2; ++i) {
    fb.edges_hz[i] = mel_to_hz(mlo + (mhi - mlo) * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  }
  fb.edges_hz.front() = fmin;
  fb.edges_hz.back() = fmax;

  const double bin_hz = sample_rate / static_cast<double>(fft_size);
  fb.weights.assign(n_mels * fb.bins, 0.0);
  for (std::size_t m = 0; m < n_mels; ++m) {
    bool any = false;
    for (std::size_t k = 0; k < fb.bins; ++k) {
      const double w = fb.triangle(m, static_cast<double>(k) * bin_hz);
      fb.weights[m * fb.bins + k] = w;
      any = any || w > 0.0;
    }
    if (!any) {
      const auto nearest = static_cast<std::size_t>(std::lround(fb.center_hz(m) / bin_hz));
      fb.weights[m * fb.bins + std::min(nearest, fb.bins - 1)] = 1.0;
    }
  }
  return fb;
}

MelGrid apply_filterbank(const SpectrogramMatrix& spec, const MelFilterbank& fb) {
  if (spec.bins != fb.bins) {
    detail::contract_fail("apply_filterbank: spectrogram has " + std::to_string(spec.bins) +
                          " bins, filterbank expects " + std::to_string(fb.bins));
  }
  MelGrid grid;
  grid.frames = spec.frames;
  grid.n_mels = fb.n_mels;
  grid.values.assign(grid.frames * grid.n_mels, 0.0);
  for (std::size_t t = 0; t < spec.frames; ++t) {
    for (std::size_t m = 0; m < fb.n_mels; ++m) {
      double acc = 0.0;
      for (std::size_t k = 0; k < spec.bins; ++k) acc += spec.at(t, k) * fb.weight(m, k);
      grid.values[t * grid.n_mels + m] = acc;
    }
  }
  return grid;
}

MelGrid mel_spectrogram(const AudioBuffer& audio, const StftParams& params, std::size_t n_mels) {
  const auto spec = stft(audio, params);
  const auto fb = mel_filterbank(audio.sample_rate, params.fft_size, n_mels, 0.0, audio.sample_rate / 2.0);
  return apply_filterbank(spec, fb);
}

std::vector<double> spectral_rolloff(const SpectrogramMatrix& spec, double percent) {
  require(percent > 0.0 && percent <= 1.0, "spectral_rolloff: percent must lie in (0, 1]");
  std::vector<double> out(spec.frames, 0.0);
  for (std::size_t t = 0; t < spec.frames; ++t) {
    const double* row = spec.energy.data() + t * spec.bins;
    double total = 0.0;
    for (std::size_t k = 0; k < spec.bins; ++k) total += row[k];
    if (!(total > 0.0)) continue;
    const double target = percent * total;
    double cumulative = 0.0;
    std::size_t bin = spec.bins - 1;
    for (std::size_t k = 0; k < spec.bins; ++k) {
      cumulative += row[k];
      if (cumulative >= target) {
        bin = k;
        break;
      }
    }
    out[t] = spec.bin_frequency(bin);
  }
  return out;
}

std::optional<double> cents_difference(double x, double y) {
  if (!(x > 0.0) || !(y > 0.0)) return std::nullopt;
  return 1200.0 * std::log2(x / y);
}

std::vector<double> frame_rms_dbfs(const AudioBuffer& audio, std::size_t frame_size, std::size_t hop) {
  require(frame_size >= 1, "frame_rms_dbfs: frame size must be >= 1");
  require(hop >= 1, "frame_rms_dbfs: hop must be >= 1");
  require(!audio.samples.empty(), "frame_rms_dbfs: empty audio");
  const std::size_t frames = frame_count(audio.size(), hop);
  std::vector<double> out(frames);
  std::vector<double> frame(frame_size);
  for (std::size_t t = 0; t < frames; ++t) {
    centered_frame(audio.samples, t, hop, frame_size, frame);
    double acc = 0.0;
    for (double v : frame) acc += v * v;
    const double rms = std::sqrt(acc / static_cast<double>(frame_size));
    out[t] = rms > 0.0 ? std::max(kSilenceFloorDb, 20.0 * std::log10(rms)) : kSilenceFloorDb;
  }
  return out;
}

OnsetEnvelope onset_strength(const AudioBuffer& audio, std::size_t n_mels, std::size_t fft_size,
                             std::size_t hop) {
  constexpr double kAmin = 1e-10;
  constexpr double kTopDb = 80.0;
  const MelGrid grid = mel_spectrogram(audio, {fft_size, fft_size, hop}, n_mels);
  const double ref = std::max(kAmin, *std::max_element(grid.values.begin(), grid.values.end()));
  const double ref_db = 10.0 * std::log10(ref);
  std::vector<double> db(grid.values.size());
  for (std::size_t i = 0; i < db.size(); ++i) {
    db[i] = std::max(-kTopDb, 10.0 * std::log10(std::max(kAmin, grid.values[i])) - ref_db);
  }
  OnsetEnvelope env;
  env.hop = hop;
  env.strength.assign(grid.frames, 0.0);
  for (std::size_t t = 1; t < grid.frames; ++t) {
    double acc = 0.0;
    for (std::size_t m = 0; m < n_mels; ++m) {
      acc += std::max(0.0, db[t * n_mels + m] - db[(t - 1) * n_mels + m]);
    }
    env.strength[t] = acc / static_cast<double>(n_mels);
  }
  return env;
}

double f1_score(std::size_t tp, std::size_t fp, std::size_t fn) {
  const double denom = static_cast<double>(tp) + 0.5 * static_cast<double>(fp + fn);
  return denom > 0.0 ? static_cast<double>(tp) / denom : 1.0;
}

OnsetMatchCounts onset_f1(const OnsetEnvelope& est, const OnsetEnvelope& ref, double threshold) {
  if (est.strength.size() != ref.strength.size() || est.hop != ref.hop) {
    detail::contract_fail("onset_f1: envelopes differ (" + std::to_string(est.strength.size()) + " frames @ hop " +
                          std::to_string(est.hop) + " vs " + std::to_string(ref.strength.size()) +
                          " frames @ hop " + std::to_string(ref.hop) + ")");
  }
  OnsetMatchCounts c;
  for (std::size_t t = 0; t < est.strength.size(); ++t) {
    const bool e = est.strength[t] > threshold;
    const bool r = ref.strength[t] > threshold;
    if (e && r) ++c.tp;
    else if (e) ++c.fp;
    else if (r) ++c.fn;
  }
  c.f1 = f1_score(c.tp, c.fp, c.fn);
  return c;
}

}  // namespace msg::dsp

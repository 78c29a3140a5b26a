#include "msg/resample.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "msg/error.hpp"

namespace msg::data {
namespace {

constexpr std::size_t kMaxRatioTerm = 4096;

std::string ratio_string(double src, double dst) {
  return std::to_string(static_cast<long long>(src)) + " Hz -> " + std::to_string(static_cast<long long>(dst)) + " Hz";
}

double sinc(double x) { return x == 0.0 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x); }

}  // namespace

std::vector<double> kaiser_window(std::size_t n, double beta) {
  std::vector<double> w(n, 1.0);
  if (n == 1) return w;
  const double denom = std::cyl_bessel_i(0.0, beta);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = 2.0 * static_cast<double>(i) / static_cast<double>(n - 1) - 1.0;
    w[i] = std::cyl_bessel_i(0.0, beta * std::sqrt(std::max(0.0, 1.0 - r * r))) / denom;
  }
  return w;
}

std::vector<double> design_lowpass(double cutoff_hz, double sample_rate, std::size_t taps, double beta) {
  detail::require(sample_rate > 0.0, "design_lowpass: sample rate must be positive");
  detail::require(cutoff_hz > 0.0 && cutoff_hz < sample_rate / 2.0, "design_lowpass: cutoff must lie in (0, sr/2)");
  detail::require(taps % 2 == 1, "design_lowpass: tap count must be odd");
  const auto window = kaiser_window(taps, beta);
  const double fc = cutoff_hz / sample_rate;  // cycles per sample
  const double mid = static_cast<double>(taps - 1) / 2.0;
  std::vector<double> h(taps);
  for (std::size_t i = 0; i < taps; ++i) h[i] = 2.0 * fc * sinc(2.0 * fc * (static_cast<double>(i) - mid)) * window[i];
  const double dc = std::accumulate(h.begin(), h.end(), 0.0);
  for (double& v : h) v /= dc;
  return h;
}

std::vector<double> filter_centered(std::span<const double> x, std::span<const double> h) {
  detail::require(h.size() % 2 == 1, "filter_centered: filter length must be odd");
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  const auto half = static_cast<std::ptrdiff_t>(h.size() / 2);
  std::vector<double> y(x.size(), 0.0);
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    // y[i] = sum_j h[j] x[i + half - j]
    const std::ptrdiff_t j0 = std::max<std::ptrdiff_t>(0, i + half - (n - 1));
    const std::ptrdiff_t j1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(h.size()) - 1, i + half);
    double acc = 0.0;
    for (std::ptrdiff_t j = j0; j <= j1; ++j) acc += h[static_cast<std::size_t>(j)] * x[static_cast<std::size_t>(i + half - j)];
    y[static_cast<std::size_t>(i)] = acc;
  }
  return y;
}

PolyphaseResampler::PolyphaseResampler(double source_rate, double target_rate, std::size_t taps_per_phase) {
  detail::require(taps_per_phase >= 2, "PolyphaseResampler: need at least 2 taps per phase");
  if (!(source_rate > 0.0 && target_rate > 0.0) || std::floor(source_rate) != source_rate ||
      std::floor(target_rate) != target_rate) {
    throw ContractError("resample: unsupported rate ratio " + ratio_string(source_rate, target_rate) +
                        " (rates must be positive integers)");
  }
  const auto src = static_cast<std::size_t>(source_rate);
  const auto dst = static_cast<std::size_t>(target_rate);
  const std::size_t g = std::gcd(src, dst);
  up_ = dst / g;
  down_ = src / g;
  if (up_ > kMaxRatioTerm || down_ > kMaxRatioTerm) {
    throw ContractError("resample: unsupported rate ratio " + ratio_string(source_rate, target_rate) + " (" +
                        std::to_string(up_) + "/" + std::to_string(down_) + " exceeds polyphase limit)");
  }
  if (up_ == 1 && down_ == 1) return;

  half_ = up_ * taps_per_phase / 2;
  const std::size_t taps = 2 * half_ + 1;
  const double upsampled_rate = static_cast<double>(src * up_);
  const double cutoff = 0.45 * static_cast<double>(std::min(src, dst));
  prototype_ = design_lowpass(cutoff, upsampled_rate, taps);
  for (double& v : prototype_) v *= static_cast<double>(up_);
}

std::size_t PolyphaseResampler::output_length(std::size_t input_length) const {
  return (input_length * up_ + down_ - 1) / down_;
}

std::vector<double> PolyphaseResampler::process(std::span<const double> x) const {
  if (up_ == 1 && down_ == 1) return {x.begin(), x.end()};
  const std::size_t out_len = output_length(x.size());
  std::vector<double> y(out_len, 0.0);
  const auto L = static_cast<std::ptrdiff_t>(up_);
  const auto H = static_cast<std::ptrdiff_t>(half_);
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  for (std::size_t m = 0; m < out_len; ++m) {
    // Upsampled-domain time of output m; input i sits at i*L.
    const auto u = static_cast<std::ptrdiff_t>(m * down_);
    std::ptrdiff_t i0 = u - H <= 0 ? 0 : (u - H + L - 1) / L;
    const std::ptrdiff_t i1 = std::min(n - 1, (u + H) / L);
    double acc = 0.0;
    for (std::ptrdiff_t i = i0; i <= i1; ++i) acc += x[static_cast<std::size_t>(i)] * prototype_[static_cast<std::size_t>(u - i * L + H)];
    y[m] = acc;
  }
  return y;
}

dsp::AudioBuffer resample(const dsp::AudioBuffer& audio, double target_rate) {
  PolyphaseResampler rs(audio.sample_rate, target_rate);
  return {rs.process(audio.samples), target_rate};
}

dsp::AudioBuffer resample_to_16k(const dsp::AudioBuffer& audio) {
  if (audio.sample_rate < 8000.0) {
    throw ContractError("resample: unsupported rate ratio " + ratio_string(audio.sample_rate, dsp::kCanonicalRate) +
                        " (source rate below 8000 Hz)");
  }
  if (audio.sample_rate == dsp::kCanonicalRate) return audio;
  return resample(audio, dsp::kCanonicalRate);
}

}  // namespace msg::data

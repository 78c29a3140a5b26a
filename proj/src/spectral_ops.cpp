#include "msg/spectral_ops.hpp"

#include <complex>
#include <string>

#include "msg/detail/indexing.hpp"
#include "msg/error.hpp"
#include "msg/fft.hpp"

namespace msg::ad {

DiffArray stft_power(const DiffArray& x, const dsp::StftParams& params) {
  dsp::validate(params);
  detail::require(x.defined(), "stft_power: undefined input");
  const bool rank3 = x.rank() == 3;
  if (!(x.rank() == 2 || (rank3 && x.dim(1) == 1))) {
    detail::contract_fail("stft_power: expected [B, L] or [B, 1, L], got " + shape_string(x.shape()));
  }
  const std::size_t batch = x.dim(0);
  const std::size_t len = x.shape().back();
  detail::require(len >= 1, "stft_power: empty signal");
  const std::size_t frames = dsp::frame_count(len, params.hop);
  const std::size_t nfft = params.fft_size, win = params.window_size, bins = nfft / 2 + 1;

  // Source sample for every (frame, window position).
  std::vector<std::size_t> index(frames * win);
  const auto n = static_cast<std::ptrdiff_t>(len);
  for (std::size_t t = 0; t < frames; ++t) {
    const auto start = static_cast<std::ptrdiff_t>(t * params.hop) - static_cast<std::ptrdiff_t>(win / 2);
    for (std::size_t j = 0; j < win; ++j) {
      const std::ptrdiff_t pos = start + static_cast<std::ptrdiff_t>(j);
      index[t * win + j] = (pos >= 0 && pos < n) ? static_cast<std::size_t>(pos) : detail::reflect_index(pos, n);
    }
  }
  const auto window = dsp::hann_window(win);
  const auto& fft = fft::plan_for(nfft);

  const auto xv = x.values();
  std::vector<double> out(batch * frames * bins);
  std::vector<std::complex<double>> spectra(batch * frames * bins);
  std::vector<double> frame(nfft, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* sig = xv.data() + b * len;
    for (std::size_t t = 0; t < frames; ++t) {
      for (std::size_t j = 0; j < win; ++j) frame[j] = window[j] * sig[index[t * win + j]];
      auto spec = std::span(spectra).subspan((b * frames + t) * bins, bins);
      fft.forward(frame, spec);
      for (std::size_t k = 0; k < bins; ++k) out[(b * frames + t) * bins + k] = std::norm(spec[k]);
    }
  }

  DiffArray result({batch, frames, bins}, std::move(out));
  if (Tape::active() == nullptr || !x.requires_grad()) return result;

  result.set_requires_grad(true);
  auto sx = x.storage(), so = result.storage();
  Tape::active()->record([sx, so, spectra = std::move(spectra), index = std::move(index),
                          window, batch, frames, bins, len, nfft, win] {
    if (so->grad.empty() || !sx->requires_grad) return;
    if (sx->grad.empty()) sx->grad.assign(sx->value.size(), 0.0);
    const auto& plan = fft::plan_for(nfft);
    std::vector<std::complex<double>> h(bins);
    std::vector<double> r(nfft);
    for (std::size_t b = 0; b < batch; ++b) {
      double* gx = sx->grad.data() + b * len;
      for (std::size_t t = 0; t < frames; ++t) {
        const std::size_t off = (b * frames + t) * bins;
        for (std::size_t k = 0; k < bins; ++k) {
          // d|X|^2 = 2 Re(conj(X) dX); interior bins appear twice in the
          // Hermitian extension, so they are halved here.
          const double scale = (k == 0 || 2 * k == nfft) ? 2.0 : 1.0;
          h[k] = scale * so->grad[off + k] * spectra[off + k];
        }
        plan.inverse(h, r);
        for (std::size_t j = 0; j < win; ++j) gx[index[t * win + j]] += r[j] * window[j];
      }
    }
  });
  return result;
}

DiffArray filterbank_matrix(const dsp::MelFilterbank& fb) {
  std::vector<double> m(fb.bins * fb.n_mels);
  for (std::size_t k = 0; k < fb.bins; ++k) {
    for (std::size_t j = 0; j < fb.n_mels; ++j) m[k * fb.n_mels + j] = fb.weight(j, k);
  }
  return DiffArray({fb.bins, fb.n_mels}, std::move(m));
}

DiffArray mel_project(const DiffArray& power, const DiffArray& fb_matrix) {
  detail::require(power.defined() && power.rank() == 3, "mel_project: power must be [B, T, F]");
  detail::require(fb_matrix.defined() && fb_matrix.rank() == 2, "mel_project: filterbank must be [F, M]");
  if (fb_matrix.dim(0) != power.dim(2)) {
    detail::contract_fail("mel_project: filterbank expects " + std::to_string(fb_matrix.dim(0)) +
                          " bins, power has " + std::to_string(power.dim(2)));
  }
  const std::size_t batch = power.dim(0), frames = power.dim(1);
  auto flat = reshape(power, {batch * frames, power.dim(2)});
  return reshape(matmul(flat, fb_matrix), {batch, frames, fb_matrix.dim(1)});
}

}  // namespace msg::ad

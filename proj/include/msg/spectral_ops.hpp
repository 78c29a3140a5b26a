#pragma once

// Differentiable spectral front-ends used by the mel loss and the
// resolution discriminators. Same framing as dsp::stft.

#include "msg/diffarray.hpp"
#include "msg/dsp.hpp"

namespace msg::ad {

// x: [B, L] or [B, 1, L] -> [B, frames, fft/2 + 1] squared magnitudes.
DiffArray stft_power(const DiffArray& x, const dsp::StftParams& params);

// Constant [bins, n_mels] matrix (transposed filterbank weights).
DiffArray filterbank_matrix(const dsp::MelFilterbank& fb);

// power [B, T, F] x fb [F, M] -> [B, T, M].
DiffArray mel_project(const DiffArray& power, const DiffArray& fb_matrix);

}  // namespace msg::ad

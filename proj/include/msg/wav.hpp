#pragma once

#include <filesystem>

#include "msg/dsp.hpp"

namespace msg::data {

enum class WavFormat { kPcm16, kFloat32 };

// RIFF/WAVE, PCM16 or IEEE float32, mono or stereo. Stereo is averaged to
// mono. PCM16 maps -32768 to -1.0. Throws IoError naming the path.
dsp::AudioBuffer read_wav(const std::filesystem::path& path);

// Mono writer. Float32 round-trips bit-exactly through read_wav.
void write_wav(const std::filesystem::path& path, const dsp::AudioBuffer& audio,
               WavFormat format = WavFormat::kFloat32);

}  // namespace msg::data

#include "msg/wav.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "msg/error.hpp"

namespace msg::data {
namespace {

static_assert(std::endian::native == std::endian::little, "WAV codec assumes a little-endian host");

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

template <typename T>
T load(const std::uint8_t* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <typename T>
void store(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

void store_tag(std::vector<std::uint8_t>& out, const char* tag) { out.insert(out.end(), tag, tag + 4); }

[[noreturn]] void fail(const std::filesystem::path& path, const std::string& what) {
  throw IoError(path.string() + ": " + what);
}

}  // namespace

dsp::AudioBuffer read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    fail(path, "not a RIFF/WAVE file");
  }

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const std::uint8_t* data = nullptr;
  std::size_t data_size = 0;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint8_t* chunk = bytes.data() + pos;
    const auto size = load<std::uint32_t>(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) {
      // Truncated trailing data chunks are common; clamp instead of failing.
      if (std::memcmp(chunk, "data", 4) != 0) fail(path, "chunk extends past end of file");
    }
    const std::size_t avail = std::min<std::size_t>(size, bytes.size() - body);
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (avail < 16) fail(path, "fmt chunk too short");
      format = load<std::uint16_t>(chunk + 8);
      channels = load<std::uint16_t>(chunk + 10);
      rate = load<std::uint32_t>(chunk + 12);
      bits = load<std::uint16_t>(chunk + 22);
      if (format == kFormatExtensible) {
        if (avail < 26) fail(path, "extensible fmt chunk too short");
        format = load<std::uint16_t>(chunk + 8 + 24);
      }
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      data_size = avail;
    }
    pos = body + size + (size & 1U);
  }
  if (!have_fmt) fail(path, "missing fmt chunk");
  if (data == nullptr) fail(path, "missing data chunk");
  if (channels != 1 && channels != 2) fail(path, "unsupported channel count " + std::to_string(channels));
  if (rate == 0) fail(path, "sample rate is zero");

  std::size_t width = 0;
  if (format == kFormatPcm && bits == 16) {
    width = 2;
  } else if (format == kFormatFloat && bits == 32) {
    width = 4;
  } else {
    fail(path, "unsupported codec (format tag " + std::to_string(format) + ", " + std::to_string(bits) +
                   " bits); expected PCM16 or float32");
  }

  const std::size_t frames = data_size / (width * channels);
  dsp::AudioBuffer audio;
  audio.sample_rate = rate;
  audio.samples.resize(frames);
  auto sample = [&](std::size_t i, std::size_t c) {
    const std::uint8_t* p = data + (i * channels + c) * width;
    return width == 2 ? static_cast<double>(load<std::int16_t>(p)) / 32768.0 : static_cast<double>(load<float>(p));
  };
  for (std::size_t i = 0; i < frames; ++i) {
    // Mono is copied as is so -0.0 survives the round trip.
    double acc = sample(i, 0);
    for (std::size_t c = 1; c < channels; ++c) acc += sample(i, c);
    audio.samples[i] = channels == 1 ? acc : acc / static_cast<double>(channels);
  }
  return audio;
}

void write_wav(const std::filesystem::path& path, const dsp::AudioBuffer& audio, WavFormat format) {
  if (!(audio.sample_rate > 0.0) || std::floor(audio.sample_rate) != audio.sample_rate) {
    throw IoError(path.string() + ": sample rate must be a positive integer");
  }
  const bool pcm = format == WavFormat::kPcm16;
  const std::uint16_t bits = pcm ? 16 : 32;
  const std::uint16_t block = bits / 8;
  const auto rate = static_cast<std::uint32_t>(audio.sample_rate);
  const auto data_bytes = static_cast<std::uint32_t>(audio.size() * block);

  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  store_tag(out, "RIFF");
  store<std::uint32_t>(out, 36 + data_bytes);
  store_tag(out, "WAVE");
  store_tag(out, "fmt ");
  store<std::uint32_t>(out, 16);
  store<std::uint16_t>(out, pcm ? kFormatPcm : kFormatFloat);
  store<std::uint16_t>(out, 1);
  store<std::uint32_t>(out, rate);
  store<std::uint32_t>(out, rate * block);
  store<std::uint16_t>(out, block);
  store<std::uint16_t>(out, bits);
  store_tag(out, "data");
  store<std::uint32_t>(out, data_bytes);
  for (double s : audio.samples) {
    if (pcm) {
      const double scaled = std::round(s * 32768.0);
      store<std::int16_t>(out, static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0)));
    } else {
      store<float>(out, static_cast<float>(s));
    }
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(path.string() + ": cannot open for writing");
  os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!os) throw IoError(path.string() + ": write failed");
}

}  // namespace msg::data

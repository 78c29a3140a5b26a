#include "msg/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "json.hpp"
#include "msg/error.hpp"
#include "msg/log.hpp"
#include "msg/resample.hpp"
#include "msg/wav.hpp"

namespace msg::data {

using detail::require;
using nlohmann::json;

std::string_view to_string(SourceClass s) {
  switch (s) {
    case SourceClass::kBass: return "bass";
    case SourceClass::kDrums: return "drums";
    case SourceClass::kVocals: return "vocals";
  }
  return "bass";
}

SourceClass parse_source_class(std::string_view name) {
  if (name == "bass") return SourceClass::kBass;
  if (name == "drums") return SourceClass::kDrums;
  if (name == "vocals") return SourceClass::kVocals;
  throw ContractError("unknown source class '" + std::string(name) + "' (expected bass, drums or vocals)");
}

std::string_view to_string(DegradationKind k) {
  switch (k) {
    case DegradationKind::kHfNoise: return "hfnoise";
    case DegradationKind::kLowpass: return "lowpass";
    case DegradationKind::kSmear: return "smear";
  }
  return "hfnoise";
}

DegradationKind parse_degradation(std::string_view name) {
  if (name == "hfnoise") return DegradationKind::kHfNoise;
  if (name == "lowpass") return DegradationKind::kLowpass;
  if (name == "smear") return DegradationKind::kSmear;
  throw ContractError("unknown degradation '" + std::string(name) + "' (expected hfnoise, lowpass or smear)");
}

double peak_gain(std::span<const double> samples) {
  double peak = 0.0;
  for (double v : samples) peak = std::max(peak, std::abs(v));
  return peak > 0.0 ? 1.0 / peak : 1.0;
}

dsp::AudioBuffer peak_normalize(const dsp::AudioBuffer& audio) {
  require(!audio.samples.empty(), "peak_normalize: empty audio");
  dsp::AudioBuffer out = audio;
  double peak = 0.0;
  for (double v : audio.samples) peak = std::max(peak, std::abs(v));
  if (peak == 0.0 || peak == 1.0) return out;
  // Division lands the peak sample on exactly 1.0, so normalizing is idempotent.
  for (double& v : out.samples) v /= peak;
  return out;
}

double rms_dbfs(std::span<const double> samples) {
  if (samples.empty()) return dsp::kSilenceFloorDb;
  double acc = 0.0;
  for (double v : samples) acc += v * v;
  const double rms = std::sqrt(acc / static_cast<double>(samples.size()));
  return rms > 0.0 ? std::max(dsp::kSilenceFloorDb, 20.0 * std::log10(rms)) : dsp::kSilenceFloorDb;
}

SegmentResult segment_dataset(const dsp::AudioBuffer& estimate, const dsp::AudioBuffer& truth, SourceClass source,
                              const std::string& separator_tag, std::size_t clip_len) {
  require(clip_len >= 1, "segment_dataset: clip length must be >= 1");
  SegmentResult result;
  std::size_t len = std::min(estimate.size(), truth.size());
  if (estimate.size() != truth.size()) {
    result.truncated = true;
    log::warn("segment_dataset: track lengths differ (" + std::to_string(estimate.size()) + " vs " +
              std::to_string(truth.size()) + "); truncating to " + std::to_string(len));
  }
  const std::size_t count = len / clip_len;
  for (std::size_t c = 0; c < count; ++c) {
    const std::size_t off = c * clip_len;
    std::span<const double> t(truth.samples.data() + off, clip_len);
    ClipRecord rec{c, off, rms_dbfs(t), true, {}};
    // Boundary clips at exactly -60 dBFS stay in; allow for rounding in log10.
    if (rec.rms_dbfs < kSilenceRejectDb - 1e-9) {
      rec.accepted = false;
      rec.reason = "ground-truth RMS below -60 dBFS";
    } else {
      TrainingExample ex;
      ex.input = {std::vector<double>(estimate.samples.begin() + static_cast<std::ptrdiff_t>(off),
                                      estimate.samples.begin() + static_cast<std::ptrdiff_t>(off + clip_len)),
                  estimate.sample_rate};
      ex.target = {std::vector<double>(t.begin(), t.end()), truth.sample_rate};
      ex.source = source;
      ex.separator_tag = separator_tag;
      result.examples.push_back(std::move(ex));
    }
    result.clips.push_back(std::move(rec));
  }
  if (result.examples.empty()) log::warn("segment_dataset: no clips survived segmentation");
  return result;
}

TrainingExample swap_augment(TrainingExample example, double p, Rng& rng) {
  require(p >= 0.0 && p <= 1.0, "swap_augment: probability must lie in [0, 1]");
  if (rng.uniform() < p) example.input = example.target;
  return example;
}

DegradationSpec DegradationSpec::defaults(DegradationKind kind, std::uint64_t seed) {
  DegradationSpec s;
  s.kind = kind;
  s.seed = seed;
  if (kind == DegradationKind::kLowpass) s.cutoff_hz = 400.0;
  return s;
}

void DegradationSpec::validate() const {
  require(noise_db >= -40.0 && noise_db <= 0.0, "DegradationSpec: noise_db must lie in [-40, 0]");
  require(cutoff_hz >= 100.0 && cutoff_hz <= 7000.0, "DegradationSpec: cutoff_hz must lie in [100, 7000]");
  require(smear_ms >= 1.0 && smear_ms <= 100.0, "DegradationSpec: smear_ms must lie in [1, 100]");
}

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr std::size_t kFilterTaps = 511;

double log_uniform(Rng& rng, double lo, double hi) { return std::exp(rng.uniform(std::log(lo), std::log(hi))); }

// Sorted note start times; the first note starts inside the first 100 ms.
std::vector<std::size_t> note_starts(Rng& rng, int count, std::size_t len, double rate) {
  std::vector<std::size_t> starts;
  starts.push_back(static_cast<std::size_t>(rng.uniform(0.0, 0.1) * std::min(rate, static_cast<double>(len))));
  for (int i = 1; i < count; ++i) starts.push_back(static_cast<std::size_t>(rng.uniform(0.1, 0.9) * static_cast<double>(len)));
  std::sort(starts.begin(), starts.end());
  return starts;
}

void add_harmonic_note(std::vector<double>& out, Rng& rng, std::size_t start, std::size_t end, double rate, double f0,
                       int partials, double tilt, double attack_s, double decay_s, double vibrato_depth) {
  std::vector<double> amp(static_cast<std::size_t>(partials)), phase(static_cast<std::size_t>(partials));
  for (int k = 0; k < partials; ++k) {
    amp[static_cast<std::size_t>(k)] = std::pow(1.0 / (k + 1), tilt) * rng.uniform(0.6, 1.0);
    phase[static_cast<std::size_t>(k)] = rng.uniform(0.0, kTwoPi);
  }
  const double level = rng.uniform(0.5, 1.0);
  const double vib_rate = rng.uniform(4.5, 6.0);
  const double nyquist = rate / 2.0;
  const std::size_t release = static_cast<std::size_t>(0.01 * rate);
  double theta = 0.0;
  for (std::size_t n = start; n < end; ++n) {
    const double t = static_cast<double>(n - start) / rate;
    const double f = f0 * (1.0 + vibrato_depth * std::sin(kTwoPi * vib_rate * t));
    theta += kTwoPi * f / rate;
    double env = level * std::exp(-t / decay_s);
    if (t < attack_s) env *= t / attack_s;
    if (end - n < release) env *= static_cast<double>(end - n) / static_cast<double>(release);
    double s = 0.0;
    for (int k = 0; k < partials; ++k) {
      if (f * (k + 1) >= nyquist * 0.95) break;
      s += amp[static_cast<std::size_t>(k)] * std::sin((k + 1) * theta + phase[static_cast<std::size_t>(k)]);
    }
    out[n] += env * s;
  }
}

void synth_bass(std::vector<double>& out, Rng& rng, double rate) {
  const auto starts = note_starts(rng, rng.between(2, 4), out.size(), rate);
  for (std::size_t i = 0; i < starts.size(); ++i) {
    const std::size_t end = i + 1 < starts.size() ? starts[i + 1] : out.size();
    if (end <= starts[i] + 16) continue;
    add_harmonic_note(out, rng, starts[i], end, rate, log_uniform(rng, 40.0, 200.0), rng.between(6, 12), 1.0, 0.004,
                      rng.uniform(0.3, 1.0), 0.0);
  }
}

void synth_vocals(std::vector<double>& out, Rng& rng, double rate) {
  const auto starts = note_starts(rng, rng.between(1, 3), out.size(), rate);
  for (std::size_t i = 0; i < starts.size(); ++i) {
    const std::size_t end = i + 1 < starts.size() ? starts[i + 1] : out.size();
    if (end <= starts[i] + 16) continue;
    add_harmonic_note(out, rng, starts[i], end, rate, log_uniform(rng, 150.0, 600.0), rng.between(8, 16), 1.2, 0.04,
                      rng.uniform(1.0, 3.0), 0.02);
  }
}

void synth_drums(std::vector<double>& out, Rng& rng, double rate) {
  const int hits = rng.between(4, 8);
  for (int h = 0; h < hits; ++h) {
    const auto start = static_cast<std::size_t>(rng.uniform(0.0, 0.95) * static_cast<double>(out.size()));
    const double tau = rng.uniform(0.02, 0.15);
    const double noise_level = rng.uniform(0.3, 1.0);
    const double kick_level = rng.uniform() < 0.5 ? rng.uniform(0.5, 1.0) : 0.0;
    double theta = 0.0;
    for (std::size_t n = start; n < out.size(); ++n) {
      const double t = static_cast<double>(n - start) / rate;
      if (t > 8.0 * tau && t > 0.8) break;
      const double env = std::exp(-t / tau);
      const double f = 50.0 + 100.0 * std::exp(-t / 0.03);
      theta += kTwoPi * f / rate;
      out[n] += env * noise_level * 0.5 * rng.normal() + kick_level * std::sin(theta) * std::exp(-t / 0.1);
    }
  }
}

double mean_square(std::span<const double> x) {
  if (x.empty()) return 0.0;
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return acc / static_cast<double>(x.size());
}

}  // namespace

dsp::AudioBuffer synthesize_source(SourceClass source, std::size_t clip_len, Rng& rng) {
  require(clip_len >= 1, "synthesize_source: clip length must be >= 1");
  dsp::AudioBuffer out{std::vector<double>(clip_len, 0.0), dsp::kCanonicalRate};
  switch (source) {
    case SourceClass::kBass: synth_bass(out.samples, rng, out.sample_rate); break;
    case SourceClass::kDrums: synth_drums(out.samples, rng, out.sample_rate); break;
    case SourceClass::kVocals: synth_vocals(out.samples, rng, out.sample_rate); break;
  }
  const double gain = peak_gain(out.samples);
  if (gain != 1.0) {
    for (double& v : out.samples) v *= 0.8 * gain;
  }
  return out;
}

dsp::AudioBuffer degrade(const dsp::AudioBuffer& truth, const DegradationSpec& spec, Rng& rng) {
  spec.validate();
  dsp::AudioBuffer out = truth;
  switch (spec.kind) {
    case DegradationKind::kHfNoise: {
      std::vector<double> noise(truth.size());
      for (double& v : noise) v = rng.normal();
      const auto h = design_lowpass(spec.cutoff_hz, truth.sample_rate, kFilterTaps);
      const auto low = filter_centered(noise, h);
      for (std::size_t i = 0; i < noise.size(); ++i) noise[i] -= low[i];
      const double target = mean_square(truth.samples) * std::pow(10.0, spec.noise_db / 10.0);
      const double have = mean_square(noise);
      const double gain = have > 0.0 ? std::sqrt(target / have) : 0.0;
      for (std::size_t i = 0; i < out.size(); ++i) out.samples[i] += gain * noise[i];
      break;
    }
    case DegradationKind::kLowpass: {
      const auto h = design_lowpass(spec.cutoff_hz, truth.sample_rate, kFilterTaps);
      out.samples = filter_centered(truth.samples, h);
      break;
    }
    case DegradationKind::kSmear: {
      auto width = static_cast<std::size_t>(std::lround(spec.smear_ms * 1e-3 * truth.sample_rate));
      if (width % 2 == 0) ++width;
      // Symmetric Hann without zero endpoints, unit sum.
      std::vector<double> w(width);
      for (std::size_t i = 0; i < width; ++i) {
        w[i] = 0.5 - 0.5 * std::cos(kTwoPi * static_cast<double>(i + 1) / static_cast<double>(width + 1));
      }
      const double total = std::accumulate(w.begin(), w.end(), 0.0);
      for (double& v : w) v /= total;
      out.samples = filter_centered(truth.samples, w);
      break;
    }
  }
  return out;
}

SyntheticPair synthesize_pair(const DegradationSpec& spec, SourceClass source, std::size_t clip_len, Rng& rng) {
  spec.validate();
  SyntheticPair pair;
  pair.truth = synthesize_source(source, clip_len, rng);
  pair.estimate = degrade(pair.truth, spec, rng);
  return pair;
}

SyntheticPair synthesize_corpus_item(const DegradationSpec& spec, SourceClass source, std::size_t clip_len,
                                     std::size_t index) {
  Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(source), index));
  return synthesize_pair(spec, source, clip_len, rng);
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  const auto base = path.parent_path();
  json j;
  j["schema_version"] = kManifestSchemaVersion;
  j["sample_rate"] = manifest.sample_rate;
  j["pairs"] = json::array();
  for (const auto& p : manifest.pairs) {
    j["pairs"].push_back({{"id", p.id},
                          {"source", std::string(to_string(p.source))},
                          {"separator", p.separator},
                          {"reference", p.reference.lexically_relative(base).generic_string()},
                          {"estimate", p.estimate.lexically_relative(base).generic_string()}});
  }
  if (!base.empty()) std::filesystem::create_directories(base);
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError(path.string() + ": cannot open for writing");
  os << j.dump(2) << '\n';
  if (!os) throw IoError(path.string() + ": write failed");
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError(path.string() + ": cannot open manifest");
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": malformed manifest JSON (" + e.what() + ")");
  }
  const auto base = std::filesystem::absolute(path).parent_path();
  Manifest m;
  try {
    if (j.at("schema_version").get<int>() != kManifestSchemaVersion) {
      throw IoError(path.string() + ": unsupported manifest schema version");
    }
    m.sample_rate = j.value("sample_rate", dsp::kCanonicalRate);
    for (const auto& p : j.at("pairs")) {
      PairEntry e;
      e.id = p.at("id").get<std::string>();
      e.source = parse_source_class(p.at("source").get<std::string>());
      e.separator = p.value("separator", std::string{});
      e.reference = (base / p.at("reference").get<std::string>()).lexically_normal();
      e.estimate = (base / p.at("estimate").get<std::string>()).lexically_normal();
      m.pairs.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": invalid manifest (" + e.what() + ")");
  }
  return m;
}

Manifest write_synthetic_corpus(const std::filesystem::path& dir, const DegradationSpec& spec, SourceClass source,
                                std::size_t num_clips, std::size_t clip_len) {
  spec.validate();
  Manifest m;
  const std::string src(to_string(source));
  for (std::size_t i = 0; i < num_clips; ++i) {
    const auto pair = synthesize_corpus_item(spec, source, clip_len, i);
    char id[32];
    std::snprintf(id, sizeof id, "clip%05zu", i);
    PairEntry e;
    e.id = id;
    e.source = source;
    e.separator = std::string(to_string(spec.kind));
    e.reference = dir / "reference" / id / (src + ".wav");
    e.estimate = dir / "estimate" / id / (src + ".wav");
    write_wav(e.reference, pair.truth);
    write_wav(e.estimate, pair.estimate);
    m.pairs.push_back(std::move(e));
  }
  write_manifest(dir / "manifest.json", m);
  return m;
}

std::vector<TrainingExample> load_training_examples(const Manifest& manifest, SourceClass source,
                                                    std::size_t clip_len,
                                                    const std::filesystem::path& dataset_manifest) {
  std::vector<TrainingExample> out;
  json records = json::array();
  for (const auto& p : manifest.pairs) {
    if (p.source != source) continue;
    const auto truth = resample_to_16k(read_wav(p.reference));
    const auto estimate = resample_to_16k(read_wav(p.estimate));
    auto seg = segment_dataset(estimate, truth, source, p.separator, clip_len);
    for (const auto& c : seg.clips) {
      records.push_back({{"pair", p.id},
                         {"clip", c.index},
                         {"offset", c.offset},
                         {"rms_dbfs", c.rms_dbfs},
                         {"accepted", c.accepted},
                         {"reason", c.reason}});
    }
    for (auto& ex : seg.examples) out.push_back(std::move(ex));
  }
  if (!dataset_manifest.empty()) {
    json j{{"schema_version", kManifestSchemaVersion},
           {"source", std::string(to_string(source))},
           {"clip_length", clip_len},
           {"clips", records}};
    std::ofstream os(dataset_manifest, std::ios::trunc);
    if (!os) throw IoError(dataset_manifest.string() + ": cannot open for writing");
    os << j.dump(2) << '\n';
  }
  return out;
}

}  // namespace msg::data

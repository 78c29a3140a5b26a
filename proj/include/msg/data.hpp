#pragma once

// Corpus preparation: normalization, 1-second segmentation with silence
// rejection, ground-truth swap augmentation, and the synthetic degradation
// generator that stands in for real separator outputs.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "msg/dsp.hpp"
#include "msg/rng.hpp"

namespace msg::data {

inline constexpr std::size_t kClipLength = 16000;
inline constexpr double kSilenceRejectDb = -60.0;

enum class SourceClass { kBass, kDrums, kVocals };

std::string_view to_string(SourceClass s);
SourceClass parse_source_class(std::string_view name);

struct TrainingExample {
  dsp::AudioBuffer input;   // raw estimate, or the target after a swap
  dsp::AudioBuffer target;  // ground truth
  SourceClass source = SourceClass::kBass;
  std::string separator_tag;
};

// Max |x| scaled to 1. All-zero input is returned unchanged.
dsp::AudioBuffer peak_normalize(const dsp::AudioBuffer& audio);

// Gain peak_normalize would apply (1 for silence).
double peak_gain(std::span<const double> samples);

// Whole-buffer RMS in dBFS, floored at -120.
double rms_dbfs(std::span<const double> samples);

struct ClipRecord {
  std::size_t index = 0;
  std::size_t offset = 0;  // samples
  double rms_dbfs = 0.0;   // ground truth
  bool accepted = false;
  std::string reason;      // empty when accepted
};

struct SegmentResult {
  std::vector<TrainingExample> examples;
  std::vector<ClipRecord> clips;
  bool truncated = false;  // tracks had different lengths
};

// Non-overlapping clips, final partial clip dropped, clips whose ground truth
// is strictly below -60 dBFS rejected.
SegmentResult segment_dataset(const dsp::AudioBuffer& estimate, const dsp::AudioBuffer& truth, SourceClass source,
                              const std::string& separator_tag, std::size_t clip_len = kClipLength);

// With probability p the input is replaced by the target.
TrainingExample swap_augment(TrainingExample example, double p, Rng& rng);

enum class DegradationKind { kHfNoise, kLowpass, kSmear };

std::string_view to_string(DegradationKind k);
DegradationKind parse_degradation(std::string_view name);

struct DegradationSpec {
  DegradationKind kind = DegradationKind::kHfNoise;
  double noise_db = -12.0;     // hfnoise: noise RMS relative to clip RMS, [-40, 0]
  double cutoff_hz = 3000.0;   // hfnoise: noise floor edge; lowpass: filter edge, [100, 7000]
  double smear_ms = 8.0;       // smear: Hann window width, [1, 100]
  std::uint64_t seed = 0;

  static DegradationSpec defaults(DegradationKind kind, std::uint64_t seed = 0);
  void validate() const;
};

// One synthetic ground-truth clip: harmonic tone stacks (bass, vocals) or
// decaying noise bursts (drums), peak 0.8.
dsp::AudioBuffer synthesize_source(SourceClass source, std::size_t clip_len, Rng& rng);

dsp::AudioBuffer degrade(const dsp::AudioBuffer& truth, const DegradationSpec& spec, Rng& rng);

struct SyntheticPair {
  dsp::AudioBuffer truth;
  dsp::AudioBuffer estimate;
};

SyntheticPair synthesize_pair(const DegradationSpec& spec, SourceClass source, std::size_t clip_len, Rng& rng);

// Pair i of a corpus is drawn from its own stream so corpora are prefix-stable.
SyntheticPair synthesize_corpus_item(const DegradationSpec& spec, SourceClass source, std::size_t clip_len,
                                     std::size_t index);

// Manifest entry for a reference/estimate WAV pair on disk.
struct PairEntry {
  std::string id;
  SourceClass source = SourceClass::kBass;
  std::string separator;
  std::filesystem::path reference;  // absolute after load
  std::filesystem::path estimate;
};

struct Manifest {
  double sample_rate = dsp::kCanonicalRate;
  std::vector<PairEntry> pairs;
};

inline constexpr int kManifestSchemaVersion = 1;

// Paths are stored relative to the manifest's directory.
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);

// Writes `<dir>/reference/<id>/<source>.wav`, `<dir>/estimate/<id>/<source>.wav`
// and `<dir>/manifest.json`; returns the manifest.
Manifest write_synthetic_corpus(const std::filesystem::path& dir, const DegradationSpec& spec, SourceClass source,
                                std::size_t num_clips, std::size_t clip_len = kClipLength);

// Loads every manifest pair of one source class, resampled to 16 kHz and
// segmented; the per-clip records go to `dataset_manifest` when non-empty.
std::vector<TrainingExample> load_training_examples(const Manifest& manifest, SourceClass source,
                                                    std::size_t clip_len,
                                                    const std::filesystem::path& dataset_manifest = {});

}  // namespace msg::data

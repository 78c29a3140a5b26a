#pragma once

// Artifact metrics over paired estimate/reference audio: spectral-rolloff
// error in cents, onset F1, the exact two-tailed binomial test, and report
// emission (JSON + per-frame CSV).

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "msg/dsp.hpp"

namespace msg::analyze {

inline constexpr int kReportSchemaVersion = 1;
inline constexpr const char* kToolVersion = "msg 0.1.0";

struct TrackPair {
  std::string name;    // relative path without extension, e.g. "0007/bass"
  std::string source;  // file stem: bass, drums, vocals, ...
  dsp::AudioBuffer estimate;
  dsp::AudioBuffer reference;
};

struct RolloffParams {
  double percent = 0.98;
  double gate_db = -40.0;
  std::size_t fft_size = 1024;
  std::size_t window = 1024;
  std::size_t hop = 512;
};

// 50-cent bins over [lo, hi) plus an underflow bin (index 0) and an overflow
// bin (last index).
struct Histogram {
  double lo = -5000.0;
  double hi = 5000.0;
  double width = 50.0;
  std::vector<std::size_t> counts;

  Histogram();
  Histogram(double lo, double hi, double width);

  std::size_t bins() const { return counts.size(); }
  std::size_t index_of(double cents) const;
  void add(double cents) { ++counts[index_of(cents)]; }
  std::size_t total() const;
  // Lower edge of bin i; -inf for the underflow bin.
  double lower_edge(std::size_t i) const;

  bool operator==(const Histogram&) const = default;
};

struct FrameRecord {
  std::string track;
  std::size_t frame = 0;
  double ref_rolloff_hz = 0.0;
  double est_rolloff_hz = 0.0;
  std::optional<double> cents;
  bool gated = false;
  bool skipped = false;
};

struct TrackRolloff {
  std::string name;
  std::optional<double> mean_signed_cents;  // empty when no frame survived
  std::optional<double> mean_abs_cents;
  std::size_t total = 0;
  std::size_t gated = 0;
  std::size_t skipped = 0;
  std::size_t analyzed = 0;

  bool operator==(const TrackRolloff&) const = default;
};

struct RolloffReport {
  std::vector<TrackRolloff> tracks;
  Histogram histogram;
  std::size_t total_frames = 0;
  std::size_t gated = 0;
  std::size_t skipped = 0;
  std::size_t analyzed = 0;
  std::optional<double> mean_signed_cents;
  std::optional<double> mean_abs_cents;
  std::optional<double> median_signed_cents;
  std::vector<FrameRecord> frames;  // not serialized to JSON

  bool operator==(const RolloffReport& o) const {
    return tracks == o.tracks && histogram == o.histogram && total_frames == o.total_frames && gated == o.gated &&
           skipped == o.skipped && analyzed == o.analyzed && mean_signed_cents == o.mean_signed_cents &&
           mean_abs_cents == o.mean_abs_cents && median_signed_cents == o.median_signed_cents;
  }
};

// Frames where the reference RMS is below gate_db are gated; frames where
// either rolloff is the 0 Hz sentinel are skipped; the rest contribute
// cents_difference(est, ref).
RolloffReport rolloff_error_report(std::span<const TrackPair> pairs, const RolloffParams& params = {});

struct OnsetParams {
  double threshold = 0.75;
  std::size_t n_mels = 128;
  std::size_t fft_size = 1024;
  std::size_t hop = 512;
};

// Counts pooled over all pairs. ContractError "no pairs" when empty.
dsp::OnsetMatchCounts onset_counts(std::span<const TrackPair> pairs, const OnsetParams& params = {});

// Pooled counts per source class.
std::map<std::string, dsp::OnsetMatchCounts> onset_report(std::span<const TrackPair> pairs,
                                                          const OnsetParams& params = {});

// Exact two-tailed p-value: sum of all Binomial(trials, p0) pmf terms not
// exceeding pmf(successes).
double binomial_test_two_tailed(std::size_t successes, std::size_t trials, double p0 = 0.5);

struct MetricsReport {
  std::string corpus_id;
  std::string tool_version = kToolVersion;
  nlohmann::json parameters = nlohmann::json::object();
  std::map<std::string, RolloffReport> rolloff;  // by source class
  std::map<std::string, dsp::OnsetMatchCounts> onsets;
  std::vector<std::string> unpaired;
};

nlohmann::json to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& j);

nlohmann::json to_json(const RolloffParams& p);
nlohmann::json to_json(const OnsetParams& p);

// Writes the JSON report and, when csv_path is non-empty, the per-frame
// rolloff CSV. IoError naming the path on failure.
void emit_report(const MetricsReport& report, const std::filesystem::path& json_path,
                 const std::filesystem::path& csv_path = {});

struct PairingResult {
  std::vector<TrackPair> pairs;
  std::vector<std::string> unpaired;  // relative paths present on one side only
  std::vector<std::string> failed;    // "path: reason" for files that did not load
};

// Matches <ref_dir>/<rel>.wav with <est_dir>/<rel>.wav, resampling both to
// 16 kHz. Pairs come back sorted by name.
PairingResult pair_directories(const std::filesystem::path& est_dir, const std::filesystem::path& ref_dir);

}  // namespace msg::analyze

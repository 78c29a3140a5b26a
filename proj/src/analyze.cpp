#include "msg/analyze.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>

#include "msg/error.hpp"
#include "msg/resample.hpp"
#include "msg/wav.hpp"

namespace msg::analyze {

using detail::require;
using nlohmann::json;

// ---------------------------------------------------------------- histogram

Histogram::Histogram() : Histogram(-5000.0, 5000.0, 50.0) {}

Histogram::Histogram(double lo_, double hi_, double width_) : lo(lo_), hi(hi_), width(width_) {
  require(width > 0.0 && hi > lo, "Histogram: need width > 0 and hi > lo");
  const auto inner = static_cast<std::size_t>(std::ceil((hi - lo) / width - 1e-9));
  counts.assign(inner + 2, 0);
}

std::size_t Histogram::index_of(double cents) const {
  if (cents < lo) return 0;
  if (cents >= hi) return counts.size() - 1;
  const auto i = static_cast<std::size_t>(std::floor((cents - lo) / width));
  return std::min(i + 1, counts.size() - 2);
}

std::size_t Histogram::total() const {
  std::size_t n = 0;
  for (auto c : counts) n += c;
  return n;
}

double Histogram::lower_edge(std::size_t i) const {
  if (i == 0) return -std::numeric_limits<double>::infinity();
  if (i + 1 == counts.size()) return hi;
  return lo + static_cast<double>(i - 1) * width;
}

// ------------------------------------------------------------------ rolloff

namespace {

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

RolloffReport rolloff_error_report(std::span<const TrackPair> pairs, const RolloffParams& params) {
  require(params.percent > 0.0 && params.percent <= 1.0, "rolloff_error_report: percent must lie in (0, 1]");
  const dsp::StftParams stft{params.fft_size, params.window, params.hop};
  dsp::validate(stft);

  RolloffReport report;
  std::vector<double> pooled, pooled_abs;
  for (const auto& pair : pairs) {
    if (pair.estimate.sample_rate != pair.reference.sample_rate) {
      detail::contract_fail("rolloff_error_report: " + pair.name + " has mismatched sample rates");
    }
    const auto ref_roll = dsp::spectral_rolloff(dsp::stft(pair.reference, stft), params.percent);
    const auto est_roll = dsp::spectral_rolloff(dsp::stft(pair.estimate, stft), params.percent);
    const auto ref_db = dsp::frame_rms_dbfs(pair.reference, params.window, params.hop);
    const std::size_t frames = std::min(ref_roll.size(), est_roll.size());

    TrackRolloff track;
    track.name = pair.name;
    track.total = frames;
    std::vector<double> errors, abs_errors;
    for (std::size_t t = 0; t < frames; ++t) {
      FrameRecord rec{pair.name, t, ref_roll[t], est_roll[t], std::nullopt, false, false};
      if (ref_db[t] < params.gate_db) {
        rec.gated = true;
        ++track.gated;
      } else if (auto c = dsp::cents_difference(est_roll[t], ref_roll[t])) {
        rec.cents = *c;
        errors.push_back(*c);
        abs_errors.push_back(std::abs(*c));
        report.histogram.add(*c);
      } else {
        rec.skipped = true;
        ++track.skipped;
      }
      report.frames.push_back(std::move(rec));
    }
    track.analyzed = errors.size();
    if (!errors.empty()) {
      track.mean_signed_cents = mean_of(errors);
      track.mean_abs_cents = mean_of(abs_errors);
    }
    report.total_frames += track.total;
    report.gated += track.gated;
    report.skipped += track.skipped;
    report.analyzed += track.analyzed;
    pooled.insert(pooled.end(), errors.begin(), errors.end());
    pooled_abs.insert(pooled_abs.end(), abs_errors.begin(), abs_errors.end());
    report.tracks.push_back(std::move(track));
  }
  if (!pooled.empty()) {
    report.mean_signed_cents = mean_of(pooled);
    report.mean_abs_cents = mean_of(pooled_abs);
    report.median_signed_cents = median_of(pooled);
  }
  return report;
}

// ------------------------------------------------------------------- onsets

namespace {

dsp::OnsetMatchCounts pair_counts(const TrackPair& pair, const OnsetParams& p) {
  const auto est = dsp::onset_strength(pair.estimate, p.n_mels, p.fft_size, p.hop);
  const auto ref = dsp::onset_strength(pair.reference, p.n_mels, p.fft_size, p.hop);
  if (est.strength.size() != ref.strength.size()) {
    detail::contract_fail("onset_report: " + pair.name + " has different estimate/reference lengths");
  }
  return dsp::onset_f1(est, ref, p.threshold);
}

void accumulate(dsp::OnsetMatchCounts& acc, const dsp::OnsetMatchCounts& c) {
  acc.tp += c.tp;
  acc.fp += c.fp;
  acc.fn += c.fn;
  acc.f1 = dsp::f1_score(acc.tp, acc.fp, acc.fn);
}

}  // namespace

dsp::OnsetMatchCounts onset_counts(std::span<const TrackPair> pairs, const OnsetParams& params) {
  require(!pairs.empty(), "no pairs");
  dsp::OnsetMatchCounts total;
  for (const auto& pair : pairs) accumulate(total, pair_counts(pair, params));
  return total;
}

std::map<std::string, dsp::OnsetMatchCounts> onset_report(std::span<const TrackPair> pairs,
                                                          const OnsetParams& params) {
  require(!pairs.empty(), "no pairs");
  std::map<std::string, dsp::OnsetMatchCounts> out;
  for (const auto& pair : pairs) accumulate(out[pair.source], pair_counts(pair, params));
  return out;
}

// ----------------------------------------------------------------- binomial

double binomial_test_two_tailed(std::size_t successes, std::size_t trials, double p0) {
  require(trials >= 1, "binomial_test_two_tailed: trials must be >= 1");
  if (successes > trials) {
    detail::contract_fail("binomial_test_two_tailed: successes " + std::to_string(successes) + " exceed trials " +
                          std::to_string(trials));
  }
  require(p0 > 0.0 && p0 < 1.0, "binomial_test_two_tailed: p0 must lie in (0, 1)");
  const std::size_t n = trials;
  const double q0 = 1.0 - p0;
  // pmf up to a common factor, built outward from the mode so nothing
  // underflows near the bulk; normalized at the end.
  const auto mode = std::min(n, static_cast<std::size_t>(std::floor(static_cast<double>(n + 1) * p0)));
  std::vector<double> r(n + 1, 0.0);
  r[mode] = 1.0;
  for (std::size_t i = mode + 1; i <= n; ++i) {
    r[i] = r[i - 1] * static_cast<double>(n - i + 1) / static_cast<double>(i) * (p0 / q0);
  }
  for (std::size_t i = mode; i-- > 0;) {
    r[i] = r[i + 1] * static_cast<double>(i + 1) / static_cast<double>(n - i) * (q0 / p0);
  }
  // Relative slack so terms equal to pmf(k) up to rounding are included.
  const double cut = r[successes] * (1.0 + 1e-7);
  std::vector<double> in, out;
  for (double v : r) (v <= cut ? in : out).push_back(v);
  auto sorted_sum = [](std::vector<double>& v) {
    std::sort(v.begin(), v.end());
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc;
  };
  const double inside = sorted_sum(in);
  const double outside = sorted_sum(out);
  return outside == 0.0 ? 1.0 : std::min(1.0, inside / (inside + outside));
}

// ------------------------------------------------------------------- report

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

json rolloff_json(const RolloffReport& r) {
  json tracks = json::array();
  for (const auto& t : r.tracks) {
    tracks.push_back({{"name", t.name},
                      {"mean_signed_cents", opt(t.mean_signed_cents)},
                      {"mean_abs_cents", opt(t.mean_abs_cents)},
                      {"total_frames", t.total},
                      {"gated", t.gated},
                      {"skipped", t.skipped},
                      {"analyzed", t.analyzed}});
  }
  return {{"tracks", tracks},
          {"histogram", {{"lo", r.histogram.lo}, {"hi", r.histogram.hi}, {"width", r.histogram.width},
                         {"counts", r.histogram.counts}}},
          {"total_frames", r.total_frames},
          {"gated", r.gated},
          {"skipped", r.skipped},
          {"analyzed", r.analyzed},
          {"mean_signed_cents", opt(r.mean_signed_cents)},
          {"mean_abs_cents", opt(r.mean_abs_cents)},
          {"median_signed_cents", opt(r.median_signed_cents)}};
}

RolloffReport rolloff_from_json(const json& j) {
  RolloffReport r;
  for (const auto& t : j.at("tracks")) {
    TrackRolloff tr;
    tr.name = t.at("name").get<std::string>();
    tr.mean_signed_cents = opt_from(t.at("mean_signed_cents"));
    tr.mean_abs_cents = opt_from(t.at("mean_abs_cents"));
    tr.total = t.at("total_frames").get<std::size_t>();
    tr.gated = t.at("gated").get<std::size_t>();
    tr.skipped = t.at("skipped").get<std::size_t>();
    tr.analyzed = t.at("analyzed").get<std::size_t>();
    r.tracks.push_back(std::move(tr));
  }
  const auto& h = j.at("histogram");
  r.histogram = Histogram(h.at("lo").get<double>(), h.at("hi").get<double>(), h.at("width").get<double>());
  r.histogram.counts = h.at("counts").get<std::vector<std::size_t>>();
  r.total_frames = j.at("total_frames").get<std::size_t>();
  r.gated = j.at("gated").get<std::size_t>();
  r.skipped = j.at("skipped").get<std::size_t>();
  r.analyzed = j.at("analyzed").get<std::size_t>();
  r.mean_signed_cents = opt_from(j.at("mean_signed_cents"));
  r.mean_abs_cents = opt_from(j.at("mean_abs_cents"));
  r.median_signed_cents = opt_from(j.at("median_signed_cents"));
  return r;
}

}  // namespace

json to_json(const RolloffParams& p) {
  return {{"percent", p.percent}, {"gate_db", p.gate_db}, {"fft_size", p.fft_size}, {"window", p.window},
          {"hop", p.hop}};
}

json to_json(const OnsetParams& p) {
  return {{"threshold", p.threshold}, {"n_mels", p.n_mels}, {"fft_size", p.fft_size}, {"hop", p.hop},
          {"pooling", "counts pooled over tracks"}};
}

json to_json(const MetricsReport& report) {
  json rolloff = json::object();
  for (const auto& [k, v] : report.rolloff) rolloff[k] = rolloff_json(v);
  json onsets = json::object();
  for (const auto& [k, c] : report.onsets) onsets[k] = {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"f1", c.f1}};
  return {{"schema_version", kReportSchemaVersion},
          {"corpus_id", report.corpus_id},
          {"tool_version", report.tool_version},
          {"parameters", report.parameters},
          {"rolloff", rolloff},
          {"onsets", onsets},
          {"unpaired", report.unpaired}};
}

MetricsReport report_from_json(const json& j) {
  try {
    const int version = j.at("schema_version").get<int>();
    if (version != kReportSchemaVersion) {
      detail::contract_fail("report: unsupported schema version " + std::to_string(version));
    }
    MetricsReport r;
    r.corpus_id = j.at("corpus_id").get<std::string>();
    r.tool_version = j.at("tool_version").get<std::string>();
    r.parameters = j.at("parameters");
    for (const auto& [k, v] : j.at("rolloff").items()) r.rolloff[k] = rolloff_from_json(v);
    for (const auto& [k, v] : j.at("onsets").items()) {
      dsp::OnsetMatchCounts c;
      c.tp = v.at("tp").get<std::size_t>();
      c.fp = v.at("fp").get<std::size_t>();
      c.fn = v.at("fn").get<std::size_t>();
      c.f1 = v.at("f1").get<double>();
      r.onsets[k] = c;
    }
    r.unpaired = j.at("unpaired").get<std::vector<std::string>>();
    return r;
  } catch (const json::exception& e) {
    detail::contract_fail(std::string("report: malformed JSON: ") + e.what());
  }
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("report " + path.string() + ": cannot open for writing");
  f << text;
  if (!f) throw IoError("report " + path.string() + ": write failed");
}

}  // namespace

void emit_report(const MetricsReport& report, const std::filesystem::path& json_path,
                 const std::filesystem::path& csv_path) {
  write_text(json_path, to_json(report).dump(2) + "\n");
  if (csv_path.empty()) return;
  std::string csv = "track,frame,ref_rolloff_hz,est_rolloff_hz,cents,gated,skipped\n";
  for (const auto& [source, r] : report.rolloff) {
    for (const auto& f : r.frames) {
      csv += f.track + ',' + std::to_string(f.frame) + ',' + fmt(f.ref_rolloff_hz) + ',' + fmt(f.est_rolloff_hz) +
             ',' + (f.cents ? fmt(*f.cents) : std::string()) + ',' + (f.gated ? "1" : "0") + ',' +
             (f.skipped ? "1" : "0") + '\n';
    }
  }
  write_text(csv_path, csv);
}

// ------------------------------------------------------------------ pairing

namespace {

std::set<std::string> wav_files(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("directory " + dir.string() + ": not found");
  std::set<std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".wav") out.insert(std::filesystem::relative(e.path(), dir).generic_string());
  }
  return out;
}

}  // namespace

PairingResult pair_directories(const std::filesystem::path& est_dir, const std::filesystem::path& ref_dir) {
  const auto refs = wav_files(ref_dir);
  const auto ests = wav_files(est_dir);
  PairingResult out;
  for (const auto& rel : refs) {
    if (!ests.count(rel)) {
      out.unpaired.push_back("reference only: " + rel);
      continue;
    }
    TrackPair pair;
    const std::filesystem::path p(rel);
    pair.name = (p.parent_path() / p.stem()).generic_string();
    pair.source = p.stem().string();
    try {
      pair.reference = data::resample_to_16k(data::read_wav(ref_dir / rel));
      pair.estimate = data::resample_to_16k(data::read_wav(est_dir / rel));
    } catch (const std::exception& e) {
      out.failed.push_back(rel + ": " + e.what());
      continue;
    }
    const std::size_t n = std::min(pair.reference.size(), pair.estimate.size());
    pair.reference.samples.resize(n);
    pair.estimate.samples.resize(n);
    if (n == 0) {
      out.failed.push_back(rel + ": empty audio");
      continue;
    }
    out.pairs.push_back(std::move(pair));
  }
  for (const auto& rel : ests) {
    if (!refs.count(rel)) out.unpaired.push_back("estimate only: " + rel);
  }
  return out;
}

}  // namespace msg::analyze

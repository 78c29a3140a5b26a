#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "msg/analyze.hpp"
#include "msg/data.hpp"
#include "msg/dsp.hpp"
#include "msg/error.hpp"
#include "msg/rng.hpp"
#include "msg/wav.hpp"
#include "test_util.hpp"

namespace msg::analyze {
namespace {

using testing::TempDir;

TrackPair make_pair(const std::string& name, const std::string& source, std::vector<double> est,
                    std::vector<double> ref) {
  return TrackPair{name, source, dsp::AudioBuffer{std::move(est), 16000.0}, dsp::AudioBuffer{std::move(ref), 16000.0}};
}

std::vector<TrackPair> synthetic_pairs(data::DegradationKind kind, data::SourceClass source, std::size_t n) {
  std::vector<TrackPair> out;
  const auto spec = data::DegradationSpec::defaults(kind, 7);
  for (std::size_t i = 0; i < n; ++i) {
    auto p = data::synthesize_corpus_item(spec, source, 16000, i);
    out.push_back(TrackPair{"clip" + std::to_string(i), std::string(data::to_string(source)), p.estimate, p.truth});
  }
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Exact pmf via Pascal's triangle in long double; independent of the
// mode-outward recurrence used by the implementation.
double brute_binomial(std::size_t k, std::size_t n, double p0) {
  std::vector<long double> row{1.0L};
  for (std::size_t i = 1; i <= n; ++i) {
    std::vector<long double> next(i + 1);
    next[0] = next[i] = 1.0L;
    for (std::size_t j = 1; j < i; ++j) next[j] = row[j - 1] + row[j];
    row.swap(next);
  }
  std::vector<long double> pmf(n + 1);
  for (std::size_t j = 0; j <= n; ++j) {
    pmf[j] = row[j] * std::pow(static_cast<long double>(p0), static_cast<long double>(j)) *
             std::pow(1.0L - p0, static_cast<long double>(n - j));
  }
  const long double cut = pmf[k] * (1.0L + 1e-7L);
  long double sum = 0.0L;
  for (auto v : pmf)
    if (v <= cut) sum += v;
  return static_cast<double>(std::min(sum, 1.0L));
}

// --------------------------------------------------------------- histogram

TEST(Histogram, DefaultLayout) {
  Histogram h;
  EXPECT_EQ(h.bins(), 202u);
  EXPECT_EQ(h.index_of(-5000.1), 0u);
  EXPECT_EQ(h.index_of(-5000.0), 1u);
  EXPECT_EQ(h.index_of(4999.9), 200u);
  EXPECT_EQ(h.index_of(5000.0), 201u);
  EXPECT_EQ(h.lower_edge(0), -std::numeric_limits<double>::infinity());
  EXPECT_DOUBLE_EQ(h.lower_edge(1), -5000.0);
  EXPECT_DOUBLE_EQ(h.lower_edge(201), 5000.0);
  EXPECT_DOUBLE_EQ(h.lower_edge(h.index_of(0.0)), 0.0);
  EXPECT_DOUBLE_EQ(h.lower_edge(h.index_of(-0.001)), -50.0);
}

TEST(Histogram, EveryValueLandsInItsBin) {
  Histogram h;
  Rng rng(3);
  for (int i = 0; i < 5000; ++i) {
    const double c = rng.uniform(-6000.0, 6000.0);
    const auto b = h.index_of(c);
    EXPECT_LE(h.lower_edge(b), c);
    if (b + 1 < h.bins()) {
      EXPECT_LT(c, h.lower_edge(b + 1));
    }
    h.add(c);
  }
  EXPECT_EQ(h.total(), 5000u);
}

TEST(Histogram, RejectsBadLayout) {
  EXPECT_THROW(Histogram(0.0, 10.0, 0.0), ContractError);
  EXPECT_THROW(Histogram(10.0, 0.0, 1.0), ContractError);
}

// ------------------------------------------------------------------ rolloff

TEST(Rolloff, IdentityIsExactlyZero) {
  const auto pairs = synthetic_pairs(data::DegradationKind::kHfNoise, data::SourceClass::kBass, 4);
  std::vector<TrackPair> same;
  for (const auto& p : pairs) same.push_back(TrackPair{p.name, p.source, p.reference, p.reference});
  const auto r = rolloff_error_report(same);
  ASSERT_GT(r.analyzed, 0u);
  for (const auto& f : r.frames) {
    if (f.cents) {
      EXPECT_EQ(*f.cents, 0.0);
    }
  }
  EXPECT_EQ(*r.mean_signed_cents, 0.0);
  EXPECT_EQ(*r.mean_abs_cents, 0.0);
  EXPECT_EQ(*r.median_signed_cents, 0.0);
  EXPECT_EQ(r.histogram.counts[r.histogram.index_of(0.0)], r.analyzed);
  EXPECT_EQ(r.histogram.total(), r.analyzed);
}

TEST(Rolloff, FrameCentsMatchRolloffRatio) {
  const auto pairs = synthetic_pairs(data::DegradationKind::kLowpass, data::SourceClass::kVocals, 2);
  const auto r = rolloff_error_report(pairs);
  std::size_t checked = 0;
  for (const auto& f : r.frames) {
    if (!f.cents) continue;
    EXPECT_NEAR(*f.cents, 1200.0 * std::log2(f.est_rolloff_hz / f.ref_rolloff_hz), 1e-9);
    ++checked;
  }
  EXPECT_GT(checked, 0u);
}

TEST(Rolloff, CountsAndMeansAreConsistent) {
  auto pairs = synthetic_pairs(data::DegradationKind::kHfNoise, data::SourceClass::kBass, 3);
  // Second half of one reference silent: those frames are gated.
  auto& ref = pairs[1].reference.samples;
  std::fill(ref.begin() + 8000, ref.end(), 0.0);
  const auto r = rolloff_error_report(pairs);
  std::size_t total = 0, gated = 0, skipped = 0, analyzed = 0;
  double sum = 0.0;
  for (const auto& t : r.tracks) {
    EXPECT_EQ(t.total, t.gated + t.skipped + t.analyzed);
    total += t.total;
    gated += t.gated;
    skipped += t.skipped;
    analyzed += t.analyzed;
  }
  for (const auto& f : r.frames)
    if (f.cents) sum += *f.cents;
  EXPECT_EQ(r.total_frames, total);
  EXPECT_EQ(r.gated, gated);
  EXPECT_EQ(r.skipped, skipped);
  EXPECT_EQ(r.analyzed, analyzed);
  EXPECT_EQ(r.frames.size(), total);
  EXPECT_GT(r.tracks[1].gated, 10u);
  EXPECT_NEAR(*r.mean_signed_cents, sum / static_cast<double>(analyzed), 1e-9);
}

TEST(Rolloff, GatingUsesReferenceOnly) {
  // Loud estimate, quiet reference: everything gated.
  auto quiet = make_pair("q", "bass", testing::sine(200.0, 16000.0, 16000, 0.9),
                         testing::sine(200.0, 16000.0, 16000, 0.001));
  auto r = rolloff_error_report(std::span<const TrackPair>(&quiet, 1));
  EXPECT_EQ(r.gated, r.total_frames);
  EXPECT_FALSE(r.mean_signed_cents.has_value());

  // Silent estimate, loud reference: nothing gated, every frame skipped.
  auto silent = make_pair("s", "bass", std::vector<double>(16000, 0.0), testing::sine(200.0, 16000.0, 16000, 0.5));
  r = rolloff_error_report(std::span<const TrackPair>(&silent, 1));
  EXPECT_EQ(r.gated, 0u);
  EXPECT_EQ(r.skipped, r.total_frames);
  EXPECT_EQ(r.analyzed, 0u);
}

TEST(Rolloff, SkewFollowsDegradation) {
  const auto hf = rolloff_error_report(synthetic_pairs(data::DegradationKind::kHfNoise, data::SourceClass::kBass, 20));
  const auto lp = rolloff_error_report(synthetic_pairs(data::DegradationKind::kLowpass, data::SourceClass::kBass, 20));
  EXPECT_GT(*hf.mean_signed_cents, 0.0);
  EXPECT_GT(*hf.median_signed_cents, 0.0);
  EXPECT_LT(*lp.mean_signed_cents, 0.0);
  EXPECT_LT(*lp.median_signed_cents, 0.0);
}

TEST(Rolloff, RejectsMismatchedRates) {
  auto p = make_pair("x", "bass", std::vector<double>(4000, 0.1), std::vector<double>(4000, 0.1));
  p.estimate.sample_rate = 44100.0;
  try {
    rolloff_error_report(std::span<const TrackPair>(&p, 1));
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("x"), std::string::npos);
  }
  RolloffParams bad;
  bad.percent = 1.5;
  EXPECT_THROW(rolloff_error_report({}, bad), ContractError);
}

// ------------------------------------------------------------------- onsets

TEST(Onsets, IdentityGivesOne) {
  auto pairs = synthetic_pairs(data::DegradationKind::kSmear, data::SourceClass::kDrums, 5);
  for (auto& p : pairs) p.estimate = p.reference;
  const auto c = onset_counts(pairs);
  EXPECT_GT(c.tp, 0u);
  EXPECT_EQ(c.fp, 0u);
  EXPECT_EQ(c.fn, 0u);
  EXPECT_EQ(c.f1, 1.0);
}

TEST(Onsets, SmearLowersF1) {
  const auto c = onset_counts(synthetic_pairs(data::DegradationKind::kSmear, data::SourceClass::kDrums, 10));
  EXPECT_LT(c.f1, 1.0);
}

TEST(Onsets, CountsArePooled) {
  const auto pairs = synthetic_pairs(data::DegradationKind::kSmear, data::SourceClass::kDrums, 6);
  std::size_t tp = 0, fp = 0, fn = 0;
  for (const auto& p : pairs) {
    const auto c = onset_counts(std::span<const TrackPair>(&p, 1));
    tp += c.tp;
    fp += c.fp;
    fn += c.fn;
  }
  const auto pooled = onset_counts(pairs);
  EXPECT_EQ(pooled.tp, tp);
  EXPECT_EQ(pooled.fp, fp);
  EXPECT_EQ(pooled.fn, fn);
  EXPECT_DOUBLE_EQ(pooled.f1, static_cast<double>(tp) / (static_cast<double>(tp) + 0.5 * static_cast<double>(fp + fn)));
}

TEST(Onsets, ReportSplitsBySource) {
  auto pairs = synthetic_pairs(data::DegradationKind::kSmear, data::SourceClass::kDrums, 3);
  auto bass = synthetic_pairs(data::DegradationKind::kSmear, data::SourceClass::kBass, 2);
  pairs.insert(pairs.end(), bass.begin(), bass.end());
  const auto rep = onset_report(pairs);
  ASSERT_EQ(rep.size(), 2u);
  EXPECT_EQ(rep.at("drums").tp, onset_counts(std::span<const TrackPair>(pairs.data(), 3)).tp);
  EXPECT_EQ(rep.at("bass").fn, onset_counts(std::span<const TrackPair>(pairs.data() + 3, 2)).fn);
}

TEST(Onsets, EmptyCorpusIsAnError) {
  try {
    onset_counts({});
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("no pairs"), std::string::npos);
  }
  EXPECT_THROW(onset_report({}), ContractError);
}

TEST(Onsets, F1Properties) {
  Rng rng(11);
  for (int i = 0; i < 2000; ++i) {
    const auto tp = static_cast<std::size_t>(rng.uniform(0.0, 20.0));
    const auto fp = static_cast<std::size_t>(rng.uniform(0.0, 3.0));
    const auto fn = static_cast<std::size_t>(rng.uniform(0.0, 3.0));
    const double f = dsp::f1_score(tp, fp, fn);
    EXPECT_GE(f, 0.0);
    EXPECT_LE(f, 1.0);
    if (tp + fp + fn > 0) {
      EXPECT_EQ(f == 1.0, fp == 0 && fn == 0) << tp << ' ' << fp << ' ' << fn;
    }
  }
  EXPECT_DOUBLE_EQ(dsp::f1_score(3, 1, 1), 0.75);
}

// ----------------------------------------------------------------- binomial

TEST(Binomial, Examples) {
  EXPECT_DOUBLE_EQ(binomial_test_two_tailed(50, 100), 1.0);
  EXPECT_NEAR(binomial_test_two_tailed(60, 100), 0.0569, 5e-5);
  EXPECT_NEAR(binomial_test_two_tailed(100, 100), 2.0 * std::pow(2.0, -100.0), 1e-40);
  EXPECT_NEAR(binomial_test_two_tailed(0, 100), 2.0 * std::pow(2.0, -100.0), 1e-40);
  EXPECT_DOUBLE_EQ(binomial_test_two_tailed(0, 1), 1.0);
}

TEST(Binomial, MatchesBruteForce) {
  EXPECT_NEAR(binomial_test_two_tailed(60, 100), brute_binomial(60, 100, 0.5), 1e-12);
  Rng rng(5);
  const double probs[] = {0.5, 0.3, 0.7, 0.1, 0.55};
  for (int i = 0; i < 300; ++i) {
    const auto n = 1 + static_cast<std::size_t>(rng.uniform(0.0, 500.0));
    const auto k = static_cast<std::size_t>(rng.uniform(0.0, static_cast<double>(n) + 1.0));
    const double p0 = probs[i % 5];
    EXPECT_NEAR(binomial_test_two_tailed(std::min(k, n), n, p0), brute_binomial(std::min(k, n), n, p0), 1e-12)
        << k << '/' << n << " p0=" << p0;
  }
}

TEST(Binomial, SymmetricUnderHalf) {
  for (std::size_t n : {7u, 40u, 333u}) {
    for (std::size_t k = 0; k <= n; k += 3) {
      EXPECT_NEAR(binomial_test_two_tailed(k, n), binomial_test_two_tailed(n - k, n), 1e-14);
    }
  }
}

TEST(Binomial, RejectsInvalidCounts) {
  EXPECT_THROW(binomial_test_two_tailed(0, 0), ContractError);
  EXPECT_THROW(binomial_test_two_tailed(11, 10), ContractError);
  EXPECT_THROW(binomial_test_two_tailed(5, 10, 0.0), ContractError);
  EXPECT_THROW(binomial_test_two_tailed(5, 10, 1.0), ContractError);
}

// ------------------------------------------------------------------- report

MetricsReport sample_report() {
  MetricsReport rep;
  rep.corpus_id = "synthetic-hfnoise";
  rep.parameters = {{"rolloff", to_json(RolloffParams{})}, {"onsets", to_json(OnsetParams{})}};
  rep.rolloff["bass"] = rolloff_error_report(synthetic_pairs(data::DegradationKind::kHfNoise, data::SourceClass::kBass, 3));
  rep.onsets = onset_report(synthetic_pairs(data::DegradationKind::kSmear, data::SourceClass::kDrums, 2));
  rep.unpaired = {"reference only: 9/bass.wav"};
  return rep;
}

TEST(Report, RoundTrip) {
  const auto rep = sample_report();
  const auto back = report_from_json(nlohmann::json::parse(to_json(rep).dump()));
  EXPECT_EQ(back.corpus_id, rep.corpus_id);
  EXPECT_EQ(back.tool_version, kToolVersion);
  EXPECT_EQ(back.parameters, rep.parameters);
  EXPECT_EQ(back.rolloff, rep.rolloff);
  ASSERT_EQ(back.onsets.size(), 1u);
  EXPECT_EQ(back.onsets.at("drums").tp, rep.onsets.at("drums").tp);
  EXPECT_EQ(back.onsets.at("drums").f1, rep.onsets.at("drums").f1);
  EXPECT_EQ(back.unpaired, rep.unpaired);
  EXPECT_EQ(to_json(back), to_json(rep));
}

TEST(Report, EmissionIsByteDeterministic) {
  TempDir dir("report");
  const auto rep = sample_report();
  emit_report(rep, dir / "a.json", dir / "a.csv");
  emit_report(sample_report(), dir / "b.json", dir / "b.csv");
  EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
  EXPECT_EQ(slurp(dir / "a.csv"), slurp(dir / "b.csv"));

  const auto j = nlohmann::json::parse(slurp(dir / "a.json"));
  EXPECT_EQ(j.at("schema_version").get<int>(), kReportSchemaVersion);
  EXPECT_EQ(j.at("parameters").at("onsets").at("pooling"), "counts pooled over tracks");
}

TEST(Report, CsvHasOneRowPerFrame) {
  TempDir dir("csv");
  const auto rep = sample_report();
  emit_report(rep, dir / "r.json", dir / "r.csv");
  std::ifstream f(dir / "r.csv");
  std::string line;
  std::getline(f, line);
  EXPECT_EQ(line, "track,frame,ref_rolloff_hz,est_rolloff_hz,cents,gated,skipped");
  std::size_t rows = 0;
  while (std::getline(f, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 6);
    ++rows;
  }
  EXPECT_EQ(rows, rep.rolloff.at("bass").frames.size());
  EXPECT_FALSE(std::filesystem::exists(dir / "none.csv"));
}

TEST(Report, WriteFailureNamesPath) {
  TempDir dir("unwritable");
  std::filesystem::create_directories(dir / "taken.json");
  try {
    emit_report(sample_report(), dir / "taken.json");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("taken.json"), std::string::npos);
  }
}

TEST(Report, RejectsOtherSchemaVersions) {
  auto j = to_json(sample_report());
  j["schema_version"] = kReportSchemaVersion + 1;
  EXPECT_THROW(report_from_json(j), ContractError);
  j.erase("schema_version");
  EXPECT_THROW(report_from_json(j), ContractError);
}

// ------------------------------------------------------------------ pairing

TEST(Pairing, MatchesRelativePaths) {
  TempDir dir("pairing");
  const auto spec = data::DegradationSpec::defaults(data::DegradationKind::kLowpass, 1);
  data::write_synthetic_corpus(dir.path(), spec, data::SourceClass::kBass, 3, 8000);
  // One extra file on each side and one unreadable estimate.
  data::write_wav(dir / "reference/extra/bass.wav", dsp::AudioBuffer{std::vector<double>(100, 0.1), 16000.0});
  data::write_wav(dir / "estimate/lonely/drums.wav", dsp::AudioBuffer{std::vector<double>(100, 0.1), 16000.0});
  std::filesystem::create_directories(dir / "reference/bad");
  std::filesystem::create_directories(dir / "estimate/bad");
  data::write_wav(dir / "reference/bad/vocals.wav", dsp::AudioBuffer{std::vector<double>(100, 0.1), 16000.0});
  std::ofstream(dir / "estimate/bad/vocals.wav") << "junk";

  const auto res = pair_directories(dir / "estimate", dir / "reference");
  ASSERT_EQ(res.pairs.size(), 3u);
  for (std::size_t i = 1; i < res.pairs.size(); ++i) EXPECT_LT(res.pairs[i - 1].name, res.pairs[i].name);
  for (const auto& p : res.pairs) {
    EXPECT_EQ(p.source, "bass");
    EXPECT_EQ(p.estimate.size(), 8000u);
    EXPECT_EQ(p.reference.size(), 8000u);
  }
  EXPECT_EQ(res.unpaired.size(), 2u);
  ASSERT_EQ(res.failed.size(), 1u);
  EXPECT_NE(res.failed[0].find("bad/vocals.wav"), std::string::npos);
}

TEST(Pairing, MissingDirectoryNamesPath) {
  TempDir dir("nodir");
  try {
    pair_directories(dir / "nope", dir.path());
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("nope"), std::string::npos);
  }
}

}  // namespace
}  // namespace msg::analyze

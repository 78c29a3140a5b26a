#include "msg/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "msg/analyze.hpp"
#include "msg/data.hpp"
#include "msg/error.hpp"
#include "msg/log.hpp"
#include "msg/train.hpp"
#include "msg/wav.hpp"

namespace msg::cli {

using nlohmann::json;

namespace {

// Bad flag values detected after parsing.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  std::string s = buf;
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt(*v) : "n/a"; }

void log_config(const std::string& command, const json& resolved) {
  log::info(command + " resolved config: " + resolved.dump());
}

// ------------------------------------------------------------------- synth

struct SynthArgs {
  std::string out;
  std::size_t num_clips = 200;
  std::string degradation = "hfnoise";
  std::string source = "bass";
  std::uint64_t seed = 0;
  std::size_t clip_len = data::kClipLength;
  std::optional<double> noise_db;
  std::optional<double> cutoff_hz;
  std::optional<double> smear_ms;
};

int run_synth(const SynthArgs& a) {
  data::DegradationSpec spec;
  data::SourceClass source;
  try {
    spec = data::DegradationSpec::defaults(data::parse_degradation(a.degradation), a.seed);
    if (a.noise_db) spec.noise_db = *a.noise_db;
    if (a.cutoff_hz) spec.cutoff_hz = *a.cutoff_hz;
    if (a.smear_ms) spec.smear_ms = *a.smear_ms;
    spec.validate();
    source = data::parse_source_class(a.source);
    if (a.num_clips == 0) throw ContractError("--num-clips must be >= 1");
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  log_config("synth", {{"out", a.out},
                       {"num_clips", a.num_clips},
                       {"degradation", a.degradation},
                       {"source", a.source},
                       {"seed", a.seed},
                       {"clip_len", a.clip_len},
                       {"noise_db", spec.noise_db},
                       {"cutoff_hz", spec.cutoff_hz},
                       {"smear_ms", spec.smear_ms}});
  const auto manifest = data::write_synthetic_corpus(a.out, spec, source, a.num_clips, a.clip_len);
  std::cout << "wrote " << manifest.pairs.size() << " pairs to " << a.out << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
  std::string config_file;
  bool toy = false;
  CLI::Option* manifest = nullptr;
  CLI::Option* source = nullptr;
  CLI::Option* steps = nullptr;
  CLI::Option* seed = nullptr;
  CLI::Option* out = nullptr;
  CLI::Option* batch = nullptr;
  CLI::Option* every = nullptr;
  CLI::Option* resume = nullptr;
  CLI::Option* lr = nullptr;
  CLI::Option* calib = nullptr;
  CLI::Option* swap = nullptr;
  CLI::Option* loss_csv = nullptr;
  train::TrainConfig flags;  // flag values (applied only when given)
};

train::TrainConfig resolve_train(const TrainArgs& a) {
  train::TrainConfig c;
  try {
    if (a.toy) {
      c.generator = model::GeneratorConfig::toy();
      c.discriminators = model::EnsembleConfig::toy();
    }
    if (!a.config_file.empty()) {
      std::ifstream f(a.config_file);
      if (!f) throw IoError("config " + a.config_file + ": cannot open");
      json j;
      try {
        j = json::parse(f);
      } catch (const json::exception& e) {
        throw UsageError("config " + a.config_file + ": " + e.what());
      }
      // Keys missing from the file keep the (possibly toy) defaults.
      json merged = train::to_json(c);
      merged.merge_patch(j);
      c = train::train_config_from_json(merged);
    }
    const auto& f = a.flags;
    if (a.manifest->count()) c.manifest = f.manifest;
    if (a.source->count()) c.source = f.source;
    if (a.steps->count()) c.steps = f.steps;
    if (a.seed->count()) c.seed = f.seed;
    if (a.out->count()) c.out = f.out;
    if (a.batch->count()) c.batch_size = f.batch_size;
    if (a.every->count()) c.checkpoint_every = f.checkpoint_every;
    if (a.resume->count()) c.resume = f.resume;
    if (a.lr->count()) c.adam.lr = f.adam.lr;
    if (a.calib->count()) c.calibration_window = f.calibration_window;
    if (a.swap->count()) c.swap_prob = f.swap_prob;
    if (a.loss_csv->count()) c.loss_csv = f.loss_csv;
    c.validate();
    if (c.manifest.empty()) throw ContractError("--manifest is required (flag or config file)");
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  return c;
}

int run_train(const TrainArgs& a) {
  const auto cfg = resolve_train(a);
  log_config("train", train::to_json(cfg));
  const auto result = train::run_training(cfg);
  if (!result.history.empty()) {
    const auto& last = result.history.back();
    std::cout << "step " << last.step << " L_G=" << last.l_g << " L_D=" << last.l_d << " L_FM=" << last.l_fm
              << " L_mel=" << last.l_mel << "\n";
  }
  std::cout << "checkpoint: " << result.checkpoint.string() << "\nlosses: " << result.loss_csv.string() << "\n";
  return kExitOk;
}

// ----------------------------------------------------------------- enhance

struct EnhanceArgs {
  std::string ckpt;
  std::string in;
  std::string out;
};

int run_enhance(const EnhanceArgs& a) {
  log_config("enhance", {{"ckpt", a.ckpt}, {"in", a.in}, {"out", a.out}});
  const auto generator = train::load_generator(a.ckpt);
  const auto input = data::read_wav(a.in);
  const auto output = train::enhance(generator, input);
  data::write_wav(a.out, output, data::WavFormat::kFloat32);
  std::cout << "wrote " << a.out << " (" << output.size() << " samples @ 16000 Hz)\n";
  return kExitOk;
}

// ----------------------------------------------------------------- analyze

struct AnalyzeArgs {
  std::string est;
  std::string ref;
  std::string report;
  std::string csv;
  std::string corpus_id;
  analyze::RolloffParams rolloff;
  analyze::OnsetParams onsets;
};

analyze::PairingResult load_pairs(const AnalyzeArgs& a, analyze::MetricsReport& report) {
  auto paired = analyze::pair_directories(a.est, a.ref);
  report.corpus_id = a.corpus_id.empty() ? std::filesystem::path(a.ref).filename().string() : a.corpus_id;
  report.unpaired = paired.unpaired;
  for (const auto& u : paired.unpaired) log::warn("unpaired: " + u);
  for (const auto& f : paired.failed) log::error("failed to load " + f);
  return paired;
}

int finish(const analyze::PairingResult& paired) {
  if (!paired.failed.empty()) {
    std::cerr << paired.failed.size() << " pair(s) failed to load\n";
    return kExitFailure;
  }
  return kExitOk;
}

int run_analyze_rolloff(const AnalyzeArgs& a) {
  if (!(a.rolloff.percent > 0.0 && a.rolloff.percent <= 1.0)) throw UsageError("--percent must lie in (0, 1]");
  log_config("analyze rolloff", {{"est", a.est}, {"ref", a.ref}, {"report", a.report}, {"csv", a.csv},
                                 {"params", analyze::to_json(a.rolloff)}});
  analyze::MetricsReport report;
  const auto paired = load_pairs(a, report);
  report.parameters = {{"rolloff", analyze::to_json(a.rolloff)}};
  std::map<std::string, std::vector<analyze::TrackPair>> by_source;
  for (const auto& p : paired.pairs) by_source[p.source].push_back(p);
  for (const auto& [source, pairs] : by_source) {
    report.rolloff[source] = analyze::rolloff_error_report(pairs, a.rolloff);
  }
  analyze::emit_report(report, a.report, a.csv);
  for (const auto& [source, r] : report.rolloff) {
    std::cout << source << ": mean_signed_cents=" << fmt_opt(r.mean_signed_cents)
              << " mean_abs_cents=" << fmt_opt(r.mean_abs_cents) << " analyzed=" << r.analyzed
              << " gated=" << r.gated << " skipped=" << r.skipped << "\n";
  }
  return finish(paired);
}

int run_analyze_onsets(const AnalyzeArgs& a) {
  log_config("analyze onsets", {{"est", a.est}, {"ref", a.ref}, {"report", a.report},
                                {"params", analyze::to_json(a.onsets)}});
  analyze::MetricsReport report;
  const auto paired = load_pairs(a, report);
  report.parameters = {{"onsets", analyze::to_json(a.onsets)}};
  if (paired.pairs.empty()) throw std::runtime_error("no pairs");
  report.onsets = analyze::onset_report(paired.pairs, a.onsets);
  analyze::emit_report(report, a.report);
  for (const auto& [source, c] : report.onsets) {
    std::cout << source << ": tp=" << c.tp << " fp=" << c.fp << " fn=" << c.fn << " f1=" << fmt(c.f1) << "\n";
  }
  return finish(paired);
}

// ------------------------------------------------------------------ abtest

struct AbArgs {
  std::size_t successes = 0;
  std::size_t trials = 0;
  double p0 = 0.5;
};

int run_abtest(const AbArgs& a) {
  double p;
  try {
    p = analyze::binomial_test_two_tailed(a.successes, a.trials, a.p0);
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  std::cout << fmt(p) << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"MSG: post-separation enhancement with a GAN generator, plus artifact metrics"};
  app.set_version_flag("--version", analyze::kToolVersion);
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "debug, info, warn or error")
      ->check(CLI::IsMember({"debug", "info", "warn", "error"}))
      ->capture_default_str();

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "write a synthetic truth/estimate corpus with a manifest");
  s->add_option("--out", synth.out, "output directory")->required();
  s->add_option("--num-clips", synth.num_clips, "number of clip pairs")->capture_default_str();
  s->add_option("--degradation", synth.degradation, "hfnoise, lowpass or smear")
      ->check(CLI::IsMember({"hfnoise", "lowpass", "smear"}))
      ->capture_default_str();
  s->add_option("--source", synth.source, "bass, drums or vocals")
      ->check(CLI::IsMember({"bass", "drums", "vocals"}))
      ->capture_default_str();
  s->add_option("--seed", synth.seed, "random seed")->capture_default_str();
  s->add_option("--clip-len", synth.clip_len, "samples per clip at 16 kHz")->capture_default_str();
  s->add_option("--noise-db", synth.noise_db, "hfnoise level relative to clip RMS (default -12)");
  s->add_option("--cutoff-hz", synth.cutoff_hz, "hfnoise edge (default 3000) or lowpass cutoff (default 400)");
  s->add_option("--smear-ms", synth.smear_ms, "smear window width (default 8)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "adversarial training from a manifest");
  t->add_option("--config", tr.config_file, "JSON training config; flags override it");
  t->add_flag("--toy", tr.toy, "start from the toy generator/discriminator sizes");
  tr.manifest = t->add_option("--manifest", tr.flags.manifest, "dataset manifest JSON");
  tr.source = t->add_option("--source", tr.flags.source, "source class to train on")
                  ->check(CLI::IsMember({"bass", "drums", "vocals"}))
                  ->capture_default_str();
  tr.steps = t->add_option("--steps", tr.flags.steps, "training steps")->capture_default_str();
  tr.seed = t->add_option("--seed", tr.flags.seed, "random seed")->capture_default_str();
  tr.out = t->add_option("--out", tr.flags.out, "checkpoint path")->capture_default_str();
  tr.batch = t->add_option("--batch-size", tr.flags.batch_size, "clips per step")->capture_default_str();
  tr.every = t->add_option("--checkpoint-every", tr.flags.checkpoint_every, "steps between checkpoints (0: end only)")
                 ->capture_default_str();
  tr.resume = t->add_option("--resume", tr.flags.resume, "continue from a training checkpoint");
  tr.lr = t->add_option("--lr", tr.flags.adam.lr, "Adam learning rate (betas 0.5, 0.9)")->capture_default_str();
  tr.calib = t->add_option("--calibration-window", tr.flags.calibration_window, "steps before loss weights freeze")
                 ->capture_default_str();
  tr.swap = t->add_option("--swap-prob", tr.flags.swap_prob, "probability of feeding the ground truth as input")
                ->capture_default_str();
  tr.loss_csv = t->add_option("--loss-csv", tr.flags.loss_csv, "loss curve CSV (default <out>.losses.csv)");

  EnhanceArgs en;
  auto* e = app.add_subcommand("enhance", "apply a trained generator to a WAV file");
  e->add_option("--ckpt", en.ckpt, "training checkpoint")->required();
  e->add_option("--in", en.in, "input WAV")->required();
  e->add_option("--out", en.out, "output float32 WAV at 16 kHz")->required();

  AnalyzeArgs an;
  auto* a = app.add_subcommand("analyze", "artifact metrics over paired directories");
  a->require_subcommand(1);
  auto add_common = [&an](CLI::App* sub) {
    sub->add_option("--est", an.est, "estimate directory (<track>/<source>.wav)")->required();
    sub->add_option("--ref", an.ref, "reference directory (<track>/<source>.wav)")->required();
    sub->add_option("--report", an.report, "output JSON report")->required();
    sub->add_option("--corpus-id", an.corpus_id, "corpus id recorded in the report (default: ref dir name)");
  };
  auto* ar = a->add_subcommand("rolloff", "spectral rolloff error in cents");
  add_common(ar);
  ar->add_option("--csv", an.csv, "per-frame CSV output");
  ar->add_option("--percent", an.rolloff.percent, "rolloff energy fraction")->capture_default_str();
  ar->add_option("--gate-db", an.rolloff.gate_db, "reference RMS gate in dBFS")->capture_default_str();
  ar->add_option("--hop", an.rolloff.hop, "hop in samples (32 ms at 16 kHz)")->capture_default_str();
  auto* ao = a->add_subcommand("onsets", "onset F1 against the reference");
  add_common(ao);
  ao->add_option("--threshold", an.onsets.threshold, "onset strength threshold")->capture_default_str();

  AbArgs ab;
  auto* b = app.add_subcommand("abtest", "two-tailed exact binomial test");
  b->add_option("--successes", ab.successes, "preference count")->required();
  b->add_option("--trials", ab.trials, "number of trials")->required();
  b->add_option("--p0", ab.p0, "null success probability")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  log::set_level(log_level == "debug"  ? log::Level::kDebug
                 : log_level == "warn" ? log::Level::kWarn
                 : log_level == "error" ? log::Level::kError
                                        : log::Level::kInfo);
  try {
    if (s->parsed()) return run_synth(synth);
    if (t->parsed()) return run_train(tr);
    if (e->parsed()) return run_enhance(en);
    if (ar->parsed()) return run_analyze_rolloff(an);
    if (ao->parsed()) return run_analyze_onsets(an);
    if (b->parsed()) return run_abtest(ab);
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace msg::cli

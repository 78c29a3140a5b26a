#include "msg/losses.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>

#include "msg/error.hpp"
#include "msg/log.hpp"
#include "msg/spectral_ops.hpp"

namespace msg::losses {

using ad::DiffArray;
using detail::require;
using nlohmann::json;

namespace {

void check_pairing(std::span<const DiscriminatorOutput> real, std::span<const DiscriminatorOutput> fake,
                   const char* who) {
  if (real.size() != fake.size()) {
    detail::contract_fail(std::string(who) + ": " + std::to_string(real.size()) + " real outputs vs " +
                          std::to_string(fake.size()) + " fake outputs");
  }
  require(!real.empty(), std::string(who) + ": empty ensemble");
}

}  // namespace

DiffArray generator_adv_loss(std::span<const DiscriminatorOutput> fake) {
  require(!fake.empty(), "generator_adv_loss: empty ensemble");
  std::vector<DiffArray> terms;
  for (const auto& o : fake) terms.push_back(ad::mean(ad::square(ad::add_scalar(o.score, -1.0))));
  return ad::mul_scalar(ad::add_n(terms), 1.0 / static_cast<double>(terms.size()));
}

DiffArray discriminator_adv_loss(std::span<const DiscriminatorOutput> real,
                                 std::span<const DiscriminatorOutput> fake) {
  check_pairing(real, fake, "discriminator_adv_loss");
  std::vector<DiffArray> terms;
  for (std::size_t k = 0; k < real.size(); ++k) {
    terms.push_back(ad::mean(ad::square(ad::add_scalar(real[k].score, -1.0))));
    terms.push_back(ad::mean(ad::square(fake[k].score)));
  }
  return ad::add_n(terms);
}

DiffArray feature_matching_loss(std::span<const DiscriminatorOutput> real,
                                std::span<const DiscriminatorOutput> fake) {
  check_pairing(real, fake, "feature_matching_loss");
  std::vector<DiffArray> members;
  for (std::size_t k = 0; k < real.size(); ++k) {
    const auto& rf = real[k].features;
    const auto& ff = fake[k].features;
    if (rf.size() != ff.size() || rf.empty()) {
      detail::contract_fail("feature_matching_loss: member " + std::to_string(k) + " has " +
                            std::to_string(rf.size()) + " real vs " + std::to_string(ff.size()) + " fake layers");
    }
    std::vector<DiffArray> layers;
    for (std::size_t l = 0; l < rf.size(); ++l) {
      if (rf[l].shape() != ff[l].shape()) {
        detail::contract_fail("feature_matching_loss: member " + std::to_string(k) + " layer " + std::to_string(l) +
                              " shapes " + ad::shape_string(rf[l].shape()) + " vs " +
                              ad::shape_string(ff[l].shape()));
      }
      layers.push_back(ad::mean(ad::abs(ad::sub(ff[l], rf[l]))));
    }
    members.push_back(ad::mul_scalar(ad::add_n(layers), 1.0 / static_cast<double>(layers.size())));
  }
  return ad::mul_scalar(ad::add_n(members), 1.0 / static_cast<double>(members.size()));
}

// ------------------------------------------------------------------ mel loss

json to_json(const MelLossConfig& c) {
  json scales = json::array();
  for (const auto& s : c.scales) {
    scales.push_back({{"fft_size", s.stft.fft_size}, {"window_size", s.stft.window_size}, {"hop", s.stft.hop},
                      {"n_mels", s.n_mels}});
  }
  return {{"scales", scales}, {"sample_rate", c.sample_rate}, {"eps", c.eps}};
}

MelLossConfig mel_loss_config_from_json(const json& j) {
  MelLossConfig c;
  if (j.contains("scales")) {
    c.scales.clear();
    for (const auto& s : j.at("scales")) {
      MelScale m;
      m.stft.fft_size = s.at("fft_size").get<std::size_t>();
      m.stft.window_size = s.value("window_size", m.stft.fft_size);
      m.stft.hop = s.at("hop").get<std::size_t>();
      m.n_mels = s.value("n_mels", m.n_mels);
      c.scales.push_back(m);
    }
  }
  c.sample_rate = j.value("sample_rate", c.sample_rate);
  c.eps = j.value("eps", c.eps);
  return c;
}

MultiScaleMelLoss::MultiScaleMelLoss(MelLossConfig config) : config_(std::move(config)) {
  require(!config_.scales.empty(), "MultiScaleMelLoss: need at least one scale");
  require(config_.eps > 0.0, "MultiScaleMelLoss: eps must be positive");
  for (const auto& s : config_.scales) {
    dsp::validate(s.stft);
    const auto fb = dsp::mel_filterbank(config_.sample_rate, s.stft.fft_size, s.n_mels, 0.0, config_.sample_rate / 2);
    filterbanks_.push_back(ad::filterbank_matrix(fb));
  }
}

DiffArray MultiScaleMelLoss::scale_loss(std::size_t i, const DiffArray& estimate, const DiffArray& reference) const {
  const auto& stft = config_.scales[i].stft;
  auto log_mel = [&](const DiffArray& x) {
    return ad::log(ad::add_scalar(ad::mel_project(ad::stft_power(x, stft), filterbanks_[i]), config_.eps));
  };
  DiffArray ref;
  {
    ad::Tape::Pause pause;
    ref = log_mel(reference);
  }
  return ad::mean(ad::abs(ad::sub(log_mel(estimate), ref)));
}

DiffArray MultiScaleMelLoss::operator()(const DiffArray& estimate, const DiffArray& reference) const {
  if (estimate.shape() != reference.shape()) {
    detail::contract_fail("multiscale_mel_loss: shape mismatch " + ad::shape_string(estimate.shape()) + " vs " +
                          ad::shape_string(reference.shape()));
  }
  std::vector<DiffArray> terms;
  for (std::size_t i = 0; i < config_.scales.size(); ++i) terms.push_back(scale_loss(i, estimate, reference));
  return ad::mul_scalar(ad::add_n(terms), 1.0 / static_cast<double>(terms.size()));
}

std::vector<double> MultiScaleMelLoss::per_scale(const DiffArray& estimate, const DiffArray& reference) const {
  ad::Tape::Pause pause;
  std::vector<double> out;
  for (std::size_t i = 0; i < config_.scales.size(); ++i) out.push_back(scale_loss(i, estimate, reference).item());
  return out;
}

DiffArray multiscale_mel_loss(const DiffArray& estimate, const DiffArray& reference, const MelLossConfig& config) {
  return MultiScaleMelLoss(config)(estimate, reference);
}

// ---------------------------------------------------------------- balancing

LossWeights weights_from_means(const std::array<double, 3>& means) {
  static constexpr const char* kNames[3] = {"adv", "fm", "mel"};
  LossWeights w;
  w.frozen = true;
  w.running_mean = means;
  double* slots[3] = {&w.w_adv, &w.w_fm, &w.w_mel};
  for (std::size_t i = 0; i < 3; ++i) {
    const double m = means[i];
    if (!(m > 0.0)) {
      log::warn(std::string("loss term '") + kNames[i] + "' has non-positive calibration mean; weight clamped to " +
                std::to_string(kWeightMax));
      *slots[i] = kWeightMax;
      continue;
    }
    *slots[i] = std::clamp(1.0 / m, kWeightMin, kWeightMax);
  }
  return w;
}

LossBalancer::LossBalancer(std::size_t window) : window_(window) {
  if (window_ == 0) weights_ = weights_from_means({1.0, 1.0, 1.0});
}

void LossBalancer::observe(double adv, double fm, double mel) {
  if (weights_.frozen) return;
  sums_[0] += adv;
  sums_[1] += fm;
  sums_[2] += mel;
  ++count_;
  const double n = static_cast<double>(count_);
  weights_.running_mean = {sums_[0] / n, sums_[1] / n, sums_[2] / n};
  if (count_ >= window_) weights_ = weights_from_means(weights_.running_mean);
}

json LossBalancer::state() const {
  return {{"window", window_},
          {"count", count_},
          {"sums", sums_},
          {"w_adv", weights_.w_adv},
          {"w_fm", weights_.w_fm},
          {"w_mel", weights_.w_mel},
          {"frozen", weights_.frozen},
          {"running_mean", weights_.running_mean}};
}

void LossBalancer::restore(const json& s) {
  window_ = s.at("window").get<std::size_t>();
  count_ = s.at("count").get<std::size_t>();
  sums_ = s.at("sums").get<std::array<double, 3>>();
  weights_.w_adv = s.at("w_adv").get<double>();
  weights_.w_fm = s.at("w_fm").get<double>();
  weights_.w_mel = s.at("w_mel").get<double>();
  weights_.frozen = s.at("frozen").get<bool>();
  weights_.running_mean = s.at("running_mean").get<std::array<double, 3>>();
}

LossWeights balance_weights(std::span<const std::array<double, 3>> observed, std::size_t window) {
  require(window >= 1, "balance_weights: window must be >= 1");
  if (observed.size() < window) {
    detail::contract_fail("balance_weights: " + std::to_string(observed.size()) +
                          " observations, calibration window needs " + std::to_string(window));
  }
  LossBalancer b(window);
  for (std::size_t i = 0; i < window; ++i) b.observe(observed[i][0], observed[i][1], observed[i][2]);
  return b.weights();
}

// ---------------------------------------------------------------------- CSV

namespace {

constexpr const char* kCsvHeader = "step,L_G,L_D,L_FM,L_mel,w_adv,w_fm,w_mel";

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

LossCsvWriter::LossCsvWriter(const std::filesystem::path& path, bool append) : path_(path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const bool fresh = !append || !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  out_.open(path, fresh ? std::ios::trunc : std::ios::app);
  if (!out_) throw IoError("loss csv " + path.string() + ": cannot open for writing");
  if (fresh) out_ << kCsvHeader << '\n';
}

void LossCsvWriter::write(const LossRow& r) {
  out_ << r.step << ',' << fmt(r.l_g) << ',' << fmt(r.l_d) << ',' << fmt(r.l_fm) << ',' << fmt(r.l_mel) << ','
       << fmt(r.weights.w_adv) << ',' << fmt(r.weights.w_fm) << ',' << fmt(r.weights.w_mel) << '\n';
  out_.flush();
  if (!out_) throw IoError("loss csv " + path_.string() + ": write failed");
}

std::vector<LossRow> read_loss_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("loss csv " + path.string() + ": cannot open");
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) {
    throw IoError("loss csv " + path.string() + ": missing or unexpected header");
  }
  std::vector<LossRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    LossRow r;
    double v[7];
    unsigned long long step = 0;
    if (std::sscanf(line.c_str(), "%llu,%lf,%lf,%lf,%lf,%lf,%lf,%lf", &step, &v[0], &v[1], &v[2], &v[3], &v[4],
                    &v[5], &v[6]) != 8) {
      throw IoError("loss csv " + path.string() + ": malformed row '" + line + "'");
    }
    r.step = step;
    r.l_g = v[0];
    r.l_d = v[1];
    r.l_fm = v[2];
    r.l_mel = v[3];
    r.weights.w_adv = v[4];
    r.weights.w_fm = v[5];
    r.weights.w_mel = v[6];
    rows.push_back(r);
  }
  return rows;
}

}  // namespace msg::losses

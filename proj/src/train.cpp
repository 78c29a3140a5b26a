#include "msg/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "msg/error.hpp"
#include "msg/log.hpp"
#include "msg/resample.hpp"
#include "msg/rng.hpp"

namespace msg::train {

using ad::DiffArray;
using detail::require;
using nlohmann::json;

// --------------------------------------------------------------------- Adam

AdamState make_adam(const model::ParameterList& params, const AdamConfig& config) {
  AdamState s;
  s.config = config;
  for (const auto& p : params) {
    s.m.emplace_back(p.value.size(), 0.0);
    s.v.emplace_back(p.value.size(), 0.0);
  }
  return s;
}

void adam_step(const model::ParameterList& params, AdamState& state) {
  if (params.size() != state.m.size()) {
    detail::contract_fail("adam_step: " + std::to_string(params.size()) + " parameters but optimizer tracks " +
                          std::to_string(state.m.size()));
  }
  std::vector<std::vector<double>> grads(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].value.size() != state.m[i].size()) {
      detail::contract_fail("adam_step: shape mismatch for " + params[i].name);
    }
    grads[i] = params[i].value.grad();
    for (std::size_t j = 0; j < grads[i].size(); ++j) {
      if (!std::isfinite(grads[i][j])) {
        throw DomainError("adam_step: non-finite gradient in parameter " + params[i].name + " at index " +
                          std::to_string(j));
      }
    }
  }
  const auto& c = state.config;
  state.t += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto value = params[i].value;
    auto w = value.mutable_values();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double g = grads[i][j];
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
      w[j] -= c.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + c.eps);
    }
  }
}

// ------------------------------------------------------------------- config

void TrainConfig::validate() const {
  require(steps >= 1, "TrainConfig: steps must be >= 1");
  require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
  require(clip_len >= 1, "TrainConfig: clip_len must be >= 1");
  require(swap_prob >= 0.0 && swap_prob <= 1.0, "TrainConfig: swap_prob must lie in [0, 1]");
  require(adam.lr > 0.0, "TrainConfig: learning rate must be positive");
  require(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0,
          "TrainConfig: Adam betas must lie in [0, 1)");
  require(!out.empty(), "TrainConfig: output checkpoint path is empty");
  generator.validate();
  data::parse_source_class(source);
}

std::filesystem::path TrainConfig::loss_csv_path() const {
  return loss_csv.empty() ? std::filesystem::path(out + ".losses.csv") : std::filesystem::path(loss_csv);
}

json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"calibration_window", c.calibration_window},
          {"checkpoint_every", c.checkpoint_every},
          {"clip_len", c.clip_len},
          {"swap_prob", c.swap_prob},
          {"adam", {{"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
          {"generator", model::to_json(c.generator)},
          {"discriminators", model::to_json(c.discriminators)},
          {"mel", losses::to_json(c.mel)},
          {"manifest", c.manifest},
          {"source", c.source},
          {"out", c.out},
          {"loss_csv", c.loss_csv},
          {"resume", c.resume}};
}

TrainConfig train_config_from_json(const json& j) {
  require(j.is_object(), "train config: expected a JSON object");
  static const std::set<std::string> kKnown = {
      "steps",     "batch_size", "seed",          "calibration_window", "checkpoint_every", "clip_len",
      "swap_prob", "adam",       "generator",     "discriminators",     "mel",              "manifest",
      "source",    "out",        "loss_csv",      "resume"};
  for (const auto& [key, _] : j.items()) {
    if (!kKnown.count(key)) detail::contract_fail("train config: unknown key '" + key + "'");
  }
  TrainConfig c;
  try {
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.calibration_window = j.value("calibration_window", c.calibration_window);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.clip_len = j.value("clip_len", c.clip_len);
    c.swap_prob = j.value("swap_prob", c.swap_prob);
    if (j.contains("adam")) {
      const auto& a = j.at("adam");
      c.adam.lr = a.value("lr", c.adam.lr);
      c.adam.beta1 = a.value("beta1", c.adam.beta1);
      c.adam.beta2 = a.value("beta2", c.adam.beta2);
      c.adam.eps = a.value("eps", c.adam.eps);
    }
    if (j.contains("generator")) c.generator = model::generator_config_from_json(j.at("generator"));
    if (j.contains("discriminators")) c.discriminators = model::ensemble_config_from_json(j.at("discriminators"));
    if (j.contains("mel")) c.mel = losses::mel_loss_config_from_json(j.at("mel"));
    c.manifest = j.value("manifest", c.manifest);
    c.source = j.value("source", c.source);
    c.out = j.value("out", c.out);
    c.loss_csv = j.value("loss_csv", c.loss_csv);
    c.resume = j.value("resume", c.resume);
  } catch (const json::exception& e) {
    detail::contract_fail(std::string("train config: ") + e.what());
  }
  return c;
}

// ------------------------------------------------------------------ trainer

namespace {

double grad_norm(const DiffArray& p) {
  if (!p.has_grad()) return 0.0;
  double acc = 0.0;
  for (double g : p.grad()) acc += g * g;
  return std::sqrt(acc);
}

double total_grad_norm(const model::ParameterList& params) {
  double acc = 0.0;
  for (const auto& p : params) {
    const double n = grad_norm(p.value);
    acc += n * n;
  }
  return std::sqrt(acc);
}

std::vector<double> grad_norms(const model::ParameterList& params) {
  std::vector<double> out;
  for (const auto& p : params) out.push_back(grad_norm(p.value));
  return out;
}

// Turns discriminator gradients off for the generator sub-step and back on
// even when the sub-step throws.
class FreezeGuard {
 public:
  explicit FreezeGuard(const model::ParameterList& params) : params_(params) {
    model::set_requires_grad(params_, false);
  }
  ~FreezeGuard() { model::set_requires_grad(params_, true); }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  const model::ParameterList& params_;
};

void append_adam(model::Checkpoint& ckpt, const std::string& prefix, const model::ParameterList& params,
                 const AdamState& s) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& shape = params[i].value.shape();
    ckpt.tensors.push_back({prefix + ".m." + params[i].name, shape, s.m[i]});
    ckpt.tensors.push_back({prefix + ".v." + params[i].name, shape, s.v[i]});
  }
}

void restore_adam(const model::Checkpoint& ckpt, const std::string& prefix, const model::ParameterList& params,
                  AdamState& s) {
  s = make_adam(params, s.config);
  s.t = ckpt.meta.at(prefix).at("t").get<std::uint64_t>();
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (const char* which : {".m.", ".v."}) {
      const auto* t = ckpt.find(prefix + which + params[i].name);
      if (t == nullptr || t->values.size() != params[i].value.size()) {
        throw IoError("checkpoint: missing or mismatched optimizer state for " + params[i].name);
      }
      (which[1] == 'm' ? s.m[i] : s.v[i]) = t->values;
    }
  }
}

}  // namespace

Trainer::Trainer(TrainConfig config, std::vector<data::TrainingExample> examples)
    : config_(std::move(config)),
      examples_(std::move(examples)),
      generator_(config_.generator, mix_seed(config_.seed, 1)),
      ensemble_(config_.discriminators, mix_seed(config_.seed, 2)),
      mel_loss_(config_.mel),
      balancer_(config_.calibration_window) {
  config_.validate();
  require(!examples_.empty(), "Trainer: no training examples");
  const std::size_t len = examples_.front().target.size();
  for (const auto& e : examples_) {
    if (e.input.size() != len || e.target.size() != len) {
      detail::contract_fail("Trainer: all examples must share one length (" + std::to_string(len) + " samples)");
    }
  }
  adam_g_ = make_adam(generator_.parameters(), config_.adam);
  adam_d_ = make_adam(ensemble_.parameters(), config_.adam);
}

std::vector<std::size_t> Trainer::epoch_order(std::size_t epoch) const {
  std::vector<std::size_t> order(examples_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(config_.seed, 0x6570ULL, epoch));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

Batch Trainer::next_batch() const {
  const std::size_t n = examples_.size();
  const std::size_t len = examples_.front().target.size();
  const std::size_t b = config_.batch_size;
  std::vector<double> in(b * len), tg(b * len);
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t g = step_ * b + i;
    if (g / n != cached_epoch) {
      cached_epoch = g / n;
      order = epoch_order(cached_epoch);
    }
    Rng rng(mix_seed(config_.seed, 0x73776170ULL, g));
    const auto ex = data::swap_augment(examples_[order[g % n]], config_.swap_prob, rng);
    const double gain = data::peak_gain(ex.input.samples);
    for (std::size_t t = 0; t < len; ++t) {
      in[i * len + t] = ex.input.samples[t] * gain;
      tg[i * len + t] = ex.target.samples[t] * gain;
    }
  }
  return {DiffArray({b, 1, len}, std::move(in)), DiffArray({b, 1, len}, std::move(tg))};
}

StepLosses Trainer::step() { return train_step(next_batch()); }

StepLosses Trainer::train_step(const Batch& batch) {
  try {
    return run_step(batch);
  } catch (const DomainError& e) {
    // Errors raised inside an op (a NaN reaching log, say) get the same
    // recovery pointer as a non-finite loss.
    const std::string what = e.what();
    if (what.find("last good checkpoint") != std::string::npos) throw;
    throw DomainError(what + " (step " + std::to_string(step_ + 1) + "; last good checkpoint: " +
                      (last_checkpoint_.empty() ? "none" : last_checkpoint_) + ")");
  }
}

StepLosses Trainer::run_step(const Batch& batch) {
  const auto gp = generator_.parameters();
  const auto dp = ensemble_.parameters();
  model::zero_grad(gp);
  model::zero_grad(dp);

  StepLosses out;
  out.step = step_ + 1;
  out.weights = balancer_.weights();
  const auto& w = out.weights;

  auto check = [&](double v, const char* term) {
    if (!std::isfinite(v)) {
      throw DomainError(std::string("non-finite ") + term + " loss at step " + std::to_string(out.step) +
                        "; last good checkpoint: " + (last_checkpoint_.empty() ? "none" : last_checkpoint_));
    }
  };

  ad::Tape g_tape;
  DiffArray fake;
  {
    ad::Tape::Scope scope(g_tape);
    fake = generator_.forward(batch.input);
  }

  // Discriminator update on the detached estimate.
  {
    ad::Tape d_tape;
    ad::Tape::Scope scope(d_tape);
    const auto real_out = ensemble_.forward(batch.target);
    const auto fake_out = ensemble_.forward(fake.detached());
    const DiffArray l_d = losses::discriminator_adv_loss(real_out, fake_out);
    out.l_d = l_d.item();
    check(out.l_d, "discriminator");
    d_tape.backward(l_d);
  }
  audit_.d_grad_in_d_step = total_grad_norm(dp);
  audit_.g_grad_in_d_step = total_grad_norm(gp);
  audit_.d_param_grad_norms = grad_norms(dp);
  adam_step(dp, adam_d_);
  model::zero_grad(dp);

  // Generator update; discriminator weights act as constants.
  {
    FreezeGuard freeze(dp);
    ad::Tape::Scope scope(g_tape);
    const auto fake_out = ensemble_.forward(fake);
    std::vector<model::DiscriminatorOutput> real_out;
    {
      ad::Tape::Pause pause;
      real_out = ensemble_.forward(batch.target);
    }
    const DiffArray l_g = losses::generator_adv_loss(fake_out);
    const DiffArray l_fm = losses::feature_matching_loss(real_out, fake_out);
    const DiffArray l_mel = mel_loss_(fake, batch.target);
    const std::vector<DiffArray> terms{ad::mul_scalar(l_g, w.w_adv), ad::mul_scalar(l_fm, w.w_fm),
                                       ad::mul_scalar(l_mel, w.w_mel)};
    const DiffArray total = ad::add_n(terms);
    out.l_g = l_g.item();
    out.l_fm = l_fm.item();
    out.l_mel = l_mel.item();
    out.total = total.item();
    check(out.l_g, "generator adversarial");
    check(out.l_fm, "feature matching");
    check(out.l_mel, "mel");
    check(out.total, "generator total");
    g_tape.backward(total);
  }
  audit_.d_grad_in_g_step = total_grad_norm(dp);
  audit_.g_grad_in_g_step = total_grad_norm(gp);
  audit_.g_param_grad_norms = grad_norms(gp);
  adam_step(gp, adam_g_);
  model::zero_grad(gp);

  balancer_.observe(out.l_g, out.l_fm, out.l_mel);
  ++step_;
  return out;
}

void Trainer::save(const std::filesystem::path& path) const {
  model::Checkpoint ckpt;
  const auto gp = generator_.parameters();
  const auto dp = ensemble_.parameters();
  ckpt.meta = {{"format", "msg-train"},
               {"config", to_json(config_)},
               {"generator", model::to_json(config_.generator)},
               {"step", step_},
               {"balancer", balancer_.state()},
               {"loss_weights",
                {{"w_adv", balancer_.weights().w_adv},
                 {"w_fm", balancer_.weights().w_fm},
                 {"w_mel", balancer_.weights().w_mel},
                 {"frozen", balancer_.frozen()}}},
               {"adam_g", {{"t", adam_g_.t}}},
               {"adam_d", {{"t", adam_d_.t}}}};
  model::append_parameters(ckpt, gp);
  model::append_parameters(ckpt, dp);
  append_adam(ckpt, "adam_g", gp, adam_g_);
  append_adam(ckpt, "adam_d", dp, adam_d_);
  model::save_checkpoint(path, ckpt);
  last_checkpoint_ = path.string();
}

void Trainer::load(const std::filesystem::path& path) {
  const auto ckpt = model::load_checkpoint(path);
  try {
    if (ckpt.meta.value("format", std::string()) != "msg-train") {
      throw IoError("checkpoint " + path.string() + ": not a training checkpoint");
    }
    if (ckpt.meta.at("generator") != model::to_json(config_.generator)) {
      detail::contract_fail("checkpoint " + path.string() + ": generator config differs from the training config");
    }
    const auto gp = generator_.parameters();
    const auto dp = ensemble_.parameters();
    model::restore_parameters(ckpt, gp);
    model::restore_parameters(ckpt, dp);
    restore_adam(ckpt, "adam_g", gp, adam_g_);
    restore_adam(ckpt, "adam_d", dp, adam_d_);
    balancer_.restore(ckpt.meta.at("balancer"));
    step_ = ckpt.meta.at("step").get<std::size_t>();
  } catch (const json::exception& e) {
    throw IoError("checkpoint " + path.string() + ": corrupt metadata: " + e.what());
  }
  last_checkpoint_ = path.string();
}

// ------------------------------------------------------------- run_training

TrainResult run_training(const TrainConfig& cfg) {
  cfg.validate();
  require(!cfg.manifest.empty(), "run_training: no manifest given");
  if (!std::filesystem::exists(cfg.manifest)) throw IoError("manifest " + cfg.manifest + ": not found");
  const auto manifest = data::read_manifest(cfg.manifest);
  auto examples = data::load_training_examples(manifest, data::parse_source_class(cfg.source), cfg.clip_len,
                                               cfg.out + ".dataset.json");
  if (examples.empty()) {
    throw IoError("manifest " + cfg.manifest + ": no usable " + cfg.source + " clips");
  }
  return run_training(cfg, std::move(examples));
}

TrainResult run_training(const TrainConfig& cfg, std::vector<data::TrainingExample> examples) {
  cfg.validate();
  Trainer trainer(cfg, std::move(examples));
  TrainResult result;
  result.checkpoint = cfg.out;
  result.loss_csv = cfg.loss_csv_path();

  std::vector<losses::LossRow> kept;
  if (!cfg.resume.empty()) {
    trainer.load(cfg.resume);
    if (trainer.steps_done() > cfg.steps) {
      detail::contract_fail("run_training: checkpoint is at step " + std::to_string(trainer.steps_done()) +
                            ", beyond the requested " + std::to_string(cfg.steps));
    }
    if (std::filesystem::exists(result.loss_csv)) {
      for (const auto& r : losses::read_loss_csv(result.loss_csv)) {
        if (r.step <= trainer.steps_done()) kept.push_back(r);
      }
    }
    log::info("resuming from " + cfg.resume + " at step " + std::to_string(trainer.steps_done()));
  }
  losses::LossCsvWriter csv(result.loss_csv, false);
  for (const auto& r : kept) csv.write(r);

  while (trainer.steps_done() < cfg.steps) {
    const bool was_frozen = trainer.balancer().frozen();
    const StepLosses s = trainer.step();
    csv.write({s.step, s.l_g, s.l_d, s.l_fm, s.l_mel, s.weights});
    result.history.push_back(s);
    if (!was_frozen && trainer.balancer().frozen()) {
      const auto& w = trainer.balancer().weights();
      log::info("loss weights frozen at step " + std::to_string(s.step) + ": w_adv=" + std::to_string(w.w_adv) +
                " w_fm=" + std::to_string(w.w_fm) + " w_mel=" + std::to_string(w.w_mel));
    }
    if (cfg.checkpoint_every > 0 && s.step % cfg.checkpoint_every == 0 && s.step < cfg.steps) trainer.save(cfg.out);
  }
  trainer.save(cfg.out);
  return result;
}

// ------------------------------------------------------------------ enhance

model::Generator load_generator(const std::filesystem::path& checkpoint) {
  const auto ckpt = model::load_checkpoint(checkpoint);
  if (!ckpt.meta.contains("generator")) throw IoError("checkpoint " + checkpoint.string() + ": no generator config");
  model::Generator g(model::generator_config_from_json(ckpt.meta.at("generator")), 0);
  model::restore_parameters(ckpt, g.parameters());
  return g;
}

dsp::AudioBuffer enhance(const model::Generator& generator, const dsp::AudioBuffer& audio) {
  require(!audio.samples.empty(), "enhance: empty audio");
  const auto normalized = data::peak_normalize(data::resample_to_16k(audio));
  const std::size_t len = normalized.size();
  const std::size_t run_len = std::max(len, generator.config().min_length());
  std::vector<double> x(run_len, 0.0);
  std::copy(normalized.samples.begin(), normalized.samples.end(), x.begin());
  ad::Tape::Pause pause;
  const DiffArray y = generator.forward(DiffArray({1, 1, run_len}, std::move(x)));
  dsp::AudioBuffer out;
  out.sample_rate = dsp::kCanonicalRate;
  out.samples.assign(y.values().begin(), y.values().begin() + static_cast<std::ptrdiff_t>(len));
  return out;
}

}  // namespace msg::train

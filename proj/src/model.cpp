#include "msg/model.hpp"

#include <algorithm>
#include <cmath>

#include "msg/error.hpp"
#include "msg/rng.hpp"
#include "msg/spectral_ops.hpp"

namespace msg::model {

using ad::DiffArray;
using detail::require;
using nlohmann::json;

namespace {

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
DiffArray init_uniform(ad::Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return DiffArray(std::move(shape), std::move(v), true);
}

Conv2dLayer make_conv2d(std::size_t cin, std::size_t cout, std::size_t kh, std::size_t kw, ad::Stride2 stride,
                        ad::Pad2 pad, Rng& rng) {
  const std::size_t fan_in = cin * kh * kw;
  Conv2dLayer layer;
  layer.weight = init_uniform({cout, cin, kh, kw}, fan_in, rng);
  layer.bias = init_uniform({cout}, fan_in, rng);
  layer.stride = stride;
  layer.pad = pad;
  return layer;
}

DiffArray apply(const Conv2dLayer& l, const DiffArray& x) { return ad::conv2d(x, l.weight, l.bias, l.stride, l.pad); }

void push_layer(ParameterList& out, const std::string& prefix, const Conv2dLayer& l) {
  out.push_back({prefix + ".weight", l.weight});
  out.push_back({prefix + ".bias", l.bias});
}

}  // namespace

std::size_t count_elements(const ParameterList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value.size();
  return n;
}

void set_requires_grad(const ParameterList& params, bool on) {
  for (const auto& p : params) {
    auto v = p.value;
    v.set_requires_grad(on);
  }
}

void zero_grad(const ParameterList& params) {
  for (const auto& p : params) {
    auto v = p.value;
    v.zero_grad();
  }
}

// ----------------------------------------------------------------- generator

void GeneratorConfig::validate() const {
  require(depth >= 1, "GeneratorConfig: depth must be >= 1");
  require(base_channels >= 1, "GeneratorConfig: base_channels must be >= 1");
  require(stride >= 1, "GeneratorConfig: stride must be >= 1");
  require(kernel >= stride, "GeneratorConfig: kernel must be >= stride");
  require((kernel - stride) % 2 == 0, "GeneratorConfig: kernel - stride must be even for length-preserving padding");
  require(growth >= 1, "GeneratorConfig: growth must be >= 1");
}

std::size_t GeneratorConfig::channels(std::size_t layer) const {
  std::size_t c = base_channels;
  for (std::size_t i = 0; i < layer; ++i) c *= growth;
  return c;
}

std::size_t GeneratorConfig::min_length() const {
  std::size_t m = 1;
  for (std::size_t i = 0; i < depth; ++i) m *= stride;
  return m;
}

json to_json(const GeneratorConfig& c) {
  return {{"depth", c.depth}, {"base_channels", c.base_channels}, {"kernel", c.kernel}, {"stride", c.stride},
          {"growth", c.growth}, {"residual", c.residual}, {"zero_mean", c.zero_mean}};
}

GeneratorConfig generator_config_from_json(const json& j) {
  GeneratorConfig c;
  c.depth = j.value("depth", c.depth);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.kernel = j.value("kernel", c.kernel);
  c.stride = j.value("stride", c.stride);
  c.growth = j.value("growth", c.growth);
  c.residual = j.value("residual", c.residual);
  c.zero_mean = j.value("zero_mean", c.zero_mean);
  c.validate();
  return c;
}

Generator::Generator(const GeneratorConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(mix_seed(seed, 0x6e6567ULL));
  const std::size_t k = config_.kernel;
  for (std::size_t i = 0; i < config_.depth; ++i) {
    const std::size_t cin = i == 0 ? 1 : config_.channels(i - 1);
    const std::size_t c = config_.channels(i);
    EncoderLayer e;
    e.down.weight = init_uniform({c, cin, k}, cin * k, rng);
    e.down.bias = init_uniform({c}, cin * k, rng);
    e.expand.weight = init_uniform({2 * c, c, 1}, c, rng);
    e.expand.bias = init_uniform({2 * c}, c, rng);
    encoder_.push_back(std::move(e));
  }
  for (std::size_t i = 0; i < config_.depth; ++i) {
    const std::size_t c = config_.channels(i);
    const std::size_t cout = i == 0 ? 1 : config_.channels(i - 1);
    DecoderLayer d;
    d.expand.weight = init_uniform({2 * c, c, 1}, c, rng);
    d.expand.bias = init_uniform({2 * c}, c, rng);
    d.up.weight = init_uniform({c, cout, k}, cout * k, rng);
    d.up.bias = init_uniform({cout}, cout * k, rng);
    decoder_.push_back(std::move(d));
  }
}

DiffArray Generator::forward(const DiffArray& x) const {
  require(x.defined() && x.rank() == 3 && x.dim(1) == 1,
          "generator: input must be [B, 1, L], got " + (x.defined() ? ad::shape_string(x.shape()) : "undefined"));
  const std::size_t len = x.dim(2);
  const std::size_t unit = config_.min_length();
  if (len < unit) {
    detail::contract_fail("generator: input length " + std::to_string(len) + " below required minimum " +
                          std::to_string(unit) + " (stride^depth)");
  }
  const std::size_t padded = (len + unit - 1) / unit * unit;
  const std::size_t s = config_.stride;
  const std::size_t edge = (config_.kernel - s) / 2;

  const DiffArray input = padded == len ? x : ad::pad_last(x, 0, padded - len, ad::PadMode::kZero);
  DiffArray h = input;
  std::vector<DiffArray> skips;
  for (const auto& e : encoder_) {
    h = ad::relu(ad::conv1d(h, e.down.weight, e.down.bias, s, edge));
    h = ad::glu(ad::conv1d(h, e.expand.weight, e.expand.bias, 1, 0));
    skips.push_back(h);
  }
  for (std::size_t r = 0; r < config_.depth; ++r) {
    const std::size_t i = config_.depth - 1 - r;
    const auto& d = decoder_[i];
    h = ad::add(h, skips[i]);
    h = ad::glu(ad::conv1d(h, d.expand.weight, d.expand.bias, 1, 0));
    const std::size_t target = h.dim(2) * s;
    h = ad::conv_transpose1d(h, d.up.weight, d.up.bias, s);
    h = ad::crop_last(h, edge, target);
    if (i != 0) h = ad::relu(h);
  }
  if (config_.residual) h = ad::add(h, input);
  if (padded != len) h = ad::crop_last(h, 0, len);
  return config_.zero_mean ? ad::center_last(h) : h;
}

ParameterList Generator::parameters() const {
  ParameterList out;
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    const std::string p = "generator.encoder" + std::to_string(i);
    out.push_back({p + ".down.weight", encoder_[i].down.weight});
    out.push_back({p + ".down.bias", encoder_[i].down.bias});
    out.push_back({p + ".expand.weight", encoder_[i].expand.weight});
    out.push_back({p + ".expand.bias", encoder_[i].expand.bias});
  }
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const std::string p = "generator.decoder" + std::to_string(i);
    out.push_back({p + ".expand.weight", decoder_[i].expand.weight});
    out.push_back({p + ".expand.bias", decoder_[i].expand.bias});
    out.push_back({p + ".up.weight", decoder_[i].up.weight});
    out.push_back({p + ".up.bias", decoder_[i].up.bias});
  }
  return out;
}

// ------------------------------------------------------ period discriminator

PeriodDiscriminator::PeriodDiscriminator(std::size_t period, const PeriodDiscriminatorConfig& config,
                                         std::uint64_t seed)
    : period_(period), config_(config) {
  require(period >= 1, "PeriodDiscriminator: period must be >= 1");
  require(!config.channels.empty(), "PeriodDiscriminator: need at least one hidden layer");
  require(config.kernel % 2 == 1 && config.final_kernel % 2 == 1, "PeriodDiscriminator: kernels must be odd");
  Rng rng(mix_seed(seed, 0x6d7064ULL, period));
  std::size_t cin = 1;
  for (std::size_t i = 0; i < config.channels.size(); ++i) {
    const bool last = i + 1 == config.channels.size();
    layers_.push_back(make_conv2d(cin, config.channels[i], config.kernel, 1, {last ? 1 : config.stride, 1},
                                  {config.kernel / 2, 0}, rng));
    cin = config.channels[i];
  }
  final_ = make_conv2d(cin, 1, config.final_kernel, 1, {1, 1}, {config.final_kernel / 2, 0}, rng);
}

DiscriminatorOutput PeriodDiscriminator::forward(const DiffArray& x) const {
  require(x.defined() && x.rank() == 3 && x.dim(1) == 1, "period discriminator: input must be [B, 1, L]");
  const std::size_t batch = x.dim(0), len = x.dim(2);
  if (len < period_) {
    detail::contract_fail("period discriminator: length " + std::to_string(len) + " shorter than period " +
                          std::to_string(period_));
  }
  DiffArray h = x;
  if (len % period_ != 0) h = ad::pad_last(h, 0, period_ - len % period_, ad::PadMode::kReflect);
  const std::size_t padded = h.dim(2);
  h = ad::reshape(h, {batch, 1, padded / period_, period_});
  DiscriminatorOutput out;
  for (const auto& l : layers_) {
    h = ad::leaky_relu(apply(l, h), config_.slope);
    out.features.push_back(h);
  }
  out.score = apply(final_, h);
  return out;
}

ParameterList PeriodDiscriminator::parameters() const {
  ParameterList out;
  const std::string p = name();
  for (std::size_t i = 0; i < layers_.size(); ++i) push_layer(out, p + ".conv" + std::to_string(i), layers_[i]);
  push_layer(out, p + ".final", final_);
  return out;
}

std::string PeriodDiscriminator::name() const { return "disc.period" + std::to_string(period_); }

// -------------------------------------------------- resolution discriminator

ResolutionDiscriminator::ResolutionDiscriminator(const dsp::StftParams& stft,
                                                 const ResolutionDiscriminatorConfig& config, std::uint64_t seed)
    : stft_(stft), config_(config) {
  dsp::validate(stft);
  require(!config.channels.empty(), "ResolutionDiscriminator: need at least one hidden layer");
  require(config.kernel_time % 2 == 1 && config.kernel_freq % 2 == 1 && config.final_kernel % 2 == 1,
          "ResolutionDiscriminator: kernels must be odd");
  const auto window = dsp::hann_window(stft.window_size);
  double wsum = 0.0;
  for (double w : window) wsum += w;
  magnitude_scale_ = 1.0 / wsum;

  Rng rng(mix_seed(seed, 0x6d7264ULL, stft.fft_size));
  std::size_t cin = 1;
  for (std::size_t i = 0; i < config.channels.size(); ++i) {
    layers_.push_back(make_conv2d(cin, config.channels[i], config.kernel_time, config.kernel_freq,
                                  {1, i == 0 ? 1 : config.stride_freq}, {config.kernel_time / 2, config.kernel_freq / 2},
                                  rng));
    cin = config.channels[i];
  }
  final_ = make_conv2d(cin, 1, config.final_kernel, config.final_kernel, {1, 1},
                       {config.final_kernel / 2, config.final_kernel / 2}, rng);
}

DiffArray ResolutionDiscriminator::spectrogram(const DiffArray& x) const {
  require(x.defined() && x.rank() == 3 && x.dim(1) == 1, "resolution discriminator: input must be [B, 1, L]");
  if (x.dim(2) < stft_.window_size) {
    detail::contract_fail("resolution discriminator: length " + std::to_string(x.dim(2)) +
                          " shorter than one window (" + std::to_string(stft_.window_size) + ")");
  }
  DiffArray power = ad::stft_power(x, stft_);
  power = ad::mul_scalar(power, magnitude_scale_ * magnitude_scale_);
  DiffArray mag = ad::soft_sqrt(power, config_.magnitude_eps);
  return ad::reshape(mag, {mag.dim(0), 1, mag.dim(1), mag.dim(2)});
}

DiscriminatorOutput ResolutionDiscriminator::forward(const DiffArray& x) const {
  DiffArray h = spectrogram(x);
  DiscriminatorOutput out;
  for (const auto& l : layers_) {
    h = ad::leaky_relu(apply(l, h), config_.slope);
    out.features.push_back(h);
  }
  out.score = apply(final_, h);
  return out;
}

ParameterList ResolutionDiscriminator::parameters() const {
  ParameterList out;
  const std::string p = name();
  for (std::size_t i = 0; i < layers_.size(); ++i) push_layer(out, p + ".conv" + std::to_string(i), layers_[i]);
  push_layer(out, p + ".final", final_);
  return out;
}

std::string ResolutionDiscriminator::name() const { return "disc.resolution" + std::to_string(stft_.fft_size); }

// ------------------------------------------------------------------ ensemble

EnsembleConfig EnsembleConfig::toy() {
  EnsembleConfig c;
  c.periods = {2, 3};
  c.resolutions = {{1024, 1024, 256}};
  c.period.channels = {4, 8, 8};
  c.resolution.channels = {4, 4};
  return c;
}

namespace {

json stft_json(const dsp::StftParams& p) {
  return {{"fft_size", p.fft_size}, {"window_size", p.window_size}, {"hop", p.hop}};
}

dsp::StftParams stft_from_json(const json& j) {
  dsp::StftParams p;
  p.fft_size = j.at("fft_size").get<std::size_t>();
  p.window_size = j.value("window_size", p.fft_size);
  p.hop = j.at("hop").get<std::size_t>();
  return p;
}

}  // namespace

json to_json(const EnsembleConfig& c) {
  json res = json::array();
  for (const auto& r : c.resolutions) res.push_back(stft_json(r));
  return {{"periods", c.periods},
          {"resolutions", res},
          {"period",
           {{"channels", c.period.channels},
            {"kernel", c.period.kernel},
            {"stride", c.period.stride},
            {"final_kernel", c.period.final_kernel},
            {"slope", c.period.slope}}},
          {"resolution",
           {{"channels", c.resolution.channels},
            {"kernel_time", c.resolution.kernel_time},
            {"kernel_freq", c.resolution.kernel_freq},
            {"stride_freq", c.resolution.stride_freq},
            {"final_kernel", c.resolution.final_kernel},
            {"slope", c.resolution.slope},
            {"magnitude_eps", c.resolution.magnitude_eps}}}};
}

EnsembleConfig ensemble_config_from_json(const json& j) {
  EnsembleConfig c;
  if (j.contains("periods")) c.periods = j.at("periods").get<std::vector<std::size_t>>();
  if (j.contains("resolutions")) {
    c.resolutions.clear();
    for (const auto& r : j.at("resolutions")) c.resolutions.push_back(stft_from_json(r));
  }
  if (j.contains("period")) {
    const auto& p = j.at("period");
    c.period.channels = p.value("channels", c.period.channels);
    c.period.kernel = p.value("kernel", c.period.kernel);
    c.period.stride = p.value("stride", c.period.stride);
    c.period.final_kernel = p.value("final_kernel", c.period.final_kernel);
    c.period.slope = p.value("slope", c.period.slope);
  }
  if (j.contains("resolution")) {
    const auto& r = j.at("resolution");
    c.resolution.channels = r.value("channels", c.resolution.channels);
    c.resolution.kernel_time = r.value("kernel_time", c.resolution.kernel_time);
    c.resolution.kernel_freq = r.value("kernel_freq", c.resolution.kernel_freq);
    c.resolution.stride_freq = r.value("stride_freq", c.resolution.stride_freq);
    c.resolution.final_kernel = r.value("final_kernel", c.resolution.final_kernel);
    c.resolution.slope = r.value("slope", c.resolution.slope);
    c.resolution.magnitude_eps = r.value("magnitude_eps", c.resolution.magnitude_eps);
  }
  return c;
}

DiscriminatorEnsemble::DiscriminatorEnsemble(const EnsembleConfig& config, std::uint64_t seed) : config_(config) {
  require(config.size() >= 1, "DiscriminatorEnsemble: need at least one member");
  auto periods = config_.periods;
  std::sort(periods.begin(), periods.end());
  auto resolutions = config_.resolutions;
  std::stable_sort(resolutions.begin(), resolutions.end(),
                   [](const auto& a, const auto& b) { return a.fft_size < b.fft_size; });
  for (std::size_t p : periods) members_.push_back(std::make_unique<PeriodDiscriminator>(p, config_.period, seed));
  for (const auto& r : resolutions) {
    members_.push_back(std::make_unique<ResolutionDiscriminator>(r, config_.resolution, seed));
  }
}

std::vector<DiscriminatorOutput> DiscriminatorEnsemble::forward(const DiffArray& x) const {
  std::vector<DiscriminatorOutput> out;
  out.reserve(members_.size());
  for (const auto& m : members_) out.push_back(m->forward(x));
  return out;
}

ParameterList DiscriminatorEnsemble::parameters() const {
  ParameterList out;
  for (const auto& m : members_) {
    auto p = m->parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

}  // namespace msg::model

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "msg/diffarray.hpp"
#include "msg/error.hpp"
#include "msg/gradcheck.hpp"
#include "msg/losses.hpp"
#include "msg/model.hpp"
#include "test_util.hpp"

namespace msg::model {
namespace {

using ad::DiffArray;
using testing::random_array;

GeneratorConfig tiny() {
  GeneratorConfig c = GeneratorConfig::toy();
  c.base_channels = 2;
  return c;
}

double grad_norm(const DiffArray& a) {
  double s = 0.0;
  for (double g : a.grad()) s += g * g;
  return std::sqrt(s);
}

TEST(GeneratorTest, LengthPreservedForRandomLengths) {
  const Generator g(GeneratorConfig::toy(), 1);
  Rng rng(12);
  for (int i = 0; i < 12; ++i) {
    const std::size_t len = 256 + rng.below(32000 - 256 + 1);
    const auto y = g.forward(random_array({1, 1, len}, i, false));
    EXPECT_EQ(y.shape(), (ad::Shape{1, 1, len})) << len;
  }
  const auto y = g.forward(random_array({3, 1, 16}, 5, false));
  EXPECT_EQ(y.shape(), (ad::Shape{3, 1, 16}));
}

TEST(GeneratorTest, ShortInputNamesMinimum) {
  const Generator g(GeneratorConfig::toy(), 1);
  try {
    g.forward(DiffArray::zeros({1, 1, 15}));
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("16"), std::string::npos) << e.what();
  }
  EXPECT_THROW(g.forward(DiffArray::zeros({1, 2, 64})), ContractError);
}

TEST(GeneratorTest, ZeroWeightsGiveZeroOutput) {
  for (bool zero_mean : {false, true}) {
    GeneratorConfig c = GeneratorConfig::toy();
    c.zero_mean = zero_mean;
    const Generator g(c, 3);
    for (const auto& p : g.parameters()) {
      auto v = p.value;
      for (double& x : v.mutable_values()) x = 0.0;
    }
    const auto y = g.forward(random_array({2, 1, 300}, 4, false));
    for (double v : y.values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(GeneratorTest, ZeroMeanOutput) {
  const Generator g(GeneratorConfig::toy(), 9);
  const auto y = g.forward(random_array({2, 1, 500}, 4, false));
  for (std::size_t b = 0; b < 2; ++b) {
    double m = 0.0;
    for (std::size_t t = 0; t < 500; ++t) m += y.values()[b * 500 + t];
    EXPECT_NEAR(m / 500.0, 0.0, 1e-14);
  }
}

TEST(GeneratorTest, ResidualAddsInput) {
  GeneratorConfig c = GeneratorConfig::toy();
  c.residual = true;
  c.zero_mean = false;
  const Generator g(c, 3);
  for (const auto& p : g.parameters()) {
    auto v = p.value;
    for (double& x : v.mutable_values()) x = 0.0;
  }
  const auto x = random_array({1, 1, 100}, 8, false);
  const auto y = g.forward(x);
  const auto yv = y.values();
  const auto xv = x.values();
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(yv[i], xv[i]);
}

// Conv weights + biases, written out from the layer recipe.
std::size_t expected_parameter_count(const GeneratorConfig& c) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < c.depth; ++i) {
    const std::size_t ch = c.channels(i), prev = i == 0 ? 1 : c.channels(i - 1);
    n += ch * prev * c.kernel + ch;  // encoder down
    n += 2 * ch * ch + 2 * ch;       // encoder 1x1
    n += 2 * ch * ch + 2 * ch;       // decoder 1x1
    n += ch * prev * c.kernel + prev;  // decoder up
  }
  return n;
}

TEST(GeneratorTest, ParameterCountFollowsConfig) {
  for (const auto& c : {GeneratorConfig::toy(), GeneratorConfig::paper(), tiny()}) {
    const Generator a(c, 1), b(c, 2);
    EXPECT_EQ(count_elements(a.parameters()), expected_parameter_count(c));
    EXPECT_EQ(count_elements(a.parameters()), count_elements(b.parameters()));
  }
  EXPECT_EQ(GeneratorConfig::paper().min_length(), 4096u);
  EXPECT_EQ(GeneratorConfig::paper().channels(5), 2048u);
}

TEST(GeneratorTest, InvalidConfigsRejected) {
  GeneratorConfig c;
  c.depth = 0;
  EXPECT_THROW(Generator(c, 0), ContractError);
  c = GeneratorConfig{};
  c.kernel = 3;
  EXPECT_THROW(Generator(c, 0), ContractError);
  c = GeneratorConfig{};
  c.kernel = 7;
  EXPECT_THROW(Generator(c, 0), ContractError);
}

TEST(GeneratorTest, DeterministicPerSeed) {
  const Generator a(GeneratorConfig::toy(), 42), b(GeneratorConfig::toy(), 42), c(GeneratorConfig::toy(), 43);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    const auto va = pa[i].value.values(), vb = pb[i].value.values(), vc = pc[i].value.values();
    EXPECT_TRUE(std::equal(va.begin(), va.end(), vb.begin(), vb.end()));
    any_diff |= !std::equal(va.begin(), va.end(), vc.begin(), vc.end());
  }
  EXPECT_TRUE(any_diff);
  const auto x = random_array({1, 1, 1000}, 3, false);
  const auto ya = a.forward(x), yb = b.forward(x);
  EXPECT_TRUE(std::equal(ya.values().begin(), ya.values().end(), yb.values().begin()));
}

TEST(GeneratorTest, ConfigJsonRoundTrip) {
  GeneratorConfig c{3, 6, 6, 2, 3, true, false};
  const auto r = generator_config_from_json(to_json(c));
  EXPECT_EQ(to_json(r), to_json(c));
  EXPECT_THROW(generator_config_from_json({{"kernel", 2}}), ContractError);
}

TEST(GeneratorTest, GradientOfMeanSquareMatchesFiniteDifferences) {
  for (bool zero_mean : {false, true}) {
    GeneratorConfig c = GeneratorConfig::toy();
    c.zero_mean = zero_mean;
    const Generator g(c, 5);
    const auto x = random_array({1, 1, 256}, 6, false);
    std::vector<DiffArray> params;
    for (const auto& p : g.parameters()) params.push_back(p.value);
    set_requires_grad(g.parameters(), true);
    const auto r = ad::check_gradients([&] { return ad::mean(ad::square(g.forward(x))); }, params, 1e-5);
    EXPECT_LT(r.max_rel_error, 1e-4) << g.parameters()[r.worst_param].name << "[" << r.worst_index << "] "
                                     << r.analytic << " vs " << r.numeric;
  }
}

TEST(PeriodDiscriminatorTest, ReshapeAndPadding) {
  PeriodDiscriminatorConfig cfg;
  cfg.channels = {2, 3};
  const PeriodDiscriminator d(2, cfg, 1);
  EXPECT_EQ(d.name(), "disc.period2");
  const auto x = random_array({1, 1, 16000}, 2, false);
  const auto out = d.forward(x);
  ASSERT_EQ(out.features.size(), 2u);
  // Height 8000 shrinks by the stride of every hidden layer but the last.
  EXPECT_EQ(out.features[0].shape(), (ad::Shape{1, 2, 2667, 2}));
  EXPECT_EQ(out.features[1].shape(), (ad::Shape{1, 3, 2667, 2}));
  EXPECT_EQ(out.score.shape(), (ad::Shape{1, 1, 2667, 2}));

  // Odd length: reflect padding appends x[len-2].
  const auto odd = random_array({1, 1, 15999}, 3, false);
  std::vector<double> manual(odd.values().begin(), odd.values().end());
  manual.push_back(manual[15997]);
  const auto a = d.forward(odd).score;
  const auto b = d.forward(DiffArray({1, 1, 16000}, manual)).score;
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin(), b.values().end()));

  EXPECT_THROW(d.forward(DiffArray::zeros({1, 1, 1})), ContractError);
}

TEST(PeriodDiscriminatorTest, ColumnsDoNotMix) {
  // (k, 1) kernels never mix the p phase columns.
  PeriodDiscriminatorConfig cfg;
  cfg.channels = {2, 2};
  const PeriodDiscriminator d(3, cfg, 7);
  auto x = random_array({1, 1, 300}, 4, false);
  const auto before = d.forward(x).score;
  std::vector<double> v(x.values().begin(), x.values().end());
  for (std::size_t t = 1; t < v.size(); t += 3) v[t] += 0.5;  // column 1 only
  const auto after = d.forward(DiffArray({1, 1, 300}, v)).score;
  const std::size_t h = before.dim(2);
  for (std::size_t r = 0; r < h; ++r) {
    EXPECT_EQ(before.values()[r * 3 + 0], after.values()[r * 3 + 0]);
    EXPECT_EQ(before.values()[r * 3 + 2], after.values()[r * 3 + 2]);
  }
}

TEST(ResolutionDiscriminatorTest, FrameCountAndFeatures) {
  ResolutionDiscriminatorConfig cfg;
  cfg.channels = {2, 2, 2};
  const ResolutionDiscriminator d({512, 512, 128}, cfg, 1);
  EXPECT_EQ(d.name(), "disc.resolution512");
  const auto x = random_array({1, 1, 16000}, 2, false);
  const auto spec = d.spectrogram(x);
  EXPECT_EQ(spec.shape(), (ad::Shape{1, 1, 126, 257}));
  const auto out = d.forward(x);
  EXPECT_EQ(out.features.size(), 3u);
  EXPECT_EQ(out.features[0].shape(), (ad::Shape{1, 2, 126, 257}));
  EXPECT_EQ(out.features[1].shape(), (ad::Shape{1, 2, 126, 129}));
  EXPECT_EQ(out.score.dim(2), 126u);
  EXPECT_THROW(d.spectrogram(DiffArray::zeros({1, 1, 500})), ContractError);
}

TEST(ResolutionDiscriminatorTest, MagnitudeOfSinusoidIsHalfAmplitude) {
  ResolutionDiscriminatorConfig cfg;
  const ResolutionDiscriminator d({512, 512, 128}, cfg, 1);
  // 1000 Hz sits on bin 32; window-sum normalization reads amplitude / 2.
  const auto x = DiffArray({1, 1, 4096}, testing::sine(1000.0, 16000.0, 4096, 0.8));
  const auto s = d.spectrogram(x);
  EXPECT_NEAR(s.values()[10 * 257 + 32], 0.4, 1e-3);
}

TEST(ResolutionDiscriminatorTest, ZeroInputScoreDependsOnBiasesOnly) {
  ResolutionDiscriminatorConfig cfg;
  cfg.channels = {2, 2};
  const ResolutionDiscriminator a({512, 512, 128}, cfg, 1);
  const auto zero = DiffArray::zeros({1, 1, 2048});
  const auto spec = a.spectrogram(zero);
  for (double v : spec.values()) EXPECT_EQ(v, 0.0);
  const auto before = a.forward(zero).score;
  const auto params = a.parameters();
  ASSERT_EQ(params[0].name, "disc.resolution512.conv0.weight");
  auto w = params[0].value;
  for (double& v : w.mutable_values()) v *= -3.0;
  const auto after = a.forward(zero).score;
  EXPECT_TRUE(std::equal(before.values().begin(), before.values().end(), after.values().begin()));
}

TEST(EnsembleTest, MembersAndOrder) {
  const DiscriminatorEnsemble paper(EnsembleConfig::paper(), 0);
  ASSERT_EQ(paper.size(), 8u);
  const std::vector<std::string> names{"disc.period2",       "disc.period3",        "disc.period5",
                                       "disc.period7",       "disc.period11",       "disc.resolution512",
                                       "disc.resolution1024", "disc.resolution2048"};
  for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(paper.member(k).name(), names[k]);

  const DiscriminatorEnsemble toy(EnsembleConfig::toy(), 0);
  EXPECT_EQ(toy.size(), 3u);
  const auto out = toy.forward(random_array({2, 1, 4000}, 1, false));
  ASSERT_EQ(out.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(out[k].features.size(), toy.member(k).hidden_layers());

  EnsembleConfig two = EnsembleConfig::toy();
  two.resolutions.clear();
  EXPECT_EQ(DiscriminatorEnsemble(two, 0).size(), 2u);
  EnsembleConfig none = two;
  none.periods.clear();
  EXPECT_THROW(DiscriminatorEnsemble(none, 0), ContractError);
}

TEST(EnsembleTest, ParameterNamesUniqueAndDeterministic) {
  const DiscriminatorEnsemble a(EnsembleConfig::toy(), 5), b(EnsembleConfig::toy(), 5);
  std::set<std::string> seen;
  const auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_TRUE(seen.insert(pa[i].name).second) << pa[i].name;
    const auto va = pa[i].value.values(), vb = pb[i].value.values();
    EXPECT_TRUE(std::equal(va.begin(), va.end(), vb.begin(), vb.end()));
  }
}

TEST(EnsembleTest, ConfigJsonRoundTrip) {
  const auto c = EnsembleConfig::toy();
  EXPECT_EQ(to_json(ensemble_config_from_json(to_json(c))), to_json(c));
}

TEST(GradientFlowTest, EveryParameterReceivesGradient) {
  const Generator g(GeneratorConfig::toy(), 11);
  const DiscriminatorEnsemble d(EnsembleConfig::toy(), 12);
  const losses::MultiScaleMelLoss mel;
  set_requires_grad(g.parameters(), true);
  set_requires_grad(d.parameters(), true);
  const auto x = random_array({2, 1, 4096}, 13, false);
  const auto s = random_array({2, 1, 4096}, 14, false);

  {
    ad::Tape tape;
    ad::Tape::Scope rec(tape);
    const auto fake = g.forward(x);
    const auto fo = d.forward(fake);
    std::vector<DiscriminatorOutput> ro;
    {
      ad::Tape::Pause pause;
      ro = d.forward(s);
    }
    const auto total = ad::add_n(std::vector<DiffArray>{losses::generator_adv_loss(fo),
                                                        losses::feature_matching_loss(ro, fo), mel(fake, s)});
    tape.backward(total);
  }
  for (const auto& p : g.parameters()) EXPECT_GT(grad_norm(p.value), 0.0) << p.name;

  zero_grad(d.parameters());
  {
    ad::Tape tape;
    ad::Tape::Scope rec(tape);
    DiffArray fake;
    {
      ad::Tape::Pause pause;
      fake = g.forward(x);
    }
    const auto loss = losses::discriminator_adv_loss(d.forward(s), d.forward(fake));
    tape.backward(loss);
  }
  for (const auto& p : d.parameters()) EXPECT_GT(grad_norm(p.value), 0.0) << p.name;
}

}  // namespace
}  // namespace msg::model

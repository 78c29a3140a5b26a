#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <vector>

#include <gtest/gtest.h>

#include "msg/diffarray.hpp"
#include "msg/dsp.hpp"
#include "msg/error.hpp"
#include "msg/gradcheck.hpp"
#include "msg/losses.hpp"
#include "msg/model.hpp"
#include "test_util.hpp"

namespace msg::losses {
namespace {

using ad::DiffArray;
using testing::random_array;

DiscriminatorOutput constant_output(double score, std::vector<double> feature_values = {}) {
  DiscriminatorOutput o;
  o.score = DiffArray::full({2, 1, 3, 2}, score);
  for (double f : feature_values) o.features.push_back(DiffArray::full({2, 4, 5}, f));
  return o;
}

TEST(AdversarialLossTest, GeneratorExamples) {
  EXPECT_EQ(generator_adv_loss(std::vector{constant_output(1.0), constant_output(1.0)}).item(), 0.0);
  EXPECT_EQ(generator_adv_loss(std::vector{constant_output(0.0)}).item(), 1.0);
  EXPECT_EQ(generator_adv_loss(std::vector{constant_output(1.0), constant_output(0.0)}).item(), 0.5);
  EXPECT_DOUBLE_EQ(generator_adv_loss(std::vector{constant_output(3.0)}).item(), 4.0);
  EXPECT_THROW(generator_adv_loss({}), ContractError);
}

TEST(AdversarialLossTest, DiscriminatorExamples) {
  auto d = [](double real, double fake) {
    return discriminator_adv_loss(std::vector{constant_output(real)}, std::vector{constant_output(fake)}).item();
  };
  EXPECT_EQ(d(1.0, 0.0), 0.0);
  EXPECT_EQ(d(0.0, 1.0), 2.0);
  EXPECT_EQ(d(0.5, 0.5), 0.5);
  // Summed, not averaged, over members.
  EXPECT_EQ(discriminator_adv_loss(std::vector{constant_output(0.0), constant_output(0.0)},
                                   std::vector{constant_output(0.0), constant_output(0.0)})
                .item(),
            2.0);
  EXPECT_THROW(discriminator_adv_loss(std::vector{constant_output(0.0)}, {}), ContractError);
}

TEST(AdversarialLossTest, NonNegativeAndZeroOnlyAtFixedPoint) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    DiscriminatorOutput r, f;
    r.score = random_array({1, 1, 4, 3}, seed, false, -2.0, 2.0);
    f.score = random_array({1, 1, 4, 3}, seed + 100, false, -2.0, 2.0);
    EXPECT_GT(generator_adv_loss(std::vector{f}).item(), 0.0);
    EXPECT_GT(discriminator_adv_loss(std::vector{r}, std::vector{f}).item(), 0.0);
  }
}

TEST(AdversarialLossTest, GeneratorLossMatchesHandSum) {
  DiscriminatorOutput a, b;
  a.score = DiffArray({1, 1, 2, 2}, {0.0, 1.0, 2.0, 3.0});
  b.score = DiffArray({1, 1, 1, 3}, {-1.0, 1.0, 1.0});
  // member a: (1 + 0 + 1 + 4) / 4 = 1.5; member b: 4 / 3.
  EXPECT_NEAR(generator_adv_loss(std::vector{a, b}).item(), (1.5 + 4.0 / 3.0) / 2.0, 1e-15);
}

TEST(FeatureMatchingTest, Examples) {
  EXPECT_EQ(feature_matching_loss(std::vector{constant_output(0.0, {0.3, -0.2})},
                                  std::vector{constant_output(0.7, {0.3, -0.2})})
                .item(),
            0.0);
  EXPECT_DOUBLE_EQ(feature_matching_loss(std::vector{constant_output(0.0, {0.3, -0.2})},
                                         std::vector{constant_output(0.0, {1.3, 0.8})})
                       .item(),
                   1.0);
  EXPECT_DOUBLE_EQ(feature_matching_loss(std::vector{constant_output(0.0, {0.0, 0.0})},
                                         std::vector{constant_output(0.0, {0.0, 2.0})})
                       .item(),
                   1.0);
  // Members average: 1 and 3.
  EXPECT_DOUBLE_EQ(feature_matching_loss(std::vector{constant_output(0.0, {0.0}), constant_output(0.0, {0.0})},
                                         std::vector{constant_output(0.0, {1.0}), constant_output(0.0, {-3.0})})
                       .item(),
                   2.0);
}

TEST(FeatureMatchingTest, ShapeMismatchRejected) {
  auto a = constant_output(0.0, {0.0});
  auto b = constant_output(0.0, {0.0});
  b.features[0] = DiffArray::zeros({2, 4, 6});
  EXPECT_THROW(feature_matching_loss(std::vector{a}, std::vector{b}), ContractError);
  EXPECT_THROW(feature_matching_loss(std::vector{a}, std::vector{constant_output(0.0, {0.0, 0.0})}), ContractError);
}

TEST(MelLossTest, ZeroOnIdenticalAndSymmetric) {
  const MultiScaleMelLoss loss;
  const auto x = random_array({2, 1, 4096}, 1, false);
  const auto y = random_array({2, 1, 4096}, 2, false);
  EXPECT_EQ(loss(x, x).item(), 0.0);
  EXPECT_EQ(loss(x, y).item(), loss(y, x).item());
  EXPECT_GT(loss(x, y).item(), 0.0);
  EXPECT_THROW(loss(x, random_array({2, 1, 4000}, 3, false)), ContractError);
}

TEST(MelLossTest, AveragesScales) {
  const MultiScaleMelLoss loss;
  const auto x = random_array({1, 1, 4096}, 4, false);
  const auto y = random_array({1, 1, 4096}, 5, false);
  const auto per = loss.per_scale(x, y);
  ASSERT_EQ(per.size(), 3u);
  EXPECT_NEAR(loss(x, y).item(), (per[0] + per[1] + per[2]) / 3.0, 1e-15);
}

// Independent route: analysis-path STFT and filterbank, then log and L1.
TEST(MelLossTest, MatchesAnalysisPath) {
  const MelLossConfig cfg;
  const auto xv = testing::random_values(6000, 6);
  const auto yv = testing::random_values(6000, 7);
  double expected = 0.0;
  for (const auto& s : cfg.scales) {
    const auto mx = dsp::mel_spectrogram({xv, 16000.0}, s.stft, s.n_mels);
    const auto my = dsp::mel_spectrogram({yv, 16000.0}, s.stft, s.n_mels);
    double acc = 0.0;
    for (std::size_t i = 0; i < mx.values.size(); ++i) {
      acc += std::abs(std::log(mx.values[i] + cfg.eps) - std::log(my.values[i] + cfg.eps));
    }
    expected += acc / static_cast<double>(mx.values.size());
  }
  expected /= 3.0;
  const auto got = multiscale_mel_loss(DiffArray({1, 1, 6000}, xv), DiffArray({1, 1, 6000}, yv)).item();
  EXPECT_NEAR(got, expected, 1e-9 * expected);
}

TEST(MelLossTest, InvariantToCoarsestHopShift) {
  // Content sits well inside zero margins so whole frames move by one hop.
  const std::size_t n = 16384, hop = 512;
  const auto a = testing::random_values(6000, 8);
  const auto b = testing::random_values(6000, 9);
  auto place = [&](const std::vector<double>& v, std::size_t at) {
    std::vector<double> out(n, 0.0);
    std::copy(v.begin(), v.end(), out.begin() + static_cast<std::ptrdiff_t>(at));
    return DiffArray({1, 1, n}, out);
  };
  const MultiScaleMelLoss loss;
  const double l0 = loss(place(a, 4096), place(b, 4096)).item();
  const double l1 = loss(place(a, 4096 + hop), place(b, 4096 + hop)).item();
  EXPECT_GT(l0, 0.1);
  EXPECT_NEAR(l0, l1, 1e-6);
}

TEST(MelLossTest, ReferenceBranchGetsNoGradient) {
  const MultiScaleMelLoss loss;
  auto x = random_array({1, 1, 2048}, 10);
  auto y = random_array({1, 1, 2048}, 11);
  ad::Tape tape;
  {
    ad::Tape::Scope rec(tape);
    tape.backward(loss(x, y));
  }
  EXPECT_TRUE(x.has_grad());
  EXPECT_FALSE(y.has_grad());
}

TEST(MelLossTest, ConfigJsonRoundTrip) {
  MelLossConfig c;
  c.scales[1].n_mels = 40;
  c.eps = 1e-4;
  EXPECT_EQ(to_json(mel_loss_config_from_json(to_json(c))), to_json(c));
}

TEST(GeneratorObjectiveTest, CompositeGradientMatchesFiniteDifferences) {
  const model::Generator g(model::GeneratorConfig::toy(), 21);
  const model::DiscriminatorEnsemble d(model::EnsembleConfig::toy(), 22);
  const MultiScaleMelLoss mel;
  const auto x = random_array({1, 1, 2048}, 23, false);
  const auto s = random_array({1, 1, 2048}, 24, false);
  std::vector<DiscriminatorOutput> real;
  {
    ad::Tape::Pause pause;
    real = d.forward(s);
  }
  const double w_adv = 0.7, w_fm = 1.9, w_mel = 0.4;
  auto objective = [&] {
    const auto fake = g.forward(x);
    const auto fo = d.forward(fake);
    return ad::add_n(std::vector<DiffArray>{ad::mul_scalar(generator_adv_loss(fo), w_adv),
                                            ad::mul_scalar(feature_matching_loss(real, fo), w_fm),
                                            ad::mul_scalar(mel(fake, s), w_mel)});
  };
  std::vector<DiffArray> params;
  for (const auto& p : g.parameters()) params.push_back(p.value);
  model::set_requires_grad(g.parameters(), true);
  // The objective is O(1), so h = 1e-4 keeps round-off well under the
  // tolerance; the zero-mean output makes the final bias gradient exactly 0.
  const auto r = ad::check_gradients(objective, params, 1e-4);
  EXPECT_LT(r.max_rel_error, 1e-3) << g.parameters()[r.worst_param].name << "[" << r.worst_index << "] "
                                   << r.analytic << " vs " << r.numeric;
}

TEST(BalancerTest, ReciprocalMeans) {
  const auto w = weights_from_means({2.0, 0.5, 1.0});
  EXPECT_EQ(w.w_adv, 0.5);
  EXPECT_EQ(w.w_fm, 2.0);
  EXPECT_EQ(w.w_mel, 1.0);
  EXPECT_TRUE(w.frozen);
  const auto u = weights_from_means({1.0, 1.0, 1.0});
  EXPECT_EQ(u.w_adv, 1.0);
  EXPECT_EQ(u.w_fm, 1.0);
  EXPECT_EQ(u.w_mel, 1.0);
}

TEST(BalancerTest, Clamping) {
  const auto w = weights_from_means({0.0, 1e-9, 1e9});
  EXPECT_EQ(w.w_adv, kWeightMax);
  EXPECT_EQ(w.w_fm, kWeightMax);
  EXPECT_EQ(w.w_mel, kWeightMin);
}

TEST(BalancerTest, UnitWeightsThenFreezeAtWindow) {
  LossBalancer b(10);
  for (int i = 0; i < 9; ++i) {
    b.observe(4.0, 2.0, 0.5);
    EXPECT_FALSE(b.frozen());
    EXPECT_EQ(b.weights().w_adv, 1.0);
    EXPECT_EQ(b.weights().w_mel, 1.0);
  }
  b.observe(4.0, 2.0, 0.5);
  EXPECT_TRUE(b.frozen());
  EXPECT_EQ(b.observed(), 10u);
  EXPECT_EQ(b.weights().w_adv, 0.25);
  EXPECT_EQ(b.weights().w_fm, 0.5);
  EXPECT_EQ(b.weights().w_mel, 2.0);
}

TEST(BalancerTest, EqualizesSyntheticStreams) {
  const std::array<double, 3> means{10.0, 1.0, 0.1};
  Rng rng(77);
  auto draw = [&] {
    std::array<double, 3> row;
    for (std::size_t i = 0; i < 3; ++i) row[i] = means[i] * (1.0 + 0.05 * rng.normal());
    return row;
  };
  LossBalancer b(1000);
  for (int i = 0; i < 1000; ++i) {
    const auto r = draw();
    b.observe(r[0], r[1], r[2]);
  }
  ASSERT_TRUE(b.frozen());
  const LossWeights frozen = b.weights();
  std::array<double, 3> acc{0, 0, 0};
  for (int i = 0; i < 1000; ++i) {
    const auto r = draw();
    b.observe(r[0], r[1], r[2]);
    acc[0] += r[0] * b.weights().w_adv;
    acc[1] += r[1] * b.weights().w_fm;
    acc[2] += r[2] * b.weights().w_mel;
  }
  for (double a : acc) EXPECT_NEAR(a / 1000.0, 1.0, 0.01);
  EXPECT_EQ(b.weights(), frozen);
}

TEST(BalancerTest, FrozenWeightsAreByteStable) {
  LossBalancer b(3);
  for (int i = 0; i < 3; ++i) b.observe(1.0 + i, 2.0, 3.0);
  const auto bits = [](const LossWeights& w) {
    return std::array<std::uint64_t, 6>{std::bit_cast<std::uint64_t>(w.w_adv),
                                        std::bit_cast<std::uint64_t>(w.w_fm),
                                        std::bit_cast<std::uint64_t>(w.w_mel),
                                        std::bit_cast<std::uint64_t>(w.running_mean[0]),
                                        std::bit_cast<std::uint64_t>(w.running_mean[1]),
                                        std::bit_cast<std::uint64_t>(w.running_mean[2])};
  };
  const auto before = bits(b.weights());
  for (int i = 0; i < 100; ++i) {
    b.observe(1e3 * i, -5.0, 0.0);
    EXPECT_EQ(bits(b.weights()), before);
    EXPECT_TRUE(b.frozen());
  }
  EXPECT_EQ(b.observed(), 3u);
}

TEST(BalancerTest, StateRoundTrip) {
  LossBalancer a(5);
  a.observe(1.0, 2.0, 3.0);
  a.observe(2.0, 3.0, 4.0);
  LossBalancer b(99);
  b.restore(a.state());
  EXPECT_EQ(b.state(), a.state());
  for (int i = 0; i < 4; ++i) {
    a.observe(0.5, 0.25, 0.125);
    b.observe(0.5, 0.25, 0.125);
  }
  EXPECT_EQ(a.weights(), b.weights());
  EXPECT_TRUE(b.frozen());
}

TEST(BalancerTest, BalanceWeightsHelper) {
  std::vector<std::array<double, 3>> rows(4, {2.0, 4.0, 8.0});
  const auto w = balance_weights(rows, 4);
  EXPECT_EQ(w.w_adv, 0.5);
  EXPECT_EQ(w.w_mel, 0.125);
  EXPECT_THROW(balance_weights(rows, 5), ContractError);
}

TEST(LossCsvTest, RoundTripExact) {
  testing::TempDir dir("csv");
  const auto path = dir / "l.csv";
  std::vector<LossRow> rows;
  for (std::size_t i = 1; i <= 5; ++i) {
    LossRow r;
    r.step = i;
    r.l_g = 1.0 / 3.0 * static_cast<double>(i);
    r.l_d = std::exp(-static_cast<double>(i));
    r.l_fm = 0.1;
    r.l_mel = 1e-17;
    r.weights = weights_from_means({3.0, 7.0, 0.3});
    rows.push_back(r);
  }
  {
    LossCsvWriter w(path, false);
    for (std::size_t i = 0; i < 3; ++i) w.write(rows[i]);
  }
  {
    LossCsvWriter w(path, true);
    for (std::size_t i = 3; i < 5; ++i) w.write(rows[i]);
  }
  const auto back = read_loss_csv(path);
  ASSERT_EQ(back.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(back[i].step, rows[i].step);
    EXPECT_EQ(back[i].l_g, rows[i].l_g);
    EXPECT_EQ(back[i].l_d, rows[i].l_d);
    EXPECT_EQ(back[i].l_mel, rows[i].l_mel);
    EXPECT_EQ(back[i].weights.w_fm, rows[i].weights.w_fm);
  }
  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  EXPECT_EQ(header, "step,L_G,L_D,L_FM,L_mel,w_adv,w_fm,w_mel");
}

TEST(LossCsvTest, BadFilesRejected) {
  testing::TempDir dir("csv");
  EXPECT_THROW(read_loss_csv(dir / "none.csv"), IoError);
  std::ofstream(dir / "h.csv") << "a,b\n";
  EXPECT_THROW(read_loss_csv(dir / "h.csv"), IoError);
  std::ofstream(dir / "r.csv") << "step,L_G,L_D,L_FM,L_mel,w_adv,w_fm,w_mel\n1,2,3\n";
  EXPECT_THROW(read_loss_csv(dir / "r.csv"), IoError);
}

}  // namespace
}  // namespace msg::losses

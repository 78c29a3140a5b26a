#pragma once

// Every differentiable op wrapped as a scalar objective: the op output is
// contracted against a fixed random weight array so the whole Jacobian is
// exercised, not only its column sums. Inputs to piecewise ops are kept at
// least 0.1 away from their kinks.

#include <functional>
#include <string>
#include <vector>

#include "msg/diffarray.hpp"
#include "msg/dsp.hpp"
#include "msg/spectral_ops.hpp"
#include "test_util.hpp"

namespace msg::testing {

struct GradCase {
  std::string name;
  std::vector<ad::DiffArray> params;
  std::function<ad::DiffArray()> f;
};

inline ad::DiffArray weighted_sum(const ad::DiffArray& y, std::uint64_t seed) {
  ad::DiffArray w;
  {
    ad::Tape::Pause pause;
    w = random_array(y.shape(), seed, false);
  }
  return ad::sum(ad::mul(y, w));
}

// Uniform in [-1, -0.1] U [0.1, 1].
inline ad::DiffArray away_from_zero(ad::Shape shape, std::uint64_t seed) {
  auto a = random_array(std::move(shape), seed, true, 0.1, 1.0);
  Rng rng(seed ^ 0x5157ULL);
  for (double& v : a.mutable_values()) {
    if (rng.uniform() < 0.5) v = -v;
  }
  return a;
}

// One instance of every op at random point `point`.
inline std::vector<GradCase> gradient_cases(std::uint64_t point) {
  const std::uint64_t s = mix_seed(0x67726164ULL, point);
  std::vector<GradCase> cases;
  auto unary = [&](std::string name, ad::DiffArray x, std::function<ad::DiffArray(const ad::DiffArray&)> op) {
    const std::uint64_t ws = mix_seed(s, cases.size());
    cases.push_back({std::move(name), {x}, [x, op, ws] { return weighted_sum(op(x), ws); }});
  };
  auto binary = [&](std::string name, ad::DiffArray a, ad::DiffArray b,
                    std::function<ad::DiffArray(const ad::DiffArray&, const ad::DiffArray&)> op) {
    const std::uint64_t ws = mix_seed(s, cases.size());
    cases.push_back({std::move(name), {a, b}, [a, b, op, ws] { return weighted_sum(op(a, b), ws); }});
  };

  binary("add", random_array({2, 3}, s + 1), random_array({2, 3}, s + 2), ad::add);
  binary("sub", random_array({2, 3}, s + 3), random_array({2, 3}, s + 4), ad::sub);
  binary("mul", random_array({2, 3}, s + 5), random_array({2, 3}, s + 6), ad::mul);
  unary("add_scalar", random_array({5}, s + 7), [](const ad::DiffArray& x) { return ad::add_scalar(x, 0.7); });
  unary("mul_scalar", random_array({5}, s + 8), [](const ad::DiffArray& x) { return ad::mul_scalar(x, -1.3); });
  unary("abs", away_from_zero({6}, s + 9), ad::abs);
  unary("square", random_array({6}, s + 10), ad::square);
  unary("log", random_array({6}, s + 11, true, 0.2, 2.0), ad::log);
  unary("relu", away_from_zero({6}, s + 12), ad::relu);
  unary("leaky_relu", away_from_zero({6}, s + 13), [](const ad::DiffArray& x) { return ad::leaky_relu(x, 0.1); });
  unary("soft_sqrt", random_array({6}, s + 14, true, 0.0, 2.0),
        [](const ad::DiffArray& x) { return ad::soft_sqrt(x, 1e-3); });
  unary("sum", random_array({2, 4}, s + 15), ad::sum);
  unary("mean", random_array({2, 4}, s + 16), ad::mean);
  binary("matmul", random_array({3, 4}, s + 17), random_array({4, 2}, s + 18), ad::matmul);
  unary("reshape", random_array({2, 6}, s + 19), [](const ad::DiffArray& x) { return ad::reshape(x, {3, 4}); });
  unary("crop_last", random_array({2, 9}, s + 20), [](const ad::DiffArray& x) { return ad::crop_last(x, 2, 5); });
  unary("center_last", random_array({2, 7}, s + 38), ad::center_last);
  unary("pad_zero", random_array({2, 5}, s + 21),
        [](const ad::DiffArray& x) { return ad::pad_last(x, 2, 3, ad::PadMode::kZero); });
  unary("pad_reflect", random_array({2, 5}, s + 22),
        [](const ad::DiffArray& x) { return ad::pad_last(x, 3, 4, ad::PadMode::kReflect); });
  unary("glu", random_array({2, 4, 3}, s + 23), ad::glu);
  {
    auto x = random_array({2, 2, 11}, s + 24);
    auto k = random_array({3, 2, 4}, s + 25);
    auto b = random_array({3}, s + 26);
    const std::uint64_t ws = mix_seed(s, cases.size());
    cases.push_back({"conv1d", {x, k, b}, [=] { return weighted_sum(ad::conv1d(x, k, b, 2, 1), ws); }});
  }
  {
    auto x = random_array({2, 3, 5}, s + 27);
    auto k = random_array({3, 2, 4}, s + 28);
    auto b = random_array({2}, s + 29);
    const std::uint64_t ws = mix_seed(s, cases.size());
    cases.push_back({"conv_transpose1d", {x, k, b}, [=] { return weighted_sum(ad::conv_transpose1d(x, k, b, 3), ws); }});
  }
  {
    auto x = random_array({2, 2, 7, 6}, s + 30);
    auto k = random_array({3, 2, 3, 2}, s + 31);
    auto b = random_array({3}, s + 32);
    const std::uint64_t ws = mix_seed(s, cases.size());
    cases.push_back({"conv2d", {x, k, b}, [=] { return weighted_sum(ad::conv2d(x, k, b, {2, 1}, {1, 1}), ws); }});
  }
  {
    auto a = random_array({3}, s + 33);
    auto b = random_array({3}, s + 34);
    auto c = random_array({3}, s + 35);
    const std::uint64_t ws = mix_seed(s, cases.size());
    cases.push_back({"add_n", {a, b, c}, [=] {
                       const std::vector<ad::DiffArray> t{a, b, c};
                       return weighted_sum(ad::add_n(t), ws);
                     }});
  }
  unary("stft_power", random_array({2, 1, 40}, s + 36),
        [](const ad::DiffArray& x) { return ad::stft_power(x, {16, 12, 8}); });
  {
    auto p = random_array({2, 3, 9}, s + 37, true, 0.0, 1.0);
    ad::DiffArray fb;
    {
      ad::Tape::Pause pause;
      fb = ad::filterbank_matrix(dsp::mel_filterbank(16000.0, 16, 4, 0.0, 8000.0));
    }
    const std::uint64_t ws = mix_seed(s, cases.size());
    cases.push_back({"mel_project", {p}, [=] { return weighted_sum(ad::mel_project(p, fb), ws); }});
  }
  return cases;
}

}  // namespace msg::testing

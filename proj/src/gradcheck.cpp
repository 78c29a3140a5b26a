#include "msg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "msg/error.hpp"

namespace msg::ad {
namespace {

GradCheckResult run_check(const std::function<DiffArray()>& f, std::span<DiffArray> params, double h,
                          std::size_t max_coords) {
  detail::require(h > 0.0, "check_gradients: step h must be positive");

  std::vector<bool> saved_flags;
  for (auto& p : params) {
    saved_flags.push_back(p.requires_grad());
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape tape;
    Tape::Scope rec(tape);
    DiffArray y = f();
    tape.backward(y);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    analytic.push_back(p.grad());
    p.zero_grad();
  }

  auto eval = [&f] {
    Tape::Pause pause;
    return f().item();
  };

  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].mutable_values();
    const std::size_t n = values.size();
    const std::size_t probes = max_coords == 0 ? n : std::min(n, max_coords);
    for (std::size_t s = 0; s < probes; ++s) {
      const std::size_t i = probes == n ? s : (s * n) / probes;
      const double orig = values[i];
      values[i] = orig + h;
      const double fp = eval();
      values[i] = orig - h;
      const double fm = eval();
      values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[pi][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > result.max_rel_error || !std::isfinite(rel)) {
        result = {rel, pi, i, a, numeric};
      }
    }
  }
  for (std::size_t pi = 0; pi < params.size(); ++pi) params[pi].set_requires_grad(saved_flags[pi]);
  return result;
}

}  // namespace

GradCheckResult check_gradients(const std::function<DiffArray()>& f, std::span<DiffArray> params,
                                double h) {
  return run_check(f, params, h, 0);
}

GradCheckResult check_gradients_sampled(const std::function<DiffArray()>& f,
                                        std::span<DiffArray> params, double h,
                                        std::size_t max_coords) {
  return run_check(f, params, h, max_coords);
}

double check_gradients(const std::function<DiffArray(const DiffArray&)>& f, const DiffArray& x,
                       double h) {
  DiffArray leaf(x.shape(), std::vector<double>(x.values().begin(), x.values().end()), true);
  std::vector<DiffArray> params{leaf};
  return run_check([&] { return f(leaf); }, params, h, 0).max_rel_error;
}

}  // namespace msg::ad

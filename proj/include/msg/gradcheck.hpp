#pragma once

#include <functional>
#include <span>
#include <vector>

#include "msg/diffarray.hpp"

namespace msg::ad {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;  // index into the parameter list
  std::size_t worst_index = 0;  // flat element index within that parameter
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h against reverse mode for
// every coordinate of every parameter. Relative error per coordinate uses
// max(|analytic|, |numeric|, 1e-8) as denominator. Parameters are restored
// bit-for-bit afterwards. `f` must be a scalar function of the parameters'
// current values.
GradCheckResult check_gradients(const std::function<DiffArray()>& f, std::span<DiffArray> params,
                                double h);

// Same, but probes at most `max_coords` coordinates per parameter, spread
// evenly. Used for large networks where a full sweep is too slow.
GradCheckResult check_gradients_sampled(const std::function<DiffArray()>& f,
                                        std::span<DiffArray> params, double h,
                                        std::size_t max_coords);

// Single-input form: f is evaluated on a leaf copy of x.
double check_gradients(const std::function<DiffArray(const DiffArray&)>& f, const DiffArray& x,
                       double h);

}  // namespace msg::ad

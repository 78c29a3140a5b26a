#include "msg/fft.hpp"

#include <fftw3.h>

#include <algorithm>
#include <map>
#include <mutex>

#include "msg/error.hpp"

namespace msg::fft {
namespace {
// FFTW planning is not thread-safe; execution on distinct buffers is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace

struct RealFft::Impl {
  double* real = nullptr;
  fftw_complex* spec = nullptr;
  fftw_plan r2c = nullptr;
  fftw_plan c2r = nullptr;

  ~Impl() {
    std::lock_guard lock(planner_mutex());
    if (r2c) fftw_destroy_plan(r2c);
    if (c2r) fftw_destroy_plan(c2r);
    fftw_free(real);
    fftw_free(spec);
  }
};

RealFft::RealFft(std::size_t n) : n_(n), impl_(std::make_unique<Impl>()) {
  detail::require(n >= 2, "RealFft: length must be >= 2");
  std::lock_guard lock(planner_mutex());
  impl_->real = fftw_alloc_real(n);
  impl_->spec = fftw_alloc_complex(n / 2 + 1);
  const int len = static_cast<int>(n);
  impl_->r2c = fftw_plan_dft_r2c_1d(len, impl_->real, impl_->spec, FFTW_ESTIMATE);
  impl_->c2r = fftw_plan_dft_c2r_1d(len, impl_->spec, impl_->real, FFTW_ESTIMATE);
  if (!impl_->r2c || !impl_->c2r) throw std::runtime_error("RealFft: FFTW planning failed");
}

RealFft::~RealFft() = default;

void RealFft::forward(std::span<const double> in, std::span<std::complex<double>> out) const {
  detail::require(in.size() == n_ && out.size() == bins(), "RealFft::forward: buffer size mismatch");
  std::copy(in.begin(), in.end(), impl_->real);
  fftw_execute(impl_->r2c);
  for (std::size_t k = 0; k < bins(); ++k) out[k] = {impl_->spec[k][0], impl_->spec[k][1]};
}

void RealFft::inverse(std::span<const std::complex<double>> in, std::span<double> out) const {
  detail::require(in.size() == bins() && out.size() == n_, "RealFft::inverse: buffer size mismatch");
  for (std::size_t k = 0; k < bins(); ++k) {
    impl_->spec[k][0] = in[k].real();
    impl_->spec[k][1] = in[k].imag();
  }
  // c2r reads the imaginary parts of DC and Nyquist as zero.
  impl_->spec[0][1] = 0.0;
  if (n_ % 2 == 0) impl_->spec[n_ / 2][1] = 0.0;
  fftw_execute(impl_->c2r);
  std::copy(impl_->real, impl_->real + n_, out.begin());
}

const RealFft& plan_for(std::size_t n) {
  thread_local std::map<std::size_t, std::unique_ptr<RealFft>> cache;
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<RealFft>(n);
  return *slot;
}

}  // namespace msg::fft

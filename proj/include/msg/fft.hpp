#pragma once

#include <complex>
#include <cstddef>
#include <memory>
#include <span>

namespace msg::fft {

// Real-input DFT of fixed length n.
//   forward: X[k] = sum_t x[t] exp(-2 pi i k t / n), k in [0, n/2]
//   inverse: x[t] = sum_{k=0}^{n-1} X[k] exp(+2 pi i k t / n), unnormalized,
//            with X[n-k] = conj(X[k]) implied; Im X[0] and Im X[n/2] ignored.
// Not safe for concurrent use of one instance; see plan_for().
class RealFft {
 public:
  explicit RealFft(std::size_t n);
  ~RealFft();
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  std::size_t size() const { return n_; }
  std::size_t bins() const { return n_ / 2 + 1; }

  void forward(std::span<const double> in, std::span<std::complex<double>> out) const;
  void inverse(std::span<const std::complex<double>> in, std::span<double> out) const;

 private:
  struct Impl;
  std::size_t n_;
  std::unique_ptr<Impl> impl_;
};

// Per-thread cached transform for length n.
const RealFft& plan_for(std::size_t n);

}  // namespace msg::fft

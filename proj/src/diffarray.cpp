#include "msg/diffarray.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>

#include "msg/detail/indexing.hpp"
#include "msg/error.hpp"

namespace msg::ad {
namespace {

thread_local Tape* g_active = nullptr;

using detail::reflect_index;
using detail::require;

std::vector<double>& grad_of(Storage& s) {
  if (s.grad.empty()) s.grad.assign(s.value.size(), 0.0);
  return s.grad;
}

bool wants_grad(const DiffArray& a) { return a.defined() && a.requires_grad(); }

// True when the op must record a backward node.
bool recording(std::initializer_list<const DiffArray*> inputs) {
  if (g_active == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const DiffArray* p) { return p != nullptr && wants_grad(*p); });
}

DiffArray finish(DiffArray out, bool record, Tape::Backprop fn) {
  if (record) {
    out.set_requires_grad(true);
    g_active->record(std::move(fn));
  }
  return out;
}

void check_defined(const DiffArray& a, const char* op) {
  require(a.defined(), std::string(op) + ": undefined input");
}

void check_same_shape(const DiffArray& a, const DiffArray& b, const char* op) {
  check_defined(a, op);
  check_defined(b, op);
  if (a.shape() != b.shape()) {
    detail::contract_fail(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                          " vs " + shape_string(b.shape()));
  }
}

void check_rank(const DiffArray& a, std::size_t rank, const char* op, const char* what) {
  check_defined(a, op);
  if (a.rank() != rank) {
    detail::contract_fail(std::string(op) + ": " + what + " must have rank " +
                          std::to_string(rank) + ", got " + shape_string(a.shape()));
  }
}

// Unary elementwise op with derivative computed from (x, y).
template <typename F, typename D>
DiffArray unary(const DiffArray& a, const char* op, F f, D dfdx) {
  check_defined(a, op);
  const auto x = a.values();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  DiffArray out(a.shape(), std::move(y));
  const bool rec = recording({&a});
  auto sa = a.storage();
  auto so = out.storage();
  return finish(std::move(out), rec, [sa, so, dfdx] {
    if (so->grad.empty() || !sa->requires_grad) return;
    auto& g = grad_of(*sa);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += so->grad[i] * dfdx(sa->value[i], so->value[i]);
  });
}

// Output positions t in [first, last) whose input index t*stride + k - pad
// lands inside [0, in_len).
std::pair<std::ptrdiff_t, std::ptrdiff_t> valid_range(std::ptrdiff_t k, std::ptrdiff_t pad,
                                                      std::ptrdiff_t stride, std::ptrdiff_t in_len,
                                                      std::ptrdiff_t out_len) {
  std::ptrdiff_t first = 0;
  if (pad > k) first = (pad - k + stride - 1) / stride;
  const std::ptrdiff_t hi = in_len - 1 + pad - k;
  if (hi < 0) return {0, 0};
  const std::ptrdiff_t last = std::min(out_len, hi / stride + 1);
  return {first, std::max(first, last)};
}

// Column block [cin*kh*kw][(rb-ra)*ow] for output rows [ra, rb) of one batch
// item; out-of-range taps stay 0.
struct Im2Col {
  std::size_t cin, kh, kw;
  std::ptrdiff_t SH, SW, PH, PW, H, W, OH, OW;

  template <typename F>
  void each(std::ptrdiff_t ra, std::ptrdiff_t rb, F&& f) const {
    const auto block = static_cast<std::size_t>((rb - ra) * OW);
    std::size_t q = 0;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(kh); ++i) {
        auto [r0, r1] = valid_range(i, PH, SH, H, OH);
        r0 = std::max(r0, ra);
        r1 = std::min(r1, rb);
        for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(kw); ++j, ++q) {
          const auto [c0, c1] = valid_range(j, PW, SW, W, OW);
          for (std::ptrdiff_t r = r0; r < r1; ++r) {
            const std::ptrdiff_t xrow = static_cast<std::ptrdiff_t>(ci) * H * W + (r * SH + i - PH) * W + j - PW;
            const std::ptrdiff_t crow = static_cast<std::ptrdiff_t>(q * block) + (r - ra) * OW;
            f(xrow, crow, c0, c1);
          }
        }
      }
    }
  }

  void gather(const double* x, double* cols, std::ptrdiff_t ra, std::ptrdiff_t rb) const {
    std::fill_n(cols, cin * kh * kw * static_cast<std::size_t>((rb - ra) * OW), 0.0);
    each(ra, rb, [&](std::ptrdiff_t xrow, std::ptrdiff_t crow, std::ptrdiff_t c0, std::ptrdiff_t c1) {
      for (std::ptrdiff_t c = c0; c < c1; ++c) cols[crow + c] = x[xrow + c * SW];
    });
  }

  void scatter(const double* cols, double* gx, std::ptrdiff_t ra, std::ptrdiff_t rb) const {
    each(ra, rb, [&](std::ptrdiff_t xrow, std::ptrdiff_t crow, std::ptrdiff_t c0, std::ptrdiff_t c1) {
      for (std::ptrdiff_t c = c0; c < c1; ++c) gx[xrow + c * SW] += cols[crow + c];
    });
  }

  // Output rows per block so a column block stays around 256 KB.
  std::ptrdiff_t rows_per_block() const {
    const auto taps = static_cast<std::ptrdiff_t>(cin * kh * kw);
    return std::max<std::ptrdiff_t>(1, 32768 / std::max<std::ptrdiff_t>(1, taps * OW));
  }
};

// out[co][t] += sum_q w[co][q] * cols[q][t]; out rows are `stride` apart.
void gemm_accumulate(const double* w, const double* cols, double* out, std::size_t cout, std::size_t taps,
                     std::size_t n, std::size_t stride) {
  std::size_t co = 0;
  for (; co + 4 <= cout; co += 4) {
    double* __restrict o0 = out + co * stride;
    double* __restrict o1 = o0 + stride;
    double* __restrict o2 = o1 + stride;
    double* __restrict o3 = o2 + stride;
    for (std::size_t q = 0; q < taps; ++q) {
      const double w0 = w[co * taps + q], w1 = w[(co + 1) * taps + q];
      const double w2 = w[(co + 2) * taps + q], w3 = w[(co + 3) * taps + q];
      const double* __restrict c = cols + q * n;
      for (std::size_t t = 0; t < n; ++t) {
        const double v = c[t];
        o0[t] += w0 * v;
        o1[t] += w1 * v;
        o2[t] += w2 * v;
        o3[t] += w3 * v;
      }
    }
  }
  for (; co < cout; ++co) {
    double* __restrict o = out + co * stride;
    for (std::size_t q = 0; q < taps; ++q) {
      const double wv = w[co * taps + q];
      const double* __restrict c = cols + q * n;
      for (std::size_t t = 0; t < n; ++t) o[t] += wv * c[t];
    }
  }
}

// gw[co][q] += sum_t g[co][t] * cols[q][t].
void gemm_dot(const double* g, const double* cols, double* gw, std::size_t cout, std::size_t taps, std::size_t n,
              std::size_t stride) {
  for (std::size_t q = 0; q < taps; ++q) {
    const double* __restrict c = cols + q * n;
    std::size_t co = 0;
    for (; co + 4 <= cout; co += 4) {
      const double* __restrict g0 = g + co * stride;
      const double* __restrict g1 = g0 + stride;
      const double* __restrict g2 = g1 + stride;
      const double* __restrict g3 = g2 + stride;
      double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        const double v = c[t];
        a0 += g0[t] * v;
        a1 += g1[t] * v;
        a2 += g2[t] * v;
        a3 += g3[t] * v;
      }
      gw[co * taps + q] += a0;
      gw[(co + 1) * taps + q] += a1;
      gw[(co + 2) * taps + q] += a2;
      gw[(co + 3) * taps + q] += a3;
    }
    for (; co < cout; ++co) {
      const double* __restrict gr = g + co * stride;
      double acc = 0.0;
      for (std::size_t t = 0; t < n; ++t) acc += gr[t] * c[t];
      gw[co * taps + q] += acc;
    }
  }
}

// gcols[q][t] += sum_co w[co][q] * g[co][t].
void gemm_transpose_accumulate(const double* w, const double* g, double* gcols, std::size_t cout, std::size_t taps,
                               std::size_t n, std::size_t stride) {
  for (std::size_t q = 0; q < taps; ++q) {
    double* __restrict gc = gcols + q * n;
    std::size_t co = 0;
    for (; co + 4 <= cout; co += 4) {
      const double* __restrict g0 = g + co * stride;
      const double* __restrict g1 = g0 + stride;
      const double* __restrict g2 = g1 + stride;
      const double* __restrict g3 = g2 + stride;
      const double w0 = w[co * taps + q], w1 = w[(co + 1) * taps + q];
      const double w2 = w[(co + 2) * taps + q], w3 = w[(co + 3) * taps + q];
      for (std::size_t t = 0; t < n; ++t) gc[t] += w0 * g0[t] + w1 * g1[t] + w2 * g2[t] + w3 * g3[t];
    }
    for (; co < cout; ++co) {
      const double* __restrict gr = g + co * stride;
      const double wv = w[co * taps + q];
      for (std::size_t t = 0; t < n; ++t) gc[t] += wv * gr[t];
    }
  }
}

std::vector<double>& scratch(std::size_t slot, std::size_t n) {
  thread_local std::vector<double> buffers[2];
  auto& v = buffers[slot];
  if (v.size() < n) v.resize(n);
  return v;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------- DiffArray

DiffArray::DiffArray(Shape shape, std::vector<double> values, bool requires_grad)
    : storage_(std::make_shared<Storage>()) {
  if (numel(shape) != values.size()) {
    detail::contract_fail("DiffArray: shape " + shape_string(shape) + " holds " +
                          std::to_string(numel(shape)) + " elements, got " +
                          std::to_string(values.size()));
  }
  storage_->shape = std::move(shape);
  storage_->value = std::move(values);
  storage_->requires_grad = requires_grad;
}

DiffArray DiffArray::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

DiffArray DiffArray::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = numel(shape);
  return DiffArray(std::move(shape), std::vector<double>(n, value), requires_grad);
}

DiffArray DiffArray::scalar(double value, bool requires_grad) { return DiffArray({1}, {value}, requires_grad); }

const Shape& DiffArray::shape() const {
  require(defined(), "DiffArray: undefined array");
  return storage_->shape;
}

std::size_t DiffArray::dim(std::size_t axis) const {
  const auto& s = shape();
  require(axis < s.size(), "DiffArray::dim: axis " + std::to_string(axis) + " out of range for " +
                               shape_string(s));
  return s[axis];
}

std::size_t DiffArray::size() const { return defined() ? storage_->value.size() : 0; }

std::span<const double> DiffArray::values() const {
  require(defined(), "DiffArray: undefined array");
  return storage_->value;
}

std::span<double> DiffArray::mutable_values() {
  require(defined(), "DiffArray: undefined array");
  return storage_->value;
}

double DiffArray::item() const {
  require(size() == 1, "DiffArray::item: array has " + std::to_string(size()) + " elements");
  return storage_->value[0];
}

std::vector<double> DiffArray::grad() const {
  require(defined(), "DiffArray: undefined array");
  if (storage_->grad.empty()) return std::vector<double>(storage_->value.size(), 0.0);
  return storage_->grad;
}

bool DiffArray::has_grad() const { return defined() && !storage_->grad.empty(); }

void DiffArray::zero_grad() {
  if (defined()) storage_->grad.clear();
}

bool DiffArray::requires_grad() const { return defined() && storage_->requires_grad; }

void DiffArray::set_requires_grad(bool on) {
  require(defined(), "DiffArray: undefined array");
  storage_->requires_grad = on;
}

DiffArray DiffArray::detached() const {
  require(defined(), "DiffArray: undefined array");
  return DiffArray(storage_->shape, storage_->value, false);
}

// --------------------------------------------------------------------- Tape

Tape::~Tape() {
  if (g_active == this) g_active = nullptr;
}

void Tape::backward(const DiffArray& root) {
  require(root.defined(), "backward: undefined root");
  if (root.size() != 1) {
    nodes_.clear();
    detail::contract_fail("backward: root must be a scalar, got shape " + shape_string(root.shape()));
  }
  if (root.requires_grad()) {
    root.storage()->grad.assign(1, 1.0);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }
  nodes_.clear();
}

Tape* Tape::active() { return g_active; }

Tape::Scope::Scope(Tape& tape) : previous_(g_active) { g_active = &tape; }
Tape::Scope::~Scope() { g_active = previous_; }

Tape::Pause::Pause() : previous_(g_active) { g_active = nullptr; }
Tape::Pause::~Pause() { g_active = previous_; }

// -------------------------------------------------------------- elementwise

DiffArray add(const DiffArray& a, const DiffArray& b) {
  check_same_shape(a, b, "add");
  const auto x = a.values();
  const auto y = b.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  DiffArray result(a.shape(), std::move(out));
  auto sa = a.storage(), sb = b.storage(), so = result.storage();
  return finish(std::move(result), recording({&a, &b}), [sa, sb, so] {
    if (so->grad.empty()) return;
    for (auto* s : {sa.get(), sb.get()}) {
      if (!s->requires_grad) continue;
      auto& g = grad_of(*s);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += so->grad[i];
    }
  });
}

DiffArray sub(const DiffArray& a, const DiffArray& b) {
  check_same_shape(a, b, "sub");
  const auto x = a.values();
  const auto y = b.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  DiffArray result(a.shape(), std::move(out));
  auto sa = a.storage(), sb = b.storage(), so = result.storage();
  return finish(std::move(result), recording({&a, &b}), [sa, sb, so] {
    if (so->grad.empty()) return;
    if (sa->requires_grad) {
      auto& g = grad_of(*sa);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += so->grad[i];
    }
    if (sb->requires_grad) {
      auto& g = grad_of(*sb);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= so->grad[i];
    }
  });
}

DiffArray mul(const DiffArray& a, const DiffArray& b) {
  check_same_shape(a, b, "mul");
  const auto x = a.values();
  const auto y = b.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  DiffArray result(a.shape(), std::move(out));
  auto sa = a.storage(), sb = b.storage(), so = result.storage();
  return finish(std::move(result), recording({&a, &b}), [sa, sb, so] {
    if (so->grad.empty()) return;
    if (sa->requires_grad) {
      auto& g = grad_of(*sa);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += so->grad[i] * sb->value[i];
    }
    if (sb->requires_grad) {
      auto& g = grad_of(*sb);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += so->grad[i] * sa->value[i];
    }
  });
}

DiffArray add_scalar(const DiffArray& a, double c) {
  return unary(a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

DiffArray mul_scalar(const DiffArray& a, double c) {
  return unary(a, "mul_scalar", [c](double x) { return x * c; }, [c](double, double) { return c; });
}

DiffArray abs(const DiffArray& a) {
  return unary(
      a, "abs", [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

DiffArray square(const DiffArray& a) {
  return unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

DiffArray log(const DiffArray& a) {
  check_defined(a, "log");
  for (double v : a.values()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
  }
  return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

DiffArray relu(const DiffArray& a) {
  return unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

DiffArray leaky_relu(const DiffArray& a, double slope) {
  require(slope > 0.0 && slope < 1.0, "leaky_relu: slope must lie in (0,1)");
  return unary(
      a, "leaky_relu", [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

DiffArray soft_sqrt(const DiffArray& a, double eps) {
  require(eps > 0.0, "soft_sqrt: eps must be positive");
  const double offset = std::sqrt(eps);
  check_defined(a, "soft_sqrt");
  for (double v : a.values()) {
    if (!(v + eps > 0.0)) throw DomainError("soft_sqrt: input below -eps");
  }
  return unary(
      a, "soft_sqrt", [eps, offset](double x) { return std::sqrt(x + eps) - offset; },
      [offset](double, double y) { return 0.5 / (y + offset); });
}

// ---------------------------------------------------------------- reductions

DiffArray sum(const DiffArray& a) {
  check_defined(a, "sum");
  const auto x = a.values();
  const double total = std::accumulate(x.begin(), x.end(), 0.0);
  DiffArray result = DiffArray::scalar(total);
  auto sa = a.storage(), so = result.storage();
  return finish(std::move(result), recording({&a}), [sa, so] {
    if (so->grad.empty() || !sa->requires_grad) return;
    auto& g = grad_of(*sa);
    const double go = so->grad[0];
    for (double& v : g) v += go;
  });
}

DiffArray mean(const DiffArray& a) {
  check_defined(a, "mean");
  require(a.size() > 0, "mean: empty input");
  const auto x = a.values();
  const double n = static_cast<double>(x.size());
  DiffArray result = DiffArray::scalar(std::accumulate(x.begin(), x.end(), 0.0) / n);
  auto sa = a.storage(), so = result.storage();
  return finish(std::move(result), recording({&a}), [sa, so, n] {
    if (so->grad.empty() || !sa->requires_grad) return;
    auto& g = grad_of(*sa);
    const double go = so->grad[0] / n;
    for (double& v : g) v += go;
  });
}

DiffArray add_n(std::span<const DiffArray> terms) {
  require(!terms.empty(), "add_n: no terms");
  DiffArray total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  return total;
}

// -------------------------------------------------------------------- matmul

DiffArray matmul(const DiffArray& a, const DiffArray& b) {
  check_rank(a, 2, "matmul", "left operand");
  check_rank(b, 2, "matmul", "right operand");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    detail::contract_fail("matmul: inner dimensions differ (" + std::to_string(k) + " vs " +
                          std::to_string(b.dim(0)) + ")");
  }
  const auto x = a.values();
  const auto y = b.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = x[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = y.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  DiffArray result({m, n}, std::move(out));
  auto sa = a.storage(), sb = b.storage(), so = result.storage();
  return finish(std::move(result), recording({&a, &b}), [sa, sb, so, m, k, n] {
    if (so->grad.empty()) return;
    const auto& go = so->grad;
    if (sa->requires_grad) {
      auto& ga = grad_of(*sa);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = sb->value.data() + p * n;
          const double* grow = go.data() + i * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (sb->requires_grad) {
      auto& gb = grad_of(*sb);
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = go.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = sa->value[i * k + p];
          if (aip == 0.0) continue;
          double* gbrow = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
        }
      }
    }
  });
}

// -------------------------------------------------------------------- shapes

DiffArray reshape(const DiffArray& a, Shape shape) {
  check_defined(a, "reshape");
  if (numel(shape) != a.size()) {
    detail::contract_fail("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  const auto x = a.values();
  DiffArray result(std::move(shape), std::vector<double>(x.begin(), x.end()));
  auto sa = a.storage(), so = result.storage();
  return finish(std::move(result), recording({&a}), [sa, so] {
    if (so->grad.empty() || !sa->requires_grad) return;
    auto& g = grad_of(*sa);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += so->grad[i];
  });
}

DiffArray crop_last(const DiffArray& a, std::size_t begin, std::size_t length) {
  check_defined(a, "crop_last");
  require(a.rank() >= 1, "crop_last: rank-0 input");
  const std::size_t last = a.shape().back();
  if (begin + length > last) {
    detail::contract_fail("crop_last: window [" + std::to_string(begin) + ", " +
                          std::to_string(begin + length) + ") exceeds last dimension " +
                          std::to_string(last));
  }
  const std::size_t rows = a.size() / std::max<std::size_t>(last, 1);
  const auto x = a.values();
  std::vector<double> out(rows * length);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.data() + r * last + begin, length, out.data() + r * length);
  }
  Shape shape = a.shape();
  shape.back() = length;
  DiffArray result(std::move(shape), std::move(out));
  auto sa = a.storage(), so = result.storage();
  return finish(std::move(result), recording({&a}), [sa, so, rows, last, begin, length] {
    if (so->grad.empty() || !sa->requires_grad) return;
    auto& g = grad_of(*sa);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < length; ++j) g[r * last + begin + j] += so->grad[r * length + j];
    }
  });
}

DiffArray center_last(const DiffArray& a) {
  check_defined(a, "center_last");
  require(a.rank() >= 1 && a.shape().back() >= 1, "center_last: empty last dimension");
  const std::size_t last = a.shape().back();
  const std::size_t rows = a.size() / last;
  const auto x = a.values();
  std::vector<double> out(x.begin(), x.end());
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * last;
    const double m = std::accumulate(row, row + last, 0.0) / static_cast<double>(last);
    for (std::size_t j = 0; j < last; ++j) row[j] -= m;
  }
  DiffArray result(a.shape(), std::move(out));
  auto sa = a.storage(), so = result.storage();
  return finish(std::move(result), recording({&a}), [sa, so, rows, last] {
    if (so->grad.empty() || !sa->requires_grad) return;
    auto& g = grad_of(*sa);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* go = so->grad.data() + r * last;
      const double m = std::accumulate(go, go + last, 0.0) / static_cast<double>(last);
      for (std::size_t j = 0; j < last; ++j) g[r * last + j] += go[j] - m;
    }
  });
}

DiffArray pad_last(const DiffArray& a, std::size_t left, std::size_t right, PadMode mode) {
  check_defined(a, "pad_last");
  require(a.rank() >= 1, "pad_last: rank-0 input");
  const std::size_t n = a.shape().back();
  require(n >= 1, "pad_last: empty last dimension");
  const std::size_t width = n + left + right;
  const std::size_t rows = a.size() / n;
  // Source index for every padded position; npos marks a zero.
  constexpr std::size_t kZero = static_cast<std::size_t>(-1);
  std::vector<std::size_t> source(width);
  for (std::size_t j = 0; j < width; ++j) {
    const auto pos = static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(left);
    if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(n)) {
      source[j] = static_cast<std::size_t>(pos);
    } else if (mode == PadMode::kReflect) {
      source[j] = reflect_index(pos, static_cast<std::ptrdiff_t>(n));
    } else {
      source[j] = kZero;
    }
  }
  const auto x = a.values();
  std::vector<double> out(rows * width, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < width; ++j) {
      if (source[j] != kZero) out[r * width + j] = x[r * n + source[j]];
    }
  }
  Shape shape = a.shape();
  shape.back() = width;
  DiffArray result(std::move(shape), std::move(out));
  auto sa = a.storage(), so = result.storage();
  return finish(std::move(result), recording({&a}), [sa, so, rows, n, width, source = std::move(source)] {
    if (so->grad.empty() || !sa->requires_grad) return;
    auto& g = grad_of(*sa);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < width; ++j) {
        if (source[j] != kZero) g[r * n + source[j]] += so->grad[r * width + j];
      }
    }
  });
}

// ----------------------------------------------------------------------- glu

DiffArray glu(const DiffArray& a) {
  check_defined(a, "glu");
  require(a.rank() >= 2, "glu: input needs a channel axis, got " + shape_string(a.shape()));
  const std::size_t batch = a.dim(0), channels = a.dim(1);
  if (channels % 2 != 0) {
    detail::contract_fail("glu: channel dimension must be even, got " + std::to_string(channels));
  }
  const std::size_t half = channels / 2;
  const std::size_t inner = a.size() / (batch * channels);
  const std::size_t block = half * inner;
  const auto x = a.values();
  std::vector<double> out(batch * block);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* lin = x.data() + b * 2 * block;
    const double* gate = lin + block;
    double* o = out.data() + b * block;
    for (std::size_t i = 0; i < block; ++i) o[i] = lin[i] / (1.0 + std::exp(-gate[i]));
  }
  Shape shape = a.shape();
  shape[1] = half;
  DiffArray result(std::move(shape), std::move(out));
  auto sa = a.storage(), so = result.storage();
  return finish(std::move(result), recording({&a}), [sa, so, batch, block] {
    if (so->grad.empty() || !sa->requires_grad) return;
    auto& g = grad_of(*sa);
    for (std::size_t b = 0; b < batch; ++b) {
      const double* lin = sa->value.data() + b * 2 * block;
      const double* gate = lin + block;
      const double* go = so->grad.data() + b * block;
      double* glin = g.data() + b * 2 * block;
      double* ggate = glin + block;
      for (std::size_t i = 0; i < block; ++i) {
        const double s = 1.0 / (1.0 + std::exp(-gate[i]));
        glin[i] += go[i] * s;
        ggate[i] += go[i] * lin[i] * s * (1.0 - s);
      }
    }
  });
}

// ---------------------------------------------------------------------- conv

DiffArray conv1d(const DiffArray& input, const DiffArray& kernel, const DiffArray& bias,
                 std::size_t stride, std::size_t pad) {
  check_rank(input, 3, "conv1d", "input");
  check_rank(kernel, 3, "conv1d", "kernel");
  require(stride >= 1, "conv1d: stride must be >= 1");
  const std::size_t batch = input.dim(0), cin = input.dim(1), len = input.dim(2);
  const std::size_t cout = kernel.dim(0), ksize = kernel.dim(2);
  if (kernel.dim(1) != cin) {
    detail::contract_fail("conv1d: kernel in-channels " + std::to_string(kernel.dim(1)) +
                          " != input channels " + std::to_string(cin));
  }
  if (ksize == 0 || ksize > len + 2 * pad) {
    detail::contract_fail("conv1d: kernel length " + std::to_string(ksize) +
                          " exceeds padded input length " + std::to_string(len + 2 * pad));
  }
  if (bias.defined() && bias.shape() != Shape{cout}) {
    detail::contract_fail("conv1d: bias shape " + shape_string(bias.shape()) + " != [" +
                          std::to_string(cout) + "]");
  }
  const std::size_t out_len = (len + 2 * pad - ksize) / stride + 1;
  const auto x = input.values();
  const auto w = kernel.values();
  std::vector<double> out(batch * cout * out_len, 0.0);

  const auto S = static_cast<std::ptrdiff_t>(stride);
  const auto P = static_cast<std::ptrdiff_t>(pad);
  const auto L = static_cast<std::ptrdiff_t>(len);
  const auto OL = static_cast<std::ptrdiff_t>(out_len);

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t co = 0; co < cout; ++co) {
      double* o = out.data() + (b * cout + co) * out_len;
      if (bias.defined()) std::fill_n(o, out_len, bias.values()[co]);
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* xs = x.data() + (b * cin + ci) * len;
        const double* ws = w.data() + (co * cin + ci) * ksize;
        for (std::size_t k = 0; k < ksize; ++k) {
          const double wk = ws[k];
          const auto K = static_cast<std::ptrdiff_t>(k);
          const auto [t0, t1] = valid_range(K, P, S, L, OL);
          for (std::ptrdiff_t t = t0; t < t1; ++t) o[t] += wk * xs[t * S + K - P];
        }
      }
    }
  }

  DiffArray result({batch, cout, out_len}, std::move(out));
  auto si = input.storage(), sk = kernel.storage(), so = result.storage();
  std::shared_ptr<Storage> sbias = bias.defined() ? bias.storage() : nullptr;
  return finish(std::move(result), recording({&input, &kernel, &bias}),
                [si, sk, sbias, so, batch, cin, cout, ksize, len, out_len, S, P, L, OL] {
                  if (so->grad.empty()) return;
                  const auto& go = so->grad;
                  double* gi = si->requires_grad ? grad_of(*si).data() : nullptr;
                  double* gk = sk->requires_grad ? grad_of(*sk).data() : nullptr;
                  double* gb = (sbias && sbias->requires_grad) ? grad_of(*sbias).data() : nullptr;
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t co = 0; co < cout; ++co) {
                      const double* g = go.data() + (b * cout + co) * out_len;
                      if (gb) {
                        double acc = 0.0;
                        for (std::size_t t = 0; t < out_len; ++t) acc += g[t];
                        gb[co] += acc;
                      }
                      for (std::size_t ci = 0; ci < cin; ++ci) {
                        const std::size_t xoff = (b * cin + ci) * len;
                        const std::size_t woff = (co * cin + ci) * ksize;
                        for (std::size_t k = 0; k < ksize; ++k) {
                          const auto K = static_cast<std::ptrdiff_t>(k);
                          const auto [t0, t1] = valid_range(K, P, S, L, OL);
                          if (gk) {
                            const double* xs = si->value.data() + xoff;
                            double acc = 0.0;
                            for (std::ptrdiff_t t = t0; t < t1; ++t) acc += g[t] * xs[t * S + K - P];
                            gk[woff + k] += acc;
                          }
                          if (gi) {
                            const double wk = sk->value[woff + k];
                            double* gx = gi + xoff;
                            for (std::ptrdiff_t t = t0; t < t1; ++t) gx[t * S + K - P] += wk * g[t];
                          }
                        }
                      }
                    }
                  }
                });
}

DiffArray conv_transpose1d(const DiffArray& input, const DiffArray& kernel, const DiffArray& bias,
                           std::size_t stride) {
  check_rank(input, 3, "conv_transpose1d", "input");
  check_rank(kernel, 3, "conv_transpose1d", "kernel");
  require(stride >= 1, "conv_transpose1d: stride must be >= 1");
  const std::size_t batch = input.dim(0), cin = input.dim(1), len = input.dim(2);
  const std::size_t cout = kernel.dim(1), ksize = kernel.dim(2);
  if (kernel.dim(0) != cin) {
    detail::contract_fail("conv_transpose1d: kernel in-channels " + std::to_string(kernel.dim(0)) +
                          " != input channels " + std::to_string(cin));
  }
  require(len >= 1 && ksize >= 1, "conv_transpose1d: empty input or kernel");
  if (bias.defined() && bias.shape() != Shape{cout}) {
    detail::contract_fail("conv_transpose1d: bias shape " + shape_string(bias.shape()) + " != [" +
                          std::to_string(cout) + "]");
  }
  const std::size_t out_len = (len - 1) * stride + ksize;
  const auto x = input.values();
  const auto w = kernel.values();
  std::vector<double> out(batch * cout * out_len, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    if (bias.defined()) {
      for (std::size_t co = 0; co < cout; ++co) {
        std::fill_n(out.data() + (b * cout + co) * out_len, out_len, bias.values()[co]);
      }
    }
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* xs = x.data() + (b * cin + ci) * len;
      for (std::size_t co = 0; co < cout; ++co) {
        const double* ws = w.data() + (ci * cout + co) * ksize;
        double* o = out.data() + (b * cout + co) * out_len;
        for (std::size_t i = 0; i < len; ++i) {
          const double xi = xs[i];
          double* oi = o + i * stride;
          for (std::size_t k = 0; k < ksize; ++k) oi[k] += xi * ws[k];
        }
      }
    }
  }
  DiffArray result({batch, cout, out_len}, std::move(out));
  auto si = input.storage(), sk = kernel.storage(), so = result.storage();
  std::shared_ptr<Storage> sbias = bias.defined() ? bias.storage() : nullptr;
  return finish(std::move(result), recording({&input, &kernel, &bias}),
                [si, sk, sbias, so, batch, cin, cout, ksize, len, out_len, stride] {
                  if (so->grad.empty()) return;
                  const auto& go = so->grad;
                  double* gi = si->requires_grad ? grad_of(*si).data() : nullptr;
                  double* gk = sk->requires_grad ? grad_of(*sk).data() : nullptr;
                  double* gb = (sbias && sbias->requires_grad) ? grad_of(*sbias).data() : nullptr;
                  for (std::size_t b = 0; b < batch; ++b) {
                    if (gb) {
                      for (std::size_t co = 0; co < cout; ++co) {
                        const double* g = go.data() + (b * cout + co) * out_len;
                        double acc = 0.0;
                        for (std::size_t t = 0; t < out_len; ++t) acc += g[t];
                        gb[co] += acc;
                      }
                    }
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                      const double* xs = si->value.data() + (b * cin + ci) * len;
                      for (std::size_t co = 0; co < cout; ++co) {
                        const std::size_t woff = (ci * cout + co) * ksize;
                        const double* ws = sk->value.data() + woff;
                        const double* g = go.data() + (b * cout + co) * out_len;
                        for (std::size_t i = 0; i < len; ++i) {
                          const double* gi_row = g + i * stride;
                          if (gi) {
                            double acc = 0.0;
                            for (std::size_t k = 0; k < ksize; ++k) acc += ws[k] * gi_row[k];
                            gi[(b * cin + ci) * len + i] += acc;
                          }
                          if (gk) {
                            const double xi = xs[i];
                            for (std::size_t k = 0; k < ksize; ++k) gk[woff + k] += xi * gi_row[k];
                          }
                        }
                      }
                    }
                  }
                });
}

DiffArray conv2d(const DiffArray& input, const DiffArray& kernel, const DiffArray& bias, Stride2 stride,
                 Pad2 pad) {
  check_rank(input, 4, "conv2d", "input");
  check_rank(kernel, 4, "conv2d", "kernel");
  require(stride.h >= 1 && stride.w >= 1, "conv2d: strides must be >= 1");
  const std::size_t batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != cin) {
    detail::contract_fail("conv2d: kernel in-channels " + std::to_string(kernel.dim(1)) +
                          " != input channels " + std::to_string(cin));
  }
  if (kh == 0 || kh > h + 2 * pad.h) {
    detail::contract_fail("conv2d: kernel height " + std::to_string(kh) + " exceeds padded height " +
                          std::to_string(h + 2 * pad.h));
  }
  if (kw == 0 || kw > w + 2 * pad.w) {
    detail::contract_fail("conv2d: kernel width " + std::to_string(kw) + " exceeds padded width " +
                          std::to_string(w + 2 * pad.w));
  }
  if (bias.defined() && bias.shape() != Shape{cout}) {
    detail::contract_fail("conv2d: bias shape " + shape_string(bias.shape()) + " != [" +
                          std::to_string(cout) + "]");
  }
  const std::size_t oh = (h + 2 * pad.h - kh) / stride.h + 1;
  const std::size_t ow = (w + 2 * pad.w - kw) / stride.w + 1;
  const auto SH = static_cast<std::ptrdiff_t>(stride.h), SW = static_cast<std::ptrdiff_t>(stride.w);
  const auto PH = static_cast<std::ptrdiff_t>(pad.h), PW = static_cast<std::ptrdiff_t>(pad.w);
  const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  const auto OH = static_cast<std::ptrdiff_t>(oh), OW = static_cast<std::ptrdiff_t>(ow);

  const std::size_t taps = cin * kh * kw;
  const std::size_t plane = oh * ow;
  const Im2Col geom{cin, kh, kw, SH, SW, PH, PW, H, W, OH, OW};
  const std::ptrdiff_t rows = geom.rows_per_block();

  const auto x = input.values();
  const auto wt = kernel.values();
  std::vector<double> out(batch * cout * plane, 0.0);
  auto& cols = scratch(0, taps * static_cast<std::size_t>(rows * OW));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::ptrdiff_t ra = 0; ra < OH; ra += rows) {
      const std::ptrdiff_t rb = std::min(OH, ra + rows);
      const auto n = static_cast<std::size_t>((rb - ra) * OW);
      geom.gather(x.data() + b * cin * h * w, cols.data(), ra, rb);
      double* ob = out.data() + b * cout * plane + static_cast<std::size_t>(ra * OW);
      if (bias.defined()) {
        for (std::size_t co = 0; co < cout; ++co) std::fill_n(ob + co * plane, n, bias.values()[co]);
      }
      gemm_accumulate(wt.data(), cols.data(), ob, cout, taps, n, plane);
    }
  }
  DiffArray result({batch, cout, oh, ow}, std::move(out));
  auto si = input.storage(), sk = kernel.storage(), so = result.storage();
  std::shared_ptr<Storage> sbias = bias.defined() ? bias.storage() : nullptr;
  return finish(std::move(result), recording({&input, &kernel, &bias}),
                [si, sk, sbias, so, batch, cin, cout, h, w, taps, plane, geom, rows] {
                  if (so->grad.empty()) return;
                  const auto& go = so->grad;
                  double* gi = si->requires_grad ? grad_of(*si).data() : nullptr;
                  double* gk = sk->requires_grad ? grad_of(*sk).data() : nullptr;
                  double* gb = (sbias && sbias->requires_grad) ? grad_of(*sbias).data() : nullptr;
                  const std::size_t cap = taps * static_cast<std::size_t>(rows * geom.OW);
                  auto& cols = scratch(0, cap);
                  auto& gcols = scratch(1, gi ? cap : 0);
                  if (gb) {
                    for (std::size_t b = 0; b < batch; ++b) {
                      for (std::size_t co = 0; co < cout; ++co) {
                        const double* g = go.data() + (b * cout + co) * plane;
                        double acc = 0.0;
                        for (std::size_t t = 0; t < plane; ++t) acc += g[t];
                        gb[co] += acc;
                      }
                    }
                  }
                  if (!gk && !gi) return;
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::ptrdiff_t ra = 0; ra < geom.OH; ra += rows) {
                      const std::ptrdiff_t rb = std::min(geom.OH, ra + rows);
                      const auto n = static_cast<std::size_t>((rb - ra) * geom.OW);
                      if (gk) geom.gather(si->value.data() + b * cin * h * w, cols.data(), ra, rb);
                      if (gi) std::fill_n(gcols.begin(), taps * n, 0.0);
                      const double* gblock = go.data() + b * cout * plane + static_cast<std::size_t>(ra * geom.OW);
                      if (gk) gemm_dot(gblock, cols.data(), gk, cout, taps, n, plane);
                      if (gi) gemm_transpose_accumulate(sk->value.data(), gblock, gcols.data(), cout, taps, n, plane);
                      if (gi) geom.scatter(gcols.data(), gi + b * cin * h * w, ra, rb);
                    }
                  }
                });
}

}  // namespace msg::ad

#pragma once

// Reverse-mode automatic differentiation over dense row-major float64 arrays.
//
// A DiffArray is a cheap handle to shared storage. Operations record a
// backward closure on the thread's active Tape whenever a tape is open and at
// least one input requires a gradient; with no open tape they run as plain
// numeric kernels. Tape::backward replays the closures in reverse recording
// order, accumulating (+=) into every storage that requires a gradient, and
// then frees the tape.
//
//   ad::Tape tape;
//   {
//     ad::Tape::Scope rec(tape);
//     auto loss = ad::mean(ad::square(model(x)));
//     tape.backward(loss);
//   }

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace msg::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Storage {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient reaches this storage
  bool requires_grad = false;
};

class DiffArray {
 public:
  DiffArray() = default;
  DiffArray(Shape shape, std::vector<double> values, bool requires_grad = false);

  static DiffArray zeros(Shape shape, bool requires_grad = false);
  static DiffArray full(Shape shape, double value, bool requires_grad = false);
  static DiffArray scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(storage_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> values() const;
  // In-place access for optimizers and finite differences. Never call this
  // while a tape that saw this array is waiting for backward.
  std::span<double> mutable_values();
  double item() const;

  // Gradient after backward; all zeros if nothing reached this array.
  std::vector<double> grad() const;
  bool has_grad() const;
  void zero_grad();

  bool requires_grad() const;
  void set_requires_grad(bool on);

  // Constant copy of the current values, cut off from any tape.
  DiffArray detached() const;

  const std::shared_ptr<Storage>& storage() const { return storage_; }

 private:
  std::shared_ptr<Storage> storage_;
};

class Tape {
 public:
  using Backprop = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  // Seeds d(root)/d(root) = 1, propagates through every recorded node once in
  // reverse order and clears the tape. Root must hold exactly one element.
  void backward(const DiffArray& root);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }
  void record(Backprop fn) { nodes_.push_back(std::move(fn)); }

  // The tape ops record onto in this thread, or nullptr.
  static Tape* active();

  // Makes a tape active for the enclosing block; restores the previous one.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  // Suspends recording for the enclosing block.
  class Pause {
   public:
    Pause();
    ~Pause();
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

   private:
    Tape* previous_;
  };

 private:
  std::vector<Backprop> nodes_;
};

// Elementwise, same shape (no broadcasting).
DiffArray add(const DiffArray& a, const DiffArray& b);
DiffArray sub(const DiffArray& a, const DiffArray& b);
DiffArray mul(const DiffArray& a, const DiffArray& b);
DiffArray add_scalar(const DiffArray& a, double c);
DiffArray mul_scalar(const DiffArray& a, double c);
DiffArray abs(const DiffArray& a);  // derivative at 0 is 0
DiffArray square(const DiffArray& a);
DiffArray log(const DiffArray& a);  // DomainError on values <= 0
DiffArray relu(const DiffArray& a);
DiffArray leaky_relu(const DiffArray& a, double slope);  // derivative at 0 is slope
// sqrt(a + eps) - sqrt(eps): exact zero at zero with a finite derivative.
DiffArray soft_sqrt(const DiffArray& a, double eps);

// Reductions to a scalar of shape {1}.
DiffArray sum(const DiffArray& a);
DiffArray mean(const DiffArray& a);

DiffArray matmul(const DiffArray& a, const DiffArray& b);

// Same values, new shape with equal element count.
DiffArray reshape(const DiffArray& a, Shape shape);

// Keep [begin, begin + length) along the last axis.
DiffArray crop_last(const DiffArray& a, std::size_t begin, std::size_t length);

// Subtract the mean along the last axis from every row.
DiffArray center_last(const DiffArray& a);

enum class PadMode { kZero, kReflect };
// Pad the last axis; reflect mirrors without repeating the edge sample.
DiffArray pad_last(const DiffArray& a, std::size_t left, std::size_t right, PadMode mode);

// [batch, 2c, ...] -> [batch, c, ...]: first half gated by sigmoid of second.
DiffArray glu(const DiffArray& a);

// input [B, Cin, L], kernel [Cout, Cin, K], bias [Cout] (may be undefined).
DiffArray conv1d(const DiffArray& input, const DiffArray& kernel, const DiffArray& bias,
                 std::size_t stride, std::size_t pad);

// input [B, Cin, L], kernel [Cin, Cout, K] -> [B, Cout, (L-1)*stride + K].
DiffArray conv_transpose1d(const DiffArray& input, const DiffArray& kernel,
                           const DiffArray& bias, std::size_t stride);

struct Stride2 {
  std::size_t h = 1;
  std::size_t w = 1;
};
struct Pad2 {
  std::size_t h = 0;
  std::size_t w = 0;
};

// input [B, Cin, H, W], kernel [Cout, Cin, KH, KW], bias [Cout].
DiffArray conv2d(const DiffArray& input, const DiffArray& kernel, const DiffArray& bias,
                 Stride2 stride, Pad2 pad);

// Sum of a list of scalars (or equal-shaped arrays).
DiffArray add_n(std::span<const DiffArray> terms);

}  // namespace msg::ad

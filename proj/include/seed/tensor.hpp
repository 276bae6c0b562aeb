#ifndef SEED_TENSOR_HPP_
#define SEED_TENSOR_HPP_

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace seed {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Storage precision of every value an op produces. Arithmetic always runs in
// double; in f32 mode results are rounded to the nearest float so parameters
// and activations stay float-representable (and checkpoints are lossless).
enum class Precision { f32, f64 };

// Dense row-major array with an optional gradient buffer. Copies share
// storage; use clone() for a deep copy.
class Tensor {
 public:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };

  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> data, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  // Leading extents folded together; last extent.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() const { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const {
    return impl_->data[r * cols() + c];
  }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  bool has_grad() const { return !impl_->grad.empty(); }
  // Allocates a zero gradient on first access. Tensor is a handle, so this
  // is available through const copies (as captured by adjoint closures).
  std::span<double> grad() const;
  void zero_grad() const;

  Tensor detach() const;
  Tensor clone() const;

  const std::shared_ptr<Impl>& impl() const { return impl_; }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

// Ordered record of adjoint closures. backward() replays them in exact reverse
// recording order, which keeps gradient accumulation bit-deterministic.
class Tape {
 public:
  explicit Tape(Precision precision = Precision::f32) : precision_(precision) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Precision precision() const { return precision_; }
  std::size_t size() const { return adjoints_.size(); }

  void record(std::function<void()> adjoint);
  // Seeds d(loss)/d(loss) = 1 and runs all adjoints. Clears the record.
  void backward(const Tensor& loss);

 private:
  Precision precision_;
  std::vector<std::function<void()>> adjoints_;
};

// Installs a tape as the current thread's recorder for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
  Precision previous_precision_;
};

// Overrides the thread's precision without recording anything.
class PrecisionScope {
 public:
  explicit PrecisionScope(Precision precision);
  ~PrecisionScope();
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision previous_;
};

Tape* active_tape();
Precision active_precision();

// Rounds to float when the thread runs in f32 mode.
double round_to_precision(double value);
void round_in_place(std::span<double> values);

}  // namespace seed

#endif  // SEED_TENSOR_HPP_

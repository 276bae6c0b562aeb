#include "seed/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "seed/errors.hpp"

namespace seed {

namespace {

thread_local Tape* g_tape = nullptr;
thread_local Precision g_precision = Precision::f32;

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  if (shape.empty()) throw ConfigError("tensor shape must have at least one extent");
  for (auto e : shape) {
    if (e == 0) throw ConfigError("tensor extents must be positive: " + shape_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ConfigError("tensor data length " + std::to_string(data.size()) +
                      " does not match shape " + shape_string(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return filled(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> data, bool requires_grad) {
  return Tensor({rows, cols}, std::move(data), requires_grad);
}

std::size_t Tensor::rows() const {
  return ndim() == 1 ? 1 : numel() / impl_->shape.back();
}

std::size_t Tensor::cols() const { return impl_->shape.back(); }

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractViolation("item() on tensor of shape " + shape_string(shape()));
  }
  return impl_->data[0];
}

std::span<double> Tensor::grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() const { impl_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data, false); }

Tensor Tensor::clone() const {
  Tensor t(shape(), impl_->data, impl_->requires_grad);
  return t;
}

void Tape::record(std::function<void()> adjoint) {
  adjoints_.push_back(std::move(adjoint));
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractViolation("backward() needs a scalar loss, got " +
                            shape_string(loss.shape()));
  }
  auto& g = loss.impl()->grad;
  if (g.empty()) g.assign(1, 0.0);
  g[0] += 1.0;
  for (auto it = adjoints_.rbegin(); it != adjoints_.rend(); ++it) (*it)();
  adjoints_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_tape), previous_precision_(g_precision) {
  g_tape = &tape;
  g_precision = tape.precision();
}

TapeScope::~TapeScope() {
  g_tape = previous_;
  g_precision = previous_precision_;
}

PrecisionScope::PrecisionScope(Precision precision) : previous_(g_precision) {
  g_precision = precision;
}

PrecisionScope::~PrecisionScope() { g_precision = previous_; }

Tape* active_tape() { return g_tape; }
Precision active_precision() { return g_precision; }

double round_to_precision(double value) {
  return g_precision == Precision::f32 ? static_cast<double>(static_cast<float>(value))
                                       : value;
}

void round_in_place(std::span<double> values) {
  if (g_precision != Precision::f32) return;
  for (auto& v : values) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace seed

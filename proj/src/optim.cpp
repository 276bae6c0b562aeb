#include "seed/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "seed/errors.hpp"

namespace seed {

AdamW::AdamW(std::vector<ParamSlot> params, AdamWOptions options)
    : params_(std::move(params)), options_(options) {
  for (auto& p : params_) {
    p.row_end = std::min(p.row_end, p.tensor.rows());
    if (p.row_begin > p.row_end) {
      throw ConfigError("optimizer slot " + p.name + " has an empty row range");
    }
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t s = 0; s < params_.size(); ++s) {
    auto& p = params_[s];
    if (!p.tensor.has_grad()) continue;
    auto data = p.tensor.data();
    auto grad = p.tensor.grad();
    const std::size_t cols = p.tensor.cols();
    const std::size_t lo = p.row_begin * cols, hi = p.row_end * cols;
    auto& m = m_[s];
    auto& v = v_[s];
    const double wd = p.decay ? options_.weight_decay : 0.0;
    for (std::size_t i = lo; i < hi; ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
      v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + options_.eps);
      data[i] = round_to_precision(data[i] - lr * (update + wd * data[i]));
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

std::size_t AdamW::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += (p.row_end - p.row_begin) * p.tensor.cols();
  return n;
}

double cosine_lr(std::size_t step, std::size_t total, double peak, double warmup_ratio) {
  if (total == 0) return peak;
  const auto warmup = static_cast<std::size_t>(
      std::ceil(warmup_ratio * static_cast<double>(total)));
  if (step < warmup) {
    return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  const double span = static_cast<double>(std::max<std::size_t>(total - warmup, 1));
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
  return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace seed

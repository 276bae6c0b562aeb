#include "seed/fd_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "seed/errors.hpp"

namespace seed {

namespace {

double evaluate(const std::function<Tensor()>& loss_fn) {
  const double v = loss_fn().item();
  if (!std::isfinite(v)) throw NumericError("fd_check: non-finite loss");
  return v;
}

}  // namespace

FdCheckResult fd_check(const std::function<Tensor()>& loss_fn,
                       const std::vector<NamedTensor>& params, double eps,
                       std::uint64_t seed, std::size_t samples_per_param) {
  if (eps < 1e-6 || eps > 1e-3) {
    throw ContractViolation("fd_check: eps must lie in [1e-6, 1e-3]");
  }
  std::vector<bool> saved_flags;
  for (const auto& p : params) {
    saved_flags.push_back(p.tensor.requires_grad());
    Tensor t = p.tensor;
    t.set_requires_grad(true);
    t.zero_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    Tape tape(Precision::f64);
    TapeScope scope(tape);
    Tensor loss = loss_fn();
    if (!std::isfinite(loss.item())) throw NumericError("fd_check: non-finite loss");
    tape.backward(loss);
  }
  for (const auto& p : params) {
    Tensor t = p.tensor;
    analytic.emplace_back(t.grad().begin(), t.grad().end());
  }

  PrecisionScope f64(Precision::f64);
  std::mt19937_64 rng(seed);
  FdCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor t = params[pi].tensor;
    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > samples_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(samples_per_param);
    }
    for (auto c : coords) {
      const double original = t.data()[c];
      t.data()[c] = original + eps;
      const double up = evaluate(loss_fn);
      t.data()[c] = original - eps;
      const double down = evaluate(loss_fn);
      t.data()[c] = original;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[pi][c];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++result.coordinates;
      if (rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_param = params[pi].name;
        result.worst_index = c;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor t = params[pi].tensor;
    t.zero_grad();
    t.set_requires_grad(saved_flags[pi]);
  }
  return result;
}

}  // namespace seed

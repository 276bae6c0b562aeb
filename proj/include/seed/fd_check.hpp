#ifndef SEED_FD_CHECK_HPP_
#define SEED_FD_CHECK_HPP_

#include <cstdint>
#include <functional>
#include <vector>

#include "seed/optim.hpp"
#include "seed/tensor.hpp"

namespace seed {

struct FdCheckResult {
  double max_relative_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

// Compares tape gradients with central differences
// (f(theta + eps) - f(theta - eps)) / (2 eps) on a random subsample of at
// least `samples_per_param` coordinates per parameter (all coordinates when
// the parameter is smaller). Runs in f64 precision. The relative error uses
// max(|analytic|, |numeric|, 1e-8) as denominator.
//
// loss_fn must be deterministic and build its graph from the given params.
FdCheckResult fd_check(const std::function<Tensor()>& loss_fn,
                       const std::vector<NamedTensor>& params, double eps = 1e-5,
                       std::uint64_t seed = 1, std::size_t samples_per_param = 32);

}  // namespace seed

#endif  // SEED_FD_CHECK_HPP_

#include "seed/random.hpp"

namespace seed {

Tensor randn(Shape shape, double std, Rng& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, std);
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<double>(static_cast<float>(dist(rng)));
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<double>(static_cast<float>(dist(rng)));
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

}  // namespace seed

#ifndef SEED_OPTIM_HPP_
#define SEED_OPTIM_HPP_

#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "seed/tensor.hpp"

namespace seed {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// One optimizer-owned parameter. Only rows [row_begin, row_end) move, which
// lets a stage train a slice of an embedding table.
struct ParamSlot {
  std::string name;
  Tensor tensor;
  bool decay = true;
  std::size_t row_begin = 0;
  std::size_t row_end = std::numeric_limits<std::size_t>::max();
};

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double weight_decay = 0.05;
};

// AdamW with decoupled weight decay.
class AdamW {
 public:
  AdamW(std::vector<ParamSlot> params, AdamWOptions options = {});

  void step(double lr);
  void zero_grad();

  std::size_t trainable_count() const;
  const std::vector<ParamSlot>& params() const { return params_; }
  std::size_t steps() const { return t_; }

 private:
  std::vector<ParamSlot> params_;
  AdamWOptions options_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// Linear warmup over ceil(warmup_ratio * total) steps, then cosine decay to 0.
double cosine_lr(std::size_t step, std::size_t total, double peak, double warmup_ratio);

}  // namespace seed

#endif  // SEED_OPTIM_HPP_

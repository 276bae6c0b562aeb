#include "seed/retrieval.hpp"

#include <algorithm>
#include <numeric>

#include "seed/errors.hpp"

namespace seed {

std::size_t first_relevant_rank(const std::vector<double>& scores,
                                const std::function<bool(std::size_t)>& relevant) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (relevant(order[r])) return r + 1;
  }
  return 0;
}

Recall recall_at_k(const std::vector<std::vector<double>>& sim,
                   const std::function<bool(std::size_t, std::size_t)>& relevant) {
  if (sim.empty()) throw ContractViolation("recall_at_k: no queries");
  for (const auto& row : sim) {
    if (row.size() < 10) {
      throw ContractViolation("recall_at_k: gallery of " + std::to_string(row.size()) +
                              " is smaller than K=10");
    }
  }
  Recall r;
  for (std::size_t q = 0; q < sim.size(); ++q) {
    const auto rank = first_relevant_rank(sim[q], [&](std::size_t g) { return relevant(q, g); });
    if (rank == 0) continue;
    r.r1 += rank <= 1;
    r.r5 += rank <= 5;
    r.r10 += rank <= 10;
  }
  const double n = static_cast<double>(sim.size());
  r.r1 /= n;
  r.r5 /= n;
  r.r10 /= n;
  return r;
}

}  // namespace seed

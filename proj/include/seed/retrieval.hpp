#ifndef SEED_RETRIEVAL_HPP_
#define SEED_RETRIEVAL_HPP_

#include <cstddef>
#include <functional>
#include <vector>

namespace seed {

struct Recall {
  double r1 = 0.0;
  double r5 = 0.0;
  double r10 = 0.0;
};

// sim[q][g] scores query q against gallery item g. A query is a hit at K when
// a relevant item sits among the first K of its ranking; equal scores rank the
// lower gallery index first. Throws ContractViolation when the gallery has
// fewer than 10 items.
Recall recall_at_k(const std::vector<std::vector<double>>& sim,
                   const std::function<bool(std::size_t, std::size_t)>& relevant);

// 1-based rank of the first relevant gallery item for one query (0 if none).
std::size_t first_relevant_rank(const std::vector<double>& scores,
                                const std::function<bool(std::size_t)>& relevant);

}  // namespace seed

#endif  // SEED_RETRIEVAL_HPP_

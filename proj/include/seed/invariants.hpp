#ifndef SEED_INVARIANTS_HPP_
#define SEED_INVARIANTS_HPP_

#include <string>
#include <vector>

namespace seed::invariants {

struct CheckResult {
  std::string suite;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

// Each check builds small random models of its own; none touches the disk
// except the checkpoint file round trip, which uses a temporary directory.
std::vector<CheckResult> gradient_checks();     // fd_check of every loss, 64-bit
std::vector<CheckResult> causality_checks();    // suffix perturbations, 200 trials each
std::vector<CheckResult> quantizer_checks();    // exhaustive argmin oracle and ties
std::vector<CheckResult> masking_checks();      // zero gradient outside answers
std::vector<CheckResult> lora_checks();         // merge preserves logits
std::vector<CheckResult> persistence_checks();  // checkpoint and config round trips

std::vector<CheckResult> run_all();

}  // namespace seed::invariants

#endif  // SEED_INVARIANTS_HPP_

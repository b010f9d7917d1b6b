#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Self-verification suites: the same oracle, gradient, and identity checks
// the test suite runs, packaged so a deployed binary can prove its own build
// is sound. All numeric work here runs in double so a failure means a wrong
// formula, not accumulated rounding.

namespace ecgnat {

struct SuiteResult {
  std::string name;
  int passed = 0;
  int failed = 0;
  std::vector<std::string> failures;  // one line per failed check

  bool ok() const { return failed == 0 && passed > 0; }
};

// fused attention kernel vs. the dense composed reference on randomized
// shapes (n <= 64, k in {1,3,5,7}, head_dim <= 16, heads <= 4); a case
// passes when the max abs difference is below 1e-12
SuiteResult verify_kernel_oracle(int n_cases, uint64_t seed);

// central finite differences vs. the tape at eps 1e-5, relative tolerance
// 1e-5: every differentiable primitive, one attention block, and — when
// `full` — the whole reduced-size model through both training losses
SuiteResult verify_gradients(uint64_t seed, bool full);

// algebraic identities of the loss stack: blend endpoints are exact,
// two-sample same-class contrastive loss is zero, positive rescaling of the
// embeddings leaves the contrastive loss unchanged, and randomized batches
// match a literal per-anchor oracle
SuiteResult verify_loss_identities(uint64_t seed);

// flips the deliberate fault in the attention backward and confirms the
// gradient checker catches it; guards against a checker that passes
// everything
SuiteResult verify_mutation_sanity(uint64_t seed);

// level "quick" trims case counts; "full" runs the acceptance-grade suite
std::vector<SuiteResult> run_verification(const std::string& level, uint64_t seed);

bool all_ok(const std::vector<SuiteResult>& suites);
std::string format_report(const std::vector<SuiteResult>& suites);

}  // namespace ecgnat

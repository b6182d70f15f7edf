#pragma once

// ============================================================================
// Engine-level guarantees, each as one self-contained check. The acceptance
// binary runs all of them and prints one pass/fail line per check; test
// suites can call individual checks too. Every check is deterministic.
// ============================================================================

#include <string>
#include <vector>

namespace dssm {

struct CheckResult {
  int id = 0;
  std::string name;    // the behaviour being guaranteed
  bool pass = false;
  std::string detail;  // measured numbers on pass, the reason on fail
  double seconds = 0;
};

/** Folding the scan equals iterating single steps, bit for bit. */
CheckResult check_scan_step_equivalence();
/** Any chunked evaluation with state carry equals one-shot, block and full LM. */
CheckResult check_chunk_invariance();
/** Reverse-mode gradients match central finite differences at f64. */
CheckResult check_gradients();
/** State size is constant in context length; decode latency is flat. */
CheckResult check_state_size_and_latency();
/** Work done on a snapshot never leaks back into the original branch. */
CheckResult check_branch_isolation();
/** Probe + rollback across any slice partition lands on the one-shot state. */
CheckResult check_rollback_exactness();
/** The four bundled scenarios reproduce their expected protocol skeletons. */
CheckResult check_bundled_scenarios();
/** Stage masks keep frozen components bit-identical while others train. */
CheckResult check_freeze_schedule();
/** The toy state-discrimination task trains to F1 >= 0.95 held-out. */
CheckResult check_toy_task_f1();
/** Prompt layout, checkpoint round-trip, and JSONL round-trips hold. */
CheckResult check_formats_roundtrip();

/** All checks, in order. */
std::vector<CheckResult> run_acceptance();

}  // namespace dssm

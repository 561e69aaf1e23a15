#pragma once

#include <cstdint>

namespace bmoe {

/// Instrumentation counters for the structured kernels. The analytical cost
/// model is checked against these exact counts, so the kernels must bump them
/// by the true amount of work performed.
struct OpCounters {
  uint64_t butterfly_flops = 0;  // 6 per Givens pair (4 mul + 2 add)
  uint64_t ternary_adds = 0;     // accumulation slots visited per matvec
  uint64_t ternary_muls = 0;     // scale multiplies (one per output element)

  void reset() { *this = OpCounters{}; }
};

inline OpCounters& op_counters() {
  thread_local OpCounters counters;
  return counters;
}

}  // namespace bmoe

#ifndef CECSIM_ORACLE_HPP_
#define CECSIM_ORACLE_HPP_

// Exhaustive solver for small static offloading instances, and the
// bin-packing reduction used to show the problem is NP-hard.

#include <cstdint>
#include <vector>

#include "cecsim/env.hpp"
#include "cecsim/heuristics.hpp"
#include "cecsim/model.hpp"

namespace cecsim {

struct StaticInstance {
  Topology topology;       // no churn
  std::vector<Task> tasks; // origin, S, Delta, D, Phi, created_slot
  int horizon_slots = 1;

  [[nodiscard]] double horizon_s() const { return horizon_slots * topology.slot_duration_s; }
  void validate() const;
};

struct BinPackingInstance {
  std::vector<double> sizes;
  int bins = 1;
  double capacity = 1.0;
};

// Executor per task, by node id.
using Assignment = std::vector<NodeId>;

struct AssignmentEval {
  bool feasible = false;  // resource constraints hold
  int successes = 0;
  std::vector<Outcome> outcomes;
  std::vector<double> delay_s;
  std::vector<double> reliability;

  [[nodiscard]] double rate(std::size_t task_count) const {
    if (!feasible) return 0.0;
    return task_count == 0 ? 1.0 : static_cast<double>(successes) / static_cast<double>(task_count);
  }
};

struct OracleResult {
  bool feasible = false;
  double success_rate = 0.0;
  Assignment assignment;
  std::uint64_t evaluated = 0;
};

inline constexpr std::uint64_t kOracleGuard = 10'000'000;

// Executors a task may use: its origin and the origin's direct neighbours,
// ascending by id.
std::vector<NodeId> executor_choices(const StaticInstance& inst, std::size_t task);

// Deterministic FIFO schedule of one assignment using expected reliability.
AssignmentEval evaluate_assignment(const StaticInstance& inst, const Assignment& x);

// Global optimum; ties go to the lexicographically smallest assignment.
// Throws InstanceTooLargeError above kOracleGuard assignments.
OracleResult solve_exact(const StaticInstance& inst, std::uint64_t guard = kOracleGuard);

StaticInstance reduce_binpacking(const BinPackingInstance& bp);

// Sequential heuristic assignment: tasks in (slot, id) order, each deciding
// on an observation that reflects the load placed so far.
Assignment heuristic_assignment(const StaticInstance& inst, const HeuristicPolicy& policy, Rng& rng);

// Observation of a task's origin given the executors already chosen for
// earlier tasks.
Observation static_observation(const StaticInstance& inst, const Assignment& prefix, std::size_t task,
                               const ObsScales& scales);
ActionMask static_mask(const StaticInstance& inst, std::size_t task);
ObsScales static_scales(const StaticInstance& inst);

}  // namespace cecsim

#endif  // CECSIM_ORACLE_HPP_

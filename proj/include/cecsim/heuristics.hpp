#ifndef CECSIM_HEURISTICS_HPP_
#define CECSIM_HEURISTICS_HPP_

// Non-learning offloading baselines. All of them look only at the agent's
// own observation and mask.

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cecsim/env.hpp"
#include "cecsim/policy.hpp"
#include "cecsim/rng.hpp"

namespace cecsim {

struct AgspConfig {
  int population = 4;
  int generations = 6;
  double init_temp = 0.5;
  double cooling = 0.8;
};

struct HeuristicConfig {
  int ratc_sample_k = 2;
  AgspConfig agsp;
  double w_delay = 0.5;
  double w_rel = 0.5;

  void validate() const;
};

// One executable option for the task at the head of the agent's queue.
struct Candidate {
  int action = kLocalAction;
  NodeId node = 0;
  double pred_delay_s = 0.0;
  double pred_rel = 1.0;
  double deadline_s = 0.0;  // remaining budget
  double floor = 0.0;

  [[nodiscard]] bool feasible() const {
    return pred_delay_s <= deadline_s && pred_rel >= floor;
  }
};

// Candidates for {local} and every mask-valid neighbour, sorted by node id.
// slot_nodes[k] is the node behind neighbour slot k. Empty without a task.
std::vector<Candidate> build_candidates(const Observation& obs, const ActionMask& mask,
                                        NodeId self, std::span<const NodeId> slot_nodes,
                                        const ObsScales& scales);

// Relative slot layout used by the environment.
std::vector<NodeId> relative_slots(NodeId self, int node_count);

double agsp_fitness(const Candidate& c, const HeuristicConfig& cfg);

int ratc_decide(std::span<const Candidate> cands, int k, Rng& rng);
int agsp_decide(std::span<const Candidate> cands, const HeuristicConfig& cfg, Rng& rng);
// Best fitness seen after each generation, for diagnostics.
int agsp_decide_traced(std::span<const Candidate> cands, const HeuristicConfig& cfg, Rng& rng,
                       std::vector<double>* best_trace);
int greedy_min_delay_decide(std::span<const Candidate> cands);
int random_valid_decide(const ActionMask& mask, Rng& rng);
int local_only_decide(const ActionMask& mask);

enum class HeuristicKind { kRatc, kAgsp, kGreedy, kRandom, kLocal };

class HeuristicPolicy : public Policy {
 public:
  HeuristicPolicy(HeuristicKind kind, HeuristicConfig cfg = {});

  [[nodiscard]] std::string name() const override;
  std::vector<int> act(const Environment& env, const std::vector<Observation>& obs,
                       const std::vector<ActionMask>& masks, Rng& rng) override;

  // Single decision on a prepared observation.
  int decide(const Observation& obs, const ActionMask& mask, NodeId self,
             std::span<const NodeId> slot_nodes, const ObsScales& scales, Rng& rng) const;

 private:
  HeuristicKind kind_;
  HeuristicConfig cfg_;
};

std::unique_ptr<Policy> make_heuristic(const std::string& name, const HeuristicConfig& cfg = {});

}  // namespace cecsim

#endif  // CECSIM_HEURISTICS_HPP_

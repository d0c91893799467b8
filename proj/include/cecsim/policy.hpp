#ifndef CECSIM_POLICY_HPP_
#define CECSIM_POLICY_HPP_

#include <string>
#include <vector>

#include "cecsim/env.hpp"
#include "cecsim/rng.hpp"

namespace cecsim {

// A joint decision rule: one action per agent, always mask-valid.
class Policy {
 public:
  virtual ~Policy() = default;
  [[nodiscard]] virtual std::string name() const = 0;
  virtual std::vector<int> act(const Environment& env, const std::vector<Observation>& obs,
                               const std::vector<ActionMask>& masks, Rng& rng) = 0;
  // Called after every step with the resulting transition.
  virtual void observe(const Environment& /*env*/, const TransitionRecord& /*rec*/) {}
  virtual void begin_episode() {}
};

// Result of running a policy for one episode.
struct EpisodeResult {
  EpisodeStats stats;
  double undiscounted_return = 0.0;
  double discounted_return = 0.0;
  int masked_actions = 0;
  double mean_decision_s = 0.0;
  std::vector<double> rewards;
};

// Runs one full episode; counts (does not submit) masked actions.
EpisodeResult run_episode(Environment& env, Policy& policy, std::uint64_t seed,
                          double discount = 0.99);

}  // namespace cecsim

#endif  // CECSIM_POLICY_HPP_

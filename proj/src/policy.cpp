#include "cecsim/policy.hpp"

#include <chrono>
#include <tuple>

namespace cecsim {

EpisodeResult run_episode(Environment& env, Policy& policy, std::uint64_t seed, double discount) {
  EpisodeResult res;
  auto [obs, masks] = env.reset(seed);
  Rng rng = Rng::stream(seed, "policy");
  policy.begin_episode();
  double decide_s = 0.0;
  std::int64_t decisions = 0;
  const int n = env.num_agents();
  while (!env.done()) {
    const auto t0 = std::chrono::steady_clock::now();
    auto actions = policy.act(env, obs, masks, rng);
    decide_s += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (int i = 0; i < n; ++i) {
      if (!masks[i].idle()) ++decisions;
      if (!masks[i].valid(actions[i])) {
        ++res.masked_actions;
        actions[i] = masks[i].idle() ? idle_action(n) : kLocalAction;
        if (!masks[i].valid(actions[i])) actions[i] = masks[i].valid_actions().front();
      }
    }
    auto rec = env.step(actions);
    policy.observe(env, rec);
    res.rewards.push_back(rec.reward);
    obs = std::move(rec.next_observations);
    masks = std::move(rec.next_masks);
  }
  res.stats = env.stats();
  std::tie(res.discounted_return, res.undiscounted_return) =
      episode_return(std::span<const double>(res.rewards), discount);
  res.mean_decision_s = decisions > 0 ? decide_s / static_cast<double>(decisions) : 0.0;
  return res;
}

}  // namespace cecsim

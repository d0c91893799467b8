#ifndef CECSIM_MAPPO_HPP_
#define CECSIM_MAPPO_HPP_

// Multi-agent PPO with one shared actor and a centralised critic.

#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cecsim/env.hpp"
#include "cecsim/policy.hpp"
#include "cecsim/tensorlite.hpp"

namespace cecsim {

struct PPOConfig {
  double clip = 0.2;
  double discount = 0.99;
  double gae_lambda = 0.95;
  double entropy_coef = 0.001;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;
  double lr = 4e-4;
  double lr_decay = 0.99;  // applied once per eval interval
  int eval_interval = 4;
  int epochs = 4;
  int minibatch = 256;
  int episodes_per_iteration = 1;
  int hidden = 64;
  bool centralized_critic = true;
  bool normalize_advantages = true;
  double reward_scale = 0.1;  // rewards are multiplied by this before GAE

  void validate() const;
};

// values holds one trailing bootstrap entry.
std::vector<double> gae(std::span<const double> rewards, std::span<const double> values,
                        double discount, double lambda);
double clipped_surrogate(double ratio, double advantage, double clip);
// Entropy of probs renormalised over the valid entries of mask.
double entropy(std::span<const double> probs, const ActionMask& mask);

// Actor: head(phi(obs)); phi is the DRL feature projector the fusion blends
// into. Critic: team observation (or own observation) -> value.
class ActorCritic {
 public:
  ActorCritic(int obs_width, int node_count, const PPOConfig& cfg, std::uint64_t seed);

  tl::ParamSet actor;
  tl::ParamSet critic;
  tl::Mlp phi;
  tl::Mlp head;
  tl::Mlp value;

  [[nodiscard]] int obs_width() const { return obs_width_; }
  [[nodiscard]] int node_count() const { return node_count_; }
  [[nodiscard]] int action_dim() const { return node_count_ + 1; }
  [[nodiscard]] int hidden() const { return hidden_; }
  [[nodiscard]] int critic_width() const { return critic_width_; }
  [[nodiscard]] bool centralized() const { return centralized_; }

  // Logits from features blended as (1 - lambda) * phi(obs) + offset.
  [[nodiscard]] tl::Mat logits(const tl::Mat& obs, const tl::Mat& lambda, const tl::Mat& offset) const;

 private:
  int obs_width_;
  int node_count_;
  int hidden_;
  int critic_width_;
  bool centralized_;
};

// One agent decision with a task present.
struct DecisionSample {
  int t = 0;
  int agent = 0;
  std::vector<double> obs;
  std::vector<double> mask;
  int action = 0;
  double logp = 0.0;
  // Guidance fields, unused by plain MAPPO.
  int guide_index = -1;
  int guide_action = -1;  // -1 when the guidance fell back
  double lambda = 0.0;
};

struct Rollout {
  std::vector<DecisionSample> samples;
  std::vector<std::vector<double>> critic_inputs;  // [t] or [t * N + i]
  std::vector<double> rewards;                     // per slot, unscaled
  std::vector<double> advantages;                  // per sample
  std::vector<double> returns;                     // per critic input
  std::vector<double> lambda_trace;
  EpisodeStats stats;
};

// Per-decision guidance hook for the actor input.
struct ActorInput {
  tl::Mat lambda;  // B x 1
  tl::Mat offset;  // B x hidden
};

// Stochastic masked policy over a shared actor. Records a rollout when asked.
class ActorCriticPolicy : public Policy {
 public:
  explicit ActorCriticPolicy(ActorCritic& net) : net_(net) {}

  [[nodiscard]] std::string name() const override { return "mappo"; }
  std::vector<int> act(const Environment& env, const std::vector<Observation>& obs,
                       const std::vector<ActionMask>& masks, Rng& rng) override;
  void observe(const Environment& env, const TransitionRecord& rec) override;
  void begin_episode() override;

  void record_into(Rollout* r) { rollout_ = r; }
  // Probability rows of every decision, for equivalence checks.
  void trace_into(std::vector<tl::Mat>* t) { trace_ = t; }
  // Greedy argmax instead of sampling.
  void set_greedy(bool g) { greedy_ = g; }
  ActorCritic& net() { return net_; }

 protected:
  // Fills lambda/offset and the guidance fields of the pending samples.
  virtual void augment(const Environment& env, const std::vector<int>& deciders,
                       const std::vector<ActionMask>& masks, const tl::Mat& obs,
                       std::vector<DecisionSample>& pending, ActorInput& in);

  ActorCritic& net_;
  Rollout* rollout_ = nullptr;

 private:
  std::vector<tl::Mat>* trace_ = nullptr;
  bool greedy_ = false;
  int t_ = 0;
};

struct LossStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double feat_loss = 0.0;
  double act_loss = 0.0;
  double clip_fraction = 0.0;
  int minibatches = 0;
};

// Minibatch tensors for the losses.
struct Minibatch {
  tl::Mat obs;
  tl::Mat mask;
  std::vector<int> actions;
  tl::Mat old_logp;    // B x 1
  tl::Mat advantages;  // B x 1
  tl::Mat critic_in;
  tl::Mat returns;     // C x 1
  std::vector<int> guide_index;
  std::vector<int> guide_action;
  tl::Mat lambda;      // B x 1
};

// -L_clip - entropy_coef * H (actor) and mean (V - R)^2 (critic),
// combined as actor + value_coef * critic. `in` is a constant blend input.
struct PpoTerms {
  tl::Var total;
  double policy = 0.0;
  double value = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
};
PpoTerms ppo_loss(tl::Tape& tape, const ActorCritic& net, const Minibatch& mb, const ActorInput& in,
                  const PPOConfig& cfg);

struct IterationMetrics {
  int iteration = 0;
  int episodes = 0;
  EpisodeStats stats;
  double success_rate = 0.0;
  double episode_return = 0.0;
  LossStats loss;
  double lr = 0.0;
  double lambda_mean = 0.0;
  // Range of the trace after each episode's first slot (NaN when empty).
  double lambda_lo = std::numeric_limits<double>::quiet_NaN();
  double lambda_hi = std::numeric_limits<double>::quiet_NaN();
  double validity_rate = 1.0;
  bool evaluated = false;
  double eval_success = 0.0;
  double eval_return = 0.0;
};

class Trainer {
 public:
  Trainer(EnvConfig env_cfg, PPOConfig cfg, std::uint64_t seed);
  virtual ~Trainer() = default;
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  // One iteration: rollout episodes, then a PPO update. Evaluates on the
  // fixed evaluation seeds every eval_interval iterations (none when the
  // seed list is empty).
  IterationMetrics iterate();
  Rollout collect(std::uint64_t episode_seed);
  void compute_advantages(Rollout& r) const;
  LossStats update(Rollout& r);
  LossStats update_critic_only(Rollout& r);
  // Success rate and return averaged over the evaluation seeds.
  std::pair<double, double> evaluate();

  void set_eval_seeds(std::vector<std::uint64_t> s) { eval_seeds_ = std::move(s); }
  [[nodiscard]] std::uint64_t episode_seed(int iteration, int k) const;

  virtual ActorCriticPolicy& policy() { return *policy_; }
  ActorCritic& net() { return net_; }
  [[nodiscard]] const PPOConfig& config() const { return cfg_; }
  [[nodiscard]] const EnvConfig& env_config() const { return env_cfg_; }
  Environment& env() { return env_; }
  [[nodiscard]] int iterations_done() const { return iteration_; }

 protected:
  // Blend input for a minibatch; plain MAPPO uses lambda = 0, offset = 0.
  virtual ActorInput actor_input(const Minibatch& mb);
  // Auxiliary loss added to the PPO objective (fusion). Null var when none.
  virtual tl::Var aux_loss(tl::Tape& tape, const Minibatch& mb, LossStats& stats);
  virtual void aux_step() {}
  virtual void on_lr(double /*lr*/) {}
  virtual double validity_rate() const { return 1.0; }

  Minibatch make_minibatch(const Rollout& r, std::span<const std::size_t> idx,
                           std::span<const std::size_t> critic_idx) const;

  EnvConfig env_cfg_;
  PPOConfig cfg_;
  std::uint64_t seed_;
  Environment env_;
  ActorCritic net_;
  std::unique_ptr<ActorCriticPolicy> policy_;
  tl::Adam actor_opt_;
  tl::Adam critic_opt_;
  Rng shuffle_rng_;
  std::vector<std::uint64_t> eval_seeds_;
  int iteration_ = 0;
};

}  // namespace cecsim

#endif  // CECSIM_MAPPO_HPP_

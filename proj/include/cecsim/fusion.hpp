#ifndef CECSIM_FUSION_HPP_
#define CECSIM_FUSION_HPP_

// Guidance fusion: the provider's decision is embedded, attended against the
// environment features, distilled into a representation that is blended into
// the actor input with a scheduled coefficient.

#include <cstdint>
#include <memory>
#include <vector>

#include "cecsim/guidance.hpp"
#include "cecsim/mappo.hpp"
#include "cecsim/tensorlite.hpp"

namespace cecsim {

struct FusionSchedule {
  double lambda_init = 0.5;
  double beta = 1.0;          // cap factor on lambda_init
  double eta = 0.9;           // factor applied every `interval` slots
  double gamma_decay = 0.995; // factor applied on the other slots
  double lambda_min = 0.05;
  int interval = 50;

  void validate() const;
  [[nodiscard]] double cap() const { return beta * lambda_init; }
};

// lambda after slot t. Both branches stay within [lambda_min, cap].
double schedule_step(double prev, int t, const FusionSchedule& s);

// (1 - lambda) * g_drl + lambda * g_last, row-wise lambda (B x 1).
tl::Mat fuse(const tl::Mat& g_drl, const tl::Mat& g_last, const tl::Mat& lambda);

struct FusionConfig {
  int embed_dim = 8;
  int key_dim = 8;
  double dropout = 0.1;
  double w_c = 1.0;
  FusionSchedule schedule;
  // Evaluation switches: skip the provider (fallback row) and hold lambda.
  bool query_guidance = true;
  bool freeze_lambda = false;

  void validate() const;
};

class FusionNet {
 public:
  FusionNet(int obs_width, int node_count, int hidden, const FusionConfig& cfg, std::uint64_t seed);

  tl::ParamSet params;
  tl::Param* table = nullptr;  // (N + 1) x embed_dim: local, forward slots, fallback
  tl::Mlp f1;                  // obs -> hidden -> key_dim
  tl::Mlp f2;                  // embed_dim -> key_dim, linear
  tl::Param* wq = nullptr;
  tl::Param* wk = nullptr;
  tl::Param* wv = nullptr;
  tl::Mlp out;                 // key_dim -> hidden
  tl::Mlp last;                // hidden -> hidden

  struct Distilled {
    tl::Var h_env;
    tl::Var h_llm;
    tl::Var h_t;
    tl::Var g_llm;
    tl::Mat alpha;
  };
  // Attention of the environment features over the embedded decision.
  Distilled distill(tl::Tape& tape, const tl::Mat& obs, const std::vector<int>& guide_index) const;
  // phi_Last(g_llm) without recording.
  [[nodiscard]] tl::Mat guidance_features(const tl::Mat& obs, const std::vector<int>& guide_index) const;
  // Neighbour blocks with a zero alive flag are zeroed before encoding.
  [[nodiscard]] tl::Mat padding_masked(const tl::Mat& obs) const;

  [[nodiscard]] int rows() const { return node_count_ + 1; }
  [[nodiscard]] int hidden() const { return hidden_; }

 private:
  int obs_width_;
  int node_count_;
  int hidden_;
  int key_dim_;
};

// L_feat: mean squared distance to a constant target.
tl::Var feat_loss(tl::Var output, const tl::Mat& target);
// L_act: weighted mean of -log softmax(logits)[target] over the mask; rows
// with zero weight are ignored. Zero when every weight is zero.
tl::Var act_loss(tl::Var logits, const tl::Mat& mask, const std::vector<int>& target, const tl::Mat& weight);

// Values held fixed while the hybrid loss is differentiated.
struct Frozen {
  tl::Mat g_drl;         // phi_DRL(obs)
  tl::Mat feat_target;   // O(h_t) without dropout
  tl::Mat dropout_keep;  // scaled keep mask on h_t
  tl::Mat offset;        // lambda * phi_Last(g_llm) for the PPO term
  tl::Mat act_weight;    // 1 where the guidance was valid
  std::vector<int> act_target;
};
Frozen make_frozen(const FusionNet& fusion, const ActorCritic& net, const Minibatch& mb, double dropout,
                   Rng& rng);

struct HybridTerms {
  tl::Var total;
  double feat = 0.0;
  double act = 0.0;
};
// L_feat + w_c * L_act. Gradients reach the fusion parameters only.
HybridTerms hybrid_loss(tl::Tape& tape, const FusionNet& fusion, const ActorCritic& net, const Minibatch& mb,
                        const Frozen& fz, double w_c);

class LedrlPolicy : public ActorCriticPolicy {
 public:
  LedrlPolicy(ActorCritic& net, FusionNet& fusion, GuidanceEngine& engine, FusionConfig cfg);

  [[nodiscard]] std::string name() const override { return "ledrl"; }
  void observe(const Environment& env, const TransitionRecord& rec) override;
  void begin_episode() override;

  [[nodiscard]] double lambda() const { return lambda_; }
  [[nodiscard]] double guidance_seconds() const { return guidance_s_; }
  [[nodiscard]] std::int64_t guidance_calls() const { return guidance_calls_; }
  // Per-call guidance wall time, appended while set.
  void guidance_latency_into(std::vector<double>* v) { latency_ = v; }
  FusionConfig& config() { return cfg_; }

 protected:
  void augment(const Environment& env, const std::vector<int>& deciders, const std::vector<ActionMask>& masks,
               const tl::Mat& obs, std::vector<DecisionSample>& pending, ActorInput& in) override;

 private:
  FusionNet& fusion_;
  GuidanceEngine& engine_;
  FusionConfig cfg_;
  double lambda_ = 0.0;
  int t_ = 0;
  double guidance_s_ = 0.0;
  std::int64_t guidance_calls_ = 0;
  std::vector<double>* latency_ = nullptr;
};

class LedrlTrainer : public Trainer {
 public:
  LedrlTrainer(EnvConfig env_cfg, PPOConfig cfg, FusionConfig fcfg, GuidanceConfig gcfg,
               std::shared_ptr<Provider> provider, std::uint64_t seed);

  ActorCriticPolicy& policy() override { return *ledrl_; }
  LedrlPolicy& ledrl() { return *ledrl_; }
  FusionNet& fusion() { return fusion_; }
  GuidanceEngine& engine() { return engine_; }
  [[nodiscard]] const FusionConfig& fusion_config() const { return fcfg_; }

 protected:
  ActorInput actor_input(const Minibatch& mb) override;
  tl::Var aux_loss(tl::Tape& tape, const Minibatch& mb, LossStats& stats) override;
  void aux_step() override;
  void on_lr(double lr) override { fusion_opt_.set_lr(lr); }
  double validity_rate() const override { return engine_.stats().validity_rate(); }

 private:
  FusionConfig fcfg_;
  FusionNet fusion_;
  GuidanceEngine engine_;
  std::unique_ptr<LedrlPolicy> ledrl_;
  tl::Adam fusion_opt_;
  Rng dropout_rng_;
  Frozen frozen_;
  bool aux_active_ = false;
};

}  // namespace cecsim

#endif  // CECSIM_FUSION_HPP_

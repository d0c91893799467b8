#include "cecsim/fusion.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "cecsim/errors.hpp"

namespace cecsim {

using tl::Mat;
using tl::Tape;
using tl::Var;

void FusionSchedule::validate() const {
  if (lambda_init < 0.0 || lambda_init > 1.0) throw ConfigError("lambda_init must be in [0,1]");
  if (beta < 0.0) throw ConfigError("schedule beta must be >= 0");
  if (!(eta > 0.0 && eta <= 1.0)) throw ConfigError("schedule eta must be in (0,1]");
  if (!(gamma_decay > 0.0 && gamma_decay <= 1.0)) throw ConfigError("gamma_decay must be in (0,1]");
  if (lambda_min < 0.0 || lambda_min > cap() || cap() > 1.0)
    throw ConfigError("need 0 <= lambda_min <= beta * lambda_init <= 1");
  if (interval < 1) throw ConfigError("schedule interval must be >= 1");
}

double schedule_step(double prev, int t, const FusionSchedule& s) {
  if (t % s.interval == 0) return std::max(s.lambda_min, std::min(s.cap(), s.eta * prev));
  return std::min(s.cap(), std::max(s.lambda_min, s.gamma_decay * prev));
}

Mat fuse(const Mat& g_drl, const Mat& g_last, const Mat& lambda) {
  if (g_drl.rows() != g_last.rows() || g_drl.cols() != g_last.cols() || lambda.rows() != g_drl.rows())
    throw ShapeError("fuse: shapes differ");
  return ((g_drl.array().colwise() * (1.0 - lambda.col(0).array())) +
          (g_last.array().colwise() * lambda.col(0).array()))
      .matrix();
}

void FusionConfig::validate() const {
  if (embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
  if (key_dim < 1) throw ConfigError("key_dim must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0,1)");
  if (w_c < 0.0) throw ConfigError("w_c must be >= 0");
  schedule.validate();
}

// ---------------------------------------------------------------------------

FusionNet::FusionNet(int obs_width, int node_count, int hidden, const FusionConfig& cfg, std::uint64_t seed)
    : obs_width_(obs_width), node_count_(node_count), hidden_(hidden), key_dim_(cfg.key_dim) {
  cfg.validate();
  Rng rng = Rng::stream(seed, "fusion-init");
  table = &params.add_glorot("embed", node_count + 1, cfg.embed_dim, rng);
  f1 = tl::Mlp(params, "f1", {obs_width, hidden, cfg.key_dim}, tl::Activation::kTanh, tl::Activation::kTanh, rng);
  f2 = tl::Mlp(params, "f2", {cfg.embed_dim, cfg.key_dim}, tl::Activation::kNone, tl::Activation::kNone, rng);
  wq = &params.add_glorot("attn.wq", cfg.key_dim, cfg.key_dim, rng);
  wk = &params.add_glorot("attn.wk", cfg.key_dim, cfg.key_dim, rng);
  wv = &params.add_glorot("attn.wv", cfg.key_dim, cfg.key_dim, rng);
  out = tl::Mlp(params, "out", {cfg.key_dim, hidden}, tl::Activation::kTanh, tl::Activation::kTanh, rng);
  last = tl::Mlp(params, "last", {hidden, hidden}, tl::Activation::kTanh, tl::Activation::kTanh, rng);
}

Mat FusionNet::padding_masked(const Mat& obs) const {
  if (obs.cols() != obs_width_) throw ShapeError("fusion: observation width differs");
  Mat x = obs;
  for (int k = 0; k < node_count_ - 1; ++k) {
    const int c = kNodeFeatures + kTaskFeatures + kNeighborFeatures * k;
    for (int r = 0; r < x.rows(); ++r)
      if (x(r, c + 2) == 0.0) x(r, c) = x(r, c + 1) = 0.0;
  }
  return x;
}

FusionNet::Distilled FusionNet::distill(Tape& tape, const Mat& obs, const std::vector<int>& guide_index) const {
  if (static_cast<int>(guide_index.size()) != obs.rows()) throw ShapeError("fusion: one guidance row per obs");
  Mat onehot = Mat::Zero(obs.rows(), rows());
  for (int r = 0; r < obs.rows(); ++r) {
    const int g = guide_index[r] < 0 ? node_count_ : guide_index[r];
    if (g > node_count_) throw ShapeError("fusion: guidance index out of range");
    onehot(r, g) = 1.0;
  }
  Distilled d;
  d.h_env = f1.forward(tape, tape.constant(padding_masked(obs)));
  d.h_llm = f2.forward(tape, tl::matmul(tape.constant(onehot), tape.param(*table)));
  const Var q = tl::matmul(d.h_env, tape.param(*wq));
  const Var k = tl::matmul(d.h_llm, tape.param(*wk));
  const Var v = tl::matmul(d.h_llm, tape.param(*wv));
  d.h_t = tl::add(tl::attention(q, k, v, 1, &d.alpha), d.h_env);
  d.g_llm = out.forward(tape, d.h_t);
  return d;
}

Mat FusionNet::guidance_features(const Mat& obs, const std::vector<int>& guide_index) const {
  Tape tape;
  const auto d = distill(tape, obs, guide_index);
  return last.eval(d.g_llm.value());
}

// ---------------------------------------------------------------------------

Var feat_loss(Var output, const Mat& target) {
  return tl::mean(tl::square(tl::sub(output, output.tape->constant(target))));
}

Var act_loss(Var logits, const Mat& mask, const std::vector<int>& target, const Mat& weight) {
  Tape& tape = *logits.tape;
  const double total = weight.sum();
  if (!(total > 0.0)) return tape.constant(Mat::Zero(1, 1));
  const Var nll = tl::scale(tl::gather(tl::masked_log_softmax(logits, mask), target), -1.0);
  return tl::scale(tl::sum(tl::mul(nll, tape.constant(weight))), 1.0 / total);
}

Frozen make_frozen(const FusionNet& fusion, const ActorCritic& net, const Minibatch& mb, double dropout, Rng& rng) {
  Frozen fz;
  const int b = static_cast<int>(mb.actions.size());
  fz.g_drl = net.phi.eval(mb.obs);
  Tape tape;
  const auto d = fusion.distill(tape, mb.obs, mb.guide_index);
  fz.feat_target = d.g_llm.value();
  const Mat gf = fusion.last.eval(fz.feat_target);
  fz.offset = (gf.array().colwise() * mb.lambda.col(0).array()).matrix();
  fz.dropout_keep.resize(b, d.h_t.cols());
  const double keep = 1.0 - dropout;
  for (int r = 0; r < b; ++r)
    for (int c = 0; c < fz.dropout_keep.cols(); ++c)
      fz.dropout_keep(r, c) = dropout > 0.0 ? (rng.bernoulli(keep) ? 1.0 / keep : 0.0) : 1.0;
  fz.act_weight = Mat::Zero(b, 1);
  fz.act_target.resize(static_cast<std::size_t>(b));
  for (int r = 0; r < b; ++r) {
    const int g = mb.guide_action[r];
    if (g >= 0 && mb.mask(r, g) > 0.5) {
      fz.act_weight(r, 0) = 1.0;
      fz.act_target[r] = g;
    } else {
      fz.act_target[r] = mb.actions[r];
    }
  }
  return fz;
}

HybridTerms hybrid_loss(Tape& tape, const FusionNet& fusion, const ActorCritic& net, const Minibatch& mb,
                        const Frozen& fz, double w_c) {
  HybridTerms out;
  const auto d = fusion.distill(tape, mb.obs, mb.guide_index);
  const Var dropped = tl::mul(d.h_t, tape.constant(fz.dropout_keep));
  const Var lf = feat_loss(fusion.out.forward(tape, dropped), fz.feat_target);
  const Var blended = tl::add(tl::mul_col(tape.constant(fz.g_drl), tape.constant((1.0 - mb.lambda.array()).matrix())),
                              tl::mul_col(fusion.last.forward(tape, d.g_llm), tape.constant(mb.lambda)));
  const Var logits = net.head.forward_frozen(tape, blended);
  const Var la = act_loss(logits, mb.mask, fz.act_target, fz.act_weight);
  out.feat = lf.value()(0, 0);
  out.act = la.value()(0, 0);
  out.total = w_c == 0.0 ? lf : tl::add(lf, tl::scale(la, w_c));
  return out;
}

// ---------------------------------------------------------------------------

LedrlPolicy::LedrlPolicy(ActorCritic& net, FusionNet& fusion, GuidanceEngine& engine, FusionConfig cfg)
    : ActorCriticPolicy(net), fusion_(fusion), engine_(engine), cfg_(cfg), lambda_(cfg.schedule.lambda_init) {}

void LedrlPolicy::begin_episode() {
  ActorCriticPolicy::begin_episode();
  engine_.reset_episode();
  if (!cfg_.freeze_lambda) lambda_ = cfg_.schedule.lambda_init;
  t_ = 0;
}

void LedrlPolicy::augment(const Environment& env, const std::vector<int>& deciders,
                          const std::vector<ActionMask>& masks, const Mat& obs,
                          std::vector<DecisionSample>& pending, ActorInput& in) {
  const int n = env.num_agents();
  std::vector<int> rows(deciders.size());
  const bool query = cfg_.query_guidance && t_ % engine_.config().query_stride == 0;
  for (std::size_t r = 0; r < deciders.size(); ++r) {
    const int i = deciders[r];
    GuidanceDecision d;
    if (query) {
      const auto t0 = std::chrono::steady_clock::now();
      d = engine_.guide(env, i, masks[i]);
      const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      guidance_s_ += dt;
      if (latency_) latency_->push_back(dt);
      ++guidance_calls_;
    }
    rows[r] = d.embedding_index(i, n);
    pending[r].guide_index = rows[r];
    pending[r].guide_action = d.valid ? d.action(i, n) : -1;
    pending[r].lambda = lambda_;
  }
  in.lambda.setConstant(lambda_);
  const Mat gf = fusion_.guidance_features(obs, rows);
  in.offset = (gf.array().colwise() * in.lambda.col(0).array()).matrix();
}

void LedrlPolicy::observe(const Environment& env, const TransitionRecord& rec) {
  if (rollout_) rollout_->lambda_trace.push_back(lambda_);
  engine_.on_transition(rec);
  if (!cfg_.freeze_lambda) lambda_ = schedule_step(lambda_, t_, cfg_.schedule);
  ++t_;
  ActorCriticPolicy::observe(env, rec);
}

// ---------------------------------------------------------------------------

LedrlTrainer::LedrlTrainer(EnvConfig env_cfg, PPOConfig cfg, FusionConfig fcfg, GuidanceConfig gcfg,
                           std::shared_ptr<Provider> provider, std::uint64_t seed)
    : Trainer(std::move(env_cfg), cfg, seed), fcfg_(fcfg),
      fusion_(net_.obs_width(), net_.node_count(), net_.hidden(), fcfg_, seed),
      engine_(gcfg, std::move(provider), env_cfg_),
      ledrl_(std::make_unique<LedrlPolicy>(net_, fusion_, engine_, fcfg_)), fusion_opt_(cfg.lr),
      dropout_rng_(Rng::stream(seed, "dropout")) {}

ActorInput LedrlTrainer::actor_input(const Minibatch& mb) {
  if (mb.actions.empty()) return Trainer::actor_input(mb);
  frozen_ = make_frozen(fusion_, net_, mb, fcfg_.dropout, dropout_rng_);
  return {mb.lambda, frozen_.offset};
}

Var LedrlTrainer::aux_loss(Tape& tape, const Minibatch& mb, LossStats& stats) {
  fusion_.params.zero_grad();
  aux_active_ = !mb.actions.empty();
  if (!aux_active_) return {};
  const auto terms = hybrid_loss(tape, fusion_, net_, mb, frozen_, fcfg_.w_c);
  stats.feat_loss += terms.feat;
  stats.act_loss += terms.act;
  return terms.total;
}

void LedrlTrainer::aux_step() {
  if (!aux_active_) return;
  fusion_.params.clip_grad_norm(cfg_.max_grad_norm);
  fusion_opt_.step(fusion_.params);
}

}  // namespace cecsim

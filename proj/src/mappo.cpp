#include "cecsim/mappo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

#include "cecsim/errors.hpp"

namespace cecsim {

using tl::Mat;
using tl::Tape;
using tl::Var;

void PPOConfig::validate() const {
  if (!(clip >= 0.0 && clip < 1.0)) throw ConfigError("clip must be in [0,1)");
  if (discount < 0.0 || discount > 1.0) throw ConfigError("discount must be in [0,1]");
  if (gae_lambda < 0.0 || gae_lambda > 1.0) throw ConfigError("gae_lambda must be in [0,1]");
  if (entropy_coef < 0.0 || value_coef < 0.0) throw ConfigError("loss weights must be >= 0");
  if (!(max_grad_norm > 0.0)) throw ConfigError("max_grad_norm must be positive");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must be in (0,1]");
  if (eval_interval < 1 || epochs < 1 || minibatch < 1 || episodes_per_iteration < 1)
    throw ConfigError("eval_interval, epochs, minibatch and episodes_per_iteration must be >= 1");
  if (hidden < 1) throw ConfigError("hidden width must be >= 1");
  if (!(reward_scale > 0.0)) throw ConfigError("reward_scale must be positive");
}

std::vector<double> gae(std::span<const double> rewards, std::span<const double> values,
                        double discount, double lambda) {
  if (values.size() != rewards.size() + 1)
    throw ShapeError("gae: values needs one entry more than rewards");
  std::vector<double> adv(rewards.size());
  double acc = 0.0;
  for (std::size_t k = rewards.size(); k-- > 0;) {
    const double delta = rewards[k] + discount * values[k + 1] - values[k];
    acc = delta + discount * lambda * acc;
    adv[k] = acc;
  }
  return adv;
}

double clipped_surrogate(double ratio, double advantage, double clip) {
  const double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip);
  return std::min(ratio * advantage, clipped * advantage);
}

double entropy(std::span<const double> probs, const ActionMask& mask) {
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i)
    if (mask.valid(static_cast<int>(i))) total += probs[i];
  if (!(total > 0.0)) return 0.0;
  double h = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!mask.valid(static_cast<int>(i))) continue;
    const double p = probs[i] / total;
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

// ---------------------------------------------------------------------------

ActorCritic::ActorCritic(int obs_width, int node_count, const PPOConfig& cfg, std::uint64_t seed)
    : obs_width_(obs_width), node_count_(node_count), hidden_(cfg.hidden),
      critic_width_(cfg.centralized_critic ? obs_width * node_count : obs_width),
      centralized_(cfg.centralized_critic) {
  Rng ra = Rng::stream(seed, "actor-init");
  Rng rc = Rng::stream(seed, "critic-init");
  phi = tl::Mlp(actor, "phi", {obs_width, hidden_}, tl::Activation::kTanh, tl::Activation::kTanh, ra);
  head = tl::Mlp(actor, "head", {hidden_, hidden_, node_count + 1}, tl::Activation::kTanh,
                 tl::Activation::kNone, ra);
  value = tl::Mlp(critic, "critic", {critic_width_, hidden_, hidden_, 1}, tl::Activation::kTanh,
                  tl::Activation::kNone, rc);
}

Mat ActorCritic::logits(const Mat& obs, const Mat& lambda, const Mat& offset) const {
  const Mat g = phi.eval(obs);
  const Mat keep = (1.0 - lambda.array()).matrix();
  const Mat blended = (g.array().colwise() * keep.col(0).array()).matrix() + offset;
  return head.eval(blended);
}

// ---------------------------------------------------------------------------

void ActorCriticPolicy::begin_episode() { t_ = 0; }

void ActorCriticPolicy::augment(const Environment&, const std::vector<int>&, const std::vector<ActionMask>&,
                                const Mat&, std::vector<DecisionSample>&, ActorInput&) {}

std::vector<int> ActorCriticPolicy::act(const Environment& env, const std::vector<Observation>& obs,
                                        const std::vector<ActionMask>& masks, Rng& rng) {
  const int n = env.num_agents();
  const int w = net_.obs_width();
  const int a_dim = net_.action_dim();
  std::vector<int> actions(static_cast<std::size_t>(n), idle_action(n));

  if (rollout_) {
    if (net_.centralized()) {
      rollout_->critic_inputs.push_back(env.team_observation());
    } else {
      for (int i = 0; i < n; ++i) rollout_->critic_inputs.push_back(obs[i].flatten());
    }
  }

  std::vector<int> deciders;
  for (int i = 0; i < n; ++i)
    if (!masks[i].idle()) deciders.push_back(i);
  if (!deciders.empty()) {
    const int b = static_cast<int>(deciders.size());
    Mat o(b, w), m(b, a_dim);
    std::vector<DecisionSample> pending(deciders.size());
    for (int r = 0; r < b; ++r) {
      const int i = deciders[r];
      auto& s = pending[r];
      s.t = t_;
      s.agent = i;
      s.obs = obs[i].flatten();
      s.mask.resize(static_cast<std::size_t>(a_dim));
      for (int c = 0; c < a_dim; ++c) s.mask[c] = masks[i].bits[c] ? 1.0 : 0.0;
      for (int c = 0; c < w; ++c) o(r, c) = s.obs[c];
      for (int c = 0; c < a_dim; ++c) m(r, c) = s.mask[c];
    }
    ActorInput in{Mat::Zero(b, 1), Mat::Zero(b, net_.hidden())};
    augment(env, deciders, masks, o, pending, in);
    const Mat p = tl::masked_softmax(net_.logits(o, in.lambda, in.offset), m);
    if (trace_) trace_->push_back(p);
    for (int r = 0; r < b; ++r) {
      int pick = -1;
      if (greedy_) {
        for (int c = 0; c < a_dim; ++c)
          if (m(r, c) > 0.5 && (pick < 0 || p(r, c) > p(r, pick))) pick = c;
      } else {
        const double u = rng.uniform();
        double cum = 0.0;
        for (int c = 0; c < a_dim; ++c) {
          if (m(r, c) < 0.5) continue;
          pick = c;
          cum += p(r, c);
          if (u < cum) break;
        }
      }
      // Underflowed probabilities can leave the sampled entry at zero.
      if (p(r, pick) <= 0.0) {
        for (int c = 0; c < a_dim; ++c)
          if (m(r, c) > 0.5 && p(r, c) > p(r, pick)) pick = c;
      }
      actions[deciders[r]] = pick;
      pending[r].action = pick;
      pending[r].logp = std::log(p(r, pick));
    }
    if (rollout_)
      for (auto& s : pending) rollout_->samples.push_back(std::move(s));
  }
  return actions;
}

void ActorCriticPolicy::observe(const Environment&, const TransitionRecord& rec) {
  if (rollout_) rollout_->rewards.push_back(rec.reward);
  ++t_;
}

// ---------------------------------------------------------------------------

PpoTerms ppo_loss(Tape& tape, const ActorCritic& net, const Minibatch& mb, const ActorInput& in,
                  const PPOConfig& cfg) {
  PpoTerms out;
  Var total = tape.constant(Mat::Zero(1, 1));
  if (!mb.actions.empty()) {
    const Var obs = tape.constant(mb.obs);
    const Var g = net.phi.forward(tape, obs);
    const Var blended = tl::add(tl::mul_col(g, tape.constant((1.0 - in.lambda.array()).matrix())),
                                tape.constant(in.offset));
    const Var logits = net.head.forward(tape, blended);
    const Var lp = tl::gather(tl::masked_log_softmax(logits, mb.mask), mb.actions);
    const Var ratio = tl::exp(tl::sub(lp, tape.constant(mb.old_logp)));
    const Var adv = tape.constant(mb.advantages);
    const Var surr = tl::minimum(tl::mul(ratio, adv),
                                 tl::mul(tl::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip), adv));
    const Var ent = tl::mean(tl::masked_entropy(logits, mb.mask));
    const Var l_clip = tl::mean(surr);
    total = tl::sub(tl::scale(l_clip, -1.0), tl::scale(ent, cfg.entropy_coef));
    out.policy = -l_clip.value()(0, 0);
    out.entropy = ent.value()(0, 0);
    const auto& rv = ratio.value();
    int clipped = 0;
    for (int r = 0; r < rv.rows(); ++r)
      if (std::abs(rv(r, 0) - 1.0) > cfg.clip) ++clipped;
    out.clip_fraction = static_cast<double>(clipped) / static_cast<double>(rv.rows());
  }
  if (mb.critic_in.rows() > 0) {
    const Var v = net.value.forward(tape, tape.constant(mb.critic_in));
    const Var vl = tl::mean(tl::square(tl::sub(v, tape.constant(mb.returns))));
    out.value = vl.value()(0, 0);
    total = tl::add(total, tl::scale(vl, cfg.value_coef));
  }
  out.total = total;
  return out;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(EnvConfig env_cfg, PPOConfig cfg, std::uint64_t seed)
    : env_cfg_(std::move(env_cfg)), cfg_(cfg), seed_(seed), env_(env_cfg_),
      net_(env_.obs_width(), env_.num_agents(), cfg_, seed),
      policy_(std::make_unique<ActorCriticPolicy>(net_)), actor_opt_(cfg.lr), critic_opt_(cfg.lr),
      shuffle_rng_(Rng::stream(seed, "minibatch")) {
  cfg_.validate();
  for (std::uint64_t j = 0; j < 2; ++j) eval_seeds_.push_back(mix_seed(seed_ ^ (0xe7a1000ULL + j)));
}

std::uint64_t Trainer::episode_seed(int iteration, int k) const {
  return mix_seed(seed_ * 0x10001ULL + static_cast<std::uint64_t>(iteration) * 64ULL +
                  static_cast<std::uint64_t>(k));
}

Rollout Trainer::collect(std::uint64_t episode_seed) {
  Rollout r;
  auto& pol = policy();
  pol.record_into(&r);
  const auto res = run_episode(env_, pol, episode_seed, cfg_.discount);
  pol.record_into(nullptr);
  r.stats = res.stats;
  compute_advantages(r);
  return r;
}

void Trainer::compute_advantages(Rollout& r) const {
  const int steps = static_cast<int>(r.rewards.size());
  const int n = net_.node_count();
  const int per_step = net_.centralized() ? 1 : n;
  if (static_cast<int>(r.critic_inputs.size()) != steps * per_step)
    throw ShapeError("rollout critic inputs do not match the step count");
  Mat in(static_cast<int>(r.critic_inputs.size()), net_.critic_width());
  for (int k = 0; k < in.rows(); ++k)
    for (int c = 0; c < in.cols(); ++c) in(k, c) = r.critic_inputs[k][c];
  const Mat v = in.rows() > 0 ? net_.value.eval(in) : Mat(0, 1);
  std::vector<double> scaled(r.rewards.size());
  for (std::size_t k = 0; k < scaled.size(); ++k) scaled[k] = r.rewards[k] * cfg_.reward_scale;

  std::vector<std::vector<double>> adv(static_cast<std::size_t>(per_step));
  r.returns.assign(r.critic_inputs.size(), 0.0);
  for (int j = 0; j < per_step; ++j) {
    // The horizon ends the episode: the bootstrap value is zero.
    std::vector<double> vals(static_cast<std::size_t>(steps) + 1, 0.0);
    for (int k = 0; k < steps; ++k) vals[k] = v(k * per_step + j, 0);
    adv[j] = gae(scaled, vals, cfg_.discount, cfg_.gae_lambda);
    for (int k = 0; k < steps; ++k) r.returns[k * per_step + j] = adv[j][k] + vals[k];
  }
  r.advantages.resize(r.samples.size());
  for (std::size_t s = 0; s < r.samples.size(); ++s) {
    const auto& d = r.samples[s];
    r.advantages[s] = adv[net_.centralized() ? 0 : d.agent][d.t];
  }
}

Minibatch Trainer::make_minibatch(const Rollout& r, std::span<const std::size_t> idx,
                                  std::span<const std::size_t> critic_idx) const {
  Minibatch mb;
  const int b = static_cast<int>(idx.size());
  const int w = net_.obs_width(), a = net_.action_dim();
  mb.obs.resize(b, w);
  mb.mask.resize(b, a);
  mb.old_logp.resize(b, 1);
  mb.advantages.resize(b, 1);
  mb.lambda.resize(b, 1);
  for (int k = 0; k < b; ++k) {
    const auto& s = r.samples[idx[k]];
    for (int c = 0; c < w; ++c) mb.obs(k, c) = s.obs[c];
    for (int c = 0; c < a; ++c) mb.mask(k, c) = s.mask[c];
    mb.actions.push_back(s.action);
    mb.old_logp(k, 0) = s.logp;
    mb.advantages(k, 0) = r.advantages[idx[k]];
    mb.guide_index.push_back(s.guide_index);
    mb.guide_action.push_back(s.guide_action);
    mb.lambda(k, 0) = s.lambda;
  }
  const int c_rows = static_cast<int>(critic_idx.size());
  mb.critic_in.resize(c_rows, net_.critic_width());
  mb.returns.resize(c_rows, 1);
  for (int k = 0; k < c_rows; ++k) {
    const auto& ci = r.critic_inputs[critic_idx[k]];
    for (int c = 0; c < mb.critic_in.cols(); ++c) mb.critic_in(k, c) = ci[c];
    mb.returns(k, 0) = r.returns[critic_idx[k]];
  }
  return mb;
}

ActorInput Trainer::actor_input(const Minibatch& mb) {
  const int b = static_cast<int>(mb.actions.size());
  return {Mat::Zero(b, 1), Mat::Zero(b, net_.hidden())};
}

Var Trainer::aux_loss(Tape&, const Minibatch&, LossStats&) { return {}; }

namespace {

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.uniform_index(i)]);
}

}  // namespace

LossStats Trainer::update(Rollout& r) {
  LossStats st;
  const std::size_t n = r.samples.size();
  const std::size_t c = r.critic_inputs.size();
  if (n == 0 && c == 0) return st;
  std::vector<double> adv = r.advantages;
  if (cfg_.normalize_advantages && n > 1) {
    const double mu = std::accumulate(adv.begin(), adv.end(), 0.0) / static_cast<double>(n);
    double var = 0.0;
    for (double x : adv) var += (x - mu) * (x - mu);
    const double sd = std::sqrt(var / static_cast<double>(n));
    for (double& x : adv) x = (x - mu) / (sd + 1e-8);
  }
  std::swap(adv, r.advantages);
  const std::size_t parts = std::max<std::size_t>(1, (n + cfg_.minibatch - 1) / cfg_.minibatch);
  std::vector<std::size_t> order(n), corder(c);
  std::iota(order.begin(), order.end(), 0);
  std::iota(corder.begin(), corder.end(), 0);
  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    shuffle(order, shuffle_rng_);
    shuffle(corder, shuffle_rng_);
    for (std::size_t p = 0; p < parts; ++p) {
      const std::size_t a0 = p * n / parts, a1 = (p + 1) * n / parts;
      const std::size_t c0 = p * c / parts, c1 = (p + 1) * c / parts;
      const Minibatch mb = make_minibatch(r, std::span(order).subspan(a0, a1 - a0),
                                          std::span(corder).subspan(c0, c1 - c0));
      const ActorInput in = actor_input(mb);
      Tape tape;
      const PpoTerms terms = ppo_loss(tape, net_, mb, in, cfg_);
      Var total = terms.total;
      const Var aux = aux_loss(tape, mb, st);
      if (aux.tape) total = tl::add(total, aux);
      const double loss = total.value()(0, 0);
      if (!std::isfinite(loss))
        throw DivergenceError("non-finite loss at iteration " + std::to_string(iteration_) + " (policy " +
                           std::to_string(terms.policy) + ", value " + std::to_string(terms.value) + ")");
      net_.actor.zero_grad();
      net_.critic.zero_grad();
      tape.backward(total);
      net_.actor.clip_grad_norm(cfg_.max_grad_norm);
      net_.critic.clip_grad_norm(cfg_.max_grad_norm);
      if (!mb.actions.empty()) actor_opt_.step(net_.actor);
      if (mb.critic_in.rows() > 0) critic_opt_.step(net_.critic);
      aux_step();
      st.policy_loss += terms.policy;
      st.value_loss += terms.value;
      st.entropy += terms.entropy;
      st.clip_fraction += terms.clip_fraction;
      ++st.minibatches;
    }
  }
  std::swap(adv, r.advantages);
  if (st.minibatches > 0) {
    const double k = st.minibatches;
    st.policy_loss /= k;
    st.value_loss /= k;
    st.entropy /= k;
    st.clip_fraction /= k;
    st.feat_loss /= k;
    st.act_loss /= k;
  }
  return st;
}

LossStats Trainer::update_critic_only(Rollout& r) {
  LossStats st;
  const std::size_t c = r.critic_inputs.size();
  std::vector<std::size_t> corder(c);
  std::iota(corder.begin(), corder.end(), 0);
  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    shuffle(corder, shuffle_rng_);
    const Minibatch mb = make_minibatch(r, {}, corder);
    Tape tape;
    const PpoTerms terms = ppo_loss(tape, net_, mb, {}, cfg_);
    net_.critic.zero_grad();
    tape.backward(terms.total);
    net_.critic.clip_grad_norm(cfg_.max_grad_norm);
    critic_opt_.step(net_.critic);
    st.value_loss += terms.value;
    ++st.minibatches;
  }
  if (st.minibatches > 0) st.value_loss /= st.minibatches;
  return st;
}

std::pair<double, double> Trainer::evaluate() {
  double sr = 0.0, ret = 0.0;
  for (auto s : eval_seeds_) {
    const auto res = run_episode(env_, policy(), s, cfg_.discount);
    sr += res.stats.success_rate();
    ret += res.undiscounted_return;
  }
  const double k = static_cast<double>(std::max<std::size_t>(1, eval_seeds_.size()));
  return {sr / k, ret / k};
}

IterationMetrics Trainer::iterate() {
  IterationMetrics m;
  m.iteration = iteration_ + 1;
  const double lr = cfg_.lr * std::pow(cfg_.lr_decay, iteration_ / cfg_.eval_interval);
  actor_opt_.set_lr(lr);
  critic_opt_.set_lr(lr);
  on_lr(lr);
  m.lr = lr;

  Rollout all;
  for (int k = 0; k < cfg_.episodes_per_iteration; ++k) {
    Rollout r = collect(episode_seed(iteration_, k));
    m.stats.arrivals += r.stats.arrivals;
    m.stats.successes += r.stats.successes;
    m.stats.deadline_violations += r.stats.deadline_violations;
    m.stats.reliability_violations += r.stats.reliability_violations;
    m.episode_return += std::accumulate(r.rewards.begin(), r.rewards.end(), 0.0);
    for (std::size_t t = 0; t < r.lambda_trace.size(); ++t) {
      const double l = r.lambda_trace[t];
      all.lambda_trace.push_back(l);
      if (t == 0) continue;
      if (!(l >= m.lambda_lo)) m.lambda_lo = std::isnan(m.lambda_lo) ? l : std::min(m.lambda_lo, l);
      if (!(l <= m.lambda_hi)) m.lambda_hi = std::isnan(m.lambda_hi) ? l : std::max(m.lambda_hi, l);
    }
    for (auto& s : r.samples) all.samples.push_back(std::move(s));
    for (auto& ci : r.critic_inputs) all.critic_inputs.push_back(std::move(ci));
    all.advantages.insert(all.advantages.end(), r.advantages.begin(), r.advantages.end());
    all.returns.insert(all.returns.end(), r.returns.begin(), r.returns.end());
  }
  m.episodes = cfg_.episodes_per_iteration;
  m.episode_return /= m.episodes;
  m.success_rate = m.stats.success_rate();
  if (!all.lambda_trace.empty())
    m.lambda_mean = std::accumulate(all.lambda_trace.begin(), all.lambda_trace.end(), 0.0) /
                    static_cast<double>(all.lambda_trace.size());
  m.loss = update(all);
  m.validity_rate = validity_rate();
  ++iteration_;
  if (iteration_ % cfg_.eval_interval == 0 && !eval_seeds_.empty()) {
    std::tie(m.eval_success, m.eval_return) = evaluate();
    m.evaluated = true;
  }
  return m;
}

}  // namespace cecsim

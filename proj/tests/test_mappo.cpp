#include <cmath>
#include <numeric>

#include "cecsim/errors.hpp"
#include "cecsim/mappo.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace cecsim;
using tl::Mat;

namespace {

ActionMask mask_of(std::initializer_list<int> bits) {
  ActionMask m;
  for (int b : bits) m.bits.push_back(static_cast<std::uint8_t>(b));
  return m;
}

Mat random_mat(int r, int c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

// Random minibatch whose old log-probs sit `spread` away from the current ones.
Minibatch random_batch(const ActorCritic& net, int b, double spread, Rng& rng) {
  Minibatch mb;
  const int a = net.action_dim();
  mb.obs = random_mat(b, net.obs_width(), rng);
  mb.mask = Mat::Zero(b, a);
  for (int r = 0; r < b; ++r) {
    for (int c = 0; c < a; ++c) mb.mask(r, c) = rng.bernoulli(0.6) ? 1.0 : 0.0;
    mb.mask(r, static_cast<int>(rng.uniform_index(static_cast<std::size_t>(a)))) = 1.0;
  }
  const Mat p = tl::masked_softmax(net.logits(mb.obs, Mat::Zero(b, 1), Mat::Zero(b, net.hidden())), mb.mask);
  mb.old_logp.resize(b, 1);
  mb.advantages = random_mat(b, 1, rng, -2.0, 2.0);
  for (int r = 0; r < b; ++r) {
    int pick = 0;
    while (mb.mask(r, pick) < 0.5) ++pick;
    for (int c = 0; c < a; ++c)
      if (mb.mask(r, c) > 0.5 && rng.bernoulli(0.5)) pick = c;
    mb.actions.push_back(pick);
    mb.old_logp(r, 0) = std::log(p(r, pick)) + rng.uniform(-spread, spread);
  }
  mb.critic_in = random_mat(b, net.critic_width(), rng);
  mb.returns = random_mat(b, 1, rng);
  mb.lambda = Mat::Zero(b, 1);
  mb.guide_index.assign(static_cast<std::size_t>(b), -1);
  mb.guide_action.assign(static_cast<std::size_t>(b), -1);
  return mb;
}

ActorInput zero_input(const ActorCritic& net, int b) { return {Mat::Zero(b, 1), Mat::Zero(b, net.hidden())}; }

}  // namespace

TEST_CASE("gae") {
  const std::vector<double> r{1.0, 0.0};
  const std::vector<double> v{0.5, 0.2, 0.0};
  const auto a = gae(r, v, 0.99, 0.95);
  CHECK(a[1] == doctest::Approx(-0.2).epsilon(1e-12));
  CHECK(a[0] == doctest::Approx(0.50990).epsilon(1e-12));

  const auto td = gae(r, v, 0.99, 0.0);
  CHECK(td[0] == doctest::Approx(1.0 + 0.99 * 0.2 - 0.5));
  CHECK(td[1] == doctest::Approx(-0.2));

  const std::vector<double> z(5, 0.0), zv(6, 0.0);
  for (double x : gae(z, zv, 0.99, 0.95)) CHECK(x == 0.0);

  CHECK_THROWS_AS(gae(r, r, 0.99, 0.95), ShapeError);
}

TEST_CASE("gae with lambda one telescopes") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> r(10), v(11);
    for (auto& x : r) x = rng.uniform(-1.0, 1.0);
    for (auto& x : v) x = rng.uniform(-2.0, 2.0);
    v.back() = rng.uniform(-2.0, 2.0);
    const double g = 0.97;
    const auto a = gae(r, v, g, 1.0);
    for (int t = 0; t < 10; ++t) {
      double ret = 0.0, w = 1.0;
      for (int k = t; k < 10; ++k, w *= g) ret += w * r[k];
      ret += w * v[10];
      CHECK(std::abs(a[t] - (ret - v[t])) < 1e-10);
    }
  }
}

TEST_CASE("clipped surrogate") {
  CHECK(clipped_surrogate(1.5, 1.0, 0.2) == doctest::Approx(1.2).epsilon(1e-12));
  CHECK(clipped_surrogate(0.5, -1.0, 0.2) == doctest::Approx(-0.8).epsilon(1e-12));
  CHECK(clipped_surrogate(1.0, 0.37, 0.2) == 0.37);
  CHECK(clipped_surrogate(1.0, -2.5, 0.2) == -2.5);
  CHECK(clipped_surrogate(0.5, 1.0, 0.2) == 0.5);
}

TEST_CASE("entropy") {
  const std::vector<double> u{0.25, 0.25, 0.25, 0.25};
  CHECK(entropy(u, mask_of({1, 1, 1, 1})) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  const std::vector<double> two{0.5, 0.0, 0.5, 0.0, 0.0};
  CHECK(entropy(two, mask_of({1, 0, 1, 0, 0})) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  const std::vector<double> det{0.0, 1.0, 0.0};
  CHECK(entropy(det, mask_of({1, 1, 1})) == 0.0);

  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> p(6);
    double s = 0.0;
    for (auto& x : p) s += (x = rng.uniform());
    for (auto& x : p) x /= s;
    ActionMask m;
    for (int i = 0; i < 6; ++i) m.bits.push_back(rng.bernoulli(0.7) ? 1 : 0);
    m.bits[0] = 1;
    std::vector<int> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = 5; i > 0; --i) std::swap(perm[i], perm[rng.uniform_index(static_cast<std::size_t>(i + 1))]);
    std::vector<double> q(6);
    ActionMask mq;
    mq.bits.resize(6);
    for (int i = 0; i < 6; ++i) {
      q[perm[i]] = p[i];
      mq.bits[perm[i]] = m.bits[i];
    }
    CHECK(entropy(q, mq) == doctest::Approx(entropy(p, m)).epsilon(1e-12));
  }
}

TEST_CASE("ppo loss gradients match finite differences") {
  Rng rng(11);
  PPOConfig cfg;
  cfg.hidden = 5;
  cfg.entropy_coef = 0.05;
  for (int trial = 0; trial < 10; ++trial) {
    ActorCritic net(7, 3, cfg, 100 + trial);
    // Ratios inside and well outside the clip range.
    const Minibatch mb = random_batch(net, 6, trial % 2 == 0 ? 0.1 : 0.8, rng);
    const ActorInput in = zero_input(net, 6);
    auto loss = [&] {
      tl::Tape t;
      return ppo_loss(t, net, mb, in, cfg).total.value()(0, 0);
    };
    auto analytic = [&] {
      net.actor.zero_grad();
      net.critic.zero_grad();
      tl::Tape t;
      t.backward(ppo_loss(t, net, mb, in, cfg).total);
    };
    const auto ga = testsupport::finite_difference(net.actor, analytic, loss);
    const auto gc = testsupport::finite_difference(net.critic, analytic, loss);
    CHECK(ga.rel_error <= 1e-4);
    CHECK(gc.rel_error <= 1e-4);
    CHECK(ga.analytic_norm > 0.0);
  }
}

TEST_CASE("zero advantages and entropy weight leave the actor unchanged") {
  PPOConfig cfg;
  cfg.entropy_coef = 0.0;
  Trainer tr(EnvConfig{}, cfg, 5);
  Rollout r = tr.collect(tr.episode_seed(0, 0));
  REQUIRE(!r.samples.empty());
  std::fill(r.advantages.begin(), r.advantages.end(), 0.0);
  const auto actor = tr.net().actor.flat_values();
  const auto critic = tr.net().critic.flat_values();
  tr.update(r);
  CHECK(tr.net().actor.flat_values() == actor);
  CHECK(tr.net().critic.flat_values() != critic);
}

TEST_CASE("critic-only update keeps actor outputs bit-identical") {
  Trainer tr(EnvConfig{}, PPOConfig{}, 9);
  Rollout r = tr.collect(tr.episode_seed(0, 0));
  Rng rng(1);
  const Mat obs = random_mat(20, tr.net().obs_width(), rng, 0.0, 1.0);
  const Mat z1 = Mat::Zero(20, 1), zh = Mat::Zero(20, tr.net().hidden());
  const Mat before = tr.net().logits(obs, z1, zh);
  const auto critic = tr.net().critic.flat_values();
  tr.update_critic_only(r);
  CHECK(tr.net().logits(obs, z1, zh) == before);
  CHECK(tr.net().critic.flat_values() != critic);
}

TEST_CASE("zero clip range keeps the surrogate at or below its start") {
  PPOConfig cfg;
  cfg.clip = 0.0;
  cfg.entropy_coef = 0.0;
  cfg.hidden = 16;
  Rng rng(4);
  ActorCritic net(9, 4, cfg, 21);
  Minibatch mb = random_batch(net, 64, 0.0, rng);
  const double mean_adv = mb.advantages.mean();
  const ActorInput in = zero_input(net, 64);
  tl::Adam opt(1e-2);
  std::vector<double> gap;
  for (int epoch = 0; epoch < 3; ++epoch) {
    tl::Tape t;
    const auto terms = ppo_loss(t, net, mb, in, cfg);
    // policy = -mean(min(rho A, A)) >= -mean(A)
    gap.push_back(terms.policy + mean_adv);
    net.actor.zero_grad();
    net.critic.zero_grad();
    t.backward(terms.total);
    opt.step(net.actor);
  }
  CHECK(std::abs(gap[0]) < 1e-12);
  for (double g : gap) CHECK(g >= -1e-12);
  CHECK(gap[2] <= gap[1] + 1e-12);
}

TEST_CASE("masked actions are never sampled") {
  EnvConfig ec;
  Environment env(ec);
  auto [obs, masks] = env.reset(3);
  const int n = env.num_agents();
  PPOConfig cfg;
  ActorCritic net(env.obs_width(), n, cfg, 2);
  // Push the logits toward actions that will be masked.
  auto* bias = net.actor.find("head.1.b");
  REQUIRE(bias != nullptr);
  for (int c = 1; c < n; c += 2) bias->value(0, c) = 6.0;
  ActorCriticPolicy pol(net);
  Rng rng(8);
  long draws = 0, bad = 0;
  std::vector<long> hits(static_cast<std::size_t>(n + 1), 0);
  while (draws < 100000) {
    std::vector<ActionMask> m(static_cast<std::size_t>(n));
    for (auto& mk : m) {
      mk.bits.assign(static_cast<std::size_t>(n + 1), 0);
      for (int c = 0; c < n; c += 2) mk.bits[c] = rng.bernoulli(0.5) ? 1 : 0;
      mk.bits[0] = 1;
    }
    const auto a = pol.act(env, obs, m, rng);
    for (int i = 0; i < n; ++i) {
      ++draws;
      ++hits[a[i]];
      if (!m[i].valid(a[i])) ++bad;
    }
  }
  CHECK(bad == 0);
  CHECK(hits[0] > 0);
  CHECK(hits[2] > 0);
}

TEST_CASE("trainer runs and respects the mask") {
  PPOConfig cfg;
  cfg.eval_interval = 2;
  Trainer tr(EnvConfig{}, cfg, 1);
  for (int i = 0; i < 4; ++i) {
    const auto m = tr.iterate();
    CHECK(m.evaluated == ((i + 1) % 2 == 0));
    CHECK(std::isfinite(m.loss.value_loss));
    CHECK(m.success_rate >= 0.0);
    CHECK(m.success_rate <= 1.0);
  }
  CHECK(tr.iterations_done() == 4);
  const auto res = run_episode(tr.env(), tr.policy(), 77);
  CHECK(res.masked_actions == 0);

  PPOConfig bad;
  bad.clip = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("training is reproducible per seed") {
  Trainer a(EnvConfig{}, PPOConfig{}, 3), b(EnvConfig{}, PPOConfig{}, 3);
  for (int i = 0; i < 3; ++i) {
    const auto ma = a.iterate(), mb = b.iterate();
    CHECK(ma.success_rate == mb.success_rate);
    CHECK(ma.loss.policy_loss == mb.loss.policy_loss);
  }
  CHECK(a.net().actor.flat_values() == b.net().actor.flat_values());
}

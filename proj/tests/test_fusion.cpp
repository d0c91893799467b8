#include <cmath>

#include "cecsim/errors.hpp"
#include "cecsim/fusion.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace cecsim;
using tl::Mat;

namespace {

constexpr int kN = 3;
constexpr int kWidth = kNodeFeatures + kTaskFeatures + kNeighborFeatures * (kN - 1);

Mat random_mat(int r, int c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

FusionConfig small_fusion() {
  FusionConfig f;
  f.embed_dim = 4;
  f.key_dim = 3;
  return f;
}

PPOConfig small_ppo() {
  PPOConfig c;
  c.hidden = 5;
  c.entropy_coef = 0.05;
  return c;
}

Minibatch random_batch(const ActorCritic& net, int b, Rng& rng) {
  Minibatch mb;
  const int a = net.action_dim();
  mb.obs = random_mat(b, net.obs_width(), rng, 0.0, 1.0);
  mb.mask = Mat::Zero(b, a);
  mb.lambda = random_mat(b, 1, rng, 0.0, 1.0);
  for (int r = 0; r < b; ++r) {
    for (int c = 0; c < a - 1; ++c) mb.mask(r, c) = rng.bernoulli(0.7) ? 1.0 : 0.0;
    mb.mask(r, 0) = 1.0;
    int pick = 0;
    for (int c = 0; c < a; ++c)
      if (mb.mask(r, c) > 0.5 && rng.bernoulli(0.5)) pick = c;
    mb.actions.push_back(pick);
    const int g = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(a)));
    mb.guide_index.push_back(g);
    mb.guide_action.push_back(g < a - 1 ? g : -1);
  }
  const Mat p = tl::masked_softmax(net.logits(mb.obs, Mat::Zero(b, 1), Mat::Zero(b, net.hidden())), mb.mask);
  mb.old_logp.resize(b, 1);
  for (int r = 0; r < b; ++r) mb.old_logp(r, 0) = std::log(p(r, mb.actions[r])) + rng.uniform(-0.5, 0.5);
  mb.advantages = random_mat(b, 1, rng, -2.0, 2.0);
  mb.critic_in = random_mat(b, net.critic_width(), rng);
  mb.returns = random_mat(b, 1, rng);
  return mb;
}

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("schedule step") {
  FusionSchedule s;
  s.lambda_init = 0.5;
  s.beta = 1.0;
  s.eta = 0.9;
  s.interval = 50;
  CHECK(schedule_step(0.3, 100, s) == doctest::Approx(0.27).epsilon(1e-12));
  CHECK(schedule_step(s.lambda_min, 7, s) == s.lambda_min);
  s.gamma_decay = 0.99;
  CHECK(schedule_step(0.2, 3, s) == doctest::Approx(0.198).epsilon(1e-12));
  // Boosts are capped.
  s.eta = 1.0;
  CHECK(schedule_step(0.9, 0, s) == doctest::Approx(0.5));

  FusionSchedule bad;
  bad.lambda_min = 0.9;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("schedule stays within bounds") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    FusionSchedule s;
    s.lambda_init = rng.uniform(0.0, 1.0);
    s.beta = rng.uniform(0.0, 1.0 / std::max(s.lambda_init, 1e-9));
    s.beta = std::min(s.beta, 1.0 / std::max(s.lambda_init, 1e-9));
    s.eta = rng.uniform(0.01, 1.0);
    s.gamma_decay = rng.uniform(0.5, 1.0);
    s.lambda_min = rng.uniform(0.0, s.cap());
    s.interval = 1 + static_cast<int>(rng.uniform_index(60));
    s.validate();
    double lam = s.lambda_init;
    for (int t = 0; t < 300; ++t) {
      lam = schedule_step(lam, t, s);
      CHECK(lam >= s.lambda_min);
      CHECK(lam <= s.cap());
    }
  }
}

TEST_CASE("guidance embedding") {
  Rng rng(5);
  FusionNet f(kWidth, kN, 6, small_fusion(), 3);
  FusionNet g(kWidth, kN, 6, small_fusion(), 3);
  const Mat obs = random_mat(1, kWidth, rng, 0.0, 1.0);
  const Mat obs2(Mat::Ones(2, 1) * obs);
  tl::Tape t;
  const auto same = f.distill(t, obs2, {1, 1});
  CHECK(same.h_llm.value().row(0) == same.h_llm.value().row(1));
  const auto other = g.distill(t, obs2, {1, 1});
  CHECK(other.h_llm.value() == same.h_llm.value());
  const auto diff = f.distill(t, obs2, {0, 2});
  CHECK(diff.h_llm.value().row(0) != diff.h_llm.value().row(1));
  // Fallback uses the extra row; negative indices map to it.
  const auto fb = f.distill(t, obs2, {kN, -1});
  CHECK(fb.h_llm.value().row(0) == fb.h_llm.value().row(1));
  CHECK_THROWS_AS(f.distill(t, obs2, {0, kN + 1}), ShapeError);
  CHECK_THROWS_AS(f.distill(t, obs2, {0}), ShapeError);

  f.params.find("f2.0.w")->value.setZero();
  f.params.find("f2.0.b")->value << 0.1, -0.2, 0.3;
  const auto z = f.distill(t, Mat(Mat::Ones(3, 1) * obs), {0, 1, kN});
  for (int r = 0; r < 3; ++r) {
    CHECK(z.h_llm.value()(r, 0) == 0.1);
    CHECK(z.h_llm.value()(r, 1) == -0.2);
    CHECK(z.h_llm.value()(r, 2) == 0.3);
  }
}

TEST_CASE("distill") {
  Rng rng(6);
  FusionNet f(kWidth, kN, 6, small_fusion(), 4);
  const Mat obs = random_mat(4, kWidth, rng, 0.0, 1.0);
  tl::Tape t;
  // One key: the weight is 1 and the attention output is the value row.
  const auto d = f.distill(t, obs, {0, 1, 2, 3});
  CHECK(d.alpha.rows() == 4);
  CHECK(d.alpha.cols() == 1);
  for (int r = 0; r < 4; ++r) CHECK(d.alpha(r, 0) == doctest::Approx(1.0).epsilon(1e-15));
  const Mat expect = d.h_llm.value() * f.wv->value + d.h_env.value();
  CHECK((d.h_t.value() - expect).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((d.g_llm.value() - f.out.eval(d.h_t.value())).cwiseAbs().maxCoeff() < 1e-12);

  f.wv->value.setZero();
  tl::Tape t2;
  const auto r = f.distill(t2, obs, {0, 1, 2, 3});
  CHECK(r.h_t.value() == r.h_env.value());
  CHECK(r.g_llm.value() == f.out.eval(r.h_env.value()));

  CHECK_THROWS_AS(f.distill(t2, random_mat(4, kWidth + 1, rng), {0, 1, 2, 3}), ShapeError);
}

TEST_CASE("padding-aware encoder ignores dead neighbour slots") {
  Rng rng(8);
  FusionNet f(kWidth, kN, 6, small_fusion(), 5);
  for (int trial = 0; trial < 20; ++trial) {
    Mat obs = random_mat(1, kWidth, rng, 0.0, 1.0);
    const int c = kNodeFeatures + kTaskFeatures + kNeighborFeatures * static_cast<int>(rng.uniform_index(kN - 1));
    obs(0, c + 2) = 0.0;
    Mat other = obs;
    other(0, c) = rng.uniform();
    other(0, c + 1) = rng.uniform();
    const int g = static_cast<int>(rng.uniform_index(kN + 1));
    CHECK(f.guidance_features(obs, {g}) == f.guidance_features(other, {g}));
    // An alive slot is read.
    other(0, c + 2) = 1.0;
    obs(0, c + 2) = 1.0;
    CHECK(f.guidance_features(obs, {g}) != f.guidance_features(other, {g}));
  }
}

TEST_CASE("hybrid loss terms") {
  tl::Tape t;
  const Mat x = Mat::Constant(3, 2, 0.7);
  CHECK(feat_loss(t.constant(x), x).value()(0, 0) == 0.0);
  CHECK(feat_loss(t.constant(x), Mat::Constant(3, 2, 0.2)).value()(0, 0) == doctest::Approx(0.25));

  Mat mask = Mat::Zero(2, 6);
  mask.block(0, 0, 2, 4).setOnes();
  Mat w = Mat::Ones(2, 1);
  const auto la = act_loss(t.constant(Mat::Zero(2, 6)), mask, {0, 3}, w);
  CHECK(la.value()(0, 0) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  w(1, 0) = 0.0;
  Mat z = Mat::Zero(2, 6);
  z(1, 3) = 50.0;
  CHECK(act_loss(t.constant(z), mask, {0, 1}, w).value()(0, 0) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(act_loss(t.constant(z), mask, {0, 1}, Mat::Zero(2, 1)).value()(0, 0) == 0.0);

  Rng rng(9);
  ActorCritic net(kWidth, kN, small_ppo(), 1);
  FusionNet f(kWidth, kN, 5, small_fusion(), 1);
  const Minibatch mb = random_batch(net, 8, rng);
  Rng drop(1);
  const Frozen fz = make_frozen(f, net, mb, 0.1, drop);
  tl::Tape t1, t2;
  const auto with = hybrid_loss(t1, f, net, mb, fz, 1.0);
  const auto without = hybrid_loss(t2, f, net, mb, fz, 0.0);
  CHECK(without.total.value()(0, 0) == without.feat);
  CHECK(with.feat == without.feat);
  CHECK(with.total.value()(0, 0) == doctest::Approx(with.feat + with.act).epsilon(1e-14));
  CHECK(with.act > 0.0);
}

TEST_CASE("fuse") {
  Mat g(1, 3), l(1, 3);
  g << 1.0, -2.0, 0.5;
  l << 3.0, 4.0, -0.5;
  CHECK(fuse(g, l, Mat::Zero(1, 1)) == g);
  CHECK(fuse(g, l, Mat::Ones(1, 1)) == l);
  const Mat mid = fuse(g, l, Mat::Constant(1, 1, 0.5));
  CHECK(mid(0, 0) == 2.0);
  CHECK(mid(0, 1) == 1.0);
  CHECK(mid(0, 2) == 0.0);
  CHECK_THROWS_AS(fuse(g, Mat::Zero(1, 2), Mat::Zero(1, 1)), ShapeError);

  // The actor blend matches the explicit fuse.
  Rng rng(10);
  ActorCritic net(kWidth, kN, small_ppo(), 2);
  FusionNet f(kWidth, kN, 5, small_fusion(), 2);
  const Mat obs = random_mat(4, kWidth, rng, 0.0, 1.0);
  const Mat lam = random_mat(4, 1, rng, 0.0, 1.0);
  const Mat gl = f.guidance_features(obs, {0, 1, 2, 3});
  const Mat offset = (gl.array().colwise() * lam.col(0).array()).matrix();
  const Mat a = net.logits(obs, lam, offset);
  const Mat b = net.head.eval(fuse(net.phi.eval(obs), gl, lam));
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("hybrid and policy gradients match finite differences and stay separate") {
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const PPOConfig cfg = small_ppo();
    ActorCritic net(kWidth, kN, cfg, 50 + trial);
    FusionNet f(kWidth, kN, cfg.hidden, small_fusion(), 50 + trial);
    const Minibatch mb = random_batch(net, 6, rng);
    Rng drop(trial);
    const Frozen fz = make_frozen(f, net, mb, 0.2, drop);
    const ActorInput in{mb.lambda, fz.offset};
    auto zero = [&] {
      net.actor.zero_grad();
      net.critic.zero_grad();
      f.params.zero_grad();
    };

    auto hybrid = [&] {
      tl::Tape t;
      return hybrid_loss(t, f, net, mb, fz, 0.7).total.value()(0, 0);
    };
    auto hybrid_grad = [&] {
      zero();
      tl::Tape t;
      t.backward(hybrid_loss(t, f, net, mb, fz, 0.7).total);
    };
    const auto gh = testsupport::finite_difference(f.params, hybrid_grad, hybrid);
    CHECK(gh.rel_error <= 1e-4);
    CHECK(gh.analytic_norm > 0.0);
    hybrid_grad();
    CHECK(norm(net.actor.flat_grads()) == 0.0);
    CHECK(norm(net.critic.flat_grads()) == 0.0);

    auto policy = [&] {
      tl::Tape t;
      return ppo_loss(t, net, mb, in, cfg).total.value()(0, 0);
    };
    auto policy_grad = [&] {
      zero();
      tl::Tape t;
      t.backward(ppo_loss(t, net, mb, in, cfg).total);
    };
    CHECK(testsupport::finite_difference(net.actor, policy_grad, policy).rel_error <= 1e-4);
    policy_grad();
    CHECK(norm(f.params.flat_grads()) == 0.0);

    // The hybrid term sees the actor through a frozen snapshot.
    const ActorCritic snap(kWidth, kN, cfg, 50 + trial);
    auto both = [&] {
      tl::Tape t;
      const auto p = ppo_loss(t, net, mb, in, cfg);
      const auto h = hybrid_loss(t, f, snap, mb, fz, 0.7);
      return tl::add(p.total, h.total).value()(0, 0);
    };
    auto both_grad = [&] {
      zero();
      tl::Tape t;
      const auto p = ppo_loss(t, net, mb, in, cfg);
      const auto h = hybrid_loss(t, f, snap, mb, fz, 0.7);
      t.backward(tl::add(p.total, h.total));
    };
    CHECK(testsupport::finite_difference(f.params, both_grad, both).rel_error <= 1e-4);
    CHECK(testsupport::finite_difference(net.actor, both_grad, both).rel_error <= 1e-4);
    CHECK(testsupport::finite_difference(net.critic, both_grad, both).rel_error <= 1e-4);
  }
}

TEST_CASE("zero fusion coefficient reproduces plain MAPPO") {
  FusionConfig fc;
  fc.schedule.lambda_init = 0.0;
  fc.schedule.lambda_min = 0.0;
  PPOConfig cfg;
  Trainer plain(EnvConfig{}, cfg, 17);
  LedrlTrainer led(EnvConfig{}, cfg, fc, GuidanceConfig{}, std::make_shared<ScriptedProvider>(), 17);
  auto compare = [&](std::uint64_t seed) {
    std::vector<Mat> a, b;
    plain.policy().trace_into(&a);
    led.policy().trace_into(&b);
    const auto ra = run_episode(plain.env(), plain.policy(), seed);
    const auto rb = run_episode(led.env(), led.policy(), seed);
    plain.policy().trace_into(nullptr);
    led.policy().trace_into(nullptr);
    REQUIRE(a.size() == b.size());
    CHECK(a.size() > 50);
    bool same = true;
    for (std::size_t k = 0; k < a.size(); ++k) same = same && a[k] == b[k];
    CHECK(same);
    CHECK(ra.rewards == rb.rewards);
    CHECK(led.engine().stats().queries > 0);
  };
  compare(404);
  for (int i = 0; i < 2; ++i) {
    plain.iterate();
    led.iterate();
  }
  CHECK(plain.net().actor.flat_values() == led.net().actor.flat_values());
  compare(405);
}

TEST_CASE("ledrl training records a bounded lambda trace") {
  PPOConfig cfg;
  FusionConfig fc;
  fc.schedule.interval = 10;
  LedrlTrainer tr(EnvConfig{}, cfg, fc, GuidanceConfig{}, std::make_shared<ScriptedProvider>(), 2);
  Rollout r = tr.collect(tr.episode_seed(0, 0));
  REQUIRE(r.lambda_trace.size() == 100);
  CHECK(r.lambda_trace.front() == fc.schedule.lambda_init);
  for (std::size_t t = 1; t < r.lambda_trace.size(); ++t) {
    CHECK(r.lambda_trace[t] >= fc.schedule.lambda_min);
    CHECK(r.lambda_trace[t] <= fc.schedule.cap());
  }
  bool guided = false;
  for (const auto& s : r.samples) {
    CHECK(s.guide_index >= 0);
    CHECK(s.guide_index <= tr.env().num_agents());
    guided = guided || s.guide_action >= 0;
  }
  CHECK(guided);
  const auto fusion = tr.fusion().params.flat_values();
  const auto m = tr.iterate();
  CHECK(m.loss.feat_loss >= 0.0);
  CHECK(m.loss.act_loss > 0.0);
  CHECK(m.validity_rate == 1.0);
  CHECK(tr.fusion().params.flat_values() != fusion);
}

TEST_CASE("malformed guidance falls back and training proceeds") {
  LedrlTrainer tr(EnvConfig{}, PPOConfig{}, FusionConfig{}, GuidanceConfig{},
                  std::make_shared<ScriptedProvider>(1.0, 4), 3);
  const auto m = tr.iterate();
  CHECK(m.validity_rate == 0.0);
  CHECK(m.loss.act_loss == 0.0);
  const auto res = run_episode(tr.env(), tr.policy(), 12);
  CHECK(res.masked_actions == 0);
}

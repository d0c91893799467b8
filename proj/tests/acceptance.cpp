// Acceptance run: one PASS/FAIL line per criterion. Exit status is non-zero
// when any criterion fails.

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <numeric>

#include "CLI11.hpp"
#include "cecsim/errors.hpp"
#include "cecsim/harness.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

using namespace cecsim;
using tl::Mat;
using Clock = std::chrono::steady_clock;

namespace {

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int k, bool pass, const std::string& what, double secs) {
  if (!pass) ++failures;
  std::cout << fmt::format("criterion {:2d}  {}  {} ({:.1f} s)\n", k, pass ? "PASS" : "FAIL", what, secs)
            << std::flush;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

Mat random_mat(int r, int c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

// ---------------------------------------------------------------------------
// 1: closed-form examples

struct Examples {
  int total = 0;
  std::vector<std::string> failed;

  void near(const std::string& name, double got, double want, double tol = 1e-9) {
    ++total;
    if (!(std::abs(got - want) <= tol)) failed.push_back(fmt::format("{}: {} vs {}", name, got, want));
  }
  template <class E, class F>
  void throws(const std::string& name, F&& f) {
    ++total;
    try {
      f();
      failed.push_back(name + ": no error");
    } catch (const E&) {
    }
  }
};

void formula_suite() {
  const auto t0 = Clock::now();
  Examples ex;

  auto node = [](double hz, double a = 0.0, double g = 0.0) {
    NodeState n;
    n.spec.compute_hz = hz;
    n.spec.sw_fail_rate = a;
    n.spec.hw_fail_rate = g;
    return n;
  };
  Task t;
  t.cycles = 4e9;
  ex.near("exec 4e9/2e9", exec_delay(t, node(2e9)), 2.0);
  t.cycles = 0.0;
  ex.near("exec zero work", exec_delay(t, node(3e9)), 0.0);
  const Task big = make_task(0, 0, 2000 * kBitsPerKB, 1000.0, 4.0, 0.9);
  ex.near("exec 1.6e10/3e9", exec_delay(big, node(3e9)), 16.0 / 3.0);
  NodeState dead = node(3e9);
  dead.alive = false;
  ex.throws<InfeasibleExecutorError>("exec dead executor", [&] { (void)exec_delay(big, dead); });

  LinkState l{make_link(0, 1, 3.2e7, 0.0), true};
  Task s;
  s.size_bits = 4e6;
  ex.near("trans 4e6/3.2e7", trans_delay(s, l), 0.125);
  s.size_bits = 0.0;
  ex.near("trans zero size", trans_delay(s, l), 0.0);
  s.size_bits = 3.2e7;
  ex.near("trans unit ratio", trans_delay(s, l), 1.0);
  l.available = false;
  ex.throws<InfeasibleLinkError>("trans link down", [&] { (void)trans_delay(s, l); });

  const LinkSpec lk = make_link(0, 1, 2e6, 0.1);
  Task r;
  r.cycles = 1e9;
  r.size_bits = 1e6;
  ex.near("reliability exp(-0.15)", reliability(r, node(1e9, 0.05, 0.05).spec, &lk), std::exp(-0.15));
  ex.near("reliability 0.860708", reliability(r, node(1e9, 0.05, 0.05).spec, &lk), 0.860708, 1e-6);
  ex.near("reliability failure-free", reliability(r, node(1e9).spec, nullptr), 1.0);
  r.cycles = 2e9;
  ex.near("reliability local exp(-0.2)", reliability(r, node(1e9, 0.1, 0.0).spec), std::exp(-0.2));

  const std::vector<double> rw{1.0, 0.0}, v{0.5, 0.2, 0.0};
  const auto a = gae(rw, v, 0.99, 0.95);
  ex.near("gae t=1", a[1], -0.2);
  ex.near("gae t=0", a[0], 1.0 + 0.99 * 0.2 - 0.5 + 0.99 * 0.95 * -0.2);
  ex.near("gae t=0 value", a[0], 0.50990);
  const auto td = gae(rw, v, 0.99, 0.0);
  ex.near("gae lambda 0", td[0], 1.0 + 0.99 * 0.2 - 0.5);
  const std::vector<double> z(5, 0.0), zv(6, 0.0);
  for (double x : gae(z, zv, 0.99, 0.95)) ex.near("gae zeros", x, 0.0);

  ex.near("clip 1.5 x +1", clipped_surrogate(1.5, 1.0, 0.2), 1.2);
  ex.near("clip 0.5 x -1", clipped_surrogate(0.5, -1.0, 0.2), -0.8);
  ex.near("clip ratio 1", clipped_surrogate(1.0, 0.37, 0.2), 0.37);

  auto mask_of = [](std::initializer_list<int> bits) {
    ActionMask m;
    for (int b : bits) m.bits.push_back(static_cast<std::uint8_t>(b));
    return m;
  };
  ex.near("entropy uniform 4", entropy(std::vector<double>{0.25, 0.25, 0.25, 0.25}, mask_of({1, 1, 1, 1})),
          std::log(4.0));
  ex.near("entropy masked 2 of 5",
          entropy(std::vector<double>{0.5, 0.0, 0.5, 0.0, 0.0}, mask_of({1, 0, 1, 0, 0})), std::log(2.0));
  ex.near("entropy one-hot", entropy(std::vector<double>{0.0, 1.0, 0.0}, mask_of({1, 1, 1})), 0.0);

  {
    tl::Tape tp;
    Mat alpha;
    Mat q(1, 2), k(1, 2), vv(1, 3);
    q << 0.3, -0.7;
    k << 1.0, 2.0;
    vv << 4.0, 5.0, 6.0;
    const auto out = tl::attention(tp.constant(q), tp.constant(k), tp.constant(vv), 1, &alpha);
    ex.near("attention single key alpha", alpha(0, 0), 1.0);
    for (int j = 0; j < 3; ++j) ex.near("attention single key value", out.value()(0, j), vv(0, j));
    Mat k2 = Mat::Ones(1, 6), v2(1, 6), q2(1, 2);
    v2 << 1, 2, 3, 4, 5, 6;
    q2 << 0.5, 0.25;
    tl::attention(tp.constant(q2), tp.constant(k2), tp.constant(v2), 3, &alpha);
    for (int j = 0; j < 3; ++j) ex.near("attention identical keys", alpha(0, j), 1.0 / 3.0);
    Mat q3(1, 2), k3(1, 4), v3(1, 2);
    q3 << 1.0, 0.0;
    k3 << 1.0, 0.0, 0.0, 1.0;
    v3 << 10.0, 20.0;
    const auto o3 = tl::attention(tp.constant(q3), tp.constant(k3), tp.constant(v3), 2, &alpha);
    const double sc = 1.0 / std::sqrt(2.0);
    const double a0 = std::exp(sc) / (std::exp(sc) + 1.0);
    ex.near("attention two keys alpha", alpha(0, 0), a0);
    ex.near("attention two keys output", o3.value()(0, 0), 10.0 * a0 + 20.0 * (1.0 - a0));
    ex.throws<ConfigError>("attention d_k 0", [&] {
      (void)tl::attention(tp.constant(Mat(1, 0)), tp.constant(Mat(1, 0)), tp.constant(vv), 1);
    });
  }

  FusionSchedule sch;
  sch.lambda_init = 0.5;
  sch.beta = 1.0;
  sch.eta = 0.9;
  sch.interval = 50;
  ex.near("schedule decay at interval", schedule_step(0.3, 100, sch), 0.27);
  ex.near("schedule floor", schedule_step(sch.lambda_min, 7, sch), sch.lambda_min);
  sch.gamma_decay = 0.99;
  ex.near("schedule per-slot decay", schedule_step(0.2, 3, sch), 0.198);
  sch.eta = 1.0;
  ex.near("schedule cap", schedule_step(0.9, 0, sch), 0.5);

  const double secs = since(t0);
  for (const auto& f : ex.failed) std::cout << "    " << f << '\n';
  report(1, ex.failed.empty() && secs < 1.0,
         fmt::format("formula suite: {}/{} examples within 1e-9", ex.total - ex.failed.size(), ex.total), secs);
}

// ---------------------------------------------------------------------------
// 2: gradient oracle

constexpr int kN = 3;
constexpr int kWidth = kNodeFeatures + kTaskFeatures + kNeighborFeatures * (kN - 1);

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

void gradient_oracle() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  double worst_pi = 0.0, worst_a = 0.0, worst_sum = 0.0;
  bool separate = true;
  for (int trial = 0; trial < 20; ++trial) {
    PPOConfig cfg;
    cfg.hidden = 4 + static_cast<int>(rng.uniform_index(4));
    cfg.entropy_coef = rng.uniform(0.0, 0.1);
    cfg.centralized_critic = rng.bernoulli(0.5);
    FusionConfig fc;
    fc.embed_dim = 3 + static_cast<int>(rng.uniform_index(3));
    fc.key_dim = 2 + static_cast<int>(rng.uniform_index(3));
    const double wc = rng.uniform(0.1, 2.0);
    ActorCritic net(kWidth, kN, cfg, 300 + trial);
    const ActorCritic snap(kWidth, kN, cfg, 300 + trial);
    FusionNet f(kWidth, kN, cfg.hidden, fc, 300 + trial);
    const Minibatch mb = random_batch(net, 4 + static_cast<int>(rng.uniform_index(5)), rng);
    Rng drop(trial);
    const Frozen fz = make_frozen(f, net, mb, 0.2, drop);
    const ActorInput in{mb.lambda, fz.offset};
    auto zero = [&] {
      net.actor.zero_grad();
      net.critic.zero_grad();
      f.params.zero_grad();
    };

    auto lpi = [&] {
      tl::Tape tp;
      return ppo_loss(tp, net, mb, in, cfg).total.value()(0, 0);
    };
    auto lpi_grad = [&] {
      zero();
      tl::Tape tp;
      tp.backward(ppo_loss(tp, net, mb, in, cfg).total);
    };
    worst_pi = std::max(worst_pi, testsupport::finite_difference(net.actor, lpi_grad, lpi).rel_error);
    worst_pi = std::max(worst_pi, testsupport::finite_difference(net.critic, lpi_grad, lpi).rel_error);
    lpi_grad();
    for (double g : f.params.flat_grads()) separate = separate && g == 0.0;

    auto la = [&] {
      tl::Tape tp;
      return hybrid_loss(tp, f, net, mb, fz, wc).total.value()(0, 0);
    };
    auto la_grad = [&] {
      zero();
      tl::Tape tp;
      tp.backward(hybrid_loss(tp, f, net, mb, fz, wc).total);
    };
    worst_a = std::max(worst_a, testsupport::finite_difference(f.params, la_grad, la).rel_error);
    la_grad();
    for (double g : net.actor.flat_grads()) separate = separate && g == 0.0;

    auto sum = [&] {
      tl::Tape tp;
      return tl::add(ppo_loss(tp, net, mb, in, cfg).total, hybrid_loss(tp, f, snap, mb, fz, wc).total)
          .value()(0, 0);
    };
    auto sum_grad = [&] {
      zero();
      tl::Tape tp;
      tp.backward(tl::add(ppo_loss(tp, net, mb, in, cfg).total, hybrid_loss(tp, f, snap, mb, fz, wc).total));
    };
    for (tl::ParamSet* ps : {&net.actor, &net.critic, &f.params})
      worst_sum = std::max(worst_sum, testsupport::finite_difference(*ps, sum_grad, sum).rel_error);
  }
  const double secs = since(t0);
  const double worst = std::max({worst_pi, worst_a, worst_sum});
  report(2, worst <= 1e-4 && separate && secs < 30.0,
         fmt::format("gradient oracle: 20 instances, max rel error policy {:.1e} hybrid {:.1e} sum {:.1e}{}",
                     worst_pi, worst_a, worst_sum, separate ? "" : ", gradients leak across losses"),
         secs);
}

// ---------------------------------------------------------------------------
// 3: exact oracle

void oracle_equivalence() {
  const auto t0 = Clock::now();
  Rng rng(31337);
  std::vector<HeuristicPolicy> policies{
      HeuristicPolicy(HeuristicKind::kRatc), HeuristicPolicy(HeuristicKind::kAgsp),
      HeuristicPolicy(HeuristicKind::kGreedy), HeuristicPolicy(HeuristicKind::kRandom),
      HeuristicPolicy(HeuristicKind::kLocal)};
  int above = 0, checked = 0;
  for (int rep = 0; rep < 200; ++rep) {
    const auto inst = testsupport::random_static_instance(rng);
    const auto best = solve_exact(inst);
    for (const auto& p : policies) {
      const auto x = heuristic_assignment(inst, p, rng);
      ++checked;
      if (evaluate_assignment(inst, x).rate(inst.tasks.size()) > best.success_rate) ++above;
    }
  }
  int agree = 0;
  for (int rep = 0; rep < 100; ++rep) {
    BinPackingInstance bp;
    const int items = 1 + static_cast<int>(rng.uniform_index(8));
    for (int i = 0; i < items; ++i) bp.sizes.push_back(1.0 + static_cast<double>(rng.uniform_index(6)));
    bp.bins = 1 + static_cast<int>(rng.uniform_index(3));
    bp.capacity = 3.0 + static_cast<double>(rng.uniform_index(8));
    if (solve_exact(reduce_binpacking(bp)).feasible == testsupport::brute_force_packable(bp.sizes, bp.bins, bp.capacity))
      ++agree;
  }
  const double secs = since(t0);
  report(3, above == 0 && agree == 100 && secs < 120.0,
         fmt::format("oracle: {} of {} heuristic runs above the optimum on 200 instances, bin packing agreement {}/100",
                     above, checked, agree),
         secs);
}

// ---------------------------------------------------------------------------
// 4 and 9: mask safety and reward alignment over the same episodes

struct AlignmentTally {
  std::int64_t episodes = 0;
  std::int64_t mismatches = 0;
};
AlignmentTally alignment;

void check_alignment(const Environment& env, const EpisodeResult& res) {
  std::vector<Outcome> labels;
  std::int64_t ok = 0, bad = 0;
  for (const auto& o : env.outcomes()) {
    labels.push_back(o.outcome);
    (o.outcome == Outcome::kSuccess ? ok : bad) += 1;
  }
  const double sum_r = std::accumulate(res.rewards.begin(), res.rewards.end(), 0.0);
  ++alignment.episodes;
  if (sum_r != static_cast<double>(ok - bad) || res.undiscounted_return != sum_r ||
      res.stats.successes != ok || res.stats.success_rate() != success_rate(labels))
    ++alignment.mismatches;
}

void check_alignment(const std::vector<MetricsRow>& rows) {
  for (const auto& r : rows) {
    if (r.phase != "eval") continue;
    const std::int64_t bad = r.deadline_violations + r.reliability_violations;
    const std::int64_t resolved = r.successes + bad;
    const double rate = resolved == 0 ? 1.0 : static_cast<double>(r.successes) / static_cast<double>(resolved);
    ++alignment.episodes;
    if (r.episode_return != static_cast<double>(r.successes - bad) || r.success_rate != rate) ++alignment.mismatches;
  }
}

void mask_safety() {
  const auto t0 = Clock::now();
  ExperimentConfig cfg;
  constexpr std::int64_t kSteps = 100000;
  std::string detail;
  bool pass = true;
  for (const std::string name : {"random", "ratc", "agsp", "mappo", "ledrl"}) {
    PolicyHandle h = make_policy(name, cfg, 1);
    Environment env(cfg.env);
    std::int64_t steps = 0, masked = 0;
    for (std::uint64_t ep = 0; steps < kSteps; ++ep) {
      const auto res = run_episode(env, h.policy(), mix_seed(0x4a50000 + ep));
      steps += static_cast<std::int64_t>(res.rewards.size());
      masked += res.masked_actions;
      check_alignment(env, res);
    }
    pass = pass && masked == 0;
    detail += fmt::format("{}{} {}", detail.empty() ? "" : ", ", name, masked);
  }

  // Provider that never returns a parsable answer.
  LedrlTrainer noisy(cfg.env, cfg.ppo, cfg.fusion, cfg.guidance, std::make_shared<ScriptedProvider>(1.0, 4), 5);
  std::int64_t fallbacks = 0, invalid = 0, samples = 0;
  for (int ep = 0; ep < 20; ++ep) {
    const Rollout r = noisy.collect(mix_seed(0x4b50000 + ep));
    for (const auto& s : r.samples) {
      ++samples;
      const bool fell_back = s.guide_action < 0 && s.guide_index == cfg.env.node_count;
      fallbacks += fell_back ? 1 : 0;
      // The fallback action (local) and the executed action must both be allowed.
      if (s.mask[kLocalAction] < 0.5 || s.mask[static_cast<std::size_t>(s.action)] < 0.5) ++invalid;
    }
  }
  const bool fallback_ok = samples > 0 && fallbacks == samples && invalid == 0 &&
                           noisy.engine().stats().validity_rate() == 0.0;
  pass = pass && fallback_ok;
  const double secs = since(t0);
  report(4, pass && secs < 120.0,
         fmt::format("mask safety: masked actions in 1e5 steps: {}; malformed provider fell back on {}/{} decisions, "
                     "{} invalid",
                     detail, fallbacks, samples, invalid),
         secs);
}

// ---------------------------------------------------------------------------
// 5: collapse

void collapse() {
  const auto t0 = Clock::now();
  FusionConfig fc;
  fc.schedule.lambda_init = 0.0;
  fc.schedule.lambda_min = 0.0;
  PPOConfig cfg;
  Trainer plain(EnvConfig{}, cfg, 23);
  LedrlTrainer led(EnvConfig{}, cfg, fc, GuidanceConfig{}, std::make_shared<ScriptedProvider>(), 23);
  std::size_t compared = 0;
  int slots = 0;
  bool same = true;
  auto compare = [&](std::uint64_t seed) {
    std::vector<Mat> a, b;
    plain.policy().trace_into(&a);
    led.policy().trace_into(&b);
    const auto ra = run_episode(plain.env(), plain.policy(), seed);
    const auto rb = run_episode(led.env(), led.policy(), seed);
    plain.policy().trace_into(nullptr);
    led.policy().trace_into(nullptr);
    same = same && a.size() == b.size() && ra.rewards == rb.rewards;
    for (std::size_t k = 0; same && k < a.size(); ++k) same = a[k] == b[k];
    compared += a.size();
    slots = static_cast<int>(ra.rewards.size());
  };
  compare(501);
  plain.iterate();
  led.iterate();
  compare(502);
  same = same && led.engine().stats().queries > 0;
  const double secs = since(t0);
  report(5, same && slots == 100 && secs < 60.0,
         fmt::format("collapse: {} per-step distributions over two {}-slot episodes {}", compared, slots,
                     same ? "bit-identical" : "differ"),
         secs);
}

// ---------------------------------------------------------------------------
// 6: learning improvement

std::vector<double> per_seed(const std::vector<MetricsRow>& rows, const std::string& policy) {
  for (const auto& s : summarize(rows))
    if (s.policy == policy) return s.per_seed;
  return {};
}

std::string fmt_pp(double x) { return fmt::format("{:+.1f} pp", 100.0 * x); }

void learning(const ExperimentConfig& cfg, TrainedPolicies& trained, bool& lambda_ok, std::string& lambda_note) {
  const auto t0 = Clock::now();
  const int mid = cfg.iterations * 2 / 3;
  std::vector<MetricsRow> rand_rows, mid_rows, final_rows, train_rows;
  for (std::uint64_t seed : cfg.seeds) {
    const auto eval_seeds = evaluation_seeds(seed, cfg.eval_episodes);
    PolicyHandle r = make_policy("random", cfg, seed);
    evaluate_policy(r, cfg.env, eval_seeds, fmt::format("random/s{}", seed), seed, 0, rand_rows);
    for (const std::string name : {"mappo", "ledrl"}) {
      const auto ts = Clock::now();
      const std::string run_id = fmt::format("{}/s{}", name, seed);
      PolicyHandle h = make_policy(name, cfg, seed);
      try {
        train_policy(h, mid, run_id, seed, train_rows);
        evaluate_policy(h, cfg.env, eval_seeds, run_id, seed, mid, mid_rows);
        train_policy(h, cfg.iterations - mid, run_id, seed, train_rows);
      } catch (const std::runtime_error& e) {
        lambda_ok = false;
        lambda_note = run_id + ": " + e.what();
        throw;
      }
      evaluate_policy(h, cfg.env, eval_seeds, run_id, seed, cfg.iterations, final_rows);
      std::cout << fmt::format("    {} trained and evaluated in {:.1f} s\n", run_id, since(ts)) << std::flush;
      trained[name].push_back(std::move(h));
    }
  }
  check_alignment(rand_rows);
  check_alignment(mid_rows);
  check_alignment(final_rows);

  const auto rnd = per_seed(rand_rows, "random");
  const auto mp_mid = per_seed(mid_rows, "mappo"), ld_mid = per_seed(mid_rows, "ledrl");
  const auto mp = per_seed(final_rows, "mappo"), ld = per_seed(final_rows, "ledrl");
  const double a = mean(mp) - mean(rnd);
  const double b_final = mean(ld) - mean(mp);
  const double b_mid = mean(ld_mid) - mean(mp_mid);
  const bool c = mean(ld_mid) >= mean(mp);
  const double secs = since(t0);
  std::cout << fmt::format("    success means: random {:.2f} %, mappo {:.2f} % / {:.2f} %, ledrl {:.2f} % / {:.2f} % "
                           "(iteration {} / {})\n",
                           100 * mean(rnd), 100 * mean(mp_mid), 100 * mean(mp), 100 * mean(ld_mid), 100 * mean(ld),
                           mid, cfg.iterations);
  report(6, a >= 0.10 && b_final >= 0.03 && b_mid >= 0.03 && c && secs <= 600.0,
         fmt::format("learning: mappo-random {} (>= +10), ledrl-mappo {} at {} and {} at {} (>= +3), ledrl at {} "
                     "{} mappo final",
                     fmt_pp(a), fmt_pp(b_mid), mid, fmt_pp(b_final), cfg.iterations, mid,
                     c ? "reaches" : "falls short of"),
         secs);
}

// ---------------------------------------------------------------------------
// 7: robustness sweep

void robustness(ExperimentConfig cfg, TrainedPolicies& trained) {
  const auto t0 = Clock::now();
  cfg.policies = {"random", "local", "greedy", "ratc", "agsp", "mappo", "ledrl"};
  cfg.eval_episodes = 10;
  cfg.sweep = {};
  cfg.sweep.task_size_kb = {2000, 3000, 4000};
  cfg.sweep.intensity = {800, 1600, 2400};
  const auto r = sweep(cfg, "", nullptr, &trained);
  check_alignment(r.rows);
  for (const auto& f : r.flags)
    std::cout << fmt::format("    {} {}: {} -> {} rises {:.2f} pp, pooled sd {:.2f} pp\n", f.axis, f.policy, f.from,
                             f.to, 100 * f.increase, 100 * f.pooled_sd);
  const double secs = since(t0);
  report(7, r.flags.empty() && secs <= 600.0,
         fmt::format("robustness: {} policies x 6 points, {} increases, {} beyond one pooled sd", cfg.policies.size(),
                     r.increases.size(), r.flags.size()),
         secs);
}

// ---------------------------------------------------------------------------
// 8: lambda bounds

void schedule_bounds(bool lambda_ok, const std::string& note) {
  const auto t0 = Clock::now();
  // A second run with a tighter, faster schedule.
  FusionConfig fc;
  fc.schedule.lambda_init = 0.6;
  fc.schedule.beta = 0.5;
  fc.schedule.eta = 0.8;
  fc.schedule.gamma_decay = 0.97;
  fc.schedule.lambda_min = 0.1;
  fc.schedule.interval = 7;
  LedrlTrainer tr(EnvConfig{}, PPOConfig{}, fc, GuidanceConfig{}, std::make_shared<ScriptedProvider>(), 8);
  double lo = 1.0, hi = 0.0;
  bool ok = true;
  for (int i = 0; i < 10; ++i) {
    const auto m = tr.iterate();
    lo = std::min(lo, m.lambda_lo);
    hi = std::max(hi, m.lambda_hi);
    ok = ok && m.lambda_lo >= fc.schedule.lambda_min && m.lambda_hi <= fc.schedule.cap();
  }
  const double secs = since(t0);
  report(8, ok && lambda_ok,
         fmt::format("schedule bounds: default-schedule training runs {}; tight schedule range [{:.4f}, {:.4f}] within "
                     "[{}, {}]",
                     lambda_ok ? "stayed in bounds" : "failed: " + note, lo, hi, fc.schedule.lambda_min,
                     fc.schedule.cap()),
         secs);
}

// ---------------------------------------------------------------------------
// 10: latency

void latency(const ExperimentConfig& cfg, TrainedPolicies& trained) {
  const auto t0 = Clock::now();
  constexpr int kSteps = 3000;
  double slowest = 0.0;
  std::string slowest_name, detail;
  for (const std::string name : {"random", "local", "greedy", "ratc", "agsp"}) {
    PolicyHandle h = make_policy(name, cfg, 1);
    const auto st = measure_latency(h, cfg.env, kSteps, 1);
    if (st.mean_s > slowest) {
      slowest = st.mean_s;
      slowest_name = name;
    }
  }
  const auto mp = measure_latency(trained.at("mappo").front(), cfg.env, kSteps, 1);
  const auto ld = measure_latency(trained.at("ledrl").front(), cfg.env, kSteps, 1);

  ExperimentConfig stall = cfg;
  stall.guidance.timeout_ms = 100;
  PolicyHandle h;
  h.name = "ledrl";
  auto stub = std::make_shared<DelayedProvider>(std::make_shared<ScriptedProvider>(), std::chrono::milliseconds(1000));
  auto t = std::make_unique<LedrlTrainer>(stall.env, stall.ppo, stall.fusion, stall.guidance, stub, 1);
  h.ledrl = t.get();
  h.trainer = std::move(t);
  const auto sl = measure_latency(h, stall.env, 3, 1);
  const double p99 = percentile(sl.guidance_calls_s, 0.99);
  const bool order = slowest < mp.mean_s && mp.mean_s < ld.mean_s;
  const bool bounded = !sl.guidance_calls_s.empty() && p99 <= 0.100 + 0.050;
  report(10, order && bounded,
         fmt::format("latency: slowest heuristic {} {:.2f} us < mappo {:.2f} us < ledrl {:.2f} us: {}; stalled "
                     "provider p99 {:.1f} ms over {} calls (limit 150 ms)",
                     slowest_name, 1e6 * slowest, 1e6 * mp.mean_s, 1e6 * ld.mean_s, order ? "yes" : "no", 1e3 * p99,
                     sl.guidance_calls_s.size()),
         since(t0));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> only;
  app.add_option("--only", only, "Run only these criteria (6 is needed by 7, 8 and 10)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  auto want = [&](int k) { return only.empty() || std::find(only.begin(), only.end(), k) != only.end(); };

  ExperimentConfig cfg;
  cfg.seeds = {1, 2, 3, 4, 5};
  cfg.iterations = 300;
  cfg.eval_episodes = 20;
  TrainedPolicies trained;
  bool lambda_ok = true;
  std::string lambda_note;

  try {
    if (want(1)) formula_suite();
    if (want(2)) gradient_oracle();
    if (want(3)) oracle_equivalence();
    if (want(4)) mask_safety();
    if (want(5)) collapse();
    const bool learned = want(6) || want(7) || want(8) || want(10);
    if (learned) {
      try {
        learning(cfg, trained, lambda_ok, lambda_note);
      } catch (const std::exception& e) {
        report(6, false, fmt::format("learning: {}", e.what()), 0.0);
      }
    }
    if (want(7) && !trained.empty()) robustness(cfg, trained);
    if (want(8) && learned) schedule_bounds(lambda_ok, lambda_note);
    if (want(9))
      report(9, alignment.episodes > 0 && alignment.mismatches == 0,
             fmt::format("reward alignment: {} completed episodes, {} mismatches", alignment.episodes,
                         alignment.mismatches),
             0.0);
    if (want(10) && !trained.empty()) latency(cfg, trained);
  } catch (const std::exception& e) {
    std::cout << "error: " << e.what() << '\n';
    return 1;
  }
  std::cout << (failures == 0 ? "all criteria passed\n" : fmt::format("{} criteria failed\n", failures));
  return failures == 0 ? 0 : 1;
}

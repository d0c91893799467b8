#include "cecsim/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cecsim/errors.hpp"

namespace cecsim {

void StaticInstance::validate() const {
  topology.validate();
  if (horizon_slots < 1) throw ConfigError("horizon_slots must be >= 1");
  for (const auto& t : tasks) {
    if (t.origin < 0 || static_cast<std::size_t>(t.origin) >= topology.size())
      throw ConfigError("task origin out of range");
    if (!topology.nodes[t.origin].alive) throw ConfigError("task origin is not alive");
    if (!(t.deadline_s > 0.0)) throw ConfigError("task deadline must be positive");
    if (t.size_bits < 0.0 || t.cycles < 0.0) throw ConfigError("negative task size");
  }
}

std::vector<NodeId> executor_choices(const StaticInstance& inst, std::size_t task) {
  const NodeId o = inst.tasks[task].origin;
  std::vector<NodeId> c = inst.topology.live_neighbors(o);
  c.push_back(o);
  std::sort(c.begin(), c.end());
  return c;
}

namespace {

struct Job {
  std::size_t task;
  double ready_s;
  double tt_s;
  double beta;
};

}  // namespace

AssignmentEval evaluate_assignment(const StaticInstance& inst, const Assignment& x) {
  const auto& topo = inst.topology;
  const double tau = topo.slot_duration_s;
  const std::size_t n = inst.tasks.size();
  AssignmentEval ev;
  ev.outcomes.assign(n, Outcome::kDeadlineViolation);
  ev.delay_s.assign(n, 0.0);
  ev.reliability.assign(n, 0.0);

  // Resource constraints over the horizon.
  const double horizon = inst.horizon_s();
  std::vector<double> cycles(topo.size(), 0.0), memory(topo.size(), 0.0);
  std::vector<double> link_bits(topo.links.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const Task& t = inst.tasks[i];
    cycles[x[i]] += t.cycles;
    memory[x[i]] += t.size_bits;
    if (x[i] != t.origin) {
      const auto k = topo.find_link(t.origin, x[i]);
      if (!k || !topo.links[*k].available || !topo.nodes[x[i]].alive) return ev;
      link_bits[*k] += t.size_bits;
    }
  }
  for (std::size_t j = 0; j < topo.size(); ++j) {
    if (cycles[j] > topo.nodes[j].spec.compute_hz * horizon) return ev;
    if (memory[j] > topo.nodes[j].spec.memory_bits) return ev;
  }
  for (std::size_t k = 0; k < topo.links.size(); ++k)
    if (link_bits[k] > topo.links[k].spec.rate_bps * horizon) return ev;
  ev.feasible = true;

  // Transmission: FIFO per link direction in (slot, id) order. Delivered
  // tasks become executable at the next slot boundary.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return inst.tasks[a].created_slot < inst.tasks[b].created_slot;
  });
  std::vector<std::array<double, 2>> link_free(topo.links.size(), {0.0, 0.0});
  std::vector<Job> jobs;
  for (std::size_t i : order) {
    const Task& t = inst.tasks[i];
    const double created = t.created_slot * tau;
    if (x[i] == t.origin) {
      jobs.push_back({i, created, 0.0, 0.0});
      continue;
    }
    const auto k = *topo.find_link(t.origin, x[i]);
    const auto& spec = topo.links[k].spec;
    const int dir = spec.a == t.origin ? 0 : 1;
    const double tt = t.size_bits / spec.rate_bps;
    const double start = std::max(created, link_free[k][dir]);
    link_free[k][dir] = start + tt;
    const double arrive = start + tt;
    jobs.push_back({i, std::ceil(arrive / tau - 1e-12) * tau, tt, spec.fail_rate});
  }
  std::stable_sort(jobs.begin(), jobs.end(), [&](const Job& a, const Job& b) {
    if (a.ready_s != b.ready_s) return a.ready_s < b.ready_s;
    return a.task < b.task;
  });

  std::vector<double> cpu_free(topo.size(), 0.0);
  for (const auto& j : jobs) {
    const Task& t = inst.tasks[j.task];
    const NodeId e = x[j.task];
    const auto& spec = topo.nodes[e].spec;
    const double tc = t.cycles / spec.compute_hz;
    const double start = std::max(j.ready_s, cpu_free[e]);
    cpu_free[e] = start + tc;
    const double delay = cpu_free[e] - t.created_slot * tau;
    const std::pair<double, double> hop{j.beta, j.tt_s};
    const double rel = path_reliability(spec.sw_fail_rate, spec.hw_fail_rate, tc,
                                        std::span(&hop, j.tt_s > 0.0 || j.beta > 0.0 ? 1 : 0));
    ev.delay_s[j.task] = delay;
    ev.reliability[j.task] = rel;
    ev.outcomes[j.task] = task_outcome(delay, rel, t);
    if (ev.outcomes[j.task] == Outcome::kSuccess) ++ev.successes;
  }
  return ev;
}

OracleResult solve_exact(const StaticInstance& inst, std::uint64_t guard) {
  inst.validate();
  const std::size_t n = inst.tasks.size();
  std::vector<std::vector<NodeId>> choices(n);
  double space = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    choices[i] = executor_choices(inst, i);
    space *= static_cast<double>(choices[i].size());
  }
  if (space > static_cast<double>(guard))
    throw InstanceTooLargeError("instance has " + std::to_string(space) +
                                " assignments, above the guard of " + std::to_string(guard));

  const auto& topo = inst.topology;
  const double horizon = inst.horizon_s();
  OracleResult best;
  best.success_rate = 0.0;
  int best_successes = -1;
  Assignment x(n, 0);
  std::vector<double> cycles(topo.size(), 0.0), memory(topo.size(), 0.0);
  std::vector<double> link_bits(topo.links.size(), 0.0);

  // Depth-first in lexicographic order; partial resource sums prune early
  // because they only grow.
  auto dfs = [&](auto&& self, std::size_t i) -> void {
    if (best_successes == static_cast<int>(n)) return;
    if (i == n) {
      ++best.evaluated;
      const auto ev = evaluate_assignment(inst, x);
      if (ev.feasible && ev.successes > best_successes) {
        best_successes = ev.successes;
        best.assignment = x;
      }
      return;
    }
    const Task& t = inst.tasks[i];
    for (NodeId e : choices[i]) {
      std::optional<std::size_t> k;
      if (e != t.origin) k = topo.find_link(t.origin, e);
      cycles[e] += t.cycles;
      memory[e] += t.size_bits;
      if (k) link_bits[*k] += t.size_bits;
      const bool ok = cycles[e] <= topo.nodes[e].spec.compute_hz * horizon &&
                      memory[e] <= topo.nodes[e].spec.memory_bits &&
                      (!k || link_bits[*k] <= topo.links[*k].spec.rate_bps * horizon);
      if (ok) {
        x[i] = e;
        self(self, i + 1);
      }
      cycles[e] -= t.cycles;
      memory[e] -= t.size_bits;
      if (k) link_bits[*k] -= t.size_bits;
    }
  };
  dfs(dfs, 0);
  if (best_successes >= 0) {
    best.feasible = true;
    best.success_rate = n == 0 ? 1.0 : static_cast<double>(best_successes) / static_cast<double>(n);
  }
  return best;
}

StaticInstance reduce_binpacking(const BinPackingInstance& bp) {
  if (bp.bins < 1 || !(bp.capacity > 0.0)) throw ConfigError("bin packing needs bins >= 1 and Q > 0");
  for (double a : bp.sizes)
    if (!(a > 0.0)) throw ConfigError("bin packing item sizes must be positive");
  StaticInstance inst;
  inst.horizon_slots = 1;
  inst.topology.slot_duration_s = 1.0;
  for (int j = 0; j < bp.bins; ++j) {
    NodeSpec s;
    s.id = j;
    s.compute_hz = bp.capacity;  // F * horizon = Q
    s.memory_bits = 1e300;
    inst.topology.nodes.push_back({s, true});
  }
  for (int i = 0; i < bp.bins; ++i)
    for (int j = i + 1; j < bp.bins; ++j)
      inst.topology.links.push_back({make_link(i, j, 1e300, 0.0), true});
  for (std::size_t i = 0; i < bp.sizes.size(); ++i) {
    Task t = make_task(0, 0, 0.0, 0.0, 1e300, 1e-300);
    t.cycles = bp.sizes[i];
    t.id = static_cast<std::int64_t>(i);
    inst.tasks.push_back(t);
  }
  return inst;
}

ObsScales static_scales(const StaticInstance& inst) {
  ObsScales s;
  const auto& topo = inst.topology;
  s.slot_duration_s = topo.slot_duration_s;
  s.cpu_max_hz = s.alpha_max = s.gamma_max = s.beta_max = s.rate_max_bps = 0.0;
  double cpu_sum = 0.0, a_sum = 0.0, g_sum = 0.0;
  for (const auto& n : topo.nodes) {
    s.cpu_max_hz = std::max(s.cpu_max_hz, n.spec.compute_hz);
    s.alpha_max = std::max(s.alpha_max, n.spec.sw_fail_rate);
    s.gamma_max = std::max(s.gamma_max, n.spec.hw_fail_rate);
    cpu_sum += n.spec.compute_hz;
    a_sum += n.spec.sw_fail_rate;
    g_sum += n.spec.hw_fail_rate;
  }
  const double nn = static_cast<double>(topo.size());
  s.cpu_mean_hz = cpu_sum / nn;
  s.alpha_mean = a_sum / nn;
  s.gamma_mean = g_sum / nn;
  for (const auto& l : topo.links) {
    s.rate_max_bps = std::max(s.rate_max_bps, l.spec.rate_bps);
    s.beta_max = std::max(s.beta_max, l.spec.fail_rate);
  }
  s.size_max_bits = s.cycles_max = s.deadline_s = 0.0;
  double cycles_sum = 0.0;
  for (const auto& t : inst.tasks) {
    s.size_max_bits = std::max(s.size_max_bits, t.size_bits);
    s.cycles_max = std::max(s.cycles_max, t.cycles);
    s.deadline_s = std::max(s.deadline_s, t.deadline_s);
    cycles_sum += t.cycles;
  }
  s.cycles_mean = inst.tasks.empty() ? 0.0 : cycles_sum / static_cast<double>(inst.tasks.size());
  s.reliability_floor = inst.tasks.empty() ? 0.9 : inst.tasks.front().reliability_floor;
  // Zero maxima would divide by zero; they only occur when every value is 0.
  for (double* v : {&s.cpu_max_hz, &s.alpha_max, &s.gamma_max, &s.beta_max, &s.rate_max_bps,
                    &s.size_max_bits, &s.cycles_max, &s.deadline_s})
    if (*v <= 0.0) *v = 1.0;
  s.max_hops = 5.0;
  s.queue_norm = std::max<double>(1.0, static_cast<double>(inst.tasks.size()));
  s.wait_norm_slots = std::max(1.0, s.deadline_s / s.slot_duration_s);
  return s;
}

ActionMask static_mask(const StaticInstance& inst, std::size_t task) {
  const int n = static_cast<int>(inst.topology.size());
  const NodeId o = inst.tasks[task].origin;
  ActionMask m;
  m.bits.assign(static_cast<std::size_t>(action_dim(n)), 0);
  m.bits[kLocalAction] = 1;
  for (NodeId j : inst.topology.live_neighbors(o)) m.bits[forward_action(node_slot(o, j, n))] = 1;
  return m;
}

Observation static_observation(const StaticInstance& inst, const Assignment& prefix, std::size_t task,
                               const ObsScales& sc) {
  const auto& topo = inst.topology;
  const int n = static_cast<int>(topo.size());
  const Task& t = inst.tasks[task];
  const NodeId o = t.origin;
  const auto& spec = topo.nodes[o].spec;
  int exec_q = 0, buffer_q = 0;
  for (std::size_t i = 0; i < prefix.size() && i < task; ++i) {
    if (prefix[i] == o) ++exec_q;
    if (inst.tasks[i].origin == o && prefix[i] != o) ++buffer_q;
  }
  auto clip = [](double v) { return std::clamp(v, 0.0, 1.0); };
  Observation obs;
  obs.neighbors.assign(static_cast<std::size_t>(n - 1), NeighborFeatures{});
  obs.node = {clip(spec.arrival_prob), clip(spec.sw_fail_rate / sc.alpha_max),
              clip(spec.hw_fail_rate / sc.gamma_max), clip(spec.compute_hz / sc.cpu_max_hz),
              clip(exec_q / sc.queue_norm), clip(buffer_q / sc.queue_norm)};
  obs.task_present = true;
  obs.task = {clip(t.size_bits / sc.size_max_bits), clip(t.cycles / sc.cycles_max),
              clip(t.deadline_s / sc.deadline_s), 0.0, 0.0};
  for (NodeId j : topo.live_neighbors(o)) {
    const auto& l = topo.links[*topo.find_link(o, j)].spec;
    auto& f = obs.neighbors[node_slot(o, j, n)];
    f.rate_norm = clip(l.rate_bps / sc.rate_max_bps);
    f.beta_norm = clip(l.fail_rate / sc.beta_max);
    f.alive = 1.0;
  }
  return obs;
}

Assignment heuristic_assignment(const StaticInstance& inst, const HeuristicPolicy& policy, Rng& rng) {
  const int n = static_cast<int>(inst.topology.size());
  const auto sc = static_scales(inst);
  Assignment x(inst.tasks.size(), 0);
  for (std::size_t i = 0; i < inst.tasks.size(); ++i) {
    const NodeId o = inst.tasks[i].origin;
    const auto obs = static_observation(inst, x, i, sc);
    const auto mask = static_mask(inst, i);
    const auto slots = relative_slots(o, n);
    const int a = policy.decide(obs, mask, o, slots, sc, rng);
    x[i] = a == kLocalAction || a == idle_action(n) ? o : slot_node(o, a - 1, n);
  }
  return x;
}

}  // namespace cecsim

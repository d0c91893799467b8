#include "cecsim/env.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cecsim/errors.hpp"

namespace cecsim {

namespace {

double clip01(double x) { return std::clamp(x, 0.0, 1.0); }

double safe_div(double x, double d) { return d > 0.0 ? x / d : 0.0; }

void check_range(const Range& r, const char* name, double lo_bound) {
  if (!(r.lo >= lo_bound) || !(r.hi >= r.lo))
    throw ConfigError(std::string("invalid range for ") + name);
}

}  // namespace

void EnvConfig::validate() const {
  if (!fixed_topology && node_count < 2) throw ConfigError("node_count must be >= 2");
  if (topology != "random" && topology != "ring")
    throw ConfigError("topology must be 'random' or 'ring'");
  if (horizon < 1) throw ConfigError("horizon must be >= 1");
  if (!(slot_duration_s > 0.0)) throw ConfigError("slot_duration_s must be positive");
  if (!(deadline_s > 0.0)) throw ConfigError("deadline_s must be positive");
  if (!(reliability_floor > 0.0 && reliability_floor <= 1.0))
    throw ConfigError("reliability_floor must lie in (0, 1]");
  if (!(intensity_scale > 0.0)) throw ConfigError("intensity_scale must be positive");
  check_range(task_size_kb, "task_size_kb", 0.0);
  if (!(task_size_kb.lo > 0.0)) throw ConfigError("task sizes must be positive");
  check_range(intensity, "intensity", 0.0);
  check_range(cpu_hz, "cpu_hz", 0.0);
  if (!(cpu_hz.lo > 0.0)) throw ConfigError("cpu_hz must be positive");
  check_range(link_rate_mbps, "link_rate_mbps", 0.0);
  if (!(link_rate_mbps.lo > 0.0)) throw ConfigError("link rates must be positive");
  check_range(arrival_prob, "arrival_prob", 0.0);
  if (arrival_prob.hi > 1.0) throw ConfigError("arrival_prob must lie in [0,1]");
  check_range(sw_fail_rate, "sw_fail_rate", 0.0);
  check_range(hw_fail_rate, "hw_fail_rate", 0.0);
  check_range(link_fail_rate, "link_fail_rate", 0.0);
  for (double p : {node_death_prob, node_appear_prob, link_down_prob, link_up_prob})
    if (p < 0.0 || p > 1.0) throw ConfigError("churn probabilities must lie in [0,1]");
  if (max_hops < 0) throw ConfigError("max_hops must be >= 0");
  if (queue_norm < 1) throw ConfigError("queue_norm must be >= 1");
  if (avg_degree <= 0.0) throw ConfigError("avg_degree must be positive");
  if (fixed_topology) fixed_topology->validate();
}

ObsScales ObsScales::from_config(const EnvConfig& cfg) {
  ObsScales s;
  s.size_max_bits = cfg.task_size_kb.hi * kBitsPerKB;
  s.cycles_max = s.size_max_bits * cfg.intensity.hi * cfg.intensity_scale;
  s.cpu_max_hz = cfg.cpu_hz.hi;
  s.rate_max_bps = cfg.link_rate_mbps.hi * kBitsPerSecondPerMBps;
  s.alpha_max = cfg.sw_fail_rate.hi;
  s.gamma_max = cfg.hw_fail_rate.hi;
  s.beta_max = cfg.link_fail_rate.hi;
  if (cfg.fixed_topology) {
    for (const auto& n : cfg.fixed_topology->nodes) {
      s.cpu_max_hz = std::max(s.cpu_max_hz, n.spec.compute_hz);
      s.alpha_max = std::max(s.alpha_max, n.spec.sw_fail_rate);
      s.gamma_max = std::max(s.gamma_max, n.spec.hw_fail_rate);
    }
    for (const auto& l : cfg.fixed_topology->links) {
      s.rate_max_bps = std::max(s.rate_max_bps, l.spec.rate_bps);
      s.beta_max = std::max(s.beta_max, l.spec.fail_rate);
    }
  }
  s.deadline_s = cfg.deadline_s;
  s.slot_duration_s = cfg.slot_duration_s;
  s.wait_norm_slots = std::max(1.0, cfg.deadline_s / cfg.slot_duration_s);
  s.max_hops = std::max(1, cfg.max_hops);
  s.queue_norm = cfg.queue_norm;
  s.reliability_floor = cfg.reliability_floor;
  s.cpu_mean_hz = 0.5 * (cfg.cpu_hz.lo + cfg.cpu_hz.hi);
  s.alpha_mean = 0.5 * (cfg.sw_fail_rate.lo + cfg.sw_fail_rate.hi);
  s.gamma_mean = 0.5 * (cfg.hw_fail_rate.lo + cfg.hw_fail_rate.hi);
  s.cycles_mean = 0.5 * (cfg.task_size_kb.lo + cfg.task_size_kb.hi) * kBitsPerKB * 0.5 *
                  (cfg.intensity.lo + cfg.intensity.hi) * cfg.intensity_scale;
  return s;
}

std::vector<double> Observation::flatten() const {
  std::vector<double> out(static_cast<std::size_t>(width()));
  flatten_into(out.data());
  return out;
}

void Observation::flatten_into(double* out) const {
  out = std::copy(node.begin(), node.end(), out);
  out = std::copy(task.begin(), task.end(), out);
  for (const auto& n : neighbors) {
    *out++ = n.rate_norm;
    *out++ = n.beta_norm;
    *out++ = n.alive;
  }
}

int ActionMask::count() const {
  return static_cast<int>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

std::vector<int> ActionMask::valid_actions() const {
  std::vector<int> out;
  for (std::size_t a = 0; a < bits.size(); ++a)
    if (bits[a]) out.push_back(static_cast<int>(a));
  return out;
}

std::string_view to_string(FailureCause c) {
  switch (c) {
    case FailureCause::kNone: return "none";
    case FailureCause::kDeadline: return "deadline";
    case FailureCause::kSoftware: return "software";
    case FailureCause::kHardware: return "hardware";
    case FailureCause::kLink: return "link";
    case FailureCause::kNodeLost: return "node_lost";
    case FailureCause::kHopCap: return "hop_cap";
    case FailureCause::kReliabilityFloor: return "reliability_floor";
  }
  return "unknown";
}

int TransitionRecord::successes() const {
  return static_cast<int>(std::count_if(resolved.begin(), resolved.end(), [](const auto& r) {
    return r.outcome == Outcome::kSuccess;
  }));
}

int TransitionRecord::violations() const {
  return static_cast<int>(resolved.size()) - successes();
}

// ---------------------------------------------------------------------------
// Graph generation

std::vector<std::pair<NodeId, NodeId>> ring_edges(int n) {
  std::vector<std::pair<NodeId, NodeId>> e;
  if (n == 2) return {{0, 1}};
  for (int i = 0; i < n; ++i) e.emplace_back(std::min(i, (i + 1) % n), std::max(i, (i + 1) % n));
  std::sort(e.begin(), e.end());
  return e;
}

std::vector<std::pair<NodeId, NodeId>> random_connected_edges(int n, double avg_degree,
                                                              Rng& rng) {
  const double p = std::min(1.0, avg_degree / std::max(1, n - 1));
  for (int attempt = 0; attempt < 100000; ++attempt) {
    std::vector<std::pair<NodeId, NodeId>> e;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        if (rng.bernoulli(p)) e.emplace_back(i, j);
    // Connectivity via union-find.
    std::vector<int> parent(n);
    for (int i = 0; i < n; ++i) parent[i] = i;
    auto find = [&](int x) {
      while (parent[x] != x) x = parent[x] = parent[parent[x]];
      return x;
    };
    int components = n;
    for (auto [a, b] : e) {
      const int ra = find(a), rb = find(b);
      if (ra != rb) {
        parent[ra] = rb;
        --components;
      }
    }
    if (components == 1) return e;
  }
  throw ConfigError("could not sample a connected random graph");
}

// ---------------------------------------------------------------------------
// Environment

Environment::Environment(EnvConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  if (cfg_.fixed_topology) cfg_.node_count = static_cast<int>(cfg_.fixed_topology->size());
  scales_ = cfg_.obs_scales ? *cfg_.obs_scales : ObsScales::from_config(cfg_);
}

int Environment::obs_width() const {
  return kNodeFeatures + kTaskFeatures + kNeighborFeatures * (num_agents() - 1);
}

NodeSpec Environment::sample_node(NodeId id, Rng& rng) const {
  NodeSpec s;
  s.id = id;
  s.compute_hz = rng.uniform(cfg_.cpu_hz.lo, cfg_.cpu_hz.hi);
  s.memory_bits = cfg_.memory_bits;
  s.arrival_prob = rng.uniform(cfg_.arrival_prob.lo, cfg_.arrival_prob.hi);
  s.sw_fail_rate = rng.uniform(cfg_.sw_fail_rate.lo, cfg_.sw_fail_rate.hi);
  s.hw_fail_rate = rng.uniform(cfg_.hw_fail_rate.lo, cfg_.hw_fail_rate.hi);
  return s;
}

LinkSpec Environment::sample_link(NodeId i, NodeId j, Rng& rng) const {
  const double rate =
      rng.uniform(cfg_.link_rate_mbps.lo, cfg_.link_rate_mbps.hi) * kBitsPerSecondPerMBps;
  const double beta = rng.uniform(cfg_.link_fail_rate.lo, cfg_.link_fail_rate.hi);
  return make_link(i, j, rate, beta);
}

Topology Environment::generate_topology(Rng& rng) const {
  Topology t;
  t.slot_duration_s = cfg_.slot_duration_s;
  for (int i = 0; i < cfg_.node_count; ++i) t.nodes.push_back({sample_node(i, rng), true});
  const auto edges = cfg_.topology == "ring"
                         ? ring_edges(cfg_.node_count)
                         : random_connected_edges(cfg_.node_count, cfg_.avg_degree, rng);
  for (auto [a, b] : edges) t.links.push_back({sample_link(a, b, rng), true});
  return t;
}

std::pair<std::vector<Observation>, std::vector<ActionMask>> Environment::reset(
    std::uint64_t seed) {
  arrivals_rng_ = Rng::stream(seed, "arrivals");
  failures_rng_ = Rng::stream(seed, "failures");
  topology_rng_ = Rng::stream(seed, "topology");
  if (cfg_.fixed_topology) {
    topo_ = *cfg_.fixed_topology;
  } else {
    topo_ = generate_topology(topology_rng_);
  }
  topo_.slot_duration_s = cfg_.slot_duration_s;
  topo_.validate();
  if (!topo_.connected_alive()) throw ConfigError("initial topology is disconnected");

  nodes_.assign(topo_.size(), NodeRt{});
  links_.assign(topo_.links.size(), LinkRt{});
  tasks_.clear();
  history_.clear();
  carry_.clear();
  stats_ = {};
  slot_ = 0;
  sample_arrivals();
  return {observe_all(), masks_all()};
}

void Environment::sample_arrivals() {
  // Every node consumes the same number of draws each slot, so arrival
  // traces do not depend on the policy or on churn.
  for (std::size_t i = 0; i < topo_.size(); ++i) {
    const double u = arrivals_rng_.uniform();
    const double kb = arrivals_rng_.uniform(cfg_.task_size_kb.lo, cfg_.task_size_kb.hi);
    const double delta = arrivals_rng_.uniform(cfg_.intensity.lo, cfg_.intensity.hi);
    const auto& node = topo_.nodes[i];
    if (!node.alive || !(u < node.spec.arrival_prob)) continue;
    TaskRec rec;
    rec.task = make_task(static_cast<NodeId>(i), slot_, kb * kBitsPerKB,
                         delta * cfg_.intensity_scale, cfg_.deadline_s, cfg_.reliability_floor);
    rec.task.id = static_cast<std::int64_t>(tasks_.size());
    rec.stage = Stage::kPending;
    rec.at = static_cast<NodeId>(i);
    nodes_[i].pending.push_back(rec.task.id);
    tasks_.push_back(std::move(rec));
    ++stats_.arrivals;
  }
}

std::optional<Task> Environment::current_task(NodeId agent) const {
  const auto& q = nodes_.at(agent).pending;
  if (q.empty()) return std::nullopt;
  return tasks_[q.front()].task;
}

int Environment::buffered_from(NodeId i) const {
  int n = 0;
  for (std::size_t k = 0; k < links_.size(); ++k) {
    const auto& spec = topo_.links[k].spec;
    if (spec.a == i) n += static_cast<int>(links_[k].buffer[0].size());
    if (spec.b == i) n += static_cast<int>(links_[k].buffer[1].size());
  }
  return n;
}

ActionMask Environment::valid_actions(NodeId agent) const {
  const int n = num_agents();
  ActionMask m;
  m.bits.assign(static_cast<std::size_t>(action_dim()), 0);
  const bool alive = topo_.nodes.at(agent).alive;
  m.bits[kLocalAction] = alive ? 1 : 0;
  if (alive) {
    for (NodeId j : topo_.live_neighbors(agent))
      m.bits[forward_action(node_slot(agent, j, n))] = 1;
  }
  m.bits[idle_action(n)] = nodes_[agent].pending.empty() ? 1 : 0;
  return m;
}

Observation Environment::observe(NodeId agent) const {
  const int n = num_agents();
  Observation o;
  o.neighbors.assign(static_cast<std::size_t>(n - 1), NeighborFeatures{});
  const auto& node = topo_.nodes.at(agent);
  if (!node.alive) return o;
  const auto& s = node.spec;
  const auto& rt = nodes_[agent];
  o.node = {clip01(s.arrival_prob),
            clip01(safe_div(s.sw_fail_rate, scales_.alpha_max)),
            clip01(safe_div(s.hw_fail_rate, scales_.gamma_max)),
            clip01(safe_div(s.compute_hz, scales_.cpu_max_hz)),
            clip01(rt.exec.size() / scales_.queue_norm),
            clip01(buffered_from(agent) / scales_.queue_norm)};
  if (!rt.pending.empty()) {
    const Task& t = tasks_[rt.pending.front()].task;
    const double elapsed = slot_ * cfg_.slot_duration_s - created_s(t);
    o.task_present = true;
    o.task = {clip01(safe_div(t.size_bits, scales_.size_max_bits)),
              clip01(safe_div(t.cycles, scales_.cycles_max)),
              clip01((t.deadline_s - elapsed) / t.deadline_s),
              clip01(t.hops / scales_.max_hops),
              clip01(t.wait_slots / scales_.wait_norm_slots)};
    // A task with no remaining budget still has positive size, so the task
    // block is never all-zero while a task is present.
  }
  for (NodeId j : topo_.live_neighbors(agent)) {
    const auto k = *topo_.find_link(agent, j);
    const auto& l = topo_.links[k].spec;
    auto& f = o.neighbors[node_slot(agent, j, n)];
    f.rate_norm = clip01(safe_div(l.rate_bps, scales_.rate_max_bps));
    f.beta_norm = clip01(safe_div(l.fail_rate, scales_.beta_max));
    f.alive = 1.0;
  }
  return o;
}

std::vector<Observation> Environment::observe_all() const {
  std::vector<Observation> out;
  out.reserve(topo_.size());
  for (int i = 0; i < num_agents(); ++i) out.push_back(observe(i));
  return out;
}

std::vector<ActionMask> Environment::masks_all() const {
  std::vector<ActionMask> out;
  out.reserve(topo_.size());
  for (int i = 0; i < num_agents(); ++i) out.push_back(valid_actions(i));
  return out;
}

std::vector<double> Environment::team_observation() const {
  const int w = obs_width();
  std::vector<double> out(static_cast<std::size_t>(w * num_agents()));
  for (int i = 0; i < num_agents(); ++i) observe(i).flatten_into(out.data() + i * w);
  return out;
}

AgentView Environment::agent_view(NodeId agent) const {
  const int n = num_agents();
  AgentView v;
  v.node = agent;
  v.spec = topo_.nodes.at(agent).spec;
  v.alive = topo_.nodes[agent].alive;
  v.exec_queue = static_cast<int>(nodes_[agent].exec.size());
  v.buffer_queue = buffered_from(agent);
  v.mean_cycles = scales_.cycles_mean;
  if (!nodes_[agent].pending.empty()) {
    v.task = tasks_[nodes_[agent].pending.front()].task;
    v.task_elapsed_s = slot_ * cfg_.slot_duration_s - created_s(*v.task);
  }
  for (NodeId j : topo_.live_neighbors(agent)) {
    const auto k = *topo_.find_link(agent, j);
    const auto& l = topo_.links[k].spec;
    const int dir = l.a == agent ? 0 : 1;
    NeighborView nv;
    nv.slot = node_slot(agent, j, n);
    nv.node = j;
    nv.reachable = true;
    nv.rate_bps = l.rate_bps;
    nv.link_fail_rate = l.fail_rate;
    nv.compute_hz = topo_.nodes[j].spec.compute_hz;
    nv.sw_fail_rate = topo_.nodes[j].spec.sw_fail_rate;
    nv.hw_fail_rate = topo_.nodes[j].spec.hw_fail_rate;
    nv.exec_queue = static_cast<int>(nodes_[j].exec.size() + nodes_[j].pending.size());
    nv.buffer_queue = static_cast<int>(links_[k].buffer[dir].size());
    v.neighbors.push_back(nv);
  }
  std::sort(v.neighbors.begin(), v.neighbors.end(),
            [](const NeighborView& a, const NeighborView& b) { return a.slot < b.slot; });
  return v;
}

void Environment::finish(std::int64_t id, Outcome outcome, FailureCause cause, double now_s,
                         NodeId executor, double rel, std::vector<ResolvedTask>& out) {
  auto& rec = tasks_[id];
  rec.stage = Stage::kDone;
  ResolvedTask r;
  r.task_id = id;
  r.origin = rec.task.origin;
  r.executor = executor;
  r.outcome = outcome;
  r.cause = cause;
  r.delay_s = now_s - created_s(rec.task);
  r.reliability = rel;
  r.hops = rec.task.hops;
  switch (outcome) {
    case Outcome::kSuccess: ++stats_.successes; break;
    case Outcome::kDeadlineViolation: ++stats_.deadline_violations; break;
    case Outcome::kReliabilityViolation: ++stats_.reliability_violations; break;
  }
  out.push_back(r);
}

void Environment::lose_task(std::int64_t id, FailureCause cause, double now_s,
                            std::vector<ResolvedTask>& out) {
  const auto& rec = tasks_[id];
  // Lost work counts as a reliability violation unless the deadline had
  // already passed.
  const Outcome o = now_s - created_s(rec.task) > rec.task.deadline_s
                        ? Outcome::kDeadlineViolation
                        : Outcome::kReliabilityViolation;
  finish(id, o, cause, now_s, -1, 0.0, out);
}

void Environment::drop_link(std::size_t k, double now_s, std::vector<ResolvedTask>& out) {
  for (int dir = 0; dir < 2; ++dir) {
    for (auto id : links_[k].buffer[dir]) lose_task(id, FailureCause::kLink, now_s, out);
    links_[k].buffer[dir].clear();
    links_[k].free_s[dir] = 0.0;
  }
}

void Environment::kill_node(NodeId j, double now_s, std::vector<ResolvedTask>& out) {
  auto& rt = nodes_[j];
  for (auto id : rt.exec) lose_task(id, FailureCause::kNodeLost, now_s, out);
  for (auto id : rt.pending) lose_task(id, FailureCause::kNodeLost, now_s, out);
  rt = NodeRt{};
  for (std::size_t k = 0; k < topo_.links.size(); ++k) {
    const auto& l = topo_.links[k].spec;
    if (l.a == j || l.b == j) drop_link(k, now_s, out);
  }
  topo_.nodes[j].alive = false;
}

void Environment::spawn_node(NodeId j) {
  // Replace the dead slot with a fresh node attached to random alive nodes.
  topo_.nodes[j] = {sample_node(j, topology_rng_), true};
  nodes_[j] = NodeRt{};
  for (std::size_t k = topo_.links.size(); k-- > 0;) {
    const auto& l = topo_.links[k].spec;
    if (l.a == j || l.b == j) {
      topo_.links.erase(topo_.links.begin() + static_cast<std::ptrdiff_t>(k));
      links_.erase(links_.begin() + static_cast<std::ptrdiff_t>(k));
    }
  }
  std::vector<NodeId> alive;
  for (std::size_t i = 0; i < topo_.size(); ++i)
    if (static_cast<NodeId>(i) != j && topo_.nodes[i].alive) alive.push_back(static_cast<NodeId>(i));
  const auto degree = static_cast<std::size_t>(std::ceil(cfg_.avg_degree));
  // Partial Fisher-Yates for the attachment targets.
  const std::size_t pick = std::min(degree, alive.size());
  for (std::size_t s = 0; s < pick; ++s) {
    const std::size_t r = s + topology_rng_.uniform_index(alive.size() - s);
    std::swap(alive[s], alive[r]);
    topo_.links.push_back({sample_link(j, alive[s], topology_rng_), true});
    links_.push_back(LinkRt{});
  }
}

void Environment::set_node_alive(NodeId node, bool alive) {
  const double now = slot_ * cfg_.slot_duration_s;
  if (!alive && topo_.nodes.at(node).alive) {
    kill_node(node, now, carry_);
  } else if (alive) {
    topo_.nodes.at(node).alive = true;
  }
}

void Environment::set_link_available(NodeId i, NodeId j, bool available) {
  const auto k = topo_.find_link(i, j);
  if (!k) throw ConfigError("no link between the given nodes");
  if (!available && topo_.links[*k].available)
    drop_link(*k, slot_ * cfg_.slot_duration_s, carry_);
  topo_.links[*k].available = available;
}

TransitionRecord Environment::step(std::span<const int> joint_action) {
  const int n = num_agents();
  if (static_cast<int>(joint_action.size()) != n)
    throw InvalidActionError("joint action has " + std::to_string(joint_action.size()) +
                             " entries, expected " + std::to_string(n));
  if (done()) throw InvalidActionError("episode is over; call reset()");

  TransitionRecord rec;
  rec.slot = slot_;
  rec.observations = observe_all();
  rec.masks = masks_all();
  rec.actions.assign(joint_action.begin(), joint_action.end());
  for (int i = 0; i < n; ++i) {
    if (!rec.masks[i].valid(joint_action[i]))
      throw InvalidActionError("agent " + std::to_string(i) + " submitted masked action " +
                               std::to_string(joint_action[i]));
  }

  const double t0 = slot_ * cfg_.slot_duration_s;
  const double t1 = t0 + cfg_.slot_duration_s;
  std::vector<ResolvedTask> resolved = std::move(carry_);
  carry_.clear();

  // (b) enqueue decisions
  for (int i = 0; i < n; ++i) {
    const int a = joint_action[i];
    auto& rt = nodes_[i];
    if (a == idle_action(n) || rt.pending.empty()) continue;
    const auto id = rt.pending.front();
    rt.pending.pop_front();
    auto& tr = tasks_[id];
    if (a == kLocalAction) {
      const auto& node = topo_.nodes[i];
      tr.exec_s = exec_delay(tr.task, node);
      tr.stage = Stage::kExec;
      tr.at = i;
      tr.start_s = std::max(t0, rt.cpu_free_s);
      tr.end_s = tr.start_s + tr.exec_s;
      rt.cpu_free_s = tr.end_s;
      rt.exec.push_back(id);
    } else {
      const NodeId j = slot_node(i, a - 1, n);
      const auto k = *topo_.find_link(i, j);
      const auto& link = topo_.links[k];
      const int dir = link.spec.a == i ? 0 : 1;
      const double tt = trans_delay(tr.task, link);
      tr.stage = Stage::kTransmit;
      tr.at = i;
      tr.dest = j;
      tr.start_s = std::max(t0, links_[k].free_s[dir]);
      tr.end_s = tr.start_s + tt;
      tr.hops.emplace_back(link.spec.fail_rate, tt);
      links_[k].free_s[dir] = tr.end_s;
      links_[k].buffer[dir].push_back(id);
    }
  }

  // (c) advance queues by one slot
  std::vector<std::int64_t> completed;
  for (int i = 0; i < n; ++i) {
    auto& q = nodes_[i].exec;
    while (!q.empty() && tasks_[q.front()].end_s <= t1) {
      completed.push_back(q.front());
      q.pop_front();
    }
    for (auto id : q) {
      if (tasks_[id].start_s >= t1) {
        ++tasks_[id].task.wait_cw;
        ++tasks_[id].task.wait_slots;
      }
    }
  }
  std::vector<std::int64_t> delivered;
  for (std::size_t k = 0; k < links_.size(); ++k) {
    for (int dir = 0; dir < 2; ++dir) {
      auto& q = links_[k].buffer[dir];
      while (!q.empty() && tasks_[q.front()].end_s <= t1) {
        delivered.push_back(q.front());
        q.pop_front();
      }
      for (auto id : q) {
        if (tasks_[id].start_s >= t1) {
          ++tasks_[id].task.wait_tw;
          ++tasks_[id].task.wait_slots;
        }
      }
    }
  }
  std::sort(delivered.begin(), delivered.end(), [&](auto x, auto y) {
    return tasks_[x].end_s != tasks_[y].end_s ? tasks_[x].end_s < tasks_[y].end_s : x < y;
  });
  for (auto id : delivered) {
    auto& tr = tasks_[id];
    ++tr.task.hops;
    if (tr.task.hops > cfg_.max_hops) {
      finish(id, Outcome::kDeadlineViolation, FailureCause::kHopCap, tr.end_s, -1, 0.0, resolved);
      continue;
    }
    tr.stage = Stage::kPending;
    tr.at = tr.dest;
    tr.dest = -1;
    nodes_[tr.at].pending.push_back(id);
  }
  for (int i = 0; i < n; ++i) {
    for (auto id : nodes_[i].pending) {
      // Tasks delivered during this slot have not waited a full slot yet.
      if (tasks_[id].task.created_slot <= slot_ && tasks_[id].end_s <= t0) ++tasks_[id].task.wait_slots;
    }
  }

  // (d) topology events at the slot boundary
  for (int i = 0; i < n; ++i) {
    const double u = topology_rng_.uniform();
    if (!topo_.nodes[i].alive || !(u < cfg_.node_death_prob)) continue;
    const auto alive_count = std::count_if(topo_.nodes.begin(), topo_.nodes.end(),
                                           [](const NodeState& s) { return s.alive; });
    if (alive_count <= 1) continue;
    kill_node(i, t1, resolved);
  }
  for (std::size_t k = 0; k < topo_.links.size(); ++k) {
    const double u = topology_rng_.uniform();
    auto& l = topo_.links[k];
    if (l.available && u < cfg_.link_down_prob) {
      drop_link(k, t1, resolved);
      l.available = false;
    } else if (!l.available && u < cfg_.link_up_prob) {
      l.available = true;
    }
  }
  if (topology_rng_.uniform() < cfg_.node_appear_prob) {
    for (int i = 0; i < n; ++i) {
      if (!topo_.nodes[i].alive) {
        spawn_node(i);
        break;
      }
    }
  }

  // (e) resolve completed executions with failure sampling
  std::sort(completed.begin(), completed.end(), [&](auto x, auto y) {
    return tasks_[x].end_s != tasks_[y].end_s ? tasks_[x].end_s < tasks_[y].end_s : x < y;
  });
  for (auto id : completed) {
    auto& tr = tasks_[id];
    const auto& spec = topo_.nodes[tr.at].spec;
    const double rel = path_reliability(spec.sw_fail_rate, spec.hw_fail_rate, tr.exec_s, tr.hops);
    FailureCause cause = FailureCause::kNone;
    if (failures_rng_.bernoulli(1.0 - std::exp(-spec.sw_fail_rate * tr.exec_s)))
      cause = FailureCause::kSoftware;
    if (failures_rng_.bernoulli(1.0 - std::exp(-spec.hw_fail_rate * tr.exec_s)) &&
        cause == FailureCause::kNone)
      cause = FailureCause::kHardware;
    for (const auto& [beta, t] : tr.hops)
      if (failures_rng_.bernoulli(1.0 - std::exp(-beta * t)) && cause == FailureCause::kNone)
        cause = FailureCause::kLink;
    const double delay = tr.end_s - created_s(tr.task);
    const double realised = cause == FailureCause::kNone ? rel : 0.0;
    const Outcome o = task_outcome(delay, realised, tr.task);
    if (o == Outcome::kDeadlineViolation) cause = FailureCause::kDeadline;
    if (o == Outcome::kReliabilityViolation && cause == FailureCause::kNone)
      cause = FailureCause::kReliabilityFloor;
    finish(id, o, cause, tr.end_s, tr.at, rel, resolved);
  }

  // Pending tasks whose deadline has passed can no longer succeed.
  for (int i = 0; i < n; ++i) {
    auto& q = nodes_[i].pending;
    for (auto it = q.begin(); it != q.end();) {
      const auto& t = tasks_[*it].task;
      if (t1 - created_s(t) > t.deadline_s) {
        finish(*it, Outcome::kDeadlineViolation, FailureCause::kDeadline, t1, -1, 0.0, resolved);
        it = q.erase(it);
      } else {
        ++it;
      }
    }
  }

  // (f) reward and next observations; (a) arrivals for the next slot
  ++slot_;
  if (!done()) sample_arrivals();
  rec.reward = 0.0;
  for (const auto& r : resolved) rec.reward += r.outcome == Outcome::kSuccess ? 1.0 : -1.0;
  history_.insert(history_.end(), resolved.begin(), resolved.end());
  rec.resolved = std::move(resolved);
  rec.next_observations = observe_all();
  rec.next_masks = masks_all();
  rec.done = done();
  return rec;
}

std::pair<double, double> episode_return(std::span<const double> rewards, double discount) {
  double disc = 0.0, plain = 0.0, w = 1.0;
  for (double r : rewards) {
    disc += w * r;
    plain += r;
    w *= discount;
  }
  return {disc, plain};
}

std::pair<double, double> episode_return(std::span<const TransitionRecord> records,
                                         double discount) {
  std::vector<double> r;
  r.reserve(records.size());
  for (const auto& rec : records) r.push_back(rec.reward);
  return episode_return(std::span<const double>(r), discount);
}

}  // namespace cecsim

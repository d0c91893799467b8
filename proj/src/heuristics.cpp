#include "cecsim/heuristics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cecsim/errors.hpp"

namespace cecsim {

void HeuristicConfig::validate() const {
  if (ratc_sample_k < 1) throw ConfigError("ratc_sample_k must be >= 1");
  if (agsp.population < 1 || agsp.generations < 0)
    throw ConfigError("agsp population must be >= 1 and generations >= 0");
  if (!(agsp.cooling > 0.0 && agsp.cooling < 1.0)) throw ConfigError("agsp cooling must lie in (0,1)");
  if (!(agsp.init_temp > 0.0)) throw ConfigError("agsp init_temp must be positive");
  if (w_delay < 0.0 || w_rel < 0.0) throw ConfigError("heuristic weights must be >= 0");
}

std::vector<NodeId> relative_slots(NodeId self, int node_count) {
  std::vector<NodeId> s(static_cast<std::size_t>(node_count - 1));
  for (int k = 0; k < node_count - 1; ++k) s[k] = slot_node(self, k, node_count);
  return s;
}

std::vector<Candidate> build_candidates(const Observation& obs, const ActionMask& mask,
                                        NodeId self, std::span<const NodeId> slot_nodes,
                                        const ObsScales& sc) {
  std::vector<Candidate> out;
  if (!obs.task_present) return out;
  const double size = obs.task[0] * sc.size_max_bits;
  const double cycles = obs.task[1] * sc.cycles_max;
  const double budget = obs.task[2] * sc.deadline_s;
  const double hz = std::max(obs.node[3] * sc.cpu_max_hz, 1.0);
  const double alpha = obs.node[1] * sc.alpha_max;
  const double gamma = obs.node[2] * sc.gamma_max;
  const double exec_queue = obs.node[4] * sc.queue_norm;
  const double buffer_queue = obs.node[5] * sc.queue_norm;

  if (mask.local()) {
    Candidate c;
    c.action = kLocalAction;
    c.node = self;
    const double tc = cycles / hz;
    c.pred_delay_s = exec_queue * (sc.cycles_mean / hz) + tc;
    c.pred_rel = std::exp(-(alpha + gamma) * tc);
    c.deadline_s = budget;
    c.floor = sc.reliability_floor;
    out.push_back(c);
  }
  const double tc_nominal = cycles / sc.cpu_mean_hz;
  for (std::size_t k = 0; k < obs.neighbors.size() && k < slot_nodes.size(); ++k) {
    const int a = forward_action(static_cast<int>(k));
    if (!mask.valid(a)) continue;
    const auto& nb = obs.neighbors[k];
    const double rate = std::max(nb.rate_norm * sc.rate_max_bps, 1.0);
    const double beta = nb.beta_norm * sc.beta_max;
    const double tt = size / rate;
    Candidate c;
    c.action = a;
    c.node = slot_nodes[k];
    c.pred_delay_s = (buffer_queue + 1.0) * tt + sc.slot_duration_s + tc_nominal;
    c.pred_rel = std::exp(-(sc.alpha_mean + sc.gamma_mean) * tc_nominal - beta * tt);
    c.deadline_s = budget;
    c.floor = sc.reliability_floor;
    out.push_back(c);
  }
  std::sort(out.begin(), out.end(),
            [](const Candidate& x, const Candidate& y) { return x.node < y.node; });
  return out;
}

double agsp_fitness(const Candidate& c, const HeuristicConfig& cfg) {
  const double slack = c.deadline_s > 0.0 ? std::max(0.0, 1.0 - c.pred_delay_s / c.deadline_s) : 0.0;
  return cfg.w_delay * slack + cfg.w_rel * c.pred_rel;
}

namespace {

// Feasible first, then lower predicted delay, then lower node id.
bool ratc_better(const Candidate& a, const Candidate& b) {
  if (a.feasible() != b.feasible()) return a.feasible();
  if (a.pred_delay_s != b.pred_delay_s) return a.pred_delay_s < b.pred_delay_s;
  return a.node < b.node;
}

}  // namespace

int ratc_decide(std::span<const Candidate> cands, int k, Rng& rng) {
  if (cands.empty()) return kLocalAction;
  std::vector<std::size_t> neighbours;
  std::optional<std::size_t> local;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (cands[i].action == kLocalAction) local = i;
    else neighbours.push_back(i);
  }
  std::vector<std::size_t> pool;
  if (local) pool.push_back(*local);
  const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), neighbours.size());
  for (std::size_t s = 0; s < take; ++s) {
    const std::size_t r = s + rng.uniform_index(neighbours.size() - s);
    std::swap(neighbours[s], neighbours[r]);
    pool.push_back(neighbours[s]);
  }
  std::size_t best = pool.front();
  for (std::size_t i : pool)
    if (ratc_better(cands[i], cands[best])) best = i;
  return cands[best].action;
}

int agsp_decide_traced(std::span<const Candidate> cands, const HeuristicConfig& cfg, Rng& rng,
                       std::vector<double>* best_trace) {
  if (cands.empty()) return kLocalAction;
  const std::size_t m = cands.size();
  std::vector<double> fit(m);
  for (std::size_t i = 0; i < m; ++i) fit[i] = agsp_fitness(cands[i], cfg);

  std::size_t best = 0;
  bool have_best = false;
  auto consider = [&](std::size_t i) {
    if (!have_best || fit[i] > fit[best] || (fit[i] == fit[best] && cands[i].node < cands[best].node)) {
      best = i;
      have_best = true;
    }
  };

  // Initial population walks through a random permutation of the candidates.
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t s = 0; s + 1 < m; ++s) std::swap(order[s], order[s + rng.uniform_index(m - s)]);
  const auto pop_size = static_cast<std::size_t>(cfg.agsp.population);
  std::vector<std::size_t> pop(pop_size);
  for (std::size_t p = 0; p < pop_size; ++p) {
    pop[p] = order[p % m];
    consider(pop[p]);
  }
  if (best_trace) best_trace->push_back(fit[best]);

  double temp = cfg.agsp.init_temp;
  for (int g = 0; g < cfg.agsp.generations; ++g) {
    for (auto& cur : pop) {
      if (m == 1) break;
      std::size_t next = rng.uniform_index(m - 1);
      if (next >= cur) ++next;
      const double delta = fit[cur] - fit[next];
      if (delta <= 0.0 || rng.uniform() < std::exp(-delta / temp)) cur = next;
      consider(cur);
    }
    temp *= cfg.agsp.cooling;
    if (best_trace) best_trace->push_back(fit[best]);
  }
  return cands[best].action;
}

int agsp_decide(std::span<const Candidate> cands, const HeuristicConfig& cfg, Rng& rng) {
  return agsp_decide_traced(cands, cfg, rng, nullptr);
}

int greedy_min_delay_decide(std::span<const Candidate> cands) {
  if (cands.empty()) return kLocalAction;
  const Candidate* best = &cands.front();
  for (const auto& c : cands)
    if (c.pred_delay_s < best->pred_delay_s) best = &c;
  return best->action;
}

int random_valid_decide(const ActionMask& mask, Rng& rng) {
  const auto v = mask.valid_actions();
  if (v.empty()) return kLocalAction;
  return v[rng.uniform_index(v.size())];
}

int local_only_decide(const ActionMask& mask) {
  return mask.local() ? kLocalAction : static_cast<int>(mask.bits.size()) - 1;
}

HeuristicPolicy::HeuristicPolicy(HeuristicKind kind, HeuristicConfig cfg)
    : kind_(kind), cfg_(cfg) {
  cfg_.validate();
}

std::string HeuristicPolicy::name() const {
  switch (kind_) {
    case HeuristicKind::kRatc: return "ratc";
    case HeuristicKind::kAgsp: return "agsp";
    case HeuristicKind::kGreedy: return "greedy";
    case HeuristicKind::kRandom: return "random";
    case HeuristicKind::kLocal: return "local";
  }
  return "unknown";
}

int HeuristicPolicy::decide(const Observation& obs, const ActionMask& mask, NodeId self,
                            std::span<const NodeId> slot_nodes, const ObsScales& scales,
                            Rng& rng) const {
  if (kind_ == HeuristicKind::kRandom) return random_valid_decide(mask, rng);
  if (kind_ == HeuristicKind::kLocal) return local_only_decide(mask);
  const auto cands = build_candidates(obs, mask, self, slot_nodes, scales);
  if (cands.empty()) return local_only_decide(mask);
  switch (kind_) {
    case HeuristicKind::kRatc: return ratc_decide(cands, cfg_.ratc_sample_k, rng);
    case HeuristicKind::kAgsp: return agsp_decide(cands, cfg_, rng);
    default: return greedy_min_delay_decide(cands);
  }
}

std::vector<int> HeuristicPolicy::act(const Environment& env, const std::vector<Observation>& obs,
                                      const std::vector<ActionMask>& masks, Rng& rng) {
  const int n = env.num_agents();
  std::vector<int> out(static_cast<std::size_t>(n), idle_action(n));
  for (int i = 0; i < n; ++i) {
    if (masks[i].idle()) continue;
    const auto slots = relative_slots(i, n);
    out[i] = decide(obs[i], masks[i], i, slots, env.scales(), rng);
  }
  return out;
}

std::unique_ptr<Policy> make_heuristic(const std::string& name, const HeuristicConfig& cfg) {
  if (name == "ratc") return std::make_unique<HeuristicPolicy>(HeuristicKind::kRatc, cfg);
  if (name == "agsp") return std::make_unique<HeuristicPolicy>(HeuristicKind::kAgsp, cfg);
  if (name == "greedy") return std::make_unique<HeuristicPolicy>(HeuristicKind::kGreedy, cfg);
  if (name == "random") return std::make_unique<HeuristicPolicy>(HeuristicKind::kRandom, cfg);
  if (name == "local") return std::make_unique<HeuristicPolicy>(HeuristicKind::kLocal, cfg);
  throw ConfigError("unknown heuristic '" + name + "'");
}

}  // namespace cecsim

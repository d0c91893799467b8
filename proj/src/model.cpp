#include "cecsim/model.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <string>

#include "cecsim/errors.hpp"

namespace cecsim {

LinkSpec make_link(NodeId i, NodeId j, double rate_bps, double fail_rate) {
  LinkSpec l;
  l.a = std::min(i, j);
  l.b = std::max(i, j);
  l.rate_bps = rate_bps;
  l.fail_rate = fail_rate;
  return l;
}

Task make_task(NodeId origin, int created_slot, double size_bits,
               double intensity, double deadline_s, double reliability_floor) {
  Task t;
  t.origin = origin;
  t.created_slot = created_slot;
  t.size_bits = size_bits;
  t.intensity = intensity;
  t.cycles = size_bits * intensity;
  t.deadline_s = deadline_s;
  t.reliability_floor = reliability_floor;
  return t;
}

void Topology::validate() const {
  if (nodes.empty()) throw ConfigError("topology has no nodes");
  if (!(slot_duration_s > 0.0)) throw ConfigError("slot duration must be positive");
  bool any_alive = false;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& n = nodes[i];
    if (n.spec.id != static_cast<NodeId>(i))
      throw ConfigError("node ids must equal their index");
    if (!(n.spec.compute_hz > 0.0))
      throw ConfigError("node " + std::to_string(i) + ": compute capacity must be positive");
    if (n.spec.arrival_prob < 0.0 || n.spec.arrival_prob > 1.0)
      throw ConfigError("node " + std::to_string(i) + ": arrival probability outside [0,1]");
    if (n.spec.sw_fail_rate < 0.0 || n.spec.hw_fail_rate < 0.0)
      throw ConfigError("node " + std::to_string(i) + ": negative failure rate");
    any_alive = any_alive || n.alive;
  }
  if (!any_alive) throw ConfigError("topology has no alive node");
  for (std::size_t k = 0; k < links.size(); ++k) {
    const auto& l = links[k].spec;
    if (l.a == l.b) throw ConfigError("self-link on node " + std::to_string(l.a));
    if (l.a > l.b) throw ConfigError("link endpoints must be stored smaller first");
    if (l.a < 0 || static_cast<std::size_t>(l.b) >= nodes.size())
      throw ConfigError("link endpoint out of range");
    if (!(l.rate_bps > 0.0)) throw ConfigError("link rate must be positive");
    if (l.fail_rate < 0.0) throw ConfigError("negative link failure rate");
    for (std::size_t m = k + 1; m < links.size(); ++m)
      if (links[m].spec.a == l.a && links[m].spec.b == l.b)
        throw ConfigError("duplicate link");
  }
}

std::optional<std::size_t> Topology::find_link(NodeId i, NodeId j) const {
  for (std::size_t k = 0; k < links.size(); ++k)
    if (links[k].spec.connects(i, j)) return k;
  return std::nullopt;
}

std::vector<NodeId> Topology::live_neighbors(NodeId i) const {
  std::vector<NodeId> out;
  if (!nodes[i].alive) return out;
  for (const auto& l : links) {
    if (!l.available) continue;
    if (l.spec.a != i && l.spec.b != i) continue;
    const NodeId j = l.spec.other(i);
    if (nodes[j].alive) out.push_back(j);
  }
  std::sort(out.begin(), out.end());
  return out;
}

bool Topology::connected_alive() const {
  std::vector<char> seen(nodes.size(), 0);
  NodeId start = -1;
  std::size_t alive = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].alive) {
      ++alive;
      if (start < 0) start = static_cast<NodeId>(i);
    }
  }
  if (start < 0) return false;
  std::queue<NodeId> q;
  q.push(start);
  seen[start] = 1;
  std::size_t reached = 1;
  while (!q.empty()) {
    const NodeId u = q.front();
    q.pop();
    for (NodeId v : live_neighbors(u)) {
      if (!seen[v]) {
        seen[v] = 1;
        ++reached;
        q.push(v);
      }
    }
  }
  return reached == alive;
}

std::string_view to_string(Outcome o) {
  switch (o) {
    case Outcome::kSuccess: return "success";
    case Outcome::kDeadlineViolation: return "deadline_violation";
    case Outcome::kReliabilityViolation: return "reliability_violation";
  }
  return "unknown";
}

double exec_delay(const Task& task, const NodeState& executor) {
  if (!executor.alive)
    throw InfeasibleExecutorError("executor " + std::to_string(executor.spec.id) +
                                  " is not alive");
  return task.cycles / executor.spec.compute_hz;
}

double trans_delay(const Task& task, const LinkState& link) {
  if (!link.available)
    throw InfeasibleLinkError("link " + std::to_string(link.spec.a) + "-" +
                              std::to_string(link.spec.b) + " is unavailable");
  return task.size_bits / link.spec.rate_bps;
}

double path_reliability(double alpha, double gamma, double exec_time_s,
                        std::span<const std::pair<double, double>> hops) {
  double exponent = -(alpha + gamma) * exec_time_s;
  for (const auto& [beta, t] : hops) exponent -= beta * t;
  return std::exp(exponent);
}

double reliability(const Task& task, const NodeSpec& executor,
                   const LinkSpec* link) {
  const double tc = task.cycles / executor.compute_hz;
  if (link == nullptr)
    return path_reliability(executor.sw_fail_rate, executor.hw_fail_rate, tc, {});
  const std::pair<double, double> hop{link->fail_rate,
                                      task.size_bits / link->rate_bps};
  return path_reliability(executor.sw_fail_rate, executor.hw_fail_rate, tc,
                          std::span(&hop, 1));
}

Outcome task_outcome(double total_delay_s, double rel, const Task& task) {
  if (total_delay_s > task.deadline_s) return Outcome::kDeadlineViolation;
  if (rel < task.reliability_floor) return Outcome::kReliabilityViolation;
  return Outcome::kSuccess;
}

double success_rate(std::span<const Outcome> outcomes) {
  if (outcomes.empty()) return 1.0;
  const auto ok = std::count(outcomes.begin(), outcomes.end(), Outcome::kSuccess);
  return static_cast<double>(ok) / static_cast<double>(outcomes.size());
}

}  // namespace cecsim

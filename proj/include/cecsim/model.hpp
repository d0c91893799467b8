#ifndef CECSIM_MODEL_HPP_
#define CECSIM_MODEL_HPP_

// Delay, reliability, constraint and objective arithmetic for collaborative
// edge task offloading. Everything here is pure and thread-safe.

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace cecsim {

using NodeId = int;

// Unit conversions accepted by configuration files.
inline constexpr double kBitsPerKB = 8000.0;
inline constexpr double kBitsPerSecondPerMBps = 8e6;

struct NodeSpec {
  NodeId id = 0;
  double compute_hz = 3e9;      // F, cycles/second
  double memory_bits = 1e12;    // M
  double arrival_prob = 0.0;    // lambda, per slot
  double sw_fail_rate = 0.0;    // alpha, 1/s
  double hw_fail_rate = 0.0;    // gamma, 1/s
};

struct LinkSpec {
  NodeId a = 0;  // a < b
  NodeId b = 0;
  double rate_bps = 1e8;        // R
  double fail_rate = 0.0;       // beta, 1/s

  [[nodiscard]] bool connects(NodeId i, NodeId j) const {
    return (a == i && b == j) || (a == j && b == i);
  }
  [[nodiscard]] NodeId other(NodeId i) const { return i == a ? b : a; }
};

// Builds a link stored with the smaller endpoint first.
LinkSpec make_link(NodeId i, NodeId j, double rate_bps, double fail_rate);

struct Task {
  std::int64_t id = -1;
  NodeId origin = 0;
  int created_slot = 0;
  double size_bits = 0.0;        // S
  double intensity = 0.0;        // Delta, cycles/bit
  double cycles = 0.0;           // C = S * Delta
  double deadline_s = 4.0;       // D
  double reliability_floor = 0.9;  // Phi
  int hops = 0;                  // H
  int wait_slots = 0;            // W, all queues
  int wait_tw = 0;               // transmission-side wait, slots
  int wait_cw = 0;               // computation-side wait, slots
};

// The only way tasks are built, so cycles always equals size * intensity.
Task make_task(NodeId origin, int created_slot, double size_bits,
               double intensity, double deadline_s, double reliability_floor);

struct NodeState {
  NodeSpec spec;
  bool alive = true;
};

struct LinkState {
  LinkSpec spec;
  bool available = true;
};

// Time-varying undirected graph snapshot.
struct Topology {
  std::vector<NodeState> nodes;
  std::vector<LinkState> links;
  double slot_duration_s = 0.5;

  // Throws ConfigError when an invariant is broken.
  void validate() const;

  [[nodiscard]] std::size_t size() const { return nodes.size(); }
  [[nodiscard]] std::optional<std::size_t> find_link(NodeId i, NodeId j) const;
  // Alive neighbours reachable over available links.
  [[nodiscard]] std::vector<NodeId> live_neighbors(NodeId i) const;
  [[nodiscard]] bool connected_alive() const;
};

enum class Outcome { kSuccess, kDeadlineViolation, kReliabilityViolation };

std::string_view to_string(Outcome o);

// T^c = C / F. Throws InfeasibleExecutorError for a dead executor.
double exec_delay(const Task& task, const NodeState& executor);
// T^t = S / R. Throws InfeasibleLinkError for an unavailable link.
double trans_delay(const Task& task, const LinkState& link);

// exp(-(alpha + gamma) * T^c - beta * T^t); local execution passes no link.
double reliability(const Task& task, const NodeSpec& executor,
                   const LinkSpec* link = nullptr);

// Same product for a multi-hop path: one (beta, T^t) pair per hop.
double path_reliability(double alpha, double gamma, double exec_time_s,
                        std::span<const std::pair<double, double>> hops);

// Success iff delay <= D and rel >= Phi. A deadline miss is reported even
// when reliability also fails.
Outcome task_outcome(double total_delay_s, double rel, const Task& task);

// Successes over assigned tasks; 1.0 when nothing was assigned.
double success_rate(std::span<const Outcome> outcomes);

}  // namespace cecsim

#endif  // CECSIM_MODEL_HPP_

#ifndef CECSIM_ENV_HPP_
#define CECSIM_ENV_HPP_

// Time-slotted multi-agent offloading environment. Each alive node is an
// agent that decides, once per slot, what to do with the task at the head
// of its decision queue: execute it locally, forward it one hop, or idle
// when it has nothing to decide.

#include <array>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cecsim/model.hpp"
#include "cecsim/rng.hpp"

namespace cecsim {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct EnvConfig;

// Normalisers and nominal values shared by observations and heuristics.
struct ObsScales {
  double size_max_bits = 1.0;
  double cycles_max = 1.0;
  double cpu_max_hz = 1.0;
  double rate_max_bps = 1.0;
  double alpha_max = 1.0;
  double gamma_max = 1.0;
  double beta_max = 1.0;
  double deadline_s = 4.0;
  double wait_norm_slots = 8.0;
  double max_hops = 5.0;
  double queue_norm = 10.0;
  double slot_duration_s = 0.5;
  double reliability_floor = 0.9;
  // Nominal values for quantities an agent cannot observe.
  double cpu_mean_hz = 3e9;
  double alpha_mean = 0.0;
  double gamma_mean = 0.0;
  double cycles_mean = 0.0;

  static ObsScales from_config(const EnvConfig& cfg);
};

struct EnvConfig {
  int node_count = 10;
  std::string topology = "random";  // "random" | "ring"
  double avg_degree = 3.0;
  int horizon = 100;
  double slot_duration_s = 0.5;

  Range task_size_kb{2000.0, 4000.0};
  Range intensity{800.0, 2400.0};  // cycles/bit as configured
  // Multiplier applied to the sampled intensity. 0.125 reads the configured
  // range as cycles/byte; 1.0 is the literal cycles/bit reading.
  double intensity_scale = 0.125;
  double deadline_s = 4.0;
  double reliability_floor = 0.9;

  Range cpu_hz{3e9, 3e9};
  double memory_bits = 8e12;
  Range link_rate_mbps{10.0, 40.0};
  Range arrival_prob{0.05, 0.55};
  Range sw_fail_rate{0.0, 0.05};
  Range hw_fail_rate{0.0, 0.02};
  Range link_fail_rate{0.0, 0.2};

  double node_death_prob = 0.01;
  double node_appear_prob = 0.1;
  double link_down_prob = 0.0;
  double link_up_prob = 0.0;

  int max_hops = 5;
  int queue_norm = 10;

  // Explicit layout; when set, node_count/topology are taken from it.
  std::optional<Topology> fixed_topology;
  // Observation normalisers; derived from this config when unset.
  std::optional<ObsScales> obs_scales;

  void validate() const;
};

inline constexpr int kNodeFeatures = 6;
inline constexpr int kTaskFeatures = 5;
inline constexpr int kNeighborFeatures = 3;

struct NeighborFeatures {
  double rate_norm = 0.0;
  double beta_norm = 0.0;
  double alive = 0.0;
  bool operator==(const NeighborFeatures&) const = default;
};

struct Observation {
  // [lambda, alpha, gamma, F, l_e, l_b]
  std::array<double, kNodeFeatures> node{};
  // [S, C, remaining deadline, H, W]; zero when no task is waiting
  std::array<double, kTaskFeatures> task{};
  std::vector<NeighborFeatures> neighbors;
  bool task_present = false;

  [[nodiscard]] int width() const {
    return kNodeFeatures + kTaskFeatures +
           kNeighborFeatures * static_cast<int>(neighbors.size());
  }
  [[nodiscard]] std::vector<double> flatten() const;
  void flatten_into(double* out) const;
  bool operator==(const Observation&) const = default;
};

// Action indices: 0 = local, 1..N-1 = neighbour slot k-1, N = idle.
inline constexpr int kLocalAction = 0;
inline int forward_action(int slot) { return 1 + slot; }
inline int idle_action(int node_count) { return node_count; }
inline int action_dim(int node_count) { return node_count + 1; }

// Neighbour slots are relative: slot k of agent i is node (i + 1 + k) mod N.
inline NodeId slot_node(NodeId agent, int slot, int node_count) {
  return (agent + 1 + slot) % node_count;
}
inline int node_slot(NodeId agent, NodeId other, int node_count) {
  return ((other - agent - 1) % node_count + node_count) % node_count;
}

struct ActionMask {
  std::vector<std::uint8_t> bits;  // size N + 1

  [[nodiscard]] bool valid(int action) const {
    return action >= 0 && action < static_cast<int>(bits.size()) && bits[action] != 0;
  }
  [[nodiscard]] bool local() const { return bits.front() != 0; }
  [[nodiscard]] bool idle() const { return bits.back() != 0; }
  [[nodiscard]] int count() const;
  [[nodiscard]] std::vector<int> valid_actions() const;
  bool operator==(const ActionMask&) const = default;
};

enum class FailureCause {
  kNone,
  kDeadline,
  kSoftware,
  kHardware,
  kLink,
  kNodeLost,
  kHopCap,
  kReliabilityFloor,
};

std::string_view to_string(FailureCause c);

struct ResolvedTask {
  std::int64_t task_id = -1;
  NodeId origin = 0;
  NodeId executor = -1;  // -1 when the task never reached an executor
  Outcome outcome = Outcome::kSuccess;
  FailureCause cause = FailureCause::kNone;
  double delay_s = 0.0;
  double reliability = 0.0;  // expected (model) reliability of the path
  int hops = 0;
};

struct TransitionRecord {
  int slot = 0;
  std::vector<Observation> observations;
  std::vector<int> actions;
  std::vector<ActionMask> masks;
  double reward = 0.0;
  std::vector<ResolvedTask> resolved;
  std::vector<Observation> next_observations;
  std::vector<ActionMask> next_masks;
  bool done = false;

  [[nodiscard]] int successes() const;
  [[nodiscard]] int violations() const;
};

struct EpisodeStats {
  std::int64_t arrivals = 0;
  std::int64_t successes = 0;
  std::int64_t deadline_violations = 0;
  std::int64_t reliability_violations = 0;

  [[nodiscard]] std::int64_t resolved() const {
    return successes + deadline_violations + reliability_violations;
  }
  [[nodiscard]] std::int64_t in_flight() const { return arrivals - resolved(); }
  [[nodiscard]] double success_rate() const {
    return resolved() == 0 ? 1.0
                           : static_cast<double>(successes) / static_cast<double>(resolved());
  }
};

// Raw (unnormalised) local picture of one agent, richer than the
// observation: it includes neighbour load. Guidance prompts are built from it.
struct NeighborView {
  int slot = 0;
  NodeId node = 0;
  bool reachable = false;  // neighbour alive and link available
  double rate_bps = 0.0;
  double link_fail_rate = 0.0;
  double compute_hz = 0.0;
  double sw_fail_rate = 0.0;
  double hw_fail_rate = 0.0;
  int exec_queue = 0;
  int buffer_queue = 0;
};

struct AgentView {
  NodeId node = 0;
  NodeSpec spec;
  bool alive = true;
  int exec_queue = 0;
  int buffer_queue = 0;
  std::optional<Task> task;
  double task_elapsed_s = 0.0;
  std::vector<NeighborView> neighbors;  // reachable neighbours only
  double mean_cycles = 0.0;  // nominal task size used for queue estimates
};

class Environment {
 public:
  explicit Environment(EnvConfig cfg);

  // Resets to slot 0 with empty queues. Throws ConfigError when the initial
  // alive topology is disconnected.
  std::pair<std::vector<Observation>, std::vector<ActionMask>> reset(std::uint64_t seed);

  // Advances one slot. Throws InvalidActionError for masked actions.
  TransitionRecord step(std::span<const int> joint_action);

  [[nodiscard]] ActionMask valid_actions(NodeId agent) const;
  [[nodiscard]] Observation observe(NodeId agent) const;
  [[nodiscard]] std::vector<Observation> observe_all() const;
  [[nodiscard]] std::vector<ActionMask> masks_all() const;
  [[nodiscard]] AgentView agent_view(NodeId agent) const;
  // Concatenated flattened observations of every agent (critic input).
  [[nodiscard]] std::vector<double> team_observation() const;

  [[nodiscard]] int num_agents() const { return cfg_.node_count; }
  [[nodiscard]] int action_dim() const { return cecsim::action_dim(num_agents()); }
  [[nodiscard]] int obs_width() const;
  [[nodiscard]] int slot() const { return slot_; }
  [[nodiscard]] bool done() const { return slot_ >= cfg_.horizon; }
  [[nodiscard]] const Topology& topology() const { return topo_; }
  [[nodiscard]] const EnvConfig& config() const { return cfg_; }
  [[nodiscard]] const ObsScales& scales() const { return scales_; }
  [[nodiscard]] const EpisodeStats& stats() const { return stats_; }
  [[nodiscard]] std::optional<Task> current_task(NodeId agent) const;
  [[nodiscard]] const std::vector<ResolvedTask>& outcomes() const { return history_; }

  // Churn injection, effective immediately. Work in progress on the
  // affected node or link is lost and reported in the next step.
  void set_node_alive(NodeId node, bool alive);
  void set_link_available(NodeId i, NodeId j, bool available);

 private:
  enum class Stage { kPending, kTransmit, kExec, kDone };

  struct TaskRec {
    Task task;
    Stage stage = Stage::kPending;
    NodeId at = 0;         // holding node (pending/exec) or sender (transmit)
    NodeId dest = -1;      // receiver while transmitting
    double start_s = 0.0;  // service start in the current queue
    double end_s = 0.0;    // service end in the current queue
    double exec_s = 0.0;
    std::vector<std::pair<double, double>> hops;  // (beta, T^t)
  };

  struct NodeRt {
    std::deque<std::int64_t> pending;
    std::deque<std::int64_t> exec;
    double cpu_free_s = 0.0;
  };

  struct LinkRt {
    std::array<std::deque<std::int64_t>, 2> buffer;  // 0: a->b, 1: b->a
    std::array<double, 2> free_s{0.0, 0.0};
  };

  NodeSpec sample_node(NodeId id, Rng& rng) const;
  LinkSpec sample_link(NodeId i, NodeId j, Rng& rng) const;
  Topology generate_topology(Rng& rng) const;
  void sample_arrivals();
  void lose_task(std::int64_t id, FailureCause cause, double now_s,
                 std::vector<ResolvedTask>& out);
  void kill_node(NodeId j, double now_s, std::vector<ResolvedTask>& out);
  void drop_link(std::size_t link_index, double now_s, std::vector<ResolvedTask>& out);
  void spawn_node(NodeId j);
  void finish(std::int64_t id, Outcome outcome, FailureCause cause, double now_s,
              NodeId executor, double rel, std::vector<ResolvedTask>& out);
  [[nodiscard]] int buffered_from(NodeId i) const;
  [[nodiscard]] double created_s(const Task& t) const {
    return t.created_slot * cfg_.slot_duration_s;
  }

  EnvConfig cfg_;
  ObsScales scales_;
  Topology topo_;
  std::vector<NodeRt> nodes_;
  std::vector<LinkRt> links_;
  std::vector<TaskRec> tasks_;
  std::vector<ResolvedTask> history_;
  std::vector<ResolvedTask> carry_;  // losses from churn injected between steps
  EpisodeStats stats_;
  int slot_ = 0;
  Rng arrivals_rng_;
  Rng failures_rng_;
  Rng topology_rng_;
};

// Discounted (first) and undiscounted (second) sums of per-slot rewards.
std::pair<double, double> episode_return(std::span<const TransitionRecord> records,
                                         double discount);
std::pair<double, double> episode_return(std::span<const double> rewards, double discount);

// Graph generators used by the environment and the harness.
std::vector<std::pair<NodeId, NodeId>> random_connected_edges(int n, double avg_degree,
                                                              Rng& rng);
std::vector<std::pair<NodeId, NodeId>> ring_edges(int n);

}  // namespace cecsim

#endif  // CECSIM_ENV_HPP_

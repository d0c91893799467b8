#ifndef CECSIM_GUIDANCE_HPP_
#define CECSIM_GUIDANCE_HPP_

// Guidance pipeline: structured prompts, a two-level experience memory with
// ranked retrieval, reflection on failures, and schema-checked decisions
// from a pluggable provider.

#include <chrono>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cecsim/env.hpp"
#include "cecsim/rng.hpp"

namespace cecsim {

struct GuidanceConfig {
  double w_loc = 0.25;
  double w_type = 0.25;
  double w_task = 0.25;
  double w_load = 0.25;
  int top_k = 4;
  std::size_t short_cap = 256;
  std::size_t long_cap = 128;
  std::size_t compact_batch = 32;
  int timeout_ms = 2000;
  int query_stride = 1;           // query every n-th decision slot
  int reflections_per_step = 4;

  void validate() const;
};

enum class MemoryKind { kTrajectory, kSummary, kReflection };
std::string_view to_string(MemoryKind k);

struct MemoryItem {
  NodeId node = 0;
  int type_tag = 0;
  std::array<double, 3> profile{};  // normalised S, Delta, D
  std::array<double, 2> load{};     // normalised exec and buffer queues
  bool forwarded = false;
  NodeId target = 0;
  double reward = 0.0;  // summaries: total over the summarised items
  MemoryKind kind = MemoryKind::kTrajectory;
  std::int64_t index = 0;
  std::string note;  // failure cause or reflection text

  // Summary aggregates.
  int count = 1;
  int local_count = 0;
  int forward_count = 0;
  double local_reward = 0.0;
  double forward_reward = 0.0;
  std::map<std::string, int> failures;
};

struct MemoryQuery {
  NodeId node = 0;
  int type_tag = 0;
  std::array<double, 3> profile{};
  std::array<double, 2> load{};
};

double relevance(const MemoryItem& m, const MemoryQuery& q, const GuidanceConfig& cfg);

class Memory {
 public:
  explicit Memory(const GuidanceConfig& cfg) : cfg_(cfg) {}

  void add_trajectory(MemoryItem item);
  void add_reflection(MemoryItem item);
  // Moves the oldest trajectory batches into per-node summaries while the
  // short store is above its cap.
  void compact();
  // Top-K by relevance, ties by newer insertion first.
  [[nodiscard]] std::vector<MemoryItem> retrieve(const MemoryQuery& q, int k) const;

  [[nodiscard]] const std::deque<MemoryItem>& short_store() const { return short_; }
  [[nodiscard]] const std::deque<MemoryItem>& long_store() const { return long_; }
  [[nodiscard]] std::size_t size() const { return short_.size() + long_.size(); }
  void clear();

 private:
  void push_long(MemoryItem item);

  GuidanceConfig cfg_;
  std::deque<MemoryItem> short_;
  std::deque<MemoryItem> long_;
  std::int64_t next_index_ = 0;
};

// Prompt sections.
struct NodeSection {
  NodeId node = 0;
  double compute_hz = 0.0;
  int exec_queue = 0;
  int buffer_queue = 0;
  double alpha = 0.0;
  double gamma = 0.0;
  double slot_s = 0.0;
  double mean_cycles = 0.0;
};

struct TaskSection {
  std::int64_t id = 0;
  double size_bits = 0.0;
  double intensity = 0.0;
  double deadline_s = 0.0;
  double elapsed_s = 0.0;
  double floor = 0.0;
  int hops = 0;
  int wait = 0;
};

struct LinkSection {
  NodeId node = 0;
  double rate_bps = 0.0;
  double beta = 0.0;
  double compute_hz = 0.0;
  double alpha = 0.0;
  double gamma = 0.0;
  int load = 0;    // queued tasks at the neighbour
  int buffer = 0;  // tasks already queued on the link
};

struct ContextLine {
  NodeId node = 0;
  std::string kind;
  std::string action;
  double reward = 0.0;
  int count = 1;
  std::string note;
};

struct NeighborRisk {
  NodeId node = 0;
  double trans_s = 0.0;
  double link_risk = 0.0;
  int load = 0;
};

struct RiskSection {
  double local_wait_s = 0.0;
  double local_exec_s = 0.0;
  double exec_risk = 0.0;
  std::vector<NeighborRisk> neighbors;
};

struct PromptBundle {
  NodeSection s;
  TaskSection t;
  std::vector<LinkSection> n;
  std::vector<ContextLine> c;
  RiskSection r;
  std::string text;
};

std::string render_prompt(const PromptBundle& b);
// Inverse of render_prompt; throws ConfigError on malformed text.
PromptBundle parse_prompt(const std::string& text);

inline constexpr const char* kDecisionSchema = "ACTION=<LOCAL|FORWARD> TARGET=<id>";
inline constexpr const char* kReflectionSchema = "CAUSE=<text> SAFER=<LOCAL|FORWARD>";

struct GuidanceDecision {
  bool forward = false;
  NodeId target = 0;
  std::string raw;
  bool valid = false;
  bool timed_out = false;
  double elapsed_s = 0.0;

  // Action index for the agent; local when invalid.
  [[nodiscard]] int action(NodeId self, int node_count) const;
  // Embedding row: the action when valid, node_count for fallbacks.
  [[nodiscard]] int embedding_index(NodeId self, int node_count) const;
};

// Parses one schema line; nullopt on any deviation.
struct ParsedDecision {
  bool forward = false;
  NodeId target = 0;
};
std::optional<ParsedDecision> parse_decision(const std::string& text);

class Provider {
 public:
  virtual ~Provider() = default;
  [[nodiscard]] virtual std::string name() const = 0;
  // May throw; the caller falls back.
  virtual std::string complete(const std::string& prompt, const std::string& schema) = 0;
  // Providers that return quickly and cannot hang are called inline.
  [[nodiscard]] virtual bool may_block() const { return true; }
};

// Rule-based stand-in for a language model. It parses the prompt and picks
// the candidate with the best reliability-weighted deadline slack.
class ScriptedProvider : public Provider {
 public:
  explicit ScriptedProvider(double noise_prob = 0.0, std::uint64_t seed = 0)
      : noise_prob_(noise_prob), rng_(Rng::stream(seed, "provider-noise")) {}

  [[nodiscard]] std::string name() const override { return "scripted"; }
  std::string complete(const std::string& prompt, const std::string& schema) override;
  [[nodiscard]] bool may_block() const override { return false; }

 private:
  double noise_prob_;
  Rng rng_;
  std::mutex mu_;
};

struct ScriptedScore {
  bool forward = false;
  NodeId node = 0;
  double delay_s = 0.0;
  double rel = 0.0;
  double score = 0.0;
};
// Scores of local (first) and every neighbour in prompt order.
std::vector<ScriptedScore> scripted_scores(const PromptBundle& b);

// Adds a fixed latency in front of another provider.
class DelayedProvider : public Provider {
 public:
  DelayedProvider(std::shared_ptr<Provider> inner, std::chrono::milliseconds delay)
      : inner_(std::move(inner)), delay_(delay) {}
  [[nodiscard]] std::string name() const override { return "delayed-" + inner_->name(); }
  std::string complete(const std::string& prompt, const std::string& schema) override;

 private:
  std::shared_ptr<Provider> inner_;
  std::chrono::milliseconds delay_;
};

// Remote endpoint: POST {prompt, schema} as JSON, expects
// {action: "local"|"forward", target: int|null}.
class HttpProvider : public Provider {
 public:
  HttpProvider(std::string endpoint, int timeout_ms, int retries = 0, std::string replay_log = {});
  [[nodiscard]] std::string name() const override { return "http"; }
  std::string complete(const std::string& prompt, const std::string& schema) override;

 private:
  std::string scheme_host_;
  std::string path_;
  int timeout_ms_;
  int retries_;
  std::string replay_log_;
  std::mutex log_mu_;
};

std::shared_ptr<Provider> make_provider(const std::string& kind, const std::string& endpoint,
                                        int timeout_ms, double noise_prob = 0.0,
                                        std::uint64_t seed = 0);

// Calls the provider under a wall-clock budget. Returns nullopt on timeout
// or failure; `timed_out` tells which.
std::optional<std::string> call_with_timeout(const std::shared_ptr<Provider>& p,
                                             const std::string& prompt, const std::string& schema,
                                             int timeout_ms, bool* timed_out = nullptr);

struct GuidanceStats {
  std::int64_t queries = 0;
  std::int64_t valid = 0;
  std::int64_t timeouts = 0;
  std::int64_t reflections = 0;
  std::int64_t reflection_failures = 0;
  double provider_s = 0.0;

  [[nodiscard]] double validity_rate() const {
    return queries == 0 ? 1.0 : static_cast<double>(valid) / static_cast<double>(queries);
  }
};

class GuidanceEngine {
 public:
  GuidanceEngine(GuidanceConfig cfg, std::shared_ptr<Provider> provider, const EnvConfig& env_cfg);

  [[nodiscard]] PromptBundle build_prompt(const AgentView& view) const;
  GuidanceDecision decide(const PromptBundle& bundle, const ActionMask& mask, int node_count);
  // Prompt, decision and bookkeeping for one agent.
  GuidanceDecision guide(const Environment& env, NodeId agent, const ActionMask& mask);

  // Stores resolved outcomes and runs reflection after a negative reward.
  void on_transition(const TransitionRecord& rec);

  [[nodiscard]] MemoryQuery query_for(const AgentView& view) const;
  [[nodiscard]] int type_tag(double size_bits, double intensity) const;

  Memory& memory() { return memory_; }
  [[nodiscard]] const Memory& memory() const { return memory_; }
  [[nodiscard]] const GuidanceStats& stats() const { return stats_; }
  [[nodiscard]] const GuidanceConfig& config() const { return cfg_; }
  void reset_episode();

 private:
  struct Snapshot {
    MemoryQuery query;
    RiskSection risk;
    bool forwarded = false;
    NodeId target = 0;
  };

  GuidanceConfig cfg_;
  std::shared_ptr<Provider> provider_;
  EnvConfig env_cfg_;
  ObsScales scales_;
  Memory memory_;
  GuidanceStats stats_;
  std::unordered_map<std::int64_t, Snapshot> last_decision_;
  std::unordered_map<NodeId, std::int64_t> asked_;  // agent -> task queried this slot
};

}  // namespace cecsim

#endif  // CECSIM_GUIDANCE_HPP_

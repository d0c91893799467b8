#ifndef CECSIM_HARNESS_HPP_
#define CECSIM_HARNESS_HPP_

// Experiment driver: configuration, seeded runs, sweeps, latency
// measurement and CSV metrics.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cecsim/env.hpp"
#include "cecsim/fusion.hpp"
#include "cecsim/guidance.hpp"
#include "cecsim/heuristics.hpp"
#include "cecsim/mappo.hpp"
#include "cecsim/oracle.hpp"

namespace cecsim {

// Each value replaces one environment setting; the others keep the base.
struct SweepAxes {
  std::vector<double> task_size_kb;    // fixed size
  std::vector<double> intensity;       // fixed intensity label
  std::vector<double> exec_fail;       // fixed sw and hw failure rate
  std::vector<double> link_fail;       // fixed link failure rate
  std::vector<std::string> topology;   // random | ring
  std::vector<int> node_count;

  [[nodiscard]] bool empty() const;
};

struct ExperimentConfig {
  EnvConfig env;
  PPOConfig ppo;
  FusionConfig fusion;
  GuidanceConfig guidance;
  HeuristicConfig heuristics;
  std::vector<std::string> policies{"random", "ratc", "mappo", "ledrl"};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  int iterations = 300;
  int eval_episodes = 20;
  std::string provider = "scripted";  // scripted | http | off
  std::string endpoint;
  double provider_noise = 0.0;
  SweepAxes sweep;

  void validate() const;
};

// Learned policies are "mappo" and "ledrl"; the rest are heuristics.
bool is_learned(const std::string& policy);
void validate_policy_name(const std::string& policy);

// JSON with every field optional. Unknown keys are rejected.
ExperimentConfig config_from_json(const std::string& text);
std::string config_to_json(const ExperimentConfig& cfg);
// Reads the file (empty path: defaults) and applies environment overrides.
ExperimentConfig load_config(const std::string& path);
// PREFIX<path> with "__" between levels, e.g. CECSIM_ENV__NODE_COUNT=20 or
// CECSIM_SEEDS=[1,2]. Values are parsed as JSON, else taken as strings.
std::string apply_env_overrides(const std::string& json_text, const std::string& prefix = "CECSIM_");

StaticInstance static_instance_from_json(const std::string& text);

// ---------------------------------------------------------------------------

inline constexpr int kCsvSchemaVersion = 1;

struct MetricsRow {
  std::string run_id;
  std::string policy;
  std::string phase;  // train | eval
  std::string axis;   // sweep axis, empty outside sweeps
  std::string axis_value;
  std::uint64_t seed = 0;
  int iteration = 0;  // update iterations completed
  int episodes = 0;   // training episodes completed
  int episode = 0;    // evaluation episode index
  double success_rate = 0.0;
  double episode_return = 0.0;
  std::int64_t arrivals = 0;
  std::int64_t successes = 0;
  std::int64_t deadline_violations = 0;
  std::int64_t reliability_violations = 0;
  double decision_s = 0.0;
  double lambda = 0.0;
  double guidance_validity = 1.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double feat_loss = 0.0;
  double act_loss = 0.0;
};

std::string csv_header();
std::string csv_line(const MetricsRow& r);
MetricsRow parse_csv_line(const std::string& line);
void write_csv(const std::string& path, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> read_csv(const std::string& path);

struct Summary {
  std::string policy;
  std::string axis;
  std::string axis_value;
  std::vector<std::uint64_t> seeds;
  std::vector<double> per_seed;  // mean evaluation success per seed
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation over seeds
  double mean_return = 0.0;
  double mean_decision_s = 0.0;
};

// Groups eval rows by (axis, value, policy) and seeds, in first-seen order.
std::vector<Summary> summarize(const std::vector<MetricsRow>& rows);
std::string format_summary(const Summary& s);

struct PairedDelta {
  std::string a;
  std::string b;
  int pairs = 0;
  double mean = 0.0;  // a - b, percentage points
  double stddev = 0.0;
};
std::optional<PairedDelta> paired_delta(const Summary& a, const Summary& b);
std::string format_delta(const PairedDelta& d);

// ---------------------------------------------------------------------------

// Seeds of the evaluation episodes, shared by every policy for a run seed.
std::vector<std::uint64_t> evaluation_seeds(std::uint64_t seed, int count);

// Owns whatever a policy needs: a trainer for learned ones.
struct PolicyHandle {
  std::string name;
  std::unique_ptr<Policy> heuristic;
  std::unique_ptr<Trainer> trainer;
  LedrlTrainer* ledrl = nullptr;

  Policy& policy();
};
PolicyHandle make_policy(const std::string& name, const ExperimentConfig& cfg, std::uint64_t seed);

// Saves/loads learned parameters as <prefix>.actor.json, .critic.json and
// .fusion.json (LeDRL only).
void save_checkpoint(PolicyHandle& h, const std::string& prefix);
void load_checkpoint(PolicyHandle& h, const std::string& prefix);

// Trains a learned handle for `iterations`, appending one train row per
// iteration. Heuristic handles are left alone.
void train_policy(PolicyHandle& h, int iterations, const std::string& run_id, std::uint64_t seed,
                  std::vector<MetricsRow>& rows);

// One eval row per episode on `env_cfg`.
void evaluate_policy(PolicyHandle& h, const EnvConfig& env_cfg, const std::vector<std::uint64_t>& episode_seeds,
                     const std::string& run_id, std::uint64_t seed, int iteration, std::vector<MetricsRow>& rows);

using TrainedPolicies = std::map<std::string, std::vector<PolicyHandle>>;  // policy -> per seed

struct RunResult {
  std::vector<MetricsRow> rows;
  std::vector<Summary> summaries;
  std::vector<PairedDelta> deltas;
  TrainedPolicies trained;  // learned handles, in seed order
};

// Train (learned) and evaluate every policy for every seed. Writes
// metrics.csv and checkpoints under out_dir when it is not empty; progress
// goes to `log` when given. Errors name the failing run.
RunResult run(const ExperimentConfig& cfg, const std::string& out_dir, std::ostream* log = nullptr);

struct MonotonicityFlag {
  std::string axis;
  std::string policy;
  std::string from;
  std::string to;
  double increase = 0.0;
  double pooled_sd = 0.0;
};

struct SweepResult {
  std::vector<MetricsRow> rows;
  std::vector<Summary> summaries;
  std::vector<MonotonicityFlag> flags;  // increases larger than one pooled sd
  std::vector<MonotonicityFlag> increases;  // every increase, flagged or not
};

EnvConfig apply_axis(const EnvConfig& base, const std::string& axis, const std::string& value);
// Difficulty-ordered axes are checked for monotonicity; topology and node
// count are not.
bool ordered_axis(const std::string& axis);

// Learned policies are trained once per seed on the base environment and
// reused across axis values that keep the observation layout; otherwise they
// are retrained at that value. `trained` may hold handles already trained
// on the base environment; missing ones are trained and added.
SweepResult sweep(const ExperimentConfig& cfg, const std::string& out_dir, std::ostream* log = nullptr,
                  TrainedPolicies* trained = nullptr);
std::vector<MonotonicityFlag> monotonicity(const std::vector<Summary>& summaries);

struct LatencyStats {
  std::string policy;
  std::int64_t decisions = 0;
  double mean_s = 0.0;
  double p95_s = 0.0;
  double p99_s = 0.0;
  double guidance_mean_s = 0.0;  // per decision
  double network_mean_s = 0.0;   // per decision, excluding guidance
  std::vector<double> guidance_calls_s;  // one entry per provider query
};

// Per-decision wall time over n_steps environment steps after a short
// warm-up.
LatencyStats measure_latency(PolicyHandle& h, const EnvConfig& env_cfg, int n_steps, std::uint64_t seed);
double percentile(std::vector<double> v, double q);

}  // namespace cecsim

#endif  // CECSIM_HARNESS_HPP_

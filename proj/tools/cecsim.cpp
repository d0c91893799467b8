// cecsim: simulate, train, evaluate, oracle, sweep and latency commands.

#include <fmt/format.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "cecsim/errors.hpp"
#include "cecsim/harness.hpp"

using namespace cecsim;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string policy;
  std::string out;
  std::string provider;
  std::string endpoint;
  std::optional<int> timeout_ms;
  std::optional<int> iterations;
  std::optional<int> episodes;
  std::string checkpoint;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON experiment config");
  app->add_option("--seed", c.seed, "Run a single seed");
  app->add_option("--policy", c.policy, "Policy or comma-separated list");
  app->add_option("--out", c.out, "Output directory");
  app->add_option("--provider", c.provider, "Guidance provider: scripted, http or off");
  app->add_option("--endpoint", c.endpoint, "HTTP provider endpoint");
  app->add_option("--timeout-ms", c.timeout_ms, "Guidance timeout");
  app->add_option("--iterations", c.iterations, "Training iterations");
  app->add_option("--episodes", c.episodes, "Evaluation episodes per seed");
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = load_config(c.config);
  if (c.seed) cfg.seeds = {*c.seed};
  if (!c.policy.empty()) cfg.policies = split(c.policy);
  if (!c.provider.empty()) cfg.provider = c.provider;
  if (!c.endpoint.empty()) cfg.endpoint = c.endpoint;
  if (c.timeout_ms) cfg.guidance.timeout_ms = *c.timeout_ms;
  if (c.iterations) cfg.iterations = *c.iterations;
  if (c.episodes) cfg.eval_episodes = *c.episodes;
  cfg.validate();
  return cfg;
}

void print_run(const RunResult& r) {
  for (const auto& s : r.summaries) std::cout << format_summary(s) << '\n';
  for (const auto& d : r.deltas) std::cout << format_delta(d) << '\n';
}

int simulate(const Common& c) {
  ExperimentConfig cfg = resolve(c);
  if (c.policy.empty()) cfg.policies = {"random"};
  cfg.iterations = 0;
  const auto r = run(cfg, c.out);
  for (const auto& row : r.rows)
    std::cout << fmt::format("{} episode {} success {:.2f} % return {:.1f} tasks {} ok {} deadline {} reliability {}\n",
                             row.run_id, row.episode, 100.0 * row.success_rate, row.episode_return,
                             row.arrivals, row.successes, row.deadline_violations, row.reliability_violations);
  print_run(r);
  return 0;
}

int train(const Common& c) {
  ExperimentConfig cfg = resolve(c);
  if (c.policy.empty()) cfg.policies = {"mappo", "ledrl"};
  std::cerr << "config:\n" << config_to_json(cfg) << '\n';
  const auto r = run(cfg, c.out, &std::cerr);
  print_run(r);
  return 0;
}

int evaluate(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  std::vector<MetricsRow> rows;
  for (std::uint64_t seed : cfg.seeds) {
    const auto eval_seeds = evaluation_seeds(seed, cfg.eval_episodes);
    for (const auto& name : cfg.policies) {
      const std::string run_id = fmt::format("{}/s{}", name, seed);
      PolicyHandle h = make_policy(name, cfg, seed);
      if (h.trainer) {
        if (c.checkpoint.empty()) throw ConfigError(run_id + ": learned policies need --checkpoint");
        load_checkpoint(h, (std::filesystem::path(c.checkpoint) / fmt::format("{}-s{}", name, seed)).string());
      }
      evaluate_policy(h, cfg.env, eval_seeds, run_id, seed, 0, rows);
    }
  }
  if (!c.out.empty()) {
    std::filesystem::create_directories(c.out);
    write_csv((std::filesystem::path(c.out) / "metrics.csv").string(), rows);
  }
  RunResult r;
  r.rows = std::move(rows);
  r.summaries = summarize(r.rows);
  for (std::size_t i = 0; i < r.summaries.size(); ++i)
    for (std::size_t j = 0; j < r.summaries.size(); ++j)
      if (i != j && r.summaries[i].policy == "ledrl" && r.summaries[j].policy == "mappo")
        if (auto d = paired_delta(r.summaries[i], r.summaries[j])) r.deltas.push_back(*d);
  print_run(r);
  return 0;
}

int oracle(const std::string& instance, const std::string& binpack, int bins, double capacity) {
  StaticInstance inst;
  if (!instance.empty()) {
    std::ifstream in(instance);
    if (!in) throw ConfigError("cannot read " + instance);
    std::stringstream ss;
    ss << in.rdbuf();
    inst = static_instance_from_json(ss.str());
  } else if (!binpack.empty()) {
    BinPackingInstance bp;
    for (const auto& s : split(binpack)) bp.sizes.push_back(std::stod(s));
    bp.bins = bins;
    bp.capacity = capacity;
    inst = reduce_binpacking(bp);
  } else {
    throw ConfigError("oracle needs --instance or --binpack");
  }
  const auto r = solve_exact(inst);
  std::cout << (r.feasible ? "feasible" : "infeasible") << '\n';
  if (r.feasible) {
    std::cout << fmt::format("success rate {}\n", r.success_rate);
    std::string a;
    for (auto x : r.assignment) a += (a.empty() ? "" : " ") + std::to_string(x);
    std::cout << "assignment " << a << '\n';
  }
  std::cout << fmt::format("assignments evaluated {}\n", r.evaluated);
  return 0;
}

int run_sweep(const Common& c) {
  ExperimentConfig cfg = resolve(c);
  if (cfg.sweep.empty()) {
    cfg.sweep.task_size_kb = {2000, 3000, 4000};
    cfg.sweep.intensity = {800, 1600, 2400};
  }
  const auto r = sweep(cfg, c.out, &std::cerr);
  std::string axis;
  for (const auto& s : r.summaries) {
    if (s.axis != axis) std::cout << "\n" << (axis = s.axis) << '\n';
    std::cout << "  " << format_summary(s) << '\n';
  }
  std::cout << '\n';
  if (r.flags.empty()) std::cout << "monotonicity: no axis increases by more than one pooled sd\n";
  for (const auto& f : r.flags)
    std::cout << fmt::format("monotonicity: {} {} rises {:.2f} pp from {} to {} (pooled sd {:.2f} pp)\n", f.axis,
                             f.policy, 100.0 * f.increase, f.from, f.to, 100.0 * f.pooled_sd);
  return 0;
}

int latency(const Common& c, int steps) {
  ExperimentConfig cfg = resolve(c);
  if (c.policy.empty()) cfg.policies = {"ratc", "mappo", "ledrl"};
  const std::uint64_t seed = cfg.seeds.front();
  for (const auto& name : cfg.policies) {
    PolicyHandle h = make_policy(name, cfg, seed);
    if (h.trainer && !c.checkpoint.empty())
      load_checkpoint(h, (std::filesystem::path(c.checkpoint) / fmt::format("{}-s{}", name, seed)).string());
    const auto st = measure_latency(h, cfg.env, steps, seed);
    std::cout << fmt::format("{:<7} decisions {:6d}  mean {:.6f} s  p95 {:.6f} s  p99 {:.6f} s", name, st.decisions,
                             st.mean_s, st.p95_s, st.p99_s);
    if (h.ledrl)
      std::cout << fmt::format("  guidance {:.6f} s  network {:.6f} s  guidance p99 {:.6f} s", st.guidance_mean_s,
                               st.network_mean_s, percentile(st.guidance_calls_s, 0.99));
    std::cout << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Collaborative edge computing offloading simulator"};
  app.require_subcommand(1);

  Common sim, tr, ev, sw, lat;
  auto* s = app.add_subcommand("simulate", "Run episodes and report per-episode outcomes");
  add_common(s, sim);
  auto* t = app.add_subcommand("train", "Train learned policies and evaluate them against the others");
  add_common(t, tr);
  auto* e = app.add_subcommand("evaluate", "Evaluate heuristics or saved checkpoints");
  add_common(e, ev);
  e->add_option("--checkpoint", ev.checkpoint, "Directory written by train --out");
  auto* sweep_cmd = app.add_subcommand("sweep", "Robustness sweep over the configured axes");
  add_common(sweep_cmd, sw);
  auto* l = app.add_subcommand("latency", "Per-decision latency");
  add_common(l, lat);
  int steps = 2000;
  l->add_option("--steps", steps, "Measured environment steps");
  l->add_option("--checkpoint", lat.checkpoint, "Directory written by train --out");

  std::string instance, binpack;
  int bins = 2;
  double capacity = 5.0;
  auto* o = app.add_subcommand("oracle", "Exact optimum of a small static instance");
  o->add_option("--instance", instance, "Static instance JSON");
  o->add_option("--binpack", binpack, "Comma-separated item sizes");
  o->add_option("--bins", bins, "Bin count");
  o->add_option("--capacity", capacity, "Bin capacity");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*s) return simulate(sim);
    if (*t) return train(tr);
    if (*e) return evaluate(ev);
    if (*sweep_cmd) return run_sweep(sw);
    if (*l) return latency(lat, steps);
    if (*o) return oracle(instance, binpack, bins, capacity);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 1;
  }
  return 0;
}

#include "cecsim/harness.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "cecsim/errors.hpp"
#include "json.hpp"

extern char** environ;

namespace cecsim {

using json = nlohmann::json;

namespace {

// Reads optional keys from one JSON object and rejects the unknown ones.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  void range(const char* key, Range& r) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    if (it->is_number()) {
      r.lo = r.hi = it->get<double>();
    } else if (it->is_array() && it->size() == 2 && (*it)[0].is_number() && (*it)[1].is_number()) {
      r.lo = (*it)[0].get<double>();
      r.hi = (*it)[1].get<double>();
    } else {
      throw ConfigError(where_ + "." + key + ": expected a number or [lo, hi]");
    }
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

json range_json(const Range& r) { return json::array({r.lo, r.hi}); }

void read_env(const json& j, EnvConfig& e) {
  Reader r(j, "env");
  r.get("node_count", e.node_count);
  r.get("topology", e.topology);
  r.get("avg_degree", e.avg_degree);
  r.get("horizon", e.horizon);
  r.get("slot_duration_s", e.slot_duration_s);
  r.range("task_size_kb", e.task_size_kb);
  r.range("intensity", e.intensity);
  r.get("intensity_scale", e.intensity_scale);
  r.get("deadline_s", e.deadline_s);
  r.get("reliability_floor", e.reliability_floor);
  r.range("cpu_hz", e.cpu_hz);
  r.get("memory_bits", e.memory_bits);
  r.range("link_rate_mbps", e.link_rate_mbps);
  r.range("arrival_prob", e.arrival_prob);
  r.range("sw_fail_rate", e.sw_fail_rate);
  r.range("hw_fail_rate", e.hw_fail_rate);
  r.range("link_fail_rate", e.link_fail_rate);
  r.get("node_death_prob", e.node_death_prob);
  r.get("node_appear_prob", e.node_appear_prob);
  r.get("link_down_prob", e.link_down_prob);
  r.get("link_up_prob", e.link_up_prob);
  r.get("max_hops", e.max_hops);
  r.get("queue_norm", e.queue_norm);
  r.finish();
}

json env_json(const EnvConfig& e) {
  return {{"node_count", e.node_count},
          {"topology", e.topology},
          {"avg_degree", e.avg_degree},
          {"horizon", e.horizon},
          {"slot_duration_s", e.slot_duration_s},
          {"task_size_kb", range_json(e.task_size_kb)},
          {"intensity", range_json(e.intensity)},
          {"intensity_scale", e.intensity_scale},
          {"deadline_s", e.deadline_s},
          {"reliability_floor", e.reliability_floor},
          {"cpu_hz", range_json(e.cpu_hz)},
          {"memory_bits", e.memory_bits},
          {"link_rate_mbps", range_json(e.link_rate_mbps)},
          {"arrival_prob", range_json(e.arrival_prob)},
          {"sw_fail_rate", range_json(e.sw_fail_rate)},
          {"hw_fail_rate", range_json(e.hw_fail_rate)},
          {"link_fail_rate", range_json(e.link_fail_rate)},
          {"node_death_prob", e.node_death_prob},
          {"node_appear_prob", e.node_appear_prob},
          {"link_down_prob", e.link_down_prob},
          {"link_up_prob", e.link_up_prob},
          {"max_hops", e.max_hops},
          {"queue_norm", e.queue_norm}};
}

void read_ppo(const json& j, PPOConfig& p) {
  Reader r(j, "ppo");
  r.get("clip", p.clip);
  r.get("discount", p.discount);
  r.get("gae_lambda", p.gae_lambda);
  r.get("entropy_coef", p.entropy_coef);
  r.get("value_coef", p.value_coef);
  r.get("max_grad_norm", p.max_grad_norm);
  r.get("lr", p.lr);
  r.get("lr_decay", p.lr_decay);
  r.get("eval_interval", p.eval_interval);
  r.get("epochs", p.epochs);
  r.get("minibatch", p.minibatch);
  r.get("episodes_per_iteration", p.episodes_per_iteration);
  r.get("hidden", p.hidden);
  r.get("centralized_critic", p.centralized_critic);
  r.get("normalize_advantages", p.normalize_advantages);
  r.get("reward_scale", p.reward_scale);
  r.finish();
}

json ppo_json(const PPOConfig& p) {
  return {{"clip", p.clip},
          {"discount", p.discount},
          {"gae_lambda", p.gae_lambda},
          {"entropy_coef", p.entropy_coef},
          {"value_coef", p.value_coef},
          {"max_grad_norm", p.max_grad_norm},
          {"lr", p.lr},
          {"lr_decay", p.lr_decay},
          {"eval_interval", p.eval_interval},
          {"epochs", p.epochs},
          {"minibatch", p.minibatch},
          {"episodes_per_iteration", p.episodes_per_iteration},
          {"hidden", p.hidden},
          {"centralized_critic", p.centralized_critic},
          {"normalize_advantages", p.normalize_advantages},
          {"reward_scale", p.reward_scale}};
}

void read_fusion(const json& j, FusionConfig& f) {
  Reader r(j, "fusion");
  r.get("embed_dim", f.embed_dim);
  r.get("key_dim", f.key_dim);
  r.get("dropout", f.dropout);
  r.get("w_c", f.w_c);
  r.get("query_guidance", f.query_guidance);
  r.get("freeze_lambda", f.freeze_lambda);
  if (const json* s = r.sub("schedule")) {
    Reader q(*s, "fusion.schedule");
    auto& sc = f.schedule;
    q.get("lambda_init", sc.lambda_init);
    q.get("beta", sc.beta);
    q.get("eta", sc.eta);
    q.get("gamma_decay", sc.gamma_decay);
    q.get("lambda_min", sc.lambda_min);
    q.get("interval", sc.interval);
    q.finish();
  }
  r.finish();
}

json fusion_json(const FusionConfig& f) {
  const auto& s = f.schedule;
  return {{"embed_dim", f.embed_dim},
          {"key_dim", f.key_dim},
          {"dropout", f.dropout},
          {"w_c", f.w_c},
          {"query_guidance", f.query_guidance},
          {"freeze_lambda", f.freeze_lambda},
          {"schedule",
           {{"lambda_init", s.lambda_init},
            {"beta", s.beta},
            {"eta", s.eta},
            {"gamma_decay", s.gamma_decay},
            {"lambda_min", s.lambda_min},
            {"interval", s.interval}}}};
}

void read_guidance(const json& j, GuidanceConfig& g) {
  Reader r(j, "guidance");
  r.get("w_loc", g.w_loc);
  r.get("w_type", g.w_type);
  r.get("w_task", g.w_task);
  r.get("w_load", g.w_load);
  r.get("top_k", g.top_k);
  r.get("short_cap", g.short_cap);
  r.get("long_cap", g.long_cap);
  r.get("compact_batch", g.compact_batch);
  r.get("timeout_ms", g.timeout_ms);
  r.get("query_stride", g.query_stride);
  r.get("reflections_per_step", g.reflections_per_step);
  r.finish();
}

json guidance_json(const GuidanceConfig& g) {
  return {{"w_loc", g.w_loc},
          {"w_type", g.w_type},
          {"w_task", g.w_task},
          {"w_load", g.w_load},
          {"top_k", g.top_k},
          {"short_cap", g.short_cap},
          {"long_cap", g.long_cap},
          {"compact_batch", g.compact_batch},
          {"timeout_ms", g.timeout_ms},
          {"query_stride", g.query_stride},
          {"reflections_per_step", g.reflections_per_step}};
}

void read_heuristics(const json& j, HeuristicConfig& h) {
  Reader r(j, "heuristics");
  r.get("ratc_sample_k", h.ratc_sample_k);
  r.get("w_delay", h.w_delay);
  r.get("w_rel", h.w_rel);
  if (const json* a = r.sub("agsp")) {
    Reader q(*a, "heuristics.agsp");
    q.get("population", h.agsp.population);
    q.get("generations", h.agsp.generations);
    q.get("init_temp", h.agsp.init_temp);
    q.get("cooling", h.agsp.cooling);
    q.finish();
  }
  r.finish();
}

json heuristics_json(const HeuristicConfig& h) {
  return {{"ratc_sample_k", h.ratc_sample_k},
          {"w_delay", h.w_delay},
          {"w_rel", h.w_rel},
          {"agsp",
           {{"population", h.agsp.population},
            {"generations", h.agsp.generations},
            {"init_temp", h.agsp.init_temp},
            {"cooling", h.agsp.cooling}}}};
}

void read_sweep(const json& j, SweepAxes& s) {
  Reader r(j, "sweep");
  r.get("task_size_kb", s.task_size_kb);
  r.get("intensity", s.intensity);
  r.get("exec_fail", s.exec_fail);
  r.get("link_fail", s.link_fail);
  r.get("topology", s.topology);
  r.get("node_count", s.node_count);
  r.finish();
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string num(double x) { return fmt::format("{}", x); }

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

void check_field(const std::string& s) {
  if (s.find_first_of(",\n\r") != std::string::npos)
    throw ConfigError("metrics field contains a separator: '" + s + "'");
}

}  // namespace

// ---------------------------------------------------------------------------

bool SweepAxes::empty() const {
  return task_size_kb.empty() && intensity.empty() && exec_fail.empty() && link_fail.empty() &&
         topology.empty() && node_count.empty();
}

bool is_learned(const std::string& policy) { return policy == "mappo" || policy == "ledrl"; }

void validate_policy_name(const std::string& p) {
  static const std::set<std::string> known{"random", "local", "greedy", "ratc", "agsp", "mappo", "ledrl"};
  if (!known.count(p)) throw ConfigError("unknown policy '" + p + "'");
}

void ExperimentConfig::validate() const {
  env.validate();
  ppo.validate();
  fusion.validate();
  guidance.validate();
  heuristics.validate();
  if (policies.empty()) throw ConfigError("at least one policy is required");
  for (const auto& p : policies) validate_policy_name(p);
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (iterations < 0) throw ConfigError("iterations must be >= 0");
  if (eval_episodes < 1) throw ConfigError("eval_episodes must be >= 1");
  if (provider != "scripted" && provider != "http" && provider != "off")
    throw ConfigError("provider must be scripted, http or off");
  if (provider == "http" && endpoint.empty()) throw ConfigError("the http provider needs an endpoint");
  if (provider_noise < 0.0 || provider_noise > 1.0) throw ConfigError("provider_noise must be in [0,1]");
  for (const auto& t : sweep.topology)
    if (t != "random" && t != "ring") throw ConfigError("sweep topology must be random or ring");
}

ExperimentConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Reader r(j, "config");
  if (const json* s = r.sub("env")) read_env(*s, c.env);
  if (const json* s = r.sub("ppo")) read_ppo(*s, c.ppo);
  if (const json* s = r.sub("fusion")) read_fusion(*s, c.fusion);
  if (const json* s = r.sub("guidance")) read_guidance(*s, c.guidance);
  if (const json* s = r.sub("heuristics")) read_heuristics(*s, c.heuristics);
  if (const json* s = r.sub("sweep")) read_sweep(*s, c.sweep);
  r.get("policies", c.policies);
  r.get("seeds", c.seeds);
  r.get("iterations", c.iterations);
  r.get("eval_episodes", c.eval_episodes);
  r.get("provider", c.provider);
  r.get("endpoint", c.endpoint);
  r.get("provider_noise", c.provider_noise);
  r.finish();
  c.validate();
  return c;
}

std::string config_to_json(const ExperimentConfig& c) {
  json j{{"env", env_json(c.env)},
         {"ppo", ppo_json(c.ppo)},
         {"fusion", fusion_json(c.fusion)},
         {"guidance", guidance_json(c.guidance)},
         {"heuristics", heuristics_json(c.heuristics)},
         {"policies", c.policies},
         {"seeds", c.seeds},
         {"iterations", c.iterations},
         {"eval_episodes", c.eval_episodes},
         {"provider", c.provider},
         {"endpoint", c.endpoint},
         {"provider_noise", c.provider_noise},
         {"sweep",
          {{"task_size_kb", c.sweep.task_size_kb},
           {"intensity", c.sweep.intensity},
           {"exec_fail", c.sweep.exec_fail},
           {"link_fail", c.sweep.link_fail},
           {"topology", c.sweep.topology},
           {"node_count", c.sweep.node_count}}}};
  return j.dump(2);
}

std::string apply_env_overrides(const std::string& json_text, const std::string& prefix) {
  json j = json_text.empty() ? json::object() : json::parse(json_text);
  std::vector<std::string> vars;
  for (char** e = environ; e && *e; ++e) vars.emplace_back(*e);
  std::sort(vars.begin(), vars.end());
  for (const auto& v : vars) {
    if (v.rfind(prefix, 0) != 0) continue;
    const auto eq = v.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = lower(v.substr(prefix.size(), eq - prefix.size()));
    const std::string value = v.substr(eq + 1);
    json* node = &j;
    std::size_t pos = 0;
    while (true) {
      const auto next = key.find("__", pos);
      const std::string part = key.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
      if (part.empty()) throw ConfigError("bad override variable " + v.substr(0, eq));
      if (next == std::string::npos) {
        json parsed = json::parse(value, nullptr, false);
        (*node)[part] = parsed.is_discarded() ? json(value) : parsed;
        break;
      }
      if (!node->contains(part)) (*node)[part] = json::object();
      node = &(*node)[part];
      pos = next + 2;
    }
  }
  return j.dump();
}

ExperimentConfig load_config(const std::string& path) {
  std::string text;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  try {
    return config_from_json(apply_env_overrides(text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

StaticInstance static_instance_from_json(const std::string& text) {
  StaticInstance inst;
  try {
    const json j = json::parse(text);
    inst.topology.slot_duration_s = j.value("slot_duration_s", 0.5);
    inst.horizon_slots = j.value("horizon_slots", 1);
    for (const auto& n : j.at("nodes")) {
      NodeSpec s;
      s.id = n.at("id").get<NodeId>();
      s.compute_hz = n.value("compute_hz", s.compute_hz);
      s.memory_bits = n.value("memory_bits", s.memory_bits);
      s.sw_fail_rate = n.value("sw_fail_rate", 0.0);
      s.hw_fail_rate = n.value("hw_fail_rate", 0.0);
      inst.topology.nodes.push_back({s, true});
    }
    for (const auto& l : j.value("links", json::array()))
      inst.topology.links.push_back(
          {make_link(l.at("a").get<NodeId>(), l.at("b").get<NodeId>(), l.at("rate_bps").get<double>(),
                     l.value("fail_rate", 0.0)),
           true});
    std::int64_t id = 0;
    for (const auto& t : j.at("tasks")) {
      Task task = make_task(t.at("origin").get<NodeId>(), t.value("created_slot", 0), t.at("size_bits").get<double>(),
                            t.at("intensity").get<double>(), t.value("deadline_s", 4.0),
                            t.value("reliability_floor", 0.9));
      task.id = id++;
      inst.tasks.push_back(task);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("instance: ") + e.what());
  }
  inst.validate();
  return inst;
}

// ---------------------------------------------------------------------------

std::string csv_header() {
  return "schema_version,run_id,policy,phase,axis,axis_value,seed,iteration,episodes,episode,success_rate,"
         "return,arrivals,successes,deadline_violations,reliability_violations,decision_s,lambda,"
         "guidance_validity,policy_loss,value_loss,entropy,feat_loss,act_loss";
}

std::string csv_line(const MetricsRow& r) {
  for (const auto* s : {&r.run_id, &r.policy, &r.phase, &r.axis, &r.axis_value}) check_field(*s);
  return fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}", kCsvSchemaVersion,
                     r.run_id, r.policy, r.phase, r.axis, r.axis_value, r.seed, r.iteration, r.episodes, r.episode,
                     r.success_rate, r.episode_return, r.arrivals, r.successes, r.deadline_violations,
                     r.reliability_violations, r.decision_s, r.lambda, r.guidance_validity, r.policy_loss,
                     r.value_loss, r.entropy, r.feat_loss, r.act_loss);
}

MetricsRow parse_csv_line(const std::string& line) {
  std::vector<std::string> f;
  std::size_t pos = 0;
  while (true) {
    const auto c = line.find(',', pos);
    f.push_back(line.substr(pos, c == std::string::npos ? std::string::npos : c - pos));
    if (c == std::string::npos) break;
    pos = c + 1;
  }
  if (f.size() != 24) throw ConfigError("metrics row has " + std::to_string(f.size()) + " fields, expected 24");
  if (f[0] != std::to_string(kCsvSchemaVersion)) throw ConfigError("metrics schema version " + f[0] + " unsupported");
  auto dbl = [&](int i) {
    double v = 0.0;
    const auto* b = f[i].data();
    const auto res = std::from_chars(b, b + f[i].size(), v);
    if (res.ec != std::errc() || res.ptr != b + f[i].size()) throw ConfigError("bad number '" + f[i] + "'");
    return v;
  };
  auto integer = [&](int i) {
    std::int64_t v = 0;
    const auto* b = f[i].data();
    const auto res = std::from_chars(b, b + f[i].size(), v);
    if (res.ec != std::errc() || res.ptr != b + f[i].size()) throw ConfigError("bad integer '" + f[i] + "'");
    return v;
  };
  MetricsRow r;
  r.run_id = f[1];
  r.policy = f[2];
  r.phase = f[3];
  r.axis = f[4];
  r.axis_value = f[5];
  {
    const auto* b = f[6].data();
    const auto res = std::from_chars(b, b + f[6].size(), r.seed);
    if (res.ec != std::errc()) throw ConfigError("bad seed '" + f[6] + "'");
  }
  r.iteration = static_cast<int>(integer(7));
  r.episodes = static_cast<int>(integer(8));
  r.episode = static_cast<int>(integer(9));
  r.success_rate = dbl(10);
  r.episode_return = dbl(11);
  r.arrivals = integer(12);
  r.successes = integer(13);
  r.deadline_violations = integer(14);
  r.reliability_violations = integer(15);
  r.decision_s = dbl(16);
  r.lambda = dbl(17);
  r.guidance_validity = dbl(18);
  r.policy_loss = dbl(19);
  r.value_loss = dbl(20);
  r.entropy = dbl(21);
  r.feat_loss = dbl(22);
  r.act_loss = dbl(23);
  return r;
}

void write_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << csv_header() << '\n';
  for (const auto& r : rows) out << csv_line(r) << '\n';
}

std::vector<MetricsRow> read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path);
  std::string line;
  if (!std::getline(in, line) || line != csv_header()) throw ConfigError(path + ": unexpected header");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(parse_csv_line(line));
  return rows;
}

std::vector<Summary> summarize(const std::vector<MetricsRow>& rows) {
  struct Acc {
    Summary s;
    std::vector<std::vector<double>> sr, ret, dec;
  };
  std::vector<Acc> groups;
  for (const auto& r : rows) {
    if (r.phase != "eval") continue;
    auto it = std::find_if(groups.begin(), groups.end(), [&](const Acc& a) {
      return a.s.policy == r.policy && a.s.axis == r.axis && a.s.axis_value == r.axis_value;
    });
    if (it == groups.end()) {
      groups.push_back({});
      it = std::prev(groups.end());
      it->s.policy = r.policy;
      it->s.axis = r.axis;
      it->s.axis_value = r.axis_value;
    }
    auto& seeds = it->s.seeds;
    auto k = static_cast<std::size_t>(std::find(seeds.begin(), seeds.end(), r.seed) - seeds.begin());
    if (k == seeds.size()) {
      seeds.push_back(r.seed);
      it->sr.emplace_back();
      it->ret.emplace_back();
      it->dec.emplace_back();
    }
    it->sr[k].push_back(r.success_rate);
    it->ret[k].push_back(r.episode_return);
    it->dec[k].push_back(r.decision_s);
  }
  std::vector<Summary> out;
  for (auto& g : groups) {
    std::vector<double> rets, decs;
    for (std::size_t k = 0; k < g.s.seeds.size(); ++k) {
      g.s.per_seed.push_back(mean_of(g.sr[k]));
      rets.push_back(mean_of(g.ret[k]));
      decs.push_back(mean_of(g.dec[k]));
    }
    g.s.mean = mean_of(g.s.per_seed);
    g.s.stddev = sample_sd(g.s.per_seed);
    g.s.mean_return = mean_of(rets);
    g.s.mean_decision_s = mean_of(decs);
    out.push_back(std::move(g.s));
  }
  return out;
}

std::string format_summary(const Summary& s) {
  const std::string where = s.axis.empty() ? "" : fmt::format("{}={} ", s.axis, s.axis_value);
  return fmt::format("{}{:<7} success {:6.2f} ± {:5.2f} %  return {:8.2f}  decision {:.6f} s  ({} seeds)", where,
                     s.policy, 100.0 * s.mean, 100.0 * s.stddev, s.mean_return, s.mean_decision_s, s.seeds.size());
}

std::optional<PairedDelta> paired_delta(const Summary& a, const Summary& b) {
  std::vector<double> d;
  for (std::size_t i = 0; i < a.seeds.size(); ++i)
    for (std::size_t j = 0; j < b.seeds.size(); ++j)
      if (a.seeds[i] == b.seeds[j]) d.push_back(100.0 * (a.per_seed[i] - b.per_seed[j]));
  if (d.empty()) return std::nullopt;
  return PairedDelta{a.policy, b.policy, static_cast<int>(d.size()), mean_of(d), sample_sd(d)};
}

std::string format_delta(const PairedDelta& d) {
  return fmt::format("delta {} - {}: {:+.2f} ± {:.2f} pp over {} paired seeds", d.a, d.b, d.mean, d.stddev, d.pairs);
}

// ---------------------------------------------------------------------------

std::vector<std::uint64_t> evaluation_seeds(std::uint64_t seed, int count) {
  std::vector<std::uint64_t> out;
  for (int j = 0; j < count; ++j)
    out.push_back(mix_seed(mix_seed(seed) ^ (0x65a1000000ULL + static_cast<std::uint64_t>(j))));
  return out;
}

Policy& PolicyHandle::policy() {
  if (trainer) return trainer->policy();
  return *heuristic;
}

PolicyHandle make_policy(const std::string& name, const ExperimentConfig& cfg, std::uint64_t seed) {
  validate_policy_name(name);
  PolicyHandle h;
  h.name = name;
  if (name == "mappo") {
    h.trainer = std::make_unique<Trainer>(cfg.env, cfg.ppo, seed);
  } else if (name == "ledrl") {
    auto provider = make_provider(cfg.provider, cfg.endpoint, cfg.guidance.timeout_ms, cfg.provider_noise, seed);
    auto t = std::make_unique<LedrlTrainer>(cfg.env, cfg.ppo, cfg.fusion, cfg.guidance, std::move(provider), seed);
    h.ledrl = t.get();
    h.trainer = std::move(t);
  } else {
    h.heuristic = make_heuristic(name, cfg.heuristics);
  }
  if (h.trainer) h.trainer->set_eval_seeds({});
  return h;
}

void save_checkpoint(PolicyHandle& h, const std::string& prefix) {
  if (!h.trainer) return;
  tl::save(h.trainer->net().actor, prefix + ".actor.json");
  tl::save(h.trainer->net().critic, prefix + ".critic.json");
  if (h.ledrl) tl::save(h.ledrl->fusion().params, prefix + ".fusion.json");
}

void load_checkpoint(PolicyHandle& h, const std::string& prefix) {
  if (!h.trainer) return;
  tl::load(h.trainer->net().actor, prefix + ".actor.json");
  tl::load(h.trainer->net().critic, prefix + ".critic.json");
  if (h.ledrl) tl::load(h.ledrl->fusion().params, prefix + ".fusion.json");
}

void train_policy(PolicyHandle& h, int iterations, const std::string& run_id, std::uint64_t seed,
                  std::vector<MetricsRow>& rows) {
  if (!h.trainer) return;
  const int per = h.trainer->config().episodes_per_iteration;
  for (int i = 0; i < iterations; ++i) {
    const auto m = h.trainer->iterate();
    if (h.ledrl && !std::isnan(m.lambda_lo)) {
      const auto& sc = h.ledrl->fusion_config().schedule;
      if (m.lambda_lo < sc.lambda_min || m.lambda_hi > sc.cap())
        throw std::runtime_error(fmt::format("lambda left [{}, {}] at iteration {}: [{}, {}]", sc.lambda_min,
                                             sc.cap(), m.iteration, m.lambda_lo, m.lambda_hi));
    }
    MetricsRow r;
    r.run_id = run_id;
    r.policy = h.name;
    r.phase = "train";
    r.seed = seed;
    r.iteration = m.iteration;
    r.episodes = m.iteration * per;
    r.success_rate = m.success_rate;
    r.episode_return = m.episode_return;
    r.arrivals = m.stats.arrivals;
    r.successes = m.stats.successes;
    r.deadline_violations = m.stats.deadline_violations;
    r.reliability_violations = m.stats.reliability_violations;
    r.lambda = m.lambda_mean;
    r.guidance_validity = m.validity_rate;
    r.policy_loss = m.loss.policy_loss;
    r.value_loss = m.loss.value_loss;
    r.entropy = m.loss.entropy;
    r.feat_loss = m.loss.feat_loss;
    r.act_loss = m.loss.act_loss;
    rows.push_back(std::move(r));
  }
}

namespace {

EnvConfig pinned(const PolicyHandle& h, const EnvConfig& env_cfg) {
  EnvConfig e = env_cfg;
  if (h.trainer) e.obs_scales = ObsScales::from_config(h.trainer->env_config());
  return e;
}

}  // namespace

void evaluate_policy(PolicyHandle& h, const EnvConfig& env_cfg, const std::vector<std::uint64_t>& episode_seeds,
                     const std::string& run_id, std::uint64_t seed, int iteration, std::vector<MetricsRow>& rows) {
  Environment env(pinned(h, env_cfg));
  const int per = h.trainer ? h.trainer->config().episodes_per_iteration : 0;
  for (std::size_t j = 0; j < episode_seeds.size(); ++j) {
    const auto res = run_episode(env, h.policy(), episode_seeds[j]);
    if (res.masked_actions != 0)
      throw InvalidActionError(run_id + ": policy emitted " + std::to_string(res.masked_actions) + " masked actions");
    MetricsRow r;
    r.run_id = run_id;
    r.policy = h.name;
    r.phase = "eval";
    r.seed = seed;
    r.iteration = iteration;
    r.episodes = iteration * per;
    r.episode = static_cast<int>(j);
    r.success_rate = res.stats.success_rate();
    r.episode_return = res.undiscounted_return;
    r.arrivals = res.stats.arrivals;
    r.successes = res.stats.successes;
    r.deadline_violations = res.stats.deadline_violations;
    r.reliability_violations = res.stats.reliability_violations;
    r.decision_s = res.mean_decision_s;
    if (h.ledrl) {
      r.lambda = h.ledrl->ledrl().lambda();
      r.guidance_validity = h.ledrl->engine().stats().validity_rate();
    }
    rows.push_back(std::move(r));
  }
}

RunResult run(const ExperimentConfig& cfg, const std::string& out_dir, std::ostream* log) {
  cfg.validate();
  RunResult res;
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  for (std::uint64_t seed : cfg.seeds) {
    const auto eval_seeds = evaluation_seeds(seed, cfg.eval_episodes);
    for (const auto& name : cfg.policies) {
      const std::string run_id = fmt::format("{}/s{}", name, seed);
      PolicyHandle h;
      try {
        h = make_policy(name, cfg, seed);
        const auto t0 = std::chrono::steady_clock::now();
        train_policy(h, cfg.iterations, run_id, seed, res.rows);
        const int iters = h.trainer ? cfg.iterations : 0;
        evaluate_policy(h, cfg.env, eval_seeds, run_id, seed, iters, res.rows);
        if (log) {
          double sr = 0.0;
          for (int j = 0; j < cfg.eval_episodes; ++j) sr += res.rows[res.rows.size() - 1 - j].success_rate;
          *log << fmt::format("[{}] success {:.2f} % over {} episodes ({:.1f} s)\n", run_id,
                              100.0 * sr / cfg.eval_episodes, cfg.eval_episodes,
                              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count())
               << std::flush;
        }
        if (!out_dir.empty() && h.trainer)
          save_checkpoint(h, (std::filesystem::path(out_dir) / fmt::format("{}-s{}", name, seed)).string());
      } catch (const DivergenceError& e) {
        if (!out_dir.empty() && h.trainer)
          save_checkpoint(h, (std::filesystem::path(out_dir) / fmt::format("{}-s{}.last", name, seed)).string());
        throw std::runtime_error("run " + run_id + " diverged: " + e.what());
      } catch (const std::exception& e) {
        throw std::runtime_error("run " + run_id + " failed: " + e.what());
      }
      if (h.trainer) res.trained[name].push_back(std::move(h));
    }
  }
  res.summaries = summarize(res.rows);
  auto find = [&](const std::string& p) -> const Summary* {
    for (const auto& s : res.summaries)
      if (s.policy == p) return &s;
    return nullptr;
  };
  for (const auto& [a, b] : std::vector<std::pair<std::string, std::string>>{
           {"ledrl", "mappo"}, {"mappo", "random"}, {"ledrl", "random"}}) {
    const Summary* sa = find(a);
    const Summary* sb = find(b);
    if (sa && sb)
      if (auto d = paired_delta(*sa, *sb)) res.deltas.push_back(*d);
  }
  if (!out_dir.empty()) write_csv((std::filesystem::path(out_dir) / "metrics.csv").string(), res.rows);
  return res;
}

// ---------------------------------------------------------------------------

EnvConfig apply_axis(const EnvConfig& base, const std::string& axis, const std::string& value) {
  EnvConfig e = base;
  auto v = [&] {
    try {
      return std::stod(value);
    } catch (const std::exception&) {
      throw ConfigError("axis " + axis + ": bad value '" + value + "'");
    }
  };
  if (axis == "task_size_kb") {
    e.task_size_kb = {v(), v()};
  } else if (axis == "intensity") {
    e.intensity = {v(), v()};
  } else if (axis == "exec_fail") {
    e.sw_fail_rate = {v(), v()};
    e.hw_fail_rate = {v(), v()};
  } else if (axis == "link_fail") {
    e.link_fail_rate = {v(), v()};
  } else if (axis == "topology") {
    e.topology = value;
    e.fixed_topology.reset();
  } else if (axis == "node_count") {
    e.node_count = static_cast<int>(v());
    e.fixed_topology.reset();
  } else {
    throw ConfigError("unknown sweep axis '" + axis + "'");
  }
  e.validate();
  return e;
}

bool ordered_axis(const std::string& axis) {
  return axis == "task_size_kb" || axis == "intensity" || axis == "exec_fail" || axis == "link_fail";
}

std::vector<MonotonicityFlag> monotonicity(const std::vector<Summary>& summaries) {
  std::vector<MonotonicityFlag> out;
  std::vector<std::pair<std::string, std::string>> keys;
  for (const auto& s : summaries)
    if (ordered_axis(s.axis) && std::find(keys.begin(), keys.end(), std::pair(s.axis, s.policy)) == keys.end())
      keys.emplace_back(s.axis, s.policy);
  for (const auto& [axis, policy] : keys) {
    std::vector<const Summary*> pts;
    for (const auto& s : summaries)
      if (s.axis == axis && s.policy == policy) pts.push_back(&s);
    std::sort(pts.begin(), pts.end(),
              [](const Summary* a, const Summary* b) { return std::stod(a->axis_value) < std::stod(b->axis_value); });
    for (std::size_t k = 0; k + 1 < pts.size(); ++k) {
      const double inc = pts[k + 1]->mean - pts[k]->mean;
      if (inc <= 0.0) continue;
      const double pooled =
          std::sqrt(0.5 * (pts[k]->stddev * pts[k]->stddev + pts[k + 1]->stddev * pts[k + 1]->stddev));
      out.push_back({axis, policy, pts[k]->axis_value, pts[k + 1]->axis_value, inc, pooled});
    }
  }
  return out;
}

SweepResult sweep(const ExperimentConfig& cfg, const std::string& out_dir, std::ostream* log,
                  TrainedPolicies* trained) {
  cfg.validate();
  if (cfg.sweep.empty()) throw ConfigError("sweep needs at least one axis");
  TrainedPolicies local;
  TrainedPolicies& base = trained ? *trained : local;
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  auto add = [&](const char* name, const auto& values) {
    if (values.empty()) return;
    std::vector<std::string> s;
    for (const auto& x : values) {
      if constexpr (std::is_same_v<std::decay_t<decltype(x)>, std::string>)
        s.push_back(x);
      else
        s.push_back(num(static_cast<double>(x)));
    }
    axes.emplace_back(name, std::move(s));
  };
  add("task_size_kb", cfg.sweep.task_size_kb);
  add("intensity", cfg.sweep.intensity);
  add("exec_fail", cfg.sweep.exec_fail);
  add("link_fail", cfg.sweep.link_fail);
  add("topology", cfg.sweep.topology);
  add("node_count", cfg.sweep.node_count);

  SweepResult res;
  std::vector<MetricsRow> scratch;
  for (const auto& name : cfg.policies) {
    if (!is_learned(name)) continue;
    auto& v = base[name];
    for (std::size_t k = v.size(); k < cfg.seeds.size(); ++k) {
      v.push_back(make_policy(name, cfg, cfg.seeds[k]));
      train_policy(v.back(), cfg.iterations, fmt::format("{}/s{}", name, cfg.seeds[k]), cfg.seeds[k], scratch);
      if (log) *log << fmt::format("[sweep] trained {}/s{}\n", name, cfg.seeds[k]) << std::flush;
    }
  }
  for (const auto& [axis, values] : axes) {
    for (const auto& value : values) {
      const EnvConfig env = apply_axis(cfg.env, axis, value);
      const bool retrain = env.node_count != cfg.env.node_count;
      for (std::size_t k = 0; k < cfg.seeds.size(); ++k) {
        const std::uint64_t seed = cfg.seeds[k];
        const auto eval_seeds = evaluation_seeds(seed, cfg.eval_episodes);
        for (const auto& name : cfg.policies) {
          const std::string run_id = fmt::format("{}={}/{}/s{}", axis, value, name, seed);
          try {
            const std::size_t first = res.rows.size();
            if (is_learned(name) && !retrain) {
              evaluate_policy(base[name][k], env, eval_seeds, run_id, seed, cfg.iterations, res.rows);
            } else {
              ExperimentConfig c = cfg;
              c.env = env;
              PolicyHandle h = make_policy(name, c, seed);
              train_policy(h, cfg.iterations, run_id, seed, scratch);
              evaluate_policy(h, env, eval_seeds, run_id, seed, h.trainer ? cfg.iterations : 0, res.rows);
            }
            for (std::size_t r = first; r < res.rows.size(); ++r) {
              res.rows[r].axis = axis;
              res.rows[r].axis_value = value;
            }
          } catch (const std::exception& e) {
            throw std::runtime_error("run " + run_id + " failed: " + e.what());
          }
        }
      }
      if (log) *log << fmt::format("[sweep] {}={} done\n", axis, value) << std::flush;
    }
  }
  res.summaries = summarize(res.rows);
  res.increases = monotonicity(res.summaries);
  for (const auto& f : res.increases)
    if (f.increase > f.pooled_sd) res.flags.push_back(f);
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    write_csv((std::filesystem::path(out_dir) / "sweep.csv").string(), res.rows);
    for (const auto& [axis, values] : axes) {
      std::ofstream out(std::filesystem::path(out_dir) / ("sweep_" + axis + ".csv"));
      out << "schema_version,axis,axis_value,policy,seeds,mean_success,std_success,mean_return\n";
      for (const auto& s : res.summaries)
        if (s.axis == axis)
          out << fmt::format("{},{},{},{},{},{},{},{}\n", kCsvSchemaVersion, axis, s.axis_value, s.policy,
                             s.seeds.size(), s.mean, s.stddev, s.mean_return);
    }
  }
  return res;
}

// ---------------------------------------------------------------------------

double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  return v[std::min(v.size() - 1, rank == 0 ? 0 : rank - 1)];
}

LatencyStats measure_latency(PolicyHandle& h, const EnvConfig& env_cfg, int n_steps, std::uint64_t seed) {
  LatencyStats st;
  st.policy = h.name;
  Environment env(pinned(h, env_cfg));
  Policy& pol = h.policy();
  LedrlPolicy* led = h.ledrl ? &h.ledrl->ledrl() : nullptr;
  std::vector<double> samples;
  double total = 0.0, guidance = 0.0;
  const int warmup = 10;
  int steps = 0;
  for (std::uint64_t ep = 0; steps < n_steps + warmup; ++ep) {
    const std::uint64_t s = mix_seed(seed + 0x1a7e0000ULL + ep);
    auto [obs, masks] = env.reset(s);
    Rng rng = Rng::stream(s, "policy");
    pol.begin_episode();
    const int n = env.num_agents();
    while (!env.done() && steps < n_steps + warmup) {
      const bool measured = steps >= warmup;
      int deciders = 0;
      for (const auto& m : masks) deciders += m.idle() ? 0 : 1;
      if (led) led->guidance_latency_into(measured ? &st.guidance_calls_s : nullptr);
      const double g0 = led ? led->guidance_seconds() : 0.0;
      const auto t0 = std::chrono::steady_clock::now();
      auto actions = pol.act(env, obs, masks, rng);
      const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      const double dg = led ? led->guidance_seconds() - g0 : 0.0;
      if (measured && deciders > 0) {
        samples.push_back(dt / deciders);
        total += dt;
        guidance += dg;
        st.decisions += deciders;
      }
      for (int i = 0; i < n; ++i)
        if (!masks[i].valid(actions[i])) throw InvalidActionError(h.name + ": masked action during latency run");
      auto rec = env.step(actions);
      pol.observe(env, rec);
      obs = std::move(rec.next_observations);
      masks = std::move(rec.next_masks);
      ++steps;
    }
  }
  if (led) led->guidance_latency_into(nullptr);
  if (st.decisions > 0) {
    const double d = static_cast<double>(st.decisions);
    st.mean_s = total / d;
    st.guidance_mean_s = guidance / d;
    st.network_mean_s = (total - guidance) / d;
  }
  st.p95_s = percentile(samples, 0.95);
  st.p99_s = percentile(samples, 0.99);
  return st;
}

}  // namespace cecsim

#include "cecsim/guidance.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <sstream>
#include <thread>

#include "cecsim/errors.hpp"
#include "httplib.h"
#include "json.hpp"

namespace cecsim {

void GuidanceConfig::validate() const {
  for (double w : {w_loc, w_type, w_task, w_load})
    if (w < 0.0) throw ConfigError("relevance weights must be >= 0");
  if (std::abs(w_loc + w_type + w_task + w_load - 1.0) > 1e-9)
    throw ConfigError("relevance weights must sum to 1");
  if (top_k < 0) throw ConfigError("top_k must be >= 0");
  if (long_cap < 1 || compact_batch < 1) throw ConfigError("memory capacities must be >= 1");
  if (timeout_ms < 1) throw ConfigError("timeout_ms must be >= 1");
  if (query_stride < 1) throw ConfigError("query_stride must be >= 1");
  if (reflections_per_step < 0) throw ConfigError("reflections_per_step must be >= 0");
}

std::string_view to_string(MemoryKind k) {
  switch (k) {
    case MemoryKind::kTrajectory: return "trajectory";
    case MemoryKind::kSummary: return "summary";
    case MemoryKind::kReflection: return "reflection";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Memory

double relevance(const MemoryItem& m, const MemoryQuery& q, const GuidanceConfig& cfg) {
  double dt = 0.0, dl = 0.0;
  for (std::size_t i = 0; i < q.profile.size(); ++i) dt += std::abs(m.profile[i] - q.profile[i]);
  for (std::size_t i = 0; i < q.load.size(); ++i) dl += std::abs(m.load[i] - q.load[i]);
  const double sim_task = 1.0 - dt / static_cast<double>(q.profile.size());
  const double sim_load = 1.0 - dl / static_cast<double>(q.load.size());
  return cfg.w_loc * (m.node == q.node ? 1.0 : 0.0) + cfg.w_type * (m.type_tag == q.type_tag ? 1.0 : 0.0) +
         cfg.w_task * sim_task + cfg.w_load * sim_load;
}

void Memory::clear() {
  short_.clear();
  long_.clear();
  next_index_ = 0;
}

void Memory::push_long(MemoryItem item) {
  long_.push_back(std::move(item));
  while (long_.size() > cfg_.long_cap) long_.pop_front();
}

void Memory::add_trajectory(MemoryItem item) {
  item.kind = MemoryKind::kTrajectory;
  item.index = next_index_++;
  short_.push_back(std::move(item));
  if (short_.size() > cfg_.short_cap) compact();
}

void Memory::add_reflection(MemoryItem item) {
  item.kind = MemoryKind::kReflection;
  item.index = next_index_++;
  push_long(std::move(item));
}

void Memory::compact() {
  while (short_.size() > cfg_.short_cap) {
    const std::size_t take = std::min(cfg_.compact_batch, short_.size());
    std::map<NodeId, MemoryItem> by_node;
    for (std::size_t i = 0; i < take; ++i) {
      const MemoryItem& it = short_.front();
      auto [pos, fresh] = by_node.try_emplace(it.node);
      MemoryItem& s = pos->second;
      if (fresh) {
        s = MemoryItem{};
        s.kind = MemoryKind::kSummary;
        s.node = it.node;
        s.type_tag = it.type_tag;
        s.count = 0;
        s.reward = 0.0;
      }
      // Running means of the snapshots.
      const double w = 1.0 / static_cast<double>(s.count + 1);
      for (std::size_t k = 0; k < s.profile.size(); ++k) s.profile[k] += w * (it.profile[k] - s.profile[k]);
      for (std::size_t k = 0; k < s.load.size(); ++k) s.load[k] += w * (it.load[k] - s.load[k]);
      s.count += it.count;
      s.reward += it.reward;
      if (it.forwarded) {
        ++s.forward_count;
        s.forward_reward += it.reward;
      } else {
        ++s.local_count;
        s.local_reward += it.reward;
      }
      if (!it.note.empty()) ++s.failures[it.note];
      short_.pop_front();
    }
    for (auto& [node, s] : by_node) {
      s.forwarded = s.forward_count > s.local_count;
      s.note = fmt::format("local_mean={:.3f} forward_mean={:.3f}",
                           s.local_count ? s.local_reward / s.local_count : 0.0,
                           s.forward_count ? s.forward_reward / s.forward_count : 0.0);
      s.index = next_index_++;
      push_long(std::move(s));
    }
  }
}

std::vector<MemoryItem> Memory::retrieve(const MemoryQuery& q, int k) const {
  std::vector<std::pair<double, const MemoryItem*>> scored;
  scored.reserve(size());
  for (const auto* store : {&short_, &long_})
    for (const auto& m : *store) scored.emplace_back(relevance(m, q, cfg_), &m);
  const auto take = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 0)), scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(),
                    [](const auto& a, const auto& b) {
                      if (a.first != b.first) return a.first > b.first;
                      return a.second->index > b.second->index;
                    });
  std::vector<MemoryItem> out;
  for (std::size_t i = 0; i < take; ++i) out.push_back(*scored[i].second);
  return out;
}

// ---------------------------------------------------------------------------
// Prompt rendering

std::string render_prompt(const PromptBundle& b) {
  std::string out;
  out += fmt::format("[S] node={} F={} exec_queue={} buffer_queue={} alpha={} gamma={} slot_s={} mean_cycles={}\n",
                     b.s.node, b.s.compute_hz, b.s.exec_queue, b.s.buffer_queue, b.s.alpha, b.s.gamma,
                     b.s.slot_s, b.s.mean_cycles);
  out += fmt::format("[T] id={} S={} Delta={} D={} elapsed={} Phi={} H={} W={}\n", b.t.id, b.t.size_bits,
                     b.t.intensity, b.t.deadline_s, b.t.elapsed_s, b.t.floor, b.t.hops, b.t.wait);
  for (const auto& n : b.n)
    out += fmt::format("[N] node={} R={} beta={} F={} alpha={} gamma={} load={} buffer={}\n", n.node, n.rate_bps,
                       n.beta, n.compute_hz, n.alpha, n.gamma, n.load, n.buffer);
  for (const auto& c : b.c)
    out += fmt::format("[C] node={} kind={} action={} reward={} count={} note={}\n", c.node, c.kind, c.action,
                       c.reward, c.count, c.note.empty() ? "-" : c.note);
  out += fmt::format("[R] local_wait={} local_exec={} exec_risk={}\n", b.r.local_wait_s, b.r.local_exec_s,
                     b.r.exec_risk);
  for (const auto& r : b.r.neighbors)
    out += fmt::format("[R] node={} trans={} link_risk={} load={}\n", r.node, r.trans_s, r.link_risk, r.load);
  out += fmt::format("Respond with one line: {}\n", kDecisionSchema);
  return out;
}

namespace {

// key=value fields; the note field of context lines takes the rest of the line.
std::map<std::string, std::string> fields_of(const std::string& line) {
  std::map<std::string, std::string> f;
  std::size_t pos = 4;
  while (pos < line.size()) {
    const auto eq = line.find('=', pos);
    if (eq == std::string::npos) break;
    const std::string key = line.substr(pos, eq - pos);
    std::size_t end = key == "note" ? line.size() : line.find(' ', eq + 1);
    if (end == std::string::npos) end = line.size();
    f[key] = line.substr(eq + 1, end - eq - 1);
    pos = end + 1;
  }
  return f;
}

double num(const std::map<std::string, std::string>& f, const char* key) {
  const auto it = f.find(key);
  if (it == f.end()) throw ConfigError(std::string("prompt field missing: ") + key);
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw ConfigError(std::string("bad number for ") + key);
    return v;
  } catch (const std::logic_error&) {
    throw ConfigError(std::string("bad number for ") + key);
  }
}

int inum(const std::map<std::string, std::string>& f, const char* key) {
  return static_cast<int>(num(f, key));
}

}  // namespace

PromptBundle parse_prompt(const std::string& text) {
  PromptBundle b;
  std::istringstream in(text);
  std::string line;
  bool have_s = false, have_t = false, have_r = false;
  while (std::getline(in, line)) {
    if (line.rfind("[S] ", 0) == 0) {
      const auto f = fields_of(line);
      b.s = {inum(f, "node"), num(f, "F"), inum(f, "exec_queue"), inum(f, "buffer_queue"),
             num(f, "alpha"), num(f, "gamma"), num(f, "slot_s"), num(f, "mean_cycles")};
      have_s = true;
    } else if (line.rfind("[T] ", 0) == 0) {
      const auto f = fields_of(line);
      b.t.id = static_cast<std::int64_t>(num(f, "id"));
      b.t.size_bits = num(f, "S");
      b.t.intensity = num(f, "Delta");
      b.t.deadline_s = num(f, "D");
      b.t.elapsed_s = num(f, "elapsed");
      b.t.floor = num(f, "Phi");
      b.t.hops = inum(f, "H");
      b.t.wait = inum(f, "W");
      have_t = true;
    } else if (line.rfind("[N] ", 0) == 0) {
      const auto f = fields_of(line);
      b.n.push_back({inum(f, "node"), num(f, "R"), num(f, "beta"), num(f, "F"), num(f, "alpha"),
                     num(f, "gamma"), inum(f, "load"), inum(f, "buffer")});
    } else if (line.rfind("[C] ", 0) == 0) {
      const auto f = fields_of(line);
      ContextLine c;
      c.node = inum(f, "node");
      c.kind = f.count("kind") ? f.at("kind") : "";
      c.action = f.count("action") ? f.at("action") : "";
      c.reward = num(f, "reward");
      c.count = inum(f, "count");
      c.note = f.count("note") && f.at("note") != "-" ? f.at("note") : "";
      b.c.push_back(c);
    } else if (line.rfind("[R] local_wait=", 0) == 0) {
      const auto f = fields_of(line);
      b.r.local_wait_s = num(f, "local_wait");
      b.r.local_exec_s = num(f, "local_exec");
      b.r.exec_risk = num(f, "exec_risk");
      have_r = true;
    } else if (line.rfind("[R] ", 0) == 0) {
      const auto f = fields_of(line);
      b.r.neighbors.push_back({inum(f, "node"), num(f, "trans"), num(f, "link_risk"), inum(f, "load")});
    }
  }
  if (!have_s || !have_t || !have_r) throw ConfigError("prompt lacks a required section");
  b.text = text;
  return b;
}

// ---------------------------------------------------------------------------
// Decisions

std::optional<ParsedDecision> parse_decision(const std::string& raw) {
  std::string s = raw;
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r' || s.back() == ' ')) s.pop_back();
  ParsedDecision d;
  std::string rest;
  if (s.rfind("ACTION=LOCAL TARGET=", 0) == 0) {
    rest = s.substr(20);
  } else if (s.rfind("ACTION=FORWARD TARGET=", 0) == 0) {
    d.forward = true;
    rest = s.substr(22);
  } else {
    return std::nullopt;
  }
  if (rest.empty() || rest.size() > 9 || !std::all_of(rest.begin(), rest.end(), [](char c) { return c >= '0' && c <= '9'; }))
    return std::nullopt;
  d.target = std::stoi(rest);
  return d;
}

int GuidanceDecision::action(NodeId self, int node_count) const {
  if (!valid || !forward) return kLocalAction;
  return forward_action(node_slot(self, target, node_count));
}

int GuidanceDecision::embedding_index(NodeId self, int node_count) const {
  return valid ? action(self, node_count) : node_count;
}

std::vector<ScriptedScore> scripted_scores(const PromptBundle& b) {
  std::vector<ScriptedScore> out;
  const double cycles = b.t.size_bits * b.t.intensity;
  const double budget = b.t.deadline_s - b.t.elapsed_s;
  auto finish = [&](ScriptedScore s) {
    s.score = s.rel * (budget - s.delay_s) / b.t.deadline_s;
    if (s.rel < b.t.floor) s.score -= 1.0;
    return s;
  };
  ScriptedScore local;
  local.node = b.s.node;
  local.delay_s = b.r.local_wait_s + b.r.local_exec_s;
  local.rel = 1.0 - b.r.exec_risk;
  out.push_back(finish(local));
  for (std::size_t i = 0; i < b.n.size(); ++i) {
    const auto& n = b.n[i];
    const NeighborRisk* risk = nullptr;
    for (const auto& r : b.r.neighbors)
      if (r.node == n.node) risk = &r;
    if (!risk) continue;
    const double tc = cycles / n.compute_hz;
    ScriptedScore s;
    s.forward = true;
    s.node = n.node;
    s.delay_s = risk->trans_s + b.s.slot_s + risk->load * (b.s.mean_cycles / n.compute_hz) + tc;
    s.rel = std::exp(-(n.alpha + n.gamma) * tc) * (1.0 - risk->link_risk);
    out.push_back(finish(s));
  }
  return out;
}

namespace {

std::string scripted_reflection(const std::string& diag) {
  std::string cause = "unknown";
  const auto p = diag.find("cause=");
  if (p != std::string::npos) {
    const auto e = diag.find_first_of(" \n", p);
    cause = diag.substr(p + 6, e == std::string::npos ? std::string::npos : e - p - 6);
  }
  const bool forwarded = diag.find("action=FORWARD") != std::string::npos;
  std::string safer = "LOCAL";
  if (cause == "deadline" || cause == "hop_cap") safer = forwarded ? "LOCAL" : "FORWARD";
  return "CAUSE=" + cause + " SAFER=" + safer;
}

}  // namespace

std::string ScriptedProvider::complete(const std::string& prompt, const std::string& schema) {
  {
    std::lock_guard lock(mu_);
    if (noise_prob_ > 0.0 && rng_.bernoulli(noise_prob_)) return "I think node maybe... ACTION=?";
  }
  if (schema == kReflectionSchema) return scripted_reflection(prompt);
  const auto b = parse_prompt(prompt);
  const auto scores = scripted_scores(b);
  const ScriptedScore* best = &scores.front();
  for (const auto& s : scores)
    if (s.score > best->score) best = &s;
  return fmt::format("ACTION={} TARGET={}", best->forward ? "FORWARD" : "LOCAL", best->node);
}

std::string DelayedProvider::complete(const std::string& prompt, const std::string& schema) {
  std::this_thread::sleep_for(delay_);
  return inner_->complete(prompt, schema);
}

HttpProvider::HttpProvider(std::string endpoint, int timeout_ms, int retries, std::string replay_log)
    : timeout_ms_(timeout_ms), retries_(retries), replay_log_(std::move(replay_log)) {
  const auto scheme = endpoint.find("://");
  const auto slash = endpoint.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  scheme_host_ = slash == std::string::npos ? endpoint : endpoint.substr(0, slash);
  path_ = slash == std::string::npos ? "/" : endpoint.substr(slash);
  if (scheme_host_.empty()) throw ConfigError("http provider needs an endpoint URL");
}

std::string HttpProvider::complete(const std::string& prompt, const std::string& schema) {
  httplib::Client cli(scheme_host_);
  const auto to = std::chrono::milliseconds(timeout_ms_);
  cli.set_connection_timeout(to);
  cli.set_read_timeout(to);
  cli.set_write_timeout(to);
  const nlohmann::json body{{"prompt", prompt}, {"schema", schema}};
  std::string last_error = "no attempt";
  for (int attempt = 0; attempt <= retries_; ++attempt) {
    auto res = cli.Post(path_, body.dump(), "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (!replay_log_.empty()) {
      std::lock_guard lock(log_mu_);
      std::ofstream log(replay_log_, std::ios::app);
      log << nlohmann::json{{"prompt", prompt}, {"schema", schema}, {"status", res->status}, {"response", res->body}}.dump()
          << "\n";
    }
    if (res->status != 200) {
      last_error = "HTTP status " + std::to_string(res->status);
      continue;
    }
    const auto j = nlohmann::json::parse(res->body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw Error("http provider: response is not a JSON object");
    if (j.contains("text") && j["text"].is_string()) return j["text"].get<std::string>();
    const std::string action = j.value("action", "");
    if (action == "local") {
      // Local decisions name the asking node.
      const auto p = prompt.find("[S] node=");
      const int self = p == std::string::npos ? -1 : std::atoi(prompt.c_str() + p + 9);
      return fmt::format("ACTION=LOCAL TARGET={}", self);
    }
    if (action == "forward" && j.contains("target") && j["target"].is_number_integer())
      return fmt::format("ACTION=FORWARD TARGET={}", j["target"].get<int>());
    return res->body;  // schema check downstream rejects it
  }
  throw Error("http provider: " + last_error);
}

std::shared_ptr<Provider> make_provider(const std::string& kind, const std::string& endpoint,
                                        int timeout_ms, double noise_prob, std::uint64_t seed) {
  if (kind == "scripted") return std::make_shared<ScriptedProvider>(noise_prob, seed);
  if (kind == "http") return std::make_shared<HttpProvider>(endpoint, timeout_ms);
  if (kind == "off") return nullptr;
  throw ConfigError("unknown provider '" + kind + "'");
}

std::optional<std::string> call_with_timeout(const std::shared_ptr<Provider>& p, const std::string& prompt,
                                             const std::string& schema, int timeout_ms, bool* timed_out) {
  if (timed_out) *timed_out = false;
  if (!p) return std::nullopt;
  const auto budget = std::chrono::milliseconds(timeout_ms);
  if (!p->may_block()) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      auto out = p->complete(prompt, schema);
      if (std::chrono::steady_clock::now() - t0 > budget) {
        if (timed_out) *timed_out = true;
        return std::nullopt;
      }
      return out;
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }
  // The worker owns copies of everything it touches, so a late answer after
  // the deadline is simply dropped.
  auto promise = std::make_shared<std::promise<std::optional<std::string>>>();
  auto fut = promise->get_future();
  std::thread([p, prompt, schema, promise] {
    try {
      promise->set_value(p->complete(prompt, schema));
    } catch (...) {
      promise->set_value(std::nullopt);
    }
  }).detach();
  if (fut.wait_for(budget) != std::future_status::ready) {
    if (timed_out) *timed_out = true;
    return std::nullopt;
  }
  return fut.get();
}

// ---------------------------------------------------------------------------
// Engine

GuidanceEngine::GuidanceEngine(GuidanceConfig cfg, std::shared_ptr<Provider> provider, const EnvConfig& env_cfg)
    : cfg_(cfg), provider_(std::move(provider)), env_cfg_(env_cfg),
      scales_(ObsScales::from_config(env_cfg)), memory_(cfg) {
  cfg_.validate();
}

void GuidanceEngine::reset_episode() {
  last_decision_.clear();
  asked_.clear();
}

int GuidanceEngine::type_tag(double size_bits, double intensity) const {
  auto tercile = [](double v, double lo, double hi) {
    if (!(hi > lo)) return 1;
    const double u = (v - lo) / (hi - lo);
    return std::clamp(static_cast<int>(u * 3.0), 0, 2);
  };
  const double kb = size_bits / kBitsPerKB;
  const double delta = intensity / env_cfg_.intensity_scale;
  return 3 * tercile(kb, env_cfg_.task_size_kb.lo, env_cfg_.task_size_kb.hi) +
         tercile(delta, env_cfg_.intensity.lo, env_cfg_.intensity.hi);
}

MemoryQuery GuidanceEngine::query_for(const AgentView& v) const {
  MemoryQuery q;
  q.node = v.node;
  if (v.task) {
    q.type_tag = type_tag(v.task->size_bits, v.task->intensity);
    const double dmax = std::max(env_cfg_.intensity.hi * env_cfg_.intensity_scale, 1e-12);
    q.profile = {std::clamp(v.task->size_bits / scales_.size_max_bits, 0.0, 1.0),
                 std::clamp(v.task->intensity / dmax, 0.0, 1.0),
                 std::clamp((v.task->deadline_s - v.task_elapsed_s) / v.task->deadline_s, 0.0, 1.0)};
  }
  q.load = {std::clamp(v.exec_queue / scales_.queue_norm, 0.0, 1.0),
            std::clamp(v.buffer_queue / scales_.queue_norm, 0.0, 1.0)};
  return q;
}

PromptBundle GuidanceEngine::build_prompt(const AgentView& v) const {
  PromptBundle b;
  const double hz = std::max(v.spec.compute_hz, 1.0);
  b.s = {v.node, v.spec.compute_hz, v.exec_queue, v.buffer_queue, v.spec.sw_fail_rate,
         v.spec.hw_fail_rate, env_cfg_.slot_duration_s, v.mean_cycles};
  if (v.task) {
    const Task& t = *v.task;
    b.t = {t.id, t.size_bits, t.intensity, t.deadline_s, v.task_elapsed_s, t.reliability_floor, t.hops, t.wait_slots};
    b.r.local_exec_s = t.cycles / hz;
  }
  b.r.local_wait_s = v.exec_queue * (v.mean_cycles / hz);
  b.r.exec_risk = 1.0 - std::exp(-(v.spec.sw_fail_rate + v.spec.hw_fail_rate) * b.r.local_exec_s);
  for (const auto& n : v.neighbors) {
    b.n.push_back({n.node, n.rate_bps, n.link_fail_rate, n.compute_hz, n.sw_fail_rate, n.hw_fail_rate,
                   n.exec_queue, n.buffer_queue});
    const double tt = v.task ? v.task->size_bits / n.rate_bps : 0.0;
    b.r.neighbors.push_back({n.node, (n.buffer_queue + 1) * tt, 1.0 - std::exp(-n.link_fail_rate * tt), n.exec_queue});
  }
  for (const auto& m : memory_.retrieve(query_for(v), cfg_.top_k)) {
    ContextLine c;
    c.node = m.node;
    c.kind = std::string(to_string(m.kind));
    c.action = m.forwarded ? fmt::format("FORWARD:{}", m.target) : "LOCAL";
    c.reward = m.reward;
    c.count = m.count;
    c.note = m.note;
    b.c.push_back(c);
  }
  b.text = render_prompt(b);
  return b;
}

GuidanceDecision GuidanceEngine::decide(const PromptBundle& bundle, const ActionMask& mask, int node_count) {
  GuidanceDecision d;
  const auto t0 = std::chrono::steady_clock::now();
  bool timed_out = false;
  const auto raw = call_with_timeout(provider_, bundle.text, kDecisionSchema, cfg_.timeout_ms, &timed_out);
  d.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  d.timed_out = timed_out;
  ++stats_.queries;
  stats_.provider_s += d.elapsed_s;
  if (timed_out) ++stats_.timeouts;
  if (!raw) return d;
  d.raw = *raw;
  const auto parsed = parse_decision(*raw);
  if (!parsed) return d;
  const NodeId self = bundle.s.node;
  if (parsed->forward) {
    if (parsed->target < 0 || parsed->target >= node_count || parsed->target == self) return d;
    if (!mask.valid(forward_action(node_slot(self, parsed->target, node_count)))) return d;
  } else if (parsed->target != self || !mask.local()) {
    return d;
  }
  d.forward = parsed->forward;
  d.target = parsed->target;
  d.valid = true;
  ++stats_.valid;
  return d;
}

GuidanceDecision GuidanceEngine::guide(const Environment& env, NodeId agent, const ActionMask& mask) {
  const auto view = env.agent_view(agent);
  const auto bundle = build_prompt(view);
  auto d = decide(bundle, mask, env.num_agents());
  if (view.task) {
    Snapshot s;
    s.query = query_for(view);
    s.risk = bundle.r;
    s.target = agent;
    last_decision_[view.task->id] = s;
    asked_[agent] = view.task->id;
  }
  return d;
}

void GuidanceEngine::on_transition(const TransitionRecord& rec) {
  const int n = static_cast<int>(rec.actions.size());
  // Record what each queried agent actually did with its task.
  for (const auto& [agent, task_id] : asked_) {
    const auto it = last_decision_.find(task_id);
    if (it == last_decision_.end() || agent >= n) continue;
    const int a = rec.actions[agent];
    it->second.forwarded = a != kLocalAction && a != idle_action(n);
    it->second.target = it->second.forwarded ? slot_node(agent, a - 1, n) : agent;
  }
  asked_.clear();
  int reflections = 0;
  for (const auto& r : rec.resolved) {
    const auto it = last_decision_.find(r.task_id);
    if (it == last_decision_.end()) continue;
    const Snapshot& snap = it->second;
    MemoryItem m;
    m.node = snap.query.node;
    m.type_tag = snap.query.type_tag;
    m.profile = snap.query.profile;
    m.load = snap.query.load;
    m.forwarded = snap.forwarded;
    m.target = snap.target;
    m.reward = r.outcome == Outcome::kSuccess ? 1.0 : -1.0;
    m.note = r.outcome == Outcome::kSuccess ? "" : std::string(to_string(r.cause));
    memory_.add_trajectory(m);
    if (rec.reward < 0.0 && r.outcome != Outcome::kSuccess && reflections < cfg_.reflections_per_step) {
      ++reflections;
      std::string diag = fmt::format("DIAG node={} action={} reward={} cause={}\n", m.node,
                                     m.forwarded ? fmt::format("FORWARD:{}", m.target) : "LOCAL", m.reward,
                                     to_string(r.cause));
      diag += fmt::format("[R] local_wait={} local_exec={} exec_risk={}\n", snap.risk.local_wait_s,
                          snap.risk.local_exec_s, snap.risk.exec_risk);
      for (const auto& nr : snap.risk.neighbors)
        diag += fmt::format("[R] node={} trans={} link_risk={} load={}\n", nr.node, nr.trans_s, nr.link_risk, nr.load);
      const auto text = call_with_timeout(provider_, diag, kReflectionSchema, cfg_.timeout_ms);
      if (text && text->rfind("CAUSE=", 0) == 0) {
        MemoryItem refl = m;
        refl.note = *text;
        memory_.add_reflection(refl);
        ++stats_.reflections;
      } else {
        ++stats_.reflection_failures;
      }
    }
    last_decision_.erase(it);
  }
}

}  // namespace cecsim

#pragma once

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "equirl/checkpoint.hpp"
#include "equirl/dqn.hpp"
#include "equirl/sac.hpp"

// Deterministic training runs. Everything an experiment needs is captured in
// a RunConfig that round-trips losslessly through key=value text, and a run
// with the same config writes byte-identical log.csv output. Wall-clock
// timings go to a separate timing.csv so they never perturb the main log.

namespace equirl {

struct RunConfig {
  std::string algo = "dqn";  // dqn | sac | sacfd
  bool equivariant = true;
  std::string task = "pull";  // pull | pick | stack
  int n = 4;
  std::uint64_t seed = 0;
  std::size_t total_steps = 10000;
  std::size_t train_every = 1;
  std::size_t eval_every = 500;
  std::size_t eval_episodes = 20;
  std::size_t demo_episodes = 100;
  std::size_t buffer_capacity = 100000;
  int aug_factor = 4;
  int image_size = 64;
  std::size_t num_envs = 5;
  double lr = 1e-4;
  double gamma = 0.95;
  std::size_t batch = 32;
  double tau = 1e-2;
  double per_alpha = 0.6;
  double per_beta0 = 0.4;
  double expert_bonus = 1.0;
  double eps_start = 1.0;
  double eps_end = 0.05;
  double eps_frac = 0.2;
  double alpha_init = 1e-2;
  double target_entropy = -5.0;
  std::vector<std::size_t> dqn_widths;      // empty = built-in widths
  std::vector<std::size_t> actor_widths;    // empty = built-in widths
  std::vector<std::size_t> encoder_widths;  // empty = built-in widths
  std::vector<std::size_t> head_widths;     // empty = built-in widths
  std::string run_name;  // empty = composed from algo/task/variant/seed
};

// Baseline hyperparameters per algorithm; file values override afterwards.
inline RunConfig config_defaults(const std::string& algo) {
  RunConfig c;
  c.algo = algo;
  if (algo == "dqn") return c;
  if (algo == "sac" || algo == "sacfd") {
    c.lr = 1e-3;
    c.gamma = 0.99;
    c.batch = 64;
    c.demo_episodes = algo == "sacfd" ? 20 : 0;
    return c;
  }
  fail("unknown algorithm '", algo, "'");
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fmt_widths(const std::vector<std::size_t>& w) {
  std::string out;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(w[i]);
  }
  return out;
}

inline std::vector<std::size_t> parse_widths(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  if (v.empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      long long x = std::stoll(item, &pos);
      require(pos == item.size() && x > 0, "");
      out.push_back(static_cast<std::size_t>(x));
    } catch (...) {
      fail("bad value for '", key, "': ", v);
    }
  }
  return out;
}

template <typename F>
auto parse_or_fail(const std::string& key, const std::string& v, F f) {
  try {
    std::size_t pos = 0;
    auto out = f(v, &pos);
    require(pos == v.size(), "");
    return out;
  } catch (...) {
    fail("bad value for '", key, "': ", v);
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  fail("bad value for '", key, "': ", v, " (want true or false)");
}

}  // namespace detail

inline std::string format_config(const RunConfig& c) {
  std::ostringstream os;
  os << "algo=" << c.algo << '\n';
  os << "equivariant=" << (c.equivariant ? "true" : "false") << '\n';
  os << "task=" << c.task << '\n';
  os << "n=" << c.n << '\n';
  os << "seed=" << c.seed << '\n';
  os << "total_steps=" << c.total_steps << '\n';
  os << "train_every=" << c.train_every << '\n';
  os << "eval_every=" << c.eval_every << '\n';
  os << "eval_episodes=" << c.eval_episodes << '\n';
  os << "demo_episodes=" << c.demo_episodes << '\n';
  os << "buffer_capacity=" << c.buffer_capacity << '\n';
  os << "aug_factor=" << c.aug_factor << '\n';
  os << "image_size=" << c.image_size << '\n';
  os << "num_envs=" << c.num_envs << '\n';
  os << "lr=" << detail::fmt_double(c.lr) << '\n';
  os << "gamma=" << detail::fmt_double(c.gamma) << '\n';
  os << "batch=" << c.batch << '\n';
  os << "tau=" << detail::fmt_double(c.tau) << '\n';
  os << "per_alpha=" << detail::fmt_double(c.per_alpha) << '\n';
  os << "per_beta0=" << detail::fmt_double(c.per_beta0) << '\n';
  os << "expert_bonus=" << detail::fmt_double(c.expert_bonus) << '\n';
  os << "eps_start=" << detail::fmt_double(c.eps_start) << '\n';
  os << "eps_end=" << detail::fmt_double(c.eps_end) << '\n';
  os << "eps_frac=" << detail::fmt_double(c.eps_frac) << '\n';
  os << "alpha_init=" << detail::fmt_double(c.alpha_init) << '\n';
  os << "target_entropy=" << detail::fmt_double(c.target_entropy) << '\n';
  os << "dqn_widths=" << detail::fmt_widths(c.dqn_widths) << '\n';
  os << "actor_widths=" << detail::fmt_widths(c.actor_widths) << '\n';
  os << "encoder_widths=" << detail::fmt_widths(c.encoder_widths) << '\n';
  os << "head_widths=" << detail::fmt_widths(c.head_widths) << '\n';
  os << "run_name=" << c.run_name << '\n';
  return os.str();
}

// Applies one key=value line onto c; unknown keys and bad values are errors
// that name the offending field.
inline void apply_config_line(RunConfig& c, const std::string& line) {
  auto eq = line.find('=');
  require(eq != std::string::npos, "config line without '=': ", line);
  std::string key = line.substr(0, eq);
  std::string v = line.substr(eq + 1);
  auto to_u64 = [&](const std::string& s) {
    return detail::parse_or_fail(key, s, [](const std::string& x, std::size_t* p) {
      return std::stoull(x, p);
    });
  };
  auto to_int = [&](const std::string& s) {
    return detail::parse_or_fail(key, s,
                                 [](const std::string& x, std::size_t* p) { return std::stoi(x, p); });
  };
  auto to_dbl = [&](const std::string& s) {
    return detail::parse_or_fail(key, s,
                                 [](const std::string& x, std::size_t* p) { return std::stod(x, p); });
  };
  if (key == "algo") {
    require(v == "dqn" || v == "sac" || v == "sacfd", "bad value for 'algo': ", v);
    c.algo = v;
  } else if (key == "equivariant")
    c.equivariant = detail::parse_bool(key, v);
  else if (key == "task") {
    require(v == "pull" || v == "pick" || v == "stack", "bad value for 'task': ", v);
    c.task = v;
  } else if (key == "n")
    c.n = to_int(v);
  else if (key == "seed")
    c.seed = to_u64(v);
  else if (key == "total_steps")
    c.total_steps = to_u64(v);
  else if (key == "train_every")
    c.train_every = to_u64(v);
  else if (key == "eval_every")
    c.eval_every = to_u64(v);
  else if (key == "eval_episodes")
    c.eval_episodes = to_u64(v);
  else if (key == "demo_episodes")
    c.demo_episodes = to_u64(v);
  else if (key == "buffer_capacity")
    c.buffer_capacity = to_u64(v);
  else if (key == "aug_factor")
    c.aug_factor = to_int(v);
  else if (key == "image_size")
    c.image_size = to_int(v);
  else if (key == "num_envs")
    c.num_envs = to_u64(v);
  else if (key == "lr")
    c.lr = to_dbl(v);
  else if (key == "gamma")
    c.gamma = to_dbl(v);
  else if (key == "batch")
    c.batch = to_u64(v);
  else if (key == "tau")
    c.tau = to_dbl(v);
  else if (key == "per_alpha")
    c.per_alpha = to_dbl(v);
  else if (key == "per_beta0")
    c.per_beta0 = to_dbl(v);
  else if (key == "expert_bonus")
    c.expert_bonus = to_dbl(v);
  else if (key == "eps_start")
    c.eps_start = to_dbl(v);
  else if (key == "eps_end")
    c.eps_end = to_dbl(v);
  else if (key == "eps_frac")
    c.eps_frac = to_dbl(v);
  else if (key == "alpha_init")
    c.alpha_init = to_dbl(v);
  else if (key == "target_entropy")
    c.target_entropy = to_dbl(v);
  else if (key == "dqn_widths")
    c.dqn_widths = detail::parse_widths(key, v);
  else if (key == "actor_widths")
    c.actor_widths = detail::parse_widths(key, v);
  else if (key == "encoder_widths")
    c.encoder_widths = detail::parse_widths(key, v);
  else if (key == "head_widths")
    c.head_widths = detail::parse_widths(key, v);
  else if (key == "run_name")
    c.run_name = v;
  else
    fail("unknown config field '", key, "'");
}

inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty() || line[0] == '#') continue;
    apply_config_line(base, line);
  }
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot open config file ", path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

inline std::string run_root() {
  const char* env = std::getenv("EQUIRL_RUN_ROOT");
  return env && *env ? env : "runs";
}

struct EvalPoint {
  std::size_t step = 0;
  double return_mean = 0;
  double return_stderr = 0;
  double success_rate = 0;
};

struct RunResult {
  std::vector<EvalPoint> curve;
  std::string dir;
};

namespace detail {

// The three agent flavors behind one facade so the loop reads linearly.
struct AnyAgent {
  bool discrete = false;
  DqnAgent<double> dqn;
  SacAgent<double> sac;
};

inline AnyAgent make_agent(const RunConfig& cfg, Rng& rng) {
  AnyAgent ag;
  if (cfg.algo == "dqn") {
    ag.discrete = true;
    DqnConfig d;
    d.lr = cfg.lr;
    d.gamma = cfg.gamma;
    d.batch = cfg.batch;
    d.tau = cfg.tau;
    d.eps_start = cfg.eps_start;
    d.eps_end = cfg.eps_end;
    d.eps_frac = cfg.eps_frac;
    ag.dqn = make_dqn_agent<double>(cfg.equivariant, cfg.n, rng, d, cfg.dqn_widths);
  } else {
    SacConfig s;
    s.lr = cfg.lr;
    s.gamma = cfg.gamma;
    s.batch = cfg.batch;
    s.tau = cfg.tau;
    s.alpha_init = cfg.alpha_init;
    s.target_entropy = cfg.target_entropy;
    SacWidths ew;
    PlainSacWidths pw;
    if (!cfg.actor_widths.empty()) ew.actor = pw.actor = cfg.actor_widths;
    if (!cfg.encoder_widths.empty()) ew.encoder = pw.encoder = cfg.encoder_widths;
    if (!cfg.head_widths.empty()) ew.head = pw.head = cfg.head_widths;
    ag.sac = make_sac_agent<double>(cfg.equivariant, cfg.n, rng, s, cfg.algo == "sacfd", ew, pw);
  }
  return ag;
}

inline Action greedy_action(AnyAgent& ag, const FeatureMap<double>& obs) {
  if (ag.discrete) return discrete_action_from_index(dqn_greedy_index(ag.dqn.q_map(obs)));
  return ag.sac.greedy(obs);
}

}  // namespace detail

// Greedy rollout statistics over freshly seeded episodes. The sim's sparse
// reward makes the episode return a success indicator.
inline EvalPoint evaluate_policy(detail::AnyAgent& ag, Task task, const RunConfig& cfg,
                                 std::size_t at_step, std::uint64_t seed_base) {
  EvalPoint p;
  p.step = at_step;
  std::vector<double> returns;
  for (std::size_t k = 0; k < cfg.eval_episodes; ++k) {
    WorldState s = reset(task, seed_base + k);
    double ret = 0;
    for (;;) {
      auto obs = render(s, cfg.n, cfg.image_size);
      auto res = step(s, detail::greedy_action(ag, obs));
      ret += res.reward;
      s = res.state;
      if (res.done) break;
    }
    returns.push_back(ret);
  }
  double mean = 0;
  for (double r : returns) mean += r;
  mean /= static_cast<double>(returns.size());
  double var = 0;
  for (double r : returns) var += (r - mean) * (r - mean);
  if (returns.size() > 1) var /= static_cast<double>(returns.size() - 1);
  p.return_mean = mean;
  p.return_stderr = std::sqrt(var / static_cast<double>(returns.size()));
  std::size_t succ = 0;
  for (double r : returns)
    if (r > 0.5) ++succ;
  p.success_rate = static_cast<double>(succ) / static_cast<double>(returns.size());
  return p;
}

// One full training run; writes config.cfg, log.csv, timing.csv and
// final.ckpt into its run directory and returns the evaluation curve.
inline RunResult train_run(const RunConfig& cfg) {
  require(cfg.num_envs >= 1, "num_envs must be >= 1");
  require(cfg.train_every >= 1, "train_every must be >= 1");
  require(cfg.eval_every >= 1, "eval_every must be >= 1");
  Task task = task_from_name(cfg.task);
  bool discrete = cfg.algo == "dqn";

  std::string name = cfg.run_name;
  if (name.empty())
    name = cfg.algo + "_" + cfg.task + (cfg.equivariant ? "_equi" : "_plain") + "_s" +
           std::to_string(cfg.seed);
  std::filesystem::path dir = std::filesystem::path(run_root()) / name;
  std::filesystem::create_directories(dir);
  {
    std::ofstream cf(dir / "config.cfg");
    cf << format_config(cfg);
  }

  Rng rng(cfg.seed);
  detail::AnyAgent ag = detail::make_agent(cfg, rng);
  ReplayBuffer<double> buf(cfg.buffer_capacity, cfg.aug_factor,
                           discrete ? AngleMode::quarter : AngleMode::continuous, cfg.per_alpha,
                           cfg.expert_bonus, cfg.seed ^ 0x9e3779b97f4a7c15ull);

  // demonstration preload
  for (std::size_t e = 0; e < cfg.demo_episodes; ++e) {
    auto ep = run_expert_episode(task, cfg.seed * 1000003ull + 31ull + e, discrete);
    std::vector<std::shared_ptr<const FeatureMap<double>>> maps;
    for (const auto& st : ep.states)
      maps.push_back(
          std::make_shared<FeatureMap<double>>(render(st, cfg.n, cfg.image_size)));
    for (std::size_t t = 0; t < ep.actions.size(); ++t) {
      Transition<double> tr;
      tr.obs = maps[t];
      tr.next_obs = maps[t + 1];
      tr.action = ep.actions[t];
      if (discrete) tr.action_index = discrete_action_index(ep.actions[t]);
      tr.reward = ep.rewards[t];
      tr.done = ep.dones[t];
      tr.is_expert = true;
      buf.add(std::move(tr));
    }
  }

  // round-robin training envs
  std::uint64_t episode_counter = 0;
  auto fresh_env = [&]() {
    return reset(task, cfg.seed * 7777777ull + 100000ull + episode_counter++);
  };
  std::vector<WorldState> envs;
  std::vector<std::shared_ptr<const FeatureMap<double>>> obs;
  for (std::size_t i = 0; i < cfg.num_envs; ++i) {
    envs.push_back(fresh_env());
    obs.push_back(std::make_shared<FeatureMap<double>>(render(envs[i], cfg.n, cfg.image_size)));
  }

  auto t0 = std::chrono::steady_clock::now();
  std::ofstream log(dir / "log.csv");
  std::ofstream timing(dir / "timing.csv");
  log << "step,return_mean,return_stderr,success_rate\n";
  timing << "step,seconds\n";
  RunResult result;
  result.dir = dir.string();

  auto emit_eval = [&](std::size_t at_step) {
    auto p = evaluate_policy(ag, task, cfg, at_step,
                             cfg.seed * 4242421ull + 900000ull + at_step * 17ull);
    result.curve.push_back(p);
    char row[160];
    std::snprintf(row, sizeof row, "%zu,%.17g,%.17g,%.17g\n", p.step, p.return_mean,
                  p.return_stderr, p.success_rate);
    log << row;
    log.flush();
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    timing << at_step << ',' << detail::fmt_double(secs) << '\n';
    timing.flush();
  };

  emit_eval(0);
  for (std::size_t gstep = 1; gstep <= cfg.total_steps; ++gstep) {
    std::size_t i = (gstep - 1) % cfg.num_envs;
    Action a;
    Transition<double> tr;
    if (discrete) {
      auto q = ag.dqn.q_map(*obs[i]);
      double eps = epsilon_at(gstep - 1, cfg.total_steps, ag.dqn.cfg);
      int idx = dqn_select_action(q, eps, rng);
      a = discrete_action_from_index(idx);
      tr.action_index = idx;
    } else {
      a = ag.sac.sample(*obs[i], rng);
    }
    auto res = step(envs[i], a);
    tr.obs = obs[i];
    tr.action = a;
    tr.reward = res.reward;
    tr.done = res.done;
    tr.is_expert = false;
    if (res.done) {
      // the stored next observation is the terminal frame; the env restarts
      tr.next_obs = std::make_shared<FeatureMap<double>>(render(res.state, cfg.n, cfg.image_size));
      envs[i] = fresh_env();
      obs[i] = std::make_shared<FeatureMap<double>>(render(envs[i], cfg.n, cfg.image_size));
    } else {
      envs[i] = res.state;
      obs[i] = std::make_shared<FeatureMap<double>>(render(envs[i], cfg.n, cfg.image_size));
      tr.next_obs = obs[i];
    }
    buf.add(std::move(tr));

    if (gstep % cfg.train_every == 0 && buf.size() >= cfg.batch) {
      double beta = cfg.per_beta0 + (1.0 - cfg.per_beta0) * static_cast<double>(gstep) /
                                        static_cast<double>(cfg.total_steps);
      if (discrete)
        dqn_update(ag.dqn, buf, beta);
      else
        sac_update(ag.sac, buf, beta, rng);
    }
    if (gstep % cfg.eval_every == 0) emit_eval(gstep);
  }

  Checkpoint ck;
  if (discrete) {
    ag.dqn.online.save(ck, "online");
    ag.dqn.target.save(ck, "target");
  } else {
    ag.sac.model.actor.save(ck, "actor");
    ag.sac.model.encoder.save(ck, "encoder");
    ag.sac.model.q1.save(ck, "q1");
    ag.sac.model.q2.save(ck, "q2");
    ck.put("log_alpha", ag.sac.log_alpha.value());
  }
  ck.save((dir / "final.ckpt").string());
  return result;
}

}  // namespace equirl

#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "model.hpp"

namespace ressformer {

// Usage and configuration problems; the CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainConfig {
  long steps = 5000;
  long batch_size = 32;
  double lr_peak = 3e-4;
  long warmup_steps = 200;
  long total_steps = 10000;  // cosine horizon
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double grad_clip_norm = 1.0;
  long early_stop_patience = 10;
  long eval_every = 100;
  double time_budget_s = 0;  // 0 = unlimited

  void validate() const {
    auto req = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError("config: " + msg);
    };
    req(steps >= 0, "steps must be >= 0");
    req(batch_size >= 1, "batch_size must be >= 1");
    req(lr_peak > 0, "lr_peak must be positive");
    req(warmup_steps >= 0, "warmup_steps must be >= 0");
    req(total_steps >= 1 && warmup_steps <= total_steps,
        "need 0 <= warmup_steps <= total_steps");
    req(weight_decay >= 0, "weight_decay must be >= 0");
    req(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "betas must be in [0, 1)");
    req(adam_eps > 0, "adam_eps must be positive");
    req(grad_clip_norm > 0, "grad_clip_norm must be positive");
    req(early_stop_patience >= 1, "early_stop_patience must be >= 1");
    req(eval_every >= 1, "eval_every must be >= 1");
    req(time_budget_s >= 0, "time_budget_s must be >= 0");
  }
};

enum class TaskKind { copy, shuffled_cls, char_lm, distractor_qa };

inline std::string task_name(TaskKind k) {
  switch (k) {
    case TaskKind::copy: return "copy";
    case TaskKind::shuffled_cls: return "shuffled_cls";
    case TaskKind::char_lm: return "char_lm";
    case TaskKind::distractor_qa: return "distractor_qa";
  }
  return "?";
}

inline TaskKind task_from_name(const std::string& s) {
  if (s == "copy") return TaskKind::copy;
  if (s == "shuffled_cls") return TaskKind::shuffled_cls;
  if (s == "char_lm") return TaskKind::char_lm;
  if (s == "distractor_qa") return TaskKind::distractor_qa;
  throw ConfigError("unknown task '" + s +
                    "' (expected copy, shuffled_cls, char_lm, or distractor_qa)");
}

struct TaskSpec {
  TaskKind kind = TaskKind::copy;
  long seq_len = 32;     // values copied / context slots / window length / bag size
  long task_vocab = 16;  // value alphabet for copy and shuffled_cls
  double noise = 0.25;   // distractor fill ratio for distractor_qa
  long n_train = 2048;
  long n_dev = 256;
  long n_test = 256;
  std::string corpus = "data/corpus.txt";

  void validate() const {
    auto req = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError("config: " + msg);
    };
    req(seq_len >= 1, "seq_len must be >= 1");
    req(task_vocab >= 2, "task_vocab must be >= 2");
    req(noise >= 0 && noise <= 1, "noise must be in [0, 1]");
    req(n_train >= 1 && n_dev >= 1 && n_test >= 1, "split sizes must be >= 1");
  }
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  TaskSpec task;
  uint64_t seed = 1;

  void validate() const {
    try {
      model.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    train.validate();
    task.validate();
  }
};

namespace detail {
inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline long to_long(const std::string& key, const std::string& v) {
  try {
    size_t pos;
    long out = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (...) {
    throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
  }
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    size_t pos;
    double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (...) {
    throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
}  // namespace detail

inline void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
  using detail::to_bool;
  using detail::to_double;
  using detail::to_long;
  ModelConfig& m = cfg.model;
  TrainConfig& t = cfg.train;
  TaskSpec& k = cfg.task;
  if (key == "preset") {
    try {
      apply_preset(m, value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  } else if (key == "d_model") m.d_model = to_long(key, value);
  else if (key == "n_heads") m.n_heads = to_long(key, value);
  else if (key == "K") m.K = to_long(key, value);
  else if (key == "k_top") m.k_top = to_long(key, value);
  else if (key == "m") m.m = to_long(key, value);
  else if (key == "E") m.E = to_long(key, value);
  else if (key == "e") m.e = to_long(key, value);
  else if (key == "phi") {
    try {
      m.phi = phi_from_name(value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  } else if (key == "lambda_struct") m.lambda_struct = to_double(key, value);
  else if (key == "lambda_bias") m.lambda_bias = to_double(key, value);
  else if (key == "load_balance_coeff") m.load_balance_coeff = to_double(key, value);
  else if (key == "dropout_rate") m.dropout_rate = to_double(key, value);
  else if (key == "router_temp") m.router_temp = to_double(key, value);
  else if (key == "max_len") m.max_len = to_long(key, value);
  else if (key == "disable_r2mu") m.disable_r2mu = to_bool(key, value);
  else if (key == "disable_asam") m.disable_asam = to_bool(key, value);
  else if (key == "disable_soes") m.disable_soes = to_bool(key, value);
  else if (key == "steps") t.steps = to_long(key, value);
  else if (key == "batch_size") t.batch_size = to_long(key, value);
  else if (key == "lr_peak") t.lr_peak = to_double(key, value);
  else if (key == "warmup_steps") t.warmup_steps = to_long(key, value);
  else if (key == "total_steps") t.total_steps = to_long(key, value);
  else if (key == "weight_decay") t.weight_decay = to_double(key, value);
  else if (key == "beta1") t.beta1 = to_double(key, value);
  else if (key == "beta2") t.beta2 = to_double(key, value);
  else if (key == "adam_eps") t.adam_eps = to_double(key, value);
  else if (key == "grad_clip_norm") t.grad_clip_norm = to_double(key, value);
  else if (key == "early_stop_patience") t.early_stop_patience = to_long(key, value);
  else if (key == "eval_every") t.eval_every = to_long(key, value);
  else if (key == "time_budget_s") t.time_budget_s = to_double(key, value);
  else if (key == "task") k.kind = task_from_name(value);
  else if (key == "seq_len") k.seq_len = to_long(key, value);
  else if (key == "task_vocab") k.task_vocab = to_long(key, value);
  else if (key == "noise") k.noise = to_double(key, value);
  else if (key == "n_train") k.n_train = to_long(key, value);
  else if (key == "n_dev") k.n_dev = to_long(key, value);
  else if (key == "n_test") k.n_test = to_long(key, value);
  else if (key == "corpus") k.corpus = value;
  else if (key == "seed") cfg.seed = (uint64_t)to_long(key, value);
  else throw ConfigError("unknown config key '" + key + "'");
}

inline void parse_config_text(RunConfig& cfg, const std::string& text,
                              const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = detail::trim(line);
    if (s.empty() || s[0] == '#') continue;
    size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value', got '" +
                        s + "'");
    apply_config_kv(cfg, detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)));
  }
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  parse_config_text(cfg, ss.str(), path);
}

// Fully resolved key = value text; feeding it back reproduces the run.
inline std::string serialize_config(const RunConfig& cfg) {
  using detail::fmt_double;
  std::map<std::string, std::string> kv;
  const ModelConfig& m = cfg.model;
  kv["d_model"] = std::to_string(m.d_model);
  kv["n_heads"] = std::to_string(m.n_heads);
  kv["K"] = std::to_string(m.K);
  kv["k_top"] = std::to_string(m.k_top);
  kv["m"] = std::to_string(m.m);
  kv["E"] = std::to_string(m.E);
  kv["e"] = std::to_string(m.e);
  kv["phi"] = phi_name(m.phi);
  kv["lambda_struct"] = fmt_double(m.lambda_struct);
  kv["lambda_bias"] = fmt_double(m.lambda_bias);
  kv["load_balance_coeff"] = fmt_double(m.load_balance_coeff);
  kv["dropout_rate"] = fmt_double(m.dropout_rate);
  kv["router_temp"] = fmt_double(m.router_temp);
  kv["max_len"] = std::to_string(m.max_len);
  kv["disable_r2mu"] = m.disable_r2mu ? "true" : "false";
  kv["disable_asam"] = m.disable_asam ? "true" : "false";
  kv["disable_soes"] = m.disable_soes ? "true" : "false";
  const TrainConfig& t = cfg.train;
  kv["steps"] = std::to_string(t.steps);
  kv["batch_size"] = std::to_string(t.batch_size);
  kv["lr_peak"] = fmt_double(t.lr_peak);
  kv["warmup_steps"] = std::to_string(t.warmup_steps);
  kv["total_steps"] = std::to_string(t.total_steps);
  kv["weight_decay"] = fmt_double(t.weight_decay);
  kv["beta1"] = fmt_double(t.beta1);
  kv["beta2"] = fmt_double(t.beta2);
  kv["adam_eps"] = fmt_double(t.adam_eps);
  kv["grad_clip_norm"] = fmt_double(t.grad_clip_norm);
  kv["early_stop_patience"] = std::to_string(t.early_stop_patience);
  kv["eval_every"] = std::to_string(t.eval_every);
  kv["time_budget_s"] = fmt_double(t.time_budget_s);
  const TaskSpec& k = cfg.task;
  kv["task"] = task_name(k.kind);
  kv["seq_len"] = std::to_string(k.seq_len);
  kv["task_vocab"] = std::to_string(k.task_vocab);
  kv["noise"] = fmt_double(k.noise);
  kv["n_train"] = std::to_string(k.n_train);
  kv["n_dev"] = std::to_string(k.n_dev);
  kv["n_test"] = std::to_string(k.n_test);
  kv["corpus"] = k.corpus;
  kv["seed"] = std::to_string(cfg.seed);
  std::string out;
  for (const auto& [key, value] : kv) out += key + " = " + value + "\n";
  return out;
}

inline RunConfig parse_config_string(const std::string& text) {
  RunConfig cfg;
  parse_config_text(cfg, text, "<embedded>");
  return cfg;
}

}  // namespace ressformer

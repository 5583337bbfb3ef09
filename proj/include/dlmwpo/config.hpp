#pragma once

// Flat key=value run configuration. Every key is registered with a default;
// unknown keys are rejected so typos fail loudly. The resolved snapshot is
// canonical (sorted keys) and hashable for reproducibility records.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "adam.hpp"
#include "common.hpp"
#include "model.hpp"
#include "sampler.hpp"
#include "vocab.hpp"

namespace dlmwpo {

namespace detail {

struct KeyDef {
  const char* name;
  const char* def;
  const char* kind;  // int, u64, real, flag, word
};

// Hyperparameter names follow the conventional trainer vocabulary
// (num_generations, p_mask_prompt, ...) so configs read like the usual
// fine-tuning recipes.
inline const std::vector<KeyDef>& config_keys() {
  static const std::vector<KeyDef> keys = {
      {"task", "countdown", "word"},
      {"seed", "42", "u64"},
      {"vocab_size", "0", "int"},  // 0 derives from the task vocabulary
      {"d_model", "64", "int"},
      {"n_layers", "2", "int"},
      {"n_heads", "4", "int"},
      {"max_seq_len", "64", "int"},
      {"init_std", "0.02", "real"},
      {"learning_rate", "0.0003", "real"},
      {"adam_beta1", "0.9", "real"},
      {"adam_beta2", "0.99", "real"},
      {"adam_eps", "1e-8", "real"},
      {"weight_decay", "0.1", "real"},
      {"max_grad_norm", "0.2", "real"},
      {"pretrain_steps", "600", "int"},
      {"batch_size", "16", "int"},
      {"plateau_window", "100", "int"},
      {"plateau_tol", "0.0001", "real"},
      {"global_steps", "250", "int"},
      {"num_generations", "6", "int"},
      {"num_prompts_per_step", "2", "int"},
      {"num_iterations", "8", "int"},
      {"max_completion_length", "32", "int"},
      {"max_prompt_length", "16", "int"},
      {"block_length", "16", "int"},
      {"diffusion_steps", "16", "int"},
      {"temperature", "1.0", "real"},
      {"remasking", "low_confidence", "word"},
      {"p_mask_prompt", "0.15", "real"},
      {"lambda", "1.0", "real"},
      {"beta", "0.0", "real"},
      {"epsilon", "0.5", "real"},
      {"length_normalize", "false", "flag"},
      {"advantage_shift", "false", "flag"},
      {"mixture_unnormalized", "false", "flag"},
      {"likelihood_mode", "masked_prompt", "word"},
      {"elbo_draws", "4", "int"},
      {"elbo_weighted", "true", "flag"},
      {"t_floor", "0.001", "real"},
      {"rollback_retries", "3", "int"},
      {"eval_prompts", "256", "int"},
      {"gen_count", "512", "int"},
  };
  return keys;
}

inline const KeyDef* find_key(const std::string& name) {
  for (const KeyDef& k : config_keys())
    if (name == k.name) return &k;
  return nullptr;
}

}  // namespace detail

class Config {
 public:
  Config() {
    for (const auto& k : detail::config_keys()) values_[k.name] = k.def;
  }

  static Config from_file(const std::string& path, const std::vector<std::string>& overrides = {}) {
    std::ifstream f(path);
    if (!f) throw config_error("cannot open " + path);
    Config cfg;
    std::string line;
    long lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      std::size_t b = line.find_first_not_of(" \t\r");
      if (b == std::string::npos) continue;
      std::size_t e = line.find_last_not_of(" \t\r");
      cfg.set_pair(line.substr(b, e - b + 1), path + ":" + std::to_string(lineno));
    }
    for (const std::string& ov : overrides) cfg.set_pair(ov, "override");
    cfg.validate();
    return cfg;
  }

  static Config from_overrides(const std::vector<std::string>& overrides) {
    Config cfg;
    for (const std::string& ov : overrides) cfg.set_pair(ov, "override");
    cfg.validate();
    return cfg;
  }

  void set(const std::string& key, const std::string& value) {
    if (!detail::find_key(key)) throw config_error("unknown key " + key);
    values_[key] = value;
  }

  const std::string& word(const std::string& key) const { return raw(key); }

  long long integer(const std::string& key) const {
    return parse_ll(raw(key), key);
  }

  std::uint64_t u64(const std::string& key) const {
    const std::string& s = raw(key);
    try {
      std::size_t used = 0;
      std::uint64_t v = std::stoull(s, &used);
      if (used != s.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw config_error("key " + key + " wants an unsigned integer, got '" + s + "'");
    }
  }

  double real(const std::string& key) const {
    const std::string& s = raw(key);
    try {
      std::size_t used = 0;
      double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw config_error("key " + key + " wants a number, got '" + s + "'");
    }
  }

  bool flag(const std::string& key) const {
    const std::string& s = raw(key);
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw config_error("key " + key + " wants true/false, got '" + s + "'");
  }

  // Full cross-field validation; called by the factory functions, repeatable.
  void validate() const {
    for (const auto& [k, v] : values_) {
      const detail::KeyDef* def = detail::find_key(k);
      if (!def) throw config_error("unknown key " + k);
      std::string kind = def->kind;
      if (kind == "int") (void)integer(k);
      if (kind == "u64") (void)u64(k);
      if (kind == "real") (void)real(k);
      if (kind == "flag") (void)flag(k);
    }
    const std::string& task = word("task");
    if (task != "countdown" && task != "sudoku" && task != "arithmetic")
      throw config_error("task must be countdown, sudoku, or arithmetic");
    const std::string& rm = word("remasking");
    if (rm != "low_confidence" && rm != "random")
      throw config_error("remasking must be low_confidence or random");
    const std::string& lm = word("likelihood_mode");
    if (lm != "masked_prompt" && lm != "elbo")
      throw config_error("likelihood_mode must be masked_prompt or elbo");
    if (integer("num_generations") < 2) throw config_error("num_generations must be >= 2");
    if (integer("num_iterations") < 1) throw config_error("num_iterations must be >= 1");
    if (integer("num_prompts_per_step") < 1)
      throw config_error("num_prompts_per_step must be >= 1");
    if (integer("max_prompt_length") + integer("max_completion_length") > integer("max_seq_len"))
      throw config_error("max_prompt_length + max_completion_length exceeds max_seq_len");
    if (!(real("lambda") >= 0.0 && real("beta") >= 0.0 && real("lambda") + real("beta") > 0.0))
      throw config_error("lambda and beta must be nonnegative with positive sum");
    if (!(real("epsilon") > 0.0)) throw config_error("epsilon must be positive");
    if (!(real("temperature") >= 0.0)) throw config_error("temperature must be nonnegative");
    if (!(real("t_floor") > 0.0 && real("t_floor") < 1.0))
      throw config_error("t_floor must be in (0, 1)");
    if (!(real("p_mask_prompt") >= 0.0 && real("p_mask_prompt") < 1.0))
      throw config_error("p_mask_prompt must be in [0, 1)");
    (void)sample_config();  // delegates block/step divisibility checks
    (void)model_config();
  }

  DenoiserConfig model_config() const {
    DenoiserConfig mc;
    long long v = integer("vocab_size");
    mc.vocab = v == 0 ? task_vocab().size() : static_cast<int>(v);
    mc.d_model = static_cast<int>(integer("d_model"));
    mc.n_layers = static_cast<int>(integer("n_layers"));
    mc.n_heads = static_cast<int>(integer("n_heads"));
    mc.max_seq_len = static_cast<int>(integer("max_seq_len"));
    mc.init_std = real("init_std");
    mc.validate();
    return mc;
  }

  SampleConfig sample_config() const {
    SampleConfig sc;
    sc.gen_length = static_cast<int>(integer("max_completion_length"));
    sc.diffusion_steps = static_cast<int>(integer("diffusion_steps"));
    sc.block_length = static_cast<int>(integer("block_length"));
    sc.temperature = real("temperature");
    sc.remasking = word("remasking") == "random" ? Remasking::kRandom : Remasking::kLowConfidence;
    sc.lambda = real("lambda");
    sc.beta = real("beta");
    sc.mixture_unnormalized = flag("mixture_unnormalized");
    sc.validate();
    return sc;
  }

  AdamConfig adam_config() const {
    AdamConfig ac;
    ac.lr = real("learning_rate");
    ac.beta1 = real("adam_beta1");
    ac.beta2 = real("adam_beta2");
    ac.eps = real("adam_eps");
    ac.weight_decay = real("weight_decay");
    ac.max_grad_norm = real("max_grad_norm");
    return ac;
  }

  // Canonical snapshot: every registered key, sorted, one per line.
  std::string resolved_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << "=" << v << "\n";
    return os.str();
  }

  std::uint64_t hash() const { return fnv1a(resolved_text()); }

 private:
  const std::string& raw(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw config_error("unknown key " + key);
    return it->second;
  }

  static long long parse_ll(const std::string& s, const std::string& key) {
    try {
      std::size_t used = 0;
      long long v = std::stoll(s, &used);
      if (used != s.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw config_error("key " + key + " wants an integer, got '" + s + "'");
    }
  }

  void set_pair(const std::string& stmt, const std::string& where) {
    std::size_t eq = stmt.find('=');
    if (eq == std::string::npos || eq == 0)
      throw config_error("expected key=value at " + where + ", got '" + stmt + "'");
    std::string key = stmt.substr(0, eq), value = stmt.substr(eq + 1);
    auto strip = [](std::string& s) {
      std::size_t b = s.find_first_not_of(" \t");
      std::size_t e = s.find_last_not_of(" \t");
      s = b == std::string::npos ? "" : s.substr(b, e - b + 1);
    };
    strip(key);
    strip(value);
    set(key, value);
  }

  std::map<std::string, std::string> values_;  // ordered, snapshot is sorted
};

}  // namespace dlmwpo

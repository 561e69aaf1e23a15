#pragma once

// Run configuration: a sectioned key = value text format mirroring the model
// configuration, plus data and output settings. Sections organize the file
// for humans; keys are globally unique, so flag overrides address them by
// bare name.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "bmoe/errors.hpp"
#include "bmoe/model.hpp"
#include "bmoe/tasks.hpp"

namespace bmoe {

struct RunConfig {
  ModelConfig model;
  std::string task = "copy";  // copy | reverse | sort | arith | mixture
  int train_samples = 512;
  int eval_samples = 256;
  std::string out_dir = "out";
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline long long parse_int(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key " + key + " needs an integer, got '" + value + "'");
  }
}

inline double parse_real(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key " + key + " needs a number, got '" + value + "'");
  }
}

}  // namespace detail

// Parses `[section]` headers, `key = value` lines, blank lines, and `#`/`;`
// comments. Later assignments win. Section names are accepted and discarded.
inline std::map<std::string, std::string> parse_config_text(
    const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigError("line " + std::to_string(line_no) +
                          ": unterminated section header");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) +
                        ": expected key = value, got '" + t + "'");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    if (key.empty())
      throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    kv[key] = value;
  }
  return kv;
}

inline std::map<std::string, std::string> parse_config_file(
    const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_config_text(buf.str());
}

// Applies one key to a RunConfig. Unknown keys are errors so typos fail loud.
inline void apply_config_key(RunConfig& cfg, const std::string& key,
                             const std::string& value) {
  using detail::parse_int;
  using detail::parse_real;
  if (key == "vocab") cfg.model.vocab = static_cast<int>(parse_int(key, value));
  else if (key == "d_model") cfg.model.d_model = static_cast<int>(parse_int(key, value));
  else if (key == "d_ff") cfg.model.d_ff = static_cast<int>(parse_int(key, value));
  else if (key == "n_blocks") cfg.model.n_blocks = static_cast<int>(parse_int(key, value));
  else if (key == "n_heads") cfg.model.n_heads = static_cast<int>(parse_int(key, value));
  else if (key == "n_experts") cfg.model.n_experts = static_cast<int>(parse_int(key, value));
  else if (key == "top_k") cfg.model.top_k = static_cast<int>(parse_int(key, value));
  else if (key == "depth_in") cfg.model.depth_in = static_cast<int>(parse_int(key, value));
  else if (key == "depth_out") cfg.model.depth_out = static_cast<int>(parse_int(key, value));
  else if (key == "variant") cfg.model.variant = variant_from_name(value);
  else if (key == "lambda_balance") cfg.model.lambda_balance = parse_real(key, value);
  else if (key == "lr") cfg.model.lr = parse_real(key, value);
  else if (key == "beta1") cfg.model.beta1 = parse_real(key, value);
  else if (key == "beta2") cfg.model.beta2 = parse_real(key, value);
  else if (key == "weight_decay") cfg.model.weight_decay = parse_real(key, value);
  else if (key == "batch") cfg.model.batch = static_cast<int>(parse_int(key, value));
  else if (key == "epochs") cfg.model.epochs = static_cast<int>(parse_int(key, value));
  else if (key == "seq_len") cfg.model.seq_len = static_cast<int>(parse_int(key, value));
  else if (key == "seed") cfg.model.seed = static_cast<uint64_t>(parse_int(key, value));
  else if (key == "task") cfg.task = value;
  else if (key == "train_samples") cfg.train_samples = static_cast<int>(parse_int(key, value));
  else if (key == "eval_samples") cfg.eval_samples = static_cast<int>(parse_int(key, value));
  else if (key == "out_dir") cfg.out_dir = value;
  else throw ConfigError("unknown config key '" + key + "'");
}

inline void apply_config_map(RunConfig& cfg,
                             const std::map<std::string, std::string>& kv) {
  for (const auto& [key, value] : kv) apply_config_key(cfg, key, value);
}

inline void validate_task_name(const std::string& task) {
  if (task != "mixture") task_from_name(task);  // throws on unknown names
}

// The fully resolved configuration as stable key order text, used for config
// fingerprints and for echoing into reports.
inline std::vector<std::pair<std::string, std::string>> config_items(
    const RunConfig& cfg) {
  const auto num = [](double v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
  };
  return {
      {"vocab", std::to_string(cfg.model.vocab)},
      {"d_model", std::to_string(cfg.model.d_model)},
      {"d_ff", std::to_string(cfg.model.d_ff)},
      {"n_blocks", std::to_string(cfg.model.n_blocks)},
      {"n_heads", std::to_string(cfg.model.n_heads)},
      {"n_experts", std::to_string(cfg.model.n_experts)},
      {"top_k", std::to_string(cfg.model.top_k)},
      {"depth_in", std::to_string(cfg.model.depth_in)},
      {"depth_out", std::to_string(cfg.model.depth_out)},
      {"variant", variant_name(cfg.model.variant)},
      {"lambda_balance", num(cfg.model.lambda_balance)},
      {"lr", num(cfg.model.lr)},
      {"beta1", num(cfg.model.beta1)},
      {"beta2", num(cfg.model.beta2)},
      {"weight_decay", num(cfg.model.weight_decay)},
      {"batch", std::to_string(cfg.model.batch)},
      {"epochs", std::to_string(cfg.model.epochs)},
      {"seq_len", std::to_string(cfg.model.seq_len)},
      {"seed", std::to_string(cfg.model.seed)},
      {"task", cfg.task},
      {"train_samples", std::to_string(cfg.train_samples)},
      {"eval_samples", std::to_string(cfg.eval_samples)},
      {"out_dir", cfg.out_dir},
  };
}

inline std::string config_fingerprint_text(const RunConfig& cfg) {
  std::ostringstream ss;
  for (const auto& [k, v] : config_items(cfg)) ss << k << "=" << v << "\n";
  return ss.str();
}

}  // namespace bmoe

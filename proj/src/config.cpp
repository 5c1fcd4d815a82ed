#include "tbub/config.h"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "tbub/error.h"

namespace tbub {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const char* expected) {
  throw Error(ErrorKind::kArgument, "config " + key + " = '" + value + "': expected " + expected);
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) bad(key, v, "a non-negative integer");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) bad(key, v, "a non-negative integer");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) bad(key, v, "a number");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad(key, v, "true or false");
}

std::vector<std::size_t> to_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  if (trim(v).empty() || trim(v) == "none") return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_size(key, trim(item)));
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(const std::vector<std::size_t>& v) {
  if (v.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

RunConfig::RunConfig() { model.budget = 0; }

KeyValues parse_key_values(std::string_view text) {
  KeyValues out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || trim(line.substr(0, eq)).empty())
      throw Error(ErrorKind::kFormat, "config line " + std::to_string(line_no) + ": expected key = value");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

std::pair<std::string, std::string> split_assignment(std::string_view s) {
  const auto eq = s.find('=');
  if (eq == std::string_view::npos || trim(s.substr(0, eq)).empty())
    throw Error(ErrorKind::kArgument, "expected key=value, got '" + std::string(s) + "'");
  return {trim(s.substr(0, eq)), trim(s.substr(eq + 1))};
}

void apply_setting(RunConfig& c, const std::string& key, const std::string& v) {
  ModelConfig& m = c.model;
  TrainConfig& t = c.train;
  if (key == "seed") {
    m.seed = t.seed = to_u64(key, v);
  } else if (key == "model.n_layers") {
    m.n_layers = to_size(key, v);
  } else if (key == "model.n_heads") {
    m.n_heads = to_size(key, v);
  } else if (key == "model.d_model") {
    m.d_model = to_size(key, v);
  } else if (key == "model.block_size") {
    m.block_size = to_size(key, v);
  } else if (key == "model.budget") {
    m.budget = to_size(key, v);
  } else if (key == "model.fork_layers") {
    m.fork_layers = to_list(key, v);
  } else if (key == "model.variant") {
    try {
      m.variant = parse_variant(v);
    } catch (const Error&) {
      bad(key, v, "ours, baseline or copy_k");
    }
  } else if (key == "model.copy_k") {
    m.copy_k = to_size(key, v);
  } else if (key == "model.vocab_size") {
    m.vocab_size = to_size(key, v);
  } else if (key == "model.rope_base") {
    m.rope_base = to_double(key, v);
  } else if (key == "model.seed") {
    m.seed = to_u64(key, v);
  } else if (key == "train.max_lr") {
    t.max_lr = to_double(key, v);
  } else if (key == "train.warmup_frac") {
    t.warmup_frac = to_double(key, v);
  } else if (key == "train.weight_decay") {
    t.weight_decay = to_double(key, v);
  } else if (key == "train.beta1") {
    t.beta1 = to_double(key, v);
  } else if (key == "train.beta2") {
    t.beta2 = to_double(key, v);
  } else if (key == "train.adam_eps") {
    t.adam_eps = to_double(key, v);
  } else if (key == "train.grad_clip") {
    t.grad_clip = to_double(key, v);
  } else if (key == "train.batch_size") {
    t.batch_size = to_size(key, v);
  } else if (key == "train.accum_steps") {
    t.accum_steps = to_size(key, v);
  } else if (key == "train.total_steps") {
    t.total_steps = to_size(key, v);
  } else if (key == "train.eval_interval") {
    t.eval_interval = to_size(key, v);
  } else if (key == "train.eval_batches") {
    t.eval_batches = to_size(key, v);
  } else if (key == "train.seed") {
    t.seed = to_u64(key, v);
  } else if (key == "train.log_timing") {
    t.log_timing = to_bool(key, v);
  } else if (key == "inference.budget") {
    try {
      c.budget_mode = parse_budget_mode(v);
    } catch (const Error&) {
      bad(key, v, "fixed or dynamic");
    }
  } else if (key == "data.train") {
    c.train_data = v;
  } else if (key == "data.val") {
    c.val_data = v;
  } else if (key == "run.out_dir") {
    c.out_dir = v;
  } else {
    throw Error(ErrorKind::kArgument, "unknown config key '" + key + "'");
  }
}

RunConfig resolve_run_config(const std::optional<std::filesystem::path>& file, const KeyValues& overrides) {
  RunConfig c;
  if (file) {
    std::ifstream in(*file, std::ios::binary);
    if (!in) throw Error(ErrorKind::kIo, "cannot read config " + file->string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
      for (const auto& [k, v] : parse_key_values(ss.str())) apply_setting(c, k, v);
    } catch (const Error& e) {
      throw Error(e.kind(), file->string() + ": " + e.what());
    }
  }
  for (const auto& [k, v] : overrides) apply_setting(c, k, v);
  if (c.model.budget == 0) {
    c.model.budget = c.model.variant == Variant::kOurs ? 2 * c.model.block_size : c.model.implied_budget();
  }
  c.model.validate();
  c.train.validate();
  return c;
}

std::string to_text(const RunConfig& c) {
  const ModelConfig& m = c.model;
  const TrainConfig& t = c.train;
  const std::map<std::string, std::string> kv = {
      {"model.n_layers", std::to_string(m.n_layers)},
      {"model.n_heads", std::to_string(m.n_heads)},
      {"model.d_model", std::to_string(m.d_model)},
      {"model.block_size", std::to_string(m.block_size)},
      {"model.budget", std::to_string(m.budget)},
      {"model.fork_layers", join(m.fork_layers)},
      {"model.variant", std::string(to_string(m.variant))},
      {"model.copy_k", std::to_string(m.copy_k)},
      {"model.vocab_size", std::to_string(m.vocab_size)},
      {"model.rope_base", fmt(m.rope_base)},
      {"model.seed", std::to_string(m.seed)},
      {"train.max_lr", fmt(t.max_lr)},
      {"train.warmup_frac", fmt(t.warmup_frac)},
      {"train.weight_decay", fmt(t.weight_decay)},
      {"train.beta1", fmt(t.beta1)},
      {"train.beta2", fmt(t.beta2)},
      {"train.adam_eps", fmt(t.adam_eps)},
      {"train.grad_clip", fmt(t.grad_clip)},
      {"train.batch_size", std::to_string(t.batch_size)},
      {"train.accum_steps", std::to_string(t.accum_steps)},
      {"train.total_steps", std::to_string(t.total_steps)},
      {"train.eval_interval", std::to_string(t.eval_interval)},
      {"train.eval_batches", std::to_string(t.eval_batches)},
      {"train.seed", std::to_string(t.seed)},
      {"train.log_timing", t.log_timing ? "true" : "false"},
      {"inference.budget", std::string(to_string(c.budget_mode))},
      {"data.train", c.train_data},
      {"data.val", c.val_data},
      {"run.out_dir", c.out_dir},
  };
  std::string s;
  for (const auto& [k, v] : kv) s += k + " = " + v + "\n";
  return s;
}

nlohmann::json to_json(const RunConfig& c) {
  return {{"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"inference", {{"budget", std::string(to_string(c.budget_mode))}}},
          {"data", {{"train", c.train_data}, {"val", c.val_data}}},
          {"run", {{"out_dir", c.out_dir}}}};
}

}  // namespace tbub

// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a key-value file plus command-line overrides.
// Precedence is flags > file > defaults, and every key remembers where its
// value came from so errors can name it. The effective configuration is
// written next to each run's artifacts; feeding it back reproduces the run.
//
// Randomness: the root `seed` is split into named substreams ("init",
// "data.train", "data.eval", "training"). The synthetic task signatures come
// from `data.task_seed` so that a pretraining run and a fine-tuning run with
// different root seeds still see the same pair of tasks.
#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spu/data.hpp"
#include "spu/kvfile.hpp"
#include "spu/pruner/recipe.hpp"
#include "spu/random.hpp"
#include "spu/trainer/fine_tune.hpp"

namespace spu::cli {

inline constexpr const char* kCommands[] = {"init", "prune", "plan", "train", "report"};

struct ArchSpec {
  std::string name = "toy";  // toy | mobilenet_v2
  std::size_t image = 32;
  int classes = 10;
  double width = 1.0;                                   // mobilenet_v2
  std::vector<std::size_t> widths{8, 16, 16, 24, 24, 32};  // toy
  std::vector<int> strides{1, 2, 1, 2, 1, 1};             // toy
  bool calibrate = true;                                // GroupNorm statistics from training images
};

struct DatasetSpec {
  std::string source = "synthetic";  // synthetic | cifar10
  std::filesystem::path dir;         // cifar10: directory with the binary batches
  std::size_t image_size = 32;
  int classes = 10;                  // synthetic only
  std::size_t train = 100;           // 0 = everything (cifar10)
  std::size_t eval = 300;
  std::string task = "a";            // synthetic: a | b
  std::uint64_t task_seed = 0;
  double shift = 0.5;
  double noise = 1.0;
  double phase_jitter = 0.5;
  double amp_jitter = 0.2;
  ImageNorm norm;
};

struct RunConfig {
  std::string command;
  std::filesystem::path model;  // input checkpoint
  std::filesystem::path plan;   // optional plan file for train
  std::filesystem::path out = "run";
  std::uint64_t seed = 0;
  ArchSpec arch;
  DatasetSpec data;
  TrainConfig train;
  PruneRecipe prune;
  std::vector<std::filesystem::path> report_runs;
  std::filesystem::path report_prune;

  // Where each key's value came from: "default", a file path, or "--flag".
  std::map<std::string, std::string> origin;

  std::string origin_of(const std::string& key) const {
    auto it = origin.find(key);
    return it == origin.end() ? "default" : it->second;
  }

  KeyValueFile to_kv() const;
  static RunConfig from_kv(const KeyValueFile& kv);
};

/// Error tied to one configuration key; `origin` says where the value came from.
class RunError : public std::runtime_error {
 public:
  RunError(std::string key, std::string origin, const std::string& msg)
      : std::runtime_error(msg), key_(std::move(key)), origin_(std::move(origin)) {}
  const std::string& key() const noexcept { return key_; }
  const std::string& origin() const noexcept { return origin_; }

 private:
  std::string key_, origin_;
};

namespace detail {

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (const auto& x : v) {
    if (!s.empty()) s += ',';
    if constexpr (std::is_arithmetic_v<T>)
      s += KeyValueFile::format_number(x);
    else
      s += std::string(x);
  }
  return s;
}

inline std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::string tok;
  std::istringstream is(s);
  while (std::getline(is, tok, ','))
    if (!tok.empty()) out.push_back(tok);
  return out;
}

template <typename T>
std::vector<T> numbers(const std::string& key, const std::string& s) {
  std::vector<T> out;
  for (const auto& tok : split(s)) out.push_back(KeyValueFile::parse_number<T>(key, tok));
  return out;
}

inline bool boolean(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError(key, "expected true or false, got '" + s + "'");
}

template <std::size_t N>
std::array<double, N> fixed_numbers(const std::string& key, const std::string& s) {
  const auto v = numbers<double>(key, s);
  if (v.size() != N) throw ConfigError(key, "expected " + std::to_string(N) + " comma-separated values");
  std::array<double, N> a{};
  std::copy(v.begin(), v.end(), a.begin());
  return a;
}

}  // namespace detail

inline KeyValueFile RunConfig::to_kv() const {
  using detail::join;
  KeyValueFile f;
  f.set("command", command);
  f.set("model", model.string());
  f.set("plan", plan.string());
  f.set("out", out.string());
  f.set("seed", seed);

  f.set("arch", arch.name);
  f.set("arch.image", arch.image);
  f.set("arch.classes", arch.classes);
  f.set("arch.width", arch.width);
  f.set("arch.widths", join(arch.widths));
  f.set("arch.strides", join(arch.strides));
  f.set("arch.calibrate", arch.calibrate ? "true" : "false");

  f.set("data.source", data.source);
  f.set("data.dir", data.dir.string());
  f.set("data.image_size", data.image_size);
  f.set("data.classes", data.classes);
  f.set("data.train", data.train);
  f.set("data.eval", data.eval);
  f.set("data.task", data.task);
  f.set("data.task_seed", data.task_seed);
  f.set("data.shift", data.shift);
  f.set("data.noise", data.noise);
  f.set("data.phase_jitter", data.phase_jitter);
  f.set("data.amp_jitter", data.amp_jitter);
  f.set("data.mean", join(std::vector<double>(data.norm.mean.begin(), data.norm.mean.end())));
  f.set("data.std", join(std::vector<double>(data.norm.std.begin(), data.norm.std.end())));

  const auto& t = train;
  f.set("mode", mode_name(t.mode));
  f.set("epochs", t.epochs);
  f.set("warmup_epochs", t.warmup_epochs);
  f.set("lr_max", t.lr_max);
  f.set("momentum", t.momentum);
  f.set("batch_size", t.batch_size);
  f.set("stage_epochs", join(std::vector<std::int64_t>{t.stage_j, t.stage_k, t.stage_l}));
  f.set("reselect_every_steps", t.reselect_every_steps);
  f.set("ratio", t.ratio);
  f.set("budget_bytes", t.budget);
  f.set("act_prune.block", t.act_prune.block);
  f.set("act_prune.threshold", t.act_prune.threshold);
  f.set("grad_realloc", t.grad_realloc ? "true" : "false");
  f.set("checkpoint_every", t.checkpoint_every);

  f.set("prune.keep_ratio", prune.keep_ratio);
  f.set("prune.global_sparsity", prune.global_sparsity);
  f.set("prune.pattern_set", prune.pattern_set);

  f.set("report.runs", join(report_runs));
  f.set("report.prune", report_prune.string());
  return f;
}

inline RunConfig RunConfig::from_kv(const KeyValueFile& kv) {
  const RunConfig defaults;
  const auto known = defaults.to_kv();
  for (const auto& [k, v] : kv.entries())
    if (!known.has(k)) throw ConfigError(k, "unknown key '" + k + "'");

  RunConfig c;
  auto str = [&](const char* k, const std::string& fb) { return kv.get_or(k, fb); };
  c.command = str("command", "");
  c.model = str("model", "");
  c.plan = str("plan", "");
  c.out = str("out", c.out.string());
  c.seed = kv.get_number_or("seed", c.seed);

  c.arch.name = str("arch", c.arch.name);
  if (c.arch.name != "toy" && c.arch.name != "mobilenet_v2")
    throw ConfigError("arch", "unknown architecture '" + c.arch.name + "' (expected toy or mobilenet_v2)");
  c.arch.image = kv.get_number_or("arch.image", c.arch.image);
  c.arch.classes = kv.get_number_or("arch.classes", c.arch.classes);
  c.arch.width = kv.get_number_or("arch.width", c.arch.width);
  if (kv.has("arch.widths")) c.arch.widths = detail::numbers<std::size_t>("arch.widths", kv.get("arch.widths"));
  if (kv.has("arch.strides")) c.arch.strides = detail::numbers<int>("arch.strides", kv.get("arch.strides"));
  if (kv.has("arch.calibrate")) c.arch.calibrate = detail::boolean("arch.calibrate", kv.get("arch.calibrate"));
  if (c.arch.image < 1) throw ConfigError("arch.image", "arch.image must be >= 1");
  if (c.arch.classes < 2) throw ConfigError("arch.classes", "arch.classes must be >= 2");
  if (!(c.arch.width > 0.0)) throw ConfigError("arch.width", "arch.width must be positive");
  if (c.arch.widths.empty() || c.arch.widths.size() != c.arch.strides.size())
    throw ConfigError("arch.strides", "arch.widths and arch.strides must be non-empty and equally long");

  auto& d = c.data;
  d.source = str("data.source", d.source);
  if (d.source != "synthetic" && d.source != "cifar10")
    throw ConfigError("data.source", "unknown data source '" + d.source + "' (expected synthetic or cifar10)");
  d.dir = str("data.dir", "");
  d.image_size = kv.get_number_or("data.image_size", d.image_size);
  d.classes = kv.get_number_or("data.classes", d.classes);
  d.train = kv.get_number_or("data.train", d.train);
  d.eval = kv.get_number_or("data.eval", d.eval);
  d.task = str("data.task", d.task);
  if (d.task != "a" && d.task != "b") throw ConfigError("data.task", "data.task must be a or b");
  d.task_seed = kv.get_number_or("data.task_seed", d.task_seed);
  d.shift = kv.get_number_or("data.shift", d.shift);
  d.noise = kv.get_number_or("data.noise", d.noise);
  d.phase_jitter = kv.get_number_or("data.phase_jitter", d.phase_jitter);
  d.amp_jitter = kv.get_number_or("data.amp_jitter", d.amp_jitter);
  if (kv.has("data.mean")) d.norm.mean = detail::fixed_numbers<3>("data.mean", kv.get("data.mean"));
  if (kv.has("data.std")) d.norm.std = detail::fixed_numbers<3>("data.std", kv.get("data.std"));
  for (double s : d.norm.std)
    if (!(s > 0.0)) throw ConfigError("data.std", "data.std entries must be positive");
  if (d.image_size < 1) throw ConfigError("data.image_size", "data.image_size must be >= 1");
  if (d.source == "synthetic") {
    if (d.classes < 2) throw ConfigError("data.classes", "data.classes must be >= 2");
    if (d.train == 0) throw ConfigError("data.train", "synthetic data needs data.train >= 1");
    if (d.eval == 0) throw ConfigError("data.eval", "synthetic data needs data.eval >= 1");
  }

  auto& t = c.train;
  try {
    t.mode = parse_mode(str("mode", mode_name(t.mode)));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("mode", e.what());
  }
  t.epochs = kv.get_number_or("epochs", t.epochs);
  t.warmup_epochs = kv.get_number_or("warmup_epochs", t.warmup_epochs);
  t.lr_max = kv.get_number_or("lr_max", t.lr_max);
  t.momentum = kv.get_number_or("momentum", t.momentum);
  t.batch_size = kv.get_number_or("batch_size", t.batch_size);
  if (kv.has("stage_epochs")) {
    const auto st = detail::numbers<std::int64_t>("stage_epochs", kv.get("stage_epochs"));
    if (st.size() != 3) throw ConfigError("stage_epochs", "stage_epochs expects three values j,k,l");
    t.stage_j = st[0];
    t.stage_k = st[1];
    t.stage_l = st[2];
  }
  t.reselect_every_steps = kv.get_number_or("reselect_every_steps", t.reselect_every_steps);
  t.ratio = kv.get_number_or("ratio", t.ratio);
  t.budget = kv.get_number_or("budget_bytes", t.budget);
  t.act_prune.block = kv.get_number_or("act_prune.block", t.act_prune.block);
  t.act_prune.threshold = kv.get_number_or("act_prune.threshold", t.act_prune.threshold);
  if (kv.has("grad_realloc")) t.grad_realloc = detail::boolean("grad_realloc", kv.get("grad_realloc"));
  t.checkpoint_every = kv.get_number_or("checkpoint_every", t.checkpoint_every);

  // Map TrainConfig validation messages back onto their keys.
  auto check = [](bool ok, const char* key, const std::string& msg) {
    if (!ok) throw ConfigError(key, msg);
  };
  check(t.epochs >= 1, "epochs", "epochs must be >= 1");
  check(t.warmup_epochs >= 0 && t.warmup_epochs < t.epochs, "warmup_epochs", "warmup_epochs must be in [0, epochs)");
  check(t.batch_size >= 1, "batch_size", "batch_size must be >= 1");
  check(t.lr_max >= 0.0, "lr_max", "lr_max must be >= 0");
  check(t.momentum >= 0.0 && t.momentum < 1.0, "momentum", "momentum must be in [0, 1)");
  check(t.reselect_every_steps >= 0, "reselect_every_steps", "reselect_every_steps must be >= 0");
  check(t.ratio > 0.0 && t.ratio <= 1.0, "ratio", "ratio must be in (0, 1]");
  check(t.budget > 0, "budget_bytes", "budget_bytes must be positive");
  check(t.act_prune.block >= 1, "act_prune.block", "act_prune.block must be >= 1");
  check(t.checkpoint_every >= 0, "checkpoint_every", "checkpoint_every must be >= 0");
  if (t.mode == TrainMode::Dynamic)
    check(t.stage_j >= 0 && t.stage_k >= 0 && t.stage_l >= 0 && t.stage_j + t.stage_k + t.stage_l == t.epochs,
          "stage_epochs",
          "stage_epochs " + kv.get_or("stage_epochs", "10,20,20") + " must sum to epochs = " + std::to_string(t.epochs));
  t.seed = substream_seed(c.seed, "training");

  KeyValueFile pk;
  for (const char* k : {"keep_ratio", "global_sparsity", "pattern_set"})
    if (kv.has(std::string("prune.") + k)) pk.set(k, kv.get(std::string("prune.") + k));
  pk.set("seed", c.seed);
  try {
    c.prune = PruneRecipe::from_kv(pk);
  } catch (const ConfigError& e) {
    throw ConfigError("prune." + e.key(), e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError("prune.pattern_set", e.what());
  }

  for (const auto& r : detail::split(str("report.runs", ""))) c.report_runs.emplace_back(r);
  c.report_prune = str("report.prune", "");
  return c;
}

struct Override {
  std::string key, value;
  std::string origin;  // e.g. "--budget-bytes"
};

/// Merges defaults, an optional config file and flag overrides (in that order
/// of increasing precedence) and parses the result. Parse errors come back as
/// RunError naming the key and where its value came from.
inline RunConfig load_run_config(const std::optional<std::filesystem::path>& file,
                                 const std::vector<Override>& flags,
                                 const std::string& command = {}) {
  KeyValueFile merged;
  std::map<std::string, std::string> origin;
  if (file) {
    KeyValueFile f;
    try {
      f = KeyValueFile::load(*file);
    } catch (const ConfigError& e) {
      throw RunError(e.key(), file->string(), e.what());
    } catch (const std::exception& e) {
      throw RunError("config", file->string(), e.what());
    }
    for (const auto& [k, v] : f.entries()) {
      merged.set(k, v);
      origin[k] = file->string();
    }
  }
  for (const auto& o : flags) {
    merged.set(o.key, o.value);
    origin[o.key] = o.origin.empty() ? "--set " + o.key : o.origin;
  }
  if (!command.empty()) merged.set("command", command);
  RunConfig c;
  try {
    c = RunConfig::from_kv(merged);
  } catch (const ConfigError& e) {
    auto it = origin.find(e.key());
    throw RunError(e.key(), it == origin.end() ? "default" : it->second, e.what());
  }
  c.origin = std::move(origin);
  return c;
}

}  // namespace spu::cli

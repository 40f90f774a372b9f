// SPDX-License-Identifier: Apache-2.0
//
// Subcommands. Each writes its artifacts plus the effective run.cfg into `out`.
//   init    model.sptr
//   prune   model.sptr, sparsity.csv, prune.txt
//   plan    plan.txt, budget.csv
//   train   metrics.csv, model.sptr, plan.txt, plan_final.txt, budget.csv,
//           checkpoints/epoch_NNN.sptr
//   report  report.csv (one row per run dir: mode, extra bytes, accuracy)
// With no `model` key the model is built from the arch.* keys.
#pragma once

#include <fstream>
#include <iostream>
#include <sstream>

#include "spu/builders.hpp"
#include "spu/checkpoint.hpp"
#include "spu/cli/run_config.hpp"
#include "spu/planner.hpp"
#include "spu/pruner.hpp"

namespace spu::cli {

namespace detail {

// Runs f; any failure becomes a RunError naming `key`. Budget and sparsity
// failures are pinned to the keys that control them.
template <typename F>
auto guarded(const RunConfig& c, const std::string& key, F&& f) -> decltype(f()) {
  auto fail = [&](const std::string& k, const std::string& msg) -> RunError { return {k, c.origin_of(k), msg}; };
  try {
    return f();
  } catch (const RunError&) {
    throw;
  } catch (const BudgetError& e) {
    throw fail("budget_bytes", e.what());
  } catch (const SparsityError& e) {
    throw fail("prune.global_sparsity", e.what());
  } catch (const ConfigError& e) {
    throw fail(key, e.key().empty() ? std::string(e.what()) : e.key() + ": " + e.what());
  } catch (const std::exception& e) {
    throw fail(key, e.what());
  }
}

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p, const std::string& header) {
  std::ifstream is(p);
  if (!is) throw std::runtime_error("cannot open " + p.string());
  std::string line;
  if (!std::getline(is, line) || line != header)
    throw std::runtime_error(p.string() + ": expected header '" + header + "'");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace detail

struct LoadedData {
  Dataset<float> train, eval;
};

/// Synthetic images are rendered unnormalized; data.mean/data.std apply to CIFAR-10 only.
inline LoadedData load_data(const RunConfig& c) {
  const auto& d = c.data;
  LoadedData out;
  if (d.source == "cifar10") {
    auto splits = detail::guarded(c, "data.dir", [&] {
      if (d.dir.empty()) throw std::invalid_argument("data.source = cifar10 needs data.dir");
      return load_cifar10_binary(d.dir, CifarOptions{d.norm, d.image_size});
    });
    auto trim = [](Dataset<float>& ds, std::size_t n) {
      if (n && n < ds.size()) ds = ds.slice(0, n);
    };
    trim(splits.train, d.train);
    trim(splits.eval, d.eval);
    out.train = std::move(splits.train);
    out.eval = std::move(splits.eval);
    return out;
  }
  const auto a = make_synth_task(d.classes, d.image_size, substream_seed(d.task_seed, "task-a"));
  const auto task = d.task == "b" ? related_task(a, d.shift, substream_seed(d.task_seed, "task-b")) : a;
  const SynthSampling smp{d.noise, d.phase_jitter, d.amp_jitter};
  out.train = synth_dataset(task, d.train, substream_seed(c.seed, "data.train"), smp);
  out.eval = synth_dataset(task, d.eval, substream_seed(c.seed, "data.eval"), smp);
  return out;
}

inline ModelGraph<float> build_model(const RunConfig& c, const Dataset<float>* calib = nullptr) {
  const auto& a = c.arch;
  const auto seed = substream_seed(c.seed, "init");
  auto m = detail::guarded(c, "arch", [&] {
    return a.name == "mobilenet_v2" ? make_mobilenet_v2<float>(a.image, a.classes, seed, a.width)
                                    : make_toy_cnn<float>(a.image, 3, a.widths, a.strides, a.classes, seed);
  });
  if (a.calibrate && calib) {
    if (calib->image_shape() != m.input_shape)
      throw RunError("data.image_size", c.origin_of("data.image_size"),
                     "calibration images are " + shape_str(calib->image_shape()) + ", model input is " +
                         shape_str(m.input_shape) + " (set arch.calibrate = false to skip)");
    std::vector<std::size_t> idx(std::min<std::size_t>(64, calib->size()));
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    calibrate_groupnorm(m, calib->batch(idx), c.train.act_prune);
  }
  return m;
}

/// The input checkpoint, or a freshly built (uncalibrated) model when `model` is empty.
inline ModelGraph<float> input_model(const RunConfig& c) {
  if (c.model.empty()) return build_model(c);
  return detail::guarded(c, "model", [&] { return load_checkpoint(c.model); });
}

inline void prepare_out(const RunConfig& c) {
  detail::guarded(c, "out", [&] {
    std::filesystem::create_directories(c.out);
    c.to_kv().save(c.out / "run.cfg", "spu run config");
  });
}

inline PlanFileInfo plan_info(const RunConfig& c) { return {c.seed, c.train.budget, c.train.ratio}; }

inline int cmd_init(const RunConfig& c, std::ostream& log = std::cout) {
  const auto data = c.arch.calibrate ? std::optional<LoadedData>(load_data(c)) : std::nullopt;
  const auto m = build_model(c, data ? &data->train : nullptr);
  prepare_out(c);
  detail::guarded(c, "out", [&] { save_checkpoint(m, c.out / "model.sptr"); });
  log << "init: " << c.arch.name << ", " << m.size() << " nodes, " << m.param_count() << " parameters -> "
      << (c.out / "model.sptr").string() << '\n';
  return 0;
}

inline int cmd_prune(const RunConfig& c, std::ostream& log = std::cout) {
  const auto m = input_model(c);
  PruneOutcome o;
  const auto pruned = detail::guarded(c, "prune.keep_ratio", [&] { return run_prune_recipe(m, c.prune, &o); });
  prepare_out(c);
  const auto rep = sparsity_report(pruned);
  detail::guarded(c, "out", [&] {
    save_checkpoint(pruned, c.out / "model.sptr");
    std::ofstream os(c.out / "sparsity.csv", std::ios::binary);
    write_sparsity_csv(os, rep);
    KeyValueFile s;
    s.set("params_before", o.channels.params_before);
    s.set("params_after", o.channels.params_after);
    s.set("kept_fraction", o.channels.kept_fraction());
    s.set("removed_fraction", o.channels.removed_fraction());
    s.set("groups", o.channels.groups.size());
    s.set("patterned", o.patterned ? "true" : "false");
    s.set("global_sparsity_target", c.prune.global_sparsity);
    s.set("global_sparsity_achieved", o.patterned ? o.profile.achieved : 0.0);
    s.save(c.out / "prune.txt", "spu prune summary");
  });
  log << "prune: params " << o.channels.params_before << " -> " << o.channels.params_after << ", weight sparsity "
      << rep.sparsity << ", flops " << rep.flops << " -> " << rep.sparse_flops << '\n';
  return 0;
}

inline UpdatePlan mode_plan(const RunConfig& c, const ModelGraph<float>& m) {
  switch (c.train.mode) {
    case TrainMode::None: return empty_plan(m);
    case TrainMode::Last: return classifier_plan(m);
    case TrainMode::Full: return full_plan(m);
    default: return detail::guarded(c, "ratio", [&] { return plan_selection(m, c.train.budget, c.train.ratio); });
  }
}

inline int cmd_plan(const RunConfig& c, std::ostream& log = std::cout) {
  const auto m = input_model(c);
  const auto plan = mode_plan(c, m);
  const auto rep = footprint_report(m, plan);
  prepare_out(c);
  detail::guarded(c, "out", [&] {
    save_plan(c.out / "plan.txt", plan, plan_info(c));
    std::ofstream os(c.out / "budget.csv", std::ios::binary);
    write_budget_csv(os, rep);
  });
  print_budget_table(log, rep, c.train.budget);
  return 0;
}

inline int cmd_train(const RunConfig& c, std::ostream& log = std::cout) {
  const auto data = load_data(c);
  const auto m = input_model(c);
  if (data.train.image_shape() != m.input_shape)
    throw RunError("data.image_size", c.origin_of("data.image_size"),
                   "images are " + shape_str(data.train.image_shape()) + ", model input is " + shape_str(m.input_shape));
  if (data.train.num_classes > m.num_classes)
    throw RunError("data.classes", c.origin_of("data.classes"),
                   "dataset has " + std::to_string(data.train.num_classes) + " classes, model outputs " +
                       std::to_string(m.num_classes));
  auto tc = c.train;
  if (!c.plan.empty() && (tc.mode == TrainMode::Fixed || tc.mode == TrainMode::Dynamic))
    tc.plan = detail::guarded(c, "plan", [&] { return load_plan(c.plan, m); });
  prepare_out(c);
  if (tc.checkpoint_every > 0) tc.checkpoint_dir = c.out / "checkpoints";
  const auto res = detail::guarded(c, "mode", [&] { return fine_tune(m, data.train, data.eval, tc); });
  detail::guarded(c, "out", [&] {
    res.metrics.save_csv(c.out / "metrics.csv");
    save_checkpoint(res.model, c.out / "model.sptr");
    save_plan(c.out / "plan.txt", res.initial_plan, plan_info(c));
    save_plan(c.out / "plan_final.txt", res.final_plan, plan_info(c));
    std::ofstream os(c.out / "budget.csv", std::ios::binary);
    write_budget_csv(os, footprint_report(m, res.initial_plan));
  });
  const auto* ev = res.metrics.last("eval");
  log << "train: mode " << mode_name(tc.mode) << ", eval accuracy " << (ev ? ev->accuracy : 0.0) << ", extra bytes "
      << (ev ? ev->extra_bytes : 0) << ", peak live " << res.peak_live_bytes << '\n';
  return 0;
}

struct ReportRow {
  std::string run;
  std::string mode;
  std::size_t extra_bytes = 0;  // sum of the run's budget.csv total_bytes column
  double accuracy = 0.0;        // last eval row of metrics.csv
};

struct PruneSummary {
  std::size_t params = 0, zeros = 0, flops = 0, sparse_flops = 0;
};

struct Report {
  std::vector<ReportRow> rows;
  std::optional<PruneSummary> prune;
};

/// Reads one run directory. Per-layer budget rows must add up across their
/// columns; the run's extra memory is the sum of the per-layer totals.
inline ReportRow read_run(const std::filesystem::path& dir) {
  ReportRow r;
  r.run = dir.filename().string();
  if (r.run.empty()) r.run = dir.parent_path().filename().string();
  r.mode = KeyValueFile::load(dir / "run.cfg").get("mode");
  const auto budget = detail::read_csv(
      dir / "budget.csv", "node,name,kind,activation_bytes,weight_grad_bytes,bias_grad_bytes,mask_bytes,total_bytes");
  for (const auto& row : budget) {
    if (row.size() != 8) throw std::runtime_error((dir / "budget.csv").string() + ": malformed row");
    std::size_t parts = 0;
    for (int i = 3; i < 7; ++i) parts += KeyValueFile::parse_number<std::size_t>("budget.csv", row[i]);
    const auto total = KeyValueFile::parse_number<std::size_t>("budget.csv", row[7]);
    if (parts != total) throw std::runtime_error((dir / "budget.csv").string() + ": row " + row[0] + " does not add up");
    r.extra_bytes += total;
  }
  const auto metrics = detail::read_csv(dir / "metrics.csv", Metrics::kHeader);
  bool found = false;
  for (const auto& row : metrics)
    if (row.size() == 8 && row[1] == "eval") {
      r.accuracy = KeyValueFile::parse_number<double>("metrics.csv", row[3]);
      found = true;
    }
  if (!found) throw std::runtime_error((dir / "metrics.csv").string() + ": no eval row");
  return r;
}

/// Sums the per-layer rows of a prune run's sparsity.csv and checks them
/// against its total row.
inline PruneSummary read_prune(const std::filesystem::path& dir) {
  const auto rows = detail::read_csv(dir / "sparsity.csv", "layer,kind,params,zeros,sparsity,flops,sparse_flops");
  PruneSummary s, total;
  bool have_total = false;
  for (const auto& row : rows) {
    if (row.size() != 7) throw std::runtime_error((dir / "sparsity.csv").string() + ": malformed row");
    auto& dst = row[0] == "total" ? total : s;
    have_total |= row[0] == "total";
    dst.params += KeyValueFile::parse_number<std::size_t>("sparsity.csv", row[2]);
    dst.zeros += KeyValueFile::parse_number<std::size_t>("sparsity.csv", row[3]);
    dst.flops += KeyValueFile::parse_number<std::size_t>("sparsity.csv", row[5]);
    dst.sparse_flops += KeyValueFile::parse_number<std::size_t>("sparsity.csv", row[6]);
  }
  if (!have_total || s.params != total.params || s.zeros != total.zeros || s.flops != total.flops ||
      s.sparse_flops != total.sparse_flops)
    throw std::runtime_error((dir / "sparsity.csv").string() + ": total row disagrees with the per-layer rows");
  return s;
}

inline Report build_report(const RunConfig& c) {
  Report rep;
  if (c.report_runs.empty())
    throw RunError("report.runs", c.origin_of("report.runs"), "report needs at least one run directory");
  for (const auto& dir : c.report_runs)
    rep.rows.push_back(detail::guarded(c, "report.runs", [&] { return read_run(dir); }));
  if (!c.report_prune.empty()) rep.prune = detail::guarded(c, "report.prune", [&] { return read_prune(c.report_prune); });
  return rep;
}

inline void print_report(std::ostream& os, const Report& rep) {
  char line[160];
  std::snprintf(line, sizeof line, "%-20s %-8s %14s %10s %9s\n", "run", "mode", "extra_bytes", "extra_KB", "accuracy");
  os << line;
  for (const auto& r : rep.rows) {
    std::snprintf(line, sizeof line, "%-20s %-8s %14zu %10.1f %8.2f%%\n", r.run.substr(0, 20).c_str(), r.mode.c_str(),
                  r.extra_bytes, static_cast<double>(r.extra_bytes) / 1024.0, 100.0 * r.accuracy);
    os << line;
  }
  if (rep.prune) {
    const auto& p = *rep.prune;
    os << "pruned model: " << p.params << " weights, " << p.zeros << " zero ("
       << (p.params ? static_cast<double>(p.zeros) / static_cast<double>(p.params) : 0.0) << "), flops " << p.flops
       << " -> " << p.sparse_flops << '\n';
  }
}

inline void write_report_csv(std::ostream& os, const Report& rep) {
  os << "run,mode,extra_bytes,accuracy\n";
  char buf[64];
  for (const auto& r : rep.rows) {
    std::snprintf(buf, sizeof buf, "%.9g", r.accuracy);
    os << r.run << ',' << r.mode << ',' << r.extra_bytes << ',' << buf << '\n';
  }
}

inline int cmd_report(const RunConfig& c, std::ostream& log = std::cout) {
  const auto rep = build_report(c);
  prepare_out(c);
  detail::guarded(c, "out", [&] {
    std::ofstream os(c.out / "report.csv", std::ios::binary);
    write_report_csv(os, rep);
  });
  print_report(log, rep);
  return 0;
}

/// Dispatches on c.command.
inline int run_command(const RunConfig& c, std::ostream& log = std::cout) {
  if (c.command == "init") return cmd_init(c, log);
  if (c.command == "prune") return cmd_prune(c, log);
  if (c.command == "plan") return cmd_plan(c, log);
  if (c.command == "train") return cmd_train(c, log);
  if (c.command == "report") return cmd_report(c, log);
  throw RunError("command", c.origin_of("command"), "unknown command '" + c.command + "'");
}

/// One-line diagnostic for a failed command.
inline std::string describe(const RunError& e) {
  return "error: " + e.key() + " (from " + e.origin() + "): " + e.what();
}

}  // namespace spu::cli

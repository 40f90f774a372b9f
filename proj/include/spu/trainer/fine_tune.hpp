// SPDX-License-Identifier: Apache-2.0
//
// Fine-tuning loop. Modes:
//   none     evaluate only
//   last     classifier only
//   full     every weight layer, every channel
//   fixed    budgeted plan, never redrawn
//   dynamic  budgeted plan; channels redrawn during the middle stage
// Schedule stages are given in epochs and converted to optimizer steps.
#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>

#include "spu/checkpoint.hpp"
#include "spu/data/dataset.hpp"
#include "spu/planner.hpp"
#include "spu/trainer/metrics.hpp"
#include "spu/trainer/optimizer.hpp"

namespace spu {

enum class TrainMode { None, Last, Full, Fixed, Dynamic };

inline const char* mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::None: return "none";
    case TrainMode::Last: return "last";
    case TrainMode::Full: return "full";
    case TrainMode::Fixed: return "fixed";
    case TrainMode::Dynamic: return "dynamic";
  }
  return "unknown";
}

inline TrainMode parse_mode(const std::string& s) {
  for (auto m : {TrainMode::None, TrainMode::Last, TrainMode::Full, TrainMode::Fixed, TrainMode::Dynamic})
    if (s == mode_name(m)) return m;
  throw std::invalid_argument("unknown mode '" + s + "' (expected none, last, full, fixed or dynamic)");
}

struct TrainConfig {
  int epochs = 50;
  int warmup_epochs = 5;
  double lr_max = 0.1;
  double momentum = 0.0;
  std::size_t batch_size = 1;
  TrainMode mode = TrainMode::Dynamic;
  // Stage lengths in epochs (early fixed, dynamic, late fixed); must sum to `epochs`.
  std::int64_t stage_j = 10, stage_k = 20, stage_l = 20;
  std::int64_t reselect_every_steps = 0;  // 0 = once per epoch
  double ratio = 0.2;
  std::size_t budget = 256 * 1024;
  BlockPruneConfig act_prune{2, 0.15};
  std::uint64_t seed = 0;
  bool grad_realloc = false;  // experimental, fixed mode only
  std::optional<UpdatePlan> plan;  // fixed/dynamic: start from this plan instead of plan_selection
  int checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;

  void validate() const {
    require(epochs >= 1, "epochs must be >= 1");
    require(warmup_epochs >= 0 && warmup_epochs < epochs, "warmup_epochs must be in [0, epochs)");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(lr_max >= 0.0, "lr_max must be >= 0");
    require(momentum >= 0.0 && momentum < 1.0, "momentum must be in [0, 1)");
    require(reselect_every_steps >= 0, "reselect_every_steps must be >= 0");
    if (mode == TrainMode::Dynamic)
      require(stage_j >= 0 && stage_k >= 0 && stage_l >= 0 && stage_j + stage_k + stage_l == epochs,
              "stage epochs " + std::to_string(stage_j) + "," + std::to_string(stage_k) + "," +
                  std::to_string(stage_l) + " must sum to epochs = " + std::to_string(epochs));
    if (mode == TrainMode::Fixed || mode == TrainMode::Dynamic) {
      require(ratio > 0.0 && ratio <= 1.0, "ratio must be in (0, 1]");
      require(budget > 0, "budget must be positive");
    }
    if (checkpoint_every > 0) require(!checkpoint_dir.empty(), "checkpoint_every needs a checkpoint directory");
  }
};

/// Linear warm-up to lr_max over the first W epochs, then cosine decay.
inline double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs)
    throw std::out_of_range("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + ")");
  const int W = cfg.warmup_epochs, E = cfg.epochs;
  if (epoch < W) return cfg.lr_max * static_cast<double>(epoch + 1) / static_cast<double>(W);
  return cfg.lr_max * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch - W) / static_cast<double>(E - W)));
}

template <typename T>
int argmax_row(const Tensor<T>& logits, std::size_t row) {
  const std::size_t C = logits.dim(1);
  std::size_t best = 0;
  for (std::size_t c = 1; c < C; ++c)
    if (logits[row * C + c] > logits[row * C + best]) best = c;
  return static_cast<int>(best);
}

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t correct = 0;
};

/// Top-1 accuracy and mean cross-entropy with the same forward configuration
/// (block activation pruning included) that training uses.
template <typename T>
EvalResult evaluate_full(const ModelGraph<T>& m, const Dataset<T>& d, const BlockPruneConfig& act_prune,
                         std::size_t batch = 32) {
  require(!d.empty(), "evaluate: dataset is empty");
  EvalResult r;
  double loss = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t b = 0; b < d.size(); b += batch) {
    idx.clear();
    for (std::size_t i = b; i < std::min(d.size(), b + batch); ++i) idx.push_back(i);
    auto logits = predict(m, d.batch(idx), act_prune);
    const auto labels = d.batch_labels(idx);
    loss += static_cast<double>(cross_entropy_loss(logits, labels).loss) * static_cast<double>(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k)
      if (argmax_row(logits, k) == labels[k]) ++r.correct;
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(d.size());
  r.loss = loss / static_cast<double>(d.size());
  return r;
}

template <typename T>
double evaluate(const ModelGraph<T>& m, const Dataset<T>& d, const BlockPruneConfig& act_prune = {2, 0.15}) {
  return evaluate_full(m, d, act_prune).accuracy;
}

template <typename T>
struct StepInfo {
  int epoch = 0;           // 0-based
  std::int64_t step = 0;   // 1-based global optimizer step
  const UpdatePlan* plan = nullptr;
  const ModelGraph<T>* model = nullptr;  // after the update
  std::size_t live_bytes = 0;
  std::size_t footprint_bytes = 0;
  double loss = 0.0;
};

template <typename T>
struct TrainResult {
  ModelGraph<T> model;
  Metrics metrics;
  UpdatePlan initial_plan;
  UpdatePlan final_plan;
  std::size_t peak_live_bytes = 0;
};

template <typename T>
struct TrainHooks {
  std::function<void(const StepInfo<T>&)> on_step;
};

/// Bytes the engine holds for one step, scaled to the memory model's element
/// sizes so the value is comparable with the planned footprint.
template <typename T>
std::size_t live_extra_bytes(const ActivationCache<T>& cache, const Gradients<T>& grads, const MemoryModel& mm) {
  return cache.activation_bytes() / sizeof(T) * mm.bytes_per_activation_element + cache.mask_bytes() +
         grads.bytes() / sizeof(T) * mm.bytes_per_grad_element;
}

template <typename T>
TrainResult<T> fine_tune(const ModelGraph<T>& model, const Dataset<T>& train, const Dataset<T>& eval,
                         const TrainConfig& cfg, const TrainHooks<T>& hooks = {}) {
  cfg.validate();
  require(!train.empty(), "fine_tune: training set is empty");
  require(!eval.empty(), "fine_tune: evaluation set is empty");
  for (const auto* d : {&train, &eval}) {
    require(d->image_shape() == model.input_shape, "fine_tune: dataset images " + shape_str(d->image_shape()) +
                                                       " do not match model input " + shape_str(model.input_shape));
    require(d->num_classes <= model.num_classes, "fine_tune: dataset has " + std::to_string(d->num_classes) +
                                                     " classes, model outputs " + std::to_string(model.num_classes));
  }
  MemoryModel mm;
  mm.batch = cfg.batch_size;

  TrainResult<T> res;
  res.model = model;
  auto& m = res.model;
  const std::size_t spe = (train.size() + cfg.batch_size - 1) / cfg.batch_size;

  // Plan source.
  std::optional<ScheduleState> schedule;
  UpdatePlan fixed;
  switch (cfg.mode) {
    case TrainMode::None: fixed = empty_plan(m); break;
    case TrainMode::Last: fixed = classifier_plan(m); break;
    case TrainMode::Full: fixed = full_plan(m); break;
    case TrainMode::Fixed: fixed = cfg.plan ? *cfg.plan : plan_selection(m, cfg.budget, cfg.ratio, mm); break;
    case TrainMode::Dynamic: {
      ScheduleConfig sc;
      sc.j = cfg.stage_j * static_cast<std::int64_t>(spe);
      sc.k = cfg.stage_k * static_cast<std::int64_t>(spe);
      sc.l = cfg.stage_l * static_cast<std::int64_t>(spe);
      sc.seed = cfg.seed;
      sc.ratio = cfg.ratio;
      sc.budget = cfg.budget;
      sc.reselect_every = cfg.reselect_every_steps > 0 ? cfg.reselect_every_steps : static_cast<std::int64_t>(spe);
      if (cfg.plan)
        schedule.emplace(m, *cfg.plan, sc);
      else
        schedule.emplace(m, sc, mm);
      fixed = schedule->initial_plan();
      break;
    }
  }
  res.initial_plan = fixed;
  if (cfg.plan) {
    validate_plan(m, fixed);
    const auto need = plan_footprint_bytes(m, fixed, mm);
    if (need > cfg.budget) throw BudgetError(need, cfg.budget, "given plan");
  }

  if (cfg.mode == TrainMode::None) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto ev = evaluate_full(m, eval, cfg.act_prune);
    MetricsRow row{0, "eval", ev.loss, ev.accuracy, 0.0, 0, 0, 0, 0.0};
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.metrics.append(row);
    res.final_plan = fixed;
    return res;
  }

  OptimizerState<T> opt;
  opt.momentum = cfg.momentum;
  Rng order_rng(substream_seed(cfg.seed, "train-order"));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::int64_t cached_id = -1;
  const UpdatePlan* cached_plan = nullptr;
  std::size_t cached_bytes = 0;
  auto footprint_of = [&](const UpdatePlan& p) {
    if (cached_plan != &p || cached_id != p.plan_id) {
      cached_bytes = plan_footprint_bytes(m, p, mm);
      cached_id = p.plan_id;
      cached_plan = &p;
    }
    return cached_bytes;
  };

  std::vector<double> grad_l1(m.size(), 0.0);
  std::int64_t t = 0;
  std::vector<std::size_t> idx;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    opt.lr = lr_at(epoch, cfg);
    order_rng.shuffle(order);
    std::fill(grad_l1.begin(), grad_l1.end(), 0.0);
    double loss_sum = 0.0;
    std::size_t correct = 0, epoch_peak = 0, epoch_extra = 0;
    std::int64_t last_plan_id = 0;
    for (std::size_t b = 0; b < spe; ++b) {
      ++t;
      const UpdatePlan& plan = schedule ? schedule_step(*schedule, t) : fixed;
      idx.assign(order.begin() + static_cast<std::ptrdiff_t>(b * cfg.batch_size),
                 order.begin() + static_cast<std::ptrdiff_t>(std::min(train.size(), (b + 1) * cfg.batch_size)));
      const auto labels = train.batch_labels(idx);
      auto fw = forward(m, train.batch(idx), plan, cfg.act_prune);
      auto loss = cross_entropy_loss(fw.logits, labels);
      for (std::size_t k = 0; k < idx.size(); ++k)
        if (argmax_row(fw.logits, k) == labels[k]) ++correct;
      loss_sum += static_cast<double>(loss.loss) * static_cast<double>(idx.size());
      auto grads = backward(m, fw.cache, loss.grad_logits, plan);

      const std::size_t live = live_extra_bytes(fw.cache, grads, mm);
      const std::size_t planned = footprint_of(plan);
      if (live > planned)
        throw std::logic_error("fine_tune: step " + std::to_string(t) + " held " + std::to_string(live) +
                               " bytes, plan footprint is " + std::to_string(planned));
      epoch_peak = std::max(epoch_peak, live);
      epoch_extra = std::max(epoch_extra, planned);
      res.peak_live_bytes = std::max(res.peak_live_bytes, live);
      last_plan_id = plan.plan_id;

      if (cfg.grad_realloc)
        for (const auto& pg : grads.params) {
          double s = 0.0;
          for (std::size_t i = 0; i < pg.weight.size(); ++i) s += std::abs(static_cast<double>(pg.weight[i]));
          grad_l1[static_cast<std::size_t>(pg.node)] += s;
        }

      sgd_step(m, grads, opt);
      if (hooks.on_step) hooks.on_step({epoch, t, &plan, &m, live, planned, static_cast<double>(loss.loss)});
    }
    // Experimental reallocation: once, at the end of the early stage.
    if (cfg.grad_realloc && cfg.mode == TrainMode::Fixed && epoch + 1 == std::max<std::int64_t>(cfg.stage_j, 1)) {
      auto next = gradient_sum_reallocate(m, fixed, grad_l1, cfg.budget, mm);
      next.plan_id = t;
      fixed = std::move(next);
      cached_plan = nullptr;
    }

    const double train_acc = static_cast<double>(correct) / static_cast<double>(train.size());
    MetricsRow tr{epoch + 1, "train", loss_sum / static_cast<double>(train.size()), train_acc, opt.lr, last_plan_id,
                  epoch_extra, epoch_peak, 0.0};
    const auto ev = evaluate_full(m, eval, cfg.act_prune);
    MetricsRow er{epoch + 1, "eval", ev.loss, ev.accuracy, opt.lr, last_plan_id, epoch_extra, epoch_peak, 0.0};
    tr.wall_seconds = er.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.metrics.append(tr);
    res.metrics.append(er);

    if constexpr (std::is_same_v<T, float>) {
      if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
        std::filesystem::create_directories(cfg.checkpoint_dir);
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%03d.sptr", epoch + 1);
        save_checkpoint(m, cfg.checkpoint_dir / name);
      }
    }
  }
  res.final_plan = schedule ? schedule->current() : fixed;
  return res;
}

}  // namespace spu

#pragma once

// AdamW with linear warmup and cosine decay, deterministic gradient
// accumulation, periodic evaluation, checkpointing and a metrics log.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

#include "json.hpp"
#include "tbub/checkpoint.h"
#include "tbub/data.h"
#include "tbub/model.h"

namespace tbub {

struct TrainConfig {
  double max_lr = 2.5e-4;
  double warmup_frac = 0.01;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global-norm clip; 0 disables
  std::size_t batch_size = 8;
  std::size_t accum_steps = 1;
  std::size_t total_steps = 1000;
  std::size_t eval_interval = 100;
  std::size_t eval_batches = 4;
  std::uint64_t seed = 0;
  bool log_timing = true;  // false writes wall_ms = 0 for byte-reproducible logs
  std::size_t threads = 1;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Linear warmup over max(1, round(warmup_frac * total_steps)) steps, then
// cosine decay to max_lr / 10 at total_steps.
double lr_at(std::size_t step, const TrainConfig& cfg);

// One decoupled-decay AdamW update; increments state.step. Throws
// kNonFinite naming the parameter and step if any gradient is not finite.
void adamw_step(ParamStore& params, const ParamGrads& grads, OptimizerState& state, double lr,
                const TrainConfig& cfg);

// Scales grads in place so their global L2 norm is at most max_norm (no-op
// when max_norm <= 0). Returns the norm before clipping.
double clip_grad_norm(ParamGrads& grads, double max_norm);

struct GradientStats {
  double loss_sum = 0.0;                  // sum of per-sequence mean losses
  std::vector<double> mean_forks_sum;     // per fork layer, sum over sequences of mean forks/token
};

// Adds weight * d(loss_s)/d(params) for sequences [first, first + count) of
// `batch` into `into`, in sequence order. Sequences may be processed on up
// to `threads` workers; the reduction order is fixed, so the result is
// bit-identical for every thread count.
GradientStats accumulate_gradients(const Model& model, const Batch& batch, std::size_t first, std::size_t count,
                                   double weight, ParamGrads& into, std::size_t threads = 1);

// Mean per-sequence loss over a batch (no gradients).
double evaluate_loss(const Model& model, const Batch& batch, std::size_t threads = 1);

struct TrainJob {
  ModelConfig model;
  TrainConfig train;
  std::filesystem::path train_data;
  std::filesystem::path val_data;  // empty = use train_data
  std::filesystem::path out_dir;
  nlohmann::json run_info = nlohmann::json::object();  // resolved config, stored in checkpoints
};

struct MetricsRow {
  std::size_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::vector<double> mean_forks;
  double wall_ms = 0.0;
};

struct TrainResult {
  std::size_t final_step = 0;
  std::optional<double> final_val_loss;
  std::vector<MetricsRow> rows;  // rows produced by this invocation
  std::filesystem::path last_checkpoint;
};

std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, std::size_t step);

// Writes <out_dir>/step_NNNNNN.tbub at step 0 (fresh runs), every
// eval_interval steps and at the end, plus <out_dir>/latest.tbub, and the
// CSV log <out_dir>/metrics.csv. On resume the log is truncated to rows at
// or before the checkpoint step. A non-finite loss or gradient aborts with
// kNonFinite, leaving the last good checkpoint in place.
TrainResult train(const TrainJob& job, const std::optional<std::filesystem::path>& resume = std::nullopt,
                  std::ostream* log = nullptr);

// Thread count from TBUB_THREADS (default 1, clamped to >= 1).
std::size_t threads_from_env();

}  // namespace tbub

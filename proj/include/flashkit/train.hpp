#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flashkit/data.hpp"
#include "flashkit/model.hpp"

namespace flashkit {

enum class Objective { lm, mlm };

Objective parse_objective(std::string_view name);
std::string_view objective_name(Objective objective);

struct OptimizerConfig {
  double peak_lr = 7e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.01;
  /// Per-tensor gradient norm bound; 0 disables clipping.
  double clip = 0.1;
  std::size_t warmup = 100;
};

struct TrainConfig {
  ModelConfig model;
  OptimizerConfig optimizer;
  Objective objective = Objective::lm;
  std::size_t batch = 8;
  std::size_t steps = 2000;
  std::uint64_t seed = 0;
  double mask_rate = 0.15;
  double holdout_fraction = 0.05;
  std::size_t eval_batches = 4;
  /// Write a checkpoint every this many steps (0 = only when asked).
  std::size_t checkpoint_every = 0;
  std::filesystem::path checkpoint_path;

  void validate() const;
};

std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(std::string_view text, TrainConfig base = {});

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to 0
/// at `total`. Steps past `total` give 0.
double lr_schedule(std::size_t step, std::size_t warmup, std::size_t total, double peak);

/// Rescales each gradient tensor independently so its L2 norm is at most
/// `threshold`. Returns how many tensors were rescaled.
std::size_t clip_local(std::vector<std::vector<double>>& grads, double threshold);

/// Moments of AdamW, one array per parameter in registration order.
struct OptimState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static OptimState zeros_like(std::span<const Tensor> params);
};

/// One AdamW update with decoupled weight decay and bias-corrected moments:
/// p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p).
/// Throws DimensionError when grads or moments do not match the parameters.
void adamw_step(std::span<Tensor> params, std::span<const std::vector<double>> grads, OptimState& state, double lr,
                const OptimizerConfig& cfg);

/// Owns a model, its optimizer state and the data streams of one run.
/// Every step is a pure function of (config, corpus, step index, state), so a
/// run resumed from a checkpoint reproduces the uninterrupted trace.
class Trainer {
 public:
  Trainer(TrainConfig cfg, std::span<const std::uint8_t> corpus);
  /// Restores model, optimizer state and step counter from `path`.
  static Trainer resume(const std::filesystem::path& path, std::span<const std::uint8_t> corpus);

  struct StepResult {
    std::size_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
  };
  /// Runs one optimization step on batch `step()` and advances the counter.
  StepResult train_step();
  /// Mean loss over the fixed held-out batches.
  double evaluate() const;
  /// Loss of the objective on one batch, without updating anything.
  double batch_loss(const Batch& batch, std::uint64_t mask_seed) const;

  void save(const std::filesystem::path& path) const;

  std::size_t step() const noexcept { return static_cast<std::size_t>(state_.step); }
  const TrainConfig& config() const noexcept { return cfg_; }
  Model& model() noexcept { return model_; }
  const Model& model() const noexcept { return model_; }
  const OptimState& optimizer_state() const noexcept { return state_; }

 private:
  Tensor loss_on(const Batch& batch, std::uint64_t mask_seed) const;

  TrainConfig cfg_;
  Model model_;
  OptimState state_;
  CorpusSplit split_;
  BatchStream stream_;
  std::vector<Batch> eval_batches_;
};

/// Model weights of a checkpoint, without optimizer state or data.
struct LoadedModel {
  TrainConfig config;
  std::uint64_t step = 0;
  Model model;
};
LoadedModel load_model(const std::filesystem::path& path);

struct TrainResult {
  std::vector<double> losses;
  std::vector<double> learning_rates;
  double initial_eval = 0.0;
  double final_eval = 0.0;
};

/// Trains until `cfg.steps`, starting from `trainer`'s current step.
/// `on_step` (optional) sees every step; checkpoints follow cfg.checkpoint_every.
TrainResult train_run(Trainer& trainer, const std::function<void(const Trainer::StepResult&)>& on_step = {});

/// Convenience: a fresh trainer on `corpus` run to completion.
TrainResult train_run(const TrainConfig& cfg, std::span<const std::uint8_t> corpus);

}  // namespace flashkit

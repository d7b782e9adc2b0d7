#pragma once

#include "proxbundle/data/dataset.hpp"
#include "proxbundle/train/model.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace proxbundle::train {

struct TrainConfig {
  Index epochs = 10;
  Index pretrain_epochs = 0;  // baseline epochs shared by every variant before the prox is inserted
  double learning_rate = 1e-3;
  double prox_lr_multiplier = 1.0;  // applied to γ_k and R_k
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
  bool merge_singleton = false;  // forced on by sweeps so every arm sees the same batches

  void validate() const;
};

/// Adam with per-parameter learning-rate multipliers.
class Adam {
 public:
  Adam(const std::vector<Matrix*>& params, const TrainConfig& cfg, std::vector<double> lr_scale = {});
  void step(const std::vector<Matrix>& grads);
  long steps() const { return t_; }

 private:
  std::vector<Matrix*> params_;
  std::vector<Matrix> m_, v_;
  std::vector<double> scale_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

/// Clamps every learnable γ_k into [kGammaMin, kGammaMax].
void clamp_gammas(Model& model);

struct EpochRecord {
  Index epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;  // running accuracy over the epoch's training batches
  double test_accuracy = 0.0;
};

struct RunReport {
  std::uint64_t seed = 0;
  Variant variant = Variant::Baseline;
  std::set<Index> blocks;
  std::vector<EpochRecord> epochs;
  double final_train_accuracy = 0.0;
  double final_test_accuracy = 0.0;
  std::map<Index, std::vector<double>> objective_traces;  // first test batch, last epoch
  Index pretrain_epochs = 0;
  std::uint64_t data_order = 0;                          // hash over every batch hash
  double wall_clock_seconds = 0.0;                       // kept out of to_json()

  /// Deterministic: identical runs give identical bytes.
  std::string to_json() const;
  /// One row per epoch.
  std::string to_csv() const;
};

struct StepLog {
  Index step = 0;
  Index epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  std::uint64_t batch_hash = 0;
  std::string phase = "train";  // or "pretrain"

  std::string to_json_line() const;
};

using LogSink = std::function<void(const StepLog&)>;

struct TrainResult {
  Model model;
  RunReport report;
};

/// Mean cross-entropy, Adam on every tensor, γ clamping after each step.
TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg, const data::DatasetSplit& split,
                  const LogSink& log = {});

/// The shared starting point of every variant: the baseline trained for cfg.pretrain_epochs,
/// with the prox parameters of `model_cfg` at their initial values.
Model pretrain_backbone(const ModelConfig& model_cfg, const TrainConfig& cfg, const data::DatasetSplit& split,
                        const LogSink& log = {});

/// Trains from an existing model without pretraining; epoch data order continues after
/// cfg.pretrain_epochs so that it matches a run that did pretrain.
TrainResult train(Model model, const TrainConfig& cfg, const data::DatasetSplit& split,
                  const LogSink& log = {});

struct Evaluation {
  double accuracy = 0.0;
  std::vector<int> predictions;  // aligned with the evaluated indices
  data::LabeledFeatures pre;     // tokens entering the deepest placement (final features if none)
  data::LabeledFeatures post;    // that placement's Ẑ (equal to pre without placements)
  Matrix w;                      // block-diagonal coefficients in index order; empty without prox
  Index placement = 0;           // block of the exported placement, 0 for none
  std::vector<std::vector<Index>> batches;  // positions into the evaluated indices
  std::map<Index, std::vector<double>> objective_traces;  // first batch
};

/// Batches `indices` at `batch_size` with a seeded shuffle (fixed per seed), merging a
/// trailing singleton when prox is active.
Evaluation evaluate(const Model& model, const data::DatasetSplit& split, std::span<const Index> indices,
                    Index batch_size, std::uint64_t seed);

struct SweepRow {
  std::string blocks;
  double accuracy = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t data_order = 0;
};

/// "none" for the empty set, otherwise the blocks joined with '+'.
std::string blocks_label(const std::set<Index>& blocks);

/// One training run per placement, sharing seed and data order. Empty placements run the
/// baseline; the others use base.prox's variant (learnable when base is the baseline).
/// Arms run concurrently (PROXBUNDLE_THREADS caps the pool); logs are replayed in arm order.
std::vector<SweepRow> placement_sweep(const ModelConfig& base, const TrainConfig& cfg,
                                      const data::DatasetSplit& split,
                                      const std::vector<std::set<Index>>& placements,
                                      const LogSink& log = {});

std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace proxbundle::train

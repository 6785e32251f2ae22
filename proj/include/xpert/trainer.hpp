// SPDX-License-Identifier: Apache-2.0
#pragma once

// Joint LoRA fine-tuning and pruning on toy networks. Every epoch trains the
// adapters, re-scores each prunable layer at the current weights, smooths the
// scores with an EMA, derives a row-wise mask and optionally realigns B with a
// PBS correction. The last mask is merged into the base weights at the end.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xpert/kernels.hpp"
#include "xpert/masking.hpp"
#include "xpert/matrix.hpp"
#include "xpert/model.hpp"
#include "xpert/pbs.hpp"
#include "xpert/scoring.hpp"

namespace xpert {

enum class LossKind { mse, cross_entropy };
enum class TaskKind { teacher_student, char_classification };
enum class Method { efficientxpert, wanda_baseline };

std::string to_string(LossKind k);
std::string to_string(TaskKind k);
std::string to_string(Method m);
TaskKind task_kind_from_string(const std::string& s);
Method method_from_string(const std::string& s);

struct CalibrationSpec {
  std::size_t batches = 8;
  std::size_t seq_len = 16;

  friend bool operator==(const CalibrationSpec&, const CalibrationSpec&) = default;
};

// Defaults follow the s=0.5, eta=0.5, lambda=1e-8, r=8, T=3, lr=1e-4 recipe.
struct PruneConfig {
  double sparsity = 0.5;
  double ema_rate = 0.5;
  double lambda = kDefaultPbsLambda;
  std::size_t rank = 8;
  std::size_t epochs = 3;
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;
  CalibrationSpec calibration;
  Criterion criterion = Criterion::foresight;
  bool pbs_enabled = true;
  bool pbs_scale_adapter = true;
  // One more PBS pass with the final mask right before merging.
  bool post_final_pbs = false;
  // Experimental: one sparsity budget per layer instead of per row.
  bool global_budget = false;

  void validate() const;
  friend bool operator==(const PruneConfig&, const PruneConfig&) = default;
};

struct ToyTaskConfig {
  TaskKind kind = TaskKind::teacher_student;
  // Layer widths, input first. Ignored for the input of char_classification,
  // whose feature width is alphabet + alphabet^2.
  std::vector<std::size_t> widths{32, 48, 48, 24};
  Activation hidden = Activation::relu;
  std::size_t train_samples = 512;
  std::size_t eval_samples = 256;
  std::size_t batch_size = 32;
  double lora_scale = kDefaultLoraScale;
  // Spread (log-normal sigma) of per-channel gains in the frozen base weights
  // and of the input feature scales.
  double gain_spread = 0.5;
  // teacher_student: rank and relative size of the teacher's weight shift.
  std::size_t teacher_rank = 4;
  double teacher_shift = 0.5;
  // char_classification
  std::size_t alphabet = 6;
  std::size_t classes = 12;
  std::size_t sequence_length = 24;

  void validate() const;
  friend bool operator==(const ToyTaskConfig&, const ToyTaskConfig&) = default;
};

struct Dataset {
  Matrix inputs;
  Matrix targets;  // regression targets, or one-hot rows for classification
};

struct ToyTask {
  ToyModel model;  // student with zero-initialised B
  LossKind loss = LossKind::mse;
  Dataset train;
  Dataset eval;
  Matrix calibration;  // calibration.batches * calibration.seq_len rows
};

// Builds the student, data splits and calibration batch from a seed.
ToyTask make_toy_task(const ToyTaskConfig& task, const PruneConfig& config);

struct LossAndGrads {
  double loss = 0.0;
  std::vector<Matrix> grad_b;
  std::vector<Matrix> grad_a;
};

double evaluate_loss(const ToyModel& model, const Dataset& data, LossKind loss,
                     Exec exec = Exec::parallel);
double evaluate_accuracy(const ToyModel& model, const Dataset& data, Exec exec = Exec::parallel);

// Loss and its gradients with respect to every layer's B and A. Forward uses
// masked weights when a layer carries a mask.
LossAndGrads loss_and_gradients(const ToyModel& model, const Matrix& inputs,
                                const Matrix& targets, LossKind loss, Exec exec = Exec::parallel);

// One pass of minibatch gradient descent over the shuffled data. Only adapters
// change. Returns the mean minibatch loss; throws NumericError on divergence.
double train_epoch(ToyModel& model, const Dataset& data, double learning_rate,
                   std::size_t batch_size, LossKind loss, std::uint64_t shuffle_seed,
                   Exec exec = Exec::parallel);

// base_w <- mask .* (W + scale * B * A); adapters are zeroed. Prunable layers
// must carry a mask.
ToyModel merge_and_mask(ToyModel model, Exec exec = Exec::parallel);

struct LayerEpochRecord {
  std::size_t layer = 0;
  double sparsity = 0.0;
  double churn = 0.0;           // fraction of mask entries flipped vs the previous epoch
  double violation_mass = 0.0;  // masked residual before PBS
  double residual_after = 0.0;  // masked residual after PBS (== violation_mass when disabled)
  std::size_t over_constrained_rows = 0;
  double update_norm = 0.0;  // ||delta B||_F
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double mask_churn = 0.0;  // mean over layers
  std::vector<LayerEpochRecord> layers;
};

struct RunRecord {
  Method method = Method::efficientxpert;
  std::vector<EpochRecord> epochs;
  std::map<std::size_t, double> final_sparsity;
  std::map<std::string, double> eval_metrics;
};

struct RunResult {
  ToyModel model;    // merged sparse model
  ToyModel adapted;  // trained model before merging, final masks attached
  std::map<std::size_t, Matrix> masks;
  RunRecord record;
};

RunResult efficientxpert_run(ToyModel model, const Dataset& train, const Dataset& eval,
                             const Matrix& calibration, LossKind loss, std::size_t batch_size,
                             const PruneConfig& config, Exec exec = Exec::parallel);

// Prune once up front with Wanda on the initial effective weights, fine-tune the
// adapters on the pruned base, then reapply the original mask at merge.
RunResult wanda_baseline_run(ToyModel model, const Dataset& train, const Dataset& eval,
                             const Matrix& calibration, LossKind loss, std::size_t batch_size,
                             const PruneConfig& config, Exec exec = Exec::parallel);

RunResult run_method(Method method, const ToyTask& task, const ToyTaskConfig& task_config,
                     const PruneConfig& config, Exec exec = Exec::parallel);

}  // namespace xpert

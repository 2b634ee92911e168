#pragma once

// Semi-supervised training loop, sliding-window inference, checkpoints and
// the ablation harness.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dualmod/config.hpp"
#include "dualmod/losses.hpp"
#include "dualmod/metrics.hpp"
#include "dualmod/network.hpp"
#include "dualmod/preprocess.hpp"

namespace dualmod {

/// lr_initial * (1 - it / max_iters)^lr_power for 0 <= it < max_iters.
double lr_schedule(long it, const TrainConfig& cfg);

struct TrainerState {
  ExperimentConfig config;
  DualBranchModel<float> model;
  std::vector<std::vector<float>> velocity;  // one buffer per parameter
  long iteration = 0;
  Rng batch_rng;
  double best_val_dsc = -1.0;
  long best_iteration = -1;

  /// Fresh model and optimizer state for `cfg`.
  static TrainerState create(const ExperimentConfig& cfg);
};

struct StepRecord {
  long iteration = 0;  // index of the step that produced the record
  double lr = 0;
  LossBundle loss;
};

/// One forward/backward/update on `batch`. Throws NumericError when the loss
/// is not finite.
StepRecord train_step(TrainerState& state, const Batch& batch);

/// Draws the next batch for `state` from `split`.
Batch next_batch(TrainerState& state, const DatasetSplit& split);

PreprocessConfig preprocess_config(const DataConfig& data);

/// Loads or generates the samples named by the config, preprocesses them and
/// splits them.
DatasetSplit prepare_split(const ExperimentConfig& cfg);

// ---- inference ----

struct BranchProbabilities {
  std::vector<float> prob_a;  // (C, D, H, W)
  std::vector<float> prob_b;
};

/// Half-stride sliding windows of `patch` over the whole sample, with
/// overlapping probabilities averaged. Runs without dropout or recording.
BranchProbabilities predict_volume(const DualBranchModel<float>& model, const ModalitySample& sample,
                                   const Extent3& patch);

/// Voxelwise argmax of (C, D, H, W) probabilities.
SegMask argmax_mask(const std::vector<float>& probs, const Extent3& extent, int num_classes);

struct Evaluation {
  MetricsReport fused;     // argmax of the averaged branch probabilities
  MetricsReport branch_a;  // modality a alone
  MetricsReport branch_b;
};

/// Metrics over `samples`, which must all carry masks. Samples are processed
/// in parallel by up to worker_threads() threads and reduced in input order.
Evaluation evaluate(const DualBranchModel<float>& model, const std::vector<ModalitySample>& samples,
                    const Extent3& patch);

/// DUALMOD_THREADS when set (>= 1), otherwise the hardware concurrency.
int worker_threads();

// ---- checkpoints ----

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const TrainerState& state);
TrainerState load_checkpoint(const std::string& path);

// ---- training driver ----

struct ValidationRecord {
  long iteration = 0;  // number of completed steps
  double dsc = 0;
  double asd = 0;
};

struct TrainOptions {
  std::string out_dir;  // empty: nothing is written
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const ValidationRecord&)> on_validation;
};

struct TrainResult {
  TrainerState final_state;
  std::optional<TrainerState> best_state;  // present when validation ran
  std::vector<StepRecord> log;
  std::vector<ValidationRecord> validation;
};

/// Runs the remaining steps of `state` up to trainer.max_iters.
TrainResult train(TrainerState state, const DatasetSplit& split, const TrainOptions& options = {});
TrainResult train(const ExperimentConfig& cfg, const DatasetSplit& split, const TrainOptions& options = {});

/// Column order of the CSV log.
inline constexpr const char* kLogHeader = "iter,lr,ce_a,ce_b,dice_a,dice_b,consistency,total";
std::string log_csv_row(const StepRecord& r);
std::string log_json_row(const StepRecord& r);

// ---- ablation ----

struct AblationRow {
  std::string name;
  bool mmf = false, mae = false, mcml = false;
  std::size_t params = 0;
  Evaluation eval;
  std::string error;  // non-empty when training this row failed
};

/// The five rows: baseline, +MMF, +MMF+MAE, +MMF+MCML, +MMF+MAE+MCML.
std::vector<AblationRow> ablation_rows();

/// Trains every row with the shared seed and split and evaluates on split.test.
std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const DatasetSplit& split,
                                      const std::function<void(const AblationRow&)>& on_row = {});

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows);
std::string format_ablation_table(const std::vector<AblationRow>& rows);

}  // namespace dualmod

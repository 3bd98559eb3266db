#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "diffuse/model.hpp"
#include "diffuse/trajectory.hpp"

namespace diffuse {

enum class OptimizerKind { Adam, Sgd };

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t heads = 16;
  double cnn_dropout = 0.05;
  double trans_dropout = 0.0;
  double learn_rate = 2.133e-4;
  std::size_t epochs = 100;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  Task task = Task::Regression;
  OptimizerKind optimizer = OptimizerKind::Adam;
  bool verbose = false;  // per-epoch progress on stderr

  /// Same defaults with the shorter patience used between curriculum bins.
  static TrainConfig curriculum_defaults();
  void validate() const;
  /// Copies heads, dropouts and head size into a model config.
  ModelConfig apply_to(ModelConfig base) const;
  std::string to_json() const;
  /// Unknown keys are rejected.
  static TrainConfig from_json(const std::string& text);
  std::string optimizer_description() const;
};

/// Inclusive trajectory-length bounds.
struct LengthBin {
  std::size_t lo = 0;
  std::size_t hi = 0;
  bool contains(std::size_t length) const { return length >= lo && length <= hi; }
  std::string label() const;  // "[lo,hi]"
  bool operator==(const LengthBin&) const = default;
};

/// The twelve curriculum bins in ascending order.
std::vector<LengthBin> curriculum_bins();
/// Index of the bin containing `length`, if any.
std::optional<std::size_t> bin_index(const std::vector<LengthBin>& bins, std::size_t length);

struct TrainHistory {
  std::vector<double> train_loss;  // index e-1 holds epoch e
  std::vector<double> val_loss;
  std::size_t best_epoch = 0;      // 1-based
  std::size_t stop_epoch = 0;
  double wall_seconds = 0.0;

  /// `epoch,train_loss,val_loss` rows.
  std::string to_csv() const;
};

/// Learning rate that keeps the noise scale lr*N/B fixed when moving from
/// (base_n, base_b) to (new_n, new_b).
double scale_lr(double base_lr, double base_n, double base_b, double new_n, double new_b);

inline double noise_scale(double lr, double n, double b) { return lr * n / b; }

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// One update of `params` from `grads` (parallel lists). Adam is bias-corrected.
/// Non-finite gradients throw NumericError without touching anything.
void optimizer_step(std::span<std::vector<double>* const> params,
                    std::span<const std::vector<double>> grads, OptimizerState& state, double lr);
/// Convenience: steps every tensor from its accumulated gradient.
void optimizer_step(const std::vector<Tensor>& params, OptimizerState& state, double lr);

/// Strict-improvement early stopping over 1-based epochs.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience);
  /// Records the epoch's validation loss; true if it is a new best.
  bool observe(double val_loss);
  bool should_stop() const { return stale_ >= patience_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_; }
  std::size_t epochs_seen() const { return epoch_; }

 private:
  std::size_t patience_;
  std::size_t epoch_ = 0;
  std::size_t best_epoch_ = 0;
  std::size_t stale_ = 0;
  double best_ = 0.0;
};

/// Target for one trajectory under `task`: alpha, or the model code.
double target_of(const Trajectory& t, Task task);

/// Mean loss (L1 or cross-entropy) over a set, in evaluation mode.
double evaluate_loss(const ModelParams& params, const std::vector<Trajectory>& set);
/// MAE for regression, accuracy for classification.
double evaluate_metric(const ModelParams& params, const std::vector<Trajectory>& set);
/// Whether a larger metric value is better for this task.
inline bool higher_is_better(Task t) { return t == Task::Classification; }

struct TrainResult {
  ModelParams params;
  TrainHistory history;
};

using EpochCallback = std::function<void(std::size_t epoch, double train_loss, double val_loss)>;

/// Optimizes from `init` (which is not modified) and returns the best-validation
/// snapshot. Batches hold equal-length trajectories.
TrainResult train_once(const ModelParams& init, const std::vector<Trajectory>& train_set,
                       const std::vector<Trajectory>& val_set, const TrainConfig& config,
                       const EpochCallback& on_epoch_end = {});
/// Fresh parameters from config.seed.
TrainResult train_once(const ModelConfig& model_config, const std::vector<Trajectory>& train_set,
                       const std::vector<Trajectory>& val_set, const TrainConfig& config,
                       const EpochCallback& on_epoch_end = {});

// ---- k-fold ----

/// Assigns 0..n-1 to k folds of near-equal size after a seeded shuffle; each fold sorted.
std::vector<std::vector<std::size_t>> kfold_partition(std::size_t n, std::size_t k, std::uint64_t seed);

struct KFoldReport {
  std::vector<std::vector<std::size_t>> folds;
  std::vector<double> fold_metrics;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation

  std::string to_csv() const;  // fold,metric rows then mean and std
};

/// fit_and_score(train_ids, val_ids, test_ids, fold) -> metric on the test fold.
using FoldFn = std::function<double(const std::vector<std::size_t>&, const std::vector<std::size_t>&,
                                    const std::vector<std::size_t>&, std::size_t)>;

/// Each fold is the test set once; the rest is split 80/20 into train/validation.
KFoldReport kfold_validate(std::size_t n, std::size_t k, std::uint64_t seed, const FoldFn& fit_and_score);
KFoldReport kfold_validate(const std::vector<Trajectory>& data, std::size_t k,
                           const ModelConfig& model_config, const TrainConfig& config);

// ---- curriculum ----

struct BinData {
  std::vector<Trajectory> train;
  std::vector<Trajectory> val;
  std::vector<Trajectory> test;
};

struct CurriculumRun {
  std::size_t round = 0;  // 1 or 2
  std::size_t bin = 0;    // index into the bin list
  std::uint64_t initial_fingerprint = 0;
  std::uint64_t final_fingerprint = 0;
  TrainHistory history;
};

struct CurriculumResult {
  std::vector<LengthBin> bins;
  std::vector<CurriculumRun> runs;        // in training order
  std::vector<ModelParams> models;        // final round-two model per bin
  std::vector<std::vector<double>> scores;  // scores[model bin][test bin]
  std::vector<std::size_t> selected;      // per test bin, the chosen model bin
  Task task = Task::Regression;

  /// `bin,selected_model,score,native_score` rows.
  std::string selection_csv() const;
  /// Square matrix with model bins as rows.
  std::string matrix_csv() const;
};

/// Two rounds over the bins in descending-length order, each run inheriting the
/// previous run's final parameters and starting with fresh optimizer state.
/// Every round-two model is scored on every bin's test set; ties go to the native model.
CurriculumResult curriculum_train(const std::vector<LengthBin>& bins, const std::vector<BinData>& data,
                                  const ModelConfig& model_config, const TrainConfig& config,
                                  const std::function<void(const CurriculumRun&)>& on_run_end = {});

}  // namespace diffuse

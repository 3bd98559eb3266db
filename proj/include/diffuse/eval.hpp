#pragma once

#include <array>
#include <compare>
#include <tuple>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "diffuse/dataset.hpp"
#include "diffuse/model.hpp"
#include "diffuse/train.hpp"

namespace diffuse {

// ---- metrics ----

/// Mean absolute error.
double mae(std::span<const double> preds, std::span<const double> trues);

/// Micro-averaged F1 over classes 0..4: TP / (TP + (FP + FN) / 2).
double micro_f1(std::span<const int> preds, std::span<const int> trues);

double accuracy(std::span<const int> preds, std::span<const int> trues);

/// counts[true][pred], rows and columns in model-code order.
using Confusion = std::array<std::array<std::size_t, kNumModels>, kNumModels>;

Confusion confusion_matrix(std::span<const int> preds, std::span<const int> trues);
std::size_t confusion_total(const Confusion& c);
/// Micro-F1 from pooled per-class TP/FP/FN of the matrix.
double micro_f1_from_confusion(const Confusion& c);
/// `true\pred,ATTM,...` header then one row per true class.
std::string confusion_csv(const Confusion& c);

// ---- routed models ----

/// A single model for every length, or one model per length bin.
struct CompiledModel {
  Task task = Task::Regression;
  std::vector<LengthBin> bins;     // empty: models[0] serves every length
  std::vector<ModelParams> models;

  static CompiledModel single(ModelParams params);
  const ModelParams& route(std::size_t length) const;
};

/// Loads every `*.ckpt` (with its card) under `dir`. Cards carrying a length
/// bin produce a routed model; otherwise exactly one checkpoint is expected.
CompiledModel load_compiled(const std::filesystem::path& dir);

struct PredictionRow {
  std::size_t id = 0;
  double true_alpha = 0.0;
  double pred_alpha = 0.0;  // regression
  int true_label = 0;
  int pred_label = 0;       // classification
  std::array<double, kNumModels> probabilities{};
};

/// Predictions for every trajectory, in input order.
std::vector<PredictionRow> predict_all(const CompiledModel& model, const std::vector<Trajectory>& items,
                                       std::span<const std::size_t> ids = {});

// ---- sliced reports ----

struct CellKey {
  DiffusionModel model = DiffusionModel::ATTM;
  std::size_t length = 0;
  std::optional<double> snr;
  double alpha = 0.0;

  auto operator<=>(const CellKey& o) const {
    auto t = [](const CellKey& k) {
      return std::tuple(model_code(k.model), k.length, k.snr.value_or(-1.0), k.alpha);
    };
    return t(*this) <=> t(o);
  }
  bool operator==(const CellKey& o) const { return (*this <=> o) == 0; }
};

struct CellResult {
  CellKey key;
  double metric = 0.0;
  std::size_t n = 0;
};

struct SliceEntry {
  std::string axis;   // "model", "length", "snr", "alpha"
  std::string value;
  double metric = 0.0;
  std::size_t n = 0;
};

struct EvalReport {
  Task task = Task::Regression;
  double overall = 0.0;
  std::size_t n = 0;
  std::vector<CellResult> cells;      // sorted by key
  std::vector<SliceEntry> slices;     // marginals, weighted by cell size
  Confusion confusion{};              // classification only
  std::vector<std::pair<std::string, Confusion>> confusion_by_snr;
  std::vector<CellKey> missing_cells;
  std::vector<PredictionRow> predictions;

  std::string metric_name() const { return task == Task::Regression ? "mae" : "f1"; }
  /// `model,length,snr,alpha,metric,n`.
  std::string report_csv() const;
  std::string summary_text() const;
  std::string predictions_csv() const;
};

/// Cell metrics plus marginals over model, length, snr and alpha. `expected`
/// lists cells the grid should contain; absent ones are reported as missing.
EvalReport build_report(Task task, const std::vector<Trajectory>& items,
                        const std::vector<PredictionRow>& predictions,
                        const std::vector<CellKey>& expected = {});

/// Scores the compiled model on the test split of `grid`.
EvalReport sliced_report(const CompiledModel& model, const Dataset& grid);

/// Cells declared by a grid manifest (empty for other manifests).
std::vector<CellKey> expected_cells(const Dataset& ds);

/// report.csv, summary.txt, predictions.csv, confusion_*.csv and plots.
void write_report(const EvalReport& report, const std::filesystem::path& dir);

// ---- plots ----

struct PlotFile {
  std::string name;
  std::string svg;
};

/// Deterministic SVG figures with their data embedded as CSV in <metadata>.
/// Throws on an empty report.
std::vector<PlotFile> render_plots(const EvalReport& report);
void emit_plots(const EvalReport& report, const std::filesystem::path& dir);

}  // namespace diffuse

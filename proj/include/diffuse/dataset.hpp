#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <string>
#include <vector>

#include "diffuse/trajectory.hpp"

namespace diffuse {

struct Split {
  double train = 0.675;
  double val = 0.075;
  double test = 0.25;
};

/// Train/test split with the train portion further split into train/val,
/// e.g. nested_split(0.75, 0.9) -> {0.675, 0.075, 0.25}.
Split nested_split(double train_portion, double inner_train);

struct SplitCounts {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
};
SplitCounts split_counts(std::size_t count, const Split& split);

/// The 0.05-step grid over [0.05, 2): 39 values.
std::vector<double> default_alpha_grid();

struct DatasetSpec {
  std::size_t count = 1000;
  std::size_t length_min = 10;
  std::size_t length_max = 1000;
  std::vector<DiffusionModel> models{kAllModels.begin(), kAllModels.end()};
  std::vector<double> alpha_grid = default_alpha_grid();
  std::vector<double> snr_values;  // empty: noiseless
  std::uint64_t seed = 0;
  Split split{};
};

struct Stratum {
  DiffusionModel model;
  double alpha;
  std::size_t count = 0;
};

/// Admissible (model, alpha) pairs of `spec`, in model-code then grid order.
std::vector<Stratum> enumerate_strata(const DatasetSpec& spec);

/// |models| x |alpha_grid|, admissible or not (the naive "kinds" count).
std::size_t nominal_kinds(const DatasetSpec& spec);

void validate(const DatasetSpec& spec);

/// One evaluation cell of a test grid.
struct GridCell {
  DiffusionModel model;
  std::size_t length;
  double snr;
  double alpha;
};

/// Full factorial test grid: per-model alpha lists x lengths x SNRs, `cell_size` each.
struct GridSpec {
  std::vector<DiffusionModel> models{kAllModels.begin(), kAllModels.end()};
  std::vector<std::size_t> lengths;
  std::vector<double> snrs;
  std::vector<std::vector<double>> alphas;  // parallel to models
  std::size_t cell_size = 2000;
  std::uint64_t seed = 0;

  std::vector<GridCell> cells() const;
};

/// The benchmark grid: 5 models, lengths 10..50 step 10, 100..600 step 100,
/// 800, 1000; SNR 1 and 2; alpha 0.1 steps per model range.
GridSpec table_grid(std::size_t cell_size, std::uint64_t seed);

struct Dataset {
  std::vector<Trajectory> items;  // id = index
  std::vector<std::size_t> train_ids;
  std::vector<std::size_t> val_ids;
  std::vector<std::size_t> test_ids;
  std::string manifest_json;  // what write_dataset persists

  std::vector<Trajectory> subset(const std::vector<std::size_t>& ids) const;
};

/// Generates, noises, and normalizes every trajectory. Deterministic in spec.seed.
Dataset build_dataset(const DatasetSpec& spec);
/// Grid datasets put every item in the test split.
Dataset build_grid_dataset(const GridSpec& grid);

/// Writes trajectories.csv, labels.csv and manifest.json under `dir`.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
/// Loads the dataset described by a manifest.json path.
Dataset read_dataset(const std::filesystem::path& manifest);

// ---- file formats ----

/// `id,L,p_0,...,p_{L-1}` with 17 significant digits.
std::string format_trajectory_line(std::size_t id, std::span<const double> positions);
/// `id,model_code,alpha,snr` (snr empty when noiseless).
std::string format_label_line(std::size_t id, const Trajectory& t);

struct TrajectoryRecord {
  std::size_t id = 0;
  std::vector<double> positions;
};
/// Throws FormatError describing the defect.
TrajectoryRecord parse_trajectory_line(std::string_view line);

/// Shortest round-trip decimal form.
std::string format_real(double v);
double parse_real(std::string_view text);

std::uint64_t file_fingerprint(const std::filesystem::path& p);

}  // namespace diffuse

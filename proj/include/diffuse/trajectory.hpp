#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace diffuse {

// Integer codes are part of the label-file format; do not reorder.
enum class DiffusionModel : int { ATTM = 0, CTRW = 1, FBM = 2, LW = 3, SBM = 4 };

inline constexpr std::size_t kNumModels = 5;
inline constexpr std::array<DiffusionModel, kNumModels> kAllModels = {
    DiffusionModel::ATTM, DiffusionModel::CTRW, DiffusionModel::FBM, DiffusionModel::LW,
    DiffusionModel::SBM};

std::string_view model_name(DiffusionModel m);
/// Accepts the short name (case-insensitive) or the integer code.
DiffusionModel parse_model(std::string_view text);
DiffusionModel model_from_code(int code);
inline int model_code(DiffusionModel m) { return static_cast<int>(m); }

/// Admissible anomalous-exponent interval of one model.
struct AlphaRange {
  double lo;
  double hi;
  bool lo_closed;
  bool hi_closed;

  bool contains(double alpha) const;
  std::string describe() const;  // e.g. "(0, 1]"
};

AlphaRange admissible_alpha(DiffusionModel m);

struct Trajectory {
  std::vector<double> positions;
  DiffusionModel model = DiffusionModel::FBM;
  double alpha = 1.0;
  std::optional<double> snr;  // empty when noiseless
  std::uint64_t seed = 0;

  std::size_t length() const { return positions.size(); }
};

/// Root-mean-square displacement sqrt(mean(dx^2)). This is the displacement
/// scale used for both SNR and normalization (zero-mean increments).
double displacement_scale(std::span<const double> positions);

Trajectory generate_fbm(double alpha, std::size_t length, std::uint64_t seed);
Trajectory generate_ctrw(double alpha, std::size_t length, std::uint64_t seed);
Trajectory generate_lw(double alpha, std::size_t length, std::uint64_t seed);
Trajectory generate_attm(double alpha, std::size_t length, std::uint64_t seed);
Trajectory generate_sbm(double alpha, std::size_t length, std::uint64_t seed);
Trajectory generate(DiffusionModel model, double alpha, std::size_t length, std::uint64_t seed);

/// Adds i.i.d. Gaussian localization noise with sigma = displacement_scale / snr.
/// snr = +inf means no noise; the result is an unchanged copy.
Trajectory add_noise(const Trajectory& traj, double snr, std::uint64_t seed);

/// Shifts positions[0] to 0 and scales to unit displacement_scale.
Trajectory normalize(const Trajectory& traj);
std::vector<double> normalize_positions(std::span<const double> positions);
/// Pipeline variant: a constant path (e.g. a CTRW that never jumped) maps to zeros
/// instead of throwing.
std::vector<double> normalize_or_flat(std::span<const double> positions);

/// Increment autocovariance of unit-variance fractional Gaussian noise.
double fgn_autocovariance(double hurst, std::size_t lag);

}  // namespace diffuse

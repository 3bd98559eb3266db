#include "diffuse/trajectory.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <charconv>
#include <complex>
#include <map>
#include <memory>
#include <mutex>

#include "diffuse/error.hpp"
#include "diffuse/rng.hpp"

namespace diffuse {

namespace {

std::string format_alpha(double a) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), a);
  return std::string(buf, end);
}

void require_alpha(DiffusionModel m, double alpha) {
  const AlphaRange r = admissible_alpha(m);
  if (!std::isfinite(alpha) || !r.contains(alpha)) {
    throw DomainError(std::string(model_name(m)) + " alpha=" + format_alpha(alpha) +
                      " outside admissible interval " + r.describe());
  }
}

void require_length(std::size_t length) {
  if (length < 2) throw DomainError("trajectory length must be >= 2");
}

Trajectory make(DiffusionModel m, double alpha, std::uint64_t seed, std::vector<double> x) {
  Trajectory t;
  t.positions = std::move(x);
  t.model = m;
  t.alpha = alpha;
  t.seed = seed;
  return t;
}

// FFTW's planner is not thread-safe; execution on distinct buffers is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

class FftPlan {
 public:
  explicit FftPlan(std::size_t n) : n_(n) {
    buf_ = fftw_alloc_complex(n);
    std::lock_guard lock(planner_mutex());
    plan_ = fftw_plan_dft_1d(static_cast<int>(n), buf_, buf_, FFTW_FORWARD, FFTW_ESTIMATE);
  }
  ~FftPlan() {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(plan_);
    fftw_free(buf_);
  }
  FftPlan(const FftPlan&) = delete;
  FftPlan& operator=(const FftPlan&) = delete;

  std::complex<double>* data() { return reinterpret_cast<std::complex<double>*>(buf_); }
  std::size_t size() const { return n_; }
  void run() { fftw_execute(plan_); }

 private:
  std::size_t n_;
  fftw_complex* buf_ = nullptr;
  fftw_plan plan_ = nullptr;
};

FftPlan& plan_for(std::size_t n) {
  thread_local std::map<std::size_t, std::unique_ptr<FftPlan>> cache;
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<FftPlan>(n);
  return *slot;
}

struct EmbeddingCache {
  double hurst;
  std::size_t n;
  std::vector<double> sqrt_eig;  // empty -> embedding not PSD, use Cholesky
};

// Circulant embedding eigenvalues for n fGn increments, scaled by 1/M.
const EmbeddingCache& embedding_for(double hurst, std::size_t n) {
  thread_local std::vector<EmbeddingCache> cache;
  for (const auto& c : cache)
    if (c.hurst == hurst && c.n == n) return c;
  if (cache.size() > 64) cache.clear();

  std::size_t m = 1;
  while (m < n) m <<= 1;
  const std::size_t M = 2 * m;
  FftPlan& fft = plan_for(M);
  auto* buf = fft.data();
  for (std::size_t k = 0; k <= m; ++k) buf[k] = fgn_autocovariance(hurst, k);
  for (std::size_t k = m + 1; k < M; ++k) buf[k] = buf[M - k];
  fft.run();

  EmbeddingCache entry{hurst, n, {}};
  double max_eig = 0.0;
  for (std::size_t j = 0; j < M; ++j) max_eig = std::max(max_eig, buf[j].real());
  bool psd = true;
  entry.sqrt_eig.resize(M);
  for (std::size_t j = 0; j < M; ++j) {
    double lam = buf[j].real();
    if (lam < -1e-10 * max_eig) {
      psd = false;
      break;
    }
    entry.sqrt_eig[j] = std::sqrt(std::max(lam, 0.0) / static_cast<double>(M));
  }
  if (!psd) entry.sqrt_eig.clear();
  cache.push_back(std::move(entry));
  return cache.back();
}

std::vector<double> fgn_cholesky(double hurst, std::size_t n, Rng& rng) {
  std::vector<double> lower(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = fgn_autocovariance(hurst, i - j);
      for (std::size_t k = 0; k < j; ++k) s -= lower[i * n + k] * lower[j * n + k];
      if (i == j) {
        lower[i * n + i] = std::sqrt(std::max(s, 0.0));
      } else {
        const double d = lower[j * n + j];
        lower[i * n + j] = d > 0.0 ? s / d : 0.0;
      }
    }
  }
  std::vector<double> z(n), out(n, 0.0);
  for (auto& v : z) v = rng.normal();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k <= i; ++k) out[i] += lower[i * n + k] * z[k];
  return out;
}

std::vector<double> fgn_davies_harte(const EmbeddingCache& emb, Rng& rng) {
  const std::size_t M = emb.sqrt_eig.size();
  FftPlan& fft = plan_for(M);
  auto* buf = fft.data();
  for (std::size_t j = 0; j < M; ++j) {
    const double re = rng.normal();
    const double im = rng.normal();
    buf[j] = std::complex<double>(re, im) * emb.sqrt_eig[j];
  }
  fft.run();
  std::vector<double> out(emb.n);
  for (std::size_t k = 0; k < emb.n; ++k) out[k] = buf[k].real();
  return out;
}

std::vector<double> cumulative_from_zero(const std::vector<double>& increments) {
  std::vector<double> x(increments.size() + 1, 0.0);
  for (std::size_t k = 0; k < increments.size(); ++k) x[k + 1] = x[k] + increments[k];
  return x;
}

}  // namespace

std::string_view model_name(DiffusionModel m) {
  switch (m) {
    case DiffusionModel::ATTM: return "ATTM";
    case DiffusionModel::CTRW: return "CTRW";
    case DiffusionModel::FBM: return "FBM";
    case DiffusionModel::LW: return "LW";
    case DiffusionModel::SBM: return "SBM";
  }
  return "?";
}

DiffusionModel model_from_code(int code) {
  if (code < 0 || code >= static_cast<int>(kNumModels))
    throw DomainError("model code " + std::to_string(code) + " outside 0..4");
  return static_cast<DiffusionModel>(code);
}

DiffusionModel parse_model(std::string_view text) {
  std::string upper(text);
  for (auto& c : upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (DiffusionModel m : kAllModels)
    if (upper == model_name(m)) return m;
  int code = -1;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), code);
  if (ec == std::errc() && ptr == text.data() + text.size()) return model_from_code(code);
  throw DomainError("unknown diffusion model '" + std::string(text) + "'");
}

bool AlphaRange::contains(double a) const {
  const bool above = lo_closed ? a >= lo : a > lo;
  const bool below = hi_closed ? a <= hi : a < hi;
  return above && below;
}

std::string AlphaRange::describe() const {
  return std::string(lo_closed ? "[" : "(") + format_alpha(lo) + ", " + format_alpha(hi) +
         (hi_closed ? "]" : ")");
}

AlphaRange admissible_alpha(DiffusionModel m) {
  switch (m) {
    case DiffusionModel::ATTM:
    case DiffusionModel::CTRW: return {0.0, 1.0, false, true};
    case DiffusionModel::FBM:
    case DiffusionModel::SBM: return {0.0, 2.0, false, false};
    case DiffusionModel::LW: return {1.0, 2.0, true, false};
  }
  return {0.0, 0.0, false, false};
}

double displacement_scale(std::span<const double> x) {
  if (x.size() < 2) throw DegenerateInputError("need at least 2 positions for displacements");
  double ss = 0.0;
  for (std::size_t k = 1; k < x.size(); ++k) {
    const double d = x[k] - x[k - 1];
    ss += d * d;
  }
  return std::sqrt(ss / static_cast<double>(x.size() - 1));
}

double fgn_autocovariance(double hurst, std::size_t lag) {
  const double k = static_cast<double>(lag);
  const double h2 = 2.0 * hurst;
  return 0.5 * (std::pow(k + 1.0, h2) - 2.0 * std::pow(k, h2) + std::pow(std::abs(k - 1.0), h2));
}

Trajectory generate_fbm(double alpha, std::size_t length, std::uint64_t seed) {
  require_alpha(DiffusionModel::FBM, alpha);
  require_length(length);
  Rng rng(seed);
  const double hurst = alpha / 2.0;
  const std::size_t n = length - 1;
  const EmbeddingCache& emb = embedding_for(hurst, n);
  std::vector<double> inc =
      emb.sqrt_eig.empty() ? fgn_cholesky(hurst, n, rng) : fgn_davies_harte(emb, rng);
  return make(DiffusionModel::FBM, alpha, seed, cumulative_from_zero(inc));
}

Trajectory generate_ctrw(double alpha, std::size_t length, std::uint64_t seed) {
  require_alpha(DiffusionModel::CTRW, alpha);
  require_length(length);
  Rng rng(seed);
  // alpha == 1 has a log-divergent Pareto mean; use the finite-mean
  // exponential law there so the walk is ordinary diffusion.
  const bool normal = alpha == 1.0;
  std::vector<double> x(length, 0.0);
  const double horizon = static_cast<double>(length - 1);
  double t = normal ? rng.exponential() : std::pow(rng.uniform_pos(), -1.0 / alpha);
  double pos = 0.0;
  std::size_t k = 1;
  while (k < length) {
    // Position held between jumps; a jump at time t is visible from ceil(t).
    while (k < length && static_cast<double>(k) < t) x[k++] = pos;
    if (t > horizon) break;
    pos += rng.normal();
    t += normal ? rng.exponential() : std::pow(rng.uniform_pos(), -1.0 / alpha);
  }
  return make(DiffusionModel::CTRW, alpha, seed, std::move(x));
}

Trajectory generate_lw(double alpha, std::size_t length, std::uint64_t seed) {
  require_alpha(DiffusionModel::LW, alpha);
  require_length(length);
  Rng rng(seed);
  const double sigma = 3.0 - alpha;
  // sigma == 2 has a log-divergent second moment; exponential flights keep alpha == 1 diffusive.
  const bool normal = alpha == 1.0;
  std::vector<double> x(length, 0.0);
  double start_t = 0.0, start_x = 0.0;
  std::size_t k = 1;
  while (k < length) {
    const double tau = normal ? rng.exponential() : std::pow(rng.uniform_pos(), -1.0 / sigma);
    const double dir = rng.coin() ? 1.0 : -1.0;
    const double end_t = start_t + tau;
    while (k < length && static_cast<double>(k) <= end_t) {
      x[k] = start_x + dir * (static_cast<double>(k) - start_t);
      ++k;
    }
    start_x += dir * tau;
    start_t = end_t;
  }
  return make(DiffusionModel::LW, alpha, seed, std::move(x));
}

Trajectory generate_attm(double alpha, std::size_t length, std::uint64_t seed) {
  require_alpha(DiffusionModel::ATTM, alpha);
  require_length(length);
  Rng rng(seed);
  const std::size_t steps = length - 1;
  // Per-step variance 2 * integral of D(s) over [k, k+1].
  std::vector<double> var(steps, 0.0);
  if (alpha == 1.0) {
    const double d = rng.uniform_pos();
    std::fill(var.begin(), var.end(), 2.0 * d);
  } else {
    // P(D) ~ D^(sigma-1) on (0, 1], regimes last D^-gamma with gamma = sigma/alpha.
    // sigma keeps gamma midway inside (sigma, sigma + 1), where the MSD exponent is alpha.
    const double sigma = std::min(1.0, alpha / (2.0 * (1.0 - alpha)));
    const double gamma = sigma / alpha;
    double start = 0.0;
    const double horizon = static_cast<double>(steps);
    while (start < horizon) {
      const double d = std::pow(rng.uniform_pos(), 1.0 / sigma);
      const double end = start + std::pow(d, -gamma);
      auto k0 = static_cast<std::size_t>(std::floor(start));
      const double stop = std::min(end, horizon);
      for (std::size_t k = k0; static_cast<double>(k) < stop; ++k) {
        const double lo = std::max(start, static_cast<double>(k));
        const double hi = std::min(stop, static_cast<double>(k + 1));
        if (hi > lo) var[k] += 2.0 * d * (hi - lo);
      }
      start = end;
    }
  }
  std::vector<double> inc(steps);
  for (std::size_t k = 0; k < steps; ++k) inc[k] = std::sqrt(var[k]) * rng.normal();
  return make(DiffusionModel::ATTM, alpha, seed, cumulative_from_zero(inc));
}

Trajectory generate_sbm(double alpha, std::size_t length, std::uint64_t seed) {
  require_alpha(DiffusionModel::SBM, alpha);
  require_length(length);
  Rng rng(seed);
  std::vector<double> inc(length - 1);
  for (std::size_t k = 0; k < inc.size(); ++k) {
    const double t = static_cast<double>(k + 1);
    const double v = std::pow(t, alpha) - std::pow(t - 1.0, alpha);
    inc[k] = std::sqrt(v) * rng.normal();
  }
  return make(DiffusionModel::SBM, alpha, seed, cumulative_from_zero(inc));
}

Trajectory generate(DiffusionModel model, double alpha, std::size_t length, std::uint64_t seed) {
  switch (model) {
    case DiffusionModel::ATTM: return generate_attm(alpha, length, seed);
    case DiffusionModel::CTRW: return generate_ctrw(alpha, length, seed);
    case DiffusionModel::FBM: return generate_fbm(alpha, length, seed);
    case DiffusionModel::LW: return generate_lw(alpha, length, seed);
    case DiffusionModel::SBM: return generate_sbm(alpha, length, seed);
  }
  throw DomainError("unknown diffusion model");
}

Trajectory add_noise(const Trajectory& traj, double snr, std::uint64_t seed) {
  if (std::isnan(snr) || snr <= 0.0)
    throw DomainError("snr must be positive, got " + format_alpha(snr));
  if (traj.length() < 2) throw DegenerateInputError("add_noise needs at least 2 positions");
  Trajectory out = traj;
  if (std::isinf(snr)) return out;
  const double scale = displacement_scale(traj.positions);
  if (scale == 0.0) throw DegenerateInputError("constant path: displacement scale is zero");
  const double sigma = scale / snr;
  Rng rng(seed);
  for (auto& p : out.positions) p += sigma * rng.normal();
  out.snr = snr;
  return out;
}

std::vector<double> normalize_positions(std::span<const double> x) {
  const double scale = displacement_scale(x);
  if (!(scale > 0.0) || !std::isfinite(scale))
    throw DegenerateInputError("cannot normalize a constant path");
  std::vector<double> out(x.size());
  const double origin = x[0];
  for (std::size_t k = 0; k < x.size(); ++k) out[k] = (x[k] - origin) / scale;
  return out;
}

std::vector<double> normalize_or_flat(std::span<const double> x) {
  if (x.size() >= 2 && displacement_scale(x) == 0.0) return std::vector<double>(x.size(), 0.0);
  return normalize_positions(x);
}

Trajectory normalize(const Trajectory& traj) {
  Trajectory out = traj;
  out.positions = normalize_positions(traj.positions);
  return out;
}

}  // namespace diffuse

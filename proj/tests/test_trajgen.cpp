#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include "diffuse/dataset.hpp"
#include "diffuse/error.hpp"
#include "diffuse/rng.hpp"
#include "diffuse/trajectory.hpp"
#include "oracles.hpp"

using namespace diffuse;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("diffuse_trajgen_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_SUITE("trajgen") {

TEST_CASE("model codes are stable and parse both ways") {
  CHECK(kNumModels == 5);
  CHECK(model_code(DiffusionModel::ATTM) == 0);
  CHECK(model_code(DiffusionModel::CTRW) == 1);
  CHECK(model_code(DiffusionModel::FBM) == 2);
  CHECK(model_code(DiffusionModel::LW) == 3);
  CHECK(model_code(DiffusionModel::SBM) == 4);
  for (auto m : kAllModels) {
    CHECK(parse_model(model_name(m)) == m);
    CHECK(parse_model(std::to_string(model_code(m))) == m);
    CHECK(model_from_code(model_code(m)) == m);
  }
  CHECK(parse_model("lw") == DiffusionModel::LW);
  CHECK_THROWS_AS(parse_model("BM"), DomainError);
  CHECK_THROWS_AS(model_from_code(5), DomainError);
}

TEST_CASE("each generator rejects exponents outside its range and names the interval") {
  struct Case {
    DiffusionModel m;
    std::vector<double> bad;
    std::vector<double> good;
    std::string interval;
  };
  const std::vector<Case> cases = {
      {DiffusionModel::ATTM, {0.0, -0.1, 1.01, 1.5}, {0.05, 1.0}, "(0, 1]"},
      {DiffusionModel::CTRW, {0.0, 1.05, 2.0}, {0.05, 1.0}, "(0, 1]"},
      {DiffusionModel::FBM, {0.0, 2.0, 2.5}, {0.05, 1.95}, "(0, 2)"},
      {DiffusionModel::LW, {0.95, 2.0, 0.5}, {1.0, 1.95}, "[1, 2)"},
      {DiffusionModel::SBM, {0.0, 2.0}, {0.05, 1.95}, "(0, 2)"},
  };
  for (const auto& c : cases) {
    CAPTURE(model_name(c.m));
    CHECK(admissible_alpha(c.m).describe() == c.interval);
    for (double a : c.bad) {
      CAPTURE(a);
      try {
        generate(c.m, a, 50, 1);
        FAIL("accepted an inadmissible exponent");
      } catch (const DomainError& e) {
        CHECK(std::string(e.what()).find(c.interval) != std::string::npos);
      }
    }
    for (double a : c.good) CHECK_NOTHROW(generate(c.m, a, 50, 1));
  }
  CHECK_THROWS_AS(generate_fbm(std::nan(""), 50, 1), DomainError);
  CHECK_THROWS_AS(generate_sbm(1.0, 1, 1), DomainError);
}

TEST_CASE("short paths at the extremes of each range are valid") {
  const std::vector<std::pair<DiffusionModel, double>> probes = {
      {DiffusionModel::FBM, 1.9}, {DiffusionModel::FBM, 0.1},  {DiffusionModel::CTRW, 0.1},
      {DiffusionModel::LW, 1.0},  {DiffusionModel::LW, 1.9},   {DiffusionModel::ATTM, 0.1},
      {DiffusionModel::SBM, 0.1}, {DiffusionModel::SBM, 1.9},  {DiffusionModel::ATTM, 1.0}};
  for (auto [m, a] : probes)
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Trajectory t = generate(m, a, 10, seed);
      CHECK(t.length() == 10);
      CHECK(t.model == m);
      CHECK(t.alpha == a);
      CHECK(t.seed == seed);
      for (double x : t.positions) CHECK(std::isfinite(x));
    }
}

TEST_CASE("CTRW at small exponent holds position between rare jumps") {
  std::size_t zero = 0, total = 0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    auto x = generate_ctrw(0.1, 10, s).positions;
    for (std::size_t i = 1; i < x.size(); ++i) {
      zero += x[i] == x[i - 1];
      ++total;
    }
  }
  CHECK(static_cast<double>(zero) / static_cast<double>(total) > 0.8);
}

TEST_CASE("generators are pure functions of their seed") {
  for (auto m : kAllModels) {
    const double a = m == DiffusionModel::LW ? 1.5 : 0.7;
    CHECK(generate(m, a, 300, 42).positions == generate(m, a, 300, 42).positions);
    CHECK(generate(m, a, 300, 42).positions != generate(m, a, 300, 43).positions);
  }
}

TEST_CASE("FBM at alpha 1 has uncorrelated increments") {
  double s01 = 0, s00 = 0;
  for (std::uint64_t p = 0; p < 10000; ++p) {
    auto x = generate_fbm(1.0, 1000, p).positions;
    for (std::size_t i = 2; i < x.size(); ++i) {
      const double d0 = x[i - 1] - x[i - 2], d1 = x[i] - x[i - 1];
      s01 += d0 * d1;
      s00 += d0 * d0;
    }
  }
  CHECK(std::abs(s01 / s00) < 0.05);
}

TEST_CASE("FBM increment autocovariance matches the closed form") {
  // Shorter ensemble than the acceptance run; same 3-standard-error rule.
  const double alpha = 0.4, H = alpha / 2;
  const std::size_t paths = 2000, L = 200;
  std::vector<double> mean(6, 0.0), sq(6, 0.0);
  for (std::uint64_t p = 0; p < paths; ++p) {
    auto x = generate_fbm(alpha, L, p).positions;
    // One estimate per path: the mean lagged product over the path.
    for (std::size_t k = 0; k <= 5; ++k) {
      double s = 0;
      std::size_t n = 0;
      for (std::size_t i = 1; i + k < L; ++i) {
        s += (x[i] - x[i - 1]) * (x[i + k] - x[i + k - 1]);
        ++n;
      }
      const double est = s / static_cast<double>(n);
      mean[k] += est;
      sq[k] += est * est;
    }
  }
  for (std::size_t k = 0; k <= 5; ++k) {
    const double m = mean[k] / paths;
    const double se = std::sqrt((sq[k] / paths - m * m) / paths);
    CAPTURE(k);
    CHECK(std::abs(m - oracle::fgn_gamma(H, static_cast<double>(k))) < 3 * se);
    CHECK(fgn_autocovariance(H, k) == doctest::Approx(oracle::fgn_gamma(H, static_cast<double>(k))).epsilon(1e-12));
  }
}

TEST_CASE("SBM at alpha 1 has constant increment variance") {
  const std::size_t L = 1000, paths = 10000;
  std::vector<double> var(L - 1, 0.0);
  for (std::uint64_t p = 0; p < paths; ++p) {
    auto x = generate_sbm(1.0, L, p).positions;
    for (std::size_t i = 1; i < L; ++i) var[i - 1] += (x[i] - x[i - 1]) * (x[i] - x[i - 1]);
  }
  // Compare early and late windows of 100 steps each.
  double early = 0, late = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    early += var[i];
    late += var[L - 2 - i];
  }
  CHECK(early / late == doctest::Approx(1.0).epsilon(0.05));
  CHECK(early / (100.0 * paths) == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("ensemble MSD grows with the requested exponent (quick probe)") {
  // Exact-MSD generators need few paths; the full probe grid lives in acceptance.
  for (auto [m, a] : std::vector<std::pair<DiffusionModel, double>>{
           {DiffusionModel::FBM, 0.6}, {DiffusionModel::FBM, 1.4}, {DiffusionModel::SBM, 0.6}, {DiffusionModel::SBM, 1.4}}) {
    oracle::EnsembleMsd msd(oracle::log_lags(10, 499));
    for (std::uint64_t p = 0; p < 2000; ++p) msd.add(generate(m, a, 500, p).positions);
    CAPTURE(model_name(m));
    CHECK(msd.exponent() == doctest::Approx(a).epsilon(0.1 / a));
  }
}

TEST_CASE("marginal exponents stay diffusive and deep ATTM subdiffusion is recovered") {
  for (auto [m, a, tol] : std::vector<std::tuple<DiffusionModel, double, double>>{
           {DiffusionModel::LW, 1.0, 0.1}, {DiffusionModel::ATTM, 0.3, 0.1}, {DiffusionModel::ATTM, 0.5, 0.15}}) {
    oracle::EnsembleMsd msd(oracle::log_lags(100, 999));
    for (std::uint64_t p = 0; p < 4000; ++p) msd.add(generate(m, a, 1000, derive_seed(77, p)).positions);
    CAPTURE(model_name(m));
    CAPTURE(a);
    CHECK(std::abs(msd.exponent() - a) <= tol);
  }
}

TEST_CASE("noise level follows the displacement scale") {
  Trajectory t = generate_fbm(0.8, 1000, 9);
  const double scale = displacement_scale(t.positions);
  double ss = 0;
  std::size_t n = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    Trajectory noisy = add_noise(t, 2.0, s);
    REQUIRE(noisy.snr.has_value());
    CHECK(*noisy.snr == 2.0);
    for (std::size_t i = 0; i < t.length(); ++i) {
      const double d = noisy.positions[i] - t.positions[i];
      ss += d * d;
      ++n;
    }
  }
  CHECK(std::sqrt(ss / n) == doctest::Approx(scale / 2.0).epsilon(0.02));

  ss = 0;
  n = 0;
  Trajectory one = add_noise(t, 1.0, 5);
  for (std::size_t i = 0; i < t.length(); ++i) ss += std::pow(one.positions[i] - t.positions[i], 2), ++n;
  CHECK(std::sqrt(ss / n) == doctest::Approx(scale).epsilon(0.1));
}

TEST_CASE("noise edge cases") {
  Trajectory t = generate_sbm(1.0, 50, 1);
  CHECK(add_noise(t, INFINITY, 3).positions == t.positions);
  CHECK_THROWS_AS(add_noise(t, 0.0, 3), DomainError);
  CHECK_THROWS_AS(add_noise(t, -1.0, 3), DomainError);
  CHECK_THROWS_AS(add_noise(t, std::nan(""), 3), DomainError);
  Trajectory flat = t;
  flat.positions.assign(50, 2.5);
  CHECK_THROWS_AS(add_noise(flat, 1.0, 3), DegenerateInputError);
}

TEST_CASE("normalize: uniform steps, constant path, idempotence") {
  Trajectory t;
  t.positions = {0, 2, 4, 6};
  CHECK(normalize(t).positions == std::vector<double>{0, 1, 2, 3});
  t.positions = {5, 7, 9, 11};
  CHECK(normalize(t).positions == std::vector<double>{0, 1, 2, 3});
  t.positions = {1, 1, 1};
  CHECK_THROWS_AS(normalize(t), DegenerateInputError);
  CHECK(normalize_or_flat(t.positions) == std::vector<double>{0, 0, 0});

  for (std::uint64_t s = 0; s < 100; ++s) {
    auto once = normalize(generate_fbm(0.3 + 0.014 * s, 10 + 9 * s, s));
    auto twice = normalize(once);
    CHECK(once.positions[0] == 0.0);
    CHECK(displacement_scale(once.positions) == doctest::Approx(1.0).epsilon(1e-9));
    for (std::size_t i = 0; i < once.length(); ++i) CHECK(std::abs(once.positions[i] - twice.positions[i]) < 1e-12);
  }
}

TEST_CASE("normalization holds for every generator and length") {
  for (auto m : kAllModels)
    for (std::size_t L : {10u, 37u, 100u, 1000u})
      for (std::uint64_t s = 0; s < 5; ++s) {
        const double a = m == DiffusionModel::LW ? 1.3 : 0.9;
        auto x = normalize_or_flat(generate(m, a, L, s).positions);
        CHECK(x[0] == 0.0);
        const double sc = displacement_scale(x);
        CHECK((sc == 0.0 || std::abs(sc - 1.0) < 1e-9));
      }
}

TEST_CASE("default grid: 39 exponents, 195 nominal kinds, 138 admissible strata") {
  auto grid = default_alpha_grid();
  REQUIRE(grid.size() == 39);
  CHECK(grid.front() == doctest::Approx(0.05));
  CHECK(grid.back() == doctest::Approx(1.95));
  DatasetSpec spec;
  CHECK(nominal_kinds(spec) == 195);
  auto strata = enumerate_strata(spec);
  CHECK(strata.size() == 138);
  std::size_t per[5] = {};
  for (const auto& s : strata) {
    ++per[model_code(s.model)];
    CHECK(admissible_alpha(s.model).contains(s.alpha));
  }
  CHECK(per[0] == 20);
  CHECK(per[1] == 20);
  CHECK(per[2] == 39);
  CHECK(per[3] == 20);
  CHECK(per[4] == 39);
}

TEST_CASE("nested split sizes") {
  Split s = nested_split(0.75, 0.9);
  CHECK(s.train + s.val + s.test == doctest::Approx(1.0).epsilon(1e-15));
  SplitCounts c = split_counts(2000000, s);
  CHECK(c.train == 1350000);
  CHECK(c.val == 150000);
  CHECK(c.test == 500000);
}

TEST_CASE("spec validation") {
  DatasetSpec spec;
  spec.models.clear();
  CHECK_THROWS_AS(validate(spec), ConfigError);
  spec = DatasetSpec{};
  spec.models = {DiffusionModel::LW};
  spec.alpha_grid = {0.2, 0.5};
  CHECK_THROWS_AS(validate(spec), ConfigError);
  spec = DatasetSpec{};
  spec.split = {0.5, 0.2, 0.2};
  CHECK_THROWS_AS(validate(spec), ConfigError);
  spec = DatasetSpec{};
  spec.length_min = 5;
  CHECK_THROWS(validate(spec));
}

TEST_CASE("dataset: stratified, disjoint splits, deterministic files") {
  DatasetSpec spec;
  spec.count = 300;
  spec.length_min = 10;
  spec.length_max = 60;
  spec.snr_values = {1.0, 2.0};
  spec.seed = 77;
  Dataset a = build_dataset(spec);
  REQUIRE(a.items.size() == 300);
  std::vector<std::size_t> all;
  for (auto* ids : {&a.train_ids, &a.val_ids, &a.test_ids}) all.insert(all.end(), ids->begin(), ids->end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);
  CHECK(a.test_ids.size() == 75);

  // Strata counts differ by at most one.
  std::map<std::pair<int, double>, int> counts;
  for (const auto& t : a.items) {
    ++counts[{model_code(t.model), t.alpha}];
    CHECK(t.snr.has_value());
    CHECK(t.length() >= 10);
    CHECK(t.length() <= 60);
  }
  CHECK(counts.size() == 138);
  int lo = 1 << 30, hi = 0;
  for (auto& [k, v] : counts) lo = std::min(lo, v), hi = std::max(hi, v);
  CHECK(hi - lo <= 1);

  auto d1 = scratch("det1"), d2 = scratch("det2");
  write_dataset(a, d1);
  write_dataset(build_dataset(spec), d2);
  for (const char* f : {"trajectories.csv", "labels.csv", "manifest.json"}) CHECK(slurp(d1 / f) == slurp(d2 / f));

  Dataset back = read_dataset(d1 / "manifest.json");
  REQUIRE(back.items.size() == a.items.size());
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    CHECK(back.items[i].positions == a.items[i].positions);
    CHECK(back.items[i].model == a.items[i].model);
    CHECK(back.items[i].alpha == a.items[i].alpha);
    CHECK(back.items[i].snr == a.items[i].snr);
  }
  CHECK(back.test_ids == a.test_ids);

  const std::string manifest = slurp(d1 / "manifest.json");
  for (const char* key : {"\"seed\"", "\"strata\"", "\"splits\"", "\"spec\"", "\"nominal_kinds\": 195"})
    CHECK(manifest.find(key) != std::string::npos);
}

TEST_CASE("a single benchmark cell yields exactly its trajectories") {
  GridSpec g;
  g.models = {DiffusionModel::CTRW};
  g.lengths = {100};
  g.snrs = {1.0};
  g.alphas = {{0.5}};
  g.cell_size = 2000;
  g.seed = 4;
  Dataset ds = build_grid_dataset(g);
  REQUIRE(ds.items.size() == 2000);
  for (const auto& t : ds.items) {
    CHECK(t.model == DiffusionModel::CTRW);
    CHECK(t.alpha == 0.5);
    CHECK(t.length() == 100);
    CHECK(*t.snr == 1.0);
  }
  CHECK(ds.test_ids.size() == 2000);
}

TEST_CASE("benchmark grid cell count") {
  GridSpec g = table_grid(1, 0);
  std::size_t rows = 0;
  for (const auto& a : g.alphas) rows += a.size();
  CHECK(rows == 10 + 10 + 19 + 10 + 19);
  CHECK(g.lengths.size() == 13);
  CHECK(g.cells().size() == 68 * 2 * g.lengths.size());
}

TEST_CASE("file formats") {
  std::vector<double> p{0.0, 0.1, -1.0 / 3.0};
  const std::string line = format_trajectory_line(7, p);
  TrajectoryRecord r = parse_trajectory_line(line);
  CHECK(r.id == 7);
  CHECK(r.positions == p);
  CHECK(line.rfind("7,3,", 0) == 0);

  Trajectory t;
  t.model = DiffusionModel::LW;
  t.alpha = 1.25;
  CHECK(format_label_line(3, t) == "3,3,1.25,");
  t.snr = 2.0;
  CHECK(format_label_line(3, t) == "3,3,1.25,2");

  CHECK_THROWS_AS(parse_trajectory_line("1,3,0,1"), FormatError);
  CHECK_THROWS_AS(parse_trajectory_line("x,1,0"), FormatError);
  CHECK_THROWS_AS(parse_trajectory_line("1,2,0,abc"), FormatError);
  CHECK_THROWS_AS(parse_trajectory_line(""), FormatError);
  for (double v : {0.1, 1e-300, -2.5, 1.0 / 3.0}) CHECK(parse_real(format_real(v)) == v);
}

TEST_CASE("derived seeds are distinct and stable") {
  CHECK(derive_seed(1, std::uint64_t{0}) != derive_seed(1, std::uint64_t{1}));
  CHECK(derive_seed(1, std::uint64_t{0}) != derive_seed(2, std::uint64_t{0}));
  CHECK(derive_seed(5, "split") == derive_seed(5, "split"));
  CHECK(derive_seed(5, "split") != derive_seed(5, "init"));
}

}  // TEST_SUITE

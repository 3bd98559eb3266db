#include "diffuse/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "diffuse/error.hpp"
#include "diffuse/parallel.hpp"
#include "diffuse/rng.hpp"

namespace diffuse {

using nlohmann::json;

namespace {

// Sub-stream tags of a per-item seed.
constexpr std::uint64_t kShapeStream = 0;
constexpr std::uint64_t kPathStream = 1;
constexpr std::uint64_t kNoiseStream = 2;

Trajectory make_item(DiffusionModel model, double alpha, std::size_t length,
                     std::optional<double> snr, std::uint64_t item_seed) {
  Trajectory t = generate(model, alpha, length, derive_seed(item_seed, kPathStream));
  if (snr) {
    // sigma_noise = sigma_disp / snr is zero for a path that never moved.
    if (displacement_scale(t.positions) > 0.0)
      t = add_noise(t, *snr, derive_seed(item_seed, kNoiseStream));
    else
      t.snr = snr;
  }
  t.positions = normalize_or_flat(t.positions);
  t.seed = item_seed;
  return t;
}

json split_json(const Split& s) { return json{{"train", s.train}, {"val", s.val}, {"test", s.test}}; }

std::vector<std::string> model_names(const std::vector<DiffusionModel>& ms) {
  std::vector<std::string> out;
  for (auto m : ms) out.emplace_back(model_name(m));
  return out;
}

void assign_splits(Dataset& ds, const Split& split, std::uint64_t seed) {
  const std::size_t n = ds.items.size();
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(derive_seed(seed, std::string_view("split")));
  std::shuffle(ids.begin(), ids.end(), rng.engine());
  const SplitCounts c = split_counts(n, split);
  ds.train_ids.assign(ids.begin(), ids.begin() + c.train);
  ds.val_ids.assign(ids.begin() + c.train, ids.begin() + c.train + c.val);
  ds.test_ids.assign(ids.begin() + c.train + c.val, ids.end());
  std::sort(ds.train_ids.begin(), ds.train_ids.end());
  std::sort(ds.val_ids.begin(), ds.val_ids.end());
  std::sort(ds.test_ids.begin(), ds.test_ids.end());
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return out;
}

std::size_t parse_index(std::string_view text, const char* what) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty())
    throw FormatError(std::string("bad ") + what + " '" + std::string(text) + "'");
  return v;
}

}  // namespace

Split nested_split(double train_portion, double inner_train) {
  if (!(train_portion > 0.0 && train_portion <= 1.0 && inner_train > 0.0 && inner_train <= 1.0))
    throw DomainError("split portions must lie in (0, 1]");
  return {train_portion * inner_train, train_portion * (1.0 - inner_train), 1.0 - train_portion};
}

SplitCounts split_counts(std::size_t count, const Split& s) {
  SplitCounts c;
  c.test = static_cast<std::size_t>(std::llround(static_cast<double>(count) * s.test));
  c.val = static_cast<std::size_t>(std::llround(static_cast<double>(count) * s.val));
  c.test = std::min(c.test, count);
  c.val = std::min(c.val, count - c.test);
  c.train = count - c.test - c.val;
  return c;
}

std::vector<double> default_alpha_grid() {
  std::vector<double> g;
  for (int k = 1; k < 40; ++k) g.push_back(k / 20.0);
  return g;
}

std::vector<Stratum> enumerate_strata(const DatasetSpec& spec) {
  std::vector<DiffusionModel> models = spec.models;
  std::sort(models.begin(), models.end());
  models.erase(std::unique(models.begin(), models.end()), models.end());
  std::vector<Stratum> out;
  for (auto m : models) {
    const AlphaRange r = admissible_alpha(m);
    for (double a : spec.alpha_grid)
      if (r.contains(a)) out.push_back({m, a, 0});
  }
  return out;
}

std::size_t nominal_kinds(const DatasetSpec& spec) {
  return spec.models.size() * spec.alpha_grid.size();
}

void validate(const DatasetSpec& spec) {
  if (spec.count == 0) throw ConfigError("dataset count must be positive");
  if (spec.models.empty()) throw ConfigError("dataset needs at least one diffusion model");
  if (spec.length_min < 10 || spec.length_max < spec.length_min)
    throw ConfigError("length range must satisfy 10 <= min <= max");
  for (double s : spec.snr_values)
    if (!(s > 0.0)) throw ConfigError("snr values must be positive");
  const double total = spec.split.train + spec.split.val + spec.split.test;
  if (spec.split.train < 0 || spec.split.val < 0 || spec.split.test < 0 ||
      std::abs(total - 1.0) > 1e-9)
    throw ConfigError("split fractions must be non-negative and sum to 1");
  if (enumerate_strata(spec).empty())
    throw ConfigError("alpha grid has no value admissible for the selected models");
}

std::vector<GridCell> GridSpec::cells() const {
  if (alphas.size() != models.size()) throw ConfigError("grid alphas must parallel models");
  std::vector<GridCell> out;
  for (std::size_t mi = 0; mi < models.size(); ++mi)
    for (std::size_t len : lengths)
      for (double snr : snrs)
        for (double a : alphas[mi]) out.push_back({models[mi], len, snr, a});
  return out;
}

GridSpec table_grid(std::size_t cell_size, std::uint64_t seed) {
  GridSpec g;
  g.lengths = {10, 20, 30, 40, 50, 100, 200, 300, 400, 500, 600, 800, 1000};
  g.snrs = {1.0, 2.0};
  auto tenths = [](int lo, int hi) {
    std::vector<double> v;
    for (int k = lo; k <= hi; ++k) v.push_back(k / 10.0);
    return v;
  };
  g.alphas = {tenths(1, 10), tenths(1, 10), tenths(1, 19), tenths(10, 19), tenths(1, 19)};
  g.cell_size = cell_size;
  g.seed = seed;
  return g;
}

std::vector<Trajectory> Dataset::subset(const std::vector<std::size_t>& ids) const {
  std::vector<Trajectory> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(items.at(id));
  return out;
}

Dataset build_dataset(const DatasetSpec& spec) {
  validate(spec);
  std::vector<Stratum> strata = enumerate_strata(spec);
  const std::size_t S = strata.size();
  for (std::size_t i = 0; i < spec.count; ++i) ++strata[i % S].count;

  Dataset ds;
  ds.items.resize(spec.count);
  parallel_for(spec.count, [&](std::size_t i) {
    const std::uint64_t item_seed = derive_seed(spec.seed, i);
    Rng shape(derive_seed(item_seed, kShapeStream));
    const std::size_t length = shape.integer(spec.length_min, spec.length_max);
    std::optional<double> snr;
    if (!spec.snr_values.empty())
      snr = spec.snr_values[shape.integer(0, spec.snr_values.size() - 1)];
    const Stratum& st = strata[i % S];
    ds.items[i] = make_item(st.model, st.alpha, length, snr, item_seed);
  });
  assign_splits(ds, spec.split, spec.seed);

  json strata_j = json::array();
  for (const auto& st : strata)
    strata_j.push_back({{"model", model_name(st.model)}, {"alpha", st.alpha}, {"count", st.count}});
  json m;
  m["format"] = "diffuse-dataset/1";
  m["kind"] = "dataset";
  m["seed"] = spec.seed;
  m["count"] = spec.count;
  m["spec"] = {{"count", spec.count},
               {"length_min", spec.length_min},
               {"length_max", spec.length_max},
               {"models", model_names(spec.models)},
               {"alpha_grid", spec.alpha_grid},
               {"snr_values", spec.snr_values},
               {"seed", spec.seed},
               {"split", split_json(spec.split)}};
  m["preprocessing"] = "normalize: positions[0]=0, unit RMS displacement; flat paths stored as zeros";
  m["nominal_kinds"] = nominal_kinds(spec);
  m["strata"] = strata_j;
  m["splits"] = {{"train", ds.train_ids}, {"val", ds.val_ids}, {"test", ds.test_ids}};
  m["files"] = {{"trajectories", "trajectories.csv"}, {"labels", "labels.csv"}};
  ds.manifest_json = m.dump(1);
  return ds;
}

Dataset build_grid_dataset(const GridSpec& grid) {
  const std::vector<GridCell> cells = grid.cells();
  if (cells.empty()) throw ConfigError("grid has no cells");
  if (grid.cell_size == 0) throw ConfigError("grid cell size must be positive");
  for (std::size_t mi = 0; mi < grid.models.size(); ++mi)
    for (double a : grid.alphas[mi])
      if (!admissible_alpha(grid.models[mi]).contains(a))
        throw ConfigError("grid alpha " + format_real(a) + " not admissible for " +
                          std::string(model_name(grid.models[mi])));
  for (auto len : grid.lengths)
    if (len < 10) throw ConfigError("grid lengths must be >= 10");

  Dataset ds;
  ds.items.resize(cells.size() * grid.cell_size);
  parallel_for(ds.items.size(), [&](std::size_t id) {
    const GridCell& c = cells[id / grid.cell_size];
    ds.items[id] = make_item(c.model, c.alpha, c.length, c.snr, derive_seed(grid.seed, id));
  });
  ds.test_ids.resize(ds.items.size());
  std::iota(ds.test_ids.begin(), ds.test_ids.end(), 0);

  json cells_j = json::array();
  for (const auto& c : cells)
    cells_j.push_back({{"model", model_name(c.model)}, {"length", c.length}, {"snr", c.snr},
                       {"alpha", c.alpha}, {"count", grid.cell_size}});
  json alphas_j = json::object();
  for (std::size_t mi = 0; mi < grid.models.size(); ++mi)
    alphas_j[std::string(model_name(grid.models[mi]))] = grid.alphas[mi];
  json m;
  m["format"] = "diffuse-dataset/1";
  m["kind"] = "grid";
  m["seed"] = grid.seed;
  m["count"] = ds.items.size();
  m["grid"] = {{"models", model_names(grid.models)}, {"lengths", grid.lengths},
               {"snrs", grid.snrs}, {"alphas", alphas_j}, {"cell_size", grid.cell_size},
               {"cell_count", cells.size()}};
  m["preprocessing"] = "normalize: positions[0]=0, unit RMS displacement; flat paths stored as zeros";
  m["strata"] = cells_j;
  m["splits"] = {{"train", json::array()}, {"val", json::array()}, {"test", ds.test_ids}};
  m["files"] = {{"trajectories", "trajectories.csv"}, {"labels", "labels.csv"}};
  ds.manifest_json = m.dump(1);
  return ds;
}

std::string format_real(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

double parse_real(std::string_view text) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty())
    throw FormatError("bad number '" + std::string(text) + "'");
  return v;
}

std::string format_trajectory_line(std::size_t id, std::span<const double> positions) {
  std::string line = std::to_string(id) + "," + std::to_string(positions.size());
  char buf[40];
  for (double p : positions) {
    std::snprintf(buf, sizeof(buf), ",%.17g", p);
    line += buf;
  }
  return line;
}

std::string format_label_line(std::size_t id, const Trajectory& t) {
  return std::to_string(id) + "," + std::to_string(model_code(t.model)) + "," +
         format_real(t.alpha) + "," + (t.snr ? format_real(*t.snr) : std::string());
}

TrajectoryRecord parse_trajectory_line(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  const auto fields = split_fields(line);
  if (fields.size() < 2) throw FormatError("expected 'id,L,p_0,...'");
  TrajectoryRecord rec;
  rec.id = parse_index(fields[0], "id");
  const std::size_t L = parse_index(fields[1], "length");
  if (fields.size() != L + 2)
    throw FormatError("declared length " + std::to_string(L) + " but found " +
                      std::to_string(fields.size() - 2) + " positions");
  rec.positions.reserve(L);
  for (std::size_t k = 0; k < L; ++k) {
    const double v = parse_real(fields[k + 2]);
    if (!std::isfinite(v)) throw FormatError("non-finite position");
    rec.positions.push_back(v);
  }
  return rec;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  std::ofstream traj(dir / "trajectories.csv", std::ios::binary);
  std::ofstream labels(dir / "labels.csv", std::ios::binary);
  std::ofstream manifest(dir / "manifest.json", std::ios::binary);
  if (!traj || !labels || !manifest) throw IoError("cannot write dataset under " + dir.string());
  for (std::size_t id = 0; id < ds.items.size(); ++id) {
    traj << format_trajectory_line(id, ds.items[id].positions) << '\n';
    labels << format_label_line(id, ds.items[id]) << '\n';
  }
  manifest << ds.manifest_json << '\n';
  if (!traj || !labels || !manifest) throw IoError("write failed under " + dir.string());
}

Dataset read_dataset(const std::filesystem::path& manifest_path) {
  json m;
  try {
    m = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  if (m.value("format", "") != "diffuse-dataset/1")
    throw FormatError(manifest_path.string() + ": not a dataset manifest");
  const auto dir = manifest_path.parent_path();
  const std::size_t count = m.at("count").get<std::size_t>();

  Dataset ds;
  ds.items.resize(count);
  std::istringstream traj(read_file(dir / m["files"]["trajectories"].get<std::string>()));
  std::istringstream labels(read_file(dir / m["files"]["labels"].get<std::string>()));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(traj, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      TrajectoryRecord rec = parse_trajectory_line(line);
      if (rec.id >= count) throw FormatError("id out of range");
      ds.items[rec.id].positions = std::move(rec.positions);
    } catch (const FormatError& e) {
      throw FormatError("trajectories.csv line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  lineno = 0;
  while (std::getline(labels, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 4)
      throw FormatError("labels.csv line " + std::to_string(lineno) + ": expected 4 fields");
    const std::size_t id = parse_index(f[0], "id");
    if (id >= count) throw FormatError("labels.csv: id out of range");
    Trajectory& t = ds.items[id];
    t.model = model_from_code(static_cast<int>(parse_index(f[1], "model code")));
    t.alpha = parse_real(f[2]);
    if (!f[3].empty()) t.snr = parse_real(f[3]);
  }
  for (std::size_t id = 0; id < count; ++id)
    if (ds.items[id].positions.empty())
      throw FormatError("trajectory " + std::to_string(id) + " missing");
  const auto& s = m.at("splits");
  ds.train_ids = s.at("train").get<std::vector<std::size_t>>();
  ds.val_ids = s.at("val").get<std::vector<std::size_t>>();
  ds.test_ids = s.at("test").get<std::vector<std::size_t>>();
  ds.manifest_json = m.dump(1);
  return ds;
}

std::uint64_t file_fingerprint(const std::filesystem::path& p) {
  const std::string text = read_file(p);
  return fnv1a(std::as_bytes(std::span(text.data(), text.size())));
}

}  // namespace diffuse

#include "diffuse/cli.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "diffuse/dataset.hpp"
#include "diffuse/error.hpp"
#include "diffuse/eval.hpp"
#include "diffuse/model.hpp"
#include "diffuse/parallel.hpp"
#include "diffuse/train.hpp"

namespace diffuse {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---- small helpers ----

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  out.push_back(cur);
  out.erase(std::remove(out.begin(), out.end(), std::string()), out.end());
  return out;
}

std::size_t parse_count(const std::string& s, const std::string& what) {
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw ConfigError(what + ": '" + s + "' is not a non-negative integer");
  return v;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("write failed: " + p.string());
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

// ---- resolved configuration ----

const std::set<std::string> kTopKeys = {"command", "seed", "threads", "task", "data", "out", "checkpoints",
                                        "grid", "input", "predictions", "curriculum", "kfold", "bins",
                                        "normalize", "verbose", "train", "model", "dataset"};
const std::set<std::string> kDatasetKeys = {"count", "length_min", "length_max", "lengths", "models", "alphas",
                                            "snr", "grid", "cell_size", "split"};

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

struct Resolved {
  std::string command;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  Task task = Task::Regression;
  bool task_given = false;
  std::string data, out, checkpoints, grid, input, predictions;
  bool curriculum = false;
  std::size_t kfold = 0;
  std::string bins;
  bool normalize = false;
  bool verbose = false;
  TrainConfig train;
  ModelConfig model;
  json dataset = json::object();
};

template <typename T>
T get_as(const json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

Resolved resolve(const json& cfg) {
  check_keys(cfg, kTopKeys, "config");
  Resolved r;
  r.command = cfg.value("command", "");
  if (cfg.contains("seed")) r.seed = get_as<std::uint64_t>(cfg, "seed");
  r.threads = cfg.contains("threads") ? get_as<std::size_t>(cfg, "threads") : thread_cap();
  if (cfg.contains("task")) {
    r.task = parse_task(get_as<std::string>(cfg, "task"));
    r.task_given = true;
  }
  for (auto [key, dst] : {std::pair{"data", &r.data}, std::pair{"out", &r.out}, std::pair{"checkpoints", &r.checkpoints},
                          std::pair{"grid", &r.grid}, std::pair{"input", &r.input},
                          std::pair{"predictions", &r.predictions}, std::pair{"bins", &r.bins}})
    if (cfg.contains(key)) *dst = get_as<std::string>(cfg, key);
  if (cfg.contains("curriculum")) r.curriculum = get_as<bool>(cfg, "curriculum");
  if (cfg.contains("kfold")) r.kfold = get_as<std::size_t>(cfg, "kfold");
  if (cfg.contains("normalize")) r.normalize = get_as<bool>(cfg, "normalize");
  if (cfg.contains("verbose")) r.verbose = get_as<bool>(cfg, "verbose");

  json train = cfg.value("train", json::object());
  if (!train.is_object()) throw ConfigError("'train' must be a JSON object");
  // An unspecified patience takes the mode default, capped by the epoch budget.
  if (!train.contains("patience")) {
    std::size_t p = r.curriculum ? TrainConfig::curriculum_defaults().patience : TrainConfig{}.patience;
    if (train.contains("epochs") && train["epochs"].is_number_unsigned())
      p = std::min(p, train["epochs"].get<std::size_t>());
    train["patience"] = p;
  }
  train["seed"] = r.seed;
  train["task"] = std::string(task_name(r.task));
  r.train = TrainConfig::from_json(train.dump());
  r.train.verbose = r.verbose;

  json model = cfg.value("model", json::object());
  if (!model.is_object()) throw ConfigError("'model' must be a JSON object");
  r.model = r.train.apply_to(ModelConfig::from_json(model.dump()));
  // Flags in the train section own heads/dropouts; a model section may only agree.
  for (const char* k : {"heads", "cnn_dropout", "trans_dropout"})
    if (model.contains(k) && train.contains(k) && model[k] != train[k])
      throw ConfigError(std::string("'") + k + "' differs between model and train sections");
  if (model.contains("heads") && !train.contains("heads")) r.model.heads = r.train.heads = model["heads"].get<std::size_t>();
  if (model.contains("cnn_dropout") && !train.contains("cnn_dropout"))
    r.model.cnn_dropout = r.train.cnn_dropout = model["cnn_dropout"].get<double>();
  if (model.contains("trans_dropout") && !train.contains("trans_dropout"))
    r.model.trans_dropout = r.train.trans_dropout = model["trans_dropout"].get<double>();
  r.model.validate();

  r.dataset = cfg.value("dataset", json::object());
  check_keys(r.dataset, kDatasetKeys, "dataset section");
  return r;
}

json echo(const Resolved& r) {
  json j;
  j["command"] = r.command;
  j["seed"] = r.seed;
  j["threads"] = r.threads;
  if (r.task_given || r.command == "train") j["task"] = std::string(task_name(r.task));
  for (auto [key, v] : {std::pair{"data", &r.data}, std::pair{"out", &r.out}, std::pair{"checkpoints", &r.checkpoints},
                        std::pair{"grid", &r.grid}, std::pair{"input", &r.input},
                        std::pair{"predictions", &r.predictions}, std::pair{"bins", &r.bins}})
    if (!v->empty()) j[key] = *v;
  if (r.command == "train") {
    j["curriculum"] = r.curriculum;
    j["kfold"] = r.kfold;
    json t = json::parse(r.train.to_json());
    t.erase("seed");
    t.erase("task");
    j["train"] = t;
    json m = json::parse(r.model.to_json());
    for (const char* k : {"heads", "cnn_dropout", "trans_dropout", "head_out"}) m.erase(k);
    j["model"] = m;
  }
  if (r.command == "predict") j["normalize"] = r.normalize;
  if (r.command == "generate") j["dataset"] = r.dataset;
  return j;
}

// ---- generate ----

std::vector<DiffusionModel> models_of(const json& ds) {
  if (!ds.contains("models")) return {kAllModels.begin(), kAllModels.end()};
  std::vector<DiffusionModel> out;
  for (const auto& m : ds["models"]) out.push_back(parse_model(m.get<std::string>()));
  if (out.empty()) throw ConfigError("model list is empty");
  return out;
}

std::vector<double> doubles_of(const json& j, const char* what) {
  try {
    return j.get<std::vector<double>>();
  } catch (const json::exception&) {
    throw ConfigError(std::string(what) + " must be a list of numbers");
  }
}

void run_generate(Resolved& r) {
  if (r.out.empty()) throw ConfigError("generate needs --out");
  json& ds = r.dataset;
  Dataset data;
  if (ds.value("grid", false)) {
    const std::size_t cell = ds.value("cell_size", std::size_t{2000});
    GridSpec full = table_grid(cell, r.seed);
    GridSpec g = full;
    g.models = models_of(ds);
    g.alphas.clear();
    for (auto m : g.models) {
      const auto idx = static_cast<std::size_t>(std::find(full.models.begin(), full.models.end(), m) - full.models.begin());
      std::vector<double> a = full.alphas[idx];
      if (ds.contains("alphas")) {
        a.clear();
        for (double v : doubles_of(ds["alphas"], "alphas"))
          if (admissible_alpha(m).contains(v)) a.push_back(v);
      }
      if (a.empty()) throw ConfigError("no requested alpha is admissible for " + std::string(model_name(m)));
      g.alphas.push_back(std::move(a));
    }
    if (ds.contains("lengths")) g.lengths = ds["lengths"].get<std::vector<std::size_t>>();
    if (ds.contains("snr")) g.snrs = doubles_of(ds["snr"], "snr");
    data = build_grid_dataset(g);
  } else {
    DatasetSpec spec;
    spec.seed = r.seed;
    spec.count = ds.value("count", spec.count);
    spec.length_min = ds.value("length_min", spec.length_min);
    spec.length_max = ds.value("length_max", spec.length_max);
    if (ds.contains("lengths")) {
      auto l = ds["lengths"].get<std::vector<std::size_t>>();
      if (l.size() != 1) throw ConfigError("a dataset takes a length range A-B, not a list");
      spec.length_min = spec.length_max = l[0];
    }
    spec.models = models_of(ds);
    if (ds.contains("alphas")) spec.alpha_grid = doubles_of(ds["alphas"], "alphas");
    if (ds.contains("snr")) spec.snr_values = doubles_of(ds["snr"], "snr");
    if (ds.contains("split")) {
      auto s = doubles_of(ds["split"], "split");
      if (s.size() != 3) throw ConfigError("split takes three fractions train,val,test");
      spec.split = {s[0], s[1], s[2]};
    }
    data = build_dataset(spec);
  }
  write_dataset(data, r.out);
  write_text(fs::path(r.out) / "resolved_config.json", echo(r).dump(2) + "\n");
}

// ---- train ----

std::vector<LengthBin> parse_bins(const std::string& text) {
  std::vector<LengthBin> bins;
  for (const auto& item : split_list(text)) {
    const auto dash = item.find('-');
    if (dash == std::string::npos) throw ConfigError("bin '" + item + "' must look like LO-HI");
    LengthBin b{parse_count(item.substr(0, dash), "bin"), parse_count(item.substr(dash + 1), "bin")};
    if (b.lo > b.hi || b.lo < kMinInputLength) throw ConfigError("bin '" + item + "' is empty or below length 10");
    bins.push_back(b);
  }
  if (bins.empty()) throw ConfigError("no bins given");
  return bins;
}

std::string bin_stem(const LengthBin& b) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "bin_%04zu_%04zu", b.lo, b.hi);
  return buf;
}

void run_train(Resolved& r) {
  if (r.data.empty()) throw ConfigError("train needs --data");
  if (r.out.empty()) throw ConfigError("train needs --out");
  const Dataset ds = read_dataset(r.data);
  const fs::path out(r.out);
  fs::create_directories(out);
  ModelCard card;
  card.config = r.model;
  card.seed = r.seed;
  card.manifest_hash = hex64(file_fingerprint(r.data));
  card.optimizer = r.train.optimizer_description();

  if (r.kfold > 0) {
    KFoldReport rep = kfold_validate(ds.items, r.kfold, r.model, r.train);
    write_text(out / "kfold.csv", rep.to_csv());
  } else if (r.curriculum) {
    std::vector<LengthBin> bins;
    if (!r.bins.empty()) {
      bins = parse_bins(r.bins);
    } else {
      for (const auto& b : curriculum_bins())
        if (std::any_of(ds.items.begin(), ds.items.end(), [&](const Trajectory& t) { return b.contains(t.length()); }))
          bins.push_back(b);
      if (bins.empty()) throw TrainError("no trajectory falls in any curriculum bin");
    }
    std::vector<BinData> data(bins.size());
    auto fill = [&](const std::vector<std::size_t>& ids, std::vector<Trajectory> BinData::*part) {
      for (std::size_t id : ids)
        if (auto b = bin_index(bins, ds.items[id].length())) (data[*b].*part).push_back(ds.items[id]);
    };
    fill(ds.train_ids, &BinData::train);
    fill(ds.val_ids, &BinData::val);
    fill(ds.test_ids, &BinData::test);
    CurriculumResult res = curriculum_train(bins, data, r.model, r.train, [&](const CurriculumRun& run) {
      write_text(out / "history" / ("round" + std::to_string(run.round) + "_" + bin_stem(bins[run.bin]) + ".csv"),
                 run.history.to_csv());
    });
    for (std::size_t b = 0; b < bins.size(); ++b) {
      ModelCard c = card;
      c.length_bin = std::make_pair(bins[b].lo, bins[b].hi);
      save_model(out / (bin_stem(bins[b]) + ".ckpt"), res.models[res.selected[b]], c);
    }
    write_text(out / "selection.csv", res.selection_csv());
    write_text(out / "matrix.csv", res.matrix_csv());
    std::string runs = "order,round,bin,initial_fingerprint,final_fingerprint,best_epoch,stop_epoch\n";
    for (std::size_t i = 0; i < res.runs.size(); ++i) {
      const auto& run = res.runs[i];
      runs += std::to_string(i + 1) + "," + std::to_string(run.round) + "," + bins[run.bin].label() + "," +
              hex64(run.initial_fingerprint) + "," + hex64(run.final_fingerprint) + "," +
              std::to_string(run.history.best_epoch) + "," + std::to_string(run.history.stop_epoch) + "\n";
    }
    write_text(out / "runs.csv", runs);
  } else {
    TrainResult res = train_once(r.model, ds.subset(ds.train_ids), ds.subset(ds.val_ids), r.train);
    save_model(out / "model.ckpt", res.params, card);
    write_text(out / "history.csv", res.history.to_csv());
    if (!ds.test_ids.empty()) {
      const double m = evaluate_metric(res.params, ds.subset(ds.test_ids));
      write_text(out / "test_metric.txt",
                 std::string(r.task == Task::Regression ? "mae " : "accuracy ") + format_real(m) + "\n");
    }
  }
  write_text(out / "resolved_config.json", echo(r).dump(2) + "\n");
}

// ---- evaluate / predict / report ----

void check_task(const Resolved& r, Task actual) {
  if (r.task_given && r.task != actual)
    throw ConfigError("--task " + std::string(task_name(r.task)) + " but the checkpoints are for task " +
                      std::string(task_name(actual)));
}

void run_evaluate(Resolved& r) {
  if (r.checkpoints.empty() || r.grid.empty() || r.out.empty())
    throw ConfigError("evaluate needs --checkpoints, --grid and --out");
  const CompiledModel cm = load_compiled(r.checkpoints);
  check_task(r, cm.task);
  const Dataset ds = read_dataset(r.grid);
  const EvalReport rep = sliced_report(cm, ds);
  write_report(rep, r.out);
  write_text(fs::path(r.out) / "resolved_config.json", echo(r).dump(2) + "\n");
}

void run_predict(Resolved& r, std::ostream& err) {
  if (r.checkpoints.empty() || r.input.empty() || r.out.empty())
    throw ConfigError("predict needs --checkpoints, --input and --out");
  const CompiledModel cm = load_compiled(r.checkpoints);
  check_task(r, cm.task);
  std::istringstream in(read_text(r.input));

  std::vector<Trajectory> items;
  std::vector<std::size_t> ids;
  std::string errors = "line,message\n";
  std::size_t n_errors = 0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    try {
      TrajectoryRecord rec = parse_trajectory_line(line);
      if (rec.positions.size() < kMinInputLength)
        throw DomainError("trajectory shorter than " + std::to_string(kMinInputLength));
      cm.route(rec.positions.size());
      Trajectory t;
      t.positions = r.normalize ? normalize_or_flat(rec.positions) : std::move(rec.positions);
      items.push_back(std::move(t));
      ids.push_back(rec.id);
    } catch (const Error& e) {
      ++n_errors;
      std::string msg = e.what();
      std::replace(msg.begin(), msg.end(), ',', ';');
      errors += std::to_string(lineno) + "," + msg + "\n";
      err << "warning: line " << lineno << ": " << e.what() << "\n";
    }
  }
  if (items.empty() && n_errors == 0) err << "warning: " << r.input << " contains no trajectories\n";

  std::string text = cm.task == Task::Regression ? "id,alpha_pred\n" : "id,label,prob0,prob1,prob2,prob3,prob4\n";
  if (!items.empty()) {
    const auto rows = predict_all(cm, items);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      text += std::to_string(ids[i]);
      if (cm.task == Task::Regression) {
        text += "," + format_real(rows[i].pred_alpha);
      } else {
        text += "," + std::to_string(rows[i].pred_label);
        for (double p : rows[i].probabilities) text += "," + format_real(p);
      }
      text += "\n";
    }
  }
  write_text(r.out, text);
  write_text(r.out + ".errors.csv", errors);
  write_text(r.out + ".resolved_config.json", echo(r).dump(2) + "\n");
}

void run_report(Resolved& r) {
  if (r.predictions.empty() || r.grid.empty() || r.out.empty())
    throw ConfigError("report needs --predictions, --grid and --out");
  const Dataset ds = read_dataset(r.grid);
  std::istringstream in(read_text(r.predictions));
  std::string line;
  if (!std::getline(in, line)) throw FormatError(r.predictions + ": empty predictions file");
  Task task;
  if (line == "id,alpha_pred") task = Task::Regression;
  else if (line.rfind("id,label,", 0) == 0) task = Task::Classification;
  else throw FormatError(r.predictions + ": unrecognised header '" + line + "'");
  check_task(r, task);
  std::vector<PredictionRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_list(line);
    const std::size_t want = task == Task::Regression ? 2 : 2 + kNumModels;
    if (f.size() != want)
      throw FormatError(r.predictions + " line " + std::to_string(lineno) + ": expected " + std::to_string(want) +
                        " fields");
    PredictionRow p;
    p.id = parse_count(f[0], "id");
    if (p.id >= ds.items.size())
      throw FormatError(r.predictions + " line " + std::to_string(lineno) + ": id not in the grid");
    p.true_alpha = ds.items[p.id].alpha;
    p.true_label = model_code(ds.items[p.id].model);
    if (task == Task::Regression) {
      p.pred_alpha = parse_real(f[1]);
    } else {
      p.pred_label = static_cast<int>(parse_count(f[1], "label"));
      if (p.pred_label >= static_cast<int>(kNumModels)) throw FormatError("label out of range");
      for (std::size_t c = 0; c < kNumModels; ++c) p.probabilities[c] = parse_real(f[2 + c]);
    }
    rows.push_back(p);
  }
  const EvalReport rep = build_report(task, ds.items, rows, expected_cells(ds));
  write_report(rep, r.out);
  write_text(fs::path(r.out) / "resolved_config.json", echo(r).dump(2) + "\n");
}

// ---- argument parsing ----

// Binds one flag to a location in the configuration JSON.
struct Binding {
  CLI::App* sub;
  CLI::Option* opt;
  std::function<void(json&)> apply;
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Anomalous-diffusion trajectory generator and ConvTransformer trainer", "diffuse"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::vector<Binding> bindings;
  // Storage must outlive parsing; one slot per flag name.
  std::map<std::string, std::string> strings;
  std::map<std::string, bool> flags;

  auto text_flag = [&](CLI::App* sub, const std::string& name, const std::string& desc,
                       std::function<void(json&, const std::string&)> apply) {
    auto* o = sub->add_option(name, strings[sub->get_name() + name], desc);
    bindings.push_back({sub, o, [&strings, key = sub->get_name() + name, apply](json& j) { apply(j, strings[key]); }});
  };
  auto bool_flag = [&](CLI::App* sub, const std::string& name, const std::string& desc, const std::string& key) {
    auto* o = sub->add_flag(name, flags[sub->get_name() + name], desc);
    bindings.push_back({sub, o, [key](json& j) { j[key] = true; }});
  };
  auto put = [](std::string key) {
    return [key](json& j, const std::string& v) { j[key] = v; };
  };
  auto put_count = [](std::vector<std::string> path) {
    return [path](json& j, const std::string& v) {
      json* t = &j;
      for (std::size_t i = 0; i + 1 < path.size(); ++i) t = &(*t)[path[i]];
      (*t)[path.back()] = parse_count(v, "--" + path.back());
    };
  };
  auto put_real = [](std::vector<std::string> path) {
    return [path](json& j, const std::string& v) {
      json* t = &j;
      for (std::size_t i = 0; i + 1 < path.size(); ++i) t = &(*t)[path[i]];
      try {
        (*t)[path.back()] = parse_real(v);
      } catch (const Error&) {
        throw ConfigError("--" + path.back() + ": '" + v + "' is not a number");
      }
    };
  };

  std::map<std::string, std::string> config_paths;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_paths[sub->get_name()], "JSON run configuration; flags override it");
    text_flag(sub, "--seed", "Global seed (default 0)", put_count({"seed"}));
    text_flag(sub, "--threads", "Worker thread cap (default $DIFFUSE_THREADS or all cores)", put_count({"threads"}));
  };

  auto* gen = app.add_subcommand("generate", "Generate a labelled dataset or an evaluation grid");
  common(gen);
  text_flag(gen, "--out", "Output directory", put("out"));
  text_flag(gen, "--models", "Comma list of models (ATTM,CTRW,FBM,LW,SBM or codes)", [](json& j, const std::string& v) {
    j["dataset"]["models"] = split_list(v);
  });
  text_flag(gen, "--alphas", "Comma list of exponents (default 0.05 grid; grid mode: per-model 0.1 grid)",
            [](json& j, const std::string& v) {
              std::vector<double> a;
              for (const auto& s : split_list(v)) a.push_back(parse_real(s));
              j["dataset"]["alphas"] = a;
            });
  text_flag(gen, "--lengths", "Length range A-B for datasets, or comma list of lengths for grids",
            [](json& j, const std::string& v) {
              const auto dash = v.find('-');
              if (dash != std::string::npos) {
                j["dataset"]["length_min"] = parse_count(v.substr(0, dash), "--lengths");
                j["dataset"]["length_max"] = parse_count(v.substr(dash + 1), "--lengths");
              } else {
                std::vector<std::size_t> l;
                for (const auto& s : split_list(v)) l.push_back(parse_count(s, "--lengths"));
                j["dataset"]["lengths"] = l;
              }
            });
  text_flag(gen, "--snr", "Comma list of signal-to-noise ratios (default noiseless)", [](json& j, const std::string& v) {
    std::vector<double> s;
    for (const auto& x : split_list(v)) s.push_back(parse_real(x));
    j["dataset"]["snr"] = s;
  });
  text_flag(gen, "--count", "Number of trajectories (dataset mode)", put_count({"dataset", "count"}));
  text_flag(gen, "--cell-size", "Trajectories per grid cell (grid mode, default 2000)", put_count({"dataset", "cell_size"}));
  gen->add_flag("--grid", flags["generate--grid"], "Build the full factorial evaluation grid");
  bindings.push_back({gen, gen->get_option("--grid"), [](json& j) { j["dataset"]["grid"] = true; }});

  auto* train = app.add_subcommand("train", "Train a model, a k-fold study, or a length-bin curriculum");
  common(train);
  text_flag(train, "--task", "alpha (exponent regression) or model (classification)", put("task"));
  text_flag(train, "--data", "Dataset manifest.json", put("data"));
  text_flag(train, "--out", "Output directory", put("out"));
  bool_flag(train, "--curriculum", "Two-round length-bin curriculum", "curriculum");
  text_flag(train, "--kfold", "Run K-fold validation instead of a single fit", put_count({"kfold"}));
  text_flag(train, "--bins", "Curriculum bins, e.g. 10-20,21-30 (default: the twelve standard bins with data)",
            put("bins"));
  text_flag(train, "--epochs", "Maximum epochs (default 100)", put_count({"train", "epochs"}));
  text_flag(train, "--patience", "Early-stopping patience (default 10, curriculum 5)", put_count({"train", "patience"}));
  text_flag(train, "--batch-size", "Batch size (default 32)", put_count({"train", "batch_size"}));
  text_flag(train, "--lr", "Learning rate (default 2.133e-4)", put_real({"train", "learn_rate"}));
  text_flag(train, "--heads", "Attention heads (default 16)", put_count({"train", "heads"}));
  text_flag(train, "--cnn-dropout", "Dropout after each convolution (default 0.05)", put_real({"train", "cnn_dropout"}));
  text_flag(train, "--optimizer", "adam or sgd", [](json& j, const std::string& v) { j["train"]["optimizer"] = v; });
  bool_flag(train, "--positional-encoding", "Add sinusoidal position encodings (ablation)", "__pe");
  bool_flag(train, "--verbose", "Per-epoch progress on stderr", "verbose");

  auto* evaluate = app.add_subcommand("evaluate", "Score checkpoints on an evaluation grid");
  common(evaluate);
  text_flag(evaluate, "--task", "alpha or model; checked against the checkpoints", put("task"));
  text_flag(evaluate, "--checkpoints", "Checkpoint directory (or a single .ckpt)", put("checkpoints"));
  text_flag(evaluate, "--grid", "Grid manifest.json", put("grid"));
  text_flag(evaluate, "--out", "Output directory", put("out"));

  auto* predict = app.add_subcommand("predict", "Predict exponents or models for a trajectory file");
  common(predict);
  text_flag(predict, "--task", "alpha or model; checked against the checkpoints", put("task"));
  text_flag(predict, "--checkpoints", "Checkpoint directory (or a single .ckpt)", put("checkpoints"));
  text_flag(predict, "--input", "Trajectory file: id,L,p_0,...", put("input"));
  text_flag(predict, "--out", "Prediction file", put("out"));
  bool_flag(predict, "--normalize", "Standardize each input trajectory first", "normalize");

  auto* report = app.add_subcommand("report", "Build a sliced report from a prediction file and its grid");
  common(report);
  text_flag(report, "--task", "alpha or model; checked against the prediction file", put("task"));
  text_flag(report, "--predictions", "Output of predict", put("predictions"));
  text_flag(report, "--grid", "Grid manifest.json the predictions refer to", put("grid"));
  text_flag(report, "--out", "Output directory", put("out"));

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.front()->help());
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error[usage]: " << e.what() << "\n";
    return kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  try {
    json cfg = json::object();
    if (const std::string& path = config_paths[command]; !path.empty()) {
      try {
        cfg = json::parse(read_text(path));
      } catch (const json::exception& e) {
        throw FormatError(path + ": " + e.what());
      }
      check_keys(cfg, kTopKeys, path);
      if (cfg.contains("command") && cfg["command"] != command)
        throw ConfigError(path + " was written for '" + cfg["command"].get<std::string>() + "', not '" + command + "'");
    }
    for (const auto& b : bindings)
      if (b.sub == sub && b.opt->count() > 0) b.apply(cfg);
    bool pe = false;
    if (cfg.contains("__pe")) {
      pe = true;
      cfg.erase("__pe");
    }
    if (pe) cfg["model"]["positional_encoding"] = "sinusoidal";
    cfg["command"] = command;

    Resolved r = resolve(cfg);
    set_thread_cap(r.threads);
    if (command == "generate") run_generate(r);
    else if (command == "train") run_train(r);
    else if (command == "evaluate") run_evaluate(r);
    else if (command == "predict") run_predict(r, err);
    else if (command == "report") run_report(r);
    return kExitOk;
  } catch (const Error& e) {
    err << "error[" << e.kind() << "]: " << e.what() << "\n";
  } catch (const json::exception& e) {
    err << "error[format]: " << e.what() << "\n";
  } catch (const std::exception& e) {
    err << "error[internal]: " << e.what() << "\n";
  }
  return kExitFailure;
}

}  // namespace diffuse

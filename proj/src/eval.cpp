#include "diffuse/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "diffuse/error.hpp"

namespace diffuse {

using nlohmann::json;

// ---- metrics ----

namespace {

template <typename T>
void require_pair(std::span<const T> a, std::span<const T> b, const char* what) {
  if (a.size() != b.size())
    throw DomainError(std::string(what) + ": " + std::to_string(a.size()) + " predictions vs " +
                      std::to_string(b.size()) + " labels");
  if (a.empty()) throw DomainError(std::string(what) + ": empty input");
}

void require_labels(std::span<const int> v, const char* what) {
  for (int x : v)
    if (x < 0 || x >= static_cast<int>(kNumModels))
      throw DomainError(std::string(what) + ": label " + std::to_string(x) + " outside 0..4");
}

}  // namespace

double mae(std::span<const double> preds, std::span<const double> trues) {
  require_pair(preds, trues, "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += std::abs(preds[i] - trues[i]);
  return s / static_cast<double>(preds.size());
}

Confusion confusion_matrix(std::span<const int> preds, std::span<const int> trues) {
  require_pair(preds, trues, "confusion_matrix");
  require_labels(preds, "confusion_matrix");
  require_labels(trues, "confusion_matrix");
  Confusion c{};
  for (std::size_t i = 0; i < preds.size(); ++i) ++c[trues[i]][preds[i]];
  return c;
}

std::size_t confusion_total(const Confusion& c) {
  std::size_t n = 0;
  for (const auto& row : c)
    for (std::size_t v : row) n += v;
  return n;
}

double micro_f1_from_confusion(const Confusion& c) {
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t k = 0; k < kNumModels; ++k) {
    tp += c[k][k];
    for (std::size_t j = 0; j < kNumModels; ++j)
      if (j != k) {
        fp += c[j][k];
        fn += c[k][j];
      }
  }
  const double denom = static_cast<double>(tp) + 0.5 * static_cast<double>(fp + fn);
  if (denom == 0.0) throw DomainError("micro_f1: empty confusion matrix");
  return static_cast<double>(tp) / denom;
}

double micro_f1(std::span<const int> preds, std::span<const int> trues) {
  return micro_f1_from_confusion(confusion_matrix(preds, trues));
}

double accuracy(std::span<const int> preds, std::span<const int> trues) {
  require_pair(preds, trues, "accuracy");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == trues[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

std::string confusion_csv(const Confusion& c) {
  std::string s = "true\\pred";
  for (auto m : kAllModels) s += "," + std::string(model_name(m));
  s += "\n";
  for (std::size_t i = 0; i < kNumModels; ++i) {
    s += std::string(model_name(kAllModels[i]));
    for (std::size_t j = 0; j < kNumModels; ++j) s += "," + std::to_string(c[i][j]);
    s += "\n";
  }
  return s;
}

// ---- compiled model ----

CompiledModel CompiledModel::single(ModelParams params) {
  CompiledModel c;
  c.task = params.config.task();
  c.models.push_back(std::move(params));
  return c;
}

const ModelParams& CompiledModel::route(std::size_t length) const {
  if (models.empty()) throw ConfigError("compiled model has no checkpoints");
  if (bins.empty()) return models.front();
  if (auto i = bin_index(bins, length)) return models[*i];
  throw DomainError("no checkpoint serves trajectory length " + std::to_string(length));
}

CompiledModel load_compiled(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    if (std::filesystem::is_regular_file(dir)) return CompiledModel::single(load_model(dir).params);
    throw IoError("checkpoint directory " + dir.string() + " does not exist");
  }
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ckpt") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no .ckpt files under " + dir.string());

  std::vector<LoadedModel> loaded;
  for (const auto& f : files) loaded.push_back(load_model(f));
  const bool routed = loaded.front().card.length_bin.has_value();
  CompiledModel c;
  c.task = loaded.front().params.config.task();
  for (auto& lm : loaded) {
    if (lm.params.config.task() != c.task) throw ConfigError("checkpoints under " + dir.string() + " mix tasks");
    if (lm.card.length_bin.has_value() != routed)
      throw ConfigError("checkpoints under " + dir.string() + " mix routed and unrouted cards");
  }
  if (!routed) {
    if (loaded.size() != 1)
      throw ConfigError(std::to_string(loaded.size()) + " unrouted checkpoints under " + dir.string() +
                        "; expected one");
    c.models.push_back(std::move(loaded.front().params));
    return c;
  }
  std::sort(loaded.begin(), loaded.end(),
            [](const LoadedModel& a, const LoadedModel& b) { return a.card.length_bin < b.card.length_bin; });
  for (auto& lm : loaded) {
    c.bins.push_back({lm.card.length_bin->first, lm.card.length_bin->second});
    c.models.push_back(std::move(lm.params));
  }
  return c;
}

std::vector<PredictionRow> predict_all(const CompiledModel& model, const std::vector<Trajectory>& items,
                                       std::span<const std::size_t> ids) {
  std::vector<std::size_t> all;
  if (ids.empty()) {
    all.resize(items.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    ids = all;
  }
  std::vector<PredictionRow> rows(ids.size());
  // Group by the checkpoint that serves each row.
  std::map<const ModelParams*, std::vector<std::size_t>> groups;
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const Trajectory& t = items.at(ids[r]);
    rows[r].id = ids[r];
    rows[r].true_alpha = t.alpha;
    rows[r].true_label = model_code(t.model);
    groups[&model.route(t.length())].push_back(r);
  }
  for (auto& [params, rs] : groups) {
    std::vector<std::vector<double>> series;
    series.reserve(rs.size());
    for (std::size_t r : rs) series.push_back(items[ids[r]].positions);
    if (model.task == Task::Regression) {
      auto p = predict_alpha_many(*params, series);
      for (std::size_t k = 0; k < rs.size(); ++k) rows[rs[k]].pred_alpha = p[k];
    } else {
      auto p = predict_model_many(*params, series);
      for (std::size_t k = 0; k < rs.size(); ++k) {
        rows[rs[k]].pred_label = model_code(p[k].label);
        rows[rs[k]].probabilities = p[k].probabilities;
      }
    }
  }
  return rows;
}

// ---- reports ----

namespace {

std::string snr_text(const std::optional<double>& snr) { return snr ? format_real(*snr) : std::string("none"); }

struct Accum {
  double sum = 0.0;  // absolute errors or hits
  std::size_t n = 0;
  double metric() const { return sum / static_cast<double>(n); }
};

}  // namespace

EvalReport build_report(Task task, const std::vector<Trajectory>& items,
                        const std::vector<PredictionRow>& predictions, const std::vector<CellKey>& expected) {
  EvalReport rep;
  rep.task = task;
  rep.predictions = predictions;
  std::map<CellKey, Accum> cells;
  std::map<std::string, Confusion> by_snr;
  std::vector<int> preds, trues;
  double total = 0.0;
  for (const auto& p : predictions) {
    const Trajectory& t = items.at(p.id);
    CellKey key{t.model, t.length(), t.snr, t.alpha};
    const double score = task == Task::Regression ? std::abs(p.pred_alpha - p.true_alpha)
                                                  : (p.pred_label == p.true_label ? 1.0 : 0.0);
    Accum& a = cells[key];
    a.sum += score;
    ++a.n;
    total += score;
    if (task == Task::Classification) {
      preds.push_back(p.pred_label);
      trues.push_back(p.true_label);
      auto& c = by_snr.try_emplace(snr_text(t.snr), Confusion{}).first->second;
      ++c[p.true_label][p.pred_label];
    }
  }
  rep.n = predictions.size();
  if (rep.n > 0) rep.overall = total / static_cast<double>(rep.n);
  if (task == Task::Classification && rep.n > 0) {
    rep.confusion = confusion_matrix(preds, trues);
    rep.overall = micro_f1_from_confusion(rep.confusion);
  }
  for (auto& [snr, c] : by_snr) rep.confusion_by_snr.emplace_back(snr, c);

  for (const auto& [key, a] : cells) rep.cells.push_back({key, a.metric(), a.n});
  for (const auto& key : expected)
    if (!cells.count(key)) rep.missing_cells.push_back(key);

  // Marginals as cell-size-weighted means of the cell metrics.
  auto marginal = [&](const std::string& axis, auto value_of, auto order_of) {
    std::map<decltype(order_of(rep.cells.front().key)), std::pair<std::string, std::pair<double, std::size_t>>> m;
    for (const auto& c : rep.cells) {
      auto& slot = m[order_of(c.key)];
      slot.first = value_of(c.key);
      slot.second.first += c.metric * static_cast<double>(c.n);
      slot.second.second += c.n;
    }
    for (const auto& [ord, v] : m)
      rep.slices.push_back({axis, v.first, v.second.first / static_cast<double>(v.second.second), v.second.second});
  };
  if (!rep.cells.empty()) {
    marginal("model", [](const CellKey& k) { return std::string(model_name(k.model)); },
             [](const CellKey& k) { return model_code(k.model); });
    marginal("length", [](const CellKey& k) { return std::to_string(k.length); },
             [](const CellKey& k) { return k.length; });
    marginal("snr", [](const CellKey& k) { return snr_text(k.snr); },
             [](const CellKey& k) { return k.snr.value_or(-1.0); });
    marginal("alpha", [](const CellKey& k) { return format_real(k.alpha); },
             [](const CellKey& k) { return k.alpha; });
  }
  return rep;
}

std::vector<CellKey> expected_cells(const Dataset& ds) {
  std::vector<CellKey> out;
  json m = json::parse(ds.manifest_json);
  if (m.value("kind", "") != "grid") return out;
  for (const auto& c : m.at("strata"))
    out.push_back({parse_model(c.at("model").get<std::string>()), c.at("length").get<std::size_t>(),
                   c.at("snr").get<double>(), c.at("alpha").get<double>()});
  return out;
}

EvalReport sliced_report(const CompiledModel& model, const Dataset& grid) {
  if (grid.test_ids.empty()) throw ConfigError("grid has no test trajectories");
  auto preds = predict_all(model, grid.items, grid.test_ids);
  return build_report(model.task, grid.items, preds, expected_cells(grid));
}

std::string EvalReport::report_csv() const {
  std::string s = "model,length,snr,alpha,metric,n\n";
  for (const auto& c : cells)
    s += std::string(model_name(c.key.model)) + "," + std::to_string(c.key.length) + "," +
         (c.key.snr ? format_real(*c.key.snr) : "") + "," + format_real(c.key.alpha) + "," +
         format_real(c.metric) + "," + std::to_string(c.n) + "\n";
  return s;
}

std::string EvalReport::summary_text() const {
  std::ostringstream o;
  o << "task: " << task_name(task) << "\n";
  o << "metric: " << metric_name() << "\n";
  o << "trajectories: " << n << "\n";
  o << "cells: " << cells.size() << "\n";
  o << "overall: " << format_real(overall) << "\n";
  for (const auto& s : slices)
    o << s.axis << " " << s.value << ": " << format_real(s.metric) << " (n=" << s.n << ")\n";
  if (!missing_cells.empty()) {
    o << "missing cells: " << missing_cells.size() << "\n";
    for (const auto& k : missing_cells)
      o << "  " << model_name(k.model) << " length " << k.length << " snr " << snr_text(k.snr) << " alpha "
        << format_real(k.alpha) << "\n";
  }
  return o.str();
}

std::string EvalReport::predictions_csv() const {
  std::string s = task == Task::Regression ? "id,alpha_true,alpha_pred\n" : "id,label_true,label_pred,prob0,prob1,prob2,prob3,prob4\n";
  for (const auto& p : predictions) {
    s += std::to_string(p.id);
    if (task == Task::Regression) {
      s += "," + format_real(p.true_alpha) + "," + format_real(p.pred_alpha);
    } else {
      s += "," + std::to_string(p.true_label) + "," + std::to_string(p.pred_label);
      for (double q : p.probabilities) s += "," + format_real(q);
    }
    s += "\n";
  }
  return s;
}

namespace {

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("write failed: " + p.string());
}

}  // namespace

void write_report(const EvalReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "report.csv", report.report_csv());
  write_text(dir / "summary.txt", report.summary_text());
  write_text(dir / "predictions.csv", report.predictions_csv());
  if (report.task == Task::Classification) {
    write_text(dir / "confusion_all.csv", confusion_csv(report.confusion));
    for (const auto& [snr, c] : report.confusion_by_snr) write_text(dir / ("confusion_snr_" + snr + ".csv"), confusion_csv(c));
  }
  emit_plots(report, dir);
}

}  // namespace diffuse

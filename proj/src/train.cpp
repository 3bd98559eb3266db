#include "diffuse/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "diffuse/dataset.hpp"
#include "diffuse/error.hpp"
#include "diffuse/rng.hpp"

namespace diffuse {

using nlohmann::json;

// ---- config ----

TrainConfig TrainConfig::curriculum_defaults() {
  TrainConfig c;
  c.patience = 5;
  return c;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (patience == 0) throw ConfigError("patience must be positive");
  if (patience > epochs)
    throw ConfigError("patience " + std::to_string(patience) + " exceeds epochs " + std::to_string(epochs));
  if (!(learn_rate > 0.0) || !std::isfinite(learn_rate)) throw ConfigError("learn_rate must be positive");
  apply_to(ModelConfig{}).validate();
}

ModelConfig TrainConfig::apply_to(ModelConfig base) const {
  base.heads = heads;
  base.cnn_dropout = cnn_dropout;
  base.trans_dropout = trans_dropout;
  base.head_out = task == Task::Regression ? 1 : kNumModels;
  return base;
}

std::string TrainConfig::to_json() const {
  json j = {{"batch_size", batch_size},
            {"heads", heads},
            {"cnn_dropout", cnn_dropout},
            {"trans_dropout", trans_dropout},
            {"learn_rate", learn_rate},
            {"epochs", epochs},
            {"patience", patience},
            {"seed", seed},
            {"task", std::string(task_name(task))},
            {"optimizer", optimizer == OptimizerKind::Adam ? "adam" : "sgd"}};
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("train config: ") + e.what());
  }
  if (!j.is_object()) throw FormatError("train config must be a JSON object");
  TrainConfig c;
  try {
    for (auto& [key, v] : j.items()) {
      if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "heads") c.heads = v.get<std::size_t>();
      else if (key == "cnn_dropout") c.cnn_dropout = v.get<double>();
      else if (key == "trans_dropout") c.trans_dropout = v.get<double>();
      else if (key == "learn_rate") c.learn_rate = v.get<double>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "patience") c.patience = v.get<std::size_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "task") c.task = parse_task(v.get<std::string>());
      else if (key == "optimizer") {
        const auto s = v.get<std::string>();
        if (s == "adam") c.optimizer = OptimizerKind::Adam;
        else if (s == "sgd") c.optimizer = OptimizerKind::Sgd;
        else throw ConfigError("optimizer must be adam or sgd");
      } else {
        throw ConfigError("unknown train config key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string TrainConfig::optimizer_description() const {
  return optimizer == OptimizerKind::Adam ? "adam(beta1=0.9,beta2=0.999,eps=1e-8)" : "sgd";
}

// ---- bins ----

std::string LengthBin::label() const { return "[" + std::to_string(lo) + "," + std::to_string(hi) + "]"; }

std::vector<LengthBin> curriculum_bins() {
  return {{10, 20},   {21, 30},   {31, 40},   {41, 50},   {51, 100},  {101, 200},
          {201, 300}, {301, 400}, {401, 500}, {501, 600}, {601, 800}, {801, 1000}};
}

std::optional<std::size_t> bin_index(const std::vector<LengthBin>& bins, std::size_t length) {
  for (std::size_t i = 0; i < bins.size(); ++i)
    if (bins[i].contains(length)) return i;
  return std::nullopt;
}

std::string TrainHistory::to_csv() const {
  std::string s = "epoch,train_loss,val_loss\n";
  for (std::size_t e = 0; e < train_loss.size(); ++e)
    s += std::to_string(e + 1) + "," + format_real(train_loss[e]) + "," + format_real(val_loss[e]) + "\n";
  return s;
}

// ---- learning rate / optimizer ----

double scale_lr(double base_lr, double base_n, double base_b, double new_n, double new_b) {
  for (double v : {base_lr, base_n, base_b, new_n, new_b})
    if (!(v > 0.0) || !std::isfinite(v)) throw DomainError("scale_lr: every input must be positive and finite");
  return noise_scale(base_lr, base_n, base_b) * new_b / new_n;
}

void optimizer_step(std::span<std::vector<double>* const> params,
                    std::span<const std::vector<double>> grads, OptimizerState& state, double lr) {
  if (params.size() != grads.size()) throw ShapeError("optimizer_step: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->size() != grads[i].size())
      throw ShapeError("optimizer_step: gradient " + std::to_string(i) + " does not match its parameter");
    for (double g : grads[i])
      if (!std::isfinite(g)) throw NumericError("optimizer_step: non-finite gradient in parameter " + std::to_string(i));
  }
  if (state.kind == OptimizerKind::Sgd) {
    for (std::size_t i = 0; i < params.size(); ++i)
      for (std::size_t j = 0; j < grads[i].size(); ++j) (*params[i])[j] -= lr * grads[i][j];
    ++state.step;
    return;
  }
  if (state.m.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m.emplace_back(params[i]->size(), 0.0);
      state.v.emplace_back(params[i]->size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("optimizer_step: state belongs to another parameter set");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

void optimizer_step(const std::vector<Tensor>& params, OptimizerState& state, double lr) {
  std::vector<std::vector<double>> values, grads;
  values.reserve(params.size());
  grads.reserve(params.size());
  for (const Tensor& t : params) {
    values.emplace_back(t.data().begin(), t.data().end());
    grads.push_back(t.grad());
  }
  std::vector<std::vector<double>*> ptrs;
  for (auto& v : values) ptrs.push_back(&v);
  optimizer_step(ptrs, grads, state, lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i];
    auto d = t.mutable_data();
    std::copy(values[i].begin(), values[i].end(), d.begin());
  }
}

// ---- early stopping ----

EarlyStopping::EarlyStopping(std::size_t patience) : patience_(patience) {
  if (patience == 0) throw ConfigError("patience must be positive");
}

bool EarlyStopping::observe(double val_loss) {
  ++epoch_;
  if (epoch_ == 1 || val_loss < best_) {
    best_ = val_loss;
    best_epoch_ = epoch_;
    stale_ = 0;
    return true;
  }
  ++stale_;
  return false;
}

// ---- evaluation helpers ----

double target_of(const Trajectory& t, Task task) {
  return task == Task::Regression ? t.alpha : static_cast<double>(model_code(t.model));
}

namespace {

std::vector<std::vector<double>> positions_of(const std::vector<Trajectory>& set) {
  std::vector<std::vector<double>> out;
  out.reserve(set.size());
  for (const auto& t : set) out.push_back(t.positions);
  return out;
}

}  // namespace

double evaluate_loss(const ModelParams& params, const std::vector<Trajectory>& set) {
  if (set.empty()) throw TrainError("evaluate_loss: empty set");
  double s = 0.0;
  if (params.config.task() == Task::Regression) {
    auto pred = predict_alpha_many(params, positions_of(set));
    for (std::size_t i = 0; i < set.size(); ++i) s += std::abs(pred[i] - set[i].alpha);
  } else {
    auto pred = predict_model_many(params, positions_of(set));
    for (std::size_t i = 0; i < set.size(); ++i)
      s += -std::log(std::max(pred[i].probabilities[model_code(set[i].model)], 1e-300));
  }
  return s / static_cast<double>(set.size());
}

double evaluate_metric(const ModelParams& params, const std::vector<Trajectory>& set) {
  if (set.empty()) throw TrainError("evaluate_metric: empty set");
  double s = 0.0;
  if (params.config.task() == Task::Regression) {
    auto pred = predict_alpha_many(params, positions_of(set));
    for (std::size_t i = 0; i < set.size(); ++i) s += std::abs(pred[i] - set[i].alpha);
  } else {
    auto pred = predict_model_many(params, positions_of(set));
    for (std::size_t i = 0; i < set.size(); ++i) s += pred[i].label == set[i].model ? 1.0 : 0.0;
  }
  return s / static_cast<double>(set.size());
}

// ---- training ----

namespace {

// Equal-length batches: shuffle within each length group, chunk, then shuffle batch order.
std::vector<std::vector<std::size_t>> epoch_batches(const std::vector<Trajectory>& set, std::size_t batch_size,
                                                    Rng& rng) {
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < set.size(); ++i) groups[set[i].length()].push_back(i);
  std::vector<std::vector<std::size_t>> batches;
  for (auto& [len, ids] : groups) {
    std::shuffle(ids.begin(), ids.end(), rng.engine());
    for (std::size_t s = 0; s < ids.size(); s += batch_size)
      batches.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(s),
                           ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), s + batch_size)));
  }
  std::shuffle(batches.begin(), batches.end(), rng.engine());
  return batches;
}

Tensor batch_loss(const ModelParams& params, const std::vector<Trajectory>& set,
                  const std::vector<std::size_t>& ids, std::uint64_t dropout_seed) {
  std::vector<std::span<const double>> views;
  for (std::size_t i : ids) views.emplace_back(set[i].positions);
  Tensor out = forward(params, make_batch(views), true, dropout_seed);
  if (params.config.task() == Task::Regression) {
    std::vector<double> y;
    for (std::size_t i : ids) y.push_back(set[i].alpha);
    return l1_loss(out, Tensor::from_data({ids.size(), 1}, std::move(y)));
  }
  std::vector<int> labels;
  for (std::size_t i : ids) labels.push_back(model_code(set[i].model));
  return cross_entropy(out, labels);
}

}  // namespace

TrainResult train_once(const ModelParams& init, const std::vector<Trajectory>& train_set,
                       const std::vector<Trajectory>& val_set, const TrainConfig& config,
                       const EpochCallback& on_epoch_end) {
  config.validate();
  if (train_set.empty()) throw TrainError("training set is empty");
  if (val_set.empty()) throw TrainError("validation set is empty");
  for (const auto* set : {&train_set, &val_set})
    for (const auto& t : *set)
      if (t.length() < kMinInputLength)
        throw TrainError("trajectory of length " + std::to_string(t.length()) + " is below the minimum " +
                         std::to_string(kMinInputLength));

  const auto start = std::chrono::steady_clock::now();
  ModelParams params = init.clone();
  quantize_params(params);
  ModelParams best = params.clone();
  OptimizerState opt;
  opt.kind = config.optimizer;
  EarlyStopping stopper(config.patience);
  TrainHistory hist;
  const std::vector<Tensor> leaves = params.tensors();
  Rng shuffle_rng(derive_seed(config.seed, "shuffle"));

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto batches = epoch_batches(train_set, config.batch_size, shuffle_rng);
    const std::uint64_t epoch_seed = derive_seed(derive_seed(config.seed, "dropout"), epoch);
    double total = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      double loss_value = 0.0;
      try {
        params.zero_grad();
        Tensor loss = batch_loss(params, train_set, batches[b], derive_seed(epoch_seed, b));
        loss_value = loss.item();
        loss.backward();
        optimizer_step(leaves, opt, config.learn_rate);
      } catch (const NumericError& e) {
        throw TrainError("non-finite value at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1) +
                         " (length " + std::to_string(train_set[batches[b].front()].length()) + "): " + e.what());
      }
      quantize_params(params);
      total += loss_value * static_cast<double>(batches[b].size());
    }
    params.zero_grad();
    const double train_loss = total / static_cast<double>(train_set.size());
    const double val_loss = evaluate_loss(params, val_set);
    if (!std::isfinite(val_loss)) throw TrainError("non-finite validation loss at epoch " + std::to_string(epoch));
    hist.train_loss.push_back(train_loss);
    hist.val_loss.push_back(val_loss);
    if (stopper.observe(val_loss)) best.assign(params);
    if (config.verbose)
      std::fprintf(stderr, "epoch %zu  train %.6f  val %.6f%s\n", epoch, train_loss, val_loss,
                   stopper.best_epoch() == epoch ? "  *" : "");
    if (on_epoch_end) on_epoch_end(epoch, train_loss, val_loss);
    hist.stop_epoch = epoch;
    if (stopper.should_stop()) break;
  }
  hist.best_epoch = stopper.best_epoch();
  hist.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(best), std::move(hist)};
}

TrainResult train_once(const ModelConfig& model_config, const std::vector<Trajectory>& train_set,
                       const std::vector<Trajectory>& val_set, const TrainConfig& config,
                       const EpochCallback& on_epoch_end) {
  return train_once(init_params(config.apply_to(model_config), derive_seed(config.seed, "init")), train_set,
                    val_set, config, on_epoch_end);
}

// ---- k-fold ----

std::vector<std::vector<std::size_t>> kfold_partition(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw DomainError("k-fold needs k >= 2");
  if (n < k) throw DomainError("dataset of " + std::to_string(n) + " items is smaller than k = " + std::to_string(k));
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "kfold"));
  std::shuffle(ids.begin(), ids.end(), rng.engine());
  std::vector<std::vector<std::size_t>> folds(k);
  for (std::size_t i = 0; i < n; ++i) folds[i % k].push_back(ids[i]);
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

std::string KFoldReport::to_csv() const {
  std::string s = "fold,metric\n";
  for (std::size_t i = 0; i < fold_metrics.size(); ++i)
    s += std::to_string(i + 1) + "," + format_real(fold_metrics[i]) + "\n";
  s += "mean," + format_real(mean) + "\n";
  s += "std," + format_real(stddev) + "\n";
  return s;
}

KFoldReport kfold_validate(std::size_t n, std::size_t k, std::uint64_t seed, const FoldFn& fit_and_score) {
  KFoldReport rep;
  rep.folds = kfold_partition(n, k, seed);
  for (std::size_t f = 0; f < k; ++f) {
    std::vector<std::size_t> rest;
    for (std::size_t g = 0; g < k; ++g)
      if (g != f) rest.insert(rest.end(), rep.folds[g].begin(), rep.folds[g].end());
    std::sort(rest.begin(), rest.end());
    Rng rng(derive_seed(derive_seed(seed, "kfold-val"), f));
    std::shuffle(rest.begin(), rest.end(), rng.engine());
    const std::size_t n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(rest.size()))));
    std::vector<std::size_t> val(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> train(rest.begin() + static_cast<std::ptrdiff_t>(n_val), rest.end());
    std::sort(val.begin(), val.end());
    std::sort(train.begin(), train.end());
    rep.fold_metrics.push_back(fit_and_score(train, val, rep.folds[f], f));
  }
  const double kk = static_cast<double>(k);
  rep.mean = std::accumulate(rep.fold_metrics.begin(), rep.fold_metrics.end(), 0.0) / kk;
  double ss = 0.0;
  for (double m : rep.fold_metrics) ss += (m - rep.mean) * (m - rep.mean);
  rep.stddev = std::sqrt(ss / (kk - 1.0));
  return rep;
}

KFoldReport kfold_validate(const std::vector<Trajectory>& data, std::size_t k, const ModelConfig& model_config,
                           const TrainConfig& config) {
  auto pick = [&](const std::vector<std::size_t>& ids) {
    std::vector<Trajectory> out;
    for (std::size_t i : ids) out.push_back(data[i]);
    return out;
  };
  return kfold_validate(data.size(), k, config.seed,
                        [&](const auto& train, const auto& val, const auto& test, std::size_t fold) {
                          TrainConfig c = config;
                          c.seed = derive_seed(config.seed, fold);
                          TrainResult r = train_once(model_config, pick(train), pick(val), c);
                          return evaluate_metric(r.params, pick(test));
                        });
}

// ---- curriculum ----

std::string CurriculumResult::selection_csv() const {
  std::string s = "bin,selected_model,score,native_score\n";
  for (std::size_t b = 0; b < bins.size(); ++b)
    s += bins[b].label() + "," + bins[selected[b]].label() + "," + format_real(scores[selected[b]][b]) + "," +
         format_real(scores[b][b]) + "\n";
  return s;
}

std::string CurriculumResult::matrix_csv() const {
  std::string s = "model_bin";
  for (const auto& b : bins) s += "," + b.label();
  s += "\n";
  for (std::size_t m = 0; m < bins.size(); ++m) {
    s += bins[m].label();
    for (std::size_t b = 0; b < bins.size(); ++b) s += "," + format_real(scores[m][b]);
    s += "\n";
  }
  return s;
}

CurriculumResult curriculum_train(const std::vector<LengthBin>& bins, const std::vector<BinData>& data,
                                  const ModelConfig& model_config, const TrainConfig& config,
                                  const std::function<void(const CurriculumRun&)>& on_run_end) {
  if (bins.empty()) throw TrainError("curriculum needs at least one length bin");
  if (data.size() != bins.size())
    throw TrainError("curriculum has " + std::to_string(bins.size()) + " bins but " + std::to_string(data.size()) +
                     " datasets");
  for (std::size_t b = 0; b < bins.size(); ++b)
    if (data[b].train.empty() || data[b].val.empty() || data[b].test.empty())
      throw TrainError("missing data for bin " + bins[b].label());

  std::vector<std::size_t> order(bins.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return bins[a].lo > bins[b].lo; });

  CurriculumResult res;
  res.bins = bins;
  res.task = config.task;
  res.models.resize(bins.size());
  ModelParams current = init_params(config.apply_to(model_config), derive_seed(config.seed, "init"));
  quantize_params(current);
  std::size_t run_index = 0;
  for (std::size_t round = 1; round <= 2; ++round) {
    for (std::size_t b : order) {
      TrainConfig c = config;
      c.seed = derive_seed(config.seed, run_index++);
      CurriculumRun run{round, b, current.fingerprint(), 0, {}};
      TrainResult r = train_once(current, data[b].train, data[b].val, c);
      run.final_fingerprint = r.params.fingerprint();
      run.history = std::move(r.history);
      current = std::move(r.params);
      if (round == 2) res.models[b] = current.clone();
      if (on_run_end) on_run_end(run);
      res.runs.push_back(std::move(run));
    }
  }

  const std::size_t n = bins.size();
  res.scores.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t m = 0; m < n; ++m)
    for (std::size_t b = 0; b < n; ++b) res.scores[m][b] = evaluate_metric(res.models[m], data[b].test);

  const bool higher = higher_is_better(config.task);
  res.selected.resize(n);
  for (std::size_t b = 0; b < n; ++b) {
    std::size_t best = b;
    for (std::size_t m = 0; m < n; ++m) {
      const double s = res.scores[m][b], cur = res.scores[best][b];
      if (higher ? s > cur : s < cur) best = m;
    }
    res.selected[b] = best;
  }
  return res;
}

}  // namespace diffuse

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "diffuse/dataset.hpp"
#include "diffuse/error.hpp"
#include "diffuse/model.hpp"
#include "diffuse/rng.hpp"
#include "diffuse/train.hpp"

using namespace diffuse;

namespace {

// Normalized trajectories cycling through every model at a few exponents.
std::vector<Trajectory> toy_set(std::size_t n, std::size_t lo, std::size_t hi, std::uint64_t seed) {
  std::vector<Trajectory> out;
  const double alphas[5][2] = {{0.3, 0.9}, {0.4, 0.8}, {0.5, 1.5}, {1.3, 1.8}, {0.6, 1.6}};
  for (std::size_t i = 0; i < n; ++i) {
    const int m = static_cast<int>(i % 5);
    const double a = alphas[m][(i / 5) % 2];
    const std::size_t L = lo + (i * 7) % (hi - lo + 1);
    Trajectory t = generate(model_from_code(m), a, L, derive_seed(seed, i));
    t.positions = normalize_or_flat(t.positions);
    out.push_back(std::move(t));
  }
  return out;
}

TrainConfig quick(Task task, std::size_t epochs, std::uint64_t seed = 1) {
  TrainConfig c;
  c.task = task;
  c.epochs = epochs;
  c.patience = epochs;
  c.seed = seed;
  return c;
}

ModelConfig small_model(Task task) {
  ModelConfig c = ModelConfig::for_task(task);
  c.ffn_hidden = 64;
  return c;
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("defaults match the published hyper-parameters") {
  TrainConfig c;
  CHECK(c.batch_size == 32);
  CHECK(c.heads == 16);
  CHECK(c.cnn_dropout == 0.05);
  CHECK(c.trans_dropout == 0.0);
  CHECK(c.learn_rate == 2.133e-4);
  CHECK(c.epochs == 100);
  CHECK(c.patience == 10);
  CHECK(c.optimizer == OptimizerKind::Adam);
  CHECK(TrainConfig::curriculum_defaults().patience == 5);
  CHECK_NOTHROW(c.validate());
  c.patience = 101;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  TrainConfig r = quick(Task::Classification, 7, 99);
  r.learn_rate = 1e-3;
  TrainConfig back = TrainConfig::from_json(r.to_json());
  CHECK(back.to_json() == r.to_json());
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"epochs": 3, "momentum": 0.9})"), ConfigError);

  ModelConfig m = TrainConfig{}.apply_to(ModelConfig{});
  CHECK(m.heads == 16);
  CHECK(m.cnn_dropout == 0.05);
  CHECK(r.apply_to(ModelConfig{}).head_out == 5);
}

TEST_CASE("curriculum bins") {
  const std::vector<std::pair<std::size_t, std::size_t>> expect = {
      {10, 20}, {21, 30}, {31, 40}, {41, 50}, {51, 100}, {101, 200},
      {201, 300}, {301, 400}, {401, 500}, {501, 600}, {601, 800}, {801, 1000}};
  auto bins = curriculum_bins();
  REQUIRE(bins.size() == 12);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(bins[i].lo == expect[i].first);
    CHECK(bins[i].hi == expect[i].second);
  }
  for (std::size_t L = 10; L <= 1000; ++L) {
    auto b = bin_index(bins, L);
    REQUIRE(b.has_value());
    CHECK(bins[*b].contains(L));
  }
  CHECK_FALSE(bin_index(bins, 9).has_value());
  CHECK_FALSE(bin_index(bins, 1001).has_value());
  CHECK(bins[4].label() == "[51,100]");
}

TEST_CASE("learning-rate scaling keeps the noise scale fixed") {
  CHECK(scale_lr(0.01, 5000, 16, 5000, 16) == 0.01);
  CHECK(noise_scale(0.01, 32000, 32) == doctest::Approx(10.0));
  const double derived = scale_lr(0.01, 32000, 32, 1.35e6, 32);
  CHECK(derived == doctest::Approx(10.0 * 32 / 1.35e6).epsilon(1e-12));
  CHECK(std::abs(derived - 2.37e-4) < 0.005e-4);
  CHECK(noise_scale(2.133e-4, 1.35e6, 32) == doctest::Approx(9.0).epsilon(0.001));

  for (double n : {100.0, 3000.0, 1e6})
    for (double b : {1.0, 8.0, 64.0}) {
      // Doubling N halves the rate; doubling B doubles it.
      CHECK(scale_lr(0.02, 1000, 16, 2 * n, b) == doctest::Approx(scale_lr(0.02, 1000, 16, n, b) / 2).epsilon(1e-15));
      CHECK(scale_lr(0.02, 1000, 16, n, 2 * b) == doctest::Approx(2 * scale_lr(0.02, 1000, 16, n, b)).epsilon(1e-15));
      CHECK(scale_lr(0.02, n, b, n, b) == 0.02);
    }
  CHECK_THROWS_AS(scale_lr(0.0, 1, 1, 1, 1), DomainError);
  CHECK_THROWS_AS(scale_lr(0.1, -1, 1, 1, 1), DomainError);
  CHECK_THROWS_AS(scale_lr(0.1, 1, 1, 1, 0), DomainError);
}

TEST_CASE("adaptive-moment steps") {
  std::vector<double> p{1.0, -2.0};
  std::vector<double> g{0.0, 0.0};
  std::vector<double>* ps[] = {&p};
  const std::vector<double> gs[] = {g};
  OptimizerState st;
  optimizer_step(ps, gs, st, 0.1);
  CHECK(p == std::vector<double>{1.0, -2.0});

  std::vector<double> x{3.0};
  std::vector<double>* xs[] = {&x};
  const std::vector<double> one[] = {{1.0}};
  OptimizerState s2;
  optimizer_step(xs, one, s2, 0.1);
  // m_hat = 1, v_hat = 1 after bias correction.
  CHECK(x[0] == doctest::Approx(3.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));
  CHECK(s2.step == 1);

  const std::vector<double> bad[] = {{NAN}};
  const double before = x[0];
  CHECK_THROWS_AS(optimizer_step(xs, bad, s2, 0.1), NumericError);
  CHECK(x[0] == before);
  const std::vector<double> wrong[] = {{1.0, 2.0}};
  CHECK_THROWS_AS(optimizer_step(xs, wrong, s2, 0.1), ShapeError);
}

TEST_CASE("adaptive moments minimize a quadratic bowl") {
  std::vector<double> x{2.0, -1.5, 0.5, 3.0};
  const std::vector<double> c{0.3, 0.1, -0.7, 1.0};
  std::vector<double>* xs[] = {&x};
  OptimizerState st;
  auto f = [&] {
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - c[i]) * (x[i] - c[i]);
    return s;
  };
  std::size_t steps = 0;
  while (f() >= 1e-6 && steps < 500) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = 2 * (x[i] - c[i]);
    const std::vector<double> gs[] = {g};
    optimizer_step(xs, gs, st, 0.05);
    ++steps;
  }
  MESSAGE("steps " << steps << " loss " << f());
  CHECK(f() < 1e-6);
  CHECK(steps <= 500);
}

TEST_CASE("plain gradient descent option") {
  std::vector<double> x{1.0};
  std::vector<double>* xs[] = {&x};
  const std::vector<double> g[] = {{0.5}};
  OptimizerState st;
  st.kind = OptimizerKind::Sgd;
  optimizer_step(xs, g, st, 0.1);
  CHECK(x[0] == doctest::Approx(0.95).epsilon(1e-15));
}

TEST_CASE("early stopping mechanics") {
  EarlyStopping rising(1);
  CHECK(rising.observe(1.0));
  CHECK_FALSE(rising.should_stop());
  CHECK_FALSE(rising.observe(1.1));
  CHECK(rising.should_stop());
  CHECK(rising.best_epoch() == 1);
  CHECK(rising.epochs_seen() == 2);

  EarlyStopping es(3);
  const double seq[] = {5, 4, 4, 3.5, 3.6, 3.5, 3.7};
  bool stopped = false;
  for (double v : seq) {
    es.observe(v);
    if (es.should_stop()) {
      stopped = true;
      break;
    }
  }
  CHECK(stopped);
  CHECK(es.best_epoch() == 4);
  CHECK(es.epochs_seen() == 7);
  CHECK(es.epochs_seen() - es.best_epoch() <= 3);
  CHECK_THROWS_AS(EarlyStopping(0), ConfigError);
}

TEST_CASE("training lowers the loss, respects patience, and restores the best snapshot") {
  auto train = toy_set(500, 10, 30, 1);
  auto val = toy_set(100, 10, 30, 2);
  TrainConfig cfg = quick(Task::Classification, 20, 4);
  cfg.patience = 3;
  cfg.learn_rate = 1e-3;
  auto init = init_params(cfg.apply_to(small_model(Task::Classification)), 4);
  const double initial = evaluate_loss(init, train);
  TrainResult r = train_once(init, train, val, cfg);
  const auto& h = r.history;
  MESSAGE("initial " << initial << " final train " << h.train_loss.back() << " stop " << h.stop_epoch);
  CHECK(h.train_loss.back() < initial);
  CHECK(h.train_loss.size() == h.stop_epoch);
  CHECK(h.best_epoch >= 1);
  CHECK(h.best_epoch <= h.stop_epoch);
  CHECK(h.stop_epoch <= cfg.epochs);
  CHECK(h.stop_epoch - h.best_epoch <= cfg.patience);
  CHECK(evaluate_loss(r.params, val) == h.val_loss[h.best_epoch - 1]);
  CHECK(*std::min_element(h.val_loss.begin(), h.val_loss.end()) == h.val_loss[h.best_epoch - 1]);
  CHECK(init.fingerprint() == init_params(init.config, 4).fingerprint());
  CHECK(h.to_csv().rfind("epoch,train_loss,val_loss\n1,", 0) == 0);
}

TEST_CASE("training is reproducible from its seed") {
  auto train = toy_set(120, 10, 20, 5);
  auto val = toy_set(40, 10, 20, 6);
  TrainConfig cfg = quick(Task::Regression, 3, 9);
  auto a = train_once(small_model(Task::Regression), train, val, cfg);
  auto b = train_once(small_model(Task::Regression), train, val, cfg);
  CHECK(a.history.train_loss == b.history.train_loss);
  CHECK(a.history.val_loss == b.history.val_loss);
  CHECK(a.params.fingerprint() == b.params.fingerprint());
  cfg.seed = 10;
  CHECK(train_once(small_model(Task::Regression), train, val, cfg).history.train_loss != a.history.train_loss);
}

TEST_CASE("training errors") {
  auto set = toy_set(10, 10, 12, 1);
  TrainConfig cfg = quick(Task::Regression, 1);
  CHECK_THROWS_AS(train_once(ModelConfig{}, {}, set, cfg), TrainError);
  CHECK_THROWS_AS(train_once(ModelConfig{}, set, {}, cfg), TrainError);
  auto shortie = set;
  shortie[0].positions.resize(8);
  CHECK_THROWS_AS(train_once(ModelConfig{}, shortie, set, cfg), TrainError);
  CHECK_THROWS_AS(evaluate_loss(init_params(ModelConfig{}, 1), {}), TrainError);
}

TEST_CASE("the network can memorize a small set") {
  auto set = toy_set(100, 10, 10, 8);
  TrainConfig cfg = quick(Task::Regression, 200, 2);
  cfg.learn_rate = 1e-3;
  cfg.batch_size = 10;
  cfg.cnn_dropout = 0.0;
  auto init = init_params(cfg.apply_to(ModelConfig::for_task(Task::Regression)), 2);
  const double initial = evaluate_loss(init, set);
  std::size_t reached = 0;
  TrainResult r = train_once(init, set, set, cfg, [&](std::size_t e, double tl, double) {
    if (!reached && tl < 0.1 * initial) reached = e;
  });
  MESSAGE("initial " << initial << " reached 10% at epoch " << reached << " final " << r.history.train_loss.back());
  CHECK(reached > 0);
  CHECK(reached <= 200);
}

TEST_CASE("k-fold partitions") {
  auto folds = kfold_partition(50, 5, 3);
  REQUIRE(folds.size() == 5);
  std::set<std::size_t> seen;
  for (const auto& f : folds) {
    CHECK(f.size() == 10);
    CHECK(std::is_sorted(f.begin(), f.end()));
    seen.insert(f.begin(), f.end());
  }
  CHECK(seen.size() == 50);
  CHECK(*seen.rbegin() == 49);
  CHECK(kfold_partition(50, 5, 3) == folds);
  CHECK(kfold_partition(50, 5, 4) != folds);
  for (const auto& f : kfold_partition(53, 5, 1)) CHECK((f.size() == 10 || f.size() == 11));
  CHECK_THROWS_AS(kfold_partition(4, 5, 1), DomainError);
  CHECK_THROWS_AS(kfold_partition(10, 1, 1), DomainError);
}

TEST_CASE("k-fold driver: disjoint roles and constant metrics") {
  std::size_t calls = 0;
  KFoldReport rep = kfold_validate(50, 5, 7, [&](const auto& tr, const auto& va, const auto& te, std::size_t fold) {
    std::set<std::size_t> all(tr.begin(), tr.end());
    for (auto v : va) CHECK(all.insert(v).second);
    for (auto t : te) CHECK(all.insert(t).second);
    CHECK(all.size() == 50);
    CHECK(te.size() == 10);
    CHECK(va.size() == 8);
    CHECK(fold == calls++);
    return 0.25;
  });
  CHECK(calls == 5);
  CHECK(rep.mean == 0.25);
  CHECK(rep.stddev == 0.0);

  KFoldReport var = kfold_validate(20, 4, 1, [](const auto&, const auto&, const auto&, std::size_t f) {
    return static_cast<double>(f);
  });
  CHECK(var.mean == 1.5);
  CHECK(var.stddev == doctest::Approx(std::sqrt(5.0 / 3.0)));
  CHECK(var.to_csv().find("mean") != std::string::npos);
}

TEST_CASE("k-fold on a toy dataset runs end to end") {
  auto data = toy_set(40, 10, 12, 3);
  TrainConfig cfg = quick(Task::Classification, 1, 1);
  KFoldReport rep = kfold_validate(data, 4, small_model(Task::Classification), cfg);
  CHECK(rep.fold_metrics.size() == 4);
  for (double m : rep.fold_metrics) {
    CHECK(m >= 0.0);
    CHECK(m <= 1.0);
  }
  CHECK_THROWS_AS(kfold_validate(toy_set(3, 10, 10, 1), 5, small_model(Task::Classification), cfg), DomainError);
}

TEST_CASE("curriculum bookkeeping and inheritance") {
  std::vector<LengthBin> bins = {{10, 20}, {21, 30}, {31, 40}};
  std::vector<BinData> data;
  for (std::size_t b = 0; b < bins.size(); ++b) {
    const auto& bin = bins[b];
    data.push_back({toy_set(30, bin.lo, bin.hi, 10 + b), toy_set(10, bin.lo, bin.hi, 20 + b),
                    toy_set(10, bin.lo, bin.hi, 30 + b)});
  }
  TrainConfig cfg = TrainConfig::curriculum_defaults();
  cfg.task = Task::Regression;
  cfg.epochs = 2;
  cfg.patience = 2;
  cfg.seed = 5;
  std::size_t callbacks = 0;
  CurriculumResult res =
      curriculum_train(bins, data, small_model(Task::Regression), cfg, [&](const CurriculumRun&) { ++callbacks; });
  REQUIRE(res.runs.size() == 6);
  CHECK(callbacks == 6);
  const std::size_t order[] = {2, 1, 0, 2, 1, 0};
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(res.runs[i].bin == order[i]);
    CHECK(res.runs[i].round == (i < 3 ? 1u : 2u));
    if (i > 0) CHECK(res.runs[i].initial_fingerprint == res.runs[i - 1].final_fingerprint);
    CHECK(res.runs[i].history.stop_epoch <= 2);
  }
  REQUIRE(res.models.size() == 3);
  for (std::size_t b = 0; b < 3; ++b) CHECK(res.models[b].fingerprint() == res.runs[3 + (2 - b)].final_fingerprint);
  REQUIRE(res.scores.size() == 3);
  for (std::size_t m = 0; m < 3; ++m) {
    REQUIRE(res.scores[m].size() == 3);
    for (std::size_t t = 0; t < 3; ++t) CHECK(res.scores[m][t] == evaluate_metric(res.models[m], data[t].test));
  }
  REQUIRE(res.selected.size() == 3);
  for (std::size_t t = 0; t < 3; ++t) {
    const std::size_t s = res.selected[t];
    for (std::size_t m = 0; m < 3; ++m) CHECK(res.scores[s][t] <= res.scores[m][t]);
    if (res.scores[t][t] == res.scores[s][t]) CHECK(s == t);
  }
  const std::string selection = res.selection_csv(), matrix = res.matrix_csv();
  CHECK(std::count(selection.begin(), selection.end(), '\n') == 4);
  CHECK(std::count(matrix.begin(), matrix.end(), '\n') == 4);

  data.pop_back();
  CHECK_THROWS_AS(curriculum_train(bins, data, small_model(Task::Regression), cfg), TrainError);
  data.push_back({});
  CHECK_THROWS_AS(curriculum_train(bins, data, small_model(Task::Regression), cfg), TrainError);
}

TEST_CASE("metric helpers") {
  Trajectory t;
  t.model = DiffusionModel::LW;
  t.alpha = 1.4;
  CHECK(target_of(t, Task::Regression) == 1.4);
  CHECK(target_of(t, Task::Classification) == 3.0);
  CHECK(higher_is_better(Task::Classification));
  CHECK_FALSE(higher_is_better(Task::Regression));
}

}  // TEST_SUITE

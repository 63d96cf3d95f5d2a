#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

#include "causalfs/train.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace causalfs;

namespace {

ModelConfig micro_model() {
  ModelConfig cfg;
  cfg.backbone.channels = {4, 4, 4, 4};
  cfg.backbone.norm_groups = 2;
  cfg.gamma = 4;
  cfg.topk = 2;
  cfg.use_imse = false;
  cfg.use_imfr = false;
  cfg.image_size = 32;
  return cfg;
}

Dataset micro_dataset(int n_classes = 8, int per_class = 6) {
  SyntheticSpec spec;
  spec.n_classes = n_classes;
  spec.samples_per_class = per_class;
  spec.image_size = 32;
  spec.seed = 11;
  return generate_synthetic_dataset(spec);
}

TrainConfig micro_train(int epochs, int episodes) {
  TrainConfig t;
  t.epochs = epochs;
  t.episodes_per_epoch = episodes;
  t.n_train = 3;
  t.k_train = 1;
  t.u_train = 2;
  t.n_eval = 3;
  t.k_eval = 1;
  t.u_eval = 2;
  t.lr0 = 0.02;
  t.decay_epoch = epochs;
  t.val_every = 2;
  t.val_episodes = 4;
  t.seed = 5;
  return t;
}

}  // namespace

TEST_CASE("accuracy summaries match a naive statistics recomputation") {
  Rng rng(3, stream::kEval);
  std::vector<double> acc(64);
  for (double& a : acc) a = rng.real01();
  const auto [mean, half] = summarize_accuracies(acc);

  long double m = 0.0L;
  for (double a : acc) m += a;
  m /= (long double)acc.size();
  long double ss = 0.0L;
  for (double a : acc) ss += ((long double)a - m) * ((long double)a - m);
  const long double sd = std::sqrt(ss / (long double)(acc.size() - 1));
  CHECK(std::abs(mean - 100.0 * double(m)) < 1e-10);
  CHECK(std::abs(half - 100.0 * 1.96 * double(sd) / std::sqrt(double(acc.size()))) < 1e-10);

  CHECK(summarize_accuracies({0.37}).second == 0.0);
  CHECK(summarize_accuracies({0.37}).first == doctest::Approx(37.0));
  const auto [cm, ch] = summarize_accuracies(std::vector<double>(10, 0.5));
  CHECK(cm == doctest::Approx(50.0));
  CHECK(ch == 0.0);
  CHECK_THROWS_AS(summarize_accuracies({}), std::invalid_argument);
}

TEST_CASE("constant-output model scores at chance with zero interval width") {
  ModelConfig cfg = micro_model();
  Model<float> m = init_model<float>(cfg);
  visit_params(cfg, [](const std::string&, auto& t) { t.setZero(); }, m.params);
  Dataset ds = micro_dataset();
  std::vector<int> pool{0, 1, 2, 3, 4, 5, 6, 7};
  AugmentConfig aug;
  EvalReport r = evaluate(cfg, m.params, ds, pool, 20, 4, 1, 3, 99, aug);
  // All distances tie, so every query resolves to slot 0: exactly 1/N.
  CHECK(r.mean_pct == doctest::Approx(25.0));
  CHECK(r.halfwidth_pct == 0.0);
  CHECK(r.n_episodes == 20);
  for (double a : r.accuracies) CHECK(a == doctest::Approx(0.25));
}

TEST_CASE("evaluation reports are invariant to episode processing order") {
  ModelConfig cfg = micro_model();
  Model<float> m = init_model<float>(cfg);
  Dataset ds = micro_dataset();
  std::vector<int> pool{0, 1, 2, 3, 4};
  AugmentConfig aug;
  EvalReport direct = evaluate(cfg, m.params, ds, pool, 12, 3, 1, 2, 42, aug);

  std::vector<Episode> eps = sample_eval_episodes(ds, pool, 12, 3, 1, 2, 42);
  std::vector<double> acc(eps.size());
  for (std::size_t i = eps.size(); i-- > 0;)  // reversed completion order
    acc[i] = eval_episode_accuracy(cfg, m.params, ds, eps[i], aug);
  const auto [mean, half] = summarize_accuracies(acc);
  CHECK(mean == direct.mean_pct);
  CHECK(half == direct.halfwidth_pct);
  for (std::size_t i = 0; i < acc.size(); ++i) CHECK(acc[i] == direct.accuracies[i]);
}

TEST_CASE("training runs deterministically and decreases the smoothed loss") {
  ModelConfig cfg = micro_model();
  Dataset ds = micro_dataset();
  ClassSplit split = split_classes(8, 4, 3, 1, 17);
  TrainConfig t = micro_train(8, 12);
  t.record_episodes = true;

  TrainResult<float> a = train<float>(cfg, t, ds, split);
  CHECK(a.log.size() == 8 * 12);
  for (const auto& e : a.log) {
    CHECK(std::isfinite(e.loss));
    CHECK(e.lr == 0.02);
  }
  // Smoothed start vs end of the log.
  auto window_mean = [&](std::size_t lo, std::size_t hi) {
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += a.log[i].loss;
    return s / double(hi - lo);
  };
  const double early = window_mean(0, 24);
  const double late = window_mean(a.log.size() - 24, a.log.size());
  CHECK(late < early);

  // Validation ran and selected something.
  CHECK(a.best_val_epoch >= 0);
  CHECK(a.best_val_accuracy >= 0.0);
  CHECK(a.best_val_accuracy <= 1.0);

  TrainResult<float> b = train<float>(cfg, t, ds, split);
  REQUIRE(b.log.size() == a.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].loss == b.log[i].loss);
    CHECK(a.log[i].accuracy == b.log[i].accuracy);
  }
  REQUIRE(a.episodes.size() == b.episodes.size());
  for (std::size_t i = 0; i < a.episodes.size(); ++i) {
    CHECK(a.episodes[i].classes == b.episodes[i].classes);
    CHECK(a.episodes[i].support == b.episodes[i].support);
    CHECK(a.episodes[i].query == b.episodes[i].query);
  }
  bool same = true;
  visit_params(cfg, [&](const std::string&, auto& x, auto& y) { same &= (x == y); },
               a.final_params, b.final_params);
  CHECK(same);
}

TEST_CASE("an empty validation split falls back to the final parameters") {
  ModelConfig cfg = micro_model();
  Dataset ds = micro_dataset();
  ClassSplit split = split_classes(8, 6, 0, 2, 17);
  TrainConfig t = micro_train(2, 3);
  TrainResult<float> r = train<float>(cfg, t, ds, split);
  CHECK(r.best_val_epoch == -1);
  bool same = true;
  visit_params(cfg, [&](const std::string&, auto& x, auto& y) { same &= (x == y); }, r.best_params,
               r.final_params);
  CHECK(same);
}

TEST_CASE("non-finite losses abort with the offending episode identified") {
  ModelConfig cfg = micro_model();
  Dataset ds = micro_dataset(4, 4);
  // Poison the image center so every random crop keeps the bad pixel.
  ds.images[0].at(0, 16, 16) = std::numeric_limits<float>::quiet_NaN();
  ClassSplit split;
  split.train = {0, 1, 2, 3};
  TrainConfig t = micro_train(1, 8);
  t.n_train = 4;  // every episode includes the poisoned class
  t.k_train = 2;
  try {
    train<float>(cfg, t, ds, split);
    FAIL("expected a runtime_error");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("non-finite loss") != std::string::npos);
    CHECK(msg.find("epoch 0") != std::string::npos);
    CHECK(msg.find("classes") != std::string::npos);
  }
}

TEST_CASE("config validation rejects out-of-range settings") {
  TrainConfig t = micro_train(10, 5);
  t.validate();
  TrainConfig bad = t;
  bad.decay_epoch = 11;  // beyond the horizon
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = t;
  bad.momentum = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = t;
  bad.n_train = 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = t;
  bad.lr0 = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("ablation runner trains all four combinations reproducibly") {
  ModelConfig cfg = micro_model();
  cfg.gamma = 4;
  Dataset ds = micro_dataset();
  ClassSplit split = split_classes(8, 4, 0, 4, 17);
  TrainConfig t = micro_train(1, 2);
  auto rows = run_ablation<float>(cfg, t, ds, split, 3);
  CHECK(rows[0].use_imse == false);
  CHECK(rows[0].use_imfr == false);
  CHECK(rows[1].use_imse == true);
  CHECK(rows[1].use_imfr == false);
  CHECK(rows[2].use_imse == false);
  CHECK(rows[2].use_imfr == true);
  CHECK(rows[3].use_imse == true);
  CHECK(rows[3].use_imfr == true);
  for (const auto& row : rows) {
    CHECK(row.report.n_episodes == 3);
    CHECK(row.report.mean_pct >= 0.0);
    CHECK(row.report.mean_pct <= 100.0);
    CHECK(row.report.halfwidth_pct >= 0.0);
  }
  // The architecture key reflects the flags, so all four rows differ.
  CHECK(rows[0].report.fingerprint != rows[1].report.fingerprint);
  CHECK(rows[1].report.fingerprint != rows[2].report.fingerprint);
  CHECK(rows[2].report.fingerprint != rows[3].report.fingerprint);

  auto again = run_ablation<float>(cfg, t, ds, split, 3);
  CHECK(format_ablation_table(rows) == format_ablation_table(again));
}

TEST_CASE("evaluation reports round-trip through their text form") {
  EvalReport r;
  r.fingerprint = "00c0ffee00c0ffee";
  r.n_episodes = 5;
  r.accuracies = {0.2, 0.4, 1.0 / 3.0, 0.6, 0.55};
  const auto [mean, half] = summarize_accuracies(r.accuracies);
  r.mean_pct = mean;
  r.halfwidth_pct = half;
  std::stringstream ss(format_eval_report(r));
  EvalReport back = parse_eval_report(ss);
  CHECK(back.fingerprint == r.fingerprint);
  CHECK(back.n_episodes == 5);
  CHECK(std::abs(back.mean_pct - r.mean_pct) < 1e-10);
  CHECK(std::abs(back.halfwidth_pct - r.halfwidth_pct) < 1e-10);
  REQUIRE(back.accuracies.size() == r.accuracies.size());
  for (std::size_t i = 0; i < r.accuracies.size(); ++i)
    CHECK(std::abs(back.accuracies[i] - r.accuracies[i]) < 1e-15);

  const std::string log_text = format_train_log({{0, 0, 1.5, 0.25, 0.1}, {0, 1, 1.25, 0.5, 0.1}});
  CHECK(log_text.rfind("# epoch episode loss accuracy lr\n", 0) == 0);
  CHECK(std::count(log_text.begin(), log_text.end(), '\n') == 3);
}

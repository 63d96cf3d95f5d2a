#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "causalfs/dataset.hpp"
#include "causalfs/model.hpp"
#include "causalfs/optim.hpp"

// Episodic meta-training with Nesterov SGD and a stepped learning rate,
// validation-based parameter selection, confidence-interval evaluation, and
// the four-way component ablation runner.

namespace causalfs {

struct TrainConfig {
  int epochs = 800;
  int episodes_per_epoch = 100;
  int n_train = 5, k_train = 1, u_train = 15;
  int n_eval = 5, k_eval = 1, u_eval = 15;
  double lr0 = 0.1;
  double momentum = 0.9;
  double weight_decay = 3e-4;
  int decay_epoch = 400;
  double decay_factor = 20.0;
  int val_every = 5;
  int val_episodes = 200;
  std::uint64_t seed = 1;
  AugmentConfig augment;
  bool record_episodes = false;  // keep sampled index lists in the result

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (episodes_per_epoch < 1)
      throw std::invalid_argument("TrainConfig: episodes_per_epoch must be >= 1");
    if (n_train < 2 || n_eval < 2)
      throw std::invalid_argument("TrainConfig: episode way counts must be >= 2");
    if (k_train < 1 || u_train < 1 || k_eval < 1 || u_eval < 1)
      throw std::invalid_argument("TrainConfig: shot and query counts must be >= 1");
    if (lr0 <= 0.0) throw std::invalid_argument("TrainConfig: lr0 must be > 0");
    if (momentum < 0.0 || momentum >= 1.0)
      throw std::invalid_argument("TrainConfig: momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
    if (decay_epoch < 1 || decay_epoch > epochs)
      throw std::invalid_argument("TrainConfig: decay_epoch must be in [1, epochs]");
    if (decay_factor <= 0.0) throw std::invalid_argument("TrainConfig: decay_factor must be > 0");
    if (val_every < 1) throw std::invalid_argument("TrainConfig: val_every must be >= 1");
    if (val_episodes < 1) throw std::invalid_argument("TrainConfig: val_episodes must be >= 1");
  }
};

struct TrainLogEntry {
  int epoch = 0;
  int episode = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
};

template <typename Scalar>
struct TrainResult {
  ModelParams<Scalar> best_params;   // best validation accuracy; final when never validated
  ModelParams<Scalar> final_params;
  ModelParams<Scalar> velocity;      // state after the last step, for resuming
  std::vector<TrainLogEntry> log;
  double best_val_accuracy = -1.0;   // fraction; -1 when no validation ran
  int best_val_epoch = -1;
  std::vector<Episode> episodes;     // populated when record_episodes is set
};

struct EvalReport {
  double mean_pct = 0.0;
  double halfwidth_pct = 0.0;  // 1.96 * sample stddev / sqrt(n), in percent
  int n_episodes = 0;
  std::vector<double> accuracies;  // per episode, fractions in [0, 1]
  std::string fingerprint;
};

inline void check_dataset_model(const Dataset& ds, const ModelConfig& cfg) {
  if (ds.image_h != cfg.image_size || ds.image_w != cfg.image_size)
    throw std::invalid_argument("dataset images are " + std::to_string(ds.image_w) + "x" +
                                std::to_string(ds.image_h) + ", model expects " +
                                std::to_string(cfg.image_size) + "x" +
                                std::to_string(cfg.image_size));
  if (ds.channels != cfg.backbone.in_channels)
    throw std::invalid_argument("dataset has " + std::to_string(ds.channels) +
                                " channels, model expects " +
                                std::to_string(cfg.backbone.in_channels));
}

template <typename Scalar>
FeatureMap<Scalar> cast_map(const FeatureMap<float>& m) {
  if constexpr (std::is_same_v<Scalar, float>) {
    return m;
  } else {
    return FeatureMap<Scalar>(m.data.template cast<Scalar>(), m.h, m.w);
  }
}

// Pulls the episode's images out of the dataset in slot-major order. With
// `train_rng` set, training-mode augmentation is applied; otherwise the
// deterministic evaluation transform runs.
template <typename Scalar>
EpisodeBatch<Scalar> materialize_episode(const Dataset& ds, const Episode& ep,
                                         const AugmentConfig& aug, Rng* train_rng) {
  EpisodeBatch<Scalar> b;
  b.n_way = ep.n_way;
  b.k_shot = ep.k_shot;
  b.n_query = ep.n_query;
  auto prepare = [&](int sample_index) {
    const FeatureMap<float>& raw = ds.images[std::size_t(sample_index)];
    FeatureMap<float> out = train_rng ? augment_train(raw, aug, *train_rng) : augment_eval(raw, aug);
    return cast_map<Scalar>(out);
  };
  b.support.reserve(ep.support.size());
  b.query.reserve(ep.query.size());
  for (int idx : ep.support) b.support.push_back(prepare(idx));
  for (int idx : ep.query) b.query.push_back(prepare(idx));
  return b;
}

// Mean accuracy in percent plus the normal-approximation 95% interval
// halfwidth, using the n-1 sample standard deviation. A single episode has no
// spread estimate; its halfwidth is 0 by convention.
inline std::pair<double, double> summarize_accuracies(const std::vector<double>& acc) {
  if (acc.empty()) throw std::invalid_argument("summarize_accuracies: no episodes");
  const double n = double(acc.size());
  double mean = 0.0;
  for (double a : acc) mean += a;
  mean /= n;
  if (acc.size() == 1) return {100.0 * mean, 0.0};
  double ss = 0.0;
  for (double a : acc) ss += (a - mean) * (a - mean);
  const double stddev = std::sqrt(ss / (n - 1.0));
  return {100.0 * mean, 100.0 * 1.96 * stddev / std::sqrt(n)};
}

inline std::vector<Episode> sample_eval_episodes(const Dataset& ds, const std::vector<int>& pool,
                                                 int n_episodes, int n_way, int k_shot, int n_query,
                                                 std::uint64_t seed) {
  if (n_episodes < 1) throw std::invalid_argument("sample_eval_episodes: n_episodes must be >= 1");
  Rng rng(seed, stream::kEval);
  std::vector<Episode> eps;
  eps.reserve(std::size_t(n_episodes));
  for (int i = 0; i < n_episodes; ++i)
    eps.push_back(sample_episode(ds, pool, n_way, k_shot, n_query, rng));
  return eps;
}

// Accuracy of one pre-sampled episode under the evaluation transform. Pure in
// (params, episode), so episodes may be processed in any order; reports are
// assembled by episode index.
template <typename Scalar>
double eval_episode_accuracy(const ModelConfig& cfg, const ModelParams<Scalar>& params,
                             const Dataset& ds, const Episode& ep, const AugmentConfig& aug) {
  EpisodeBatch<Scalar> batch = materialize_episode<Scalar>(ds, ep, aug, nullptr);
  return episode_forward(cfg, params, batch).accuracy;
}

template <typename Scalar>
EvalReport evaluate(const ModelConfig& cfg, const ModelParams<Scalar>& params, const Dataset& ds,
                    const std::vector<int>& pool, int n_episodes, int n_way, int k_shot,
                    int n_query, std::uint64_t seed, const AugmentConfig& aug) {
  check_dataset_model(ds, cfg);
  const std::vector<Episode> eps =
      sample_eval_episodes(ds, pool, n_episodes, n_way, k_shot, n_query, seed);
  EvalReport r;
  r.n_episodes = n_episodes;
  r.fingerprint = cfg.fingerprint();
  r.accuracies.resize(std::size_t(n_episodes));
  for (int i = 0; i < n_episodes; ++i)
    r.accuracies[std::size_t(i)] = eval_episode_accuracy(cfg, params, ds, eps[std::size_t(i)], aug);
  const auto [mean, half] = summarize_accuracies(r.accuracies);
  r.mean_pct = mean;
  r.halfwidth_pct = half;
  return r;
}

// Called once per finished epoch; val_accuracy is -1 on epochs without a
// validation pass. Purely observational, so it cannot perturb determinism.
using TrainProgress = std::function<void(int epoch, double mean_loss, double val_accuracy)>;

template <typename Scalar>
TrainResult<Scalar> train(const ModelConfig& mcfg, const TrainConfig& tcfg, const Dataset& ds,
                          const ClassSplit& split, const TrainProgress& progress = {}) {
  mcfg.validate();
  tcfg.validate();
  check_dataset_model(ds, mcfg);
  if (int(split.train.size()) < tcfg.n_train)
    throw std::invalid_argument("train: split has " + std::to_string(split.train.size()) +
                                " training classes, episodes need " + std::to_string(tcfg.n_train));

  Model<Scalar> model = init_model<Scalar>(mcfg);
  ModelParams<Scalar> velocity = make_zero_grads(mcfg, model.params);
  ModelParams<Scalar> grads = make_zero_grads(mcfg, model.params);
  Rng ep_rng(tcfg.seed, stream::kEpisodes);
  Rng aug_rng(tcfg.seed, stream::kAugment);

  // One fixed validation episode set keeps the model-selection metric
  // comparable across epochs.
  std::vector<Episode> val_eps;
  if (!split.val.empty())
    val_eps = sample_eval_episodes(ds, split.val, tcfg.val_episodes, tcfg.n_eval, tcfg.k_eval,
                                   tcfg.u_eval, tcfg.seed);

  TrainResult<Scalar> out;
  out.log.reserve(std::size_t(tcfg.epochs) * std::size_t(tcfg.episodes_per_epoch));
  out.best_params = model.params;

  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, tcfg.lr0, tcfg.decay_epoch, tcfg.decay_factor);
    double loss_sum = 0.0;
    for (int episode = 0; episode < tcfg.episodes_per_epoch; ++episode) {
      Episode ep =
          sample_episode(ds, split.train, tcfg.n_train, tcfg.k_train, tcfg.u_train, ep_rng);
      EpisodeBatch<Scalar> batch = materialize_episode<Scalar>(ds, ep, tcfg.augment, &aug_rng);
      visit_params(mcfg, [](const std::string&, auto& t) { t.setZero(); }, grads);
      EpisodeResult<Scalar> r = episode_forward_backward(mcfg, model.params, batch, grads);
      if (!std::isfinite(double(r.loss))) {
        std::ostringstream os;
        os << "train: non-finite loss " << double(r.loss) << " at epoch " << epoch << " episode "
           << episode << "; classes";
        for (int c : ep.classes) os << ' ' << c;
        os << "; support";
        for (int i : ep.support) os << ' ' << i;
        os << "; query";
        for (int i : ep.query) os << ' ' << i;
        throw std::runtime_error(os.str());
      }
      sgd_step(mcfg, model.params, grads, velocity, Scalar(lr), Scalar(tcfg.momentum),
               Scalar(tcfg.weight_decay));
      out.log.push_back({epoch, episode, double(r.loss), r.accuracy, lr});
      loss_sum += double(r.loss);
      if (tcfg.record_episodes) out.episodes.push_back(std::move(ep));
    }

    double epoch_val = -1.0;
    if (!val_eps.empty() && (epoch + 1) % tcfg.val_every == 0) {
      double sum = 0.0;
      for (const Episode& ep : val_eps)
        sum += eval_episode_accuracy(mcfg, model.params, ds, ep, tcfg.augment);
      const double acc = sum / double(val_eps.size());
      epoch_val = acc;
      if (acc > out.best_val_accuracy) {
        out.best_val_accuracy = acc;
        out.best_val_epoch = epoch;
        out.best_params = model.params;
      }
    }
    if (progress) progress(epoch, loss_sum / double(tcfg.episodes_per_epoch), epoch_val);
  }

  out.final_params = model.params;
  out.velocity = std::move(velocity);
  if (out.best_val_epoch < 0) out.best_params = out.final_params;
  return out;
}

// --- ablation -----------------------------------------------------------------

struct AblationRow {
  bool use_imse = false, use_imfr = false;
  EvalReport report;
};

// Trains and evaluates the four component combinations under identical seeds
// and data. Row order: neither, encoder only, mask head only, both.
template <typename Scalar>
std::array<AblationRow, 4> run_ablation(ModelConfig mcfg, const TrainConfig& tcfg,
                                        const Dataset& ds, const ClassSplit& split,
                                        int eval_episodes,
                                        const std::function<void(int, bool, bool)>& on_combo = {},
                                        const TrainProgress& progress = {}) {
  if (split.test.empty()) throw std::invalid_argument("run_ablation: empty test split");
  const std::array<std::pair<bool, bool>, 4> combos{
      {{false, false}, {true, false}, {false, true}, {true, true}}};
  std::array<AblationRow, 4> rows;
  for (std::size_t i = 0; i < 4; ++i) {
    mcfg.use_imse = combos[i].first;
    mcfg.use_imfr = combos[i].second;
    if (on_combo) on_combo(int(i), mcfg.use_imse, mcfg.use_imfr);
    TrainResult<Scalar> r = train<Scalar>(mcfg, tcfg, ds, split, progress);
    rows[i].use_imse = combos[i].first;
    rows[i].use_imfr = combos[i].second;
    rows[i].report = evaluate(mcfg, r.best_params, ds, split.test, eval_episodes, tcfg.n_eval,
                              tcfg.k_eval, tcfg.u_eval, tcfg.seed, tcfg.augment);
  }
  return rows;
}

// --- text formats ---------------------------------------------------------------

inline std::string format_train_log(const std::vector<TrainLogEntry>& log) {
  std::ostringstream os;
  os << "# epoch episode loss accuracy lr\n";
  os << std::setprecision(17);
  for (const auto& e : log)
    os << e.epoch << ' ' << e.episode << ' ' << e.loss << ' ' << e.accuracy << ' ' << e.lr << '\n';
  return os.str();
}

inline std::string format_eval_report(const EvalReport& r) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "eval report v1\n";
  os << "fingerprint " << r.fingerprint << '\n';
  os << "episodes " << r.n_episodes << '\n';
  os << "mean_pct " << r.mean_pct << '\n';
  os << "ci95_halfwidth_pct " << r.halfwidth_pct << '\n';
  os << "accuracies " << r.accuracies.size() << '\n';
  for (std::size_t i = 0; i < r.accuracies.size(); ++i) {
    if (i) os << ' ';
    os << r.accuracies[i];
  }
  if (!r.accuracies.empty()) os << '\n';
  return os.str();
}

inline EvalReport parse_eval_report(std::istream& is) {
  EvalReport r;
  std::string line, tag;
  std::getline(is, line);
  if (line != "eval report v1")
    throw std::runtime_error("eval report: unrecognized header '" + line + "'");
  is >> tag >> r.fingerprint;
  if (tag != "fingerprint") throw std::runtime_error("eval report: missing fingerprint");
  is >> tag >> r.n_episodes;
  if (tag != "episodes") throw std::runtime_error("eval report: missing episode count");
  is >> tag >> r.mean_pct;
  if (tag != "mean_pct") throw std::runtime_error("eval report: missing mean");
  is >> tag >> r.halfwidth_pct;
  if (tag != "ci95_halfwidth_pct") throw std::runtime_error("eval report: missing halfwidth");
  std::size_t count = 0;
  is >> tag >> count;
  if (tag != "accuracies") throw std::runtime_error("eval report: missing accuracies");
  r.accuracies.resize(count);
  for (std::size_t i = 0; i < count; ++i)
    if (!(is >> r.accuracies[i])) throw std::runtime_error("eval report: truncated accuracies");
  return r;
}

inline std::string format_ablation_table(const std::array<AblationRow, 4>& rows) {
  std::ostringstream os;
  os << "# encoder mask_head mean_pct ci95_halfwidth_pct episodes\n";
  os << std::setprecision(17);
  for (const auto& row : rows)
    os << (row.use_imse ? 1 : 0) << ' ' << (row.use_imfr ? 1 : 0) << ' ' << row.report.mean_pct
       << ' ' << row.report.halfwidth_pct << ' ' << row.report.n_episodes << '\n';
  return os.str();
}

}  // namespace causalfs

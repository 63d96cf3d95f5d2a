#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "causalfs/config.hpp"
#include "causalfs/costs.hpp"
#include "causalfs/heatmap.hpp"
#include "causalfs/io.hpp"
#include "causalfs/scm.hpp"
#include "causalfs/train.hpp"

// Command-line front end. Five subcommands (train, eval, ablate, oracle,
// inspect) share a config file + key=value override pipeline and write their
// outputs under a fixed directory layout, so a rerun with the same inputs
// overwrites the previous files byte for byte. Exit codes: 0 success, 1 bad
// usage or configuration, 2 runtime failure.

namespace causalfs {

namespace cli {

namespace fs = std::filesystem;

// Output root priority: --out flag, then CAUSALFS_OUTPUT_ROOT, then ./runs.
inline fs::path output_root(const std::string& flag_value) {
  if (!flag_value.empty()) return fs::path(flag_value);
  if (const char* env = std::getenv("CAUSALFS_OUTPUT_ROOT"); env && *env) return fs::path(env);
  return fs::path("runs");
}

inline Dataset build_dataset(const DataConfig& dc) {
  if (dc.source == "folder") return load_image_folder(dc.folder);
  return generate_synthetic_dataset(dc.synth);
}

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
};

inline void add_common(CLI::App* cmd, CommonOptions& opt) {
  cmd->add_option("--config", opt.config_path, "configuration file (key = value lines)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--set", opt.overrides, "override a config key, e.g. --set train.lr0=0.05")
      ->take_all();
  cmd->add_option("--out", opt.out_dir,
                  "output directory (default: $CAUSALFS_OUTPUT_ROOT, else ./runs)");
}

struct ResolvedRun {
  RunConfig rc;
  Dataset dataset;
  ClassSplit split;
  fs::path out;
};

// Shared setup for the data-driven subcommands: resolve the config, realize
// the dataset, derive the class split, and echo the resolved config.
inline ResolvedRun prepare_run(const CommonOptions& opt) {
  ResolvedRun run;
  run.rc = load_run_config(opt.config_path, opt.overrides);
  run.dataset = build_dataset(run.rc.data);
  if (run.dataset.image_h != run.dataset.image_w)
    throw std::invalid_argument("dataset images must be square, got " +
                                std::to_string(run.dataset.image_h) + "x" +
                                std::to_string(run.dataset.image_w));
  run.rc.resolve_image_size(run.dataset.image_h);
  run.rc.validate();
  run.split = split_classes(run.dataset.num_classes(), run.rc.data.split_train,
                            run.rc.data.split_val, run.rc.data.split_test, run.rc.data.split_seed);
  run.out = output_root(opt.out_dir);
  fs::create_directories(run.out);
  write_text_file((run.out / "config.txt").string(), describe_run_config(run.rc));
  write_text_file((run.out / "dataset.txt").string(),
                  dataset_manifest(run.dataset, run.rc.data.source));
  return run;
}

// One metrics row per evaluated model, tab separated so the table loads in
// anything that reads TSV.
struct MetricsRow {
  std::string label;
  bool use_imse = false, use_imfr = false;
  double mean_pct = 0.0, halfwidth_pct = 0.0;
  int episodes = 0;
};

inline std::string format_metrics_tsv(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "label\tuse_imse\tuse_imfr\tmean_pct\tci95_halfwidth_pct\tepisodes\n";
  for (const auto& r : rows)
    os << r.label << '\t' << (r.use_imse ? 1 : 0) << '\t' << (r.use_imfr ? 1 : 0) << '\t'
       << r.mean_pct << '\t' << r.halfwidth_pct << '\t' << r.episodes << '\n';
  return os.str();
}

inline std::vector<MetricsRow> parse_metrics_tsv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) ||
      line != "label\tuse_imse\tuse_imfr\tmean_pct\tci95_halfwidth_pct\tepisodes")
    throw std::runtime_error("parse_metrics_tsv: bad header");
  std::vector<MetricsRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    MetricsRow r;
    int imse = 0, imfr = 0;
    if (!std::getline(ls, r.label, '\t')) throw std::runtime_error("parse_metrics_tsv: bad row");
    if (!(ls >> imse >> imfr >> r.mean_pct >> r.halfwidth_pct >> r.episodes))
      throw std::runtime_error("parse_metrics_tsv: bad row '" + line + "'");
    r.use_imse = imse != 0;
    r.use_imfr = imfr != 0;
    rows.push_back(std::move(r));
  }
  return rows;
}

inline MetricsRow metrics_row(const std::string& label, const ModelConfig& mcfg,
                              const EvalReport& rep) {
  return MetricsRow{label, mcfg.use_imse, mcfg.use_imfr, rep.mean_pct, rep.halfwidth_pct,
                    rep.n_episodes};
}

inline TrainProgress stdout_progress(int epochs) {
  return [epochs](int epoch, double mean_loss, double val_acc) {
    std::ostringstream os;
    os << "epoch " << (epoch + 1) << '/' << epochs << "  loss " << std::fixed
       << std::setprecision(4) << mean_loss;
    if (val_acc >= 0.0)
      os << "  val " << std::setprecision(2) << (100.0 * val_acc) << '%';
    std::cout << os.str() << std::endl;
  };
}

inline int run_train(const CommonOptions& opt) {
  ResolvedRun run = prepare_run(opt);
  const ModelConfig& mcfg = run.rc.model;
  const TrainConfig& tcfg = run.rc.train;
  std::cout << "training " << mcfg.describe() << " for " << tcfg.epochs << " epochs x "
            << tcfg.episodes_per_epoch << " episodes" << std::endl;
  TrainResult<double> result = train<double>(mcfg, tcfg, run.dataset, run.split,
                                             stdout_progress(tcfg.epochs));

  save_checkpoint((run.out / "checkpoint_best.txt").string(), mcfg, result.best_params);
  save_checkpoint((run.out / "checkpoint_final.txt").string(), mcfg, result.final_params,
                  &result.velocity);
  write_text_file((run.out / "train_log.txt").string(), format_train_log(result.log));
  if (result.best_val_epoch >= 0)
    std::cout << "best validation accuracy " << std::fixed << std::setprecision(2)
              << (100.0 * result.best_val_accuracy) << "% at epoch "
              << (result.best_val_epoch + 1) << std::endl;

  if (!run.split.test.empty()) {
    EvalReport rep = evaluate(mcfg, result.best_params, run.dataset, run.split.test,
                              run.rc.eval.episodes, tcfg.n_eval, tcfg.k_eval, tcfg.u_eval,
                              run.rc.eval.seed, tcfg.augment);
    write_text_file((run.out / "eval_test.txt").string(), format_eval_report(rep));
    write_text_file((run.out / "metrics.tsv").string(),
                    format_metrics_tsv({metrics_row("test", mcfg, rep)}));
    std::cout << "test accuracy " << std::fixed << std::setprecision(2) << rep.mean_pct << " +/- "
              << rep.halfwidth_pct << "% over " << rep.n_episodes << " episodes" << std::endl;
  }
  std::cout << "outputs in " << run.out.string() << std::endl;
  return 0;
}

inline int run_eval(const CommonOptions& opt, const std::string& checkpoint_path) {
  ResolvedRun run = prepare_run(opt);
  const ModelConfig& mcfg = run.rc.model;
  Model<double> model = init_model<double>(mcfg);
  load_checkpoint(checkpoint_path, mcfg, model.params);
  if (run.split.test.empty()) throw std::invalid_argument("eval: config leaves no test classes");

  EvalReport rep = evaluate(mcfg, model.params, run.dataset, run.split.test, run.rc.eval.episodes,
                            run.rc.train.n_eval, run.rc.train.k_eval, run.rc.train.u_eval,
                            run.rc.eval.seed, run.rc.train.augment);
  write_text_file((run.out / "eval_test.txt").string(), format_eval_report(rep));
  write_text_file((run.out / "metrics.tsv").string(),
                  format_metrics_tsv({metrics_row("test", mcfg, rep)}));
  std::cout << "test accuracy " << std::fixed << std::setprecision(2) << rep.mean_pct << " +/- "
            << rep.halfwidth_pct << "% over " << rep.n_episodes << " episodes" << std::endl;
  std::cout << "outputs in " << run.out.string() << std::endl;
  return 0;
}

inline int run_ablate(const CommonOptions& opt) {
  ResolvedRun run = prepare_run(opt);
  auto on_combo = [](int i, bool imse, bool imfr) {
    std::cout << "combo " << (i + 1) << "/4: encoder=" << (imse ? "on" : "off")
              << " mask_head=" << (imfr ? "on" : "off") << std::endl;
  };
  auto rows = run_ablation<double>(run.rc.model, run.rc.train, run.dataset, run.split,
                                   run.rc.eval.episodes, on_combo,
                                   stdout_progress(run.rc.train.epochs));

  const std::array<std::string, 4> labels{"baseline", "encoder", "mask", "full"};
  std::vector<MetricsRow> metrics;
  std::ostringstream reports;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    MetricsRow r;
    r.label = labels[i];
    r.use_imse = rows[i].use_imse;
    r.use_imfr = rows[i].use_imfr;
    r.mean_pct = rows[i].report.mean_pct;
    r.halfwidth_pct = rows[i].report.halfwidth_pct;
    r.episodes = rows[i].report.n_episodes;
    metrics.push_back(r);
    reports << "## " << labels[i] << "\n" << format_eval_report(rows[i].report) << "\n";
  }
  const std::string table = format_ablation_table(rows);
  write_text_file((run.out / "ablation.txt").string(), table);
  write_text_file((run.out / "ablation.tsv").string(), format_metrics_tsv(metrics));
  write_text_file((run.out / "ablation_reports.txt").string(), reports.str());
  std::cout << table;
  std::cout << "outputs in " << run.out.string() << std::endl;
  return 0;
}

// Truth, frontdoor, and naive columns for every intervention level of one
// discrete model, plus the error summaries the comparison turns on.
inline std::string format_oracle_report(const scm::DiscreteScm& s, const std::string& source) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "oracle report v1\n";
  os << "scm " << source << "\n";
  os << "domains c=" << s.nc << " x=" << s.nx << " m=" << s.nm << " y=" << s.ny << "\n";
  const scm::ObservedJoint obs = scm::marginalize_confounder(scm::observational_joint(s));
  for (int x0 = 0; x0 < s.nx; ++x0) {
    const Eigen::VectorXd truth = scm::interventional_truth(s, x0);
    const Eigen::VectorXd fd = scm::frontdoor_estimate(obs, x0);
    const Eigen::VectorXd naive = scm::naive_conditional(obs, x0);
    os << "do(x=" << x0 << ")\n";
    os << "  y truth frontdoor naive\n";
    for (int y = 0; y < s.ny; ++y)
      os << "  " << y << ' ' << truth(y) << ' ' << fd(y) << ' ' << naive(y) << '\n';
    os << "  frontdoor_max_abs_err " << (fd - truth).cwiseAbs().maxCoeff() << '\n';
    os << "  naive_total_variation " << scm::total_variation(naive, truth) << '\n';
  }
  return os.str();
}

inline int run_oracle(const std::string& scm_path, bool use_random, std::uint64_t seed,
                      const std::string& out_dir) {
  scm::DiscreteScm s;
  std::string source;
  if (!scm_path.empty()) {
    s = scm::load_scm(scm_path);
    source = scm_path;
  } else if (use_random) {
    Rng rng(seed, stream::kScm);
    s = scm::random_scm(rng);
    source = "random seed=" + std::to_string(seed);
  } else {
    s = scm::confounded_witness();
    source = "built-in confounded witness";
  }
  const std::string report = format_oracle_report(s, source);
  std::cout << report;
  fs::path out = output_root(out_dir);
  fs::create_directories(out);
  write_text_file((out / "oracle.txt").string(), report);
  write_text_file((out / "oracle_scm.txt").string(), [&] {
    std::ostringstream os;
    scm::save_scm(s, os);
    return os.str();
  }());
  std::cout << "outputs in " << out.string() << std::endl;
  return 0;
}

inline int run_inspect(const CommonOptions& opt, const std::string& checkpoint_path, int class_id,
                       int sample_index) {
  ResolvedRun run = prepare_run(opt);
  const ModelConfig& mcfg = run.rc.model;
  Model<double> model = init_model<double>(mcfg);
  if (!checkpoint_path.empty()) load_checkpoint(checkpoint_path, mcfg, model.params);

  if (class_id < 0) class_id = run.split.test.empty() ? 0 : run.split.test.front();
  if (class_id >= run.dataset.num_classes())
    throw std::invalid_argument("inspect: class " + std::to_string(class_id) +
                                " out of range for " +
                                std::to_string(run.dataset.num_classes()) + " classes");
  const auto& samples = run.dataset.class_index[std::size_t(class_id)];
  if (sample_index < 0 || sample_index >= int(samples.size()))
    throw std::invalid_argument("inspect: sample " + std::to_string(sample_index) +
                                " out of range for class " + std::to_string(class_id));
  const FeatureMap<double> image =
      cast_map<double>(run.dataset.images[std::size_t(samples[std::size_t(sample_index)])]);

  const std::string stem = "class" + std::to_string(class_id) + "_sample" +
                           std::to_string(sample_index);
  const fs::path hm_dir = run.out / "heatmaps";
  auto paths = export_sample_heatmaps(mcfg, model.params, image, hm_dir.string(), stem);
  if (mcfg.use_imfr) {
    auto mask_paths = export_query_masks(mcfg, model.params, image, hm_dir.string(), stem);
    paths.insert(paths.end(), mask_paths.begin(), mask_paths.end());
  }
  for (const auto& p : paths) std::cout << "wrote " << p << '\n';

  CostReport cost = cost_report(mcfg, run.rc.train.n_eval, run.rc.train.k_eval,
                                run.rc.train.u_eval);
  const std::string cost_text =
      format_cost_report(cost, mcfg, run.rc.train.n_eval, run.rc.train.k_eval,
                         run.rc.train.u_eval);
  write_text_file((run.out / "cost_report.txt").string(), cost_text);
  std::cout << cost_text;
  std::cout << "outputs in " << run.out.string() << std::endl;
  return 0;
}

}  // namespace cli

inline int cli_main(int argc, const char* const* argv) {
  CLI::App app{"few-shot fine-grained classification workbench"};
  app.require_subcommand(1);

  cli::CommonOptions train_opt, eval_opt, ablate_opt, inspect_opt;
  std::string eval_checkpoint, inspect_checkpoint;
  std::string oracle_scm, oracle_out;
  bool oracle_random = false;
  std::uint64_t oracle_seed = 1;
  int inspect_class = -1, inspect_sample = 0;

  CLI::App* c_train = app.add_subcommand("train", "train a model and evaluate the best snapshot");
  cli::add_common(c_train, train_opt);

  CLI::App* c_eval = app.add_subcommand("eval", "evaluate a saved checkpoint on the test split");
  cli::add_common(c_eval, eval_opt);
  c_eval->add_option("--checkpoint", eval_checkpoint, "checkpoint file to load")
      ->required()
      ->check(CLI::ExistingFile);

  CLI::App* c_ablate = app.add_subcommand("ablate", "train all four module combinations");
  cli::add_common(c_ablate, ablate_opt);

  CLI::App* c_oracle =
      app.add_subcommand("oracle", "print interventional truth vs frontdoor vs naive estimates");
  c_oracle->add_option("--scm", oracle_scm, "structural model definition file")
      ->check(CLI::ExistingFile);
  c_oracle->add_flag("--random", oracle_random, "use a randomly generated model");
  c_oracle->add_option("--seed", oracle_seed, "seed for --random");
  c_oracle->add_option("--out", oracle_out,
                       "output directory (default: $CAUSALFS_OUTPUT_ROOT, else ./runs)");
  c_oracle->get_option("--scm")->excludes(c_oracle->get_option("--random"));

  CLI::App* c_inspect =
      app.add_subcommand("inspect", "export activation heatmaps and a compute cost report");
  cli::add_common(c_inspect, inspect_opt);
  c_inspect->add_option("--checkpoint", inspect_checkpoint, "checkpoint file to load (optional)")
      ->check(CLI::ExistingFile);
  c_inspect->add_option("--class-id", inspect_class,
                        "dataset class to render (default: first test class)");
  c_inspect->add_option("--sample", inspect_sample, "sample index within the class");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // --help exits 0, every parse failure is a usage error
  }

  try {
    if (c_train->parsed()) return cli::run_train(train_opt);
    if (c_eval->parsed()) return cli::run_eval(eval_opt, eval_checkpoint);
    if (c_ablate->parsed()) return cli::run_ablate(ablate_opt);
    if (c_oracle->parsed())
      return cli::run_oracle(oracle_scm, oracle_random, oracle_seed, oracle_out);
    if (c_inspect->parsed())
      return cli::run_inspect(inspect_opt, inspect_checkpoint, inspect_class, inspect_sample);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  }
  return 0;
}

}  // namespace causalfs

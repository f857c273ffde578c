// Command-line frontend: train and evaluate routed detection heads on the
// synthetic region task, sweep the loss blend, and audit the numeric
// machinery (gradient checks, weight sampler statistics, parameter counts).
//
// Exit codes: 0 success, 1 runtime/check failure, 2 bad configuration,
// 3 numeric divergence, 4 checkpoint problems.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rdr/checkpoint.hpp"
#include "rdr/config.hpp"
#include "rdr/errors.hpp"
#include "rdr/gradcheck_suite.hpp"
#include "rdr/heads.hpp"
#include "rdr/routing.hpp"
#include "rdr/stats.hpp"
#include "rdr/taskgen.hpp"
#include "rdr/train.hpp"

namespace fs = std::filesystem;

namespace {

struct TrainArgs {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out_dir;
  std::string audit_path;
  std::string dump_prefix;
  std::string train_csv, val_csv;
  bool debug_asserts = false;
};

struct EvalArgs {
  std::string checkpoint_path;
  std::uint64_t data_seed = 0;
  bool data_seed_set = false;
};

struct SweepArgs {
  std::string config_path;
  std::string lambdas = "0.001,0.1,0.5,0.9,0.95";
  std::size_t seeds = 3;
  std::size_t jobs = 4;
  std::string out_dir;
};

struct GradcheckArgs {
  std::size_t trials = 100;
  std::uint64_t seed = 1;
};

struct SamplerArgs {
  std::size_t draws = 10000;
  std::uint64_t seed = 1;
};

rdr::config::RunConfig load_or_default(const std::string& path) {
  if (path.empty()) {
    rdr::config::RunConfig cfg;
    cfg.validate();
    return cfg;
  }
  return rdr::config::load_run_config(path);
}

std::vector<double> parse_lambda_list(const std::string& csv) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= csv.size()) {
    const std::size_t comma = std::min(csv.find(',', pos), csv.size());
    const std::string tok = csv.substr(pos, comma - pos);
    if (tok.empty()) {
      throw rdr::ConfigError("sweep: empty value in --lambdas list");
    }
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(tok, &used);
    } catch (const std::exception&) {
      throw rdr::ConfigError("sweep: '" + tok + "' is not a number");
    }
    if (used != tok.size()) {
      throw rdr::ConfigError("sweep: '" + tok + "' is not a number");
    }
    out.push_back(v);
    pos = comma + 1;
  }
  return out;
}

int cmd_train(const TrainArgs& args) {
  rdr::config::RunConfig cfg = load_or_default(args.config_path);
  if (args.seed_set) cfg.seed = args.seed;
  if (!args.out_dir.empty()) cfg.output_dir = args.out_dir;
  cfg.validate();

  rdr::taskgen::Dataset data;
  if (!args.train_csv.empty() || !args.val_csv.empty()) {
    if (args.train_csv.empty() || args.val_csv.empty()) {
      throw rdr::ConfigError("train: --train-csv and --val-csv go together");
    }
    data.train = rdr::taskgen::read_csv(args.train_csv);
    data.val = rdr::taskgen::read_csv(args.val_csv);
  } else {
    data = rdr::taskgen::generate_dataset(cfg.data);
  }

  if (!args.dump_prefix.empty()) {
    rdr::taskgen::write_csv(data.train, args.dump_prefix + "_train.csv");
    rdr::taskgen::write_csv(data.val, args.dump_prefix + "_val.csv");
  }

  std::ofstream audit;
  std::ostream* audit_ptr = nullptr;
  if (!args.audit_path.empty()) {
    audit.open(args.audit_path, std::ios::trunc);
    if (!audit) {
      throw rdr::Error("train: cannot open '" + args.audit_path + "' for writing");
    }
    audit_ptr = &audit;
  }

  rdr::heads::Head head(cfg.head, cfg.seed);
  const rdr::train::TrainResult result =
      rdr::train::train_run(cfg, head, data, audit_ptr, args.debug_asserts);

  fs::create_directories(cfg.output_dir);
  const fs::path out(cfg.output_dir);
  rdr::train::write_metrics_csv((out / "metrics.csv").string(), result.rows);
  {
    std::ofstream js(out / "summary.json", std::ios::trunc);
    js << rdr::train::summary_json(cfg, result).dump(2) << "\n";
    if (!js) throw rdr::Error("train: write to summary.json failed");
  }
  rdr::checkpoint::save((out / "checkpoint.bin").string(), cfg, head);

  for (const auto& row : result.rows) {
    std::printf("epoch %3zu/%zu  total=%.4f  val_acc=%.4f  val_iou=%.4f  val_ap50=%.4f\n",
                row.epoch, cfg.epochs, row.total, row.val_accuracy,
                row.val_mean_iou, row.val_ap50);
  }
  std::printf("done: %s variant, %zu parameters, %.1fs wall\n",
              rdr::heads::to_string(cfg.head.variant), head.parameter_count(),
              result.wall_seconds);
  std::printf("artifacts in %s: metrics.csv summary.json checkpoint.bin\n",
              cfg.output_dir.c_str());
  return 0;
}

int cmd_eval(const EvalArgs& args) {
  const auto loaded = rdr::checkpoint::load(args.checkpoint_path);
  rdr::heads::Head head = rdr::checkpoint::restore_head(loaded);

  rdr::taskgen::DatasetConfig dc = loaded.config.data;
  if (args.data_seed_set) dc.seed = args.data_seed;
  const rdr::taskgen::Dataset data = rdr::taskgen::generate_dataset(dc);
  const rdr::taskgen::Metrics m = rdr::train::evaluate_head(head, data.val);

  nlohmann::json j;
  j["checkpoint"] = args.checkpoint_path;
  j["variant"] = rdr::heads::to_string(loaded.config.head.variant);
  j["data_seed"] = dc.seed;
  j["n_val"] = data.val.size();
  j["val_accuracy"] = m.accuracy;
  j["val_mean_iou"] = m.mean_iou_fg;
  j["val_ap50"] = m.ap50;
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_sweep(const SweepArgs& args) {
  rdr::config::RunConfig cfg = load_or_default(args.config_path);
  if (!args.out_dir.empty()) cfg.output_dir = args.out_dir;
  cfg.validate();
  const std::vector<double> lambdas = parse_lambda_list(args.lambdas);

  const auto rows = rdr::train::sweep_lambda(cfg, lambdas, args.seeds, args.jobs);
  fs::create_directories(cfg.output_dir);
  const fs::path out = fs::path(cfg.output_dir) / "sweep.csv";
  rdr::train::write_sweep_csv(out.string(), rows);

  std::printf("%8s %6s %10s %10s %10s %10s\n", "lambda", "seed", "total",
              "val_acc", "val_iou", "val_ap50");
  bool all_finite = true;
  for (const auto& r : rows) {
    std::printf("%8.3f %6llu %10.4f %10.4f %10.4f %10.4f\n", r.lambda,
                static_cast<unsigned long long>(r.seed), r.total, r.val_accuracy,
                r.val_mean_iou, r.val_ap50);
    all_finite = all_finite && r.finite;
  }
  std::printf("wrote %s\n", out.string().c_str());
  if (!all_finite) {
    std::fprintf(stderr, "sweep: non-finite results present\n");
    return 1;
  }
  return 0;
}

int cmd_gradcheck(const GradcheckArgs& args) {
  const auto rep = rdr::gradcheck::run_suite(args.seed, args.trials);
  std::printf("%-20s %14s  %s\n", "case", "max_rel_err", "status");
  for (const auto& r : rep.results) {
    std::printf("%-20s %14.3e  %s\n", r.name.c_str(), r.max_rel_err,
                r.pass ? "ok" : "FAIL");
  }
  std::printf("%zu cases, %zu trials each, worst %.3e\n", rep.results.size(),
              args.trials, rep.worst);
  return rep.all_pass ? 0 : 1;
}

int cmd_audit_sampler(const SamplerArgs& args) {
  if (args.draws < 1000) {
    throw rdr::ConfigError("audit-sampler: --draws must be >= 1000");
  }
  rdr::Rng rng(args.seed);
  std::vector<double> highs, lows;
  highs.reserve(args.draws);
  lows.reserve(args.draws);
  const std::vector<rdr::routing::Node> left{rdr::routing::Node::kLeft};
  for (std::size_t i = 0; i < args.draws; ++i) {
    const auto w = rdr::routing::sample_weights(left, rng);
    highs.push_back(w.left[0]);
    lows.push_back(w.right[0]);
  }

  auto interval_report = [&](const std::vector<double>& v, double lo, double hi) {
    double mean = 0.0, vmin = v[0], vmax = v[0];
    for (double x : v) {
      mean += x;
      vmin = std::min(vmin, x);
      vmax = std::max(vmax, x);
    }
    mean /= static_cast<double>(v.size());
    const double ks = rdr::stats::ks_statistic_uniform(v, lo, hi);
    const double crit = rdr::stats::ks_critical_001(v.size());
    nlohmann::json j;
    j["lo"] = lo;
    j["hi"] = hi;
    j["mean"] = mean;
    j["min"] = vmin;
    j["max"] = vmax;
    j["ks_statistic"] = ks;
    j["ks_critical_alpha_0.01"] = crit;
    j["in_bounds"] = vmin >= lo && vmax <= hi;
    j["uniform"] = ks < crit;
    return j;
  };

  double min_ratio = highs[0] / lows[0];
  for (std::size_t i = 1; i < args.draws; ++i) {
    min_ratio = std::min(min_ratio, highs[i] / lows[i]);
  }

  nlohmann::json j;
  j["draws"] = args.draws;
  j["seed"] = args.seed;
  j["high"] = interval_report(highs, rdr::routing::kHighMin, rdr::routing::kHighMax);
  j["low"] = interval_report(lows, rdr::routing::kLowMin, rdr::routing::kLowMax);
  j["min_high_low_ratio"] = min_ratio;
  const bool pass = j["high"]["in_bounds"].get<bool>() &&
                    j["low"]["in_bounds"].get<bool>() &&
                    j["high"]["uniform"].get<bool>() &&
                    j["low"]["uniform"].get<bool>() && min_ratio >= 3.0;
  j["pass"] = pass;
  std::cout << j.dump(2) << "\n";
  return pass ? 0 : 1;
}

int cmd_count() {
  using rdr::heads::Variant;
  struct RowSpec {
    Variant variant;
    int routing_depth;
    int routing_width;
  };
  const std::vector<RowSpec> specs = {{Variant::kSingle, 2, 32},
                                      {Variant::kLite, 1, 16},
                                      {Variant::kB, 2, 32},
                                      {Variant::kM, 2, 32},
                                      {Variant::kT, 2, 32}};
  std::printf("%-8s %8s %8s %8s %8s %8s %10s %10s\n", "variant", "trunk",
              "nodes", "routing", "masks", "tasks", "total", "registered");
  bool ok = true;
  std::vector<std::size_t> totals;
  for (const auto& s : specs) {
    rdr::heads::HeadConfig hc;
    hc.variant = s.variant;
    hc.routing_depth = s.routing_depth;
    hc.routing_width = s.routing_width;
    const auto counts = rdr::heads::count_params(hc);
    rdr::heads::Head head(hc, 1);
    const std::size_t registered = head.parameter_count();
    std::printf("%-8s %8zu %8zu %8zu %8zu %8zu %10zu %10zu\n",
                rdr::heads::to_string(s.variant), counts.trunk,
                counts.node_predictors, counts.routing_branch, counts.mask_branch,
                counts.task_branches, counts.total(), registered);
    ok = ok && counts.total() == registered;
    totals.push_back(counts.total());
  }
  // single < Lite < B < M < T at default widths
  for (std::size_t i = 1; i < totals.size(); ++i) ok = ok && totals[i - 1] < totals[i];
  if (!ok) {
    std::fprintf(stderr, "count: closed-form and registered totals disagree "
                         "or ordering is violated\n");
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"randomized decision routing for detection heads"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "train a head and write artifacts");
  train->add_option("--config", train_args.config_path, "run config JSON");
  auto* seed_opt =
      train->add_option("--seed", train_args.seed, "override the run seed");
  train->add_option("--out", train_args.out_dir, "override the output directory");
  train->add_option("--audit-routing", train_args.audit_path,
                    "write per-sample routing decisions to this CSV");
  train->add_option("--dump-data", train_args.dump_prefix,
                    "write the dataset to PREFIX_train.csv / PREFIX_val.csv");
  train->add_option("--train-csv", train_args.train_csv,
                    "load training samples from CSV instead of generating");
  train->add_option("--val-csv", train_args.val_csv,
                    "load validation samples from CSV instead of generating");
  train->add_flag("--debug-asserts", train_args.debug_asserts,
                  "verify routing invariants every step");

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on fresh data");
  eval->add_option("--checkpoint", eval_args.checkpoint_path, "checkpoint file")
      ->required();
  auto* dseed_opt = eval->add_option("--data-seed", eval_args.data_seed,
                                     "override the dataset seed");

  SweepArgs sweep_args;
  auto* sweep = app.add_subcommand("sweep-lambda",
                                   "train across a grid of loss blends");
  sweep->add_option("--config", sweep_args.config_path, "run config JSON");
  sweep->add_option("--lambdas", sweep_args.lambdas,
                    "comma-separated blend values");
  sweep->add_option("--seeds", sweep_args.seeds, "seeds per blend value");
  sweep->add_option("--jobs", sweep_args.jobs, "parallel training jobs");
  sweep->add_option("--out", sweep_args.out_dir, "output directory");

  GradcheckArgs grad_args;
  auto* grad = app.add_subcommand("gradcheck",
                                  "finite-difference audit of ops and losses");
  grad->add_option("--trials", grad_args.trials, "random trials per case");
  grad->add_option("--seed", grad_args.seed, "rng seed");

  SamplerArgs sampler_args;
  auto* sampler = app.add_subcommand("audit-sampler",
                                     "distribution audit of the weight sampler");
  sampler->add_option("--draws", sampler_args.draws, "number of weight pairs");
  sampler->add_option("--seed", sampler_args.seed, "rng seed");

  auto* count = app.add_subcommand("count", "parameter counts per head variant");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    train_args.seed_set = seed_opt->count() > 0;
    eval_args.data_seed_set = dseed_opt->count() > 0;
    if (train->parsed()) return cmd_train(train_args);
    if (eval->parsed()) return cmd_eval(eval_args);
    if (sweep->parsed()) return cmd_sweep(sweep_args);
    if (grad->parsed()) return cmd_gradcheck(grad_args);
    if (sampler->parsed()) return cmd_audit_sampler(sampler_args);
    if (count->parsed()) return cmd_count();
  } catch (const rdr::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const rdr::NumericsError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const rdr::CheckpointError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

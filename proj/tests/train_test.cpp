#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "rdr/checkpoint.hpp"
#include "rdr/config.hpp"
#include "rdr/heads.hpp"
#include "rdr/taskgen.hpp"
#include "rdr/train.hpp"

namespace ad = rdr::ad;
namespace cf = rdr::config;
namespace tg = rdr::taskgen;
namespace tr = rdr::train;

namespace {

cf::RunConfig small_config() {
  cf::RunConfig cfg;
  cfg.data.n_train = 600;
  cfg.data.n_val = 200;
  cfg.data.feature_dim = 32;
  cfg.data.distractor_dims = 8;
  cfg.data.seed = 5;
  cfg.head.input_dim = 32;
  cfg.head.trunk_width = 64;
  cfg.head.routing_width = 16;
  cfg.epochs = 6;
  cfg.batch_size = 64;
  cfg.seed = 3;
  return cfg;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST(RunConfig, JsonRoundTripIsIdentity) {
  cf::RunConfig cfg = small_config();
  cfg.head.variant = rdr::heads::Variant::kT;
  cfg.loss.cls = rdr::losses::ClsLoss::kFocal;
  cfg.loss.bbox = rdr::losses::BboxLoss::kIou;
  cfg.loss.lambda = 0.7;
  cfg.optimizer.lr = 0.01;
  cfg.output_dir = "elsewhere";
  const nlohmann::json j = cf::to_json(cfg);
  const cf::RunConfig back = cf::run_config_from_json(j);
  EXPECT_EQ(cf::to_json(back), j);
}

TEST(RunConfig, DefaultsApplyWhenSectionsOmitted) {
  const cf::RunConfig cfg = cf::run_config_from_json(nlohmann::json::object());
  EXPECT_EQ(cfg.head.variant, rdr::heads::Variant::kB);
  EXPECT_EQ(cfg.epochs, 30u);
  EXPECT_EQ(cfg.batch_size, 64u);
  EXPECT_EQ(cfg.head.input_dim, cfg.data.feature_dim);
  EXPECT_EQ(cfg.head.num_classes, cfg.data.num_classes);
}

TEST(RunConfig, HeadDimensionsFollowDataSection) {
  const auto j = nlohmann::json::parse(R"({"data": {"feature_dim": 48, "num_classes": 6}})");
  const cf::RunConfig cfg = cf::run_config_from_json(j);
  EXPECT_EQ(cfg.head.input_dim, 48);
  EXPECT_EQ(cfg.head.num_classes, 6);
}

TEST(RunConfig, LiteNarrowsRoutingDefaults) {
  const auto j = nlohmann::json::parse(R"({"head": {"variant": "Lite"}})");
  const cf::RunConfig cfg = cf::run_config_from_json(j);
  EXPECT_EQ(cfg.head.routing_depth, 1);
  EXPECT_EQ(cfg.head.routing_width, 16);
  // explicit values win
  const auto j2 = nlohmann::json::parse(
      R"({"head": {"variant": "Lite", "routing_branch_width": 24}})");
  EXPECT_EQ(cf::run_config_from_json(j2).head.routing_width, 24);
}

TEST(RunConfig, RejectsUnknownKeys) {
  try {
    cf::run_config_from_json(nlohmann::json::parse(R"({"epochz": 3})"));
    FAIL() << "expected ConfigError";
  } catch (const rdr::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("epochz"), std::string::npos);
  }
  try {
    cf::run_config_from_json(
        nlohmann::json::parse(R"({"head": {"widht": 7}})"));
    FAIL() << "expected ConfigError";
  } catch (const rdr::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("head.widht"), std::string::npos);
  }
}

TEST(RunConfig, RejectsTypeAndValueErrors) {
  EXPECT_THROW(
      cf::run_config_from_json(nlohmann::json::parse(R"({"epochs": "many"})")),
      rdr::ConfigError);
  EXPECT_THROW(
      cf::run_config_from_json(nlohmann::json::parse(R"({"epochs": -2})")),
      rdr::ConfigError);
  EXPECT_THROW(cf::run_config_from_json(
                   nlohmann::json::parse(R"({"schema_version": 2})")),
               rdr::ConfigError);
  EXPECT_THROW(cf::run_config_from_json(
                   nlohmann::json::parse(R"({"loss": {"lambda": 0.99}})")),
               rdr::ConfigError);
  EXPECT_THROW(
      cf::run_config_from_json(nlohmann::json::parse(
          R"({"head": {"input_dim": 16}, "data": {"feature_dim": 64}})")),
      rdr::ConfigError);
}

TEST(RunConfig, LoadReportsMissingAndMalformedFiles) {
  EXPECT_THROW(cf::load_run_config("/nonexistent/rdr.json"), rdr::ConfigError);
  const auto path = temp_file("rdr_bad_config.json");
  {
    std::ofstream out(path);
    out << "{ not json";
  }
  EXPECT_THROW(cf::load_run_config(path.string()), rdr::ConfigError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, SaveLoadRestoreIsBitExact) {
  cf::RunConfig cfg = small_config();
  cfg.head.variant = rdr::heads::Variant::kM;
  rdr::heads::Head head(cfg.head, 42);
  // make values less trivial than init
  head.param("trunk.fc0.b").mutable_values()[0] = -0.75;

  const auto path = temp_file("rdr_ckpt_roundtrip.bin");
  rdr::checkpoint::save(path.string(), cfg, head);
  const auto loaded = rdr::checkpoint::load(path.string());
  EXPECT_EQ(cf::to_json(loaded.config), cf::to_json(cfg));
  EXPECT_EQ(loaded.blocks.size(), head.named_parameters().size());

  rdr::heads::Head back = rdr::checkpoint::restore_head(loaded);
  const auto& a = head.named_parameters();
  const auto& b = back.named_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    ASSERT_EQ(a[i].second.shape(), b[i].second.shape());
    const auto& av = a[i].second.values();
    const auto& bv = b[i].second.values();
    for (std::size_t c = 0; c < av.size(); ++c) {
      EXPECT_EQ(std::bit_cast<std::uint64_t>(av[c]),
                std::bit_cast<std::uint64_t>(bv[c]));
    }
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsForeignAndDamagedFiles) {
  const auto path = temp_file("rdr_ckpt_bad.bin");
  {
    std::ofstream out(path, std::ios::binary);
    out << "definitely not a checkpoint";
  }
  EXPECT_THROW(rdr::checkpoint::load(path.string()), rdr::CheckpointError);

  // valid file, then truncate it
  cf::RunConfig cfg = small_config();
  rdr::heads::Head head(cfg.head, 1);
  rdr::checkpoint::save(path.string(), cfg, head);
  const auto full_size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, full_size / 2);
  EXPECT_THROW(rdr::checkpoint::load(path.string()), rdr::CheckpointError);

  // valid file with trailing garbage
  rdr::checkpoint::save(path.string(), cfg, head);
  {
    std::ofstream out(path, std::ios::binary | std::ios::app);
    out << "x";
  }
  EXPECT_THROW(rdr::checkpoint::load(path.string()), rdr::CheckpointError);

  EXPECT_THROW(rdr::checkpoint::load("/nonexistent/ckpt.bin"),
               rdr::CheckpointError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RestoreRejectsMismatchedHead) {
  cf::RunConfig cfg = small_config();
  rdr::heads::Head head_b(cfg.head, 1);
  const auto path = temp_file("rdr_ckpt_mismatch.bin");
  rdr::checkpoint::save(path.string(), cfg, head_b);
  auto loaded = rdr::checkpoint::load(path.string());

  cf::RunConfig other = cfg;
  other.head.variant = rdr::heads::Variant::kM;
  rdr::heads::Head head_m(other.head, 1);
  EXPECT_THROW(rdr::checkpoint::restore(head_m, loaded.blocks),
               rdr::CheckpointError);

  loaded.blocks[0].shape = {1, 1};
  loaded.blocks[0].values = {0.0};
  rdr::heads::Head head_b2(cfg.head, 2);
  EXPECT_THROW(rdr::checkpoint::restore(head_b2, loaded.blocks),
               rdr::CheckpointError);
  std::filesystem::remove(path);
}

TEST(MakeBatch, BuildsFeaturesAndTargets) {
  tg::DatasetConfig dc;
  dc.n_train = 40;
  dc.n_val = 10;
  dc.feature_dim = 16;
  dc.distractor_dims = 4;
  const tg::Dataset data = tg::generate_dataset(dc);
  const tr::Batch b = tr::make_batch(data.train, {0, 3, 7});
  EXPECT_EQ(b.features.shape(), (ad::Shape{3, 16}));
  EXPECT_EQ(b.targets.size(), 3u);
  EXPECT_DOUBLE_EQ(b.features.at(1, 2), data.train[3].feature[2]);
  EXPECT_THROW(tr::make_batch(data.train, {}), rdr::Error);
}

TEST(Trainer, EpochIsDeterministic) {
  const cf::RunConfig cfg = small_config();
  const tg::Dataset data = tg::generate_dataset(cfg.data);

  auto run_once = [&]() {
    rdr::heads::Head head(cfg.head, cfg.seed);
    tr::Trainer trainer(cfg, head, data);
    const tr::EpochRow row = trainer.run_epoch(1);
    return std::make_pair(row, head.param("node_l.cls.w").values());
  };
  const auto [row_a, w_a] = run_once();
  const auto [row_b, w_b] = run_once();
  EXPECT_EQ(row_a.total, row_b.total);
  EXPECT_EQ(row_a.selective_cls, row_b.selective_cls);
  EXPECT_EQ(row_a.val_accuracy, row_b.val_accuracy);
  ASSERT_EQ(w_a.size(), w_b.size());
  for (std::size_t i = 0; i < w_a.size(); ++i) EXPECT_EQ(w_a[i], w_b[i]);
}

TEST(Trainer, TreeHeadLearnsTheSmallTask) {
  const cf::RunConfig cfg = small_config();
  const tg::Dataset data = tg::generate_dataset(cfg.data);
  rdr::heads::Head head(cfg.head, cfg.seed);
  const tr::TrainResult r = tr::train_run(cfg, head, data);
  ASSERT_EQ(r.rows.size(), cfg.epochs);
  EXPECT_LT(r.rows.back().total, 0.5 * r.rows.front().total);
  EXPECT_GT(r.final_metrics.accuracy, 0.6);
  EXPECT_GT(r.final_metrics.mean_iou_fg, 0.5);
  for (const auto& row : r.rows) {
    EXPECT_TRUE(std::isfinite(row.total));
    EXPECT_GE(row.selective_cls, 0.0);
    EXPECT_GE(row.selective_bbox, 0.0);
    EXPECT_GE(row.associative_cls, 0.0);
    EXPECT_GE(row.associative_bbox, 0.0);
  }
}

TEST(Trainer, SingleHeadTrainsWithoutSelectiveTerms) {
  cf::RunConfig cfg = small_config();
  cfg.head.variant = rdr::heads::Variant::kSingle;
  const tg::Dataset data = tg::generate_dataset(cfg.data);
  rdr::heads::Head head(cfg.head, cfg.seed);
  const tr::TrainResult r = tr::train_run(cfg, head, data);
  EXPECT_LT(r.rows.back().total, r.rows.front().total);
  for (const auto& row : r.rows) {
    EXPECT_DOUBLE_EQ(row.selective_cls, 0.0);
    EXPECT_DOUBLE_EQ(row.selective_bbox, 0.0);
  }
  EXPECT_GT(r.final_metrics.accuracy, 0.6);
}

TEST(Trainer, RoutingGradientsComeOnlyFromAssociativeTerms) {
  for (const double lambda : {0.1, 0.9}) {
    cf::RunConfig cfg = small_config();
    cfg.loss.lambda = lambda;
    const tg::Dataset data = tg::generate_dataset(cfg.data);
    rdr::heads::Head head(cfg.head, cfg.seed);
    std::vector<std::size_t> idx(32);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const tr::Batch batch = tr::make_batch(data.train, idx);
    const double gap =
        tr::routing_isolation_gap(head, batch, cfg.loss, rdr::Rng(99).fork(1));
    EXPECT_LE(gap, 1e-10) << "lambda " << lambda;
  }
}

TEST(Trainer, DebugAssertsPassOnHealthyRun) {
  cf::RunConfig cfg = small_config();
  cfg.epochs = 2;
  const tg::Dataset data = tg::generate_dataset(cfg.data);
  rdr::heads::Head head(cfg.head, cfg.seed);
  EXPECT_NO_THROW(tr::train_run(cfg, head, data, nullptr, /*debug_asserts=*/true));
}

TEST(Trainer, NonFiniteLossRaisesNumericsError) {
  cf::RunConfig cfg = small_config();
  const tg::Dataset base = tg::generate_dataset(cfg.data);
  tg::Dataset data = base;
  // absurd regression targets overflow the box loss to +inf
  for (auto& s : data.train) {
    if (s.label > 0) {
      s.target_deltas = {1e308, 1e308, 1e308, 1e308};
      break;
    }
  }

  rdr::heads::Head head(cfg.head, cfg.seed);
  tr::Trainer trainer(cfg, head, data);
  std::vector<std::size_t> all(data.train.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  // poisoned sample is somewhere in the first shuffled epoch
  try {
    for (std::size_t e = 1; e <= 3; ++e) trainer.run_epoch(e);
    FAIL() << "expected NumericsError";
  } catch (const rdr::NumericsError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
  }
}

TEST(Trainer, AuditTrailMatchesSampledWeights) {
  cf::RunConfig cfg = small_config();
  cfg.epochs = 1;
  cfg.data.n_train = 96;
  cfg.data.n_val = 40;
  const tg::Dataset data = tg::generate_dataset(cfg.data);
  rdr::heads::Head head(cfg.head, cfg.seed);

  std::ostringstream audit;
  tr::Trainer trainer(cfg, head, data);
  trainer.enable_audit(audit);
  trainer.run_epoch(1);

  std::istringstream in(audit.str());
  std::string line;
  ASSERT_TRUE(std::getline(in, line));
  EXPECT_EQ(line, "step,sample,task,selected,gamma_l,gamma_r");
  std::size_t rows = 0, cls_rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    ASSERT_EQ(cells.size(), 6u);
    EXPECT_TRUE(cells[2] == "cls" || cells[2] == "bbox");
    if (cells[2] == "cls") ++cls_rows;
    const double gl = std::stod(cells[4]);
    const double gr = std::stod(cells[5]);
    EXPECT_EQ(cells[3], gl > gr ? "left" : "right");
    const double hi = std::max(gl, gr), lo = std::min(gl, gr);
    EXPECT_GE(hi, 0.9);
    EXPECT_LE(hi, 1.1);
    EXPECT_GE(lo, 0.1);
    EXPECT_LE(lo, 0.3);
  }
  // one cls row and one bbox row per sample per step
  EXPECT_EQ(rows, 2 * cfg.data.n_train);
  EXPECT_EQ(cls_rows, rows / 2);
}

TEST(MetricsCsv, RowsSurviveTextRoundTrip) {
  std::vector<tr::EpochRow> rows(2);
  rows[0] = {1, 1.5, 0.25, 2.0 / 3.0, 0.1, 2.2, 0.5, 0.4, 0.3};
  rows[1] = {2, 0.7, 0.12, 1.0 / 7.0, 0.05, 1.1, 0.8, 0.7, 0.6};
  const auto path = temp_file("rdr_metrics_test.csv");
  tr::write_metrics_csv(path.string(), rows);

  std::ifstream in(path);
  std::string line;
  ASSERT_TRUE(std::getline(in, line));
  EXPECT_EQ(line,
            "epoch,selective_cls,selective_bbox,associative_cls,"
            "associative_bbox,total,val_accuracy,val_mean_iou,val_ap50");
  for (const auto& r : rows) {
    ASSERT_TRUE(std::getline(in, line));
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    ASSERT_EQ(cells.size(), 9u);
    EXPECT_EQ(std::stoull(cells[0]), r.epoch);
    EXPECT_EQ(std::stod(cells[3]), r.associative_cls);  // exact, 17 digits
    EXPECT_EQ(std::stod(cells[5]), r.total);
  }
  std::filesystem::remove(path);
}

TEST(SummaryJson, CarriesConfigAndFinalMetricsOnly) {
  const cf::RunConfig cfg = small_config();
  tr::TrainResult result;
  result.rows.resize(2);
  result.rows[0].total = 4.0;
  result.rows[1].total = 1.0;
  result.final_metrics = {0.9, 0.8, 0.95};
  result.wall_seconds = 12.5;
  const nlohmann::json j = tr::summary_json(cfg, result);
  EXPECT_EQ(j["first_epoch_total"], 4.0);
  EXPECT_EQ(j["final_epoch_total"], 1.0);
  EXPECT_EQ(j["final"]["val_accuracy"], 0.9);
  EXPECT_EQ(j["config"]["seed"], cfg.seed);
  // timing depends on the host; it must never land in artifacts
  EXPECT_EQ(j.dump().find("wall"), std::string::npos);
  EXPECT_EQ(j.dump().find("seconds"), std::string::npos);
}

TEST(SweepLambda, CoversGridDeterministically) {
  cf::RunConfig cfg = small_config();
  cfg.epochs = 2;
  cfg.data.n_train = 160;
  cfg.data.n_val = 64;
  const std::vector<double> lambdas = {0.1, 0.9};

  const auto rows = tr::sweep_lambda(cfg, lambdas, 2, 2);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_DOUBLE_EQ(rows[0].lambda, 0.1);
  EXPECT_DOUBLE_EQ(rows[1].lambda, 0.1);
  EXPECT_DOUBLE_EQ(rows[2].lambda, 0.9);
  EXPECT_DOUBLE_EQ(rows[3].lambda, 0.9);
  EXPECT_EQ(rows[0].seed, cfg.seed);
  EXPECT_EQ(rows[1].seed, cfg.seed + 1);
  for (const auto& r : rows) EXPECT_TRUE(r.finite);

  // same grid again, same numbers
  const auto rows2 = tr::sweep_lambda(cfg, lambdas, 2, 1);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].total, rows2[i].total);
    EXPECT_EQ(rows[i].val_accuracy, rows2[i].val_accuracy);
  }

  EXPECT_THROW(tr::sweep_lambda(cfg, {0.97}, 1, 1), rdr::ConfigError);
  EXPECT_THROW(tr::sweep_lambda(cfg, {}, 1, 1), rdr::ConfigError);
}

TEST(Checkpoint, TrainedHeadRestoresToIdenticalPredictions) {
  cf::RunConfig cfg = small_config();
  cfg.epochs = 2;
  const tg::Dataset data = tg::generate_dataset(cfg.data);
  rdr::heads::Head head(cfg.head, cfg.seed);
  tr::train_run(cfg, head, data);

  const auto path = temp_file("rdr_ckpt_trained.bin");
  rdr::checkpoint::save(path.string(), cfg, head);
  rdr::heads::Head restored =
      rdr::checkpoint::restore_head(rdr::checkpoint::load(path.string()));

  std::vector<std::size_t> idx(16);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const tr::Batch batch = tr::make_batch(data.val, idx);
  const auto [p1, d1] = head.infer(batch.features);
  const auto [p2, d2] = restored.infer(batch.features);
  for (std::size_t i = 0; i < p1.numel(); ++i) EXPECT_EQ(p1.value(i), p2.value(i));
  for (std::size_t i = 0; i < d1.numel(); ++i) EXPECT_EQ(d1.value(i), d2.value(i));
  std::filesystem::remove(path);
}

#pragma once

// Training loop: minibatch SGD over the synthetic region task with the
// selective/associative loss blend. Everything downstream of the run seed is
// deterministic; each stochastic concern (shuffling, node selection, weight
// sampling) draws from its own forked stream, so enabling one consumer never
// shifts another.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <mutex>
#include <numeric>
#include <ostream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rdr/checkpoint.hpp"
#include "rdr/config.hpp"
#include "rdr/errors.hpp"
#include "rdr/heads.hpp"
#include "rdr/losses.hpp"
#include "rdr/optim.hpp"
#include "rdr/rng.hpp"
#include "rdr/routing.hpp"
#include "rdr/taskgen.hpp"
#include "rdr/tensor.hpp"

namespace rdr::train {

// Stream ids hung off the run seed. Frozen: changing them changes every
// training trajectory.
inline constexpr std::uint64_t kRoutingStream = 10;
inline constexpr std::uint64_t kShuffleStream = 11;

struct Batch {
  ad::Tensor features;  // [n, D] constant
  losses::BatchTargets targets;
};

inline Batch make_batch(const std::vector<taskgen::RegionSample>& data,
                        const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw Error("make_batch: empty index list");
  const std::size_t dim = data.at(indices[0]).feature.size();
  std::vector<double> fv;
  fv.reserve(indices.size() * dim);
  for (std::size_t idx : indices) {
    const auto& f = data.at(idx).feature;
    if (f.size() != dim) {
      throw ShapeError("make_batch: inconsistent feature length at sample " +
                       std::to_string(idx));
    }
    fv.insert(fv.end(), f.begin(), f.end());
  }
  Batch b;
  b.features = ad::Tensor({indices.size(), dim}, std::move(fv));
  b.targets = losses::make_batch_targets(data, indices);
  return b;
}

struct StepStats {
  double selective_cls = 0.0;
  double selective_bbox = 0.0;
  double associative_cls = 0.0;
  double associative_bbox = 0.0;
  double total = 0.0;
  std::size_t batch_size = 0;
};

struct EpochRow {
  std::size_t epoch = 0;
  double selective_cls = 0.0;
  double selective_bbox = 0.0;
  double associative_cls = 0.0;
  double associative_bbox = 0.0;
  double total = 0.0;
  double val_accuracy = 0.0;
  double val_mean_iou = 0.0;
  double val_ap50 = 0.0;
};

// Batched inference over a sample list, decoded into per-sample predictions
// and scored with the detection metrics.
inline taskgen::Metrics evaluate_head(const heads::Head& head,
                                      const std::vector<taskgen::RegionSample>& samples) {
  if (samples.empty()) throw Error("evaluate_head: no samples");
  std::vector<taskgen::Prediction> preds;
  preds.reserve(samples.size());
  const std::size_t chunk = 256;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const std::size_t end = std::min(samples.size(), start + chunk);
    const std::size_t dim = samples[start].feature.size();
    std::vector<double> fv;
    fv.reserve((end - start) * dim);
    for (std::size_t i = start; i < end; ++i) {
      fv.insert(fv.end(), samples[i].feature.begin(), samples[i].feature.end());
    }
    const auto [probs, deltas] =
        head.infer(ad::Tensor({end - start, dim}, std::move(fv)));
    const std::size_t k = probs.extent(1);
    for (std::size_t r = 0; r < end - start; ++r) {
      taskgen::Prediction p;
      p.class_probs.resize(k);
      for (std::size_t j = 0; j < k; ++j) p.class_probs[j] = probs.at(r, j);
      for (std::size_t j = 0; j < 4; ++j) p.deltas[j] = deltas.at(r, j);
      preds.push_back(std::move(p));
    }
  }
  return taskgen::evaluate(preds, samples);
}

// Largest deviation between the routing-branch gradients of the full blended
// loss and (1 - lambda) times the gradients of the associative terms alone.
// The selective terms weight per-node losses with constants, so by
// construction they contribute nothing to the routing branch; this measures
// how well the tape honors that.
inline double routing_isolation_gap(heads::Head& head, const Batch& batch,
                                    const losses::LossConfig& lcfg,
                                    const Rng& weight_base) {
  const auto& bt = batch.targets;
  std::vector<std::string> routing_names;
  for (const auto& [name, t] : head.named_parameters()) {
    if (name.rfind("routing.", 0) == 0) routing_names.push_back(name);
  }

  std::vector<std::vector<double>> g_total;
  {
    routing::Streams streams(weight_base);
    ad::Tape tape;
    ad::Tape::Scope scope(tape);
    const auto out = head.forward_tree(batch.features);
    const auto nl = losses::node_losses(out, bt, lcfg);
    const auto w = routing::route_step(nl.cls_l.values(), nl.cls_r.values(),
                                       out.q_l.values(), out.q_r.values(), streams);
    const auto bundle = losses::make_loss_bundle(out, bt, nl, w, lcfg);
    tape.backward(bundle.total);
    for (const auto& name : routing_names) g_total.push_back(head.param(name).grad());
  }

  std::vector<std::vector<double>> g_assoc;
  {
    ad::Tape tape;
    ad::Tape::Scope scope(tape);
    const auto out = head.forward_tree(batch.features);
    const ad::Tensor ac = losses::associative_cls(out.c_l, out.c_r, out.p_l,
                                                  out.p_r, bt.labels, lcfg);
    const ad::Tensor b_l_fg = ad::matmul(bt.fg_selector, out.b_l);
    const ad::Tensor b_r_fg = ad::matmul(bt.fg_selector, out.b_r);
    const ad::Tensor q_l_fg = ad::matmul(bt.fg_selector, out.q_l);
    const ad::Tensor q_r_fg = ad::matmul(bt.fg_selector, out.q_r);
    const ad::Tensor ab =
        losses::associative_bbox(b_l_fg, b_r_fg, q_l_fg, q_r_fg,
                                 bt.fg_target_deltas, bt.fg_proposals, lcfg);
    tape.backward(ad::add(ac, ab));
    for (const auto& name : routing_names) g_assoc.push_back(head.param(name).grad());
  }

  double gap = 0.0;
  const double scale = 1.0 - lcfg.lambda;
  for (std::size_t p = 0; p < g_total.size(); ++p) {
    for (std::size_t i = 0; i < g_total[p].size(); ++i) {
      gap = std::max(gap, std::abs(g_total[p][i] - scale * g_assoc[p][i]));
    }
  }
  return gap;
}

class Trainer {
 public:
  Trainer(const config::RunConfig& cfg, heads::Head& head,
          const taskgen::Dataset& data)
      : cfg_(cfg),
        head_(&head),
        data_(&data),
        opt_(cfg.optimizer.lr, cfg.optimizer.momentum, cfg.optimizer.weight_decay),
        shuffle_rng_(Rng(cfg.seed).fork(kShuffleStream)),
        streams_(Rng(cfg.seed).fork(kRoutingStream)) {
    cfg_.validate();
    if (data.train.empty() || data.val.empty()) {
      throw Error("trainer: dataset has an empty split");
    }
  }

  void enable_audit(std::ostream& out) {
    audit_ = &out;
    *audit_ << "step,sample,task,selected,gamma_l,gamma_r\n";
  }

  void set_debug_asserts(bool on) { debug_asserts_ = on; }

  StepStats step(const std::vector<std::size_t>& indices, std::size_t epoch) {
    const Batch batch = make_batch(data_->train, indices);
    if (debug_asserts_ && cfg_.head.is_tree() && step_in_epoch_ == 0) {
      const double gap =
          routing_isolation_gap(*head_, batch, cfg_.loss, Rng(cfg_.seed).fork(999));
      if (gap > 1e-10) {
        throw NumericsError("debug: routing gradient isolation gap " +
                            std::to_string(gap) + " at epoch " +
                            std::to_string(epoch));
      }
    }

    StepStats stats;
    stats.batch_size = indices.size();
    ad::Tape tape;
    ad::Tape::Scope scope(tape);

    ad::Tensor total;
    if (cfg_.head.is_tree()) {
      const auto out = head_->forward_tree(batch.features);
      if (debug_asserts_) check_tree_invariants(out);
      const auto nl = losses::node_losses(out, batch.targets, cfg_.loss);
      const auto w =
          routing::route_step(nl.cls_l.values(), nl.cls_r.values(),
                              out.q_l.values(), out.q_r.values(), streams_);
      const auto bundle = losses::make_loss_bundle(out, batch.targets, nl, w, cfg_.loss);
      if (audit_ != nullptr) write_audit_rows(w, batch.targets);
      stats.selective_cls = bundle.selective_cls.scalar_value();
      stats.selective_bbox = bundle.selective_bbox.scalar_value();
      stats.associative_cls = bundle.associative_cls.scalar_value();
      stats.associative_bbox = bundle.associative_bbox.scalar_value();
      total = bundle.total;
    } else {
      const auto [logits, deltas] = head_->forward_single(batch.features);
      const ad::Tensor cls =
          ad::mean(losses::classification_loss(logits, batch.targets.labels, cfg_.loss));
      const ad::Tensor deltas_fg = ad::matmul(batch.targets.fg_selector, deltas);
      const ad::Tensor bbox = ad::mean(
          losses::box_loss(deltas_fg, batch.targets.fg_target_deltas,
                           batch.targets.fg_proposals, cfg_.loss));
      stats.associative_cls = cls.scalar_value();
      stats.associative_bbox = bbox.scalar_value();
      total = ad::add(cls, bbox);
    }

    stats.total = total.scalar_value();
    if (!std::isfinite(stats.total)) {
      throw NumericsError("training diverged: non-finite total loss at epoch " +
                          std::to_string(epoch) + ", step " +
                          std::to_string(step_in_epoch_ + 1));
    }
    const std::uint64_t pass = tape.backward(total);
    opt_.step(head_->parameters(), pass);
    ++global_step_;
    ++step_in_epoch_;
    return stats;
  }

  EpochRow run_epoch(std::size_t epoch) {
    step_in_epoch_ = 0;
    std::vector<std::size_t> order(data_->train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_rng_.shuffle(order);

    EpochRow row;
    row.epoch = epoch;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
      const std::vector<std::size_t> indices(order.begin() + start,
                                             order.begin() + end);
      const StepStats s = step(indices, epoch);
      const double n = static_cast<double>(s.batch_size);
      row.selective_cls += s.selective_cls * n;
      row.selective_bbox += s.selective_bbox * n;
      row.associative_cls += s.associative_cls * n;
      row.associative_bbox += s.associative_bbox * n;
      row.total += s.total * n;
      seen += s.batch_size;
    }
    const double inv = 1.0 / static_cast<double>(seen);
    row.selective_cls *= inv;
    row.selective_bbox *= inv;
    row.associative_cls *= inv;
    row.associative_bbox *= inv;
    row.total *= inv;

    const taskgen::Metrics m = evaluate_val();
    row.val_accuracy = m.accuracy;
    row.val_mean_iou = m.mean_iou_fg;
    row.val_ap50 = m.ap50;
    return row;
  }

  taskgen::Metrics evaluate_val() const { return evaluate_head(*head_, data_->val); }

 private:
  void write_audit_rows(const routing::SelectiveWeights& w,
                        const losses::BatchTargets& bt) {
    for (std::size_t i = 0; i < bt.size(); ++i) {
      *audit_ << global_step_ << "," << i << ",cls,"
              << (w.cls_left[i] > w.cls_right[i] ? "left" : "right") << ","
              << taskgen::detail::fmt17(w.cls_left[i]) << ","
              << taskgen::detail::fmt17(w.cls_right[i]) << "\n";
    }
    for (std::size_t i = 0; i < bt.size(); ++i) {
      *audit_ << global_step_ << "," << i << ",bbox,"
              << (w.bbox_left[i] > w.bbox_right[i] ? "left" : "right") << ","
              << taskgen::detail::fmt17(w.bbox_left[i]) << ","
              << taskgen::detail::fmt17(w.bbox_right[i]) << "\n";
    }
  }

  void check_tree_invariants(const heads::TreeHeadOutput& out) const {
    const std::size_t n = out.p_l.numel();
    const std::size_t k = out.c.extent(1);
    for (std::size_t i = 0; i < n; ++i) {
      if (std::abs(out.p_l.value(i) + out.p_r.value(i) - 1.0) > 1e-9 ||
          std::abs(out.q_l.value(i) + out.q_r.value(i) - 1.0) > 1e-9) {
        throw NumericsError("debug: routing probabilities off simplex at row " +
                            std::to_string(i));
      }
      for (std::size_t j = 0; j < k; ++j) {
        const double want = out.p_l.value(i) * out.c_l.at(i, j) +
                            out.p_r.value(i) * out.c_r.at(i, j);
        if (std::abs(out.c.at(i, j) - want) > 1e-12) {
          throw NumericsError("debug: fused classification output drifts at row " +
                              std::to_string(i));
        }
      }
      for (std::size_t j = 0; j < 4; ++j) {
        const double want = out.q_l.value(i) * out.b_l.at(i, j) +
                            out.q_r.value(i) * out.b_r.at(i, j);
        if (std::abs(out.b.at(i, j) - want) > 1e-12) {
          throw NumericsError("debug: fused box output drifts at row " +
                              std::to_string(i));
        }
      }
    }
  }

  config::RunConfig cfg_;
  heads::Head* head_;
  const taskgen::Dataset* data_;
  ad::Sgd opt_;
  Rng shuffle_rng_;
  routing::Streams streams_;
  std::ostream* audit_ = nullptr;
  bool debug_asserts_ = false;
  std::size_t global_step_ = 0;
  std::size_t step_in_epoch_ = 0;
};

struct TrainResult {
  std::vector<EpochRow> rows;
  taskgen::Metrics final_metrics;
  double wall_seconds = 0.0;  // reporting only; never written to artifacts
};

inline TrainResult train_run(const config::RunConfig& cfg, heads::Head& head,
                             const taskgen::Dataset& data,
                             std::ostream* audit = nullptr,
                             bool debug_asserts = false) {
  const auto t0 = std::chrono::steady_clock::now();
  Trainer trainer(cfg, head, data);
  if (audit != nullptr) trainer.enable_audit(*audit);
  trainer.set_debug_asserts(debug_asserts);

  TrainResult result;
  result.rows.reserve(cfg.epochs);
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    result.rows.push_back(trainer.run_epoch(e));
  }
  const EpochRow& last = result.rows.back();
  result.final_metrics.accuracy = last.val_accuracy;
  result.final_metrics.mean_iou_fg = last.val_mean_iou;
  result.final_metrics.ap50 = last.val_ap50;
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

inline void write_metrics_csv(const std::string& path,
                              const std::vector<EpochRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << "epoch,selective_cls,selective_bbox,associative_cls,associative_bbox,"
         "total,val_accuracy,val_mean_iou,val_ap50\n";
  namespace td = taskgen::detail;
  for (const auto& r : rows) {
    out << r.epoch << "," << td::fmt17(r.selective_cls) << ","
        << td::fmt17(r.selective_bbox) << "," << td::fmt17(r.associative_cls)
        << "," << td::fmt17(r.associative_bbox) << "," << td::fmt17(r.total)
        << "," << td::fmt17(r.val_accuracy) << "," << td::fmt17(r.val_mean_iou)
        << "," << td::fmt17(r.val_ap50) << "\n";
  }
  if (!out) throw Error("write to '" + path + "' failed");
}

inline nlohmann::json summary_json(const config::RunConfig& cfg,
                                   const TrainResult& result) {
  nlohmann::json j;
  j["schema_version"] = config::kSchemaVersion;
  j["config"] = config::to_json(cfg);
  j["epochs_run"] = result.rows.size();
  j["first_epoch_total"] = result.rows.front().total;
  j["final_epoch_total"] = result.rows.back().total;
  j["final"] = {{"val_accuracy", result.final_metrics.accuracy},
                {"val_mean_iou", result.final_metrics.mean_iou_fg},
                {"val_ap50", result.final_metrics.ap50}};
  return j;
}

struct SweepRow {
  double lambda = 0.0;
  std::uint64_t seed = 0;
  double selective_cls = 0.0;
  double selective_bbox = 0.0;
  double associative_cls = 0.0;
  double associative_bbox = 0.0;
  double total = 0.0;
  double val_accuracy = 0.0;
  double val_mean_iou = 0.0;
  double val_ap50 = 0.0;
  bool finite = false;
};

// Trains every (lambda, seed) pair and reports the final epoch of each run.
// Seed index i shifts both the run seed and the data seed, so different
// seeds mean genuinely different data and initializations. Runs execute on
// a small thread pool; results land by task index, so the output order is
// independent of scheduling.
inline std::vector<SweepRow> sweep_lambda(const config::RunConfig& base,
                                          const std::vector<double>& lambdas,
                                          std::size_t num_seeds,
                                          std::size_t jobs) {
  if (lambdas.empty()) throw ConfigError("sweep: no lambda values given");
  if (num_seeds == 0) throw ConfigError("sweep: num_seeds must be >= 1");
  for (double l : lambdas) {
    if (!(l >= 0.0 && l <= 0.95)) {
      throw ConfigError("sweep: lambda " + std::to_string(l) +
                        " outside [0, 0.95]");
    }
  }

  std::vector<taskgen::Dataset> datasets;
  datasets.reserve(num_seeds);
  for (std::size_t si = 0; si < num_seeds; ++si) {
    taskgen::DatasetConfig dc = base.data;
    dc.seed = base.data.seed + si;
    datasets.push_back(taskgen::generate_dataset(dc));
  }

  struct Task {
    double lambda;
    std::size_t seed_index;
  };
  std::vector<Task> tasks;
  for (double l : lambdas) {
    for (std::size_t si = 0; si < num_seeds; ++si) tasks.push_back({l, si});
  }

  std::vector<SweepRow> rows(tasks.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex error_mu;

  auto worker = [&]() {
    while (!failed.load()) {
      const std::size_t ti = next.fetch_add(1);
      if (ti >= tasks.size()) return;
      try {
        const Task& task = tasks[ti];
        config::RunConfig cfg = base;
        cfg.loss.lambda = task.lambda;
        cfg.seed = base.seed + task.seed_index;
        cfg.data.seed = base.data.seed + task.seed_index;
        heads::Head head(cfg.head, cfg.seed);
        const TrainResult r = train_run(cfg, head, datasets[task.seed_index]);
        const EpochRow& last = r.rows.back();
        SweepRow& out = rows[ti];
        out.lambda = task.lambda;
        out.seed = cfg.seed;
        out.selective_cls = last.selective_cls;
        out.selective_bbox = last.selective_bbox;
        out.associative_cls = last.associative_cls;
        out.associative_bbox = last.associative_bbox;
        out.total = last.total;
        out.val_accuracy = last.val_accuracy;
        out.val_mean_iou = last.val_mean_iou;
        out.val_ap50 = last.val_ap50;
        out.finite = std::isfinite(last.total) && std::isfinite(last.selective_cls) &&
                     std::isfinite(last.selective_bbox) &&
                     std::isfinite(last.associative_cls) &&
                     std::isfinite(last.associative_bbox) &&
                     std::isfinite(last.val_accuracy) &&
                     std::isfinite(last.val_mean_iou) &&
                     std::isfinite(last.val_ap50);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
        failed.store(true);
        return;
      }
    }
  };

  const std::size_t n_threads = std::max<std::size_t>(1, std::min(jobs, tasks.size()));
  std::vector<std::thread> pool;
  pool.reserve(n_threads);
  for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
  return rows;
}

inline void write_sweep_csv(const std::string& path,
                            const std::vector<SweepRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << "lambda,seed,selective_cls,selective_bbox,associative_cls,"
         "associative_bbox,total,val_accuracy,val_mean_iou,val_ap50\n";
  namespace td = taskgen::detail;
  for (const auto& r : rows) {
    out << td::fmt17(r.lambda) << "," << r.seed << ","
        << td::fmt17(r.selective_cls) << "," << td::fmt17(r.selective_bbox)
        << "," << td::fmt17(r.associative_cls) << ","
        << td::fmt17(r.associative_bbox) << "," << td::fmt17(r.total) << ","
        << td::fmt17(r.val_accuracy) << "," << td::fmt17(r.val_mean_iou) << ","
        << td::fmt17(r.val_ap50) << "\n";
  }
  if (!out) throw Error("write to '" + path + "' failed");
}

}  // namespace rdr::train

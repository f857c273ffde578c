#pragma once

// Synthetic region-classification-and-regression task. Scenes on a 100x100
// canvas hold one to three objects with class-conditioned sizes and aspect
// ratios. Each object yields exactly one proposal, foreground (jittered
// copy of the ground-truth box, IoU >= 0.5) with probability fg_fraction,
// otherwise background (placed so it overlaps no object at IoU >= 0.5).
// Feature vectors are a fixed seeded Gaussian linear map applied to
// [onehot(y) + noise | target deltas (zero for background) | distractors].

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rdr/errors.hpp"
#include "rdr/rng.hpp"

namespace rdr::taskgen {

struct Box {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x2 > x1 && y2 > y1; }

  static Box from_center(double cx, double cy, double w, double h) {
    return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  }

  bool operator==(const Box& o) const = default;
};

inline double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) {
    throw Error("iou: degenerate box with non-positive extent");
  }
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  if (iw <= 0.0) return 0.0;
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

// (dx, dy, dw, dh) parameterization of gt relative to a proposal:
// dx = (gcx - pcx) / pw, dw = log(gw / pw), and the y/h analogues.
inline std::array<double, 4> encode_deltas(const Box& gt, const Box& proposal) {
  if (!proposal.valid()) {
    throw Error("encode_deltas: proposal has non-positive extent");
  }
  if (!gt.valid()) throw Error("encode_deltas: gt box has non-positive extent");
  return {(gt.cx() - proposal.cx()) / proposal.width(),
          (gt.cy() - proposal.cy()) / proposal.height(),
          std::log(gt.width() / proposal.width()),
          std::log(gt.height() / proposal.height())};
}

inline Box decode_deltas(const std::array<double, 4>& d, const Box& proposal) {
  if (!proposal.valid()) {
    throw Error("decode_deltas: proposal has non-positive extent");
  }
  for (double v : d) {
    if (!std::isfinite(v)) throw Error("decode_deltas: non-finite delta");
  }
  const double cx = proposal.cx() + d[0] * proposal.width();
  const double cy = proposal.cy() + d[1] * proposal.height();
  const double w = proposal.width() * std::exp(d[2]);
  const double h = proposal.height() * std::exp(d[3]);
  return Box::from_center(cx, cy, w, h);
}

struct RegionSample {
  std::vector<double> feature;
  int label = 0;  // 0 is background
  Box proposal;
  std::optional<Box> gt;
  std::optional<std::array<double, 4>> target_deltas;
};

struct DatasetConfig {
  int num_classes = 4;  // including background
  int feature_dim = 64;
  int n_train = 8000;
  int n_val = 2000;
  double fg_fraction = 0.5;
  double feature_noise = 0.3;
  int distractor_dims = 16;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_classes < 2) throw ConfigError("data.num_classes: must be >= 2");
    if (feature_dim < 1) throw ConfigError("data.feature_dim: must be >= 1");
    if (n_train < 1) throw ConfigError("data.n_train: must be >= 1");
    if (n_val < 1) throw ConfigError("data.n_val: must be >= 1");
    if (!(fg_fraction > 0.0 && fg_fraction < 1.0)) {
      throw ConfigError("data.fg_fraction: must be in (0, 1)");
    }
    if (!(feature_noise >= 0.0)) {
      throw ConfigError("data.feature_noise: must be >= 0");
    }
    if (distractor_dims < 0) {
      throw ConfigError("data.distractor_dims: must be >= 0");
    }
  }

  int raw_dim() const { return num_classes + 4 + distractor_dims; }
};

struct Dataset {
  std::vector<RegionSample> train;
  std::vector<RegionSample> val;
};

namespace detail {

inline constexpr double kCanvas = 100.0;
inline constexpr double kFgIouFloor = 0.5;

inline Box sample_object(int cls, Rng& rng) {
  const double base = 8.0 + 6.0 * (1 + (cls - 1) % 5);
  const double aspect = 0.6 + 0.3 * (1 + (cls - 1) % 4);
  const double w = base * std::sqrt(aspect) * rng.uniform(0.85, 1.15);
  const double h = base / std::sqrt(aspect) * rng.uniform(0.85, 1.15);
  const double cx = rng.uniform(0.5 * w + 1.0, kCanvas - 0.5 * w - 1.0);
  const double cy = rng.uniform(0.5 * h + 1.0, kCanvas - 0.5 * h - 1.0);
  return Box::from_center(cx, cy, w, h);
}

inline Box jitter_proposal(const Box& gt, Rng& rng) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    const double s = attempt < 40 ? 0.12 : 0.02;
    const Box prop = Box::from_center(gt.cx() + rng.normal() * s * gt.width(),
                                      gt.cy() + rng.normal() * s * gt.height(),
                                      gt.width() * std::exp(rng.normal() * s),
                                      gt.height() * std::exp(rng.normal() * s));
    if (iou(prop, gt) >= kFgIouFloor) return prop;
  }
  // A 1% shift keeps IoU well above the floor.
  return Box{gt.x1 + 0.01 * gt.width(), gt.y1 + 0.01 * gt.height(),
             gt.x2 + 0.01 * gt.width(), gt.y2 + 0.01 * gt.height()};
}

inline Box background_proposal(const std::vector<Box>& objects, Rng& rng) {
  for (int attempt = 0; attempt < 200; ++attempt) {
    const double w = rng.uniform(5.0, 30.0);
    const double h = rng.uniform(5.0, 30.0);
    const double cx = rng.uniform(0.5 * w, kCanvas - 0.5 * w);
    const double cy = rng.uniform(0.5 * h, kCanvas - 0.5 * h);
    const Box prop = Box::from_center(cx, cy, w, h);
    bool clear = true;
    for (const Box& gt : objects) {
      if (iou(prop, gt) >= kFgIouFloor) {
        clear = false;
        break;
      }
    }
    if (clear) return prop;
  }
  // A 2x2 corner box cannot reach IoU 0.5 against any object (objects are
  // far larger than 8 square units by construction).
  return Box{0.5, 0.5, 2.5, 2.5};
}

inline std::vector<double> make_feature(const DatasetConfig& cfg, int label,
                                        const std::array<double, 4>& deltas,
                                        const std::vector<double>& fmap,
                                        Rng& rng) {
  const int raw_dim = cfg.raw_dim();
  std::vector<double> raw(static_cast<std::size_t>(raw_dim));
  for (int j = 0; j < cfg.num_classes; ++j) {
    raw[j] = (j == label ? 1.0 : 0.0) + cfg.feature_noise * rng.normal();
  }
  for (int j = 0; j < 4; ++j) raw[cfg.num_classes + j] = deltas[j];
  for (int j = 0; j < cfg.distractor_dims; ++j) {
    raw[cfg.num_classes + 4 + j] = rng.normal();
  }
  std::vector<double> feature(static_cast<std::size_t>(cfg.feature_dim), 0.0);
  for (int d = 0; d < cfg.feature_dim; ++d) {
    const double* row = fmap.data() + static_cast<std::size_t>(d) * raw_dim;
    double s = 0.0;
    for (int r = 0; r < raw_dim; ++r) s += row[r] * raw[r];
    feature[d] = s;
  }
  return feature;
}

inline std::vector<RegionSample> generate_split(const DatasetConfig& cfg,
                                                int count,
                                                const std::vector<double>& fmap,
                                                Rng rng) {
  std::vector<RegionSample> out;
  out.reserve(static_cast<std::size_t>(count));
  while (static_cast<int>(out.size()) < count) {
    const int n_obj = 1 + static_cast<int>(rng.next_u64() % 3);
    std::vector<int> classes(n_obj);
    std::vector<Box> objects(n_obj);
    for (int i = 0; i < n_obj; ++i) {
      classes[i] = 1 + static_cast<int>(rng.next_u64() %
                                        static_cast<std::uint64_t>(cfg.num_classes - 1));
      objects[i] = sample_object(classes[i], rng);
    }
    for (int i = 0; i < n_obj && static_cast<int>(out.size()) < count; ++i) {
      RegionSample s;
      const bool fg = rng.next_double() < cfg.fg_fraction;
      if (fg) {
        s.label = classes[i];
        s.gt = objects[i];
        s.proposal = jitter_proposal(objects[i], rng);
        s.target_deltas = encode_deltas(*s.gt, s.proposal);
      } else {
        s.label = 0;
        s.proposal = background_proposal(objects, rng);
      }
      const std::array<double, 4> deltas =
          s.target_deltas.value_or(std::array<double, 4>{0.0, 0.0, 0.0, 0.0});
      s.feature = make_feature(cfg, s.label, deltas, fmap, rng);
      out.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace detail

// Deterministic in cfg.seed. Train and val come from disjoint streams but
// share the same feature map.
inline Dataset generate_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  Rng root(cfg.seed);
  Rng map_rng = root.fork(0);
  const int raw_dim = cfg.raw_dim();
  std::vector<double> fmap(static_cast<std::size_t>(cfg.feature_dim) * raw_dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(raw_dim));
  for (auto& v : fmap) v = map_rng.normal() * scale;
  Dataset ds;
  ds.train = detail::generate_split(cfg, cfg.n_train, fmap, root.fork(1));
  ds.val = detail::generate_split(cfg, cfg.n_val, fmap, root.fork(2));
  return ds;
}

struct Prediction {
  std::vector<double> class_probs;
  std::array<double, 4> deltas{0.0, 0.0, 0.0, 0.0};
};

struct Metrics {
  double accuracy = 0.0;
  double mean_iou_fg = 0.0;
  double ap50 = 0.0;
};

// Accuracy over all samples, mean IoU of decoded boxes over foreground
// samples, and single-threshold average precision. Detections are the
// samples whose argmax class is non-background, ranked by that class's
// probability; each distinct ground-truth box can be matched once, and a
// detection counts only if its class is right and its decoded box clears
// the IoU threshold.
inline Metrics evaluate(const std::vector<Prediction>& preds,
                        const std::vector<RegionSample>& samples,
                        double iou_threshold = 0.5) {
  if (preds.size() != samples.size()) {
    throw Error("evaluate: " + std::to_string(preds.size()) +
                " predictions for " + std::to_string(samples.size()) +
                " samples");
  }
  std::map<std::array<double, 4>, std::size_t> group_of;
  for (const auto& s : samples) {
    if (s.label > 0) {
      const std::array<double, 4> key{s.gt->x1, s.gt->y1, s.gt->x2, s.gt->y2};
      group_of.emplace(key, group_of.size());
    }
  }
  const std::size_t n_pos = group_of.size();

  std::size_t correct = 0;
  double iou_sum = 0.0;
  std::size_t fg_count = 0;
  struct Det {
    double conf;
    std::size_t idx;
    int cls;
  };
  std::vector<Det> dets;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& probs = preds[i].class_probs;
    if (probs.empty()) throw Error("evaluate: empty class probabilities");
    const std::size_t argmax = static_cast<std::size_t>(
        std::max_element(probs.begin(), probs.end()) - probs.begin());
    if (static_cast<int>(argmax) == samples[i].label) ++correct;
    if (samples[i].label > 0) {
      ++fg_count;
      const Box decoded = decode_deltas(preds[i].deltas, samples[i].proposal);
      iou_sum += iou(decoded, *samples[i].gt);
    }
    if (argmax > 0) {
      dets.push_back({probs[argmax], i, static_cast<int>(argmax)});
    }
  }
  std::sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) {
    if (a.conf != b.conf) return a.conf > b.conf;
    return a.idx < b.idx;
  });

  double ap = 0.0;
  if (n_pos > 0) {
    std::vector<char> matched(n_pos, 0);
    std::size_t tp = 0, fp = 0;
    for (const Det& det : dets) {
      const auto& s = samples[det.idx];
      bool hit = s.label > 0 && det.cls == s.label;
      if (hit) {
        const Box decoded = decode_deltas(preds[det.idx].deltas, s.proposal);
        hit = iou(decoded, *s.gt) >= iou_threshold;
      }
      if (hit) {
        const std::array<double, 4> key{s.gt->x1, s.gt->y1, s.gt->x2, s.gt->y2};
        const std::size_t gid = group_of.at(key);
        hit = !matched[gid];
        if (hit) matched[gid] = 1;
      }
      if (hit) {
        ++tp;
        ap += static_cast<double>(tp) / static_cast<double>(tp + fp) /
              static_cast<double>(n_pos);
      } else {
        ++fp;
      }
    }
  }

  Metrics m;
  m.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
  m.mean_iou_fg = fg_count > 0 ? iou_sum / static_cast<double>(fg_count) : 0.0;
  m.ap50 = ap;
  return m;
}

namespace detail {

inline std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// CSV with one region per row. Doubles are printed with 17 significant
// digits, so a write/read round trip is value-exact. Background rows carry
// NA in the gt and delta columns.
inline void write_csv(const std::vector<RegionSample>& samples,
                      const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("write_csv: cannot open " + path);
  if (samples.empty()) throw Error("write_csv: no samples");
  const std::size_t d = samples[0].feature.size();
  for (std::size_t j = 0; j < d; ++j) out << "feature_" << j << ",";
  out << "y,proposal_x1,proposal_y1,proposal_x2,proposal_y2,"
      << "gt_x1,gt_y1,gt_x2,gt_y2,delta_0,delta_1,delta_2,delta_3\n";
  for (const auto& s : samples) {
    if (s.feature.size() != d) throw Error("write_csv: ragged feature widths");
    if ((s.label > 0) != s.gt.has_value() ||
        s.gt.has_value() != s.target_deltas.has_value()) {
      throw Error("write_csv: foreground fields inconsistent with label");
    }
    for (double f : s.feature) out << detail::fmt17(f) << ",";
    out << s.label << "," << detail::fmt17(s.proposal.x1) << ","
        << detail::fmt17(s.proposal.y1) << "," << detail::fmt17(s.proposal.x2)
        << "," << detail::fmt17(s.proposal.y2);
    if (s.gt) {
      out << "," << detail::fmt17(s.gt->x1) << "," << detail::fmt17(s.gt->y1)
          << "," << detail::fmt17(s.gt->x2) << "," << detail::fmt17(s.gt->y2);
      for (double v : *s.target_deltas) out << "," << detail::fmt17(v);
    } else {
      out << ",NA,NA,NA,NA,NA,NA,NA,NA";
    }
    out << "\n";
  }
  if (!out.flush()) throw Error("write_csv: write failed for " + path);
}

inline std::vector<RegionSample> read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("read_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw Error("read_csv: empty file " + path);
  std::size_t d = 0;
  {
    std::stringstream header(line);
    std::string cell;
    while (std::getline(header, cell, ',') && cell.rfind("feature_", 0) == 0) ++d;
  }
  if (d == 0) throw Error("read_csv: no feature columns in " + path);
  const std::size_t expected_cells = d + 13;

  std::vector<RegionSample> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    cells.reserve(expected_cells);
    std::stringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (cells.size() != expected_cells) {
      throw Error("read_csv: line " + std::to_string(line_no) + " has " +
                  std::to_string(cells.size()) + " cells, expected " +
                  std::to_string(expected_cells));
    }
    auto num = [&](const std::string& c) -> double {
      std::size_t pos = 0;
      const double v = std::stod(c, &pos);
      if (pos != c.size()) {
        throw Error("read_csv: bad number '" + c + "' at line " +
                    std::to_string(line_no));
      }
      return v;
    };
    RegionSample s;
    s.feature.resize(d);
    for (std::size_t j = 0; j < d; ++j) s.feature[j] = num(cells[j]);
    s.label = static_cast<int>(num(cells[d]));
    s.proposal = Box{num(cells[d + 1]), num(cells[d + 2]), num(cells[d + 3]),
                     num(cells[d + 4])};
    const bool has_gt = cells[d + 5] != "NA";
    if (has_gt != (s.label > 0)) {
      throw Error("read_csv: line " + std::to_string(line_no) +
                  ": gt columns inconsistent with label");
    }
    if (has_gt) {
      s.gt = Box{num(cells[d + 5]), num(cells[d + 6]), num(cells[d + 7]),
                 num(cells[d + 8])};
      s.target_deltas = std::array<double, 4>{num(cells[d + 9]), num(cells[d + 10]),
                                              num(cells[d + 11]), num(cells[d + 12])};
    } else {
      for (std::size_t j = d + 5; j < expected_cells; ++j) {
        if (cells[j] != "NA") {
          throw Error("read_csv: line " + std::to_string(line_no) +
                      ": background row with non-NA gt fields");
        }
      }
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) throw Error("read_csv: no rows in " + path);
  return out;
}

}  // namespace rdr::taskgen

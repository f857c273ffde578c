#pragma once

// Randomized decision routing. Each training step, every sample picks one
// node per task to favor: for classification the node with the lower
// detached loss, for box regression the node with the larger routing
// probability. The favored node draws its weight from U(0.9, 1.1), the
// other from U(0.1, 0.3), so the favored node trains at least three times
// faster. Weights are plain constants; nothing here touches the tape.

#include <cassert>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rdr/errors.hpp"
#include "rdr/rng.hpp"

namespace rdr::routing {

inline constexpr double kLowMin = 0.1;
inline constexpr double kLowMax = 0.3;
inline constexpr double kHighMin = 0.9;
inline constexpr double kHighMax = 1.1;
inline constexpr double kTieEps = 1e-12;

enum class Node : std::uint8_t { kLeft = 0, kRight = 1 };

// Per-sample slow-fast constants for one step.
struct SelectiveWeights {
  std::vector<double> cls_left, cls_right;
  std::vector<double> bbox_left, bbox_right;
};

// One stream per concern: toggling a consumer never shifts the others.
struct Streams {
  Rng cls_select;
  Rng bbox_select;
  Rng cls_weights;
  Rng bbox_weights;

  explicit Streams(const Rng& base)
      : cls_select(base.fork(0)),
        bbox_select(base.fork(1)),
        cls_weights(base.fork(2)),
        bbox_weights(base.fork(3)) {}
};

// Lower detached loss wins; near-ties (within 1e-12) fall to a fair coin.
inline std::vector<Node> select_node_cls(const std::vector<double>& loss_l,
                                         const std::vector<double>& loss_r,
                                         Rng& rng) {
  if (loss_l.size() != loss_r.size()) {
    throw Error("select_node_cls: " + std::to_string(loss_l.size()) + " vs " +
                std::to_string(loss_r.size()) + " node losses");
  }
  std::vector<Node> out(loss_l.size());
  for (std::size_t i = 0; i < loss_l.size(); ++i) {
    if (std::isnan(loss_l[i]) || std::isnan(loss_r[i])) {
      throw NumericsError("select_node_cls: NaN node loss at sample " +
                          std::to_string(i));
    }
    if (std::abs(loss_l[i] - loss_r[i]) < kTieEps) {
      out[i] = rng.next_double() < 0.5 ? Node::kLeft : Node::kRight;
    } else {
      out[i] = loss_l[i] < loss_r[i] ? Node::kLeft : Node::kRight;
    }
  }
  return out;
}

// Larger routing probability wins; q_l + q_r must already be normalized.
inline std::vector<Node> select_node_bbox(const std::vector<double>& q_l,
                                          const std::vector<double>& q_r,
                                          Rng& rng) {
  if (q_l.size() != q_r.size()) {
    throw Error("select_node_bbox: " + std::to_string(q_l.size()) + " vs " +
                std::to_string(q_r.size()) + " routing probabilities");
  }
  std::vector<Node> out(q_l.size());
  for (std::size_t i = 0; i < q_l.size(); ++i) {
    if (std::isnan(q_l[i]) || std::isnan(q_r[i])) {
      throw NumericsError("select_node_bbox: NaN routing probability at sample " +
                          std::to_string(i));
    }
    if (std::abs(q_l[i] + q_r[i] - 1.0) > 1e-6) {
      throw Error("select_node_bbox: probabilities not normalized at sample " +
                  std::to_string(i));
    }
    if (std::abs(q_l[i] - q_r[i]) < kTieEps) {
      out[i] = rng.next_double() < 0.5 ? Node::kLeft : Node::kRight;
    } else {
      out[i] = q_l[i] > q_r[i] ? Node::kLeft : Node::kRight;
    }
  }
  return out;
}

struct WeightPair {
  std::vector<double> left, right;
};

// Draws (high, low) in a fixed order per sample and assigns them by the
// selection, so exchanging the nodes exchanges the weight pair exactly.
inline WeightPair sample_weights(const std::vector<Node>& selection, Rng& rng) {
  WeightPair w;
  w.left.resize(selection.size());
  w.right.resize(selection.size());
  for (std::size_t i = 0; i < selection.size(); ++i) {
    const double high = rng.uniform(kHighMin, kHighMax);
    const double low = rng.uniform(kLowMin, kLowMax);
    if (selection[i] == Node::kLeft) {
      w.left[i] = high;
      w.right[i] = low;
    } else {
      w.left[i] = low;
      w.right[i] = high;
    }
  }
  return w;
}

inline bool weights_in_bounds(double lo, double hi) {
  const bool lo_ok = lo >= kLowMin && lo <= kLowMax;
  const bool hi_ok = hi >= kHighMin && hi <= kHighMax;
  return (lo_ok && hi_ok);
}

// One routing decision per sample per task from detached values.
inline SelectiveWeights route_step(const std::vector<double>& cls_loss_l,
                                   const std::vector<double>& cls_loss_r,
                                   const std::vector<double>& q_l,
                                   const std::vector<double>& q_r,
                                   Streams& streams) {
  const std::vector<Node> cls_sel =
      select_node_cls(cls_loss_l, cls_loss_r, streams.cls_select);
  WeightPair cls_w = sample_weights(cls_sel, streams.cls_weights);
  const std::vector<Node> bbox_sel =
      select_node_bbox(q_l, q_r, streams.bbox_select);
  WeightPair bbox_w = sample_weights(bbox_sel, streams.bbox_weights);
#ifndef NDEBUG
  for (std::size_t i = 0; i < cls_w.left.size(); ++i) {
    assert(weights_in_bounds(std::min(cls_w.left[i], cls_w.right[i]),
                             std::max(cls_w.left[i], cls_w.right[i])));
  }
  for (std::size_t i = 0; i < bbox_w.left.size(); ++i) {
    assert(weights_in_bounds(std::min(bbox_w.left[i], bbox_w.right[i]),
                             std::max(bbox_w.left[i], bbox_w.right[i])));
  }
#endif
  return SelectiveWeights{std::move(cls_w.left), std::move(cls_w.right),
                          std::move(bbox_w.left), std::move(bbox_w.right)};
}

}  // namespace rdr::routing

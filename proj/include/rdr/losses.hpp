#pragma once

// Loss stack for the routed heads. Per-sample base losses (cross-entropy or
// focal for classification, smooth-L1 or IoU for box regression) feed two
// compositions:
//
//   selective   mean_i(gamma_l_i * L_l_i + gamma_r_i * L_r_i)
//               per-node losses scaled by the sampled slow-fast constants;
//               gradients reach the node predictors only
//   associative base loss of the probability-fused outputs; the only
//               supervision that reaches the routing probabilities
//
//   total = lambda * (selective_cls + selective_bbox)
//         + (1 - lambda) * (associative_cls + associative_bbox)
//
// Box losses run on foreground rows only; an empty foreground reduces to 0.

#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "rdr/errors.hpp"
#include "rdr/heads.hpp"
#include "rdr/routing.hpp"
#include "rdr/taskgen.hpp"
#include "rdr/tensor.hpp"

namespace rdr::losses {

enum class ClsLoss { kCrossEntropy, kFocal };
enum class BboxLoss { kSmoothL1, kIou };

inline const char* to_string(ClsLoss k) {
  return k == ClsLoss::kCrossEntropy ? "cross_entropy" : "focal";
}

inline ClsLoss cls_loss_from_string(std::string_view s) {
  if (s == "cross_entropy") return ClsLoss::kCrossEntropy;
  if (s == "focal") return ClsLoss::kFocal;
  throw ConfigError("loss.cls: must be cross_entropy or focal");
}

inline const char* to_string(BboxLoss k) {
  return k == BboxLoss::kSmoothL1 ? "smooth_l1" : "iou";
}

inline BboxLoss bbox_loss_from_string(std::string_view s) {
  if (s == "smooth_l1") return BboxLoss::kSmoothL1;
  if (s == "iou") return BboxLoss::kIou;
  throw ConfigError("loss.bbox: must be smooth_l1 or iou");
}

struct LossConfig {
  ClsLoss cls = ClsLoss::kCrossEntropy;
  BboxLoss bbox = BboxLoss::kSmoothL1;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  // Tight transition point: box delta residuals on the bundled task sit around
  // 0.1, and a beta of 1.0 leaves them in the quadratic region with gradients
  // too small to polish localization within the epoch budget.
  double smooth_l1_beta = 0.1;
  double iou_floor = 1e-6;
  double lambda = 0.5;

  void validate() const {
    if (!(focal_gamma >= 0.0)) throw ConfigError("loss.focal_gamma: must be >= 0");
    if (!(focal_alpha > 0.0)) throw ConfigError("loss.focal_alpha: must be > 0");
    if (!(smooth_l1_beta > 0.0)) throw ConfigError("loss.smooth_l1_beta: must be > 0");
    if (!(iou_floor > 0.0 && iou_floor < 1.0)) {
      throw ConfigError("loss.iou_floor: must be in (0, 1)");
    }
    if (!(lambda >= 0.0 && lambda <= 0.95)) {
      throw ConfigError("loss.lambda: must be in [0, 0.95]");
    }
  }
};

namespace detail {

inline void check_logits(const ad::Tensor& logits, const std::vector<int>& labels,
                         const char* who) {
  if (logits.rank() != 2) {
    throw ShapeError(std::string(who) + ": expected [n,K] logits, got " +
                     ad::shape_str(logits.shape()));
  }
  if (logits.extent(0) != labels.size()) {
    throw ShapeError(std::string(who) + ": " + std::to_string(labels.size()) +
                     " labels for logits " + ad::shape_str(logits.shape()));
  }
  const int k = static_cast<int>(logits.extent(1));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k) {
      throw Error(std::string(who) + ": label " + std::to_string(labels[i]) +
                  " out of range [0, " + std::to_string(k) + ") at sample " +
                  std::to_string(i));
    }
  }
}

inline ad::Tensor onehot(const std::vector<int>& labels, std::size_t k,
                         bool invert = false) {
  std::vector<double> v(labels.size() * k, invert ? 1.0 : 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    v[i * k + static_cast<std::size_t>(labels[i])] = invert ? 0.0 : 1.0;
  }
  return ad::Tensor({labels.size(), k}, std::move(v));
}

// Constant per-row max, used to shift the log-sum-exp into a stable range.
// The shift cancels exactly in the loss value and leaves the gradient of
// lse untouched, so treating it as a constant is not an approximation.
inline ad::Tensor row_max_const(const ad::Tensor& logits) {
  const std::size_t n = logits.extent(0), k = logits.extent(1);
  std::vector<double> m(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double best = logits.value(i * k);
    for (std::size_t j = 1; j < k; ++j) best = std::max(best, logits.value(i * k + j));
    m[i] = best;
  }
  return ad::Tensor({n, 1}, std::move(m));
}

inline ad::Tensor tmin(const ad::Tensor& a, const ad::Tensor& b) {
  return ad::sub(a, ad::relu(ad::sub(a, b)));
}

inline ad::Tensor tmax(const ad::Tensor& a, const ad::Tensor& b) {
  return ad::add(a, ad::relu(ad::sub(b, a)));
}

struct DecodedCorners {
  ad::Tensor x1, y1, x2, y2;
};

// Differentiable decode of [n,4] deltas against fixed proposals.
inline DecodedCorners decode_boxes(const ad::Tensor& deltas,
                                   const std::vector<taskgen::Box>& proposals,
                                   const char* who) {
  const std::size_t n = proposals.size();
  if (deltas.rank() != 2 || deltas.extent(0) != n || deltas.extent(1) != 4) {
    throw ShapeError(std::string(who) + ": expected [" + std::to_string(n) +
                     ",4] deltas, got " + ad::shape_str(deltas.shape()));
  }
  std::vector<double> pcx(n), pcy(n), pw(n), ph(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!proposals[i].valid()) {
      throw Error(std::string(who) + ": degenerate proposal at row " +
                  std::to_string(i));
    }
    pcx[i] = proposals[i].cx();
    pcy[i] = proposals[i].cy();
    pw[i] = proposals[i].width();
    ph[i] = proposals[i].height();
  }
  const ad::Tensor cx0({n, 1}, std::move(pcx));
  const ad::Tensor cy0({n, 1}, std::move(pcy));
  const ad::Tensor w0({n, 1}, std::move(pw));
  const ad::Tensor h0({n, 1}, std::move(ph));

  const ad::Tensor cx = ad::add(cx0, ad::mul(ad::column(deltas, 0), w0));
  const ad::Tensor cy = ad::add(cy0, ad::mul(ad::column(deltas, 1), h0));
  const ad::Tensor hw = ad::scalar_mul(ad::mul(w0, ad::exp(ad::column(deltas, 2))), 0.5);
  const ad::Tensor hh = ad::scalar_mul(ad::mul(h0, ad::exp(ad::column(deltas, 3))), 0.5);
  return {ad::sub(cx, hw), ad::sub(cy, hh), ad::add(cx, hw), ad::add(cy, hh)};
}

}  // namespace detail

// Per-sample cross-entropy as [n,1]: lse(logits_i) - logits_i[y_i], with a
// constant row-max shift for stability.
inline ad::Tensor cross_entropy(const ad::Tensor& logits,
                                const std::vector<int>& labels) {
  detail::check_logits(logits, labels, "cross_entropy");
  const std::size_t k = logits.extent(1);
  const ad::Tensor m = detail::row_max_const(logits);
  const ad::Tensor shifted = ad::sub(logits, m);
  const ad::Tensor lse = ad::add(ad::log(ad::row_sum(ad::exp(shifted))), m);
  const ad::Tensor zy = ad::row_sum(ad::mul(logits, detail::onehot(labels, k)));
  return ad::sub(lse, zy);
}

// Per-sample focal loss alpha * (1 - p_t)^gamma * ce as [n,1], where p_t is
// the true-class softmax probability. 1 - p_t is accumulated from the
// other-class probabilities, which stays accurate when p_t -> 1. At
// gamma == 0 the modulating factor is identically one, so the focal loss
// coincides with alpha-scaled cross-entropy exactly.
inline ad::Tensor focal(const ad::Tensor& logits, const std::vector<int>& labels,
                        double gamma, double alpha) {
  detail::check_logits(logits, labels, "focal");
  if (!(gamma >= 0.0)) throw ConfigError("loss.focal_gamma: must be >= 0");
  if (!(alpha > 0.0)) throw ConfigError("loss.focal_alpha: must be > 0");
  const ad::Tensor ce = cross_entropy(logits, labels);
  if (gamma == 0.0) return ad::scalar_mul(ce, alpha);
  const std::size_t k = logits.extent(1);
  const ad::Tensor u = ad::row_sum(
      ad::mul(ad::softmax(logits), detail::onehot(labels, k, /*invert=*/true)));
  const ad::Tensor mod =
      ad::exp(ad::scalar_mul(ad::log(ad::clamp_min(u, 1e-300)), gamma));
  return ad::scalar_mul(ad::mul(mod, ce), alpha);
}

// Per-sample smooth-L1 summed over the four delta coordinates, as [n,1].
// Per coordinate with residual magnitude a: 0.5 a^2 / beta for a <= beta,
// a - 0.5 beta above.
inline ad::Tensor smooth_l1(const ad::Tensor& pred, const ad::Tensor& target,
                            double beta) {
  if (!(beta > 0.0)) throw ConfigError("loss.smooth_l1_beta: must be > 0");
  if (pred.shape() != target.shape() || pred.rank() != 2) {
    throw ShapeError("smooth_l1: incompatible shapes " + ad::shape_str(pred.shape()) +
                     " and " + ad::shape_str(target.shape()));
  }
  const ad::Tensor x = ad::sub(pred, target);
  const ad::Tensor a = ad::add(ad::relu(x), ad::relu(ad::scalar_mul(x, -1.0)));
  const ad::Tensor bfull = ad::Tensor::full(pred.shape(), beta);
  const ad::Tensor m = ad::sub(bfull, ad::relu(ad::sub(bfull, a)));  // min(a, beta)
  const ad::Tensor quad = ad::scalar_mul(ad::mul(m, m), 0.5 / beta);
  const ad::Tensor lin = ad::relu(ad::sub(a, bfull));
  return ad::row_sum(ad::add(quad, lin));
}

// Per-sample -log(max(iou, floor)) as [n,1]. Both delta sets are decoded
// against the same proposals; gradients flow only through `pred`. Disjoint
// boxes clamp to the floor and receive exactly zero gradient.
inline ad::Tensor iou_loss(const ad::Tensor& pred, const ad::Tensor& target,
                           const std::vector<taskgen::Box>& proposals,
                           double floor) {
  if (!(floor > 0.0 && floor < 1.0)) {
    throw ConfigError("loss.iou_floor: must be in (0, 1)");
  }
  const detail::DecodedCorners a = detail::decode_boxes(pred, proposals, "iou_loss");
  const detail::DecodedCorners b =
      detail::decode_boxes(target.detach(), proposals, "iou_loss");

  const ad::Tensor iw =
      ad::relu(ad::sub(detail::tmin(a.x2, b.x2), detail::tmax(a.x1, b.x1)));
  const ad::Tensor ih =
      ad::relu(ad::sub(detail::tmin(a.y2, b.y2), detail::tmax(a.y1, b.y1)));
  const ad::Tensor inter = ad::mul(iw, ih);
  const ad::Tensor area_a = ad::mul(ad::sub(a.x2, a.x1), ad::sub(a.y2, a.y1));
  const ad::Tensor area_b = ad::mul(ad::sub(b.x2, b.x1), ad::sub(b.y2, b.y1));
  const ad::Tensor uni = ad::sub(ad::add(area_a, area_b), inter);
  const ad::Tensor iou =
      ad::exp(ad::sub(ad::log(ad::clamp_min(inter, 1e-30)), ad::log(uni)));
  return ad::scalar_mul(ad::log(ad::clamp_min(iou, floor)), -1.0);
}

namespace detail {

inline ad::Tensor weighted_node_mean(const char* who, const ad::Tensor& loss_l,
                                     const ad::Tensor& loss_r,
                                     const std::vector<double>& gamma_l,
                                     const std::vector<double>& gamma_r) {
  const std::size_t n = gamma_l.size();
  if (gamma_r.size() != n || loss_l.numel() != n || loss_r.numel() != n) {
    throw ShapeError(std::string(who) + ": mismatched lengths (losses " +
                     std::to_string(loss_l.numel()) + "/" +
                     std::to_string(loss_r.numel()) + ", weights " +
                     std::to_string(n) + "/" + std::to_string(gamma_r.size()) + ")");
  }
  std::vector<double> gl = gamma_l, gr = gamma_r;
  const ad::Tensor tl(loss_l.shape(), std::move(gl));
  const ad::Tensor tr(loss_r.shape(), std::move(gr));
  return ad::mean(ad::add(ad::mul(loss_l, tl), ad::mul(loss_r, tr)));
}

}  // namespace detail

// Eq-style selective classification loss: mean over the batch of the
// gamma-weighted per-node losses. The gammas enter as constants.
inline ad::Tensor selective_cls(const ad::Tensor& loss_l, const ad::Tensor& loss_r,
                                const std::vector<double>& gamma_l,
                                const std::vector<double>& gamma_r) {
  return detail::weighted_node_mean("selective_cls", loss_l, loss_r, gamma_l, gamma_r);
}

// Same composition over foreground rows only; an empty foreground gives 0.
inline ad::Tensor selective_bbox(const ad::Tensor& loss_l, const ad::Tensor& loss_r,
                                 const std::vector<double>& gamma_l,
                                 const std::vector<double>& gamma_r) {
  return detail::weighted_node_mean("selective_bbox", loss_l, loss_r, gamma_l, gamma_r);
}

inline ad::Tensor classification_loss(const ad::Tensor& logits,
                                      const std::vector<int>& labels,
                                      const LossConfig& cfg) {
  return cfg.cls == ClsLoss::kCrossEntropy
             ? cross_entropy(logits, labels)
             : focal(logits, labels, cfg.focal_gamma, cfg.focal_alpha);
}

inline ad::Tensor box_loss(const ad::Tensor& deltas, const ad::Tensor& targets,
                           const std::vector<taskgen::Box>& proposals,
                           const LossConfig& cfg) {
  return cfg.bbox == BboxLoss::kSmoothL1
             ? smooth_l1(deltas, targets, cfg.smooth_l1_beta)
             : iou_loss(deltas, targets, proposals, cfg.iou_floor);
}

// Base classification loss of the fused logits p_l*c_l + p_r*c_r. This is
// the only term whose gradient reaches the routing probabilities.
inline ad::Tensor associative_cls(const ad::Tensor& c_l, const ad::Tensor& c_r,
                                  const ad::Tensor& p_l, const ad::Tensor& p_r,
                                  const std::vector<int>& labels,
                                  const LossConfig& cfg) {
  const ad::Tensor fused =
      ad::add(ad::broadcast_mul(c_l, p_l), ad::broadcast_mul(c_r, p_r));
  return ad::mean(classification_loss(fused, labels, cfg));
}

// Box analogue over foreground rows; empty foreground gives 0.
inline ad::Tensor associative_bbox(const ad::Tensor& b_l, const ad::Tensor& b_r,
                                   const ad::Tensor& q_l, const ad::Tensor& q_r,
                                   const ad::Tensor& targets,
                                   const std::vector<taskgen::Box>& proposals,
                                   const LossConfig& cfg) {
  const ad::Tensor fused =
      ad::add(ad::broadcast_mul(b_l, q_l), ad::broadcast_mul(b_r, q_r));
  return ad::mean(box_loss(fused, targets, proposals, cfg));
}

// lambda * (selective_cls + selective_bbox)
//   + (1 - lambda) * (associative_cls + associative_bbox).
// The formula is defined on [0, 1]; training configs additionally cap
// lambda at 0.95 so the associative term never vanishes.
inline ad::Tensor total_loss(const ad::Tensor& sel_cls, const ad::Tensor& sel_bbox,
                             const ad::Tensor& assoc_cls, const ad::Tensor& assoc_bbox,
                             double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ConfigError("total_loss: lambda must be in [0, 1]");
  }
  return ad::add(ad::scalar_mul(ad::add(sel_cls, sel_bbox), lambda),
                 ad::scalar_mul(ad::add(assoc_cls, assoc_bbox), 1.0 - lambda));
}

// Targets of one training batch. Foreground rows are extracted through a
// constant selector matrix so box losses never see background garbage.
struct BatchTargets {
  std::vector<int> labels;
  std::vector<std::size_t> fg_indices;
  ad::Tensor fg_selector;       // [n_fg, n] one-hot rows
  ad::Tensor fg_target_deltas;  // [n_fg, 4]
  std::vector<taskgen::Box> fg_proposals;

  std::size_t size() const { return labels.size(); }
  std::size_t fg_count() const { return fg_indices.size(); }
};

inline BatchTargets make_batch_targets(const std::vector<taskgen::RegionSample>& data,
                                       const std::vector<std::size_t>& indices) {
  BatchTargets bt;
  bt.labels.reserve(indices.size());
  for (std::size_t row = 0; row < indices.size(); ++row) {
    const auto& s = data.at(indices[row]);
    bt.labels.push_back(s.label);
    if (s.label > 0) bt.fg_indices.push_back(row);
  }
  const std::size_t n = indices.size(), nf = bt.fg_indices.size();
  std::vector<double> sel(nf * n, 0.0);
  std::vector<double> deltas(nf * 4, 0.0);
  bt.fg_proposals.reserve(nf);
  for (std::size_t f = 0; f < nf; ++f) {
    const auto& s = data[indices[bt.fg_indices[f]]];
    sel[f * n + bt.fg_indices[f]] = 1.0;
    for (std::size_t j = 0; j < 4; ++j) deltas[f * 4 + j] = (*s.target_deltas)[j];
    bt.fg_proposals.push_back(s.proposal);
  }
  bt.fg_selector = ad::Tensor({nf, n}, std::move(sel));
  bt.fg_target_deltas = ad::Tensor({nf, 4}, std::move(deltas));
  return bt;
}

// Per-node, per-sample losses, kept on the tape.
struct NodeLosses {
  ad::Tensor cls_l, cls_r;    // [n,1]
  ad::Tensor bbox_l, bbox_r;  // [n_fg,1]
};

inline NodeLosses node_losses(const heads::TreeHeadOutput& out,
                              const BatchTargets& bt, const LossConfig& cfg) {
  NodeLosses nl;
  nl.cls_l = classification_loss(out.c_l, bt.labels, cfg);
  nl.cls_r = classification_loss(out.c_r, bt.labels, cfg);
  const ad::Tensor b_l_fg = ad::matmul(bt.fg_selector, out.b_l);
  const ad::Tensor b_r_fg = ad::matmul(bt.fg_selector, out.b_r);
  nl.bbox_l = box_loss(b_l_fg, bt.fg_target_deltas, bt.fg_proposals, cfg);
  nl.bbox_r = box_loss(b_r_fg, bt.fg_target_deltas, bt.fg_proposals, cfg);
  return nl;
}

struct LossBundle {
  ad::Tensor selective_cls, selective_bbox;
  ad::Tensor associative_cls, associative_bbox;
  ad::Tensor total;
  // detached per-sample node losses, for selection audits and logging
  std::vector<double> node_cls_l, node_cls_r;
  std::vector<double> node_bbox_l, node_bbox_r;
};

inline LossBundle make_loss_bundle(const heads::TreeHeadOutput& out,
                                   const BatchTargets& bt, const NodeLosses& nl,
                                   const routing::SelectiveWeights& w,
                                   const LossConfig& cfg) {
  const std::size_t n = bt.size();
  if (w.cls_left.size() != n || w.cls_right.size() != n ||
      w.bbox_left.size() != n || w.bbox_right.size() != n) {
    throw ShapeError("make_loss_bundle: selective weights sized for " +
                     std::to_string(w.cls_left.size()) + " samples, batch has " +
                     std::to_string(n));
  }
  std::vector<double> gbl, gbr;
  gbl.reserve(bt.fg_count());
  gbr.reserve(bt.fg_count());
  for (std::size_t row : bt.fg_indices) {
    gbl.push_back(w.bbox_left[row]);
    gbr.push_back(w.bbox_right[row]);
  }

  LossBundle b;
  b.selective_cls = selective_cls(nl.cls_l, nl.cls_r, w.cls_left, w.cls_right);
  b.selective_bbox = selective_bbox(nl.bbox_l, nl.bbox_r, gbl, gbr);
  b.associative_cls =
      associative_cls(out.c_l, out.c_r, out.p_l, out.p_r, bt.labels, cfg);
  const ad::Tensor b_l_fg = ad::matmul(bt.fg_selector, out.b_l);
  const ad::Tensor b_r_fg = ad::matmul(bt.fg_selector, out.b_r);
  const ad::Tensor q_l_fg = ad::matmul(bt.fg_selector, out.q_l);
  const ad::Tensor q_r_fg = ad::matmul(bt.fg_selector, out.q_r);
  b.associative_bbox = associative_bbox(b_l_fg, b_r_fg, q_l_fg, q_r_fg,
                                        bt.fg_target_deltas, bt.fg_proposals, cfg);
  b.total = total_loss(b.selective_cls, b.selective_bbox, b.associative_cls,
                       b.associative_bbox, cfg.lambda);
  b.node_cls_l = nl.cls_l.values();
  b.node_cls_r = nl.cls_r.values();
  b.node_bbox_l = nl.bbox_l.values();
  b.node_bbox_r = nl.bbox_r.values();
  return b;
}

}  // namespace rdr::losses

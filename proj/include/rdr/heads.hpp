#pragma once

// Prediction heads over region features. The single head is a shared trunk
// with one classification and one box-regression layer. Tree heads replace
// each task layer with a left/right node pair whose outputs are fused by
// soft routing probabilities from a narrow shared branch:
//
//   c = p_l * c_l + p_r * c_r        b = q_l * b_l + q_r * b_r
//
// Variant B is that structure alone; M adds per-route sigmoid masks computed
// from the batch-mean trunk feature; T additionally splits the trunk feature
// into per-task transforms before masking; Lite is B with a single 16-wide
// routing layer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rdr/errors.hpp"
#include "rdr/rng.hpp"
#include "rdr/tensor.hpp"

namespace rdr::heads {

enum class Variant { kSingle, kB, kM, kT, kLite };
enum class TrunkKind { kTwoFc, kFourFc };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::kSingle: return "single";
    case Variant::kB: return "B";
    case Variant::kM: return "M";
    case Variant::kT: return "T";
    case Variant::kLite: return "Lite";
  }
  throw ConfigError("head.variant: unknown value");
}

inline Variant variant_from_string(std::string_view s) {
  if (s == "single") return Variant::kSingle;
  if (s == "B") return Variant::kB;
  if (s == "M") return Variant::kM;
  if (s == "T") return Variant::kT;
  if (s == "Lite") return Variant::kLite;
  throw ConfigError("head.variant: must be one of single, B, M, T, Lite");
}

inline const char* to_string(TrunkKind t) {
  return t == TrunkKind::kTwoFc ? "two_fc" : "four_fc";
}

inline TrunkKind trunk_from_string(std::string_view s) {
  if (s == "two_fc") return TrunkKind::kTwoFc;
  if (s == "four_fc") return TrunkKind::kFourFc;
  throw ConfigError("head.trunk: must be two_fc or four_fc");
}

struct HeadConfig {
  Variant variant = Variant::kB;
  int input_dim = 64;
  TrunkKind trunk = TrunkKind::kTwoFc;
  int trunk_width = 128;
  int num_classes = 4;
  int routing_depth = 2;  // hidden fc layers in the routing branch
  int routing_width = 32;

  bool is_tree() const { return variant != Variant::kSingle; }
  bool has_masks() const { return variant == Variant::kM || variant == Variant::kT; }
  bool has_task_split() const { return variant == Variant::kT; }

  void validate() const {
    if (input_dim < 1) throw ConfigError("head.input_dim: must be >= 1");
    if (trunk_width < 1) throw ConfigError("head.trunk_width: must be >= 1");
    if (num_classes < 2) throw ConfigError("head.num_classes: must be >= 2");
    if (routing_depth < 1 || routing_depth > 2) {
      throw ConfigError("head.routing_branch_depth: must be 1 or 2");
    }
    if (routing_width < 1) throw ConfigError("head.routing_branch_width: must be >= 1");
    if (variant == Variant::kLite && routing_depth != 1) {
      throw ConfigError("head.routing_branch_depth: Lite uses a single routing layer");
    }
  }
};

// Parameter totals per structural block (closed form, kept independent of
// the builder so the two can be cross-checked).
struct BlockCounts {
  std::size_t trunk = 0;
  std::size_t node_predictors = 0;
  std::size_t routing_branch = 0;
  std::size_t mask_branch = 0;
  std::size_t task_branches = 0;

  std::size_t total() const {
    return trunk + node_predictors + routing_branch + mask_branch + task_branches;
  }
};

inline BlockCounts count_params(const HeadConfig& cfg) {
  cfg.validate();
  auto linear = [](std::size_t in, std::size_t out) { return in * out + out; };
  const auto d = static_cast<std::size_t>(cfg.input_dim);
  const auto w = static_cast<std::size_t>(cfg.trunk_width);
  const auto k = static_cast<std::size_t>(cfg.num_classes);
  const auto r = static_cast<std::size_t>(cfg.routing_width);

  BlockCounts c;
  c.trunk = linear(d, w) + (cfg.trunk == TrunkKind::kTwoFc ? 1 : 3) * linear(w, w);
  if (cfg.is_tree()) {
    c.node_predictors = 2 * linear(w, k) + 2 * linear(w, 4);
    c.routing_branch = linear(w, r) + (cfg.routing_depth == 2 ? linear(r, r) : 0) +
                       2 * linear(r, 2);
  } else {
    c.node_predictors = linear(w, k) + linear(w, 4);
  }
  if (cfg.has_masks()) c.mask_branch = 2 * linear(w, w);
  if (cfg.has_task_split()) c.task_branches = 2 * linear(w, w);
  return c;
}

struct TreeHeadOutput {
  ad::Tensor c_l, c_r;  // [n,K] node class logits
  ad::Tensor b_l, b_r;  // [n,4] node box deltas
  ad::Tensor p_l, p_r;  // [n,1] classification routing probabilities
  ad::Tensor q_l, q_r;  // [n,1] regression routing probabilities
  ad::Tensor c, b;      // fused outputs
};

struct RoutingMasks {
  ad::Tensor left, right;  // [1,W] sigmoid gates over the trunk width
};

class Head {
 public:
  Head(const HeadConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const int d = cfg_.input_dim, w = cfg_.trunk_width, k = cfg_.num_classes;
    const int r = cfg_.routing_width;

    trunk_.push_back(make_linear(d, w, rng, "trunk.fc0"));
    const int extra = cfg_.trunk == TrunkKind::kTwoFc ? 1 : 3;
    for (int i = 1; i <= extra; ++i) {
      trunk_.push_back(make_linear(w, w, rng, "trunk.fc" + std::to_string(i)));
    }

    if (cfg_.is_tree()) {
      node_cls_l_ = make_linear(w, k, rng, "node_l.cls");
      node_cls_r_ = make_linear(w, k, rng, "node_r.cls");
      node_bbox_l_ = make_linear(w, 4, rng, "node_l.bbox");
      node_bbox_r_ = make_linear(w, 4, rng, "node_r.bbox");
      routing_.push_back(make_linear(w, r, rng, "routing.fc0"));
      if (cfg_.routing_depth == 2) {
        routing_.push_back(make_linear(r, r, rng, "routing.fc1"));
      }
      routing_cls_ = make_linear(r, 2, rng, "routing.cls");
      routing_bbox_ = make_linear(r, 2, rng, "routing.bbox");
      if (cfg_.has_masks()) {
        mask_l_ = make_linear(w, w, rng, "mask.left");
        mask_r_ = make_linear(w, w, rng, "mask.right");
      }
      if (cfg_.has_task_split()) {
        task_cls_ = make_linear(w, w, rng, "task.cls");
        task_bbox_ = make_linear(w, w, rng, "task.bbox");
      }
    } else {
      cls_ = make_linear(w, k, rng, "cls");
      bbox_ = make_linear(w, 4, rng, "bbox");
    }
  }

  const HeadConfig& config() const { return cfg_; }

  std::vector<ad::Tensor>& parameters() { return params_; }
  const std::vector<std::pair<std::string, ad::Tensor>>& named_parameters() const {
    return named_;
  }

  ad::Tensor& param(std::string_view name) {
    for (auto& [n, t] : named_) {
      if (n == name) return t;
    }
    throw Error("head: no parameter named " + std::string(name));
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_) n += t.numel();
    return n;
  }

  ad::Tensor trunk_forward(const ad::Tensor& features) const {
    check_features(features, cfg_.input_dim, "trunk");
    ad::Tensor h = ad::relu(apply(trunk_[0], features));
    for (std::size_t i = 1; i < trunk_.size(); ++i) {
      ad::Tensor next = ad::relu(apply(trunk_[i], h));
      // the deeper trunk uses residual connections after the first layer
      h = cfg_.trunk == TrunkKind::kFourFc ? ad::add(next, h) : next;
    }
    return h;
  }

  // (class logits [n,K], box deltas [n,4]) for the plain head.
  std::pair<ad::Tensor, ad::Tensor> forward_single(const ad::Tensor& features) const {
    if (cfg_.is_tree()) {
      throw Error("forward_single: head variant is " +
                  std::string(to_string(cfg_.variant)));
    }
    ad::Tensor h = trunk_forward(features);
    return {apply(cls_, h), apply(bbox_, h)};
  }

  TreeHeadOutput forward_tree(const ad::Tensor& features) const {
    require_tree("forward_tree");
    ad::Tensor h = trunk_forward(features);
    if (cfg_.has_masks()) {
      const RoutingMasks masks = compute_routing_masks(h);
      return tree_from_trunk(h, &masks);
    }
    return tree_from_trunk(h, nullptr);
  }

  // Same forward pass with caller-supplied masks instead of batch-derived
  // ones (M and T only).
  TreeHeadOutput forward_tree(const ad::Tensor& features,
                              const RoutingMasks& masks) const {
    require_tree("forward_tree");
    if (!cfg_.has_masks()) {
      throw Error("forward_tree: variant " + std::string(to_string(cfg_.variant)) +
                  " takes no routing masks");
    }
    return tree_from_trunk(trunk_forward(features), &masks);
  }

  // Sigmoid gates from the batch-mean context vector of pre-decision
  // features: one [1,W] mask per route, broadcast over the batch.
  RoutingMasks compute_routing_masks(const ad::Tensor& trunk_features) const {
    if (!cfg_.has_masks()) {
      throw Error("compute_routing_masks: variant " +
                  std::string(to_string(cfg_.variant)) + " has no mask branch");
    }
    check_features(trunk_features, cfg_.trunk_width, "compute_routing_masks");
    ad::Tensor context = ad::batch_mean(trunk_features);
    return {ad::sigmoid(apply(mask_l_, context)),
            ad::sigmoid(apply(mask_r_, context))};
  }

  // Deterministic prediction path: (class probabilities [n,K], deltas [n,4]).
  std::pair<ad::Tensor, ad::Tensor> infer(const ad::Tensor& features) const {
    if (!cfg_.is_tree()) {
      auto [logits, deltas] = forward_single(features);
      return {ad::softmax(logits), deltas};
    }
    TreeHeadOutput out = forward_tree(features);
    return {ad::softmax(out.c), out.b};
  }

 private:
  struct Linear {
    ad::Tensor w, b;
  };

  Linear make_linear(int in, int out, Rng& rng, const std::string& name) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in));
    std::vector<double> wv(static_cast<std::size_t>(in) * out);
    for (auto& v : wv) v = rng.uniform(-limit, limit);
    Linear l{ad::Tensor({static_cast<std::size_t>(in), static_cast<std::size_t>(out)},
                        std::move(wv), /*requires_grad=*/true),
             ad::Tensor::zeros({static_cast<std::size_t>(out)}, /*requires_grad=*/true)};
    named_.emplace_back(name + ".w", l.w);
    named_.emplace_back(name + ".b", l.b);
    params_.push_back(l.w);
    params_.push_back(l.b);
    return l;
  }

  static ad::Tensor apply(const Linear& l, const ad::Tensor& x) {
    return ad::add(ad::matmul(x, l.w), l.b);
  }

  static void check_features(const ad::Tensor& f, int want_cols, const char* who) {
    if (f.rank() != 2 || f.extent(1) != static_cast<std::size_t>(want_cols)) {
      throw ShapeError(std::string(who) + ": expected [n," +
                       std::to_string(want_cols) + "] features, got " +
                       ad::shape_str(f.shape()));
    }
  }

  void require_tree(const char* who) const {
    if (!cfg_.is_tree()) {
      throw Error(std::string(who) + ": head variant is single");
    }
  }

  TreeHeadOutput tree_from_trunk(const ad::Tensor& h,
                                 const RoutingMasks* masks) const {
    ad::Tensor tc = cfg_.has_task_split() ? ad::relu(apply(task_cls_, h)) : h;
    ad::Tensor tb = cfg_.has_task_split() ? ad::relu(apply(task_bbox_, h)) : h;

    ad::Tensor in_cl = masks ? ad::broadcast_mul(tc, masks->left) : tc;
    ad::Tensor in_cr = masks ? ad::broadcast_mul(tc, masks->right) : tc;
    ad::Tensor in_bl = masks ? ad::broadcast_mul(tb, masks->left) : tb;
    ad::Tensor in_br = masks ? ad::broadcast_mul(tb, masks->right) : tb;

    TreeHeadOutput out;
    out.c_l = apply(node_cls_l_, in_cl);
    out.c_r = apply(node_cls_r_, in_cr);
    out.b_l = apply(node_bbox_l_, in_bl);
    out.b_r = apply(node_bbox_r_, in_br);

    // routing reads the unmasked trunk features
    ad::Tensor rfeat = h;
    for (const Linear& l : routing_) rfeat = ad::relu(apply(l, rfeat));
    ad::Tensor p = ad::softmax(apply(routing_cls_, rfeat));  // [n,2]
    ad::Tensor q = ad::softmax(apply(routing_bbox_, rfeat));
    out.p_l = ad::column(p, 0);
    out.p_r = ad::column(p, 1);
    out.q_l = ad::column(q, 0);
    out.q_r = ad::column(q, 1);

    out.c = ad::add(ad::broadcast_mul(out.c_l, out.p_l),
                    ad::broadcast_mul(out.c_r, out.p_r));
    out.b = ad::add(ad::broadcast_mul(out.b_l, out.q_l),
                    ad::broadcast_mul(out.b_r, out.q_r));
    return out;
  }

  HeadConfig cfg_;
  std::vector<Linear> trunk_;
  Linear cls_, bbox_;                    // single
  Linear node_cls_l_, node_cls_r_;       // tree
  Linear node_bbox_l_, node_bbox_r_;
  std::vector<Linear> routing_;
  Linear routing_cls_, routing_bbox_;
  Linear mask_l_, mask_r_;               // M, T
  Linear task_cls_, task_bbox_;          // T
  std::vector<std::pair<std::string, ad::Tensor>> named_;
  std::vector<ad::Tensor> params_;
};

// Forces the routing softmax toward (1, 0) for both tasks by zeroing the
// output weights and planting +/-30 logit biases. Useful for pinning a tree
// head to its left node; training nudges this by at most O(lr * wd * 30)
// per step, which keeps p_r below 1e-20 for any desk-scale run.
inline void pin_routing_left(Head& head) {
  for (const char* name : {"routing.cls.w", "routing.bbox.w"}) {
    auto& v = head.param(name).mutable_values();
    std::fill(v.begin(), v.end(), 0.0);
  }
  for (const char* name : {"routing.cls.b", "routing.bbox.b"}) {
    auto& v = head.param(name).mutable_values();
    v[0] = 30.0;
    v[1] = -30.0;
  }
}

}  // namespace rdr::heads

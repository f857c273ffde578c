#pragma once

// Named gradient-check catalog covering every differentiable primitive and
// every loss composition. Each case draws fresh random inputs per trial,
// scalarizes through a frozen random projection and compares tape gradients
// against central differences coordinate by coordinate.
//
// Inputs are kept away from the kinks of relu, clamp_min, smooth-L1 and the
// box min/max composites; at a kink the two-sided numeric derivative is not
// the subgradient the tape reports, so a check there would only measure the
// resampling policy, not the backward closures.

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rdr/gradcheck.hpp"
#include "rdr/losses.hpp"
#include "rdr/rng.hpp"
#include "rdr/taskgen.hpp"
#include "rdr/tensor.hpp"

namespace rdr::gradcheck {

struct SuiteReport {
  std::vector<ad::GradCheckResult> results;
  double worst = 0.0;
  bool all_pass = true;
};

namespace detail {

inline std::vector<double> draw(Rng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Uniform in [lo, hi] with |x| >= margin, for inputs feeding relu-like ops.
inline std::vector<double> draw_off_zero(Rng& rng, std::size_t n, double lo,
                                         double hi, double margin) {
  std::vector<double> v(n);
  for (double& x : v) {
    do {
      x = rng.uniform(lo, hi);
    } while (std::abs(x) < margin);
  }
  return v;
}

inline ad::Tensor projection(Rng& rng, const ad::Shape& shape) {
  return ad::Tensor(shape, draw(rng, ad::shape_numel(shape), -1.0, 1.0));
}

inline ad::Tensor project(const ad::Tensor& t, const ad::Tensor& proj) {
  return ad::sum(ad::mul(t, proj));
}

using TrialFactory =
    std::function<std::pair<ad::ScalarFn, std::vector<ad::Tensor>>(Rng&)>;

inline void run_case(SuiteReport& rep, const std::string& name,
                     std::size_t trials, double tol, Rng& rng,
                     const TrialFactory& make) {
  ad::GradCheckResult r;
  r.name = name;
  for (std::size_t t = 0; t < trials; ++t) {
    auto [fn, inputs] = make(rng);
    r.max_rel_err =
        std::max(r.max_rel_err, ad::max_grad_discrepancy(fn, std::move(inputs)));
  }
  r.pass = r.max_rel_err <= tol;
  rep.results.push_back(r);
  rep.worst = std::max(rep.worst, r.max_rel_err);
  rep.all_pass = rep.all_pass && r.pass;
}

}  // namespace detail

inline SuiteReport run_suite(std::uint64_t seed, std::size_t trials,
                             double tol = 1e-4) {
  namespace d = detail;
  namespace lo = losses;
  SuiteReport rep;
  Rng rng(seed);
  const std::size_t n = 3, k = 4;

  auto unary_case = [&](const std::string& name, double in_lo, double in_hi,
                        auto op) {
    d::run_case(rep, name, trials, tol, rng, [=](Rng& r) {
      const ad::Tensor x({n, k}, d::draw(r, n * k, in_lo, in_hi));
      const ad::Tensor proj = d::projection(r, {n, k});
      ad::ScalarFn fn = [op, proj](const std::vector<ad::Tensor>& in) {
        return d::project(op(in[0]), proj);
      };
      return std::make_pair(fn, std::vector<ad::Tensor>{x});
    });
  };

  d::run_case(rep, "matmul", trials, tol, rng, [=](Rng& r) {
    const ad::Tensor a({n, k}, d::draw(r, n * k, -2.0, 2.0));
    const ad::Tensor b({k, 2}, d::draw(r, k * 2, -2.0, 2.0));
    const ad::Tensor proj = d::projection(r, {n, 2});
    ad::ScalarFn fn = [proj](const std::vector<ad::Tensor>& in) {
      return d::project(ad::matmul(in[0], in[1]), proj);
    };
    return std::make_pair(fn, std::vector<ad::Tensor>{a, b});
  });

  auto binary_broadcast_case = [&](const std::string& name, ad::Shape rhs_shape,
                                   bool subtract) {
    d::run_case(rep, name, trials, tol, rng, [=](Rng& r) {
      const ad::Tensor a({n, k}, d::draw(r, n * k, -2.0, 2.0));
      const ad::Tensor b(rhs_shape,
                         d::draw(r, ad::shape_numel(rhs_shape), -2.0, 2.0));
      const ad::Tensor proj = d::projection(r, {n, k});
      ad::ScalarFn fn = [proj, subtract](const std::vector<ad::Tensor>& in) {
        return d::project(subtract ? ad::sub(in[0], in[1]) : ad::add(in[0], in[1]),
                          proj);
      };
      return std::make_pair(fn, std::vector<ad::Tensor>{a, b});
    });
  };
  binary_broadcast_case("add", {n, k}, false);
  binary_broadcast_case("add_row_broadcast", {k}, false);
  binary_broadcast_case("add_col_broadcast", {n, 1}, false);
  binary_broadcast_case("sub", {n, k}, true);
  binary_broadcast_case("sub_row_broadcast", {k}, true);

  d::run_case(rep, "mul", trials, tol, rng, [=](Rng& r) {
    const ad::Tensor a({n, k}, d::draw(r, n * k, -2.0, 2.0));
    const ad::Tensor b({n, k}, d::draw(r, n * k, -2.0, 2.0));
    const ad::Tensor proj = d::projection(r, {n, k});
    ad::ScalarFn fn = [proj](const std::vector<ad::Tensor>& in) {
      return d::project(ad::mul(in[0], in[1]), proj);
    };
    return std::make_pair(fn, std::vector<ad::Tensor>{a, b});
  });

  d::run_case(rep, "scalar_mul", trials, tol, rng, [=](Rng& r) {
    const ad::Tensor a({n, k}, d::draw(r, n * k, -2.0, 2.0));
    const double c = r.uniform(-3.0, 3.0);
    const ad::Tensor proj = d::projection(r, {n, k});
    ad::ScalarFn fn = [proj, c](const std::vector<ad::Tensor>& in) {
      return d::project(ad::scalar_mul(in[0], c), proj);
    };
    return std::make_pair(fn, std::vector<ad::Tensor>{a});
  });

  d::run_case(rep, "relu", trials, tol, rng, [=](Rng& r) {
    const ad::Tensor x({n, k}, d::draw_off_zero(r, n * k, -2.0, 2.0, 0.05));
    const ad::Tensor proj = d::projection(r, {n, k});
    ad::ScalarFn fn = [proj](const std::vector<ad::Tensor>& in) {
      return d::project(ad::relu(in[0]), proj);
    };
    return std::make_pair(fn, std::vector<ad::Tensor>{x});
  });

  d::run_case(rep, "clamp_min", trials, tol, rng, [=](Rng& r) {
    const double floor = r.uniform(-0.5, 0.5);
    std::vector<double> v(n * k);
    for (double& x : v) {
      do {
        x = r.uniform(floor - 2.0, floor + 2.0);
      } while (std::abs(x - floor) < 0.05);
    }
    const ad::Tensor x({n, k}, std::move(v));
    const ad::Tensor proj = d::projection(r, {n, k});
    ad::ScalarFn fn = [proj, floor](const std::vector<ad::Tensor>& in) {
      return d::project(ad::clamp_min(in[0], floor), proj);
    };
    return std::make_pair(fn, std::vector<ad::Tensor>{x});
  });

  unary_case("sigmoid", -4.0, 4.0,
             [](const ad::Tensor& t) { return ad::sigmoid(t); });
  unary_case("softmax", -3.0, 3.0,
             [](const ad::Tensor& t) { return ad::softmax(t); });
  unary_case("exp", -2.0, 2.0, [](const ad::Tensor& t) { return ad::exp(t); });
  unary_case("log", 0.1, 3.0, [](const ad::Tensor& t) { return ad::log(t); });

  d::run_case(rep, "mean", trials, tol, rng, [=](Rng& r) {
    const ad::Tensor x({n, k}, d::draw(r, n * k, -2.0, 2.0));
    ad::ScalarFn fn = [](const std::vector<ad::Tensor>& in) {
      return ad::mean(in[0]);
    };
    return std::make_pair(fn, std::vector<ad::Tensor>{x});
  });

  d::run_case(rep, "sum", trials, tol, rng, [=](Rng& r) {
    const ad::Tensor x({n, k}, d::draw(r, n * k, -2.0, 2.0));
    ad::ScalarFn fn = [](const std::vector<ad::Tensor>& in) {
      return ad::sum(in[0]);
    };
    return std::make_pair(fn, std::vector<ad::Tensor>{x});
  });

  d::run_case(rep, "row_sum", trials, tol, rng, [=](Rng& r) {
    const ad::Tensor x({n, k}, d::draw(r, n * k, -2.0, 2.0));
    const ad::Tensor proj = d::projection(r, {n, 1});
    ad::ScalarFn fn = [proj](const std::vector<ad::Tensor>& in) {
      return d::project(ad::row_sum(in[0]), proj);
    };
    return std::make_pair(fn, std::vector<ad::Tensor>{x});
  });

  d::run_case(rep, "batch_mean", trials, tol, rng, [=](Rng& r) {
    const ad::Tensor x({n, k}, d::draw(r, n * k, -2.0, 2.0));
    const ad::Tensor proj = d::projection(r, {1, k});
    ad::ScalarFn fn = [proj](const std::vector<ad::Tensor>& in) {
      return d::project(ad::batch_mean(in[0]), proj);
    };
    return std::make_pair(fn, std::vector<ad::Tensor>{x});
  });

  d::run_case(rep, "concat", trials, tol, rng, [=](Rng& r) {
    const ad::Tensor a({n, k}, d::draw(r, n * k, -2.0, 2.0));
    const ad::Tensor b({n, 2}, d::draw(r, n * 2, -2.0, 2.0));
    const ad::Tensor proj = d::projection(r, {n, k + 2});
    ad::ScalarFn fn = [proj](const std::vector<ad::Tensor>& in) {
      return d::project(ad::concat(in[0], in[1]), proj);
    };
    return std::make_pair(fn, std::vector<ad::Tensor>{a, b});
  });

  auto bmul_case = [&](const std::string& name, ad::Shape rhs_shape) {
    d::run_case(rep, name, trials, tol, rng, [=](Rng& r) {
      const ad::Tensor a({n, k}, d::draw(r, n * k, -2.0, 2.0));
      const ad::Tensor b(rhs_shape,
                         d::draw(r, ad::shape_numel(rhs_shape), -2.0, 2.0));
      const ad::Tensor proj = d::projection(r, {n, k});
      ad::ScalarFn fn = [proj](const std::vector<ad::Tensor>& in) {
        return d::project(ad::broadcast_mul(in[0], in[1]), proj);
      };
      return std::make_pair(fn, std::vector<ad::Tensor>{a, b});
    });
  };
  bmul_case("broadcast_mul_row", {1, k});
  bmul_case("broadcast_mul_col", {n, 1});

  // ---- losses ----

  auto random_labels = [](Rng& r, std::size_t count, std::size_t classes) {
    std::vector<int> y(count);
    for (int& v : y) {
      v = static_cast<int>(r.next_u64() % static_cast<std::uint64_t>(classes));
    }
    return y;
  };

  d::run_case(rep, "cross_entropy", trials, tol, rng, [=](Rng& r) {
    const ad::Tensor logits({n, k}, d::draw(r, n * k, -2.5, 2.5));
    const std::vector<int> y = random_labels(r, n, k);
    ad::ScalarFn fn = [y](const std::vector<ad::Tensor>& in) {
      return ad::mean(lo::cross_entropy(in[0], y));
    };
    return std::make_pair(fn, std::vector<ad::Tensor>{logits});
  });

  d::run_case(rep, "focal", trials, tol, rng, [=](Rng& r) {
    const ad::Tensor logits({n, k}, d::draw(r, n * k, -2.5, 2.5));
    const std::vector<int> y = random_labels(r, n, k);
    const double gamma = r.uniform(0.5, 3.0);
    ad::ScalarFn fn = [y, gamma](const std::vector<ad::Tensor>& in) {
      return ad::mean(lo::focal(in[0], y, gamma, 0.25));
    };
    return std::make_pair(fn, std::vector<ad::Tensor>{logits});
  });

  d::run_case(rep, "smooth_l1", trials, tol, rng, [=](Rng& r) {
    // residual magnitudes away from both 0 and beta
    std::vector<double> pv(n * 4);
    for (double& x : pv) {
      do {
        x = r.uniform(-2.0, 2.0);
      } while (std::abs(x) < 0.03 || std::abs(std::abs(x) - 1.0) < 0.03);
    }
    const ad::Tensor pred({n, 4}, std::move(pv));
    const ad::Tensor target({n, 4}, std::vector<double>(n * 4, 0.0));
    ad::ScalarFn fn = [target](const std::vector<ad::Tensor>& in) {
      return ad::mean(lo::smooth_l1(in[0], target, 1.0));
    };
    return std::make_pair(fn, std::vector<ad::Tensor>{pred});
  });

  d::run_case(rep, "iou_loss", trials, tol, rng, [=](Rng& r) {
    std::vector<taskgen::Box> props;
    std::vector<double> pv, tv;
    for (std::size_t i = 0; i < n; ++i) {
      const double x1 = r.uniform(0.0, 40.0), y1 = r.uniform(0.0, 40.0);
      props.push_back(
          {x1, y1, x1 + r.uniform(8.0, 20.0), y1 + r.uniform(8.0, 20.0)});
      // Distinct small offsets keep the boxes overlapped and the paired
      // corner coordinates separated, away from the min/max kinks.
      for (std::size_t j = 0; j < 4; ++j) {
        double a, b;
        do {
          a = r.uniform(-0.12, 0.12);
          b = r.uniform(-0.12, 0.12);
        } while (std::abs(a - b) < 0.02);
        pv.push_back(a);
        tv.push_back(b);
      }
    }
    const ad::Tensor pred({n, 4}, std::move(pv));
    const ad::Tensor target({n, 4}, std::move(tv));
    ad::ScalarFn fn = [target, props](const std::vector<ad::Tensor>& in) {
      return ad::mean(lo::iou_loss(in[0], target, props, 1e-6));
    };
    return std::make_pair(fn, std::vector<ad::Tensor>{pred});
  });

  d::run_case(rep, "selective", trials, tol, rng, [=](Rng& r) {
    const std::vector<double> gl = d::draw(r, n, 0.9, 1.1);
    const std::vector<double> gr = d::draw(r, n, 0.1, 0.3);
    const ad::Tensor ll({n, 1}, d::draw(r, n, 0.05, 2.0));
    const ad::Tensor lr({n, 1}, d::draw(r, n, 0.05, 2.0));
    ad::ScalarFn fn = [gl, gr](const std::vector<ad::Tensor>& in) {
      return lo::selective_cls(in[0], in[1], gl, gr);
    };
    return std::make_pair(fn, std::vector<ad::Tensor>{ll, lr});
  });

  d::run_case(rep, "associative_cls", trials, tol, rng, [=](Rng& r) {
    const ad::Tensor c_l({n, k}, d::draw(r, n * k, -1.5, 1.5));
    const ad::Tensor c_r({n, k}, d::draw(r, n * k, -1.5, 1.5));
    const ad::Tensor route({n, 2}, d::draw(r, n * 2, -1.0, 1.0));
    const std::vector<int> y = random_labels(r, n, k);
    ad::ScalarFn fn = [y](const std::vector<ad::Tensor>& in) {
      const ad::Tensor p = ad::softmax(in[2]);
      return lo::associative_cls(in[0], in[1], ad::column(p, 0),
                                 ad::column(p, 1), y, {});
    };
    return std::make_pair(fn, std::vector<ad::Tensor>{c_l, c_r, route});
  });

  d::run_case(rep, "associative_bbox", trials, tol, rng, [=](Rng& r) {
    std::vector<taskgen::Box> props;
    for (std::size_t i = 0; i < n; ++i) {
      const double x1 = r.uniform(0.0, 40.0), y1 = r.uniform(0.0, 40.0);
      props.push_back(
          {x1, y1, x1 + r.uniform(8.0, 20.0), y1 + r.uniform(8.0, 20.0)});
    }
    const ad::Tensor b_l({n, 4}, d::draw_off_zero(r, n * 4, -0.4, 0.4, 0.02));
    const ad::Tensor b_r({n, 4}, d::draw_off_zero(r, n * 4, -0.4, 0.4, 0.02));
    const ad::Tensor route({n, 2}, d::draw(r, n * 2, -1.0, 1.0));
    const ad::Tensor target({n, 4}, d::draw_off_zero(r, n * 4, -0.4, 0.4, 0.02));
    ad::ScalarFn fn = [target, props](const std::vector<ad::Tensor>& in) {
      const ad::Tensor q = ad::softmax(in[2]);
      return lo::associative_bbox(in[0], in[1], ad::column(q, 0),
                                  ad::column(q, 1), target, props, {});
    };
    return std::make_pair(fn, std::vector<ad::Tensor>{b_l, b_r, route});
  });

  d::run_case(rep, "total_blend", trials, tol, rng, [=](Rng& r) {
    const std::vector<int> y = random_labels(r, n, 3);
    std::vector<taskgen::Box> props;
    for (std::size_t i = 0; i < n; ++i) {
      const double x1 = r.uniform(0.0, 40.0), y1 = r.uniform(0.0, 40.0);
      props.push_back(
          {x1, y1, x1 + r.uniform(8.0, 20.0), y1 + r.uniform(8.0, 20.0)});
    }
    const std::vector<double> gcl = d::draw(r, n, 0.9, 1.1);
    const std::vector<double> gcr = d::draw(r, n, 0.1, 0.3);
    const std::vector<double> gbl = d::draw(r, n, 0.1, 0.3);
    const std::vector<double> gbr = d::draw(r, n, 0.9, 1.1);
    const double lambda = r.uniform(0.05, 0.95);
    const ad::Tensor target({n, 4}, d::draw_off_zero(r, n * 4, -0.3, 0.3, 0.02));
    const ad::Tensor c_l({n, 3}, d::draw(r, n * 3, -1.0, 1.0));
    const ad::Tensor c_r({n, 3}, d::draw(r, n * 3, -1.0, 1.0));
    const ad::Tensor b_l({n, 4}, d::draw_off_zero(r, n * 4, -0.3, 0.3, 0.02));
    const ad::Tensor b_r({n, 4}, d::draw_off_zero(r, n * 4, -0.3, 0.3, 0.02));
    const ad::Tensor route({n, 4}, d::draw(r, n * 4, -0.8, 0.8));

    ad::ScalarFn fn = [=](const std::vector<ad::Tensor>& in) {
      const lo::LossConfig cfg;
      const ad::Tensor pc =
          ad::softmax(ad::concat(ad::column(in[4], 0), ad::column(in[4], 1)));
      const ad::Tensor pb =
          ad::softmax(ad::concat(ad::column(in[4], 2), ad::column(in[4], 3)));
      const ad::Tensor sc = lo::selective_cls(lo::cross_entropy(in[0], y),
                                              lo::cross_entropy(in[1], y), gcl,
                                              gcr);
      const ad::Tensor sb = lo::selective_bbox(lo::smooth_l1(in[2], target, 1.0),
                                               lo::smooth_l1(in[3], target, 1.0),
                                               gbl, gbr);
      const ad::Tensor ac = lo::associative_cls(
          in[0], in[1], ad::column(pc, 0), ad::column(pc, 1), y, cfg);
      const ad::Tensor ab =
          lo::associative_bbox(in[2], in[3], ad::column(pb, 0), ad::column(pb, 1),
                               target, props, cfg);
      return lo::total_loss(sc, sb, ac, ab, lambda);
    };
    return std::make_pair(fn, std::vector<ad::Tensor>{c_l, c_r, b_l, b_r, route});
  });

  return rep;
}

}  // namespace rdr::gradcheck

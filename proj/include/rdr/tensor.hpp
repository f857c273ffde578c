#pragma once

// Reverse-mode automatic differentiation on dense 64-bit float tensors.
//
// Ops execute eagerly and, while a Tape is active and some input requires
// gradient, append a record with a backward closure. Tape::backward replays
// the records in reverse from a scalar root, accumulating gradients
// additively so a tensor used k times receives the sum of its k path
// contributions. Without an active tape the same calls are plain numeric
// kernels, which is how inference runs.

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "rdr/errors.hpp"

namespace rdr::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

class Tape;

namespace detail {

struct TensorData {
  Shape shape;
  std::shared_ptr<std::vector<double>> values;
  std::vector<double> grad;
  std::uint64_t grad_pass = 0;  // backward pass that last zeroed `grad`
  bool requires_grad = false;
  Tape* tape = nullptr;  // tape that produced this tensor, if any
  std::uint64_t tape_epoch = 0;

  std::size_t numel() const { return shape_numel(shape); }
};

inline std::atomic<std::uint64_t>& backward_pass_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

}  // namespace detail

class Tensor {
 public:
  Tensor() : d_(std::make_shared<detail::TensorData>()) {
    d_->values = std::make_shared<std::vector<double>>();
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : d_(std::make_shared<detail::TensorData>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) +
                       " does not hold " + std::to_string(values.size()) +
                       " values");
    }
    d_->shape = std::move(shape);
    d_->values = std::make_shared<std::vector<double>>(std::move(values));
    d_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{1}, {v}, requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape), 0.0);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t extent(std::size_t axis) const { return d_->shape.at(axis); }
  std::size_t numel() const { return d_->numel(); }

  const std::vector<double>& values() const { return *d_->values; }
  // In-place access for optimizers and test fixtures. Detached views share
  // this storage, so writes are visible through them as well.
  std::vector<double>& mutable_values() { return *d_->values; }

  double value(std::size_t i) const { return (*d_->values)[i]; }

  double at(std::size_t r, std::size_t c) const {
    if (rank() != 2) throw ShapeError("tensor: at(r,c) needs rank 2, got " + shape_str(shape()));
    return (*d_->values)[r * d_->shape[1] + c];
  }

  double scalar_value() const {
    if (numel() != 1) {
      throw ShapeError("tensor: scalar_value on shape " + shape_str(shape()));
    }
    return (*d_->values)[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool rg) { d_->requires_grad = rg; }

  bool has_grad() const { return d_->grad.size() == numel() && numel() > 0; }

  const std::vector<double>& grad() const {
    if (!has_grad()) {
      throw Error("tensor: no gradient has been computed for this tensor");
    }
    return d_->grad;
  }

  // Same values (shared storage), no gradient flow, not attached to any tape.
  Tensor detach() const {
    Tensor t;
    t.d_->shape = d_->shape;
    t.d_->values = d_->values;
    return t;
  }

  const std::shared_ptr<detail::TensorData>& data() const { return d_; }

 private:
  std::shared_ptr<detail::TensorData> d_;
};

inline Tensor detach(const Tensor& t) { return t.detach(); }

class Tape {
 public:
  struct Record {
    const char* op;
    std::vector<std::shared_ptr<detail::TensorData>> inputs;
    std::shared_ptr<detail::TensorData> output;
    // Receives the output gradient; accumulates into input grads.
    std::function<void(const std::vector<double>&)> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // RAII activation. Ops record onto the innermost active tape.
  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(active_slot()) { active_slot() = &t; }
    ~Scope() { active_slot() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* active() { return active_slot(); }

  void record(Record r) { records_.push_back(std::move(r)); }

  std::size_t size() const { return records_.size(); }
  std::uint64_t epoch() const { return epoch_; }

  // Drops all records; tensors produced under the old epoch can no longer
  // act as backward roots.
  void clear() {
    records_.clear();
    ++epoch_;
  }

  // Reverse replay from a scalar root produced under this tape. Gradients
  // of every tensor involved are zeroed first, then accumulated. Returns a
  // pass id that identifies the gradients written by this call.
  std::uint64_t backward(const Tensor& root) {
    const auto& rd = root.data();
    if (rd->numel() != 1) {
      throw ShapeError("backward: root must be a scalar, got shape " +
                       shape_str(rd->shape));
    }
    if (rd->tape != this || rd->tape_epoch != epoch_) {
      throw Error("backward: root was not produced under this tape");
    }
    const std::uint64_t pass = ++detail::backward_pass_counter();
    auto prepare = [pass](const std::shared_ptr<detail::TensorData>& t) {
      if (t->grad_pass != pass) {
        t->grad.assign(t->numel(), 0.0);
        t->grad_pass = pass;
      }
    };
    for (const auto& rec : records_) {
      for (const auto& in : rec.inputs) {
        if (in->requires_grad) prepare(in);
      }
      prepare(rec.output);
    }
    prepare(rd);
    rd->grad[0] = 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      it->backward(it->output->grad);
    }
    return pass;
  }

 private:
  static Tape*& active_slot() {
    thread_local Tape* active = nullptr;
    return active;
  }

  std::vector<Record> records_;
  std::uint64_t epoch_ = 1;
};

namespace detail {

// Builds the op output and, when a tape is active and some input requires
// gradient, records the backward closure. Closures must themselves skip
// inputs whose requires_grad is false: those never get grad buffers.
inline Tensor make_op(const char* op, Shape out_shape,
                      std::vector<double> out_values,
                      std::vector<Tensor> inputs,
                      std::function<void(const std::vector<double>&)> backward) {
  bool needs_grad = false;
  for (const auto& t : inputs) needs_grad = needs_grad || t.requires_grad();
  Tape* tape = Tape::active();
  const bool recording = needs_grad && tape != nullptr;
  Tensor out(std::move(out_shape), std::move(out_values), recording);
  if (recording) {
    out.data()->tape = tape;
    out.data()->tape_epoch = tape->epoch();
    Tape::Record rec;
    rec.op = op;
    rec.inputs.reserve(inputs.size());
    for (const auto& t : inputs) rec.inputs.push_back(t.data());
    rec.output = out.data();
    rec.backward = std::move(backward);
    tape->record(std::move(rec));
  }
  return out;
}

enum class Bcast { kNone, kRow, kCol };

// Elementwise binary shape rule: identical shapes, or a rank-2 lhs with a
// row vector rhs ([cols] or [1,cols]) or a column rhs ([rows,1]).
inline Bcast bcast_mode(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return Bcast::kNone;
  if (a.size() == 2) {
    if ((b.size() == 1 && b[0] == a[1]) ||
        (b.size() == 2 && b[0] == 1 && b[1] == a[1])) {
      return Bcast::kRow;
    }
    if (b.size() == 2 && b[1] == 1 && b[0] == a[0]) return Bcast::kCol;
  }
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) +
                   " and " + shape_str(b));
}

inline std::pair<std::size_t, std::size_t> rows_cols(const Shape& s) {
  if (s.size() == 2) return {s[0], s[1]};
  return {1, shape_numel(s)};
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t t = 0; t < k; ++t) {
      const double ait = av[i * k + t];
      const double* brow = bv.data() + t * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += ait * brow[j];
    }
  }
  auto ad_ = a.data();
  auto bd_ = b.data();
  return detail::make_op(
      "matmul", {m, n}, std::move(out), {a, b},
      [ad_, bd_, m, k, n](const std::vector<double>& g) {
        if (ad_->requires_grad) {
          const auto& bv = *bd_->values;
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t t = 0; t < k; ++t) {
              double s = 0.0;
              const double* grow = g.data() + i * n;
              const double* brow = bv.data() + t * n;
              for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
              ad_->grad[i * k + t] += s;
            }
          }
        }
        if (bd_->requires_grad) {
          const auto& av = *ad_->values;
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t t = 0; t < k; ++t) {
              const double ait = av[i * k + t];
              const double* grow = g.data() + i * n;
              double* brow = bd_->grad.data() + t * n;
              for (std::size_t j = 0; j < n; ++j) brow[j] += ait * grow[j];
            }
          }
        }
      });
}

namespace detail {

template <bool kSub>
inline Tensor add_like(const char* op, const Tensor& a, const Tensor& b) {
  const Bcast mode = bcast_mode(op, a.shape(), b.shape());
  const auto [rows, cols] = rows_cols(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  const double sign = kSub ? -1.0 : 1.0;
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      const std::size_t bi = mode == Bcast::kNone ? i * cols + j
                             : mode == Bcast::kRow ? j
                                                   : i;
      out[i * cols + j] = av[i * cols + j] + sign * bv[bi];
    }
  }
  auto ad_ = a.data();
  auto bd_ = b.data();
  return make_op(op, a.shape(), std::move(out), {a, b},
                 [ad_, bd_, mode, rows = rows, cols = cols,
                  sign](const std::vector<double>& g) {
                   if (ad_->requires_grad) {
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       ad_->grad[i] += g[i];
                     }
                   }
                   if (bd_->requires_grad) {
                     for (std::size_t i = 0; i < rows; ++i) {
                       for (std::size_t j = 0; j < cols; ++j) {
                         const std::size_t bi = mode == Bcast::kNone
                                                    ? i * cols + j
                                                : mode == Bcast::kRow ? j
                                                                      : i;
                         bd_->grad[bi] += sign * g[i * cols + j];
                       }
                     }
                   }
                 });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::add_like<false>("add", a, b);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::add_like<true>("sub", a, b);
}

// Elementwise product of same-shape tensors. Broadcasting variants live in
// broadcast_mul.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  auto ad_ = a.data();
  auto bd_ = b.data();
  return detail::make_op("mul", a.shape(), std::move(out), {a, b},
                         [ad_, bd_](const std::vector<double>& g) {
                           if (ad_->requires_grad) {
                             const auto& bv = *bd_->values;
                             for (std::size_t i = 0; i < g.size(); ++i) {
                               ad_->grad[i] += g[i] * bv[i];
                             }
                           }
                           if (bd_->requires_grad) {
                             const auto& av = *ad_->values;
                             for (std::size_t i = 0; i < g.size(); ++i) {
                               bd_->grad[i] += g[i] * av[i];
                             }
                           }
                         });
}

// Rowwise mode: a is [n,d], b is [d] or [1,d], out[i,j] = a[i,j]*b[j].
// Columnwise mode: a is [n,d], b is [n,1], out[i,j] = a[i,j]*b[i].
inline Tensor broadcast_mul(const Tensor& a, const Tensor& b) {
  const detail::Bcast mode = detail::bcast_mode("broadcast_mul", a.shape(), b.shape());
  const auto [rows, cols] = detail::rows_cols(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      const std::size_t bi = mode == detail::Bcast::kNone ? i * cols + j
                             : mode == detail::Bcast::kRow ? j
                                                           : i;
      out[i * cols + j] = av[i * cols + j] * bv[bi];
    }
  }
  auto ad_ = a.data();
  auto bd_ = b.data();
  return detail::make_op(
      "broadcast_mul", a.shape(), std::move(out), {a, b},
      [ad_, bd_, mode, rows = rows, cols = cols](const std::vector<double>& g) {
        const auto& av = *ad_->values;
        const auto& bv = *bd_->values;
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < cols; ++j) {
            const std::size_t bi = mode == detail::Bcast::kNone ? i * cols + j
                                   : mode == detail::Bcast::kRow ? j
                                                                 : i;
            if (ad_->requires_grad) ad_->grad[i * cols + j] += g[i * cols + j] * bv[bi];
            if (bd_->requires_grad) bd_->grad[bi] += g[i * cols + j] * av[i * cols + j];
          }
        }
      });
}

inline Tensor scalar_mul(const Tensor& a, double c) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = c * av[i];
  auto ad_ = a.data();
  return detail::make_op("scalar_mul", a.shape(), std::move(out), {a},
                         [ad_, c](const std::vector<double>& g) {
                           if (!ad_->requires_grad) return;
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             ad_->grad[i] += c * g[i];
                           }
                         });
}

inline Tensor relu(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  auto ad_ = a.data();
  return detail::make_op("relu", a.shape(), std::move(out), {a},
                         [ad_](const std::vector<double>& g) {
                           if (!ad_->requires_grad) return;
                           const auto& av = *ad_->values;
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             if (av[i] > 0.0) ad_->grad[i] += g[i];
                           }
                         });
}

// Elementwise max(a, floor). Gradient passes only where a > floor.
inline Tensor clamp_min(const Tensor& a, double floor) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > floor ? av[i] : floor;
  auto ad_ = a.data();
  return detail::make_op("clamp_min", a.shape(), std::move(out), {a},
                         [ad_, floor](const std::vector<double>& g) {
                           if (!ad_->requires_grad) return;
                           const auto& av = *ad_->values;
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             if (av[i] > floor) ad_->grad[i] += g[i];
                           }
                         });
}

inline Tensor sigmoid(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double x = av[i];
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                      : std::exp(x) / (1.0 + std::exp(x));
  }
  auto ad_ = a.data();
  std::vector<double> y = out;
  return detail::make_op("sigmoid", a.shape(), std::move(out), {a},
                         [ad_, y = std::move(y)](const std::vector<double>& g) {
                           if (!ad_->requires_grad) return;
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             ad_->grad[i] += g[i] * y[i] * (1.0 - y[i]);
                           }
                         });
}

inline Tensor exp(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::exp(av[i]);
  auto ad_ = a.data();
  std::vector<double> y = out;
  return detail::make_op("exp", a.shape(), std::move(out), {a},
                         [ad_, y = std::move(y)](const std::vector<double>& g) {
                           if (!ad_->requires_grad) return;
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             ad_->grad[i] += g[i] * y[i];
                           }
                         });
}

inline Tensor log(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::log(av[i]);
  auto ad_ = a.data();
  return detail::make_op("log", a.shape(), std::move(out), {a},
                         [ad_](const std::vector<double>& g) {
                           if (!ad_->requires_grad) return;
                           const auto& av = *ad_->values;
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             ad_->grad[i] += g[i] / av[i];
                           }
                         });
}

// Softmax over the last axis, stabilized by subtracting the row max.
inline Tensor softmax(const Tensor& a) {
  if (a.rank() < 1 || a.rank() > 2) {
    throw ShapeError("softmax: expected rank 1 or 2, got " + shape_str(a.shape()));
  }
  const std::size_t k = a.shape().back();
  if (k == 0) {
    throw ShapeError("softmax: empty normalization axis in shape " + shape_str(a.shape()));
  }
  const std::size_t rows = a.numel() / k;
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = av.data() + i * k;
    double m = row[0];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      out[i * k + j] = std::exp(row[j] - m);
      s += out[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] /= s;
  }
  auto ad_ = a.data();
  std::vector<double> p = out;
  return detail::make_op(
      "softmax", a.shape(), std::move(out), {a},
      [ad_, p = std::move(p), rows, k](const std::vector<double>& g) {
        if (!ad_->requires_grad) return;
        for (std::size_t i = 0; i < rows; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < k; ++j) dot += g[i * k + j] * p[i * k + j];
          for (std::size_t j = 0; j < k; ++j) {
            ad_->grad[i * k + j] += p[i * k + j] * (g[i * k + j] - dot);
          }
        }
      });
}

// Mean over all elements. The empty mean is defined as 0 so that
// reductions over an empty foreground subset contribute nothing.
inline Tensor mean(const Tensor& a) {
  const std::size_t n = a.numel();
  double s = 0.0;
  for (double v : a.values()) s += v;
  const double m = n > 0 ? s / static_cast<double>(n) : 0.0;
  auto ad_ = a.data();
  return detail::make_op("mean", {1}, {m}, {a},
                         [ad_, n](const std::vector<double>& g) {
                           if (!ad_->requires_grad || n == 0) return;
                           const double gi = g[0] / static_cast<double>(n);
                           for (std::size_t i = 0; i < n; ++i) ad_->grad[i] += gi;
                         });
}

// Per-column mean over rows: [n,d] -> [1,d]. Rejects an empty batch.
inline Tensor batch_mean(const Tensor& a) {
  if (a.rank() != 2) {
    throw ShapeError("batch_mean: expected rank 2, got " + shape_str(a.shape()));
  }
  const std::size_t n = a.extent(0), d = a.extent(1);
  if (n == 0) throw ShapeError("batch_mean: empty batch in shape " + shape_str(a.shape()));
  const auto& av = a.values();
  std::vector<double> out(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) out[j] += av[i * d + j];
  }
  for (std::size_t j = 0; j < d; ++j) out[j] /= static_cast<double>(n);
  auto ad_ = a.data();
  return detail::make_op("mean", {1, d}, std::move(out), {a},
                         [ad_, n, d](const std::vector<double>& g) {
                           if (!ad_->requires_grad) return;
                           for (std::size_t i = 0; i < n; ++i) {
                             for (std::size_t j = 0; j < d; ++j) {
                               ad_->grad[i * d + j] += g[j] / static_cast<double>(n);
                             }
                           }
                         });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  auto ad_ = a.data();
  const std::size_t n = a.numel();
  return detail::make_op("sum", {1}, {s}, {a},
                         [ad_, n](const std::vector<double>& g) {
                           if (!ad_->requires_grad) return;
                           for (std::size_t i = 0; i < n; ++i) ad_->grad[i] += g[0];
                         });
}

// Sum over the last axis: [n,k] -> [n,1].
inline Tensor row_sum(const Tensor& a) {
  if (a.rank() != 2) {
    throw ShapeError("row_sum: expected rank 2, got " + shape_str(a.shape()));
  }
  const std::size_t n = a.extent(0), k = a.extent(1);
  const auto& av = a.values();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) out[i] += av[i * k + j];
  }
  auto ad_ = a.data();
  return detail::make_op("sum", {n, 1}, std::move(out), {a},
                         [ad_, n, k](const std::vector<double>& g) {
                           if (!ad_->requires_grad) return;
                           for (std::size_t i = 0; i < n; ++i) {
                             for (std::size_t j = 0; j < k; ++j) {
                               ad_->grad[i * k + j] += g[i];
                             }
                           }
                         });
}

// Concatenation along the last axis. All parts must share rank and, for
// rank 2, the leading extent.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t rk = parts[0].rank();
  if (rk < 1 || rk > 2) {
    throw ShapeError("concat: expected rank 1 or 2, got " + shape_str(parts[0].shape()));
  }
  const std::size_t rows = rk == 2 ? parts[0].extent(0) : 1;
  std::size_t total_cols = 0;
  for (const auto& p : parts) {
    if (p.rank() != rk || (rk == 2 && p.extent(0) != rows)) {
      throw ShapeError("concat: incompatible shapes " + shape_str(parts[0].shape()) +
                       " and " + shape_str(p.shape()));
    }
    total_cols += p.shape().back();
  }
  std::vector<double> out(rows * total_cols);
  std::size_t col0 = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.shape().back();
    const auto& pv = p.values();
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < pc; ++j) {
        out[i * total_cols + col0 + j] = pv[i * pc + j];
      }
    }
    col0 += pc;
  }
  Shape out_shape = rk == 2 ? Shape{rows, total_cols} : Shape{total_cols};
  std::vector<std::shared_ptr<detail::TensorData>> datas;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    datas.push_back(p.data());
    widths.push_back(p.shape().back());
  }
  return detail::make_op(
      "concat", std::move(out_shape), std::move(out), parts,
      [datas = std::move(datas), widths = std::move(widths), rows,
       total_cols](const std::vector<double>& g) {
        std::size_t col0 = 0;
        for (std::size_t pi = 0; pi < datas.size(); ++pi) {
          const std::size_t pc = widths[pi];
          if (datas[pi]->requires_grad) {
            for (std::size_t i = 0; i < rows; ++i) {
              for (std::size_t j = 0; j < pc; ++j) {
                datas[pi]->grad[i * pc + j] += g[i * total_cols + col0 + j];
              }
            }
          }
          col0 += pc;
        }
      });
}

inline Tensor concat(const Tensor& a, const Tensor& b) {
  return concat(std::vector<Tensor>{a, b});
}

// Column j of a rank-2 tensor as [n,1]; a matmul against a constant
// selector, so gradients route back to the picked column only.
inline Tensor column(const Tensor& m, std::size_t j) {
  if (m.rank() != 2 || j >= m.extent(1)) {
    throw ShapeError("column: index " + std::to_string(j) + " out of shape " +
                     shape_str(m.shape()));
  }
  std::vector<double> sel(m.extent(1), 0.0);
  sel[j] = 1.0;
  return matmul(m, Tensor({m.extent(1), 1}, std::move(sel)));
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(double c, const Tensor& a) { return scalar_mul(a, c); }

}  // namespace rdr::ad

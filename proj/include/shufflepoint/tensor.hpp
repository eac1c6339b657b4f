#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "shufflepoint/errors.hpp"

namespace spn {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixXd = RowMatrix<double>;
using RowArrayXXi = Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorXi64 = Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1>;

inline Index shape_size(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major tensor of rank <= 4 with an optional gradient buffer.
// Storage is a flat Eigen array; matrix views flatten all leading axes
// against the channel (last) axis, which is the layout every op here needs.
template <typename Scalar>
struct TensorT {
  Shape shape;
  ArrayX<Scalar> values;
  ArrayX<Scalar> grad;  // empty until backward reaches this tensor
  bool requires_grad = false;

  Index size() const { return values.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  Index dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  Index channels() const { return shape.empty() ? 1 : shape.back(); }
  Index rows() const { return channels() == 0 ? 0 : size() / channels(); }

  Eigen::Map<RowMatrix<Scalar>> matrix() {
    return {values.data(), rows(), channels()};
  }
  Eigen::Map<const RowMatrix<Scalar>> matrix() const {
    return {values.data(), rows(), channels()};
  }
  Eigen::Map<RowMatrix<Scalar>> grad_matrix() {
    return {grad.data(), rows(), channels()};
  }
  Eigen::Map<const RowMatrix<Scalar>> grad_matrix() const {
    return {grad.data(), rows(), channels()};
  }

  void ensure_grad() {
    if (grad.size() != values.size()) grad = ArrayX<Scalar>::Zero(values.size());
  }
  void zero_grad() {
    if (grad.size() > 0) grad.setZero();
  }
  bool has_grad() const { return grad.size() == values.size() && values.size() >= 0 && grad.size() > 0; }

  bool all_finite() const { return values.isFinite().all(); }

  static void check_shape(const Shape& s) {
    if (s.size() > 4) throw DimensionError("tensor rank " + std::to_string(s.size()) + " exceeds 4");
    for (Index d : s) {
      if (d < 0) throw DimensionError("negative extent in shape " + shape_str(s));
    }
  }

  static std::shared_ptr<TensorT> zeros(Shape s, bool requires_grad = false) {
    check_shape(s);
    auto t = std::make_shared<TensorT>();
    t->values = ArrayX<Scalar>::Zero(shape_size(s));
    t->shape = std::move(s);
    t->requires_grad = requires_grad;
    if (requires_grad) t->ensure_grad();
    return t;
  }

  // Allocation without the zero fill; for op outputs that overwrite every
  // element before anyone reads them. Zero-filling dominated training time.
  static std::shared_ptr<TensorT> uninit(Shape s) {
    check_shape(s);
    auto t = std::make_shared<TensorT>();
    t->values.resize(shape_size(s));
    t->shape = std::move(s);
    return t;
  }

  static std::shared_ptr<TensorT> from(Shape s, std::vector<Scalar> vals, bool requires_grad = false) {
    check_shape(s);
    if (shape_size(s) != static_cast<Index>(vals.size()))
      throw DimensionError("value count " + std::to_string(vals.size()) + " does not match shape " + shape_str(s));
    auto t = std::make_shared<TensorT>();
    t->values = Eigen::Map<const ArrayX<Scalar>>(vals.data(), static_cast<Index>(vals.size()));
    t->shape = std::move(s);
    t->requires_grad = requires_grad;
    if (requires_grad) t->ensure_grad();
    return t;
  }

  static std::shared_ptr<TensorT> from_array(Shape s, ArrayX<Scalar> vals, bool requires_grad = false) {
    check_shape(s);
    if (shape_size(s) != vals.size())
      throw DimensionError("value count " + std::to_string(vals.size()) + " does not match shape " + shape_str(s));
    auto t = std::make_shared<TensorT>();
    t->values = std::move(vals);
    t->shape = std::move(s);
    t->requires_grad = requires_grad;
    if (requires_grad) t->ensure_grad();
    return t;
  }

  static std::shared_ptr<TensorT> scalar(Scalar v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  static std::shared_ptr<TensorT> uniform(Shape s, Scalar lo, Scalar hi, std::mt19937_64& rng,
                                          bool requires_grad = false) {
    auto t = zeros(std::move(s), requires_grad);
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    for (Index i = 0; i < t->size(); ++i) t->values[i] = static_cast<Scalar>(dist(rng));
    return t;
  }

  std::shared_ptr<TensorT> clone(bool keep_requires_grad = true) const {
    auto t = std::make_shared<TensorT>();
    t->shape = shape;
    t->values = values;
    t->requires_grad = keep_requires_grad && requires_grad;
    if (t->requires_grad) t->ensure_grad();
    return t;
  }
};

template <typename Scalar>
using TensorPtrT = std::shared_ptr<TensorT<Scalar>>;

using Tensor = TensorT<double>;
using TensorPtr = TensorPtrT<double>;

// Define-by-run tape. Ops append a backward closure as they execute; backward
// replays them in exact reverse execution order. One tape per forward pass.
template <typename Scalar>
class TapeT {
 public:
  struct Op {
    const char* name;
    std::function<void()> backward;
  };

  void record(const char* name, std::function<void()> backward) {
    ops_.push_back(Op{name, std::move(backward)});
  }

  void backward(const TensorPtrT<Scalar>& loss) {
    if (!loss || loss->size() != 1)
      throw UsageError("backward requires a scalar loss tensor, got shape " +
                       (loss ? shape_str(loss->shape) : std::string("null")));
    loss->ensure_grad();
    loss->grad[0] = Scalar(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->backward();
  }

  std::size_t num_ops() const { return ops_.size(); }
  void clear() { ops_.clear(); }

 private:
  std::vector<Op> ops_;
};

using Tape = TapeT<double>;

// Running statistics for one batch-norm layer; updated only in training mode.
template <typename Scalar>
struct BatchNormStatsT {
  ArrayX<Scalar> running_mean;
  ArrayX<Scalar> running_var;

  static BatchNormStatsT init(Index channels) {
    BatchNormStatsT s;
    s.running_mean = ArrayX<Scalar>::Zero(channels);
    s.running_var = ArrayX<Scalar>::Ones(channels);
    return s;
  }
};

using BatchNormStats = BatchNormStatsT<double>;

template <typename Scalar>
struct MaxPoolResultT {
  TensorPtrT<Scalar> values;  // N x C
  RowArrayXXi argmax;         // N x C, winning neighbor slot per channel
};

using MaxPoolResult = MaxPoolResultT<double>;

namespace ops {

namespace detail {

template <typename Scalar>
bool any_requires_grad(std::initializer_list<const TensorPtrT<Scalar>*> ts) {
  for (const auto* t : ts)
    if (*t && (*t)->requires_grad) return true;
  return false;
}

// Incoming gradient of y, or nullptr when no consumer ever wrote one
// (dead branch of the graph).
template <typename Scalar>
const ArrayX<Scalar>* incoming(const TensorPtrT<Scalar>& y) {
  if (y->grad.size() != y->values.size() || y->grad.size() == 0) return nullptr;
  return &y->grad;
}

}  // namespace detail

// y[r,:] = x[r,:] * W + b for every leading position r. Accepts any rank >= 1;
// the channel axis is last.
template <typename Scalar>
TensorPtrT<Scalar> conv1x1(TapeT<Scalar>& tape, const TensorPtrT<Scalar>& x,
                           const TensorPtrT<Scalar>& w, const TensorPtrT<Scalar>& b = nullptr) {
  const Index c_in = x->channels();
  if (w->rank() != 2 || w->dim(0) != c_in)
    throw DimensionError("conv1x1: input " + shape_str(x->shape) + " incompatible with weights " +
                         shape_str(w->shape));
  const Index c_out = w->dim(1);
  if (b && (b->rank() != 1 || b->dim(0) != c_out))
    throw DimensionError("conv1x1: bias " + shape_str(b->shape) + " incompatible with weights " +
                         shape_str(w->shape));
  Shape os = x->shape;
  if (os.empty()) os = {1};
  os.back() = c_out;
  auto y = TensorT<Scalar>::uninit(os);
  y->matrix().noalias() = x->matrix() * w->matrix();
  if (b) y->matrix().rowwise() += b->values.matrix().transpose();
  if (detail::any_requires_grad<Scalar>({&x, &w, &b})) {
    y->requires_grad = true;
    tape.record("conv1x1", [x, w, b, y] {
      const auto* gy = detail::incoming(y);
      if (!gy) return;
      Eigen::Map<const RowMatrix<Scalar>> gy_m(gy->data(), y->rows(), y->channels());
      if (x->requires_grad) {
        x->ensure_grad();
        x->grad_matrix().noalias() += gy_m * w->matrix().transpose();
      }
      if (w->requires_grad) {
        w->ensure_grad();
        w->grad_matrix().noalias() += x->matrix().transpose() * gy_m;
      }
      if (b && b->requires_grad) {
        b->ensure_grad();
        b->grad.matrix() += gy_m.colwise().sum().transpose();
      }
    });
  }
  return y;
}

template <typename Scalar>
TensorPtrT<Scalar> relu(TapeT<Scalar>& tape, const TensorPtrT<Scalar>& x) {
  auto y = TensorT<Scalar>::uninit(x->shape);
  y->values = x->values.max(Scalar(0));
  if (x->requires_grad) {
    y->requires_grad = true;
    tape.record("relu", [x, y] {
      const auto* gy = detail::incoming(y);
      if (!gy) return;
      x->ensure_grad();
      x->grad += (x->values > Scalar(0)).template cast<Scalar>() * (*gy);
    });
  }
  return y;
}

// Normalizes over all non-channel axes. Training mode uses batch statistics
// and folds them into the running estimates as
// running = momentum*running + (1-momentum)*batch; eval mode is a fixed
// affine map of the running statistics.
template <typename Scalar>
TensorPtrT<Scalar> batchnorm(TapeT<Scalar>& tape, const TensorPtrT<Scalar>& x,
                             const TensorPtrT<Scalar>& gamma, const TensorPtrT<Scalar>& beta,
                             BatchNormStatsT<Scalar>& stats, double momentum, bool training,
                             double eps = 1e-5) {
  const Index c = x->channels();
  if (gamma->size() != c || beta->size() != c)
    throw DimensionError("batchnorm: gamma " + shape_str(gamma->shape) + " / beta " +
                         shape_str(beta->shape) + " must have length " + std::to_string(c));
  if (!(momentum > 0.0 && momentum < 1.0))
    throw ConfigError("batchnorm momentum must be in (0,1), got " + std::to_string(momentum));
  if (stats.running_mean.size() != c || stats.running_var.size() != c)
    throw DimensionError("batchnorm: running stats length mismatch for channel count " + std::to_string(c));

  const Index m = x->rows();
  auto y = TensorT<Scalar>::uninit(x->shape);
  auto xm = x->matrix();

  ArrayX<Scalar> mean(c), inv_std(c);
  RowMatrix<Scalar> centered;
  if (training) {
    mean = xm.colwise().mean().transpose().array();
    centered = xm.rowwise() - mean.matrix().transpose();
    ArrayX<Scalar> var = centered.array().square().colwise().mean().transpose();
    inv_std = (var + Scalar(eps)).sqrt().inverse();
    stats.running_mean = Scalar(momentum) * stats.running_mean + Scalar(1.0 - momentum) * mean;
    stats.running_var = Scalar(momentum) * stats.running_var + Scalar(1.0 - momentum) * var;
  } else {
    mean = stats.running_mean;
    centered = xm.rowwise() - mean.matrix().transpose();
    inv_std = (stats.running_var + Scalar(eps)).sqrt().inverse();
  }
  RowMatrix<Scalar> xhat = centered.array().rowwise() * inv_std.transpose();
  y->matrix() = (xhat.array().rowwise() * gamma->values.transpose()).rowwise() +
                beta->values.transpose();

  if (detail::any_requires_grad<Scalar>({&x, &gamma, &beta})) {
    y->requires_grad = true;
    auto saved_xhat = std::make_shared<RowMatrix<Scalar>>(std::move(xhat));
    auto saved_centered = std::make_shared<RowMatrix<Scalar>>(std::move(centered));
    auto saved_inv_std = std::make_shared<ArrayX<Scalar>>(std::move(inv_std));
    tape.record("batchnorm", [x, gamma, beta, y, saved_xhat, saved_centered, saved_inv_std, m,
                              training] {
      const auto* gy = detail::incoming(y);
      if (!gy) return;
      Eigen::Map<const RowMatrix<Scalar>> gy_m(gy->data(), y->rows(), y->channels());
      if (gamma->requires_grad) {
        gamma->ensure_grad();
        gamma->grad += (gy_m.array() * saved_xhat->array()).colwise().sum().transpose();
      }
      if (beta->requires_grad) {
        beta->ensure_grad();
        beta->grad += gy_m.array().colwise().sum().transpose();
      }
      if (!x->requires_grad) return;
      x->ensure_grad();
      const auto& inv_std = *saved_inv_std;
      RowMatrix<Scalar> dxhat = gy_m.array().rowwise() * gamma->values.transpose();
      if (!training) {
        x->grad_matrix().array() += dxhat.array().rowwise() * inv_std.transpose();
        return;
      }
      // Full backward through the batch statistics.
      const Scalar inv_m = Scalar(1) / static_cast<Scalar>(m);
      ArrayX<Scalar> dvar = (dxhat.array() * saved_centered->array()).colwise().sum().transpose() *
                            (Scalar(-0.5) * inv_std.cube());
      ArrayX<Scalar> sum_centered = saved_centered->array().colwise().sum().transpose();
      ArrayX<Scalar> dmean = (dxhat.array().rowwise() * (-inv_std).transpose()).colwise().sum().transpose() +
                             dvar * (Scalar(-2) * inv_m) * sum_centered;
      x->grad_matrix().array() += ((dxhat.array().rowwise() * inv_std.transpose()) +
                                   (saved_centered->array().rowwise() * (dvar * Scalar(2) * inv_m).transpose()))
                                      .rowwise() +
                                  (dmean * inv_m).transpose();
    });
  }
  return y;
}

// Max over the neighbor (middle) axis of an N x K x C tensor. Ties go to the
// lowest k so backward routing is deterministic.
template <typename Scalar>
MaxPoolResultT<Scalar> maxpool_neighbors(TapeT<Scalar>& tape, const TensorPtrT<Scalar>& x) {
  if (x->rank() != 3) throw DimensionError("maxpool_neighbors expects rank-3 input, got " + shape_str(x->shape));
  const Index n = x->dim(0), k = x->dim(1), c = x->dim(2);
  if (k < 1) throw DimensionError("maxpool_neighbors requires K >= 1");
  auto y = TensorT<Scalar>::uninit({n, c});
  RowArrayXXi argmax(n, c);
  for (Index i = 0; i < n; ++i) {
    const Scalar* base = x->values.data() + i * k * c;
    Scalar* out = y->values.data() + i * c;
    for (Index ch = 0; ch < c; ++ch) {
      Scalar best = base[ch];
      int best_k = 0;
      for (Index kk = 1; kk < k; ++kk) {
        const Scalar v = base[kk * c + ch];
        if (v > best) {
          best = v;
          best_k = static_cast<int>(kk);
        }
      }
      out[ch] = best;
      argmax(i, ch) = best_k;
    }
  }
  if (x->requires_grad) {
    y->requires_grad = true;
    auto saved_argmax = std::make_shared<RowArrayXXi>(argmax);
    tape.record("maxpool_neighbors", [x, y, saved_argmax, n, k, c] {
      const auto* gy = detail::incoming(y);
      if (!gy) return;
      x->ensure_grad();
      for (Index i = 0; i < n; ++i)
        for (Index ch = 0; ch < c; ++ch)
          x->grad[i * k * c + (*saved_argmax)(i, ch) * c + ch] += (*gy)[i * c + ch];
    });
  }
  return {y, std::move(argmax)};
}

// Channel-axis concatenation: [..., C1] ++ [..., C2] -> [..., C1+C2].
template <typename Scalar>
TensorPtrT<Scalar> concat_channels(TapeT<Scalar>& tape, const TensorPtrT<Scalar>& a,
                                   const TensorPtrT<Scalar>& b) {
  Shape lead_a(a->shape.begin(), a->shape.empty() ? a->shape.end() : a->shape.end() - 1);
  Shape lead_b(b->shape.begin(), b->shape.empty() ? b->shape.end() : b->shape.end() - 1);
  if (lead_a != lead_b)
    throw DimensionError("concat_channels: leading dims differ, " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
  const Index ca = a->channels(), cb = b->channels();
  Shape os = a->shape;
  if (os.empty()) os = {0};
  os.back() = ca + cb;
  auto y = TensorT<Scalar>::uninit(os);
  if (ca > 0) y->matrix().leftCols(ca) = a->matrix();
  if (cb > 0) y->matrix().rightCols(cb) = b->matrix();
  if (detail::any_requires_grad<Scalar>({&a, &b})) {
    y->requires_grad = true;
    tape.record("concat_channels", [a, b, y, ca, cb] {
      const auto* gy = detail::incoming(y);
      if (!gy) return;
      Eigen::Map<const RowMatrix<Scalar>> gy_m(gy->data(), y->rows(), y->channels());
      if (a->requires_grad && ca > 0) {
        a->ensure_grad();
        a->grad_matrix() += gy_m.leftCols(ca);
      }
      if (b->requires_grad && cb > 0) {
        b->ensure_grad();
        b->grad_matrix() += gy_m.rightCols(cb);
      }
    });
  }
  return y;
}

template <typename Scalar>
TensorPtrT<Scalar> concat_channels(TapeT<Scalar>& tape, const std::vector<TensorPtrT<Scalar>>& parts) {
  if (parts.empty()) throw UsageError("concat_channels: empty tensor list");
  auto y = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) y = concat_channels(tape, y, parts[i]);
  return y;
}

// Mean over the batch of -log softmax(logits)[label], stabilized by
// per-row max subtraction.
template <typename Scalar>
TensorPtrT<Scalar> softmax_cross_entropy(TapeT<Scalar>& tape, const TensorPtrT<Scalar>& logits,
                                         std::span<const std::int64_t> labels) {
  if (logits->rank() != 2)
    throw DimensionError("softmax_cross_entropy expects B x L logits, got " + shape_str(logits->shape));
  const Index batch = logits->dim(0), n_classes = logits->dim(1);
  if (static_cast<Index>(labels.size()) != batch)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(batch));
  for (std::int64_t lbl : labels) {
    if (lbl < 0 || lbl >= n_classes)
      throw InputError("label " + std::to_string(lbl) + " outside [0, " + std::to_string(n_classes) + ")");
  }
  auto z = logits->matrix();
  RowMatrix<Scalar> probs(batch, n_classes);
  Scalar total = 0;
  for (Index i = 0; i < batch; ++i) {
    const Scalar m = z.row(i).maxCoeff();
    ArrayX<Scalar> e = (z.row(i).transpose().array() - m).exp();
    const Scalar sum = e.sum();
    probs.row(i) = (e / sum).matrix().transpose();
    total += std::log(sum) - (z(i, labels[static_cast<std::size_t>(i)]) - m);
  }
  auto y = TensorT<Scalar>::scalar(total / static_cast<Scalar>(batch));
  if (logits->requires_grad) {
    y->requires_grad = true;
    auto saved_probs = std::make_shared<RowMatrix<Scalar>>(std::move(probs));
    std::vector<std::int64_t> saved_labels(labels.begin(), labels.end());
    tape.record("softmax_cross_entropy", [logits, y, saved_probs, saved_labels, batch] {
      const auto* gy = detail::incoming(y);
      if (!gy) return;
      logits->ensure_grad();
      const Scalar scale = (*gy)[0] / static_cast<Scalar>(batch);
      auto g = logits->grad_matrix();
      g += *saved_probs * scale;
      for (Index i = 0; i < batch; ++i)
        g(i, saved_labels[static_cast<std::size_t>(i)]) -= scale;
    });
  }
  return y;
}

template <typename Scalar>
TensorPtrT<Scalar> sum(TapeT<Scalar>& tape, const TensorPtrT<Scalar>& x) {
  auto y = TensorT<Scalar>::scalar(x->values.sum());
  if (x->requires_grad) {
    y->requires_grad = true;
    tape.record("sum", [x, y] {
      const auto* gy = detail::incoming(y);
      if (!gy) return;
      x->ensure_grad();
      x->grad += (*gy)[0];
    });
  }
  return y;
}

template <typename Scalar>
TensorPtrT<Scalar> scale(TapeT<Scalar>& tape, const TensorPtrT<Scalar>& x, Scalar factor) {
  auto y = TensorT<Scalar>::uninit(x->shape);
  y->values = x->values * factor;
  if (x->requires_grad) {
    y->requires_grad = true;
    tape.record("scale", [x, y, factor] {
      const auto* gy = detail::incoming(y);
      if (!gy) return;
      x->ensure_grad();
      x->grad += *gy * factor;
    });
  }
  return y;
}

namespace detail {
template <typename Scalar>
void check_same_shape(const TensorPtrT<Scalar>& a, const TensorPtrT<Scalar>& b, const char* op) {
  if (a->shape != b->shape)
    throw DimensionError(std::string(op) + ": shapes differ, " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
}
}  // namespace detail

template <typename Scalar>
TensorPtrT<Scalar> add(TapeT<Scalar>& tape, const TensorPtrT<Scalar>& a, const TensorPtrT<Scalar>& b) {
  detail::check_same_shape(a, b, "add");
  auto y = TensorT<Scalar>::uninit(a->shape);
  y->values = a->values + b->values;
  if (detail::any_requires_grad<Scalar>({&a, &b})) {
    y->requires_grad = true;
    tape.record("add", [a, b, y] {
      const auto* gy = detail::incoming(y);
      if (!gy) return;
      if (a->requires_grad) {
        a->ensure_grad();
        a->grad += *gy;
      }
      if (b->requires_grad) {
        b->ensure_grad();
        b->grad += *gy;
      }
    });
  }
  return y;
}

template <typename Scalar>
TensorPtrT<Scalar> sub(TapeT<Scalar>& tape, const TensorPtrT<Scalar>& a, const TensorPtrT<Scalar>& b) {
  detail::check_same_shape(a, b, "sub");
  auto y = TensorT<Scalar>::uninit(a->shape);
  y->values = a->values - b->values;
  if (detail::any_requires_grad<Scalar>({&a, &b})) {
    y->requires_grad = true;
    tape.record("sub", [a, b, y] {
      const auto* gy = detail::incoming(y);
      if (!gy) return;
      if (a->requires_grad) {
        a->ensure_grad();
        a->grad += *gy;
      }
      if (b->requires_grad) {
        b->ensure_grad();
        b->grad -= *gy;
      }
    });
  }
  return y;
}

template <typename Scalar>
TensorPtrT<Scalar> mul(TapeT<Scalar>& tape, const TensorPtrT<Scalar>& a, const TensorPtrT<Scalar>& b) {
  detail::check_same_shape(a, b, "mul");
  auto y = TensorT<Scalar>::uninit(a->shape);
  y->values = a->values * b->values;
  if (detail::any_requires_grad<Scalar>({&a, &b})) {
    y->requires_grad = true;
    tape.record("mul", [a, b, y] {
      const auto* gy = detail::incoming(y);
      if (!gy) return;
      if (a->requires_grad) {
        a->ensure_grad();
        a->grad += *gy * b->values;
      }
      if (b->requires_grad) {
        b->ensure_grad();
        b->grad += *gy * a->values;
      }
    });
  }
  return y;
}

// Pure metadata change; row-major layout is preserved, gradient passes through.
template <typename Scalar>
TensorPtrT<Scalar> reshape(TapeT<Scalar>& tape, const TensorPtrT<Scalar>& x, Shape new_shape) {
  if (shape_size(new_shape) != x->size())
    throw DimensionError("reshape: " + shape_str(x->shape) + " -> " + shape_str(new_shape) +
                         " changes element count");
  auto y = TensorT<Scalar>::uninit(new_shape);
  y->values = x->values;
  if (x->requires_grad) {
    y->requires_grad = true;
    tape.record("reshape", [x, y] {
      const auto* gy = detail::incoming(y);
      if (!gy) return;
      x->ensure_grad();
      x->grad += *gy;
    });
  }
  return y;
}

// Channels [c0, c1) of the last axis.
template <typename Scalar>
TensorPtrT<Scalar> slice_channels(TapeT<Scalar>& tape, const TensorPtrT<Scalar>& x, Index c0, Index c1) {
  const Index c = x->channels();
  if (c0 < 0 || c1 < c0 || c1 > c)
    throw DimensionError("slice_channels [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") out of range for " + shape_str(x->shape));
  Shape os = x->shape;
  os.back() = c1 - c0;
  auto y = TensorT<Scalar>::uninit(os);
  y->matrix() = x->matrix().middleCols(c0, c1 - c0);
  if (x->requires_grad) {
    y->requires_grad = true;
    tape.record("slice_channels", [x, y, c0, c1] {
      const auto* gy = detail::incoming(y);
      if (!gy) return;
      x->ensure_grad();
      Eigen::Map<const RowMatrix<Scalar>> gy_m(gy->data(), y->rows(), y->channels());
      x->grad_matrix().middleCols(c0, c1 - c0) += gy_m;
    });
  }
  return y;
}

// Row gather: x is N x C, idx selects M rows. Backward scatter-adds.
template <typename Scalar>
TensorPtrT<Scalar> gather_rows(TapeT<Scalar>& tape, const TensorPtrT<Scalar>& x,
                               std::span<const int> idx) {
  if (x->rank() != 2) throw DimensionError("gather_rows expects rank-2 input, got " + shape_str(x->shape));
  const Index n = x->dim(0), c = x->dim(1);
  const Index m = static_cast<Index>(idx.size());
  for (int i : idx)
    if (i < 0 || i >= n) throw InputError("gather_rows index " + std::to_string(i) + " outside [0," + std::to_string(n) + ")");
  auto y = TensorT<Scalar>::uninit({m, c});
  for (Index i = 0; i < m; ++i) y->matrix().row(i) = x->matrix().row(idx[static_cast<std::size_t>(i)]);
  if (x->requires_grad) {
    y->requires_grad = true;
    std::vector<int> saved(idx.begin(), idx.end());
    tape.record("gather_rows", [x, y, saved] {
      const auto* gy = detail::incoming(y);
      if (!gy) return;
      x->ensure_grad();
      Eigen::Map<const RowMatrix<Scalar>> gy_m(gy->data(), y->rows(), y->channels());
      for (Index i = 0; i < gy_m.rows(); ++i)
        x->grad_matrix().row(saved[static_cast<std::size_t>(i)]) += gy_m.row(i);
    });
  }
  return y;
}

// Neighbor gather: x is N x C, nbrs is M x K of row indices -> M x K x C.
template <typename Scalar>
TensorPtrT<Scalar> gather_neighbors(TapeT<Scalar>& tape, const TensorPtrT<Scalar>& x,
                                    const RowArrayXXi& nbrs) {
  if (x->rank() != 2) throw DimensionError("gather_neighbors expects rank-2 input, got " + shape_str(x->shape));
  const Index n = x->dim(0), c = x->dim(1);
  const Index m = nbrs.rows(), k = nbrs.cols();
  auto y = TensorT<Scalar>::uninit({m, k, c});
  for (Index i = 0; i < m; ++i) {
    for (Index kk = 0; kk < k; ++kk) {
      const int j = nbrs(i, kk);
      if (j < 0 || j >= n)
        throw InputError("gather_neighbors index " + std::to_string(j) + " outside [0," + std::to_string(n) + ")");
      y->matrix().row(i * k + kk) = x->matrix().row(j);
    }
  }
  if (x->requires_grad) {
    y->requires_grad = true;
    auto saved = std::make_shared<RowArrayXXi>(nbrs);
    tape.record("gather_neighbors", [x, y, saved, m, k] {
      const auto* gy = detail::incoming(y);
      if (!gy) return;
      x->ensure_grad();
      Eigen::Map<const RowMatrix<Scalar>> gy_m(gy->data(), y->rows(), y->channels());
      for (Index i = 0; i < m; ++i)
        for (Index kk = 0; kk < k; ++kk)
          x->grad_matrix().row((*saved)(i, kk)) += gy_m.row(i * k + kk);
    });
  }
  return y;
}

// Broadcast each row of an M x C tensor K times -> M x K x C.
template <typename Scalar>
TensorPtrT<Scalar> expand_neighbors(TapeT<Scalar>& tape, const TensorPtrT<Scalar>& x, Index k) {
  if (x->rank() != 2) throw DimensionError("expand_neighbors expects rank-2 input, got " + shape_str(x->shape));
  if (k < 1) throw DimensionError("expand_neighbors requires K >= 1");
  const Index m = x->dim(0), c = x->dim(1);
  auto y = TensorT<Scalar>::uninit({m, k, c});
  for (Index i = 0; i < m; ++i)
    for (Index kk = 0; kk < k; ++kk) y->matrix().row(i * k + kk) = x->matrix().row(i);
  if (x->requires_grad) {
    y->requires_grad = true;
    tape.record("expand_neighbors", [x, y, m, k] {
      const auto* gy = detail::incoming(y);
      if (!gy) return;
      x->ensure_grad();
      Eigen::Map<const RowMatrix<Scalar>> gy_m(gy->data(), y->rows(), y->channels());
      for (Index i = 0; i < m; ++i)
        for (Index kk = 0; kk < k; ++kk) x->grad_matrix().row(i) += gy_m.row(i * k + kk);
    });
  }
  return y;
}

// Channel permutation: y[..., j] = x[..., perm[j]].
template <typename Scalar>
TensorPtrT<Scalar> permute_channels(TapeT<Scalar>& tape, const TensorPtrT<Scalar>& x,
                                    const std::vector<Index>& perm) {
  const Index c = x->channels();
  if (static_cast<Index>(perm.size()) != c)
    throw ConfigError("permute_channels: permutation size " + std::to_string(perm.size()) +
                      " != channel count " + std::to_string(c));
  std::vector<bool> seen(static_cast<std::size_t>(c), false);
  for (Index p : perm) {
    if (p < 0 || p >= c || seen[static_cast<std::size_t>(p)])
      throw ConfigError("permute_channels: not a permutation of [0," + std::to_string(c) + ")");
    seen[static_cast<std::size_t>(p)] = true;
  }
  auto y = TensorT<Scalar>::uninit(x->shape);
  for (Index j = 0; j < c; ++j) y->matrix().col(j) = x->matrix().col(perm[static_cast<std::size_t>(j)]);
  if (x->requires_grad) {
    y->requires_grad = true;
    auto saved = std::make_shared<std::vector<Index>>(perm);
    tape.record("permute_channels", [x, y, saved, c] {
      const auto* gy = detail::incoming(y);
      if (!gy) return;
      x->ensure_grad();
      Eigen::Map<const RowMatrix<Scalar>> gy_m(gy->data(), y->rows(), y->channels());
      for (Index j = 0; j < c; ++j) x->grad_matrix().col((*saved)[static_cast<std::size_t>(j)]) += gy_m.col(j);
    });
  }
  return y;
}

// Inverted dropout with an explicit rng stream. Identity in eval mode.
template <typename Scalar>
TensorPtrT<Scalar> dropout(TapeT<Scalar>& tape, const TensorPtrT<Scalar>& x, double rate,
                           std::mt19937_64& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0,1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  auto y = TensorT<Scalar>::uninit(x->shape);
  ArrayX<Scalar> mask(x->size());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Scalar keep_scale = Scalar(1.0 / (1.0 - rate));
  for (Index i = 0; i < x->size(); ++i) mask[i] = u(rng) < rate ? Scalar(0) : keep_scale;
  y->values = x->values * mask;
  if (x->requires_grad) {
    y->requires_grad = true;
    auto saved = std::make_shared<ArrayX<Scalar>>(std::move(mask));
    tape.record("dropout", [x, y, saved] {
      const auto* gy = detail::incoming(y);
      if (!gy) return;
      x->ensure_grad();
      x->grad += *gy * *saved;
    });
  }
  return y;
}

}  // namespace ops

}  // namespace spn

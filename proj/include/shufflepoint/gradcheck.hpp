#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "shufflepoint/tensor.hpp"

namespace spn {

// Builds a fresh tape and returns the scalar loss for the given input.
// Must be deterministic: the harness evaluates it repeatedly.
template <typename Scalar>
using LossFnT = std::function<TensorPtrT<Scalar>(TapeT<Scalar>&, const TensorPtrT<Scalar>&)>;

using LossFn = LossFnT<double>;

template <typename Scalar>
struct GradCheckReportT {
  double max_rel_err = 0.0;
  Index worst_coord = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

using GradCheckReport = GradCheckReportT<double>;

// Central-difference gradient verification of fn at x. The relative error per
// coordinate is |analytic - cd| / max(|analytic|, |cd|, 1e-8); the report holds
// the worst coordinate. A second no-grad evaluation must reproduce the loss
// bit-for-bit, otherwise the function is non-deterministic and unverifiable.
template <typename Scalar>
GradCheckReportT<Scalar> finite_difference_check(const LossFnT<Scalar>& fn,
                                                 const TensorPtrT<Scalar>& x, double eps = 1e-6) {
  if (!(eps > 0.0)) throw UsageError("finite_difference_check: eps must be positive");

  auto eval = [&fn](const TensorPtrT<Scalar>& in) {
    TapeT<Scalar> tape;
    auto loss = fn(tape, in);
    if (!loss || loss->size() != 1)
      throw UsageError("finite_difference_check: fn must return a scalar");
    return loss->values[0];
  };

  // Analytic pass.
  auto xg = x->clone(false);
  xg->requires_grad = true;
  xg->ensure_grad();
  TapeT<Scalar> tape;
  auto loss = fn(tape, xg);
  if (!loss || loss->size() != 1)
    throw UsageError("finite_difference_check: fn must return a scalar");
  tape.backward(loss);
  ArrayX<Scalar> analytic = xg->grad;

  // Determinism probe: same input, fresh tape, must match to the bit.
  auto probe = x->clone(false);
  if (eval(probe) != loss->values[0])
    throw VerificationError("finite_difference_check: fn is not deterministic (repeated evaluation mismatch)");

  GradCheckReportT<Scalar> report;
  auto work = x->clone(false);
  for (Index i = 0; i < work->size(); ++i) {
    const Scalar orig = work->values[i];
    work->values[i] = orig + Scalar(eps);
    const Scalar f_plus = eval(work);
    work->values[i] = orig - Scalar(eps);
    const Scalar f_minus = eval(work);
    work->values[i] = orig;
    const double cd = (static_cast<double>(f_plus) - static_cast<double>(f_minus)) / (2.0 * eps);
    const double a = static_cast<double>(analytic[i]);
    const double rel = std::abs(a - cd) / std::max({std::abs(a), std::abs(cd), 1e-8});
    if (rel > report.max_rel_err || report.worst_coord < 0) {
      report.max_rel_err = rel;
      report.worst_coord = i;
      report.analytic_at_worst = a;
      report.numeric_at_worst = cd;
    }
  }
  return report;
}

// One named entry of the gradient-check suite.
struct GradCheckCase {
  std::string name;
  std::function<GradCheckReport()> run;
};

namespace detail {

inline TensorPtr gc_random(Shape s, double lo, double hi, std::mt19937_64& rng) {
  return Tensor::uniform(std::move(s), lo, hi, rng);
}

// Random values bounded away from zero so ReLU/max kinks cannot corrupt the
// central differences.
inline TensorPtr gc_random_offzero(Shape s, std::mt19937_64& rng) {
  auto t = gc_random(std::move(s), 0.3, 1.7, rng);
  std::bernoulli_distribution sign(0.5);
  for (Index i = 0; i < t->size(); ++i)
    if (sign(rng)) t->values[i] = -t->values[i];
  return t;
}

}  // namespace detail

// Finite-difference cases for every differentiable tensor op. Composite
// checks (grouped layers, full models) are appended by callers that own
// those graphs.
inline std::vector<GradCheckCase> op_gradcheck_cases(std::uint64_t seed) {
  std::vector<GradCheckCase> cases;
  auto add = [&cases](std::string name, std::function<GradCheckReport()> run) {
    cases.push_back({std::move(name), std::move(run)});
  };

  add("conv1x1/input", [seed] {
    std::mt19937_64 rng(seed + 1);
    auto x = detail::gc_random({5, 4}, -1, 1, rng);
    auto w = detail::gc_random({4, 3}, -1, 1, rng);
    auto b = detail::gc_random({3}, -1, 1, rng);
    return finite_difference_check<double>(
        [w, b](Tape& t, const TensorPtr& in) { return ops::sum(t, ops::conv1x1(t, in, w, b)); }, x);
  });
  add("conv1x1/weights", [seed] {
    std::mt19937_64 rng(seed + 2);
    auto x = detail::gc_random({5, 4}, -1, 1, rng);
    auto w = detail::gc_random({4, 3}, -1, 1, rng);
    auto b = detail::gc_random({3}, -1, 1, rng);
    return finite_difference_check<double>(
        [x, b](Tape& t, const TensorPtr& in) { return ops::sum(t, ops::conv1x1(t, x, in, b)); }, w);
  });
  add("conv1x1/bias", [seed] {
    std::mt19937_64 rng(seed + 3);
    auto x = detail::gc_random({5, 4}, -1, 1, rng);
    auto w = detail::gc_random({4, 3}, -1, 1, rng);
    auto b = detail::gc_random({3}, -1, 1, rng);
    return finite_difference_check<double>(
        [x, w](Tape& t, const TensorPtr& in) { return ops::sum(t, ops::conv1x1(t, x, w, in)); }, b);
  });
  add("relu", [seed] {
    std::mt19937_64 rng(seed + 4);
    auto x = detail::gc_random_offzero({6, 5}, rng);
    // Square the output so the check is nontrivial past the kink mask.
    return finite_difference_check<double>(
        [](Tape& t, const TensorPtr& in) {
          auto y = ops::relu(t, in);
          return ops::scale(t, ops::sum(t, ops::mul(t, y, y)), 0.5);
        },
        x);
  });
  add("batchnorm/train/input", [seed] {
    std::mt19937_64 rng(seed + 5);
    auto x = detail::gc_random({8, 3}, -2, 2, rng);
    auto gamma = detail::gc_random({3}, 0.5, 1.5, rng);
    auto beta = detail::gc_random({3}, -0.5, 0.5, rng);
    return finite_difference_check<double>(
        [gamma, beta](Tape& t, const TensorPtr& in) {
          BatchNormStats stats = BatchNormStats::init(3);
          auto y = ops::batchnorm(t, in, gamma, beta, stats, 0.9, true);
          return ops::sum(t, ops::mul(t, y, y));
        },
        // the statistics paths leave some coordinates with ~1e-7 gradients;
        // a larger step keeps the difference quotient above roundoff there
        x, 1e-3);
  });
  add("batchnorm/train/gamma", [seed] {
    std::mt19937_64 rng(seed + 6);
    auto x = detail::gc_random({8, 3}, -2, 2, rng);
    auto gamma = detail::gc_random({3}, 0.5, 1.5, rng);
    auto beta = detail::gc_random({3}, -0.5, 0.5, rng);
    return finite_difference_check<double>(
        [x, beta](Tape& t, const TensorPtr& in) {
          BatchNormStats stats = BatchNormStats::init(3);
          auto y = ops::batchnorm(t, x, in, beta, stats, 0.9, true);
          return ops::sum(t, ops::mul(t, y, y));
        },
        gamma, 1e-5);
  });
  add("batchnorm/eval/input", [seed] {
    std::mt19937_64 rng(seed + 7);
    auto x = detail::gc_random({8, 3}, -2, 2, rng);
    auto gamma = detail::gc_random({3}, 0.5, 1.5, rng);
    auto beta = detail::gc_random({3}, -0.5, 0.5, rng);
    return finite_difference_check<double>(
        [gamma, beta](Tape& t, const TensorPtr& in) {
          BatchNormStats stats = BatchNormStats::init(3);
          stats.running_mean.setConstant(0.25);
          stats.running_var.setConstant(1.5);
          auto y = ops::batchnorm(t, in, gamma, beta, stats, 0.9, false);
          return ops::sum(t, ops::mul(t, y, y));
        },
        x);
  });
  add("maxpool_neighbors", [seed] {
    std::mt19937_64 rng(seed + 8);
    // Well-separated values keep the argmax stable under the probe step.
    auto x = Tensor::zeros({4, 3, 2});
    std::vector<Index> order(static_cast<std::size_t>(x->size()));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Index>(i);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < order.size(); ++i)
      x->values[static_cast<Index>(i)] = 0.1 * static_cast<double>(order[i]);
    return finite_difference_check<double>(
        [](Tape& t, const TensorPtr& in) {
          auto y = ops::maxpool_neighbors(t, in).values;
          return ops::sum(t, ops::mul(t, y, y));
        },
        x);
  });
  add("concat_channels", [seed] {
    std::mt19937_64 rng(seed + 9);
    auto a = detail::gc_random({4, 2}, -1, 1, rng);
    auto b = detail::gc_random({4, 3}, -1, 1, rng);
    return finite_difference_check<double>(
        [b](Tape& t, const TensorPtr& in) {
          auto y = ops::concat_channels(t, in, b);
          return ops::sum(t, ops::mul(t, y, y));
        },
        a);
  });
  add("softmax_cross_entropy", [seed] {
    std::mt19937_64 rng(seed + 10);
    auto logits = detail::gc_random({4, 5}, -2, 2, rng);
    std::vector<std::int64_t> labels = {0, 3, 1, 4};
    return finite_difference_check<double>(
        [labels](Tape& t, const TensorPtr& in) { return ops::softmax_cross_entropy(t, in, labels); },
        logits);
  });
  add("add_sub_mul_scale", [seed] {
    std::mt19937_64 rng(seed + 11);
    auto a = detail::gc_random({3, 4}, -1, 1, rng);
    auto b = detail::gc_random({3, 4}, -1, 1, rng);
    return finite_difference_check<double>(
        [b](Tape& t, const TensorPtr& in) {
          auto s = ops::add(t, ops::mul(t, in, b), ops::sub(t, in, b));
          return ops::sum(t, ops::scale(t, ops::mul(t, s, s), 0.25));
        },
        a);
  });
  add("reshape", [seed] {
    std::mt19937_64 rng(seed + 12);
    auto x = detail::gc_random({2, 3, 4}, -1, 1, rng);
    return finite_difference_check<double>(
        [](Tape& t, const TensorPtr& in) {
          auto y = ops::reshape(t, in, {6, 4});
          return ops::sum(t, ops::mul(t, y, y));
        },
        x);
  });
  add("slice_channels", [seed] {
    std::mt19937_64 rng(seed + 13);
    auto x = detail::gc_random({5, 6}, -1, 1, rng);
    return finite_difference_check<double>(
        [](Tape& t, const TensorPtr& in) {
          auto y = ops::slice_channels(t, in, 1, 4);
          return ops::sum(t, ops::mul(t, y, y));
        },
        x);
  });
  add("gather_rows", [seed] {
    std::mt19937_64 rng(seed + 14);
    auto x = detail::gc_random({6, 3}, -1, 1, rng);
    std::vector<int> idx = {4, 0, 0, 5};
    return finite_difference_check<double>(
        [idx](Tape& t, const TensorPtr& in) {
          auto y = ops::gather_rows(t, in, idx);
          return ops::sum(t, ops::mul(t, y, y));
        },
        x);
  });
  add("gather_neighbors", [seed] {
    std::mt19937_64 rng(seed + 15);
    auto x = detail::gc_random({6, 3}, -1, 1, rng);
    RowArrayXXi nbrs(2, 3);
    nbrs << 1, 5, 0, 2, 2, 4;
    return finite_difference_check<double>(
        [nbrs](Tape& t, const TensorPtr& in) {
          auto y = ops::gather_neighbors(t, in, nbrs);
          return ops::sum(t, ops::mul(t, y, y));
        },
        x);
  });
  add("expand_neighbors", [seed] {
    std::mt19937_64 rng(seed + 16);
    auto x = detail::gc_random({4, 3}, -1, 1, rng);
    return finite_difference_check<double>(
        [](Tape& t, const TensorPtr& in) {
          auto y = ops::expand_neighbors(t, in, 5);
          return ops::sum(t, ops::mul(t, y, y));
        },
        x);
  });
  add("permute_channels", [seed] {
    std::mt19937_64 rng(seed + 17);
    auto x = detail::gc_random({4, 6}, -1, 1, rng);
    std::vector<Index> perm = {0, 3, 1, 4, 2, 5};
    return finite_difference_check<double>(
        [perm](Tape& t, const TensorPtr& in) {
          auto y = ops::permute_channels(t, in, perm);
          return ops::sum(t, ops::mul(t, y, y));
        },
        x);
  });
  add("dropout", [seed] {
    std::mt19937_64 rng(seed + 18);
    auto x = detail::gc_random({5, 4}, -1, 1, rng);
    // Fixed mask seed keeps the sampled graph deterministic across probes.
    return finite_difference_check<double>(
        [seed](Tape& t, const TensorPtr& in) {
          std::mt19937_64 mask_rng(seed + 1000);
          auto y = ops::dropout(t, in, 0.4, mask_rng, true);
          return ops::sum(t, ops::mul(t, y, y));
        },
        x);
  });

  return cases;
}

// Deliberately wrong backward pass; exists so the harness's failure path can
// be demonstrated end to end.
inline GradCheckCase injected_fault_case() {
  return {"injected_wrong_sign", [] {
            auto x = Tensor::from({3}, {0.7, -0.4, 1.2});
            return finite_difference_check<double>(
                [](Tape& t, const TensorPtr& in) {
                  auto y = Tensor::zeros(in->shape);
                  y->values = in->values * 2.0;
                  y->requires_grad = true;
                  t.record("wrong_sign_scale", [in, y] {
                    if (y->grad.size() == 0) return;
                    in->ensure_grad();
                    in->grad += y->grad * -2.0;  // sign flipped on purpose
                  });
                  return ops::sum(t, ops::mul(t, y, y));
                },
                x);
          }};
}

}  // namespace spn

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "shufflepoint/gradcheck.hpp"
#include "shufflepoint/model_gradcheck.hpp"

using namespace spn;

constexpr double kTol = 1e-4;

TEST_CASE("every per-op finite-difference case passes the tolerance") {
  for (const auto& c : op_gradcheck_cases(42)) {
    INFO(c.name);
    const GradCheckReport r = c.run();
    CHECK(r.max_rel_err < kTol);
    CHECK(r.worst_coord >= 0);
  }
}

TEST_CASE("composite model finite-difference cases pass the tolerance") {
  for (const auto& c : model_gradcheck_cases(42)) {
    INFO(c.name);
    const GradCheckReport r = c.run();
    CHECK(r.max_rel_err < kTol);
  }
}

TEST_CASE("suite results are stable across other seeds") {
  for (const auto& c : op_gradcheck_cases(1234)) {
    INFO(c.name);
    CHECK(c.run().max_rel_err < kTol);
  }
}

TEST_CASE("an injected wrong-sign gradient is flagged with its worst coordinate") {
  const GradCheckCase c = injected_fault_case();
  const GradCheckReport r = c.run();
  CHECK(r.max_rel_err > kTol);
  CHECK(r.worst_coord >= 0);
  // sign flip: analytic and numeric disagree in sign
  CHECK(r.analytic_at_worst * r.numeric_at_worst < 0.0);
}

TEST_CASE("the report pins down which coordinate is wrong") {
  // gradient correct except at coordinate 1
  auto x = Tensor::from({3}, {0.5, -0.8, 0.25});
  const auto r = finite_difference_check<double>(
      [](Tape& t, const TensorPtr& in) {
        auto y = Tensor::zeros(in->shape);
        y->values = in->values * in->values;
        y->requires_grad = true;
        t.record("square_bad_coord1", [in, y] {
          if (y->grad.size() == 0) return;
          in->ensure_grad();
          ArrayX<double> g = 2.0 * in->values * y->grad;
          g[1] += 10.0;
          in->grad += g;
        });
        return ops::sum(t, y);
      },
      x);
  CHECK(r.max_rel_err > kTol);
  CHECK(r.worst_coord == 1);
}

TEST_CASE("a non-scalar loss is rejected as a usage error") {
  auto x = Tensor::from({2}, {1, 2});
  LossFn fn = [](Tape& t, const TensorPtr& in) { return ops::add(t, in, in); };
  CHECK_THROWS_AS(finite_difference_check<double>(fn, x), UsageError);
}

TEST_CASE("a non-deterministic function is rejected as unverifiable") {
  auto x = Tensor::from({2}, {1, 2});
  int calls = 0;
  LossFn fn = [&calls](Tape& t, const TensorPtr& in) {
    auto y = Tensor::scalar(in->values.sum() + 0.001 * calls++);
    y->requires_grad = true;
    return y;
  };
  CHECK_THROWS_AS(finite_difference_check<double>(fn, x), VerificationError);
}

TEST_CASE("eps must be positive") {
  auto x = Tensor::from({1}, {1});
  LossFn fn = [](Tape& t, const TensorPtr& in) { return ops::sum(t, in); };
  CHECK_THROWS_AS(finite_difference_check<double>(fn, x, 0.0), UsageError);
}

TEST_CASE("relative error uses the max(|analytic|,|numeric|,1e-8) denominator") {
  // loss = sum(x): analytic gradient exactly 1; central difference of a linear
  // function is exact up to roundoff, so the relative error is ~1e-11 at most.
  auto x = Tensor::from({4}, {1, 2, 3, 4});
  LossFn fn = [](Tape& t, const TensorPtr& in) { return ops::sum(t, in); };
  // a generous step keeps the linear difference quotient above roundoff
  const auto r = finite_difference_check<double>(fn, x, 1e-3);
  CHECK(r.max_rel_err < 1e-9);
  CHECK(r.analytic_at_worst == 1.0);
}

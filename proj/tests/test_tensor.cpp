#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "shufflepoint/tensor.hpp"

using namespace spn;

TEST_CASE("shape checks reject bad shapes and lazy grad starts empty") {
  CHECK_THROWS_AS(Tensor::zeros({2, 3, 4, 5, 6}), DimensionError);  // rank 5
  CHECK_THROWS_AS(Tensor::zeros({2, -1}), DimensionError);
  auto t = Tensor::zeros({2, 0});
  CHECK(t->size() == 0);
  auto x = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(x->grad.size() == 0);
  x->ensure_grad();
  CHECK(x->grad.size() == 4);
  CHECK((x->grad == 0.0).all());
}

TEST_CASE("matrix view maps rows x channels over the flat buffer") {
  auto x = Tensor::from({2, 3, 2}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
  auto m = x->matrix();
  CHECK(m.rows() == 6);
  CHECK(m.cols() == 2);
  CHECK(m(0, 0) == 0);
  CHECK(m(0, 1) == 1);
  CHECK(m(5, 1) == 11);
}

TEST_CASE("sum backward fills ones and replay is reverse order") {
  Tape tape;
  auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  auto loss = ops::sum(tape, x);
  CHECK(loss->values[0] == 21.0);
  tape.backward(loss);
  CHECK(x->grad.size() == 6);
  CHECK((x->grad == 1.0).all());

  // Closures replay latest-first.
  std::vector<int> order;
  Tape t2;
  t2.record("first", [&order] { order.push_back(1); });
  t2.record("second", [&order] { order.push_back(2); });
  auto l2 = Tensor::scalar(0.0, true);
  t2.backward(l2);
  REQUIRE(order.size() == 2);
  CHECK(order[0] == 2);
  CHECK(order[1] == 1);
}

TEST_CASE("backward on a non-scalar is a usage error") {
  Tape tape;
  auto x = Tensor::from({2}, {1, 2}, true);
  CHECK_THROWS_AS(tape.backward(x), UsageError);
}

TEST_CASE("conv1x1 matches hand-computed values and gradient") {
  Tape tape;
  // x: 2 rows, 2 channels; W: 2x3; b: 3
  auto x = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  auto w = Tensor::from({2, 3}, {1, 0, 2, 0, 1, 1}, true);
  auto b = Tensor::from({3}, {0.5, -0.5, 0}, true);
  auto y = ops::conv1x1(tape, x, w, b);
  REQUIRE(y->shape == Shape{2, 3});
  // row0: [1*1+2*0+0.5, 1*0+2*1-0.5, 1*2+2*1+0] = [1.5, 1.5, 4]
  CHECK(y->values[0] == doctest::Approx(1.5));
  CHECK(y->values[1] == doctest::Approx(1.5));
  CHECK(y->values[2] == doctest::Approx(4.0));
  // row1: [3*1+4*0+0.5, 3*0+4*1-0.5, 3*2+4*1+0] = [3.5, 3.5, 10]
  CHECK(y->values[3] == doctest::Approx(3.5));
  CHECK(y->values[4] == doctest::Approx(3.5));
  CHECK(y->values[5] == doctest::Approx(10.0));

  auto loss = ops::sum(tape, y);
  tape.backward(loss);
  // dL/dx = ones(2,3) * W^T -> each row [sum of W row j] = [3, 2]
  CHECK(x->grad[0] == doctest::Approx(3.0));
  CHECK(x->grad[1] == doctest::Approx(2.0));
  // dL/dW = x^T * ones -> W[i][j] grad = sum_r x[r][i] = [4,4,4; 6,6,6]
  CHECK(w->grad[0] == doctest::Approx(4.0));
  CHECK(w->grad[3] == doctest::Approx(6.0));
  // dL/db = row count
  CHECK(b->grad[0] == doctest::Approx(2.0));
}

TEST_CASE("conv1x1 is linear in its input") {
  std::mt19937_64 rng(7);
  auto w = Tensor::uniform({4, 3}, -1, 1, rng);
  auto x = Tensor::uniform({6, 4}, -1, 1, rng);
  auto y = Tensor::uniform({6, 4}, -1, 1, rng);
  const double a = 1.7, c = -0.3;

  Tape tape;
  auto mix = Tensor::zeros({6, 4});
  mix->values = a * x->values + c * y->values;
  auto lhs = ops::conv1x1(tape, mix, w);
  auto fx = ops::conv1x1(tape, x, w);
  auto fy = ops::conv1x1(tape, y, w);
  for (Index i = 0; i < lhs->size(); ++i) {
    const double rhs = a * fx->values[i] + c * fy->values[i];
    CHECK(std::abs(lhs->values[i] - rhs) < 1e-10);
  }
}

TEST_CASE("conv1x1 shape mismatches raise dimension errors") {
  Tape tape;
  auto x = Tensor::zeros({2, 3});
  auto w = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(ops::conv1x1(tape, x, w), DimensionError);
  auto w2 = Tensor::zeros({3, 2});
  auto bad_bias = Tensor::zeros({3});
  CHECK_THROWS_AS(ops::conv1x1(tape, x, w2, bad_bias), DimensionError);
}

TEST_CASE("relu zeroes negatives and gates the gradient") {
  Tape tape;
  auto x = Tensor::from({5}, {-2, -0.5, 0, 0.5, 2}, true);
  auto y = ops::relu(tape, x);
  CHECK(y->values[0] == 0.0);
  CHECK(y->values[1] == 0.0);
  CHECK(y->values[2] == 0.0);
  CHECK(y->values[3] == 0.5);
  CHECK(y->values[4] == 2.0);
  auto loss = ops::sum(tape, y);
  tape.backward(loss);
  CHECK(x->grad[0] == 0.0);
  CHECK(x->grad[2] == 0.0);  // gradient at exactly zero stays zero
  CHECK(x->grad[3] == 1.0);
  CHECK(x->grad[4] == 1.0);
}

TEST_CASE("batchnorm training normalizes with batch statistics") {
  Tape tape;
  // one channel, batch {1,2,3,4}: mean 2.5, biased var 1.25
  auto x = Tensor::from({4, 1}, {1, 2, 3, 4}, true);
  auto gamma = Tensor::from({1}, {1}, true);
  auto beta = Tensor::from({1}, {0}, true);
  auto stats = BatchNormStats::init(1);
  const double eps = 1e-5;
  auto y = ops::batchnorm(tape, x, gamma, beta, stats, 0.9, true, eps);
  const double inv = 1.0 / std::sqrt(1.25 + eps);
  CHECK(y->values[0] == doctest::Approx((1 - 2.5) * inv).epsilon(1e-12));
  CHECK(y->values[3] == doctest::Approx((4 - 2.5) * inv).epsilon(1e-12));
  // running = 0.9*initial + 0.1*batch, exactly
  CHECK(stats.running_mean[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 2.5).epsilon(1e-15));
  CHECK(stats.running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 1.25).epsilon(1e-15));
}

TEST_CASE("batchnorm eval is an affine map of running statistics") {
  Tape tape;
  auto x = Tensor::from({2, 1}, {3, 7});
  auto gamma = Tensor::from({1}, {2});
  auto beta = Tensor::from({1}, {-1});
  auto stats = BatchNormStats::init(1);
  stats.running_mean[0] = 1.0;
  stats.running_var[0] = 4.0;
  const double eps = 1e-5;
  auto y = ops::batchnorm(tape, x, gamma, beta, stats, 0.9, false, eps);
  const double inv = 1.0 / std::sqrt(4.0 + eps);
  CHECK(y->values[0] == doctest::Approx(2 * (3 - 1) * inv - 1).epsilon(1e-12));
  CHECK(y->values[1] == doctest::Approx(2 * (7 - 1) * inv - 1).epsilon(1e-12));
  // eval never touches the running buffers
  CHECK(stats.running_mean[0] == 1.0);
  CHECK(stats.running_var[0] == 4.0);
}

TEST_CASE("batchnorm normalizes over all non-channel axes of rank-3 input") {
  Tape tape;
  std::mt19937_64 rng(11);
  auto x = Tensor::uniform({4, 3, 2}, -2, 2, rng);
  auto gamma = Tensor::from({2}, {1, 1});
  auto beta = Tensor::from({2}, {0, 0});
  auto stats = BatchNormStats::init(2);
  auto y = ops::batchnorm(tape, x, gamma, beta, stats, 0.9, true);
  auto m = y->matrix();  // 12 x 2
  for (Index c = 0; c < 2; ++c) {
    CHECK(std::abs(m.col(c).mean()) < 1e-12);
    const double var = m.col(c).array().square().mean();
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));  // shrunk slightly by eps
  }
}

TEST_CASE("maxpool takes the neighbor-axis max and ties go to the lowest slot") {
  Tape tape;
  auto x = Tensor::from({2, 3, 2},
                        {1, 9,   5, 2,   5, 3,     // row 0: ch0 max 5 at k=1 (tie with k=2)
                         7, 0,   7, 4,   6, 4});   // row 1: ch0 max 7 at k=0, ch1 tie k=1
  auto r = ops::maxpool_neighbors(tape, x);
  REQUIRE(r.values->shape == Shape{2, 2});
  CHECK(r.values->values[0] == 5.0);
  CHECK(r.values->values[1] == 9.0);
  CHECK(r.values->values[2] == 7.0);
  CHECK(r.values->values[3] == 4.0);
  CHECK(r.argmax(0, 0) == 1);  // tie between k=1 and k=2 -> lowest
  CHECK(r.argmax(0, 1) == 0);
  CHECK(r.argmax(1, 0) == 0);  // tie between k=0 and k=1 -> lowest
  CHECK(r.argmax(1, 1) == 1);
}

TEST_CASE("maxpool backward routes gradient only to the winning slot") {
  Tape tape;
  auto x = Tensor::from({1, 3, 1}, {1, 5, 2}, true);
  auto r = ops::maxpool_neighbors(tape, x);
  auto loss = ops::sum(tape, r.values);
  tape.backward(loss);
  CHECK(x->grad[0] == 0.0);
  CHECK(x->grad[1] == 1.0);
  CHECK(x->grad[2] == 0.0);
}

TEST_CASE("concat_channels stacks along the channel axis and splits gradient") {
  Tape tape;
  auto a = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  auto b = Tensor::from({2, 1}, {5, 6}, true);
  auto y = ops::concat_channels(tape, a, b);
  REQUIRE(y->shape == Shape{2, 3});
  CHECK(y->values[0] == 1);
  CHECK(y->values[2] == 5);
  CHECK(y->values[5] == 6);
  auto loss = ops::sum(tape, y);
  tape.backward(loss);
  CHECK((a->grad == 1.0).all());
  CHECK((b->grad == 1.0).all());
  auto c = Tensor::zeros({3, 1});
  CHECK_THROWS_AS(ops::concat_channels(tape, a, c), DimensionError);
}

TEST_CASE("softmax cross entropy of uniform logits is ln(classes)") {
  Tape tape;
  auto logits = Tensor::from({2, 4}, {0.7, 0.7, 0.7, 0.7, -3, -3, -3, -3});
  std::vector<std::int64_t> labels = {1, 3};
  auto loss = ops::softmax_cross_entropy(tape, logits, labels);
  CHECK(loss->values[0] == doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("softmax cross entropy is shift invariant and matches a closed form") {
  Tape tape;
  auto logits = Tensor::from({1, 3}, {1.0, 2.0, 3.0});
  std::vector<std::int64_t> labels = {2};
  auto loss = ops::softmax_cross_entropy(tape, logits, labels);
  const double z = std::exp(1.0 - 3.0) + std::exp(2.0 - 3.0) + 1.0;
  CHECK(loss->values[0] == doctest::Approx(std::log(z)).epsilon(1e-14));

  Tape t2;
  auto shifted = Tensor::from({1, 3}, {1.0 + 100, 2.0 + 100, 3.0 + 100});
  auto loss2 = ops::softmax_cross_entropy(t2, shifted, labels);
  CHECK(std::abs(loss2->values[0] - loss->values[0]) < 1e-12);
}

TEST_CASE("softmax cross entropy gradient is softmax minus one-hot over batch") {
  Tape tape;
  auto logits = Tensor::from({2, 2}, {0.0, 0.0, 2.0, -1.0}, true);
  std::vector<std::int64_t> labels = {0, 1};
  auto loss = ops::softmax_cross_entropy(tape, logits, labels);
  tape.backward(loss);
  // row 0: softmax = [.5,.5]; grad = ([.5,.5]-[1,0])/2
  CHECK(logits->grad[0] == doctest::Approx((0.5 - 1.0) / 2).epsilon(1e-12));
  CHECK(logits->grad[1] == doctest::Approx(0.5 / 2).epsilon(1e-12));
  const double p0 = std::exp(2.0) / (std::exp(2.0) + std::exp(-1.0));
  CHECK(logits->grad[2] == doctest::Approx(p0 / 2).epsilon(1e-12));
  CHECK(logits->grad[3] == doctest::Approx(((1 - p0) - 1.0) / 2).epsilon(1e-12));
}

TEST_CASE("softmax cross entropy rejects out-of-range labels") {
  Tape tape;
  auto logits = Tensor::zeros({1, 3});
  std::vector<std::int64_t> bad = {3};
  CHECK_THROWS_AS(ops::softmax_cross_entropy(tape, logits, bad), InputError);
  std::vector<std::int64_t> neg = {-1};
  CHECK_THROWS_AS(ops::softmax_cross_entropy(tape, logits, neg), InputError);
}

TEST_CASE("elementwise add/sub/mul/scale forward and backward") {
  Tape tape;
  auto a = Tensor::from({2}, {3, 4}, true);
  auto b = Tensor::from({2}, {10, 20}, true);
  auto y = ops::scale(tape, ops::add(tape, ops::mul(tape, a, b), ops::sub(tape, b, a)), 0.5);
  // 0.5 * (a*b + b - a): [0.5*(30+7), 0.5*(80+16)] = [18.5, 48]
  CHECK(y->values[0] == 18.5);
  CHECK(y->values[1] == 48.0);
  auto loss = ops::sum(tape, y);
  tape.backward(loss);
  // d/da = 0.5*(b - 1), d/db = 0.5*(a + 1)
  CHECK(a->grad[0] == doctest::Approx(0.5 * 9));
  CHECK(a->grad[1] == doctest::Approx(0.5 * 19));
  CHECK(b->grad[0] == doctest::Approx(0.5 * 4));
  CHECK(b->grad[1] == doctest::Approx(0.5 * 5));
  auto c = Tensor::zeros({3});
  CHECK_THROWS_AS(ops::add(tape, a, c), DimensionError);
}

TEST_CASE("reshape preserves the flat buffer and element count") {
  Tape tape;
  auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  auto y = ops::reshape(tape, x, {3, 2});
  CHECK(y->shape == Shape{3, 2});
  for (Index i = 0; i < 6; ++i) CHECK(y->values[i] == x->values[i]);
  CHECK_THROWS_AS(ops::reshape(tape, x, {4, 2}), DimensionError);
}

TEST_CASE("slice_channels keeps [c0,c1) and scatters gradient back") {
  Tape tape;
  auto x = Tensor::from({2, 4}, {0, 1, 2, 3, 4, 5, 6, 7}, true);
  auto y = ops::slice_channels(tape, x, 1, 3);
  REQUIRE(y->shape == Shape{2, 2});
  CHECK(y->values[0] == 1);
  CHECK(y->values[1] == 2);
  CHECK(y->values[2] == 5);
  CHECK(y->values[3] == 6);
  auto loss = ops::sum(tape, y);
  tape.backward(loss);
  CHECK(x->grad[0] == 0);
  CHECK(x->grad[1] == 1);
  CHECK(x->grad[2] == 1);
  CHECK(x->grad[3] == 0);
  CHECK_THROWS_AS(ops::slice_channels(tape, x, 3, 2), DimensionError);
  CHECK_THROWS_AS(ops::slice_channels(tape, x, 0, 5), DimensionError);
}

TEST_CASE("gather_rows duplicates rows and accumulates gradient per source") {
  Tape tape;
  auto x = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  std::vector<int> idx = {2, 0, 2};
  auto y = ops::gather_rows(tape, x, idx);
  REQUIRE(y->shape == Shape{3, 2});
  CHECK(y->values[0] == 5);
  CHECK(y->values[2] == 1);
  CHECK(y->values[4] == 5);
  auto loss = ops::sum(tape, y);
  tape.backward(loss);
  CHECK(x->grad[0] == 1);  // row 0 used once
  CHECK(x->grad[2] == 0);  // row 1 unused
  CHECK(x->grad[4] == 2);  // row 2 used twice
  std::vector<int> bad = {3};
  CHECK_THROWS_AS(ops::gather_rows(tape, x, bad), InputError);
}

TEST_CASE("gather_neighbors builds N x K x C from a neighbor table") {
  Tape tape;
  auto x = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  RowArrayXXi nbrs(2, 2);
  nbrs << 1, 2, 0, 0;
  auto y = ops::gather_neighbors(tape, x, nbrs);
  REQUIRE(y->shape == Shape{2, 2, 2});
  CHECK(y->values[0] == 3);  // row0 slot0 = point 1
  CHECK(y->values[2] == 5);  // row0 slot1 = point 2
  CHECK(y->values[4] == 1);  // row1 slot0 = point 0
  auto loss = ops::sum(tape, y);
  tape.backward(loss);
  CHECK(x->grad[0] == 2);  // point 0 appears twice
  CHECK(x->grad[2] == 1);
  CHECK(x->grad[4] == 1);
}

TEST_CASE("expand_neighbors repeats each row k times") {
  Tape tape;
  auto x = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  auto y = ops::expand_neighbors(tape, x, 3);
  REQUIRE(y->shape == Shape{2, 3, 2});
  for (Index k = 0; k < 3; ++k) {
    CHECK(y->values[k * 2 + 0] == 1);
    CHECK(y->values[6 + k * 2 + 1] == 4);
  }
  auto loss = ops::sum(tape, y);
  tape.backward(loss);
  CHECK((x->grad == 3.0).all());
}

TEST_CASE("permute_channels applies the permutation and inverts in backward") {
  Tape tape;
  auto x = Tensor::from({1, 3}, {10, 20, 30}, true);
  std::vector<Index> perm = {2, 0, 1};  // output j = input perm[j]
  auto y = ops::permute_channels(tape, x, perm);
  CHECK(y->values[0] == 30);
  CHECK(y->values[1] == 10);
  CHECK(y->values[2] == 20);
  auto w = Tensor::from({3}, {1, 2, 3});
  auto loss = ops::sum(tape, ops::mul(tape, y, ops::reshape(tape, w, {1, 3})));
  tape.backward(loss);
  // dL/dy = [1,2,3] lands at x positions [2,0,1]
  CHECK(x->grad[2] == 1);
  CHECK(x->grad[0] == 2);
  CHECK(x->grad[1] == 3);
  std::vector<Index> bad = {0, 0, 1};
  CHECK_THROWS_AS(ops::permute_channels(tape, x, bad), ConfigError);
}

TEST_CASE("dropout is identity in eval mode and inverted-scaled in training") {
  Tape tape;
  std::mt19937_64 rng(3);
  auto x = Tensor::from({100}, std::vector<double>(100, 2.0));
  auto eval_y = ops::dropout(tape, x, 0.5, rng, false);
  CHECK(eval_y.get() == x.get());

  std::mt19937_64 rng2(3);
  auto y = ops::dropout(tape, x, 0.5, rng2, true);
  int kept = 0;
  for (Index i = 0; i < y->size(); ++i) {
    if (y->values[i] != 0.0) {
      CHECK(y->values[i] == doctest::Approx(4.0));  // 2 / (1 - 0.5)
      ++kept;
    }
  }
  CHECK(kept > 20);
  CHECK(kept < 80);

  // deterministic per seed
  std::mt19937_64 rng3(3);
  Tape t3;
  auto y2 = ops::dropout(t3, x, 0.5, rng3, true);
  for (Index i = 0; i < y->size(); ++i) CHECK(y->values[i] == y2->values[i]);

  CHECK_THROWS_AS(ops::dropout(tape, x, 1.0, rng, true), ConfigError);
  CHECK_THROWS_AS(ops::dropout(tape, x, -0.1, rng, true), ConfigError);
}

TEST_CASE("gradients accumulate across reuse of the same tensor") {
  Tape tape;
  auto x = Tensor::from({2}, {1, 2}, true);
  auto y = ops::add(tape, x, x);
  auto loss = ops::sum(tape, y);
  tape.backward(loss);
  CHECK(x->grad[0] == 2.0);
  CHECK(x->grad[1] == 2.0);
}

TEST_CASE("tape clear empties the op list") {
  Tape tape;
  auto x = Tensor::from({2}, {1, 2}, true);
  ops::sum(tape, x);
  CHECK(tape.num_ops() > 0);
  tape.clear();
  CHECK(tape.num_ops() == 0);
}

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "dubox/ops.hpp"
#include "dubox/optim.hpp"
#include "support/oracles.hpp"

namespace dubox {
namespace {

using testing::check_gradients;
using testing::random_tensor;

double inner(const Tensor64& a, const Tensor64& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

Tensor64 grad_of(const Tensor64& x) {
  return Tensor64(x.shape(), std::vector<double>(x.grad().begin(), x.grad().end()));
}

TEST(Tensor, ShapeAndValueContracts) {
  EXPECT_THROW(Tensor64(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  Tensor64 t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_THROW(t.item(), ContractError);
  EXPECT_THROW(t.dim(2), ShapeError);
  t[4] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(t.check_finite("probe"), NumericError);
}

TEST(Tensor, CopiesShareStorageAndDetachDoesNot) {
  Tensor64 a(Shape{3}, 1.0);
  Tensor64 b = a;
  b[0] = 7;
  EXPECT_EQ(a[0], 7);
  Tensor64 c = a.detach();
  c[1] = 9;
  EXPECT_EQ(a[1], 1);
  EXPECT_TRUE(a.shares_storage_with(b));
  EXPECT_FALSE(a.shares_storage_with(c));
}

TEST(Conv2d, Examples) {
  const Tensor64 x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  const Tensor64 y = ops::conv2d(x, Tensor64(Shape{1, 1, 1, 1}, {2}), Tensor64(Shape{1}, {0}));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{2, 4, 6, 8}));

  const Tensor64 z = ops::conv2d(x, Tensor64(Shape{1, 1, 2, 2}, {1, 0, 0, 1}), Tensor64(Shape{1}, {1}));
  EXPECT_EQ(z.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(z[0], 6);

  std::mt19937_64 rng(1);
  const Tensor64 any = random_tensor({2, 3, 7, 5}, rng);
  const Tensor64 zero = ops::conv2d(any, Tensor64(Shape{4, 3, 3, 3}), Tensor64(Shape{4}), 2, 1);
  EXPECT_EQ(zero.shape(), (Shape{2, 4, 4, 3}));
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, RejectsBadShapes) {
  const Tensor64 x(Shape{1, 2, 4, 4});
  EXPECT_THROW(ops::conv2d(x, Tensor64(Shape{1, 3, 1, 1}), Tensor64(Shape{1})), ShapeError);
  EXPECT_THROW(ops::conv2d(x, Tensor64(Shape{1, 2, 1, 1}), Tensor64(Shape{2})), ShapeError);
  EXPECT_THROW(ops::conv2d(x, Tensor64(Shape{1, 2, 5, 5}), Tensor64(Shape{1})), ShapeError);
  EXPECT_THROW(ops::conv2d(Tensor64(Shape{2, 4, 4}), Tensor64(Shape{1, 2, 1, 1}), Tensor64(Shape{1})),
               ShapeError);
  EXPECT_THROW(ops::conv2d(x, Tensor64(Shape{1, 2, 1, 1}), Tensor64(Shape{1}), 0), ContractError);
}

TEST(Conv2d, NonFiniteOutputIsReported) {
  const Tensor64 x(Shape{1, 1, 1, 1}, 1e300);
  EXPECT_THROW(ops::conv2d(x, Tensor64(Shape{1, 1, 1, 1}, 1e300), Tensor64(Shape{1})), NumericError);
}

TEST(Deconv2d, Examples) {
  const Tensor64 y = ops::deconv2d(Tensor64(Shape{1, 1, 1, 1}, {3}), Tensor64(Shape{1, 1, 1, 1}, {1}),
                                   Tensor64(Shape{1}, {0}), 2);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{3, 0, 0, 0}));

  const Tensor64 b = ops::deconv2d(Tensor64(Shape{1, 2, 3, 3}), Tensor64(Shape{2, 2, 2, 2}, 0.7),
                                   Tensor64(Shape{2}, {0.25, -1}), 2);
  for (std::size_t i = 0; i < 36; ++i) EXPECT_EQ(b[i], 0.25);
  for (std::size_t i = 36; i < 72; ++i) EXPECT_EQ(b[i], -1.0);
}

TEST(Deconv2d, RejectsKernelLargerThanStride) {
  EXPECT_THROW(ops::deconv2d(Tensor64(Shape{1, 1, 2, 2}), Tensor64(Shape{1, 1, 3, 3}), Tensor64(Shape{1}), 2),
               ShapeError);
}

TEST(Deconv2d, IsTheAdjointOfConv2d) {
  std::mt19937_64 rng(2);
  struct Case {
    std::size_t cin, cout, k, stride, h, w;
  };
  for (const Case& c : {Case{1, 1, 1, 2, 4, 4}, Case{3, 2, 1, 2, 6, 8}, Case{2, 3, 2, 2, 8, 4},
                        Case{4, 4, 1, 1, 3, 5}, Case{2, 2, 3, 3, 9, 6}}) {
    const Tensor64 w = random_tensor({c.cout, c.cin, c.k, c.k}, rng);
    const Tensor64 zero(Shape{c.cout}), zero_in(Shape{c.cin});
    const Tensor64 x = random_tensor({2, c.cin, c.h, c.w}, rng);
    const Tensor64 cx = ops::conv2d(x, w, zero, c.stride, 0);
    const Tensor64 y = random_tensor(cx.shape(), rng);
    // deconv's weight is indexed [its Cin = conv Cout, its Cout = conv Cin].
    const Tensor64 dy = ops::deconv2d(y, w, zero_in, c.stride);
    ASSERT_EQ(dy.shape(), x.shape());
    EXPECT_NEAR(inner(cx, y), inner(x, dy), 1e-9 * std::max(1.0, std::abs(inner(cx, y))));
  }
}

TEST(Pointwise, Examples) {
  const Tensor64 r = ops::relu(Tensor64(Shape{3}, {-1, 0, 2}));
  EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), (std::vector<double>{0, 0, 2}));
  EXPECT_EQ(ops::sigmoid(Tensor64(Shape{1}, {0.0})).item(), 0.5);
  EXPECT_NEAR(ops::sigmoid(Tensor64(Shape{1}, {std::log(3.0)})).item(), 0.75, 1e-15);
  EXPECT_EQ(ops::scale(Tensor64(Shape{2}, {1, -2}), 3.0)[1], -6);

  const Tensor64 a(Shape{1, 2, 1, 2}, {1, 2, 3, 4});
  const Tensor64 ch(Shape{2}, {10, 100});
  const Tensor64 s = ops::add(a, ch);
  EXPECT_EQ(std::vector<double>(s.data().begin(), s.data().end()), (std::vector<double>{11, 12, 103, 104}));
  const Tensor64 m = ops::mul(a, ch);
  EXPECT_EQ(std::vector<double>(m.data().begin(), m.data().end()), (std::vector<double>{10, 20, 300, 400}));

  const Tensor64 d = ops::pointwise(a, ops::PointwiseKind::kMul, &a);
  EXPECT_EQ(d[3], 16);
  EXPECT_EQ(ops::pointwise<double>(a, ops::PointwiseKind::kScale, nullptr, 0.5)[2], 1.5);
}

TEST(Pointwise, ShapeMismatchIsAnError) {
  const Tensor64 a(Shape{1, 2, 2, 2});
  EXPECT_THROW(ops::add(a, Tensor64(Shape{1, 2, 2, 1})), ShapeError);
  EXPECT_THROW(ops::mul(a, Tensor64(Shape{3})), ShapeError);
  EXPECT_THROW(ops::pointwise(a, ops::PointwiseKind::kAdd), ContractError);
}

TEST(Sigmoid, StaysFiniteAtExtremes) {
  const Tensor64 s = ops::sigmoid(Tensor64(Shape{2}, {-800, 800}));
  EXPECT_EQ(s[0], 0.0);
  EXPECT_EQ(s[1], 1.0);
}

TEST(Backward, Examples) {
  Tensor64 x(Shape{2}, {1, 2});
  x.set_requires_grad(true);
  {
    Tape<double> tape;
    Tensor64 loss;
    {
      TapeScope<double> scope(tape);
      loss = ops::sum(ops::scale(x, 3.0));
    }
    tape.backward(loss);
  }
  EXPECT_EQ(x.grad()[0], 3);
  EXPECT_EQ(x.grad()[1], 3);

  Tensor64 z(Shape{1}, {0.0});
  z.set_requires_grad(true);
  Tape<double> tape;
  Tensor64 loss;
  {
    TapeScope<double> scope(tape);
    loss = ops::sum(ops::sigmoid(z));
  }
  tape.backward(loss);
  EXPECT_EQ(z.grad()[0], 0.25);
}

TEST(Backward, NonScalarLossIsRejected) {
  Tape<double> tape;
  Tensor64 v(Shape{2});
  EXPECT_THROW(tape.backward(v), ContractError);
  std::vector<Parameter<double>> none;
  EXPECT_THROW(backward(tape, v, std::span<Parameter<double>>(none)), ContractError);
}

TEST(Backward, UnusedParametersGetZeroGradient) {
  std::vector<Parameter<double>> params(2);
  params[0] = Parameter<double>("used", Tensor64(Shape{2}, 1.0));
  params[1] = Parameter<double>("unused", Tensor64(Shape{3}, 1.0));
  Tape<double> tape;
  Tensor64 loss;
  {
    TapeScope<double> scope(tape);
    loss = ops::sum(ops::mul(params[0].value, params[0].value));
  }
  backward(tape, loss, std::span<Parameter<double>>(params));
  EXPECT_EQ(params[0].value.grad()[1], 2.0);
  ASSERT_TRUE(params[1].value.has_grad());
  for (double g : params[1].value.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, RepeatedPassesDoNotAccumulateIntoParameters) {
  std::vector<Parameter<double>> params(1);
  params[0] = Parameter<double>("w", Tensor64(Shape{2}, {1, 2}));
  for (int pass = 0; pass < 3; ++pass) {
    Tape<double> tape;
    Tensor64 loss;
    {
      TapeScope<double> scope(tape);
      loss = ops::sum(ops::scale(params[0].value, 5.0));
    }
    backward(tape, loss, std::span<Parameter<double>>(params));
    EXPECT_EQ(params[0].value.grad()[0], 5.0);
  }
}

TEST(Backward, NonFiniteParameterGradientIsReported) {
  std::vector<Parameter<double>> params(1);
  params[0] = Parameter<double>("w", Tensor64(Shape{1}, 1.0));
  Tape<double> tape;
  Tensor64 loss;
  {
    TapeScope<double> scope(tape);
    loss = ops::sum(ops::scale(params[0].value, 1e200));
  }
  tape.record("poison", [w = params[0].value] { w.mutable_grad()[0] = std::numeric_limits<double>::infinity(); });
  EXPECT_THROW(backward(tape, loss, std::span<Parameter<double>>(params)), NumericError);
}

TEST(Backward, IsDeterministic) {
  std::mt19937_64 rng(3);
  const Tensor64 x0 = random_tensor({2, 3, 6, 6}, rng);
  const Tensor64 w0 = random_tensor({4, 3, 3, 3}, rng);
  auto run = [&] {
    Tensor64 x = x0.detach(), w = w0.detach();
    x.set_requires_grad(true);
    w.set_requires_grad(true);
    Tape<double> tape;
    Tensor64 loss;
    {
      TapeScope<double> scope(tape);
      loss = ops::sum(ops::sigmoid(ops::conv2d(x, w, Tensor64(Shape{4}), 1, 1)));
    }
    tape.backward(loss);
    return std::pair{grad_of(x), grad_of(w)};
  };
  const auto a = run();
  const auto b = run();
  for (std::size_t i = 0; i < a.first.numel(); ++i) EXPECT_EQ(a.first[i], b.first[i]);
  for (std::size_t i = 0; i < a.second.numel(); ++i) EXPECT_EQ(a.second[i], b.second[i]);
}

TEST(Backward, NoGradScopeRecordsNothing) {
  Tensor64 x(Shape{2}, 1.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    NoGradScope<double> off;
    const Tensor64 y = ops::scale(x, 2.0);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_EQ(tape.size(), 0u);
}

// ---- finite differences -----------------------------------------------------

class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, ConvMatchesFiniteDifferences) {
  std::mt19937_64 rng(100 + GetParam());
  std::uniform_int_distribution<std::size_t> ch(1, 3), k(1, 3), st(1, 2), pad(0, 1), sp(3, 7);
  const std::size_t kk = k(rng);
  Tensor64 x = random_tensor({2, ch(rng), sp(rng) + kk, sp(rng) + kk}, rng);
  Tensor64 w = random_tensor({ch(rng), x.dim(1), kk, kk}, rng);
  Tensor64 b = random_tensor({w.dim(0)}, rng);
  const std::size_t s = st(rng), p = pad(rng);
  const Tensor64 probe = random_tensor(ops::conv2d(x, w, b, s, p).shape(), rng);
  const auto res = check_gradients(
      [&] { return ops::sum(ops::mul(ops::conv2d(x, w, b, s, p), probe)); }, {x, w, b}, rng);
  EXPECT_LE(res.max_rel_error, 1e-6);
}

TEST_P(OpGradient, DeconvMatchesFiniteDifferences) {
  std::mt19937_64 rng(200 + GetParam());
  std::uniform_int_distribution<std::size_t> ch(1, 3), st(1, 3), sp(1, 4);
  const std::size_t s = st(rng);
  const std::size_t kk = std::uniform_int_distribution<std::size_t>(1, s)(rng);
  Tensor64 x = random_tensor({2, ch(rng), sp(rng), sp(rng)}, rng);
  Tensor64 w = random_tensor({x.dim(1), ch(rng), kk, kk}, rng);
  Tensor64 b = random_tensor({w.dim(1)}, rng);
  const Tensor64 probe = random_tensor(ops::deconv2d(x, w, b, s).shape(), rng);
  const auto res = check_gradients(
      [&] { return ops::sum(ops::mul(ops::deconv2d(x, w, b, s), probe)); }, {x, w, b}, rng);
  EXPECT_LE(res.max_rel_error, 1e-6);
}

TEST_P(OpGradient, PointwiseMatchesFiniteDifferences) {
  std::mt19937_64 rng(300 + GetParam());
  const Shape shape{2, 3, 3, 2};
  // Keep relu inputs away from the kink so central differences stay exact.
  Tensor64 x = random_tensor(shape, rng);
  for (double& v : x.data()) v = v < 0 ? v - 0.1 : v + 0.1;
  Tensor64 y = random_tensor(shape, rng);
  Tensor64 c = random_tensor({3}, rng);
  const Tensor64 probe = random_tensor(shape, rng);
  auto project = [&](const Tensor64& t) { return ops::sum(ops::mul(t, probe)); };
  EXPECT_LE(check_gradients([&] { return project(ops::relu(x)); }, {x}, rng).max_rel_error, 1e-6);
  EXPECT_LE(check_gradients([&] { return project(ops::sigmoid(x)); }, {x}, rng).max_rel_error, 1e-6);
  EXPECT_LE(check_gradients([&] { return project(ops::add(x, y)); }, {x, y}, rng).max_rel_error, 1e-6);
  EXPECT_LE(check_gradients([&] { return project(ops::add(x, c)); }, {x, c}, rng).max_rel_error, 1e-6);
  EXPECT_LE(check_gradients([&] { return project(ops::mul(x, y)); }, {x, y}, rng).max_rel_error, 1e-6);
  EXPECT_LE(check_gradients([&] { return project(ops::mul(x, c)); }, {x, c}, rng).max_rel_error, 1e-6);
  EXPECT_LE(check_gradients([&] { return project(ops::scale(x, -1.7)); }, {x}, rng).max_rel_error, 1e-6);
}

TEST_P(OpGradient, DeepCompositionMatchesFiniteDifferences) {
  std::mt19937_64 rng(400 + GetParam());
  Tensor64 x = random_tensor({1, 2, 8, 8}, rng);
  Tensor64 w1 = random_tensor({3, 2, 3, 3}, rng);
  Tensor64 w2 = random_tensor({3, 3, 1, 1}, rng);
  Tensor64 w3 = random_tensor({3, 2, 1, 1}, rng);
  Tensor64 c = random_tensor({2}, rng);
  const Tensor64 z3(Shape{3}), z2(Shape{2});
  // A signed probe keeps the loss small so central differences are not
  // swamped by rounding in a large sum.
  const Tensor64 probe = random_tensor({1, 2, 8, 8}, rng);
  auto loss = [&] {
    const Tensor64 a = ops::sigmoid(ops::conv2d(x, w1, z3, 2, 1));
    const Tensor64 b = ops::conv2d(a, w2, z3);
    const Tensor64 u = ops::deconv2d(ops::mul(a, b), w3, z2, 2);
    return ops::sum(ops::mul(ops::scale(ops::add(ops::sigmoid(u), c), 0.5), probe));
  };
  EXPECT_LE(check_gradients(loss, {x, w1, w2, w3, c}, rng).max_rel_error, 1e-6);
}

INSTANTIATE_TEST_SUITE_P(Random, OpGradient, ::testing::Range(0, 20));

// ---- optimizer --------------------------------------------------------------

std::vector<Parameter<double>> one_param(double value, double grad) {
  std::vector<Parameter<double>> p(1);
  p[0] = Parameter<double>("x", Tensor64(Shape{1}, value));
  p[0].value.mutable_grad()[0] = grad;
  return p;
}

TEST(Sgd, PlainStep) {
  auto p = one_param(1.0, 2.0);
  sgd_step<double>(p, {.lr = 0.1, .momentum = 0, .weight_decay = 0, .clip = 100});
  EXPECT_NEAR(p[0].value[0], 0.8, 1e-15);
}

TEST(Sgd, ClipsByGlobalNorm) {
  std::vector<Parameter<double>> p(2);
  p[0] = Parameter<double>("a", Tensor64(Shape{1}, 0.0));
  p[1] = Parameter<double>("b", Tensor64(Shape{1}, 0.0));
  p[0].value.mutable_grad()[0] = 12;
  p[1].value.mutable_grad()[0] = 16;
  const auto stats = sgd_step<double>(p, {.lr = 1, .momentum = 0, .weight_decay = 0, .clip = 10});
  EXPECT_EQ(stats.grad_norm, 20);
  EXPECT_EQ(stats.clip_scale, 0.5);
  EXPECT_EQ(p[0].value[0], -6);
  EXPECT_EQ(p[1].value[0], -8);
}

TEST(Sgd, MomentumRecurrence) {
  auto p = one_param(0.0, 1.0);
  const SgdOptions o{.lr = 1, .momentum = 0.9, .weight_decay = 0, .clip = 100};
  sgd_step<double>(p, o);
  sgd_step<double>(p, o);
  EXPECT_NEAR(p[0].value[0], -2.9, 1e-15);
}

TEST(Sgd, WeightDecayEntersTheVelocity) {
  auto p = one_param(2.0, 0.0);
  sgd_step<double>(p, {.lr = 0.5, .momentum = 0, .weight_decay = 0.1, .clip = 100});
  EXPECT_NEAR(p[0].value[0], 1.9, 1e-15);
}

TEST(Sgd, RejectsBadOptionsAndMissingGradients) {
  auto p = one_param(0.0, 1.0);
  EXPECT_THROW(sgd_step<double>(p, {.lr = 0}), ContractError);
  EXPECT_THROW(sgd_step<double>(p, {.lr = -1}), ContractError);
  std::vector<Parameter<double>> bare(1);
  bare[0] = Parameter<double>("x", Tensor64(Shape{1}));
  EXPECT_THROW(sgd_step<double>(bare, {}), ContractError);
}

TEST(Sgd, DecreasesAConvexQuadratic) {
  std::vector<Parameter<double>> p(1);
  std::mt19937_64 rng(4);
  p[0] = Parameter<double>("x", random_tensor({5}, rng));
  const SgdOptions o{.lr = 1e-3, .momentum = 0, .weight_decay = 0,
                     .clip = std::numeric_limits<double>::infinity()};
  auto value = [&] { return inner(p[0].value, p[0].value); };
  double prev = value();
  for (int k = 0; k < 100; ++k) {
    Tape<double> tape;
    Tensor64 loss;
    {
      TapeScope<double> scope(tape);
      loss = ops::sum(ops::mul(p[0].value, p[0].value));
    }
    backward(tape, loss, std::span<Parameter<double>>(p));
    sgd_step<double>(p, o);
    const double now = value();
    ASSERT_LT(now, prev);
    prev = now;
  }
}

}  // namespace
}  // namespace dubox

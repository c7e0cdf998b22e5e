#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "ppr/autograd.hpp"
#include "ppr/rng.hpp"

using namespace ppr;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor(std::move(shape), std::move(v));
}

// Central-difference check of a scalar function of named inputs.
double fd_error(const std::function<Tensor(const ParamMap&)>& f, ParamStore store) {
  return finite_diff_check(f, store, 1e-6).max_rel_error;
}

}  // namespace

TEST(Autograd, SigmoidOfZero) { EXPECT_EQ(sigmoid(Tensor::vector({0.0}))[0], 0.5); }

TEST(Autograd, IdentityMatmul) {
  const Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor m = Tensor::matrix({{3, 4}, {5, 6}});
  EXPECT_TRUE(bit_equal(matmul(eye, m), m));
}

TEST(Autograd, SoftmaxUniform) {
  const Tensor s = softmax(Tensor::matrix({{0, 0, 0}}));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(s[i], 1.0 / 3.0, 1e-15);
}

TEST(Autograd, SquareGradient) {
  Tape tape;
  const Tensor x = tape.leaf(Tensor::vector({3.0}));
  const Gradients g = tape.backward(sum(mul(x, x)));
  EXPECT_EQ(g.of(x)[0], 6.0);
}

TEST(Autograd, SigmoidGradient) {
  Tape tape;
  const Tensor x = tape.leaf(Tensor::vector({0.0}));
  const Gradients g = tape.backward(sum(sigmoid(x)));
  EXPECT_EQ(g.of(x)[0], 0.25);
}

TEST(Autograd, NonScalarLossRejected) {
  Tape tape;
  const Tensor x = tape.leaf(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(tape.backward(mul(x, x)), ShapeError);
}

TEST(Autograd, BackwardTwiceRejected) {
  Tape tape;
  const Tensor x = tape.leaf(Tensor::vector({1.0}));
  const Tensor l = sum(x);
  tape.backward(l);
  EXPECT_THROW(tape.backward(l), std::logic_error);
}

TEST(Autograd, ShapeErrorNamesKindAndShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
  }
  EXPECT_THROW(add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
}

TEST(Autograd, LogDomainError) {
  EXPECT_THROW(log(Tensor::vector({1.0, 0.0})), DomainError);
  EXPECT_THROW(log(Tensor::vector({-1.0})), DomainError);
}

TEST(Autograd, ExpectedGradientsForEveryPrimitive) {
  Rng rng(7);
  ParamStore s;
  s.add("a", random_tensor(rng, {3, 4}));
  s.add("b", random_tensor(rng, {4, 2}));
  s.add("c", random_tensor(rng, {3, 4}));
  s.add("p", random_tensor(rng, {3, 4}, 0.5, 2.0));
  s.add("v", random_tensor(rng, {4}));

  using F = std::function<Tensor(const ParamMap&)>;
  const std::vector<std::pair<std::string, F>> cases = {
      {"matmul", [](const ParamMap& m) { return sum(tanh(matmul(m.at("a"), m.at("b")))); }},
      {"matmul_nt", [](const ParamMap& m) { return sum(tanh(matmul_nt(m.at("a"), m.at("c")))); }},
      {"add", [](const ParamMap& m) { return sum(tanh(add(m.at("a"), m.at("c")))); }},
      {"sub", [](const ParamMap& m) { return sum(tanh(sub(m.at("a"), m.at("c")))); }},
      {"mul", [](const ParamMap& m) { return sum(mul(m.at("a"), m.at("c"))); }},
      {"concat0", [](const ParamMap& m) { return sum(tanh(concat({m.at("a"), m.at("c")}, 0))); }},
      {"concat1", [](const ParamMap& m) { return sum(sigmoid(concat({m.at("a"), m.at("c")}, 1))); }},
      {"slice", [](const ParamMap& m) { return sum(tanh(slice(m.at("a"), 1, 1, 3))); }},
      {"sum_axis", [](const ParamMap& m) { return sum(tanh(sum(m.at("a"), 1))); }},
      {"mean", [](const ParamMap& m) { return mean(mul(m.at("a"), m.at("a"))); }},
      {"sigmoid", [](const ParamMap& m) { return sum(sigmoid(m.at("a"))); }},
      {"tanh", [](const ParamMap& m) { return sum(tanh(m.at("a"))); }},
      {"relu", [](const ParamMap& m) { return sum(mul(relu(m.at("p")), m.at("c"))); }},
      {"exp", [](const ParamMap& m) { return sum(exp(m.at("a"))); }},
      {"log", [](const ParamMap& m) { return sum(log(m.at("p"))); }},
      {"softmax", [](const ParamMap& m) { return sum(mul(softmax(m.at("a")), m.at("c"))); }},
      {"log_softmax", [](const ParamMap& m) { return sum(mul(log_softmax(m.at("a")), m.at("c"))); }},
      {"scalar_mul", [](const ParamMap& m) { return sum(tanh(scalar_mul(m.at("a"), -2.5))); }},
      {"broadcast_rows", [](const ParamMap& m) { return sum(tanh(add(m.at("a"), broadcast_rows(m.at("v"), 3)))); }},
      {"row_mask", [](const ParamMap& m) { return sum(tanh(row_mask(m.at("a"), {1, 0, 1}))); }},
      {"reshape", [](const ParamMap& m) { return sum(mul(reshape(m.at("a"), {12}), reshape(m.at("c"), {12}))); }},
  };
  for (const auto& [name, f] : cases) {
    EXPECT_LT(fd_error(f, s), 1e-6) << name;
  }
}

TEST(Autograd, SoftmaxRowsAreDistributions) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor(rng, {5, 7}, -30.0, 30.0);
    const Tensor p = softmax(x);
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_GE(p[r * 7 + c], 0.0);
        s += p[r * 7 + c];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Autograd, LogSoftmaxStableForLargeLogits) {
  const Tensor l = log_softmax(Tensor::matrix({{1000.0, 0.0}}));
  EXPECT_TRUE(std::isfinite(l[1]));
  EXPECT_NEAR(l[0], 0.0, 1e-12);
  EXPECT_NEAR(l[1], -1000.0, 1e-9);
}

TEST(Autograd, DeterministicValuesAndGradients) {
  auto run = [] {
    Rng rng(3);
    Tape tape;
    const Tensor w = tape.leaf(random_tensor(rng, {4, 4}));
    const Tensor x = random_tensor(rng, {2, 4});
    const Tensor l = mean(tanh(matmul_nt(x, w)));
    const Gradients g = tape.backward(l);
    return std::make_pair(l.detach(), g.of(w));
  };
  const auto a = run();
  const auto b = run();
  EXPECT_TRUE(bit_equal(a.first, b.first));
  EXPECT_TRUE(bit_equal(a.second, b.second));
}

TEST(Autograd, TapeReplayIsBitExact) {
  Rng rng(5);
  Tape tape;
  const Tensor a = tape.leaf(random_tensor(rng, {3, 4}));
  const Tensor b = random_tensor(rng, {4, 4});
  Tensor h = a;
  for (int i = 0; i < 5; ++i) h = tanh(add(matmul(h, b), row_mask(h, {1, 0, 1})));
  const Tensor l = sum(log_softmax(h));
  EXPECT_TRUE(tape.replay_matches());
  tape.backward(l);
}

TEST(Autograd, ParentsPrecedeChildren) {
  Tape tape;
  const Tensor a = tape.leaf(Tensor::vector({1.0, 2.0}));
  const Tensor b = mul(exp(a), Tensor::vector({3.0, 4.0}));
  sum(b);
  for (std::size_t i = 0; i < tape.size(); ++i) {
    for (int p : tape.node(i).parents) EXPECT_LT(static_cast<std::size_t>(p), i);
  }
}

TEST(Autograd, GradientShapesMatchValues) {
  Rng rng(9);
  Tape tape;
  const Tensor a = tape.leaf(random_tensor(rng, {2, 3}));
  const Tensor v = tape.leaf(random_tensor(rng, {3}));
  const Tensor l = sum(tanh(add(a, broadcast_rows(v, 2))));
  const Gradients g = tape.backward(l);
  for (std::size_t i = 0; i < tape.size(); ++i) {
    EXPECT_TRUE(g.reached_node(i)) << "node " << i;
  }
  EXPECT_EQ(g.of(a).shape(), a.shape());
  EXPECT_EQ(g.of(v).shape(), v.shape());
}

TEST(Autograd, RowMaskBlocksGradientAndZeroesRows) {
  Tape tape;
  const Tensor a = tape.leaf(Tensor::matrix({{1, 2}, {3, 4}}));
  const Tensor m = row_mask(a, {0, 1});
  EXPECT_EQ(m[0], 0.0);
  EXPECT_FALSE(std::signbit(m[0]));
  EXPECT_EQ(m[2], 3.0);
  const Gradients g = tape.backward(sum(mul(m, m)));
  EXPECT_EQ(g.of(a)[0], 0.0);
  EXPECT_EQ(g.of(a)[2], 6.0);
}

TEST(FiniteDiff, TanhOfLinearMap) {
  Rng rng(13);
  ParamStore s;
  s.add("W", random_tensor(rng, {3, 4}, -0.1, 0.1));
  const Tensor x = random_tensor(rng, {4, 2});
  const auto rep = finite_diff_check([&](const ParamMap& m) { return sum(tanh(matmul(m.at("W"), x))); }, s, 1e-6);
  EXPECT_LT(rep.max_rel_error, 1e-6);
  EXPECT_EQ(rep.checked, 12u);
}

TEST(FiniteDiff, ConstantFunctionHasZeroError) {
  ParamStore s;
  s.add("W", Tensor::vector({1.0, 2.0}));
  const auto rep = finite_diff_check([](const ParamMap&) { return Tensor::scalar(3.0); }, s, 1e-5);
  EXPECT_EQ(rep.max_rel_error, 0.0);
  EXPECT_EQ(rep.analytic, 0.0);
}

TEST(FiniteDiff, RejectsNonDeterministicFunction) {
  ParamStore s;
  s.add("W", Tensor::vector({1.0}));
  int calls = 0;
  EXPECT_THROW(finite_diff_check([&](const ParamMap& m) { return scalar_mul(sum(m.at("W")), ++calls); }, s, 1e-5),
               std::runtime_error);
}

TEST(FiniteDiff, RejectsNonPositiveEpsilon) {
  ParamStore s;
  s.add("W", Tensor::vector({1.0}));
  EXPECT_THROW(finite_diff_check([](const ParamMap& m) { return sum(m.at("W")); }, s, 0.0), std::invalid_argument);
}

TEST(ParamStore, InsertionOrderAndUniqueness) {
  ParamStore s;
  s.add("z", Tensor::vector({1.0}));
  s.add("a", Tensor::vector({2.0}));
  EXPECT_EQ(s.names(), (std::vector<std::string>{"z", "a"}));
  EXPECT_THROW(s.add("z", Tensor::vector({3.0})), std::invalid_argument);
  EXPECT_THROW(s.set("a", Tensor::vector({1.0, 2.0})), ShapeError);
}

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "ppr/cores.hpp"

using namespace ppr;

namespace {

LstmParams zero_lstm(std::size_t d, std::size_t h) {
  return {Tensor::zeros({4 * h, d}), Tensor::zeros({4 * h, h}), Tensor::zeros({4 * h})};
}

AgentConfig config_for(Architecture a, std::size_t hidden, bool share = true) {
  AgentConfig c;
  c.arch = a;
  c.hidden = hidden;
  c.share_fast = share;
  return c;
}

}  // namespace

TEST(Lstm, ZeroEverythingIsFixedPoint) {
  const LstmState s = lstm_step(Tensor::zeros({2, 3}), LstmState::zeros(2, 4), zero_lstm(3, 4));
  for (double v : s.h.data()) EXPECT_EQ(v, 0.0);
  for (double v : s.c.data()) EXPECT_EQ(v, 0.0);
}

TEST(Lstm, ZeroParamsUnitCell) {
  const LstmState s =
      lstm_step(Tensor::zeros({1, 1}), {Tensor::zeros({1, 1}), Tensor::full({1, 1}, 1.0)}, zero_lstm(1, 1));
  EXPECT_DOUBLE_EQ(s.c[0], 0.5);
  EXPECT_NEAR(s.h[0], 0.23105857863000487, 1e-15);
}

TEST(Lstm, SaturatedForgetGatePreservesCell) {
  LstmParams p = zero_lstm(2, 3);
  std::vector<double> b(12, 0.0);
  for (std::size_t i = 3; i < 6; ++i) b[i] = 1e3;
  p.b = Tensor({12}, b);
  const Tensor c = Tensor::matrix({{0.3, -1.2, 2.5}});
  const LstmState s = lstm_step(Tensor::zeros({1, 2}), {Tensor::zeros({1, 3}), c}, p);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(s.c[i], c[i]);
}

TEST(Lstm, ShapeErrorsNameTheOffender) {
  const LstmParams p = zero_lstm(3, 4);
  auto message = [&](const Tensor& x, const LstmState& s) {
    try {
      lstm_step(x, s, p);
    } catch (const ShapeError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message(Tensor::zeros({1, 2}), LstmState::zeros(1, 4)).find("input x"), std::string::npos);
  EXPECT_NE(message(Tensor::zeros({1, 3}), {Tensor::zeros({1, 5}), Tensor::zeros({1, 4})}).find("hidden state h"),
            std::string::npos);
  EXPECT_NE(message(Tensor::zeros({1, 3}), {Tensor::zeros({1, 4}), Tensor::zeros({2, 4})}).find("cell state c"),
            std::string::npos);
}

TEST(Mlp, ZeroWeightsGiveUniformPolicy) {
  MlpParams p{{{Tensor::zeros({4, 3}), Tensor::zeros({4}), Activation::kNone}}};
  const Tensor logits = mlp_forward(Tensor::matrix({{1, 2, 3}}), p);
  const Tensor probs = softmax(logits);
  for (double v : probs.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Mlp, IdentityLayer) {
  MlpParams p{{{Tensor::matrix({{1, 0}, {0, 1}}), Tensor::zeros({2}), Activation::kNone}}};
  const Tensor x = Tensor::matrix({{0.7, -3.0}});
  EXPECT_TRUE(bit_equal(mlp_forward(x, p), x));
}

TEST(Mlp, TwoLayerMatchesHandComputation) {
  MlpParams p{{{Tensor::matrix({{0.5, -1.0}, {2.0, 0.25}, {-0.75, 1.5}}), Tensor::vector({0.1, -0.2, 0.3}),
                Activation::kRelu},
               {Tensor::matrix({{1.0, -2.0, 0.5}}), Tensor::vector({0.05}), Activation::kNone}}};
  const Tensor y = mlp_forward(Tensor::matrix({{0.3, -0.7}}), p);
  EXPECT_NEAR(y[0], 0.55, 1e-12);
}

TEST(Mlp, ShapeMismatch) {
  MlpParams p{{{Tensor::zeros({4, 3}), Tensor::zeros({4}), Activation::kNone}}};
  EXPECT_THROW(mlp_forward(Tensor::zeros({1, 2}), p), ShapeError);
}

TEST(Embed, MaskZeroesObservationBlock) {
  const Tensor f = Tensor::matrix({{0.4, -0.3, 1.0}});
  const std::vector<int> a{2};
  const std::vector<double> r{0.5};
  const Tensor full = embed_inputs(f, a, r, false, 4);
  const Tensor masked = embed_inputs(f, a, r, true, 4);
  EXPECT_EQ(full.shape(), masked.shape());
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(masked[i], 0.0);
  for (std::size_t i = 3; i < 8; ++i) EXPECT_EQ(masked[i], full[i]);
}

TEST(Embed, OneHotAndRewardClip) {
  const std::vector<int> a{2, 0};
  const std::vector<double> r{5.0, -7.0};
  const Tensor e = embed_inputs(Tensor::zeros({2, 1}), a, r, false, 4);
  const std::vector<double> row0(e.data().begin() + 1, e.data().begin() + 6);
  EXPECT_EQ(row0, (std::vector<double>{0, 0, 1, 0, 1.0}));
  EXPECT_EQ(e[11], -1.0);
}

TEST(Embed, ActionOutOfRange) {
  const std::vector<int> a{4};
  const std::vector<double> r{0.0};
  EXPECT_THROW(embed_inputs(Tensor::zeros({1, 2}), a, r, false, 4), std::out_of_range);
}

TEST(Init, SameSeedSameBits) {
  const AgentConfig c = config_for(Architecture::kPpr, 16);
  EXPECT_TRUE(init_params(42, c).bit_equal_to(init_params(42, c)));
  EXPECT_FALSE(init_params(42, c).bit_equal_to(init_params(43, c)));
}

TEST(Init, ForgetBiasOnesOtherBiasesZero) {
  const AgentConfig c = config_for(Architecture::kPpr, 8, false);
  const ParamStore s = init_params(1, c);
  for (const std::string& core : {"perception", "reaction", "prediction", "slow"}) {
    const Tensor& b = s.get(core + ".b");
    for (std::size_t i = 0; i < 32; ++i) EXPECT_EQ(b[i], (i >= 8 && i < 16) ? 1.0 : 0.0) << core << " " << i;
  }
  for (const auto& e : s.entries()) {
    if (e.name.size() > 2 && e.name.substr(e.name.size() - 2) == ".b" && e.name.find("encoder") == 0) {
      for (double v : e.value.data()) EXPECT_EQ(v, 0.0);
    }
  }
}

TEST(Init, WeightsWithinFanInBound) {
  const AgentConfig c = config_for(Architecture::kFlat, 16);
  const ParamStore s = init_params(3, c);
  const Tensor& wx = s.get("core.w_x");
  const double bound = 1.0 / std::sqrt(static_cast<double>(wx.dim(1)));
  for (double v : wx.data()) EXPECT_LE(std::abs(v), bound);
}

TEST(Accounting, FlatClosedForm) {
  const AgentConfig c = config_for(Architecture::kFlat, 256);
  const ParamStore s = init_params(0, c);
  const std::size_t h = 256, d = c.core_input_width();
  EXPECT_EQ(count_recurrent_params(s, c), 4 * h * (d + h) + 4 * h);
}

TEST(Accounting, RatiosToFlat) {
  const std::size_t flat = count_recurrent_params(init_params(0, config_for(Architecture::kFlat, 256)),
                                                  config_for(Architecture::kFlat, 256));
  auto count = [](Architecture a, bool share) {
    const AgentConfig c = config_for(a, 256, share);
    return count_recurrent_params(init_params(0, c), c);
  };
  EXPECT_EQ(count(Architecture::kPpr, true), 2 * flat);
  EXPECT_EQ(count(Architecture::kPpr, false), 4 * flat);
  EXPECT_EQ(count(Architecture::kMinimalHier, true), 2 * flat);
}

TEST(Accounting, InvariantToStoreOrder) {
  const AgentConfig c = config_for(Architecture::kPpr, 8, false);
  const ParamStore s = init_params(0, c);
  ParamStore rev;
  const auto& e = s.entries();
  for (auto it = e.rbegin(); it != e.rend(); ++it) rev.add(it->name, it->value);
  EXPECT_EQ(count_recurrent_params(s, c), count_recurrent_params(rev, c));
}

TEST(Accounting, EmbedWidthIndependentOfMasking) {
  const AgentConfig c = config_for(Architecture::kPpr, 8);
  const std::vector<int> a{1};
  const std::vector<double> r{0.0};
  const Tensor f = Tensor::zeros({1, c.encoder_width});
  EXPECT_EQ(embed_inputs(f, a, r, true, c.num_actions).dim(1), c.embed_width());
  EXPECT_EQ(embed_inputs(f, a, r, false, c.num_actions).dim(1), c.embed_width());
}

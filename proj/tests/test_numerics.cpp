#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <filesystem>

#include "kvec/checkpoint.hpp"
#include "kvec/error.hpp"
#include "kvec/numerics.hpp"
#include "kvec/parameters.hpp"

namespace kvec {
namespace {

TEST(Softmax, HandValues) {
  std::vector<double> z = {0.0, std::log(3.0)};
  softmax_inplace(z);
  EXPECT_NEAR(z[0], 0.25, 1e-15);
  EXPECT_NEAR(z[1], 0.75, 1e-15);

  std::vector<double> big = {1000.0, 1000.0, 1000.0, 1000.0};
  softmax_inplace(big);
  for (double v : big) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, BackwardMatchesJacobian) {
  std::vector<double> p = {0.2, 0.3, 0.5};
  std::vector<double> dp = {1.0, -2.0, 0.5};
  std::vector<double> dz(3);
  softmax_backward(p, dp, dz);
  for (std::size_t i = 0; i < 3; ++i) {
    double expected = 0.0;
    for (std::size_t j = 0; j < 3; ++j) expected += p[j] * ((i == j ? 1.0 : 0.0) - p[i]) * dp[j];
    EXPECT_NEAR(dz[i], expected, 1e-15);
  }
}

TEST(MaskedSoftmax, MaskedEntriesAreExactlyZero) {
  DenseMask vis(2);
  vis.set(0, 0, true);
  vis.set(1, 0, true);
  vis.set(1, 1, true);
  Tensor logits(2, 2, std::vector<double>{5.0, 7.0, 0.0, std::log(4.0)});
  const Tensor p = masked_softmax(logits, AdditiveMask::from_visibility(vis));
  EXPECT_EQ(p(0, 0), 1.0);
  EXPECT_EQ(p(0, 1), 0.0);
  EXPECT_NEAR(p(1, 0), 0.2, 1e-15);
  EXPECT_NEAR(p(1, 1), 0.8, 1e-15);

  DenseMask none(2);
  EXPECT_THROW(masked_softmax(logits, AdditiveMask::from_visibility(none)), std::invalid_argument);
}

TEST(Activation, HandValuesAndDerivatives) {
  EXPECT_DOUBLE_EQ(sigmoid(0.0), 0.5);
  EXPECT_NEAR(sigmoid(std::log(3.0)), 0.75, 1e-15);
  EXPECT_NEAR(sigmoid(-std::log(3.0)), 0.25, 1e-15);
  EXPECT_EQ(sigmoid(-800.0), 0.0);
  EXPECT_EQ(sigmoid(800.0), 1.0);
  EXPECT_DOUBLE_EQ(activate(Activation::kRelu, -2.0), 0.0);
  EXPECT_DOUBLE_EQ(activate(Activation::kRelu, 2.0), 2.0);
  EXPECT_DOUBLE_EQ(activate_derivative(Activation::kSigmoid, 0.0, 0.5), 0.25);
  const double y = std::tanh(0.3);
  EXPECT_NEAR(activate_derivative(Activation::kTanh, 0.3, y), 1.0 - y * y, 1e-15);
  EXPECT_DOUBLE_EQ(activate_derivative(Activation::kRelu, -1.0, 0.0), 0.0);
}

TEST(Linear, AffineAndBackward) {
  const Tensor w(2, 3, std::vector<double>{1, 2, 3, 4, 5, 6});
  const Tensor b(2, 1, std::vector<double>{0.5, -0.5});
  const Tensor x(3, 1, std::vector<double>{1, 0, -1});
  const Tensor y = affine(x, w, b);
  EXPECT_DOUBLE_EQ(y(0, 0), -1.5);
  EXPECT_DOUBLE_EQ(y(1, 0), -2.5);

  const Tensor dy(2, 1, std::vector<double>{1, 2});
  const AffineGrad g = affine_backward(x, w, dy);
  EXPECT_EQ(g.dx, Tensor(3, 1, std::vector<double>{9, 12, 15}));
  EXPECT_EQ(g.dweight, Tensor(2, 3, std::vector<double>{1, 0, -1, 2, 0, -2}));
  EXPECT_EQ(g.dbias, dy);
}

TEST(Adam, FirstStepsMatchHandComputation) {
  ParameterStore store;
  const ParamId id = store.add("w", Tensor(1, 2, std::vector<double>{1.0, -1.0}));
  store.grad(id)[0] = 2.0;
  store.grad(id)[1] = -0.5;
  adam_step(store, 0.1);
  // Step 1: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
  EXPECT_NEAR(store.value(id)[0], 1.0 - 0.1 * 2.0 / (2.0 + 1e-8), 1e-15);
  EXPECT_NEAR(store.value(id)[1], -1.0 + 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_EQ(store.grad(id)[0], 0.0);

  store.grad(id)[0] = 1.0;
  adam_step(store, 0.1);
  const double m = 0.9 * 0.1 * 2.0 + 0.1 * 1.0;
  const double v = 0.999 * 0.001 * 4.0 + 0.001 * 1.0;
  const double m_hat = m / (1 - 0.81), v_hat = v / (1 - 0.999 * 0.999);
  EXPECT_NEAR(store.value(id)[0], 1.0 - 0.1 * 2.0 / (2.0 + 1e-8) - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8),
              1e-14);
  EXPECT_EQ(store.step(), 2);
}

TEST(Adam, RejectsNonFiniteGradientsWithoutTouchingValues) {
  ParameterStore store;
  const ParamId a = store.add("a", Tensor(1, 1, 1.0));
  const ParamId b = store.add("bad", Tensor(1, 1, 1.0));
  store.grad(a)[0] = 1.0;
  store.grad(b)[0] = std::nan("");
  try {
    adam_step(store, 0.1);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("bad"), std::string::npos);
  }
  EXPECT_EQ(store.value(a)[0], 1.0);
  EXPECT_EQ(store.step(), 0);
}

TEST(FiniteDiff, QuadraticGradient) {
  ParameterStore store;
  const ParamId id = store.add("x", Tensor(1, 3, std::vector<double>{0.5, -1.0, 2.0}));
  auto loss = [&] {
    double s = 0.0;
    for (double v : store.value(id).data()) s += v * v * v;
    return s;
  };
  for (std::size_t i = 0; i < 3; ++i) store.grad(id)[i] = 3.0 * store.value(id)[i] * store.value(id)[i];
  const auto ok = finite_diff_check(loss, store, 1e-5, 1e-6);
  ASSERT_EQ(ok.size(), 1u);
  EXPECT_TRUE(ok[0].passed);
  store.grad(id)[1] += 0.1;
  EXPECT_FALSE(finite_diff_check(loss, store, 1e-5, 1e-6)[0].passed);
}

TEST(Checkpoint, RoundTripsAsFloat32) {
  ParameterStore store;
  store.add("w", Tensor(2, 2, std::vector<double>{0.1, -2.5, 3.0, 1e-3}));
  store.add("b", Tensor(1, 1, 7.0));
  const auto path = std::filesystem::temp_directory_path() / "kvec_numerics_ckpt.bin";
  write_checkpoint(path, {{"note", "x"}}, {{"m", &store}});
  const Checkpoint ckpt = read_checkpoint(path);
  EXPECT_EQ(ckpt.meta.at("note"), "x");
  const CheckpointTensor* w = ckpt.find("m/w");
  ASSERT_NE(w, nullptr);
  EXPECT_EQ(w->rows, 2u);
  EXPECT_EQ(w->data[0], 0.1f);

  ParameterStore copy;
  copy.add("w", Tensor(2, 2));
  copy.add("b", Tensor(1, 1));
  load_parameters(copy, ckpt, "m");
  EXPECT_EQ(copy.params()[0].value[0], static_cast<double>(0.1f));
  EXPECT_EQ(copy.params()[1].value[0], 7.0);

  ParameterStore wrong;
  wrong.add("w", Tensor(3, 2));
  EXPECT_THROW(load_parameters(wrong, ckpt, "m"), ValidationError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsGarbage) {
  const auto path = std::filesystem::temp_directory_path() / "kvec_garbage.bin";
  { std::ofstream(path) << "not a checkpoint"; }
  EXPECT_THROW(read_checkpoint(path), ValidationError);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace kvec

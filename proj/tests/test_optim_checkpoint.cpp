#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>

#include "eas/checkpoint.h"
#include "eas/optim.h"

using namespace eas;

TEST(Optimizer, PlainSgdStep) {
  Optimizer opt(OptimizerConfig::sgd(0.1, 0.0));
  ParameterMap<float> params{{"w", TensorF::scalar(0.0f)}};
  opt.step(params, {{"w", TensorF::scalar(1.0f)}});
  EXPECT_FLOAT_EQ(params.at("w").item(), -0.1f);
}

TEST(Optimizer, SgdMomentumAccumulatesVelocity) {
  Optimizer opt(OptimizerConfig::sgd(0.1, 0.9));
  ParameterMap<float> params{{"w", TensorF::scalar(0.0f)}};
  opt.step(params, {{"w", TensorF::scalar(1.0f)}});
  opt.step(params, {{"w", TensorF::scalar(1.0f)}});
  // v1 = 1, v2 = 1.9 -> p = -0.1 - 0.19
  EXPECT_NEAR(params.at("w").item(), -0.29f, 1e-6f);
}

TEST(Optimizer, AdamFirstStepIsBiasCorrected) {
  Optimizer opt(OptimizerConfig::adam(1e-3));
  ParameterMap<float> params{{"w", TensorF::scalar(0.0f)}};
  opt.step(params, {{"w", TensorF::scalar(1.0f)}});
  // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1; step = lr * 1 / (1 + eps)
  const double expected = -1e-3 * 1.0 / (1.0 + 1e-8);
  EXPECT_NEAR(params.at("w").item(), expected, 1e-9);
}

TEST(Optimizer, CosineScheduleEndpoints) {
  EXPECT_DOUBLE_EQ(cosine_learning_rate(0.01, 0, 120), 0.01);
  EXPECT_NEAR(cosine_learning_rate(0.01, 120, 120), 0.0, 1e-18);
  EXPECT_NEAR(cosine_learning_rate(0.01, 60, 120), 0.005, 1e-15);
  EXPECT_NEAR(cosine_learning_rate(0.01, 30, 120), 0.01 * 0.5 * (1 + std::cos(std::numbers::pi / 4)), 1e-15);
}

TEST(Optimizer, NonFiniteGradientNamesParameterAndLeavesWeightsUntouched) {
  Optimizer opt(OptimizerConfig::sgd(0.1));
  ParameterMap<float> params{{"a", TensorF::scalar(1.0f)}, {"b", TensorF::scalar(2.0f)}};
  ParameterMap<float> grads{{"a", TensorF::scalar(1.0f)},
                            {"b", TensorF::scalar(std::numeric_limits<float>::quiet_NaN())}};
  try {
    opt.step(params, grads);
    FAIL() << "expected NonFiniteGradient";
  } catch (const NonFiniteGradient& e) {
    EXPECT_EQ(e.parameter(), "b");
  }
  EXPECT_EQ(params.at("a").item(), 1.0f);
}

TEST(Optimizer, MomentBuffersMatchParameterShapes) {
  Optimizer opt(OptimizerConfig::adam());
  ParameterMap<float> params{{"w", TensorF(Shape{2, 3}, 1.0f)}};
  opt.step(params, {{"w", TensorF(Shape{2, 3}, 0.5f)}});
  EXPECT_EQ(opt.first_moments().at("w").shape(), (Shape{2, 3}));
  EXPECT_EQ(opt.second_moments().at("w").shape(), (Shape{2, 3}));
  EXPECT_THROW(opt.step(params, {{"w", TensorF(Shape{3, 2}, 0.5f)}}), ShapeError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Checkpoint c;
  c.metadata["space_hash"] = "1234";
  c.metadata["config"] = "{\"a\":1}";
  c.tensors.emplace("w", TensorF(Shape{2, 2}, std::vector<float>{1.5f, -0.0f, 3e-38f, 1e30f}));
  c.tensors.emplace("b", TensorF(Shape{3}, std::vector<float>{std::numeric_limits<float>::denorm_min(), 7, -8}));
  const auto path = std::filesystem::temp_directory_path() / "eas_ckpt_roundtrip.bin";
  save_checkpoint(path, c);
  const Checkpoint d = load_checkpoint(path);
  EXPECT_EQ(d.metadata, c.metadata);
  ASSERT_EQ(d.tensors.size(), 2u);
  for (const auto& [name, t] : c.tensors) {
    const auto& u = d.tensors.at(name);
    ASSERT_EQ(u.shape(), t.shape());
    for (std::size_t i = 0; i < t.size(); ++i)
      EXPECT_EQ(std::bit_cast<std::uint32_t>(u[i]), std::bit_cast<std::uint32_t>(t[i]));
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptInputIsRejected) {
  Checkpoint c;
  c.tensors.emplace("w", TensorF(Shape{4}, 1.0f));
  std::string bytes = encode_checkpoint(c);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), CheckpointError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), CheckpointError);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), CheckpointError);
  bad = bytes;
  bad[8] = 99;  // version
  EXPECT_THROW(decode_checkpoint(bad), CheckpointError);
}

#include <gtest/gtest.h>

#include <cmath>

#include "kvec/datasets.hpp"
#include "kvec/ectl.hpp"
#include "kvec/error.hpp"
#include "kvec/training.hpp"
#include "test_util.hpp"

namespace kvec {
namespace {

using testing::random_sequence;
using testing::small_config;
using testing::toy_schema;

std::vector<double> some_state(std::size_t h, double scale) {
  std::vector<double> s(h);
  for (std::size_t i = 0; i < h; ++i) s[i] = scale * std::sin(1.0 + static_cast<double>(i));
  return s;
}

TEST(Policy, HaltProbabilityIsSigmoidOfAffine) {
  const KvecModel model(small_config(toy_schema()), 4);
  const auto s = some_state(6, 0.7);
  const auto& p = model.params();
  double z = p.value(model.policy().b)[0];
  for (std::size_t i = 0; i < 6; ++i) z += p.value(model.policy().w)[i] * s[i];
  EXPECT_NEAR(halt_probability(model, s), 1.0 / (1.0 + std::exp(-z)), 1e-15);
  EXPECT_THROW(halt_probability(model, std::vector<double>(5)), std::invalid_argument);
}

TEST(Policy, ThresholdAndSampling) {
  EXPECT_EQ(decide(0.5, DecideMode::kThreshold), Action::kHalt);
  EXPECT_EQ(decide(0.4999999, DecideMode::kThreshold), Action::kWait);
  Rng rng(3);
  int halts = 0;
  for (int i = 0; i < 20000; ++i) halts += decide(0.3, DecideMode::kSample, &rng) == Action::kHalt;
  EXPECT_NEAR(halts / 20000.0, 0.3, 0.015);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(decide(0.0, DecideMode::kSample, &rng), Action::kWait);
    EXPECT_EQ(decide(1.0, DecideMode::kSample, &rng), Action::kHalt);
  }
}

TEST(Policy, LogProbabilityClampsAndFreezesGradient) {
  EXPECT_NEAR(log_action_probability(0.25, Action::kHalt), std::log(0.25), 1e-15);
  EXPECT_NEAR(log_action_probability(0.25, Action::kWait), std::log(0.75), 1e-15);
  EXPECT_NEAR(log_action_probability(0.0, Action::kHalt), std::log(1e-12), 1e-12);
  // 1 - (1 - 1e-12) is not exactly 1e-12 in binary.
  EXPECT_NEAR(log_action_probability(1.0, Action::kWait), std::log(1e-12), 1e-4);

  KvecModel model(small_config(toy_schema()), 4);
  model.params().value(model.policy().b)[0] = 100.0;  // p rounds to 1
  ParameterStore grads = model.params();
  grads.zero_grad();
  const auto ds = policy_log_prob_backward(model, some_state(6, 0.1), Action::kWait, 1.0, grads);
  for (double v : ds) EXPECT_EQ(v, 0.0);
  for (const auto& p : grads.params())
    for (double g : p.grad.data()) EXPECT_EQ(g, 0.0);
}

TEST(Classifier, SoftmaxOfAffineWithLowestIndexTies) {
  const KvecModel model(small_config(toy_schema(), 3), 4);
  const auto s = some_state(6, 1.3);
  const Classification c = classify(model, s);
  const auto& p = model.params();
  std::vector<double> z(3);
  double norm = 0.0;
  for (std::size_t k = 0; k < 3; ++k) {
    z[k] = p.value(model.classifier().b)[k];
    for (std::size_t i = 0; i < 6; ++i) z[k] += p.value(model.classifier().w)(k, i) * s[i];
    norm += std::exp(z[k]);
  }
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(c.distribution[k], std::exp(z[k]) / norm, 1e-15);
  EXPECT_EQ(argmax(std::vector<double>{0.2, 0.4, 0.4}), 1);
  EXPECT_EQ(argmax(std::vector<double>{0.5, 0.5}), 0);
}

TEST(Reward, SignOfCorrectness) {
  EXPECT_EQ(reward_of(1, 1, 2), 1);
  EXPECT_EQ(reward_of(0, 1, 2), -1);
  EXPECT_THROW(reward_of(2, 1, 2), std::out_of_range);
  EXPECT_THROW(reward_of(0, -1, 2), std::out_of_range);
}

TEST(Returns, SumOfLaterRewards) {
  EXPECT_EQ(compute_returns(std::vector<int>{1, 1, 1}), (std::vector<double>{2, 1, 0}));
  EXPECT_EQ(compute_returns(std::vector<int>{-1, -1}), (std::vector<double>{-1, 0}));
  EXPECT_EQ(compute_returns(std::vector<int>{1, -1, 1, 1}), (std::vector<double>{1, 2, 1, 0}));
  EXPECT_EQ(compute_returns(std::vector<int>{1}), (std::vector<double>{0}));
  EXPECT_THROW(compute_returns(std::vector<int>{}), std::invalid_argument);
}

class RolloutTest : public ::testing::Test {
 protected:
  RolloutTest() : model_(small_config(toy_schema()), 31) {
    Rng rng(77);
    seq_ = random_sequence(rng, 48, 5);
    mask_ = DynamicMask::build(seq_, model_.config().mask);
  }
  Rollout run(HaltRule rule, std::size_t tau = 1, double mu = 1.0, bool record = false, Rng* rng = nullptr) {
    RolloutOptions o;
    o.rule = rule;
    o.tau = tau;
    o.mu = mu;
    o.record = record;
    o.rng = rng;
    return Rollout(model_, seq_, mask_, o);
  }
  KvecModel model_;
  TangledSequence seq_;
  DynamicMask mask_;
};

TEST_F(RolloutTest, FixedRuleHaltsAtTau) {
  const Rollout r = run(HaltRule::kFixed, 3);
  std::size_t skipped = 0;
  for (const Episode& ep : r.episodes()) {
    const std::size_t len = seq_.length_of(ep.key);
    EXPECT_EQ(ep.length, len);
    EXPECT_EQ(ep.halt_step(), std::min<std::size_t>(3, len));
    EXPECT_EQ(ep.forced, len < 3);
    EXPECT_EQ(ep.actions.back(), Action::kHalt);
    EXPECT_EQ(ep.positions, std::vector<std::size_t>(seq_.positions_of(ep.key).begin(),
                                                     seq_.positions_of(ep.key).begin() + ep.halt_step()));
    skipped += len - ep.halt_step();
    const int r_expected = ep.correct() ? 1 : -1;
    for (int rw : ep.rewards) EXPECT_EQ(rw, r_expected);
    EXPECT_EQ(ep.returns, compute_returns(ep.rewards));
    EXPECT_DOUBLE_EQ(ep.earliness(), static_cast<double>(ep.halt_step()) / static_cast<double>(len));
  }
  EXPECT_EQ(r.skipped(), skipped);
  EXPECT_EQ(r.episodes().size(), seq_.key_count());
}

TEST_F(RolloutTest, NeverRuleObservesEverything) {
  const Rollout r = run(HaltRule::kNever);
  for (const Episode& ep : r.episodes()) {
    EXPECT_EQ(ep.halt_step(), ep.length);
    EXPECT_TRUE(ep.forced);
  }
  EXPECT_EQ(r.skipped(), 0u);
}

TEST_F(RolloutTest, PolicyBiasDrivesThresholdDecisions) {
  model_.params().value(model_.policy().b)[0] = 50.0;
  for (const Episode& ep : run(HaltRule::kPolicyThreshold).episodes()) {
    EXPECT_EQ(ep.halt_step(), 1u);
    EXPECT_FALSE(ep.forced);
  }
  model_.params().value(model_.policy().b)[0] = -50.0;
  for (const Episode& ep : run(HaltRule::kPolicyThreshold).episodes()) EXPECT_TRUE(ep.forced);
  EXPECT_THROW(run(HaltRule::kPolicySample), std::invalid_argument);
}

TEST_F(RolloutTest, ConfidenceRuleHaltsOnceConfident) {
  for (const Episode& ep : run(HaltRule::kConfidence, 1, 0.0).episodes()) EXPECT_EQ(ep.halt_step(), 1u);
  for (const Episode& ep : run(HaltRule::kConfidence, 1, 1.0).episodes()) EXPECT_TRUE(ep.forced);
}

TEST_F(RolloutTest, LossesMatchTheirDefinitions) {
  const Rollout r = run(HaltRule::kFixed, 3, 1.0, true);
  LossWeights w;
  w.alpha = 0.3;
  w.beta = 0.7;
  double l1 = 0, l2 = 0, l3 = 0, l1_every = 0;
  for (const Episode& ep : r.episodes()) {
    const auto& states = r.states(ep.key);
    l1 -= std::log(ep.output.distribution[static_cast<std::size_t>(ep.truth)]);
    for (std::size_t i = 0; i < ep.halt_step(); ++i) {
      const double p = halt_probability(model_, states[i]);
      EXPECT_DOUBLE_EQ(p, ep.p_halt[i]);
      const double logp = std::log(ep.actions[i] == Action::kHalt ? p : 1 - p);
      l2 -= (ep.returns[i] - baseline_value(model_, states[i])) * logp;
      l3 -= std::log(p);
      l1_every -= std::log(classify(model_, states[i]).distribution[static_cast<std::size_t>(ep.truth)]);
    }
  }
  const LossBreakdown got = r.loss(w);
  EXPECT_NEAR(got.l1, l1, 1e-12);
  EXPECT_NEAR(got.l2, l2, 1e-12);
  EXPECT_NEAR(got.l3, l3, 1e-12);
  EXPECT_NEAR(got.total, l1 + 0.3 * l2 + 0.7 * l3, 1e-12);
  w.classify_every_step = true;
  EXPECT_NEAR(r.loss(w).l1, l1_every, 1e-12);
}

TEST_F(RolloutTest, PolicyLossesStayOffTheEncoderByDefault) {
  auto encoder_grads = [&](double alpha, double beta, bool to_encoder) {
    Rollout r = run(HaltRule::kFixed, 3, 1.0, true);
    ParameterStore g = model_.params(), bg = model_.baseline_params();
    g.zero_grad();
    bg.zero_grad();
    LossWeights w;
    w.alpha = alpha;
    w.beta = beta;
    w.policy_to_encoder = to_encoder;
    r.backward(w, g, bg);
    return g;
  };
  const ParameterStore plain = encoder_grads(0.0, 0.0, false);
  const ParameterStore detached = encoder_grads(1.0, 1.0, false);
  const ParameterStore attached = encoder_grads(1.0, 1.0, true);
  const auto wq = *plain.find("block0.wq");
  const auto pw = *plain.find("policy.w");
  EXPECT_EQ(plain.grad(wq), detached.grad(wq));
  EXPECT_NE(plain.grad(pw), detached.grad(pw));
  EXPECT_NE(plain.grad(wq), attached.grad(wq));
}

GeneratorConfig toy_generator() {
  GeneratorConfig g;
  g.flows = 60;
  g.flow_length = 12;
  g.signal_length = 3;
  g.flows_per_sequence = 10;
  g.concurrency = 4;
  return g;
}

TEST(Training, DeterministicForAFixedSeed) {
  const Dataset data = generate_dataset(toy_generator());
  ModelConfig mc = small_config(data.manifest.schema, 2, 1);
  TrainConfig tc;
  tc.epochs = 2;
  tc.learning_rate = 1e-2;
  tc.seed = 5;
  KvecModel a(mc, 1), b(mc, 1);
  const auto ha = train(a, data.train, tc);
  const auto hb = train(b, data.train, tc);
  EXPECT_TRUE(a.params() == b.params());
  ASSERT_EQ(ha.size(), 2u);
  EXPECT_EQ(ha[1].total, hb[1].total);
  tc.seed = 6;
  KvecModel c(mc, 1);
  train(c, data.train, tc);
  EXPECT_FALSE(a.params() == c.params());
}

TEST(Training, ClassifierLossFallsOnLearnableData) {
  const Dataset data = generate_dataset(toy_generator());
  ModelConfig mc = small_config(data.manifest.schema, 2, 1);
  mc.policy_bias_init = -30.0;  // observe every item
  TrainConfig tc;
  tc.epochs = 12;
  tc.learning_rate = 1e-2;
  tc.loss.alpha = 0.0;
  tc.loss.beta = 0.0;
  KvecModel model(mc, 2);
  const auto h = train(model, data.train, tc);
  EXPECT_LT(h.back().l1, 0.6 * h.front().l1);
}

TEST(Training, NonFiniteParametersRaiseNumericalError) {
  const Dataset data = generate_dataset(toy_generator());
  KvecModel model(small_config(data.manifest.schema, 2, 1), 1);
  model.params().value(*model.params().find("classifier.w"))[0] = std::nan("");
  TrainConfig tc;
  tc.epochs = 1;
  EXPECT_THROW(train(model, data.train, tc), NumericalError);
}

TEST(Training, WritesCheckpointsAndHistory) {
  const Dataset data = generate_dataset(toy_generator());
  KvecModel model(small_config(data.manifest.schema, 2, 1), 1);
  TrainConfig tc;
  tc.epochs = 2;
  tc.checkpoint_every = 1;
  tc.checkpoint_dir = std::filesystem::temp_directory_path() / "kvec_train_ckpts";
  std::filesystem::remove_all(tc.checkpoint_dir);
  std::size_t callbacks = 0;
  const auto h = train(model, data.train, tc, [&](const EpochRecord& r, KvecModel&) { callbacks += r.epoch; });
  EXPECT_EQ(callbacks, 3u);
  EXPECT_TRUE(std::filesystem::exists(tc.checkpoint_dir / "epoch_2.ckpt"));
  const KvecModel back = KvecModel::load(tc.checkpoint_dir / "epoch_2.ckpt");
  EXPECT_EQ(back.params().size(), model.params().size());
  std::ostringstream csv;
  write_history_csv(csv, h);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "epoch,l1,l2,l3,total,accuracy,earliness");
  std::filesystem::remove_all(tc.checkpoint_dir);
}

}  // namespace
}  // namespace kvec

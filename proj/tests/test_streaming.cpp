#include <gtest/gtest.h>

#include "kvec/error.hpp"
#include "kvec/streaming.hpp"
#include "kvec/training.hpp"
#include "test_util.hpp"

namespace kvec {
namespace {

using testing::random_sequence;
using testing::small_config;
using testing::toy_schema;

KvecModel halting_model(double bias) {
  ModelConfig c = small_config(toy_schema(), 2, 2);
  KvecModel m(c, 13);
  m.params().value(m.policy().b)[0] = bias;
  return m;
}

TEST(Streaming, BitIdenticalToBatchOverFiveHundredItems) {
  Rng rng(500);
  const TangledSequence seq = random_sequence(rng, 500, 10);
  for (double bias : {-0.3, 0.0, 0.4}) {
    const KvecModel model = halting_model(bias);
    for (bool cache_kv : {false, true}) {
      StreamOptions o;
      o.cache_kv = cache_kv;
      const EquivalenceReport rep = verify_equivalence(model, seq, o);
      EXPECT_EQ(rep.positions, 500u);
      EXPECT_EQ(rep.max_abs_deviation, 0.0);
      EXPECT_TRUE(rep.decisions_identical);
    }
  }
}

TEST(Streaming, RequiresWindowCoveringTheSequence) {
  Rng rng(1);
  ModelConfig c = small_config(toy_schema());
  c.mask.window = 10;
  const KvecModel model(c, 1);
  EXPECT_THROW(verify_equivalence(model, random_sequence(rng, 20, 2)), ValidationError);
}

TEST(Streaming, HaltedKeysAreSkippedAndFinishForcesTheRest) {
  const KvecModel model = halting_model(-40.0);
  StreamEngine engine(model);
  const std::vector<double> v = {0, 1, 2.0};
  EXPECT_EQ(engine.step("a", v).action, Action::kWait);
  EXPECT_EQ(engine.step("b", v).step, 1u);
  EXPECT_EQ(engine.step("a", v).step, 2u);
  const auto forced = engine.finish();
  ASSERT_EQ(forced.size(), 2u);
  EXPECT_EQ(forced[0].key, "a");
  EXPECT_TRUE(forced[0].forced);
  EXPECT_TRUE(forced[0].classification.has_value());
  EXPECT_TRUE(engine.step("a", v).skipped);
  EXPECT_EQ(engine.stats().skipped, 1u);
}

TEST(Streaming, ImmediateHaltEmitsClassification) {
  const KvecModel model = halting_model(40.0);
  StreamEngine engine(model);
  const StepOutcome o = engine.step("k", {1, 2, 0.5});
  EXPECT_EQ(o.action, Action::kHalt);
  ASSERT_TRUE(o.classification.has_value());
  EXPECT_NEAR(o.classification->distribution[0] + o.classification->distribution[1], 1.0, 1e-15);
  EXPECT_TRUE(engine.step("k", {1, 2, 0.5}).skipped);
  EXPECT_EQ(engine.stats().halted, 1u);
}

TEST(Streaming, ArrivalIndicesMustBeConsecutive) {
  const KvecModel model = halting_model(0.0);
  StreamEngine engine(model);
  engine.step_at(1, "a", {0, 0, 0.0});
  EXPECT_THROW(engine.step_at(3, "a", {0, 0, 0.0}), ValidationError);
  EXPECT_NO_THROW(engine.step_at(2, "b", {0, 0, 0.0}));
  EXPECT_THROW(engine.step("c", {9, 0, 0.0}), SchemaError);
}

TEST(Streaming, CacheStaysWithinTheWindow) {
  ModelConfig c = small_config(toy_schema());
  c.mask.window = 16;
  KvecModel model(c, 2);
  model.params().value(model.policy().b)[0] = -40.0;
  StreamEngine engine(model);
  Rng rng(3);
  const TangledSequence seq = random_sequence(rng, 200, 6);
  for (const Item& it : seq.items()) {
    engine.step(it.key, it.value);
    EXPECT_LE(engine.cache().size(), 16u);
  }
  EXPECT_EQ(engine.cache().first(), 200u - 16u);
  EXPECT_EQ(engine.position(), 200u);
}

TEST(Streaming, PerItemWorkIsBoundedByTheWindow) {
  ModelConfig c = small_config(toy_schema());
  c.mask.window = 32;
  KvecModel model(c, 2);
  model.params().value(model.policy().b)[0] = -40.0;
  StreamEngine engine(model);
  Rng rng(3);
  const TangledSequence seq = random_sequence(rng, 400, 4);
  std::uint64_t peak = 0;
  for (const Item& it : seq.items()) {
    engine.step(it.key, it.value);
    peak = std::max(peak, engine.stats().last_step_multiply_adds);
  }
  const std::uint64_t bound =
      c.blocks * (attend_row_cost(c, c.mask.window) + c.mask.window * project_kv_cost(c));
  EXPECT_LE(peak, bound);
}

TEST(Streaming, RecomputationStrawmanAgreesAndCostsMore) {
  Rng rng(21);
  const TangledSequence seq = random_sequence(rng, 60, 5);
  const KvecModel model = halting_model(-40.0);
  std::uint64_t madds = 0;
  const auto columns = recompute_stream(model, seq, &madds);
  StreamEngine engine(model, {true, 0.5});
  for (std::size_t i = 0; i < seq.size(); ++i) {
    engine.step(seq[i].key, seq[i].value);
    const auto col = engine.cache().column(2, i);
    ASSERT_TRUE(std::equal(col.begin(), col.end(), columns[i].begin(), columns[i].end())) << i;
  }
  EXPECT_GT(madds, 5 * engine.stats().multiply_adds);
}

}  // namespace
}  // namespace kvec

#include <gtest/gtest.h>

#include <sstream>

#include "kvec/error.hpp"
#include "kvec/evalkit.hpp"
#include "test_util.hpp"

namespace kvec {
namespace {

using testing::random_sequence;
using testing::small_config;
using testing::toy_schema;

KeyOutcome outcome(std::size_t n, std::size_t len, int pred, int truth) {
  KeyOutcome o;
  o.halt_step = n;
  o.length = len;
  o.predicted = pred;
  o.truth = truth;
  return o;
}

TEST(Metrics, HandBuiltFixture) {
  const std::vector<KeyOutcome> f = {outcome(2, 10, 0, 0), outcome(5, 10, 1, 0), outcome(1, 4, 1, 1),
                                     outcome(4, 4, 1, 1)};
  const EvalResult r = metrics(f, 2);
  EXPECT_NEAR(r.earliness, 0.4875, 1e-12);
  EXPECT_NEAR(r.accuracy, 0.75, 1e-12);
  EXPECT_NEAR(r.precision, 5.0 / 6.0, 1e-12);
  EXPECT_NEAR(r.recall, 0.75, 1e-12);
  EXPECT_NEAR(r.f1, 11.0 / 15.0, 1e-12);
  EXPECT_NEAR(r.hm, 2 * 0.75 * 0.5125 / 1.2625, 1e-12);
}

TEST(Metrics, ThreeClassFixtureWithAnUnpredictedClass) {
  const std::vector<KeyOutcome> f = {outcome(1, 2, 0, 0), outcome(3, 3, 0, 2), outcome(2, 8, 1, 1)};
  const EvalResult r = metrics(f, 3);
  EXPECT_NEAR(r.earliness, (0.5 + 1.0 + 0.25) / 3.0, 1e-12);
  EXPECT_NEAR(r.accuracy, 2.0 / 3.0, 1e-12);
  // class 0: P 1/2 R 1; class 1: P 1 R 1; class 2: P 0 R 0.
  EXPECT_NEAR(r.precision, 0.5, 1e-12);
  EXPECT_NEAR(r.recall, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.f1, (2.0 / 3.0 + 1.0) / 3.0, 1e-12);
}

TEST(Metrics, HarmonicMean) {
  EXPECT_NEAR(harmonic_mean(0.8, 0.2), 0.8, 1e-12);
  EXPECT_NEAR(harmonic_mean(1.0, 0.0), 1.0, 1e-12);
  EXPECT_NEAR(harmonic_mean(0.5, 0.5), 0.5, 1e-12);
  EXPECT_NEAR(harmonic_mean(0.9, 0.6), 2 * 0.9 * 0.4 / 1.3, 1e-12);
  EXPECT_EQ(harmonic_mean(0.0, 1.0), 0.0);
  EXPECT_EQ(harmonic_mean(1.0, 1.0), 0.0);
}

TEST(Metrics, RejectsEmptyAndOutOfRange) {
  EXPECT_THROW(metrics({}, 2), ValidationError);
  const std::vector<KeyOutcome> bad = {outcome(1, 2, 3, 0)};
  EXPECT_THROW(metrics(bad, 2), ValidationError);
}

TEST(Histogram, RightClosedBinsAndMedian) {
  const std::vector<KeyOutcome> f = {outcome(1, 10, 0, 0), outcome(2, 10, 0, 0), outcome(3, 10, 0, 0),
                                     outcome(10, 10, 0, 0)};
  const HaltingHistogram h = halting_histogram(f, 10);
  ASSERT_EQ(h.counts.size(), 10u);
  EXPECT_EQ(h.counts[0], 1u);  // 0.1 lands in (0, 0.1]
  EXPECT_EQ(h.counts[1], 1u);
  EXPECT_EQ(h.counts[2], 1u);
  EXPECT_EQ(h.counts[9], 1u);
  EXPECT_NEAR(h.median, 0.25, 1e-15);
  EXPECT_NEAR(h.mass[9], 0.25, 1e-15);
  EXPECT_THROW(halting_histogram(f, 0), UsageError);
}

TEST(Evaluate, OutcomesFollowTheRollout) {
  Rng rng(6);
  std::vector<TangledSequence> data;
  for (int i = 0; i < 3; ++i) data.push_back(random_sequence(rng, 30, 4));
  const KvecModel model(small_config(toy_schema()), 7);
  const EvalResult fixed = evaluate(model, data, HaltRule::kFixed, 2);
  std::size_t keys = 0;
  for (const auto& s : data) keys += s.key_count();
  ASSERT_EQ(fixed.outcomes.size(), keys);
  for (const auto& o : fixed.outcomes) EXPECT_EQ(o.halt_step, std::min<std::size_t>(2, o.length));
  const EvalResult full = evaluate(model, data, HaltRule::kNever);
  EXPECT_DOUBLE_EQ(full.earliness, 1.0);
  EXPECT_NEAR(full.hm, 0.0, 1e-15);
}

TEST(AttentionSplit, SumsToOneAndSrnHasNoExternalMass) {
  Rng rng(10);
  std::vector<TangledSequence> data;
  for (int i = 0; i < 4; ++i) data.push_back(random_sequence(rng, 50, 6, 2));
  KvecModel model(small_config(toy_schema(2)), 8);
  model.params().value(model.policy().b)[0] = -40.0;
  const AttentionSplit kvec = attention_split(model, data, 5);
  EXPECT_LE(kvec.max_sum_error, 1e-12);
  EXPECT_GT(kvec.external, 0.0);
  EXPECT_EQ(kvec.rows, 4u * 50u * 2u);
  const AttentionSplit srn = attention_split(srn_view(model), data, 5);
  EXPECT_LE(srn.max_sum_error, 1e-12);
  EXPECT_EQ(srn.external, 0.0);
  for (const auto& b : srn.bins) EXPECT_EQ(b.external, 0.0);
}

TEST(Baselines, FixedAndConfidenceUseTheSrnView) {
  Rng rng(2);
  std::vector<TangledSequence> data = {random_sequence(rng, 40, 5)};
  const KvecModel model(small_config(toy_schema()), 3);
  const EvalResult a = halting_baseline(model, data, BaselineKind::kFixed, 3);
  const EvalResult b = evaluate(srn_view(model), data, HaltRule::kFixed, 3);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.earliness, b.earliness);
  EXPECT_THROW(halting_baseline(model, data, BaselineKind::kFixed, 0.5), ValidationError);
  EXPECT_THROW(halting_baseline(model, data, BaselineKind::kConfidence, 1.5), ValidationError);
  const EvalResult eager = halting_baseline(model, data, BaselineKind::kConfidence, 0.0);
  for (const auto& o : eager.outcomes) EXPECT_EQ(o.halt_step, 1u);
}

TEST(Sweep, RecordsFailuresAndSortsByEarliness) {
  const std::vector<double> grid = {1.0, 2.0, 3.0};
  const std::vector<std::uint64_t> seeds = {1, 2};
  const auto pts = sweep("beta", grid, seeds, [](double v, std::uint64_t seed) {
    if (v == 2.0 && seed == 2) throw NumericalError("diverged");
    EvalResult r;
    r.earliness = 1.0 / v;
    r.accuracy = 0.5 + 0.1 * static_cast<double>(seed);
    r.hm = harmonic_mean(r.accuracy, r.earliness);
    return r;
  });
  ASSERT_EQ(pts.size(), 6u);
  std::size_t failed = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    failed += pts[i].failed;
    if (pts[i].failed) {
      EXPECT_NE(pts[i].error.find("diverged"), std::string::npos);
    } else if (i > 0 && !pts[i - 1].failed) {
      EXPECT_LE(pts[i - 1].earliness, pts[i].earliness);
    }
  }
  EXPECT_EQ(failed, 1u);
  std::ostringstream csv;
  write_curve_csv(csv, pts);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "parameter,value,seed,earliness,accuracy,hm,failed,error");
  EXPECT_THROW(sweep("beta", {}, seeds, {}), UsageError);
}

}  // namespace
}  // namespace kvec

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "kvec/kvrl.hpp"
#include "test_util.hpp"

namespace kvec {
namespace {

using testing::random_sequence;
using testing::small_config;
using testing::toy_schema;

// Block output from whole-matrix algebra: softmax((Q^T K + M) / sqrt d) V^T
// followed by the two-layer FFN.
Tensor dense_block(const KvecModel& model, const AttentionBlock& blk, const Tensor& e, const DenseMask& vis) {
  const auto& p = model.params();
  const std::size_t d = e.rows(), t = e.cols();
  const Tensor zero_d(d, 1);
  const Tensor q = affine(e, p.value(blk.wq), zero_d);
  const Tensor k = affine(e, p.value(blk.wk), zero_d);
  const Tensor v = affine(e, p.value(blk.wv), zero_d);
  Tensor logits(t, t);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < t; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < d; ++r) s += q(r, i) * k(r, j);
      logits(i, j) = s / std::sqrt(static_cast<double>(d));
    }
  const Tensor a = masked_softmax(logits, AdditiveMask::from_visibility(vis));
  Tensor mixed(d, t);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < t; ++j)
      for (std::size_t r = 0; r < d; ++r) mixed(r, i) += a(i, j) * v(r, j);
  Tensor out = affine(elementwise(Activation::kRelu, affine(mixed, p.value(blk.w1), p.value(blk.b1))),
                      p.value(blk.w2), p.value(blk.b2));
  if (model.config().residual)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += e[i];
  return out;
}

TEST(Embedding, SumsTheTableRows) {
  const KvecModel model(small_config(toy_schema()), 3);
  const auto& p = model.params();
  const auto& tab = model.embedding();
  TangledSequence seq(toy_schema());
  seq.ingest("x", {1, 0, 0.0});
  seq.ingest("y", {2, 4, 7.0});
  seq.ingest("y", {3, 2, -1.0});
  std::vector<double> out(8);
  embed_item(model, features_of(seq, 2, 5), out);
  for (std::size_t r = 0; r < 8; ++r) {
    const double expected = p.value(tab.value[0].table)(3, r) + p.value(tab.value[1].table)(2, r) +
                            (-1.0 - 3.0) / 2.0 * p.value(tab.value[2].table)(0, r) +
                            p.value(*tab.value[2].bias)(0, r) + p.value(tab.membership)(1, r) +
                            p.value(tab.position)(1, r) + p.value(tab.time)(2, r);
    EXPECT_NEAR(out[r], expected, 1e-14);
  }
}

TEST(Embedding, AblationsDropTables) {
  ModelConfig c = small_config(toy_schema());
  KvecModel model(c, 3);
  TangledSequence seq(toy_schema());
  seq.ingest("x", {1, 0, 3.0});
  std::vector<double> full(8), bare(8);
  embed_item(model, features_of(seq, 0, 5), full);
  model.set_ablation(Ablation::kNoTimeEmbedding);
  embed_item(model, features_of(seq, 0, 5), bare);
  const auto& tab = model.embedding();
  for (std::size_t r = 0; r < 8; ++r)
    EXPECT_NEAR(full[r] - bare[r], model.params().value(tab.position)(0, r) + model.params().value(tab.time)(0, r),
                1e-14);
}

TEST(Encoder, TapeMatchesDenseMatrixAlgebra) {
  Rng rng(17);
  for (bool residual : {false, true}) {
    ModelConfig c = small_config(toy_schema(), 2, 3);
    c.residual = residual;
    const KvecModel model(c, 21);
    const TangledSequence seq = random_sequence(rng, 30, 4);
    const DynamicMask mask = DynamicMask::build(seq, c.mask);
    EncoderTape tape(model, seq, mask);
    Tensor e = tape.layer_matrix(0);
    EXPECT_EQ(e, input_embedding(model, seq, seq.size()));
    for (std::size_t b = 0; b < c.blocks; ++b) {
      e = dense_block(model, model.blocks()[b], e, mask.to_dense());
      const Tensor got = tape.layer_matrix(b + 1);
      for (std::size_t i = 0; i < e.size(); ++i) ASSERT_NEAR(got[i], e[i], 1e-12);
    }
    EXPECT_EQ(attention_stack(model, tape.layer_matrix(0), mask), tape.layer_matrix(c.blocks));
  }
}

TEST(Encoder, LazyEvaluationOrderDoesNotMatter) {
  Rng rng(8);
  const KvecModel model(small_config(toy_schema()), 2);
  const TangledSequence seq = random_sequence(rng, 25, 3);
  const DynamicMask mask = DynamicMask::build(seq, {});
  EncoderTape forward(model, seq, mask), backward(model, seq, mask);
  forward.compute_all();
  for (std::size_t i = seq.size(); i-- > 0;) (void)backward.output(i);
  EXPECT_EQ(forward.layer_matrix(2), backward.layer_matrix(2));
}

// Positions whose columns can influence row `i` at any layer.
std::set<std::size_t> dependencies(const DynamicMask& mask, std::size_t i, std::size_t blocks) {
  std::set<std::size_t> frontier = {i}, all = {i};
  for (std::size_t b = 0; b < blocks; ++b) {
    std::set<std::size_t> next;
    for (std::size_t p : frontier)
      for (std::size_t j : mask.row(p)) next.insert(j);
    all.insert(next.begin(), next.end());
    frontier = next;
  }
  return all;
}

TEST(Encoder, CausalityUnderPerturbation) {
  Rng rng(99);
  const KvecModel model(small_config(toy_schema(3), 2, 2), 5);
  std::uniform_real_distribution<double> noise(-3.0, 3.0);
  for (int trial = 0; trial < 100; ++trial) {
    const TangledSequence seq = random_sequence(rng, 12 + trial % 40, 1 + trial % 6, 3);
    const DynamicMask mask = DynamicMask::build(seq, model.config().mask);
    EncoderTape base(model, seq, mask);
    base.compute_all();

    const std::size_t target = std::uniform_int_distribution<std::size_t>(0, seq.size() - 1)(rng);
    TangledSequence changed(seq.schema());
    for (std::size_t p = 0; p < seq.size(); ++p) {
      std::vector<double> v = seq[p].value;
      std::string key = seq[p].key;
      if (p == target) {
        v[1] = static_cast<double>((static_cast<int>(v[1]) + 1) % 5);
        v[2] += noise(rng);
        v[0] = static_cast<double>((static_cast<int>(v[0]) + 1) % 3);
        if (trial % 2) key = "fresh";
      }
      changed.ingest(key, std::move(v));
    }
    const DynamicMask changed_mask = DynamicMask::build(changed, model.config().mask);
    EncoderTape after(model, changed, changed_mask);
    after.compute_all();

    for (std::size_t i = 0; i < seq.size(); ++i) {
      const bool earlier = i < target;
      const bool invisible = !dependencies(mask, i, 2).count(target) &&
                             !dependencies(changed_mask, i, 2).count(target) && i != target &&
                             std::equal(mask.row(i).begin(), mask.row(i).end(), changed_mask.row(i).begin(),
                                        changed_mask.row(i).end());
      if (!earlier && !(invisible && trial % 2 == 0)) continue;
      for (std::size_t layer = 0; layer < 3; ++layer) {
        const auto a = base.column(layer, i);
        const auto b = after.column(layer, i);
        ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end()))
            << "trial " << trial << " row " << i << " layer " << layer << " target " << target;
      }
    }
  }
}

TEST(Encoder, WindowTruncationLimitsVisibility) {
  Rng rng(4);
  ModelConfig c = small_config(toy_schema());
  c.mask.window = 5;
  const KvecModel model(c, 1);
  const TangledSequence seq = random_sequence(rng, 40, 2);
  const DynamicMask mask = DynamicMask::build(seq, c.mask);
  EncoderTape tape(model, seq, mask);
  tape.compute_all();
  for (std::size_t i = 0; i < seq.size(); ++i)
    EXPECT_EQ(tape.record(0, i).weights.size(), mask.row(i).size());
}

TEST(Fusion, MatchesGatedCellEquations) {
  const KvecModel model(small_config(toy_schema()), 6);
  const auto& p = model.params();
  const auto& f = model.fusion();
  SequenceState st = SequenceState::zero(6);
  std::vector<double> e = {0.3, -0.2, 0.1, 0.9, -1.1, 0.05, 0.4, -0.6};
  for (int step = 0; step < 3; ++step) {
    std::vector<double> z(st.s);
    z.insert(z.end(), e.begin(), e.end());
    const SequenceState next = fuse(model, st, e);
    for (std::size_t r = 0; r < 6; ++r) {
      auto gate = [&](ParamId w, ParamId b) {
        double s = p.value(b)[r];
        for (std::size_t c = 0; c < z.size(); ++c) s += p.value(w)(r, c) * z[c];
        return s;
      };
      const double fg = sigmoid(gate(f.wf, f.bf)), ig = sigmoid(gate(f.wi, f.bi));
      const double og = sigmoid(gate(f.wo, f.bo)), cand = std::tanh(gate(f.wc, f.bc));
      const double cell = fg * st.cell[r] + ig * cand;
      EXPECT_NEAR(next.cell[r], cell, 1e-14);
      EXPECT_NEAR(next.s[r], og * std::tanh(cell), 1e-14);
    }
    EXPECT_EQ(next.n, st.n + 1);
    st = next;
    for (double& x : e) x = -0.5 * x + 0.1;
  }
}

TEST(Fusion, RejectsBadInputs) {
  const KvecModel model(small_config(toy_schema()), 6);
  SequenceState st = SequenceState::zero(6);
  EXPECT_THROW(fuse(model, st, std::vector<double>(7)), std::invalid_argument);
  st.halted = true;
  EXPECT_THROW(fuse(model, st, std::vector<double>(8)), std::invalid_argument);
}

TEST(Encoder, DropoutOnlyInTrainingMode) {
  Rng rng(12);
  ModelConfig c = small_config(toy_schema());
  c.dropout = 0.5;
  const KvecModel model(c, 2);
  const TangledSequence seq = random_sequence(rng, 20, 3);
  const DynamicMask mask = DynamicMask::build(seq, {});
  EncoderTape eval_a(model, seq, mask), eval_b(model, seq, mask);
  EXPECT_EQ(eval_a.layer_matrix(2), eval_b.layer_matrix(2));
  Rng drop(1);
  EncoderTape train(model, seq, mask, &drop);
  EXPECT_NE(train.layer_matrix(2), eval_a.layer_matrix(2));
  const auto& scale = train.record(0, 0).dropout_scale;
  ASSERT_EQ(scale.size(), 8u);
  for (double s : scale) EXPECT_TRUE(s == 0.0 || s == 2.0);
}

}  // namespace
}  // namespace kvec

#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "kvec/model.hpp"
#include "kvec/numerics.hpp"
#include "kvec/random.hpp"
#include "kvec/sequence_model.hpp"

namespace kvec {

/// Inputs of the input embedding for one item.
struct ItemFeatures {
  std::span<const double> value;
  std::size_t slot = 0;
  std::int64_t seq_index = 1;
  std::int64_t arrival_index = 1;
};

ItemFeatures features_of(const TangledSequence& seq, std::size_t pos, std::size_t slot_count);

/// Column of E_0: value + membership + relative-position + time embeddings.
void embed_item(const KvecModel& model, const ItemFeatures& item, std::span<double> out);
void embed_item_backward(const KvecModel& model, const ItemFeatures& item,
                         std::span<const double> grad, ParameterStore& grads);

/// E_0 for the first `t` items, d x t.
Tensor input_embedding(const KvecModel& model, const TangledSequence& seq, std::size_t t);

void project_kv(const KvecModel& model, const AttentionBlock& block, std::span<const double> x,
                std::span<double> key, std::span<double> value);

/// Everything one attention row of one block keeps for the backward pass.
struct AttentionRecord {
  std::vector<double> query;
  std::vector<double> weights;  // over the visible positions, ascending
  std::vector<double> mixed;    // attention output, before the FFN
  std::vector<double> pre_activation;
  std::vector<double> hidden;
  std::vector<double> output;
  std::vector<double> dropout_scale;  // empty when dropout is off
};

/// One masked attention row followed by the FFN. `keys`/`values` are the
/// projections of the visible positions in ascending order; the last one
/// is the row's own position.
void attend_row(const KvecModel& model, const AttentionBlock& block, std::span<const double> x,
                std::span<const std::span<const double>> keys,
                std::span<const std::span<const double>> values, AttentionRecord& rec,
                Rng* dropout_rng);

/// Multiply-add count of `attend_row` and `project_kv`.
std::uint64_t attend_row_cost(const ModelConfig& config, std::size_t visible);
std::uint64_t project_kv_cost(const ModelConfig& config);

/// Lazily evaluated encoder graph over one tangled sequence.
///
/// Layer 0 is E_0, layer b + 1 the output of block b. Columns are computed
/// on first request together with whatever they depend on; each column's
/// arithmetic is independent of evaluation order, so batch, lazy and
/// streaming evaluation agree bit for bit. `backward` walks the nodes in
/// reverse creation order.
class EncoderTape {
 public:
  /// `dropout_rng` enables training-mode dropout.
  EncoderTape(const KvecModel& model, const TangledSequence& seq, const DynamicMask& mask,
              Rng* dropout_rng = nullptr);
  /// Uses the columns of `e0` (d x t) as layer 0 instead of embedding items.
  EncoderTape(const KvecModel& model, Tensor e0, const DynamicMask& mask,
              Rng* dropout_rng = nullptr);
  // The tape keeps references; temporaries would dangle.
  EncoderTape(const KvecModel&, const TangledSequence&, DynamicMask&&, Rng* = nullptr) = delete;
  EncoderTape(const KvecModel&, Tensor, DynamicMask&&, Rng* = nullptr) = delete;

  std::size_t size() const { return mask_->size(); }
  std::size_t layers() const { return blocks_ + 1; }

  std::span<const double> column(std::size_t layer, std::size_t pos);
  std::span<const double> output(std::size_t pos) { return column(blocks_, pos); }
  void compute_all();
  /// d x t matrix of one layer; computes missing columns.
  Tensor layer_matrix(std::size_t layer);

  bool has_record(std::size_t block, std::size_t pos) const;
  const AttentionRecord& record(std::size_t block, std::size_t pos) const;
  std::span<const std::size_t> visible(std::size_t pos) const { return mask_->row(pos); }

  void add_output_grad(std::size_t pos, std::span<const double> grad);
  /// Accumulates parameter gradients into `grads` (same layout as the
  /// model's store).
  void backward(ParameterStore& grads);
  /// dLoss/dE_0 column after `backward` (zero if never reached).
  std::vector<double> input_grad(std::size_t pos) const;

  std::uint64_t multiply_adds() const { return madds_; }

 private:
  enum class NodeKind : std::uint8_t { kEmbed, kProject, kRow };
  struct Node {
    NodeKind kind;
    std::uint32_t block;
    std::size_t pos;
  };
  struct Projection {
    std::vector<double> key, value, dkey, dvalue;
  };
  struct Row {
    AttentionRecord rec;
    std::vector<double> grad;
  };

  void init();
  std::span<const double> embed(std::size_t pos);
  const Projection& projection(std::size_t block, std::size_t pos);
  std::vector<double>& grad_slot(std::size_t layer, std::size_t pos);

  const KvecModel* model_;
  const TangledSequence* seq_ = nullptr;
  const DynamicMask* mask_;
  std::optional<Tensor> e0_override_;
  Rng* dropout_rng_;
  std::size_t blocks_;

  std::vector<std::vector<double>> embed_;
  std::vector<std::vector<double>> embed_grad_;
  std::vector<std::vector<std::unique_ptr<Projection>>> proj_;
  std::vector<std::vector<std::unique_ptr<Row>>> rows_;
  std::vector<Node> order_;
  std::uint64_t madds_ = 0;
};

/// Batch-mode encoder: all final-layer columns, d x t.
Tensor attention_stack(const KvecModel& model, const Tensor& e0, const DynamicMask& mask);

/// Per-key fused representation s_k, its cell memory and item count.
struct SequenceState {
  std::vector<double> s;
  std::vector<double> cell;
  std::size_t n = 0;
  bool halted = false;

  static SequenceState zero(std::size_t hidden);
};

/// Saved activations of one fusion step.
struct FusionTrace {
  std::vector<double> input;  // [s_prev; e]
  std::vector<double> forget, in, out, candidate;
  std::vector<double> cell_prev, cell, cell_tanh;
};

/// One gated fusion step: state <- Fusion(state, e). Throws
/// std::invalid_argument on a width mismatch or a halted state.
SequenceState fuse(const KvecModel& model, const SequenceState& state, std::span<const double> e,
                   FusionTrace* trace = nullptr);

struct FusionGrad {
  std::vector<double> ds_prev, dcell_prev, de;
};
/// Backpropagates dL/ds and dL/dC of one step's outputs.
FusionGrad fuse_backward(const KvecModel& model, const FusionTrace& trace, std::span<const double> ds,
                         std::span<const double> dcell, ParameterStore& grads);

}  // namespace kvec

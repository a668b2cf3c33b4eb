#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kvec/parameters.hpp"
#include "kvec/sequence_model.hpp"

namespace kvec {

/// Hyperparameters of the encoder and the ECTL heads.
struct ModelConfig {
  ValueSchema schema;
  std::size_t classes = 2;
  std::size_t embed_dim = 128;  // d
  std::size_t blocks = 6;
  std::size_t ffn_dim = 512;    // d'
  std::size_t hidden = 256;     // h, width of s_k and of the cell memory
  std::size_t slot_count = 64;
  std::size_t max_seq_pos = 256;
  MaskOptions mask;
  bool time_embedding = true;  // relative-position and arrival-time tables
  bool membership_embedding = true;
  bool residual = false;
  double dropout = 0.1;
  double init_scale = 1.0;
  double forget_bias_init = 1.0;
  double policy_bias_init = -4.0;  // starts from a mostly-Wait policy

  void validate() const;
  /// d = 128, 6 blocks, h = 256, d' = 4d.
  static ModelConfig traffic(ValueSchema schema, std::size_t classes);
  /// d = 64, 2 blocks, d' = 4d.
  static ModelConfig small(ValueSchema schema, std::size_t classes);
  /// d = 16, 1 block, d' = 32, h = 16, no dropout.
  static ModelConfig tiny(ValueSchema schema, std::size_t classes);
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const ValueSchema& s);
void from_json(const nlohmann::json& j, ValueSchema& s);

enum class Ablation { kNone, kNoKeyCorrelation, kNoValueCorrelation, kNoTimeEmbedding, kNoMembershipEmbedding };

Ablation parse_ablation(const std::string& name);
std::string to_string(Ablation a);
ModelConfig apply_ablation(ModelConfig config, Ablation ablation);

/// Per-field value embedding. Categorical: `table` is cardinality x d.
/// Numeric: `table` is 1 x d (weight on the standardized value), plus a
/// 1 x d `bias`.
struct ValueEmbedding {
  ParamId table;
  std::optional<ParamId> bias;
};

struct EmbeddingTables {
  std::vector<ValueEmbedding> value;
  ParamId membership;  // slot_count x d
  ParamId position;    // max_seq_pos x d
  ParamId time;        // window x d
};

struct AttentionBlock {
  ParamId wq, wk, wv;  // d x d
  ParamId w1, b1;      // d' x d, d' x 1
  ParamId w2, b2;      // d x d', d x 1
};

/// LSTM-style gates over [s; e], each h x (h + d).
struct FusionCell {
  ParamId wf, wi, wo, wc;
  ParamId bf, bi, bo, bc;
};

struct PolicyNet {
  ParamId w;  // 1 x h
  ParamId b;  // 1 x 1
};

struct ClassifierNet {
  ParamId w;  // C x h
  ParamId b;  // C x 1
};

/// h -> h/2 (ReLU) -> 1. Lives in its own parameter store.
struct BaselineNet {
  ParamId w1, b1, w2, b2;
};

/// Full KVEC model: encoder, fusion cell, policy and classifier share one
/// parameter store (updated with the main learning rate); the baseline
/// has its own store and learning rate.
class KvecModel {
 public:
  KvecModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  ParameterStore& baseline_params() { return baseline_params_; }
  const ParameterStore& baseline_params() const { return baseline_params_; }

  const EmbeddingTables& embedding() const { return embedding_; }
  const std::vector<AttentionBlock>& blocks() const { return blocks_; }
  const FusionCell& fusion() const { return fusion_; }
  const PolicyNet& policy() const { return policy_; }
  const ClassifierNet& classifier() const { return classifier_; }
  const BaselineNet& baseline() const { return baseline_; }

  /// Switches mask/embedding flags without touching parameters (the
  /// parameter layout does not depend on them).
  void set_ablation(Ablation ablation);
  void set_mask_options(const MaskOptions& mask) { config_.mask = mask; }

  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const;
  static KvecModel load(const std::filesystem::path& path);

 private:
  ModelConfig config_;
  ParameterStore params_;
  ParameterStore baseline_params_;
  EmbeddingTables embedding_;
  std::vector<AttentionBlock> blocks_;
  FusionCell fusion_;
  PolicyNet policy_;
  ClassifierNet classifier_;
  BaselineNet baseline_;
};

}  // namespace kvec

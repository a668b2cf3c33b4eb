#pragma once

#include <random>
#include <string>

#include "kvec/model.hpp"
#include "kvec/random.hpp"
#include "kvec/sequence_model.hpp"

namespace kvec::testing {

/// Session field (categorical), one more categorical field and a numeric one.
inline ValueSchema toy_schema(int session_cardinality = 4) {
  ValueSchema s;
  s.fields.push_back({"dir", FieldKind::kCategorical, session_cardinality, 0.0, 1.0});
  s.fields.push_back({"code", FieldKind::kCategorical, 5, 0.0, 1.0});
  s.fields.push_back({"size", FieldKind::kNumeric, 0, 3.0, 2.0});
  s.session_dim = 0;
  return s;
}

inline TangledSequence random_sequence(Rng& rng, std::size_t length, std::size_t keys,
                                       int session_cardinality = 4, std::size_t classes = 2) {
  TangledSequence seq(toy_schema(session_cardinality));
  std::uniform_int_distribution<std::size_t> key_dist(0, keys - 1);
  std::uniform_int_distribution<int> dir(0, session_cardinality - 1);
  std::uniform_int_distribution<int> code(0, 4);
  std::normal_distribution<double> size(3.0, 2.0);
  for (std::size_t i = 0; i < length; ++i) {
    const std::string key = "k" + std::to_string(key_dist(rng));
    seq.ingest(key, {static_cast<double>(dir(rng)), static_cast<double>(code(rng)), size(rng)});
  }
  for (KeyId k = 0; k < seq.key_count(); ++k)
    seq.set_label(seq.key_name(k), static_cast<int>(std::hash<std::string>{}(seq.key_name(k)) % classes));
  return seq;
}

inline ModelConfig small_config(ValueSchema schema, std::size_t classes = 2, std::size_t blocks = 2) {
  ModelConfig c = ModelConfig::tiny(std::move(schema), classes);
  c.embed_dim = 8;
  c.blocks = blocks;
  c.ffn_dim = 12;
  c.hidden = 6;
  c.slot_count = 5;
  c.max_seq_pos = 32;
  c.mask.window = 600;
  c.policy_bias_init = 0.0;
  return c;
}

}  // namespace kvec::testing

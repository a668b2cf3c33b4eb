#include "kvec/model.hpp"

#include <cmath>
#include <random>

#include "kvec/checkpoint.hpp"
#include "kvec/error.hpp"

namespace kvec {

void ModelConfig::validate() const {
  schema.validate();
  if (classes < 2) throw ValidationError("model needs at least 2 classes");
  if (embed_dim == 0 || ffn_dim == 0 || hidden == 0) throw ValidationError("model widths must be positive");
  if (slot_count == 0 || max_seq_pos == 0 || mask.window == 0)
    throw ValidationError("embedding table sizes must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ValidationError("dropout must lie in [0, 1)");
  if (hidden < 2) throw ValidationError("hidden width must be at least 2");
}

ModelConfig ModelConfig::traffic(ValueSchema schema, std::size_t classes) {
  ModelConfig c;
  c.schema = std::move(schema);
  c.classes = classes;
  c.embed_dim = 128;
  c.blocks = 6;
  c.ffn_dim = 512;
  c.hidden = 256;
  return c;
}

ModelConfig ModelConfig::small(ValueSchema schema, std::size_t classes) {
  ModelConfig c = traffic(std::move(schema), classes);
  c.embed_dim = 64;
  c.blocks = 2;
  c.ffn_dim = 256;
  return c;
}

ModelConfig ModelConfig::tiny(ValueSchema schema, std::size_t classes) {
  ModelConfig c = traffic(std::move(schema), classes);
  c.embed_dim = 16;
  c.blocks = 1;
  c.ffn_dim = 32;
  c.hidden = 16;
  c.max_seq_pos = 128;
  c.dropout = 0.0;
  return c;
}

void to_json(nlohmann::json& j, const ValueSchema& s) {
  j = nlohmann::json::object();
  j["session_dim"] = s.session_dim;
  j["session_max_gap"] = s.session_max_gap;
  j["fields"] = nlohmann::json::array();
  for (const auto& f : s.fields) {
    if (f.kind == FieldKind::kCategorical) {
      j["fields"].push_back({{"name", f.name}, {"kind", "categorical"}, {"cardinality", f.cardinality}});
    } else {
      j["fields"].push_back({{"name", f.name}, {"kind", "numeric"}, {"mean", f.mean}, {"std", f.stddev}});
    }
  }
}

void from_json(const nlohmann::json& j, ValueSchema& s) {
  s = ValueSchema{};
  s.session_dim = j.at("session_dim").get<std::size_t>();
  s.session_max_gap = j.value("session_max_gap", std::int64_t{0});
  for (const auto& f : j.at("fields")) {
    FieldSpec spec;
    spec.name = f.at("name").get<std::string>();
    const auto kind = f.at("kind").get<std::string>();
    if (kind == "categorical") {
      spec.kind = FieldKind::kCategorical;
      spec.cardinality = f.at("cardinality").get<int>();
    } else if (kind == "numeric") {
      spec.kind = FieldKind::kNumeric;
      spec.mean = f.at("mean").get<double>();
      spec.stddev = f.at("std").get<double>();
    } else {
      throw SchemaError("unknown field kind '" + kind + "'");
    }
    s.fields.push_back(std::move(spec));
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"schema", c.schema},
       {"classes", c.classes},
       {"embed_dim", c.embed_dim},
       {"blocks", c.blocks},
       {"ffn_dim", c.ffn_dim},
       {"hidden", c.hidden},
       {"slot_count", c.slot_count},
       {"max_seq_pos", c.max_seq_pos},
       {"window", c.mask.window},
       {"key_correlation", c.mask.key_correlation},
       {"value_correlation", c.mask.value_correlation},
       {"time_embedding", c.time_embedding},
       {"membership_embedding", c.membership_embedding},
       {"residual", c.residual},
       {"dropout", c.dropout},
       {"init_scale", c.init_scale},
       {"forget_bias_init", c.forget_bias_init},
       {"policy_bias_init", c.policy_bias_init}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  c.schema = j.at("schema").get<ValueSchema>();
  c.classes = j.at("classes").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.blocks = j.at("blocks").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.slot_count = j.at("slot_count").get<std::size_t>();
  c.max_seq_pos = j.at("max_seq_pos").get<std::size_t>();
  c.mask.window = j.at("window").get<std::size_t>();
  c.mask.key_correlation = j.at("key_correlation").get<bool>();
  c.mask.value_correlation = j.at("value_correlation").get<bool>();
  c.time_embedding = j.at("time_embedding").get<bool>();
  c.membership_embedding = j.at("membership_embedding").get<bool>();
  c.residual = j.at("residual").get<bool>();
  c.dropout = j.at("dropout").get<double>();
  c.init_scale = j.value("init_scale", 1.0);
  c.forget_bias_init = j.value("forget_bias_init", 1.0);
  c.policy_bias_init = j.value("policy_bias_init", -4.0);
}

Ablation parse_ablation(const std::string& name) {
  if (name == "none") return Ablation::kNone;
  if (name == "key") return Ablation::kNoKeyCorrelation;
  if (name == "value") return Ablation::kNoValueCorrelation;
  if (name == "time") return Ablation::kNoTimeEmbedding;
  if (name == "membership") return Ablation::kNoMembershipEmbedding;
  throw UsageError("unknown ablation '" + name + "' (expected none|key|value|time|membership)");
}

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::kNone: return "none";
    case Ablation::kNoKeyCorrelation: return "key";
    case Ablation::kNoValueCorrelation: return "value";
    case Ablation::kNoTimeEmbedding: return "time";
    case Ablation::kNoMembershipEmbedding: return "membership";
  }
  return "none";
}

ModelConfig apply_ablation(ModelConfig config, Ablation ablation) {
  switch (ablation) {
    case Ablation::kNone: break;
    case Ablation::kNoKeyCorrelation: config.mask.key_correlation = false; break;
    case Ablation::kNoValueCorrelation: config.mask.value_correlation = false; break;
    case Ablation::kNoTimeEmbedding: config.time_embedding = false; break;
    case Ablation::kNoMembershipEmbedding: config.membership_embedding = false; break;
  }
  return config;
}

namespace {

Tensor xavier(std::size_t rows, std::size_t cols, double scale, std::mt19937_64& rng) {
  const double a = scale * std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-a, a);
  Tensor t(rows, cols);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

Tensor gaussian(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(rows, cols);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace

KvecModel::KvecModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.embed_dim;
  const std::size_t h = config_.hidden;
  const double s = config_.init_scale;
  const double embed_std = s / std::sqrt(static_cast<double>(d));

  for (const auto& f : config_.schema.fields) {
    ValueEmbedding ve;
    if (f.kind == FieldKind::kCategorical) {
      ve.table = params_.add("embed.value." + f.name, gaussian(f.cardinality, d, embed_std, rng));
    } else {
      ve.table = params_.add("embed.value." + f.name + ".w", gaussian(1, d, embed_std, rng));
      ve.bias = params_.add("embed.value." + f.name + ".b", Tensor(1, d));
    }
    embedding_.value.push_back(ve);
  }
  embedding_.membership = params_.add("embed.membership", gaussian(config_.slot_count, d, embed_std, rng));
  embedding_.position = params_.add("embed.position", gaussian(config_.max_seq_pos, d, embed_std, rng));
  embedding_.time = params_.add("embed.time", gaussian(config_.mask.window, d, embed_std, rng));

  for (std::size_t b = 0; b < config_.blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    AttentionBlock blk;
    blk.wq = params_.add(p + "wq", xavier(d, d, s, rng));
    blk.wk = params_.add(p + "wk", xavier(d, d, s, rng));
    blk.wv = params_.add(p + "wv", xavier(d, d, s, rng));
    blk.w1 = params_.add(p + "w1", xavier(config_.ffn_dim, d, s, rng));
    blk.b1 = params_.add(p + "b1", Tensor(config_.ffn_dim, 1));
    blk.w2 = params_.add(p + "w2", xavier(d, config_.ffn_dim, s, rng));
    blk.b2 = params_.add(p + "b2", Tensor(d, 1));
    blocks_.push_back(blk);
  }

  fusion_.wf = params_.add("fusion.wf", xavier(h, h + d, s, rng));
  fusion_.wi = params_.add("fusion.wi", xavier(h, h + d, s, rng));
  fusion_.wo = params_.add("fusion.wo", xavier(h, h + d, s, rng));
  fusion_.wc = params_.add("fusion.wc", xavier(h, h + d, s, rng));
  fusion_.bf = params_.add("fusion.bf", Tensor(h, 1, config_.forget_bias_init));
  fusion_.bi = params_.add("fusion.bi", Tensor(h, 1));
  fusion_.bo = params_.add("fusion.bo", Tensor(h, 1));
  fusion_.bc = params_.add("fusion.bc", Tensor(h, 1));

  policy_.w = params_.add("policy.w", xavier(1, h, s, rng));
  policy_.b = params_.add("policy.b", Tensor(1, 1, config_.policy_bias_init));

  classifier_.w = params_.add("classifier.w", xavier(config_.classes, h, s, rng));
  classifier_.b = params_.add("classifier.b", Tensor(config_.classes, 1));

  const std::size_t half = h / 2;
  baseline_.w1 = baseline_params_.add("baseline.w1", xavier(half, h, s, rng));
  baseline_.b1 = baseline_params_.add("baseline.b1", Tensor(half, 1));
  baseline_.w2 = baseline_params_.add("baseline.w2", xavier(1, half, s, rng));
  baseline_.b2 = baseline_params_.add("baseline.b2", Tensor(1, 1));
}

void KvecModel::set_ablation(Ablation ablation) { config_ = apply_ablation(config_, ablation); }

void KvecModel::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  nlohmann::json meta = {{"model", config_}};
  if (!extra.is_null()) meta["extra"] = extra;
  write_checkpoint(path, meta, {{"model", &params_}, {"baseline", &baseline_params_}});
}

KvecModel KvecModel::load(const std::filesystem::path& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  if (!ckpt.meta.contains("model")) throw ValidationError("checkpoint lacks a model config: " + path.string());
  KvecModel model(ckpt.meta.at("model").get<ModelConfig>(), 0);
  load_parameters(model.params_, ckpt, "model");
  load_parameters(model.baseline_params_, ckpt, "baseline");
  return model;
}

}  // namespace kvec

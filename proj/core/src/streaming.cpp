#include "kvec/streaming.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "kvec/error.hpp"
#include "kvec/training.hpp"

namespace kvec {

LatentCache::LatentCache(std::size_t layers, std::size_t window, bool cache_kv)
    : window_(window), cache_kv_(cache_kv), columns_(layers) {
  if (window == 0) throw std::invalid_argument("latent cache window must be positive");
  if (cache_kv) {
    keys_.resize(layers - 1);
    values_.resize(layers - 1);
  }
}

std::span<const double> LatentCache::column(std::size_t layer, std::size_t pos) const {
  if (!contains(pos))
    throw std::out_of_range("position not in latent cache");
  return columns_.at(layer).at(pos - first_);
}

std::span<const double> LatentCache::key(std::size_t block, std::size_t pos) const {
  return keys_.at(block).at(pos - first_);
}

std::span<const double> LatentCache::value(std::size_t block, std::size_t pos) const {
  return values_.at(block).at(pos - first_);
}

void LatentCache::make_room() {
  while (size() >= window_) {
    for (auto& layer : columns_) layer.pop_front();
    for (auto& k : keys_) k.pop_front();
    for (auto& v : values_) v.pop_front();
    ++first_;
  }
}

void LatentCache::push_column(std::size_t layer, std::vector<double> column) {
  columns_.at(layer).push_back(std::move(column));
}

void LatentCache::push_kv(std::size_t block, std::vector<double> key, std::vector<double> value) {
  keys_.at(block).push_back(std::move(key));
  values_.at(block).push_back(std::move(value));
}

StreamEngine::StreamEngine(const KvecModel& model, StreamOptions options)
    : model_(&model), options_(options),
      mask_(model.config().mask, model.config().schema.session_max_gap),
      cache_(model.config().blocks + 1, model.config().mask.window, options.cache_kv) {}

const SequenceState* StreamEngine::state(std::string_view key) const {
  const auto it = ids_.find(std::string(key));
  return it == ids_.end() ? nullptr : &keys_[it->second].state;
}

StepOutcome StreamEngine::step_at(std::int64_t arrival_index, std::string_view key,
                                  std::vector<double> value) {
  const auto expected = static_cast<std::int64_t>(next_pos_) + 1;
  if (arrival_index != expected)
    throw ValidationError("non-monotone arrival index " + std::to_string(arrival_index) +
                          " (expected " + std::to_string(expected) + ")");
  return step(key, std::move(value));
}

StepOutcome StreamEngine::step(std::string_view key, std::vector<double> value) {
  const ModelConfig& cfg = model_->config();
  cfg.schema.check_value(value);

  auto [it, inserted] = ids_.try_emplace(std::string(key), static_cast<KeyId>(keys_.size()));
  if (inserted) keys_.push_back({it->second, std::string(key), SequenceState::zero(cfg.hidden), 0});
  KeyEntry& entry = keys_[it->second];

  const std::size_t pos = next_pos_++;
  const auto seq_index = static_cast<std::int64_t>(++entry.seen);
  const auto vis = mask_.next_row(entry.id, cfg.schema.session_value(value));
  std::uint64_t madds = 0;

  cache_.make_room();
  const std::size_t d = cfg.embed_dim;
  std::vector<double> e0(d);
  ItemFeatures feat{value, entry.id % cfg.slot_count, seq_index, static_cast<std::int64_t>(pos) + 1};
  embed_item(*model_, feat, e0);
  cache_.push_column(0, std::move(e0));

  std::vector<std::span<const double>> keys, values;
  std::vector<std::vector<double>> scratch_k, scratch_v;
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const AttentionBlock& blk = model_->blocks()[b];
    const auto x = cache_.column(b, pos);
    keys.clear();
    values.clear();
    if (cache_.caches_kv()) {
      std::vector<double> k(d), v(d);
      project_kv(*model_, blk, x, k, v);
      madds += project_kv_cost(cfg);
      cache_.push_kv(b, std::move(k), std::move(v));
      for (std::size_t j : vis) {
        keys.push_back(cache_.key(b, j));
        values.push_back(cache_.value(b, j));
      }
    } else {
      scratch_k.assign(vis.size(), std::vector<double>(d));
      scratch_v.assign(vis.size(), std::vector<double>(d));
      for (std::size_t n = 0; n < vis.size(); ++n) {
        project_kv(*model_, blk, cache_.column(b, vis[n]), scratch_k[n], scratch_v[n]);
        keys.emplace_back(scratch_k[n]);
        values.emplace_back(scratch_v[n]);
      }
      madds += vis.size() * project_kv_cost(cfg);
    }
    attend_row(*model_, blk, x, keys, values, scratch_, nullptr);
    madds += attend_row_cost(cfg, vis.size());
    cache_.push_column(b + 1, scratch_.output);
  }

  ++stats_.items;
  stats_.multiply_adds += madds;
  stats_.last_step_multiply_adds = madds;

  StepOutcome out;
  out.key = entry.name;
  out.arrival_index = static_cast<std::int64_t>(pos) + 1;
  if (entry.state.halted) {
    ++stats_.skipped;
    out.skipped = true;
    out.step = entry.seen;
    return out;
  }
  entry.state = fuse(*model_, entry.state, cache_.column(cfg.blocks, pos));
  out.step = entry.state.n;
  out.p_halt = halt_probability(*model_, entry.state.s);
  out.action = out.p_halt >= options_.threshold ? Action::kHalt : Action::kWait;
  out.state = entry.state.s;
  if (out.action == Action::kHalt) {
    out.classification = classify(*model_, entry.state.s);
    entry.state.halted = true;
    ++stats_.halted;
  }
  return out;
}

std::vector<StepOutcome> StreamEngine::finish() {
  std::vector<StepOutcome> out;
  for (auto& entry : keys_) {
    if (entry.state.halted) continue;
    StepOutcome o;
    o.key = entry.name;
    o.arrival_index = static_cast<std::int64_t>(next_pos_);
    o.step = entry.state.n;
    o.p_halt = halt_probability(*model_, entry.state.s);
    o.action = Action::kHalt;
    o.forced = true;
    o.state = entry.state.s;
    o.classification = classify(*model_, entry.state.s);
    entry.state.halted = true;
    ++stats_.halted;
    out.push_back(std::move(o));
  }
  return out;
}

namespace {

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

EquivalenceReport verify_equivalence(const KvecModel& model, const TangledSequence& seq,
                                     StreamOptions options) {
  if (model.config().mask.window < seq.size())
    throw ValidationError("equivalence check needs a window of at least the stream length");
  const DynamicMask mask = DynamicMask::build(seq, model.config().mask);
  RolloutOptions ro;
  ro.rule = HaltRule::kPolicyThreshold;
  ro.record = true;
  Rollout batch(model, seq, mask, ro);
  EncoderTape& tape = batch.tape();
  tape.compute_all();

  // Step index of each stream position within its key's batch episode.
  std::vector<const Episode*> episode_of(seq.key_count(), nullptr);
  for (const auto& ep : batch.episodes()) episode_of[ep.key] = &ep;

  EquivalenceReport report;
  report.positions = seq.size();
  report.per_position.assign(seq.size(), 0.0);
  StreamEngine engine(model, options);
  auto note = [&](std::size_t pos, double dev) {
    report.per_position[pos] = std::max(report.per_position[pos], dev);
    report.max_abs_deviation = std::max(report.max_abs_deviation, dev);
  };
  auto compare_classification = [&](std::size_t pos, const Classification& a, const Classification& b) {
    note(pos, max_abs_diff(a.distribution, b.distribution));
    if (a.label != b.label) report.decisions_identical = false;
  };

  for (std::size_t pos = 0; pos < seq.size(); ++pos) {
    const Item& item = seq[pos];
    const StepOutcome out = engine.step(item.key, item.value);
    for (std::size_t layer = 0; layer < tape.layers(); ++layer)
      note(pos, max_abs_diff(engine.cache().column(layer, pos), tape.column(layer, pos)));

    const Episode& ep = *episode_of[item.key_id];
    const std::size_t step = static_cast<std::size_t>(item.seq_index) - 1;
    const bool batch_active = step < ep.halt_step();
    if (out.skipped != !batch_active) {
      report.decisions_identical = false;
      continue;
    }
    if (out.skipped) continue;
    note(pos, max_abs_diff(out.state, batch.states(item.key_id)[step]));
    note(pos, std::abs(out.p_halt - ep.p_halt[step]));
    const bool last = step + 1 == ep.halt_step();
    if (out.action == Action::kHalt) {
      if (!last || ep.forced) report.decisions_identical = false;
      else compare_classification(pos, *out.classification, ep.output);
    } else if (last && !ep.forced) {
      report.decisions_identical = false;
    }
  }
  for (const StepOutcome& o : engine.finish()) {
    const auto key = seq.find_key(o.key);
    const Episode& ep = *episode_of[*key];
    if (!ep.forced) report.decisions_identical = false;
    else compare_classification(ep.halt_position(), *o.classification, ep.output);
  }
  return report;
}

std::vector<std::vector<double>> recompute_stream(const KvecModel& model, const TangledSequence& seq,
                                                  std::uint64_t* multiply_adds) {
  std::vector<std::vector<double>> out;
  out.reserve(seq.size());
  std::uint64_t total = 0;
  for (std::size_t t = 1; t <= seq.size(); ++t) {
    const DynamicMask mask = DynamicMask::build(seq, model.config().mask, t);
    EncoderTape tape(model, seq, mask);
    tape.compute_all();
    total += tape.multiply_adds();
    const auto col = tape.output(t - 1);
    out.emplace_back(col.begin(), col.end());
  }
  if (multiply_adds != nullptr) *multiply_adds = total;
  return out;
}

}  // namespace kvec

#include "kvec/sequence_model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "kvec/error.hpp"

namespace kvec {

void ValueSchema::validate() const {
  if (fields.empty()) throw SchemaError("schema has no value fields");
  if (session_dim >= fields.size())
    throw SchemaError("session dimension " + std::to_string(session_dim) + " out of range");
  if (fields[session_dim].kind != FieldKind::kCategorical)
    throw SchemaError("session dimension '" + fields[session_dim].name + "' must be categorical");
  for (const auto& f : fields) {
    if (f.kind == FieldKind::kCategorical && f.cardinality < 1)
      throw SchemaError("categorical field '" + f.name + "' needs a positive cardinality");
    if (f.kind == FieldKind::kNumeric && !(f.stddev > 0.0))
      throw SchemaError("numeric field '" + f.name + "' needs a positive stddev");
  }
}

void ValueSchema::check_value(std::span<const double> value) const {
  if (value.size() != fields.size())
    throw SchemaError("value arity " + std::to_string(value.size()) + " != schema arity " +
                      std::to_string(fields.size()));
  for (std::size_t d = 0; d < fields.size(); ++d) {
    const double x = value[d];
    if (!std::isfinite(x))
      throw SchemaError("field '" + fields[d].name + "' is not finite");
    if (fields[d].kind != FieldKind::kCategorical) continue;
    if (x != std::floor(x) || x < 0 || x >= fields[d].cardinality)
      throw SchemaError("field '" + fields[d].name + "' code " + std::to_string(x) +
                        " outside [0, " + std::to_string(fields[d].cardinality) + ")");
  }
}

int ValueSchema::session_value(std::span<const double> value) const {
  return static_cast<int>(value[session_dim]);
}

TangledSequence::TangledSequence(ValueSchema schema) : schema_(std::move(schema)) {
  schema_.validate();
}

const Item& TangledSequence::ingest(std::string_view key, std::vector<double> value) {
  schema_.check_value(value);

  KeyId id;
  if (auto it = key_ids_.find(std::string(key)); it != key_ids_.end()) {
    id = it->second;
  } else {
    id = static_cast<KeyId>(key_names_.size());
    key_names_.emplace_back(key);
    key_ids_.emplace(std::string(key), id);
    positions_.emplace_back();
    sessions_.emplace_back();
  }

  const std::size_t pos = items_.size();
  const int sv = schema_.session_value(value);
  auto& positions = positions_[id];
  auto& sessions = sessions_[id];
  const bool gap_break = schema_.session_max_gap > 0 && !positions.empty() &&
                         static_cast<std::int64_t>(pos - positions.back()) > schema_.session_max_gap;
  if (sessions.empty() || sessions.back().value != sv || gap_break) {
    sessions.push_back(Session{sv, {}});
  }
  sessions.back().positions.push_back(pos);
  positions.push_back(pos);

  Item item;
  item.key = std::string(key);
  item.value = std::move(value);
  item.arrival_index = static_cast<std::int64_t>(pos) + 1;
  item.seq_index = static_cast<std::int64_t>(positions.size());
  item.key_id = id;
  items_.push_back(std::move(item));
  return items_.back();
}

const Item& TangledSequence::ingest_at(std::int64_t arrival_index, std::string_view key,
                                       std::vector<double> value) {
  const auto expected = static_cast<std::int64_t>(items_.size()) + 1;
  if (arrival_index != expected)
    throw ValidationError("arrival index " + std::to_string(arrival_index) + " out of order (expected " +
                          std::to_string(expected) + ")");
  return ingest(key, std::move(value));
}

void TangledSequence::set_label(std::string_view key, int label) {
  labels_[std::string(key)] = label;
}

bool TangledSequence::has_label(std::string_view key) const {
  return labels_.contains(std::string(key));
}

int TangledSequence::label(std::string_view key) const {
  auto it = labels_.find(std::string(key));
  if (it == labels_.end()) throw ValidationError("missing label for key '" + std::string(key) + "'");
  return it->second;
}

void TangledSequence::validate_labels() const {
  for (const auto& name : key_names_) {
    if (!labels_.contains(name)) throw ValidationError("missing label for key '" + name + "'");
  }
}

std::optional<KeyId> TangledSequence::find_key(std::string_view key) const {
  auto it = key_ids_.find(std::string(key));
  if (it == key_ids_.end()) return std::nullopt;
  return it->second;
}

bool TangledSequence::operator==(const TangledSequence& other) const {
  return schema_ == other.schema_ && items_ == other.items_ && labels_ == other.labels_;
}

bool key_correlated(const Item& a, const Item& b) { return a.key == b.key; }

bool value_correlated(const TangledSequence& seq, std::size_t i, std::size_t j) {
  if (j >= i) throw std::invalid_argument("value_correlated requires j < i");
  const auto& schema = seq.schema();
  const int target = seq.session_value(i);
  const auto positions = seq.positions_of(seq[j].key_id);

  // Items of j's key observed before i, newest first.
  auto end = std::lower_bound(positions.begin(), positions.end(), i);
  if (end == positions.begin()) return false;
  std::size_t next = i;  // the re-keyed item sits after the last observed one
  for (auto it = end; it != positions.begin();) {
    --it;
    if (seq.session_value(*it) != target) return false;
    if (schema.session_max_gap > 0 &&
        static_cast<std::int64_t>(next - *it) > schema.session_max_gap)
      return false;
    if (*it == j) return true;
    next = *it;
  }
  return false;
}

MaskBuilder::MaskBuilder(MaskOptions options, std::int64_t session_max_gap)
    : options_(options), max_gap_(session_max_gap) {
  if (options_.window == 0) throw std::invalid_argument("mask window must be positive");
}

std::vector<std::size_t> MaskBuilder::next_row(KeyId key, int session_value) {
  const std::size_t pos = next_pos_++;
  prune(pos);

  std::vector<std::size_t> row;
  auto own = keys_.find(key);
  if (options_.key_correlation && own != keys_.end()) {
    row.insert(row.end(), own->second.positions.begin(), own->second.positions.end());
  }
  if (options_.value_correlation) {
    if (auto bucket = runs_by_value_.find(session_value); bucket != runs_by_value_.end()) {
      for (KeyId other : bucket->second) {
        if (other == key) continue;
        const auto& run = keys_.at(other).run;
        if (max_gap_ > 0 && static_cast<std::int64_t>(pos - run.back()) > max_gap_) continue;
        row.insert(row.end(), run.begin(), run.end());
      }
    }
  }
  std::sort(row.begin(), row.end());
  row.push_back(pos);

  auto& track = keys_[key];
  const bool continues = !track.run.empty() && track.run_value == session_value &&
                         (max_gap_ == 0 || static_cast<std::int64_t>(pos - track.run.back()) <= max_gap_);
  if (!continues) {
    if (!track.run.empty()) runs_by_value_[track.run_value].erase(key);
    track.run.clear();
    track.run_value = session_value;
    runs_by_value_[session_value].insert(key);
  }
  track.run.push_back(pos);
  track.positions.push_back(pos);
  return row;
}

void MaskBuilder::prune(std::size_t current) {
  // Positions p with current - p >= window can never be visible again.
  if (current < options_.window) return;
  const std::size_t oldest = current - options_.window + 1;
  for (auto it = keys_.begin(); it != keys_.end();) {
    auto& t = it->second;
    while (!t.positions.empty() && t.positions.front() < oldest) t.positions.pop_front();
    while (!t.run.empty() && t.run.front() < oldest) t.run.pop_front();
    if (t.positions.empty()) {
      runs_by_value_[t.run_value].erase(it->first);
      it = keys_.erase(it);
    } else {
      ++it;
    }
  }
}

DynamicMask DynamicMask::build(const TangledSequence& seq, const MaskOptions& options) {
  return build(seq, options, seq.size());
}

DynamicMask DynamicMask::build(const TangledSequence& seq, const MaskOptions& options,
                               std::size_t t) {
  if (t > seq.size()) throw std::out_of_range("mask length exceeds ingested items");
  DynamicMask mask;
  mask.options_ = options;
  mask.rows_.reserve(t);
  MaskBuilder builder(options, seq.schema().session_max_gap);
  for (std::size_t i = 0; i < t; ++i) {
    mask.rows_.push_back(builder.next_row(seq[i].key_id, seq.session_value(i)));
  }
  return mask;
}

DenseMask DynamicMask::to_dense() const {
  DenseMask dense(rows_.size());
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    for (std::size_t j : rows_[i]) dense.set(i, j, true);
  }
  return dense;
}

std::vector<std::size_t> mask_row(const TangledSequence& seq, std::size_t i,
                                  const MaskOptions& options) {
  if (i >= seq.size()) throw std::out_of_range("mask row beyond ingested items");
  MaskBuilder builder(options, seq.schema().session_max_gap);
  for (std::size_t p = 0; p < i; ++p) builder.next_row(seq[p].key_id, seq.session_value(p));
  return builder.next_row(seq[i].key_id, seq.session_value(i));
}

DenseMask mask_oracle(const TangledSequence& seq, std::size_t t, const MaskOptions& options) {
  DenseMask dense(t);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      bool visible = false;
      if (i == j) {
        visible = true;
      } else if (i - j < options.window) {
        const bool by_key = options.key_correlation && key_correlated(seq[i], seq[j]);
        const bool by_value = options.value_correlation && !key_correlated(seq[i], seq[j]) &&
                              value_correlated(seq, i, j);
        visible = by_key || by_value;
      }
      dense.set(i, j, visible);
    }
  }
  return dense;
}

}  // namespace kvec

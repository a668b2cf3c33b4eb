#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace kvec {

enum class FieldKind { kCategorical, kNumeric };

struct FieldSpec {
  std::string name;
  FieldKind kind = FieldKind::kCategorical;
  int cardinality = 0;  // categorical only
  double mean = 0.0;    // numeric only; training-split statistics
  double stddev = 1.0;

  bool operator==(const FieldSpec&) const = default;
};

/// Per-dimension value spaces plus the session definition.
struct ValueSchema {
  std::vector<FieldSpec> fields;
  std::size_t session_dim = 0;
  // Consecutive same-key items further apart than this (in arrival
  // positions) start a new session. 0 disables the gap rule.
  std::int64_t session_max_gap = 0;

  std::size_t arity() const { return fields.size(); }
  /// Throws SchemaError unless the session dimension is categorical.
  void validate() const;
  /// Throws SchemaError on arity mismatch or out-of-domain categorical codes.
  void check_value(std::span<const double> value) const;
  int session_value(std::span<const double> value) const;

  bool operator==(const ValueSchema&) const = default;
};

using KeyId = std::uint32_t;

/// One event <k, v> of the tangled stream. Indices are 1-based.
struct Item {
  std::string key;
  std::vector<double> value;
  std::int64_t arrival_index = 0;
  std::int64_t seq_index = 0;
  KeyId key_id = 0;  // dense id in order of first appearance

  bool operator==(const Item&) const = default;
};

/// Maximal run of consecutive same-key items sharing the session value.
/// `positions` are 0-based stream positions.
struct Session {
  int value = 0;
  std::vector<std::size_t> positions;

  bool operator==(const Session&) const = default;
};

/// Several concurrent key-value sequences mixed into one ordered stream.
///
/// Single writer: `ingest` appends; every read on an ingested prefix is
/// side-effect free.
class TangledSequence {
 public:
  TangledSequence() = default;
  explicit TangledSequence(ValueSchema schema);

  /// Appends the next item, assigning arrival and sequence indices.
  const Item& ingest(std::string_view key, std::vector<double> value);
  /// Like `ingest`, but checks the caller-supplied arrival index is the
  /// next one in order.
  const Item& ingest_at(std::int64_t arrival_index, std::string_view key,
                        std::vector<double> value);

  void set_label(std::string_view key, int label);
  bool has_label(std::string_view key) const;
  int label(std::string_view key) const;
  int label(KeyId key) const { return label(key_names_.at(key)); }
  const std::unordered_map<std::string, int>& labels() const { return labels_; }
  /// Throws ValidationError naming the first unlabeled key.
  void validate_labels() const;

  const ValueSchema& schema() const { return schema_; }
  std::span<const Item> items() const { return items_; }
  const Item& operator[](std::size_t pos) const { return items_[pos]; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }

  std::size_t key_count() const { return key_names_.size(); }
  const std::string& key_name(KeyId key) const { return key_names_.at(key); }
  std::optional<KeyId> find_key(std::string_view key) const;
  std::span<const std::size_t> positions_of(KeyId key) const { return positions_.at(key); }
  std::size_t length_of(KeyId key) const { return positions_.at(key).size(); }
  std::span<const Session> sessions_of(KeyId key) const { return sessions_.at(key); }
  int session_value(std::size_t pos) const {
    return schema_.session_value(items_[pos].value);
  }

  bool operator==(const TangledSequence& other) const;

 private:
  ValueSchema schema_;
  std::vector<Item> items_;
  std::vector<std::string> key_names_;
  std::unordered_map<std::string, KeyId> key_ids_;
  std::vector<std::vector<std::size_t>> positions_;
  std::vector<std::vector<Session>> sessions_;
  std::unordered_map<std::string, int> labels_;
};

bool key_correlated(const Item& a, const Item& b);

/// True iff, re-keying item `i` to item `j`'s key and appending it to that
/// key's sequence as observed before `i`, would put it in `j`'s session:
/// `j` lies in the trailing run of its key whose session values equal
/// item `i`'s. Positions are 0-based; requires j < i.
bool value_correlated(const TangledSequence& seq, std::size_t i, std::size_t j);

struct MaskOptions {
  bool key_correlation = true;
  bool value_correlation = true;
  // Only the `window` most recent positions (the row's own included)
  // may be visible.
  std::size_t window = 512;

  bool operator==(const MaskOptions&) const = default;
};

/// Incremental dynamic-mask rows. Each call to `next_row` describes the
/// item at the next stream position; state outside the window is pruned,
/// so memory stays bounded on unbounded streams.
class MaskBuilder {
 public:
  MaskBuilder(MaskOptions options, std::int64_t session_max_gap = 0);

  /// Visible positions (ascending, ending with the new position itself).
  std::vector<std::size_t> next_row(KeyId key, int session_value);
  std::size_t position() const { return next_pos_; }

 private:
  struct KeyTrack {
    std::deque<std::size_t> positions;
    std::deque<std::size_t> run;
    int run_value = 0;
  };

  void prune(std::size_t current);

  MaskOptions options_;
  std::int64_t max_gap_ = 0;
  std::size_t next_pos_ = 0;
  std::unordered_map<KeyId, KeyTrack> keys_;
  std::unordered_map<int, std::unordered_set<KeyId>> runs_by_value_;
};

/// Square boolean matrix, row-major. Entry (i, j) true means visible.
class DenseMask {
 public:
  explicit DenseMask(std::size_t n = 0) : n_(n), bits_(n * n, 0) {}
  std::size_t size() const { return n_; }
  bool operator()(std::size_t i, std::size_t j) const { return bits_[i * n_ + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v) { bits_[i * n_ + j] = v ? 1 : 0; }
  bool operator==(const DenseMask&) const = default;

 private:
  std::size_t n_;
  std::vector<std::uint8_t> bits_;
};

/// Append-only set of mask rows for a whole tangled sequence.
class DynamicMask {
 public:
  DynamicMask() = default;
  static DynamicMask build(const TangledSequence& seq, const MaskOptions& options);
  /// Rows for the first `t` items only.
  static DynamicMask build(const TangledSequence& seq, const MaskOptions& options,
                           std::size_t t);

  std::size_t size() const { return rows_.size(); }
  std::span<const std::size_t> row(std::size_t i) const { return rows_.at(i); }
  const MaskOptions& options() const { return options_; }
  DenseMask to_dense() const;

 private:
  MaskOptions options_;
  std::vector<std::vector<std::size_t>> rows_;
};

/// Row `i` (0-based) of the dynamic mask, as visible positions.
/// Throws std::out_of_range if `i` exceeds the ingested length.
std::vector<std::size_t> mask_row(const TangledSequence& seq, std::size_t i,
                                  const MaskOptions& options);

/// Full t x t mask computed entry by entry from the correlation
/// predicates, with no incremental state.
DenseMask mask_oracle(const TangledSequence& seq, std::size_t t, const MaskOptions& options);

}  // namespace kvec

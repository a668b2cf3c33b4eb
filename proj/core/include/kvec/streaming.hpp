#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kvec/ectl.hpp"
#include "kvec/kvrl.hpp"
#include "kvec/model.hpp"

namespace kvec {

/// Per-layer latent columns of the most recent `window` stream positions.
/// Layer 0 holds input embeddings, layer b + 1 the output of block b.
class LatentCache {
 public:
  LatentCache(std::size_t layers, std::size_t window, bool cache_kv);

  std::size_t window() const { return window_; }
  std::size_t layers() const { return columns_.size(); }
  /// Oldest cached position and one past the newest.
  std::size_t first() const { return first_; }
  std::size_t end() const { return first_ + size(); }
  std::size_t size() const { return columns_.front().size(); }
  bool contains(std::size_t pos) const { return pos >= first_ && pos < end(); }

  std::span<const double> column(std::size_t layer, std::size_t pos) const;
  bool caches_kv() const { return cache_kv_; }
  std::span<const double> key(std::size_t block, std::size_t pos) const;
  std::span<const double> value(std::size_t block, std::size_t pos) const;

  /// Drops the oldest position from every layer while full.
  void make_room();
  void push_column(std::size_t layer, std::vector<double> column);
  void push_kv(std::size_t block, std::vector<double> key, std::vector<double> value);

 private:
  std::size_t window_;
  bool cache_kv_;
  std::size_t first_ = 0;
  std::vector<std::deque<std::vector<double>>> columns_;
  std::vector<std::deque<std::vector<double>>> keys_, values_;
};

struct StreamOptions {
  bool cache_kv = false;  // keep projected keys/values instead of recomputing them
  double threshold = 0.5;
};

struct StepOutcome {
  std::string key;
  std::int64_t arrival_index = 0;
  std::size_t step = 0;   // n_k after this item
  bool skipped = false;   // key had already halted
  double p_halt = 0.0;
  Action action = Action::kWait;
  bool forced = false;    // emitted by `finish`
  std::optional<Classification> classification;
  std::vector<double> state;  // s_k after the item
};

struct StreamStats {
  std::size_t items = 0;
  std::size_t skipped = 0;
  std::size_t halted = 0;
  std::uint64_t multiply_adds = 0;
  std::uint64_t last_step_multiply_adds = 0;
};

/// Incremental inference over one unbounded stream: each item costs one
/// attention row per block over cached columns inside the window.
class StreamEngine {
 public:
  explicit StreamEngine(const KvecModel& model, StreamOptions options = {});

  StepOutcome step(std::string_view key, std::vector<double> value);
  /// Like `step`, but requires `arrival_index` to be the next position.
  StepOutcome step_at(std::int64_t arrival_index, std::string_view key, std::vector<double> value);
  /// Classifies every key that has not halted yet, in order of first
  /// appearance; those keys are marked halted.
  std::vector<StepOutcome> finish();

  const LatentCache& cache() const { return cache_; }
  const StreamStats& stats() const { return stats_; }
  std::size_t position() const { return next_pos_; }
  const SequenceState* state(std::string_view key) const;

 private:
  struct KeyEntry {
    KeyId id = 0;
    std::string name;
    SequenceState state;
    std::size_t seen = 0;  // items of this key in the stream, halted or not
  };

  const KvecModel* model_;
  StreamOptions options_;
  MaskBuilder mask_;
  LatentCache cache_;
  std::size_t next_pos_ = 0;
  std::vector<KeyEntry> keys_;
  std::unordered_map<std::string, KeyId> ids_;
  StreamStats stats_;
  AttentionRecord scratch_;
};

struct EquivalenceReport {
  double max_abs_deviation = 0.0;
  std::vector<double> per_position;  // max deviation over layers and outputs at each position
  bool decisions_identical = true;
  std::size_t positions = 0;
};

/// Runs `seq` through the streaming engine and through batch evaluation
/// (full encoder tape plus a threshold rollout) and compares every layer
/// column, state, halt probability, decision and classifier output.
/// Throws ValidationError if the window is shorter than the sequence.
EquivalenceReport verify_equivalence(const KvecModel& model, const TangledSequence& seq,
                                     StreamOptions options = {});

/// The no-cache strawman: at every timestamp re-encode the whole prefix
/// from scratch. Returns the final-layer column of each position as seen
/// at its own timestamp; `multiply_adds` receives the total work.
std::vector<std::vector<double>> recompute_stream(const KvecModel& model, const TangledSequence& seq,
                                                  std::uint64_t* multiply_adds = nullptr);

}  // namespace kvec

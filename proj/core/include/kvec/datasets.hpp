#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kvec/random.hpp"
#include "kvec/sequence_model.hpp"

namespace kvec {

enum class SignalPosition { kEarly, kLate };

SignalPosition parse_signal_position(const std::string& name);
std::string to_string(SignalPosition p);

/// Synthetic traffic: each flow is `flow_length` packets with a
/// class-discriminative segment of `signal_length` packets at the start
/// (early) or end (late); the rest are neutral "empty" packets.
struct GeneratorConfig {
  std::size_t classes = 2;
  std::size_t flows = 1000;
  std::size_t flow_length = 100;
  std::size_t signal_length = 10;
  SignalPosition signal = SignalPosition::kEarly;
  std::size_t concurrency = 10;          // K
  std::size_t flows_per_sequence = 20;   // flows tangled into one sequence
  std::size_t codes_per_class = 4;       // signal size-bin codes owned by each class
  double pattern_share = 0.5;            // weight of the per-class global code pattern
  double mean_run_length = 2.1;          // direction runs, geometric
  std::uint64_t seed = 7;

  void validate() const;
  /// Schema of generated items: size_bin (categorical), direction
  /// (categorical, session dimension), size (numeric).
  ValueSchema schema() const;
  /// First index of the signal segment within a flow.
  std::size_t signal_begin() const;
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);

/// One labelled key-value sequence before tangling.
struct Flow {
  std::string key;
  int label = 0;
  std::vector<std::vector<double>> values;

  bool operator==(const Flow&) const = default;
};

std::vector<Flow> generate_flows(const GeneratorConfig& config, Rng& rng);

/// Mixes flows into one stream: `concurrency` flows are active at once,
/// each step emits the next item of a uniformly chosen active flow, and
/// finished flows are replaced from the pool in order.
TangledSequence interleave(std::span<const Flow> flows, std::size_t concurrency, Rng& rng,
                           const ValueSchema& schema);

struct FlowSplits {
  std::vector<Flow> train, validation, test;
};

/// 8:1:1 by key after a seeded shuffle. Throws ValidationError when a
/// split would be empty.
FlowSplits split_by_key(std::span<const Flow> flows, std::uint64_t seed);

struct SplitCounts {
  std::size_t sequences = 0;
  std::size_t keys = 0;
  std::size_t items = 0;
  bool operator==(const SplitCounts&) const = default;
};

void to_json(nlohmann::json& j, const SplitCounts& c);
void from_json(const nlohmann::json& j, SplitCounts& c);

struct DatasetManifest {
  ValueSchema schema;
  std::vector<std::string> class_names;
  SplitCounts train, validation, test;
  double avg_session_length = 0.0;
  nlohmann::json generator;  // generator config, null for imported data
  std::uint64_t seed = 0;

  bool operator==(const DatasetManifest&) const = default;
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

struct Dataset {
  DatasetManifest manifest;
  std::vector<TangledSequence> train, validation, test;

  const std::vector<TangledSequence>& split(const std::string& name) const;
  bool operator==(const Dataset&) const = default;
};

/// Flows -> split -> per-split tangling, with numeric fields standardized
/// on training statistics recorded in the manifest.
Dataset generate_dataset(const GeneratorConfig& config);

/// Chunks flows into groups of `flows_per_sequence` and tangles each.
std::vector<TangledSequence> tangle_split(std::span<const Flow> flows, const GeneratorConfig& config,
                                          const ValueSchema& schema, Rng& rng);

/// Mean number of items per session over every key of every sequence.
double average_session_length(std::span<const TangledSequence> seqs);

/// Layout: <dir>/manifest.json and <dir>/<split>/{items,labels}.jsonl.
/// Item lines are {"seq", "t", "key", "v"}; `t` restarts at 1 in every
/// tangled sequence. Label lines are {"key", "label"} with 0-based labels.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

void write_split(std::ostream& items, std::ostream& labels, std::span<const TangledSequence> seqs);
/// `what` names the source in error messages.
std::vector<TangledSequence> read_split(std::istream& items, std::istream& labels,
                                        const ValueSchema& schema, std::size_t classes,
                                        const std::string& what);

struct ItemRecord {
  std::size_t seq = 0;
  std::int64_t t = 0;
  std::string key;
  std::vector<double> value;
};
/// Throws ValidationError on a malformed line.
ItemRecord parse_item_record(const std::string& line);

/// Frequency-count classifier over signal-segment size-bin codes, fit on
/// `train` and scored on `test`.
double frequency_oracle_accuracy(std::span<const Flow> train, std::span<const Flow> test,
                                 const GeneratorConfig& config);

}  // namespace kvec

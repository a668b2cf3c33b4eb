#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "kvec/model.hpp"
#include "kvec/training.hpp"

namespace kvec {

/// Outcome of one key-value sequence.
struct KeyOutcome {
  std::string key;
  std::size_t halt_step = 0;  // n_k
  std::size_t length = 0;     // |S_k|
  int predicted = 0;
  int truth = 0;
  std::int64_t halt_arrival = 0;  // arrival index of the halting item
};

struct EvalResult {
  std::vector<KeyOutcome> outcomes;
  double earliness = 0.0;
  double accuracy = 0.0;
  double precision = 0.0;  // macro over classes
  double recall = 0.0;
  double f1 = 0.0;
  double hm = 0.0;
};

/// HM = 2 (1 - E) A / (1 - E + A), 0 when the denominator is 0.
double harmonic_mean(double accuracy, double earliness);

/// Aggregates per-key outcomes. Throws ValidationError when empty.
EvalResult metrics(std::span<const KeyOutcome> outcomes, std::size_t classes);

std::vector<KeyOutcome> outcomes_of(const Rollout& rollout);

/// Deterministic evaluation with the given halting rule (threshold policy
/// by default).
EvalResult evaluate(const KvecModel& model, std::span<const TangledSequence> data,
                    HaltRule rule = HaltRule::kPolicyThreshold, std::size_t tau = 1, double mu = 1.0);

enum class BaselineKind { kFixed, kConfidence };

/// SRN-Fixed / SRN-Confidence: the model restricted to key correlation,
/// halting at step tau or once max class probability reaches mu.
/// Throws ValidationError for tau < 1 or mu outside [0, 1].
EvalResult halting_baseline(const KvecModel& model, std::span<const TangledSequence> data,
                            BaselineKind kind, double threshold);

/// Copy of `model` whose mask only keeps key correlation.
KvecModel srn_view(const KvecModel& model);

struct CurvePoint {
  std::string parameter;
  double value = 0.0;
  std::uint64_t seed = 0;
  double earliness = 0.0;
  double accuracy = 0.0;
  double hm = 0.0;
  bool failed = false;
  std::string error;
};

using PointRunner = std::function<EvalResult(double value, std::uint64_t seed)>;

/// One point per (value, seed); failures are recorded and the sweep goes
/// on. Sorted by earliness, failed points last.
std::vector<CurvePoint> sweep(const std::string& parameter, std::span<const double> grid,
                              std::span<const std::uint64_t> seeds, const PointRunner& run);

struct AttentionBin {
  double lo = 0.0, hi = 0.0;
  std::size_t rows = 0;
  double internal = 0.0;  // mean over rows in the bin
  double external = 0.0;
};

struct AttentionSplit {
  std::vector<AttentionBin> bins;
  std::size_t rows = 0;
  double internal = 0.0;
  double external = 0.0;
  double max_sum_error = 0.0;  // max |internal + external - 1| over rows
};

/// Internal (same-key, diagonal included) and external (other-key)
/// attention mass of every attention row a key uses before it halts,
/// binned by the fraction of the key observed at that step.
AttentionSplit attention_split(const KvecModel& model, std::span<const TangledSequence> data,
                               std::size_t bins = 10);

struct HaltingHistogram {
  std::vector<double> edges;  // bins + 1 edges over [0, 1]; bins are right-closed
  std::vector<std::size_t> counts;
  std::vector<double> mass;
  double median = 0.0;  // median of n_k / |S_k|
};

HaltingHistogram halting_histogram(std::span<const KeyOutcome> outcomes, std::size_t bins = 10);

void write_metrics_csv(std::ostream& out, std::span<const std::pair<std::string, EvalResult>> rows);
void write_curve_csv(std::ostream& out, std::span<const CurvePoint> points);
void write_attention_csv(std::ostream& out, const AttentionSplit& split);
void write_histogram_csv(std::ostream& out, const HaltingHistogram& hist);

/// Model + training settings for one train/evaluate run.
struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  Ablation ablation = Ablation::kNone;
};

struct ExperimentResult {
  KvecModel model;
  std::vector<EpochRecord> history;
  EvalResult validation;
  EvalResult test;
};

/// Builds the model from `seed`, trains on `train` and evaluates on the
/// other two splits with the threshold policy.
ExperimentResult run_experiment(const ExperimentConfig& config, std::span<const TangledSequence> train,
                                std::span<const TangledSequence> validation,
                                std::span<const TangledSequence> test, std::uint64_t seed);

}  // namespace kvec

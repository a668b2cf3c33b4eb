#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "kvec/model.hpp"
#include "kvec/random.hpp"

namespace kvec {

enum class Action { kWait, kHalt };

const char* to_string(Action a);

/// Probabilities entering log terms are clamped to this margin.
inline constexpr double kProbabilityFloor = 1e-12;

/// p = sigma(w . s + b). Throws std::invalid_argument on a width mismatch.
double halt_probability(const KvecModel& model, std::span<const double> s);

enum class DecideMode { kSample, kThreshold };

/// Sample: Halt with probability p from `rng`. Threshold: Halt iff p >= 0.5.
Action decide(double p, DecideMode mode, Rng* rng = nullptr);

struct Classification {
  std::vector<double> distribution;
  int label = 0;  // 0-based argmax, lowest index on ties
  double confidence() const { return distribution.at(static_cast<std::size_t>(label)); }
};

Classification classify(const KvecModel& model, std::span<const double> s);
/// Argmax with the lowest index winning ties.
int argmax(std::span<const double> values);

/// +1 if the prediction is right, -1 otherwise. Throws
/// std::out_of_range for labels outside [0, classes).
int reward_of(int predicted, int truth, std::size_t classes);

struct BaselineTrace {
  std::vector<double> input, pre, hidden;
  double value = 0.0;
};

double baseline_value(const KvecModel& model, std::span<const double> s, BaselineTrace* trace = nullptr);
/// Accumulates d(value)/d(theta_b) * dvalue into `grads` (baseline layout).
void baseline_backward(const KvecModel& model, const BaselineTrace& trace, double dvalue,
                       ParameterStore& grads);

/// Gradient of `coeff * log P(action | s)` for the policy. Adds the
/// parameter part into `grads` and returns d/ds. A clamped probability
/// has zero gradient.
std::vector<double> policy_log_prob_backward(const KvecModel& model, std::span<const double> s,
                                             Action action, double coeff, ParameterStore& grads);

/// Gradient of `coeff * log p_label` of the classifier. Adds the
/// parameter part into `grads` and returns d/ds.
std::vector<double> classifier_log_prob_backward(const KvecModel& model, std::span<const double> s,
                                                 const Classification& out, int label, double coeff,
                                                 ParameterStore& grads);

/// log P(action) with the clamp applied.
double log_action_probability(double p_halt, Action action);

}  // namespace kvec

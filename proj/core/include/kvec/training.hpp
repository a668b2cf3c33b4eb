#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kvec/ectl.hpp"
#include "kvec/kvrl.hpp"
#include "kvec/model.hpp"

namespace kvec {

/// R[i] = sum of rewards strictly after step i. Throws
/// std::invalid_argument on an empty list.
std::vector<double> compute_returns(std::span<const int> rewards);

/// How a rollout decides to halt each key.
enum class HaltRule {
  kPolicySample,     // Halt ~ Bernoulli(pi(s))
  kPolicyThreshold,  // Halt iff pi(s) >= 0.5
  kFixed,            // Halt at step tau
  kConfidence,       // Halt once max class probability >= mu
  kNever,            // observe everything
};

struct RolloutOptions {
  HaltRule rule = HaltRule::kPolicyThreshold;
  std::size_t tau = 1;
  double mu = 1.0;
  bool record = false;  // keep activations for `Rollout::backward`
  Rng* rng = nullptr;          // required by kPolicySample
  Rng* dropout_rng = nullptr;  // training-mode dropout
};

/// Trajectory of one key within a tangled sequence.
struct Episode {
  KeyId key = 0;
  std::vector<std::size_t> positions;  // 0-based stream positions of the observed items
  std::vector<double> p_halt;
  std::vector<Action> actions;
  std::vector<int> rewards;
  std::vector<double> returns;
  std::size_t length = 0;  // |S_k| within the rolled-out prefix
  bool forced = false;     // halted by the end of the stream
  Classification output;
  int truth = 0;

  std::size_t halt_step() const { return actions.size(); }
  std::size_t halt_position() const { return positions.back(); }
  int predicted() const { return output.label; }
  bool correct() const { return output.label == truth; }
  double earliness() const { return static_cast<double>(halt_step()) / static_cast<double>(length); }
};

struct LossWeights {
  double alpha = 0.1;
  double beta = 0.1;
  bool policy_to_encoder = false;  // let l2/l3 gradients reach the states
  bool classify_every_step = false;  // l1 on every prefix rather than at the halt
};

struct LossBreakdown {
  double l1 = 0.0;
  double l2 = 0.0;
  double l3 = 0.0;
  double total = 0.0;
  double baseline_mse = 0.0;
  std::size_t steps = 0;
  std::size_t keys = 0;

  LossBreakdown& operator+=(const LossBreakdown& o);
};

/// Runs Algorithm 1's episode generation over one tangled sequence: items
/// in arrival order, halted keys skipped, keys still running at the end
/// force-halted at their last item.
class Rollout {
 public:
  Rollout(const KvecModel& model, const TangledSequence& seq, const DynamicMask& mask,
          const RolloutOptions& options);

  const std::vector<Episode>& episodes() const { return episodes_; }
  const TangledSequence& sequence() const { return *seq_; }
  EncoderTape& tape() { return *tape_; }
  /// Items skipped because their key had already halted.
  std::size_t skipped() const { return skipped_; }
  /// State after each step of `key` (recorded rollouts only).
  const std::vector<std::vector<double>>& states(KeyId key) const { return states_.at(key); }

  /// Evaluates l1/l2/l3 and the baseline MSE, accumulating model
  /// gradients into `grads` and baseline gradients into `baseline_grads`.
  /// Requires a recorded rollout; may be called once.
  LossBreakdown backward(const LossWeights& weights, ParameterStore& grads,
                         ParameterStore& baseline_grads);
  /// Loss values only, no gradients.
  LossBreakdown loss(const LossWeights& weights) const;

 private:
  LossBreakdown evaluate(const LossWeights& weights, ParameterStore* grads,
                         ParameterStore* baseline_grads);

  const KvecModel* model_;
  const TangledSequence* seq_;
  RolloutOptions options_;
  std::unique_ptr<EncoderTape> tape_;
  std::vector<Episode> episodes_;
  std::vector<std::vector<std::vector<double>>> states_;
  std::vector<std::vector<FusionTrace>> traces_;
  std::size_t skipped_ = 0;
  bool consumed_ = false;
};

/// Sampled training rollout over a whole sequence.
std::vector<Episode> run_episode(const KvecModel& model, const TangledSequence& seq, Rng& rng);

struct PolicyLoss {
  double l2 = 0.0;
  double l3 = 0.0;
};

/// l2 = -sum A_i log P(a_i | s_i) and l3 = -sum log P(Halt | s_i) over
/// frozen states, with gradients of alpha * l2 + beta * l3 added to the
/// policy parameters in `grads`. If `state_grads` is given, d/ds_i is
/// added into it.
PolicyLoss policy_losses(const KvecModel& model, std::span<const std::vector<double>> states,
                         std::span<const Action> actions, std::span<const double> advantages,
                         double alpha, double beta, ParameterStore& grads,
                         std::vector<std::vector<double>>* state_grads = nullptr);

struct TrainConfig {
  double learning_rate = 1e-4;           // model, fusion, policy, classifier
  double baseline_learning_rate = 1e-3;  // baseline network
  std::size_t epochs = 100;
  std::size_t batch = 1;  // tangled sequences per update
  LossWeights loss;
  HaltRule rollout_rule = HaltRule::kPolicySample;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::filesystem::path checkpoint_dir;
  AdamConfig adam;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double l1 = 0.0, l2 = 0.0, l3 = 0.0, total = 0.0;
  double accuracy = 0.0;
  double earliness = 0.0;
};

using EpochCallback = std::function<void(const EpochRecord&, KvecModel&)>;

/// Trains `model` in place. Losses in the history are means per tangled
/// sequence; accuracy and earliness come from the sampled training
/// rollouts. Throws NumericalError on a non-finite loss or gradient.
std::vector<EpochRecord> train(KvecModel& model, std::span<const TangledSequence> data,
                               const TrainConfig& config, const EpochCallback& on_epoch = {});

void write_history_csv(std::ostream& out, std::span<const EpochRecord> history);

}  // namespace kvec

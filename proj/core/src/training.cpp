#include "kvec/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>

#include "kvec/error.hpp"

namespace kvec {

std::vector<double> compute_returns(std::span<const int> rewards) {
  if (rewards.empty()) throw std::invalid_argument("compute_returns: empty reward list");
  std::vector<double> returns(rewards.size(), 0.0);
  double suffix = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    returns[i] = suffix;
    suffix += rewards[i];
  }
  return returns;
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  const double steps_total = static_cast<double>(steps + o.steps);
  if (steps_total > 0)
    baseline_mse = (baseline_mse * static_cast<double>(steps) +
                    o.baseline_mse * static_cast<double>(o.steps)) / steps_total;
  l1 += o.l1;
  l2 += o.l2;
  l3 += o.l3;
  total += o.total;
  steps += o.steps;
  keys += o.keys;
  return *this;
}

Rollout::Rollout(const KvecModel& model, const TangledSequence& seq, const DynamicMask& mask,
                 const RolloutOptions& options)
    : model_(&model), seq_(&seq), options_(options) {
  if (options.rule == HaltRule::kPolicySample && options.rng == nullptr)
    throw std::invalid_argument("sampled rollout needs a random stream");
  if (options.rule == HaltRule::kFixed && options.tau < 1)
    throw ValidationError("halting time threshold must be >= 1");
  if (options.rule == HaltRule::kConfidence && !(options.mu >= 0.0 && options.mu <= 1.0))
    throw ValidationError("halting confidence threshold must lie in [0, 1]");
  seq.validate_labels();

  tape_ = std::make_unique<EncoderTape>(model, seq, mask, options.dropout_rng);
  const std::size_t t = mask.size();
  const std::size_t keys = seq.key_count();
  const std::size_t h = model.config().hidden;

  std::vector<std::size_t> lengths(keys, 0);
  for (std::size_t pos = 0; pos < t; ++pos) ++lengths[seq[pos].key_id];

  std::vector<Episode> by_key(keys);
  std::vector<SequenceState> state(keys, SequenceState::zero(h));
  std::vector<bool> started(keys, false);
  if (options.record) {
    states_.resize(keys);
    traces_.resize(keys);
  }

  for (std::size_t pos = 0; pos < t; ++pos) {
    const Item& item = seq[pos];
    const KeyId k = item.key_id;
    if (state[k].halted) {
      ++skipped_;
      continue;
    }
    Episode& ep = by_key[k];
    if (!started[k]) {
      started[k] = true;
      ep.key = k;
      ep.length = lengths[k];
      ep.truth = seq.label(k);
    }
    FusionTrace* trace = options.record ? &traces_[k].emplace_back() : nullptr;
    state[k] = fuse(model, state[k], tape_->output(pos), trace);
    if (options.record) states_[k].push_back(state[k].s);

    const double p = halt_probability(model, state[k].s);
    Action action = Action::kWait;
    std::optional<Classification> cls;
    switch (options.rule) {
      case HaltRule::kPolicySample: action = decide(p, DecideMode::kSample, options.rng); break;
      case HaltRule::kPolicyThreshold: action = decide(p, DecideMode::kThreshold); break;
      case HaltRule::kFixed: action = state[k].n >= options.tau ? Action::kHalt : Action::kWait; break;
      case HaltRule::kConfidence: {
        cls = classify(model, state[k].s);
        action = cls->confidence() >= options.mu ? Action::kHalt : Action::kWait;
        break;
      }
      case HaltRule::kNever: break;
    }
    if (action == Action::kWait && state[k].n == ep.length) {
      action = Action::kHalt;
      ep.forced = true;
    }
    ep.positions.push_back(pos);
    ep.p_halt.push_back(p);
    ep.actions.push_back(action);

    if (action == Action::kHalt) {
      state[k].halted = true;
      ep.output = cls ? std::move(*cls) : classify(model, state[k].s);
      const int r = reward_of(ep.output.label, ep.truth, model.config().classes);
      ep.rewards.assign(ep.actions.size(), r);
      ep.returns = compute_returns(ep.rewards);
    }
  }

  for (std::size_t k = 0; k < keys; ++k)
    if (started[k]) episodes_.push_back(std::move(by_key[k]));
}

PolicyLoss policy_losses(const KvecModel& model, std::span<const std::vector<double>> states,
                         std::span<const Action> actions, std::span<const double> advantages,
                         double alpha, double beta, ParameterStore& grads,
                         std::vector<std::vector<double>>* state_grads) {
  PolicyLoss out;
  for (std::size_t i = 0; i < states.size(); ++i) {
    const auto& s = states[i];
    const double p = halt_probability(model, s);
    out.l2 -= advantages[i] * log_action_probability(p, actions[i]);
    out.l3 -= log_action_probability(p, Action::kHalt);
    std::vector<double> ds;
    if (alpha != 0.0) ds = policy_log_prob_backward(model, s, actions[i], -alpha * advantages[i], grads);
    if (beta != 0.0) {
      auto d3 = policy_log_prob_backward(model, s, Action::kHalt, -beta, grads);
      if (ds.empty()) ds = std::move(d3);
      else axpy(1.0, d3, ds);
    }
    if (state_grads != nullptr && !ds.empty()) axpy(1.0, ds, (*state_grads)[i]);
  }
  return out;
}

LossBreakdown Rollout::evaluate(const LossWeights& w, ParameterStore* grads,
                                ParameterStore* baseline_grads) {
  const KvecModel& model = *model_;
  const std::size_t h = model.config().hidden;
  const bool with_grad = grads != nullptr;
  // Scratch stores let the value-only path share the gradient code.
  ParameterStore scratch;
  ParameterStore baseline_scratch;
  if (!with_grad) {
    scratch = model.params();
    baseline_scratch = model.baseline_params();
    grads = &scratch;
    baseline_grads = &baseline_scratch;
  }

  LossBreakdown out;
  double sq_error = 0.0;
  std::size_t total_steps = 0;
  for (const Episode& ep : episodes_) total_steps += ep.halt_step();
  const double mse_scale = total_steps ? 1.0 / static_cast<double>(total_steps) : 0.0;
  for (const Episode& ep : episodes_) {
    const auto& states = states_.at(ep.key);
    const std::size_t n = ep.halt_step();
    std::vector<std::vector<double>> ds(n, std::vector<double>(h, 0.0));

    if (w.classify_every_step) {
      for (std::size_t i = 0; i < n; ++i) {
        const Classification c = classify(model, states[i]);
        out.l1 -= std::log(std::max(c.distribution[static_cast<std::size_t>(ep.truth)], kProbabilityFloor));
        axpy(1.0, classifier_log_prob_backward(model, states[i], c, ep.truth, -1.0, *grads), ds[i]);
      }
    } else {
      out.l1 -= std::log(std::max(ep.output.distribution[static_cast<std::size_t>(ep.truth)], kProbabilityFloor));
      axpy(1.0, classifier_log_prob_backward(model, states[n - 1], ep.output, ep.truth, -1.0, *grads),
           ds[n - 1]);
    }

    std::vector<double> advantages(n);
    for (std::size_t i = 0; i < n; ++i) {
      BaselineTrace bt;
      const double b = baseline_value(model, states[i], &bt);
      advantages[i] = ep.returns[i] - b;
      sq_error += (b - ep.returns[i]) * (b - ep.returns[i]);
      baseline_backward(model, bt, 2.0 * mse_scale * (b - ep.returns[i]), *baseline_grads);
    }
    const PolicyLoss pl = policy_losses(model, states, ep.actions, advantages, w.alpha, w.beta, *grads,
                                        w.policy_to_encoder ? &ds : nullptr);
    out.l2 += pl.l2;
    out.l3 += pl.l3;
    out.steps += n;
    ++out.keys;

    if (!with_grad) continue;
    std::vector<double> carry_s(h, 0.0), carry_c(h, 0.0);
    const auto& traces = traces_.at(ep.key);
    for (std::size_t i = n; i-- > 0;) {
      axpy(1.0, carry_s, ds[i]);
      FusionGrad g = fuse_backward(model, traces[i], ds[i], carry_c, *grads);
      carry_s = std::move(g.ds_prev);
      carry_c = std::move(g.dcell_prev);
      tape_->add_output_grad(ep.positions[i], g.de);
    }
  }
  if (with_grad) tape_->backward(*grads);

  out.baseline_mse = sq_error * mse_scale;
  out.total = out.l1 + w.alpha * out.l2 + w.beta * out.l3;
  return out;
}

LossBreakdown Rollout::backward(const LossWeights& weights, ParameterStore& grads,
                                ParameterStore& baseline_grads) {
  if (!options_.record) throw std::logic_error("backward needs a recorded rollout");
  if (consumed_) throw std::logic_error("rollout gradients already taken");
  consumed_ = true;
  return evaluate(weights, &grads, &baseline_grads);
}

LossBreakdown Rollout::loss(const LossWeights& weights) const {
  if (!options_.record) throw std::logic_error("loss needs a recorded rollout");
  return const_cast<Rollout*>(this)->evaluate(weights, nullptr, nullptr);
}

std::vector<Episode> run_episode(const KvecModel& model, const TangledSequence& seq, Rng& rng) {
  const DynamicMask mask = DynamicMask::build(seq, model.config().mask);
  RolloutOptions opt;
  opt.rule = HaltRule::kPolicySample;
  opt.rng = &rng;
  return Rollout(model, seq, mask, opt).episodes();
}

namespace {

void checked_adam(ParameterStore& store, double lr, const AdamConfig& cfg, std::size_t epoch,
                  std::size_t index) {
  try {
    adam_step(store, lr, cfg);
  } catch (const NumericalError& e) {
    throw NumericalError(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                         ", tangled sequence " + std::to_string(index) + ")");
  }
}

}  // namespace

std::vector<EpochRecord> train(KvecModel& model, std::span<const TangledSequence> data,
                               const TrainConfig& config, const EpochCallback& on_epoch) {
  if (data.empty()) throw ValidationError("training set is empty");
  if (config.epochs < 1) throw ValidationError("epochs must be >= 1");
  if (config.batch < 1) throw ValidationError("batch must be >= 1");
  if (!(config.learning_rate > 0.0) || !(config.baseline_learning_rate > 0.0))
    throw ValidationError("learning rates must be positive");

  std::vector<DynamicMask> masks;
  masks.reserve(data.size());
  for (const auto& seq : data) masks.push_back(DynamicMask::build(seq, model.config().mask));

  Rng policy_rng(derive_seed(config.seed, 1));
  Rng dropout_rng(derive_seed(config.seed, 2));
  Rng order_rng(derive_seed(config.seed, 3));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<EpochRecord> history;
  model.params().zero_grad();
  model.baseline_params().zero_grad();
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    LossBreakdown sum;
    std::size_t correct = 0, keys = 0;
    double earliness = 0.0;

    for (std::size_t b = 0; b < order.size(); b += config.batch) {
      const std::size_t end = std::min(order.size(), b + config.batch);
      for (std::size_t n = b; n < end; ++n) {
        const std::size_t idx = order[n];
        RolloutOptions opt;
        opt.rule = config.rollout_rule;
        opt.record = true;
        opt.rng = &policy_rng;
        opt.dropout_rng = model.config().dropout > 0.0 ? &dropout_rng : nullptr;
        Rollout rollout(model, data[idx], masks[idx], opt);
        const LossBreakdown loss = rollout.backward(config.loss, model.params(), model.baseline_params());
        if (!std::isfinite(loss.total) || !std::isfinite(loss.baseline_mse))
          throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) +
                               ", tangled sequence " + std::to_string(idx) + ": l1=" +
                               std::to_string(loss.l1) + " l2=" + std::to_string(loss.l2) +
                               " l3=" + std::to_string(loss.l3));
        sum += loss;
        for (const auto& ep : rollout.episodes()) {
          correct += ep.correct() ? 1 : 0;
          earliness += ep.earliness();
          ++keys;
        }
      }
      checked_adam(model.params(), config.learning_rate, config.adam, epoch, order[b]);
      checked_adam(model.baseline_params(), config.baseline_learning_rate, config.adam, epoch, order[b]);
    }

    const double count = static_cast<double>(data.size());
    EpochRecord rec;
    rec.epoch = epoch;
    rec.l1 = sum.l1 / count;
    rec.l2 = sum.l2 / count;
    rec.l3 = sum.l3 / count;
    rec.total = sum.total / count;
    rec.accuracy = keys ? static_cast<double>(correct) / static_cast<double>(keys) : 0.0;
    rec.earliness = keys ? earliness / static_cast<double>(keys) : 0.0;
    history.push_back(rec);

    if (config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 &&
        !config.checkpoint_dir.empty()) {
      std::filesystem::create_directories(config.checkpoint_dir);
      model.save(config.checkpoint_dir / ("epoch_" + std::to_string(epoch) + ".ckpt"),
                 {{"epoch", epoch}});
    }
    if (on_epoch) on_epoch(rec, model);
  }
  return history;
}

void write_history_csv(std::ostream& out, std::span<const EpochRecord> history) {
  out << "epoch,l1,l2,l3,total,accuracy,earliness\n";
  out.precision(10);
  for (const auto& r : history)
    out << r.epoch << ',' << r.l1 << ',' << r.l2 << ',' << r.l3 << ',' << r.total << ','
        << r.accuracy << ',' << r.earliness << '\n';
}

}  // namespace kvec

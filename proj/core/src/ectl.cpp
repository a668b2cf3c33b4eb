#include "kvec/ectl.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "kvec/numerics.hpp"

namespace kvec {

const char* to_string(Action a) { return a == Action::kHalt ? "halt" : "wait"; }

namespace {

void check_width(const KvecModel& model, std::span<const double> s) {
  if (s.size() != model.config().hidden)
    throw std::invalid_argument("state width " + std::to_string(s.size()) + " != hidden width " +
                                std::to_string(model.config().hidden));
}

double policy_logit(const KvecModel& model, std::span<const double> s) {
  const auto& p = model.params();
  return dot(p.value(model.policy().w).data(), s) + p.value(model.policy().b)[0];
}

double clamp_probability(double p) {
  return std::clamp(p, kProbabilityFloor, 1.0 - kProbabilityFloor);
}

}  // namespace

double halt_probability(const KvecModel& model, std::span<const double> s) {
  check_width(model, s);
  return sigmoid(policy_logit(model, s));
}

Action decide(double p, DecideMode mode, Rng* rng) {
  if (mode == DecideMode::kThreshold) return p >= 0.5 ? Action::kHalt : Action::kWait;
  if (rng == nullptr) throw std::invalid_argument("decide: sampling needs a random stream");
  return uniform01(*rng) < p ? Action::kHalt : Action::kWait;
}

int argmax(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return static_cast<int>(best);
}

Classification classify(const KvecModel& model, std::span<const double> s) {
  check_width(model, s);
  const auto& p = model.params();
  Classification out;
  out.distribution.resize(model.config().classes);
  affine_into(p.value(model.classifier().w), p.value(model.classifier().b).data(), s,
              out.distribution);
  softmax_inplace(out.distribution);
  out.label = argmax(out.distribution);
  return out;
}

int reward_of(int predicted, int truth, std::size_t classes) {
  const auto c = static_cast<int>(classes);
  if (predicted < 0 || predicted >= c || truth < 0 || truth >= c)
    throw std::out_of_range("label outside [0, " + std::to_string(classes) + ")");
  return predicted == truth ? 1 : -1;
}

double baseline_value(const KvecModel& model, std::span<const double> s, BaselineTrace* trace) {
  check_width(model, s);
  const auto& p = model.baseline_params();
  const auto& net = model.baseline();
  BaselineTrace local;
  BaselineTrace& t = trace ? *trace : local;
  t.input.assign(s.begin(), s.end());
  t.pre.resize(p.value(net.w1).rows());
  affine_into(p.value(net.w1), p.value(net.b1).data(), s, t.pre);
  t.hidden.resize(t.pre.size());
  for (std::size_t k = 0; k < t.pre.size(); ++k) t.hidden[k] = std::max(t.pre[k], 0.0);
  t.value = dot(p.value(net.w2).data(), t.hidden) + p.value(net.b2)[0];
  return t.value;
}

void baseline_backward(const KvecModel& model, const BaselineTrace& t, double dvalue,
                       ParameterStore& grads) {
  const auto& p = model.baseline_params();
  const auto& net = model.baseline();
  axpy(dvalue, t.hidden, grads.grad(net.w2).data());
  grads.grad(net.b2)[0] += dvalue;
  const auto w2 = p.value(net.w2).data();
  std::vector<double> dpre(t.pre.size());
  for (std::size_t k = 0; k < dpre.size(); ++k) dpre[k] = t.pre[k] > 0.0 ? dvalue * w2[k] : 0.0;
  outer_accumulate(grads.grad(net.w1), dpre, t.input);
  axpy(1.0, dpre, grads.grad(net.b1).data());
}

double log_action_probability(double p_halt, Action action) {
  const double p = clamp_probability(p_halt);
  return std::log(action == Action::kHalt ? p : 1.0 - p);
}

std::vector<double> policy_log_prob_backward(const KvecModel& model, std::span<const double> s,
                                             Action action, double coeff, ParameterStore& grads) {
  const double p = halt_probability(model, s);
  std::vector<double> ds(s.size(), 0.0);
  if (p != clamp_probability(p)) return ds;
  // d log p / dz = 1 - p ; d log(1 - p) / dz = -p
  const double dz = coeff * (action == Action::kHalt ? 1.0 - p : -p);
  axpy(dz, s, grads.grad(model.policy().w).data());
  grads.grad(model.policy().b)[0] += dz;
  axpy(dz, model.params().value(model.policy().w).data(), ds);
  return ds;
}

std::vector<double> classifier_log_prob_backward(const KvecModel& model, std::span<const double> s,
                                                 const Classification& out, int label, double coeff,
                                                 ParameterStore& grads) {
  std::vector<double> dz(out.distribution.size());
  const auto y = static_cast<std::size_t>(label);
  if (out.distribution[y] < kProbabilityFloor) {
    std::vector<double> ds(s.size(), 0.0);
    return ds;
  }
  for (std::size_t c = 0; c < dz.size(); ++c)
    dz[c] = coeff * ((c == y ? 1.0 : 0.0) - out.distribution[c]);
  outer_accumulate(grads.grad(model.classifier().w), dz, s);
  axpy(1.0, dz, grads.grad(model.classifier().b).data());
  std::vector<double> ds(s.size(), 0.0);
  matvec_t_accumulate(model.params().value(model.classifier().w), dz, ds);
  return ds;
}

}  // namespace kvec

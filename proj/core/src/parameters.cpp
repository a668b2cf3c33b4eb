#include "kvec/parameters.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "kvec/error.hpp"

namespace kvec {

ParamId ParameterStore::add(std::string name, Tensor init) {
  if (find(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  Parameter p;
  p.name = std::move(name);
  p.grad = Tensor(init.rows(), init.cols());
  p.first_moment = Tensor(init.rows(), init.cols());
  p.second_moment = Tensor(init.rows(), init.cols());
  p.value = std::move(init);
  params_.push_back(std::move(p));
  return ParamId{params_.size() - 1};
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::optional<ParamId> ParameterStore::find(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return ParamId{i};
  return std::nullopt;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.grad.fill(0.0);
}

void ParameterStore::accumulate_grad(const ParameterStore& other) {
  if (other.params_.size() != params_.size()) throw std::invalid_argument("parameter layouts differ");
  for (std::size_t i = 0; i < params_.size(); ++i)
    axpy(1.0, other.params_[i].grad.data(), params_[i].grad.data());
}

bool ParameterStore::operator==(const ParameterStore& other) const {
  if (params_.size() != other.params_.size() || step_ != other.step_) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& a = params_[i];
    const auto& b = other.params_[i];
    if (a.name != b.name || a.value != b.value || a.first_moment != b.first_moment ||
        a.second_moment != b.second_moment)
      return false;
  }
  return true;
}

void adam_step(ParameterStore& store, double learning_rate, const AdamConfig& config) {
  for (const auto& p : store.params()) {
    if (!p.grad.all_finite()) throw NumericalError("non-finite gradient in parameter '" + p.name + "'");
  }
  const std::int64_t t = store.step() + 1;
  store.set_step(t);
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
  for (auto& p : store.params()) {
    auto value = p.value.data();
    auto grad = p.grad.data();
    auto m = p.first_moment.data();
    auto v = p.second_moment.data();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      value[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon);
      grad[i] = 0.0;
    }
  }
}

std::vector<GradCheckEntry> finite_diff_check(const std::function<double()>& loss,
                                              ParameterStore& store, double step,
                                              double tolerance,
                                              const std::function<bool(const std::string&)>& select) {
  std::vector<GradCheckEntry> out;
  out.reserve(store.size());
  for (auto& p : store.params()) {
    if (select && !select(p.name)) continue;
    GradCheckEntry e;
    e.name = p.name;
    auto value = p.value.data();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      value[i] = saved + step;
      const double up = loss();
      value[i] = saved - step;
      const double down = loss();
      value[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = p.grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      if (i == 0 || rel > e.max_rel_error) {
        e.max_rel_error = rel;
        e.worst_index = i;
        e.analytic = analytic;
        e.numeric = numeric;
      }
    }
    e.passed = e.max_rel_error <= tolerance;
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace kvec

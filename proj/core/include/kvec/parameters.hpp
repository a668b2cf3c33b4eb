#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kvec/numerics.hpp"

namespace kvec {

struct ParamId {
  std::size_t index = 0;
};

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor first_moment;
  Tensor second_moment;
};

/// Named parameters with gradient accumulators and Adam moments.
class ParameterStore {
 public:
  ParamId add(std::string name, Tensor init);

  Tensor& value(ParamId id) { return params_[id.index].value; }
  const Tensor& value(ParamId id) const { return params_[id.index].value; }
  Tensor& grad(ParamId id) { return params_[id.index].grad; }
  const Tensor& grad(ParamId id) const { return params_[id.index].grad; }

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  std::optional<ParamId> find(std::string_view name) const;

  std::int64_t step() const { return step_; }
  void set_step(std::int64_t s) { step_ = s; }

  void zero_grad();
  /// Adds `other`'s gradients into this store (same layout required).
  void accumulate_grad(const ParameterStore& other);
  bool operator==(const ParameterStore& other) const;

 private:
  std::vector<Parameter> params_;
  std::int64_t step_ = 0;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update over every parameter; zeroes gradients.
/// Throws NumericalError naming the parameter if any gradient is not
/// finite; the store is left untouched in that case.
void adam_step(ParameterStore& store, double learning_rate, const AdamConfig& config = {});

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool passed = true;
};

/// Central-difference check of the gradients already stored in `store`
/// against `loss`, which must evaluate deterministically from the
/// current parameter values. Relative error uses max(|a|, |n|, 1e-8).
/// `select`, if set, limits the check to parameters it accepts.
std::vector<GradCheckEntry> finite_diff_check(
    const std::function<double()>& loss, ParameterStore& store, double step, double tolerance,
    const std::function<bool(const std::string&)>& select = {});

}  // namespace kvec

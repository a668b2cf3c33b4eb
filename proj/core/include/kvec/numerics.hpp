#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "kvec/sequence_model.hpp"

namespace kvec {

/// Stand-in for -inf in additive masks. Finite, so 0 * sentinel stays 0.
inline constexpr double kMaskedLogit = std::numeric_limits<double>::lowest() / 4;

/// Dense row-major matrix of doubles.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor column(std::span<const double> v);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::vector<double> col(std::size_t c) const;
  void set_col(std::size_t c, std::span<const double> v);

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  bool all_finite() const;

  bool operator==(const Tensor&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// {0, kMaskedLogit} matrix aligned with attention logits.
struct AdditiveMask {
  Tensor values;

  static AdditiveMask from_visibility(const DenseMask& mask);
  static AdditiveMask none(std::size_t rows, std::size_t cols) { return {Tensor(rows, cols)}; }
  bool masked(std::size_t r, std::size_t c) const { return values(r, c) <= kMaskedLogit; }
};

// Vector kernels. All accumulate in ascending index order so every code
// path that calls them produces bit-identical results.

double dot(std::span<const double> a, std::span<const double> b);
/// y = W x
void matvec(const Tensor& w, std::span<const double> x, std::span<double> y);
/// y = W x + b
void affine_into(const Tensor& w, std::span<const double> b, std::span<const double> x,
                 std::span<double> y);
/// dx += W^T dy
void matvec_t_accumulate(const Tensor& w, std::span<const double> dy, std::span<double> dx);
/// dW += dy x^T
void outer_accumulate(Tensor& dw, std::span<const double> dy, std::span<const double> x);
void axpy(double a, std::span<const double> x, std::span<double> y);

/// Numerically stable in-place softmax.
void softmax_inplace(std::span<double> z);
/// dz = p * (dp - <p, dp>)
void softmax_backward(std::span<const double> p, std::span<const double> dp, std::span<double> dz);

/// Row-wise softmax of logits + mask. Masked entries come out exactly 0.
/// Throws std::invalid_argument on a fully masked row or shape mismatch.
Tensor masked_softmax(const Tensor& logits, const AdditiveMask& mask);

/// Columns of `x` are inputs: returns W x + b broadcast over columns.
Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias);

struct AffineGrad {
  Tensor dx;
  Tensor dweight;
  Tensor dbias;
};
AffineGrad affine_backward(const Tensor& x, const Tensor& weight, const Tensor& dy);

enum class Activation { kSigmoid, kTanh, kRelu };

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double activate(Activation kind, double x);
/// Derivative given input x and output y = activate(kind, x).
double activate_derivative(Activation kind, double x, double y);

Tensor elementwise(Activation kind, const Tensor& x);
/// Gradient w.r.t. x given the forward input, output and upstream gradient.
Tensor elementwise_backward(Activation kind, const Tensor& x, const Tensor& y, const Tensor& dy);

}  // namespace kvec

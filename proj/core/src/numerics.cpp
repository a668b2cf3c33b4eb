#include "kvec/numerics.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace kvec {

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) throw std::invalid_argument("tensor data length != rows * cols");
}

Tensor Tensor::column(std::span<const double> v) {
  return Tensor(v.size(), 1, std::vector<double>(v.begin(), v.end()));
}

std::vector<double> Tensor::col(std::size_t c) const {
  std::vector<double> out(rows_);
  for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
  return out;
}

void Tensor::set_col(std::size_t c, std::span<const double> v) {
  for (std::size_t r = 0; r < rows_; ++r) (*this)(r, c) = v[r];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

AdditiveMask AdditiveMask::from_visibility(const DenseMask& mask) {
  Tensor t(mask.size(), mask.size(), kMaskedLogit);
  for (std::size_t i = 0; i < mask.size(); ++i)
    for (std::size_t j = 0; j < mask.size(); ++j)
      if (mask(i, j)) t(i, j) = 0.0;
  return {std::move(t)};
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void matvec(const Tensor& w, std::span<const double> x, std::span<double> y) {
  for (std::size_t r = 0; r < w.rows(); ++r) y[r] = dot(w.row(r), x);
}

void affine_into(const Tensor& w, std::span<const double> b, std::span<const double> x,
                 std::span<double> y) {
  for (std::size_t r = 0; r < w.rows(); ++r) y[r] = dot(w.row(r), x) + b[r];
}

void matvec_t_accumulate(const Tensor& w, std::span<const double> dy, std::span<double> dx) {
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const double g = dy[r];
    if (g == 0.0) continue;
    const auto row = w.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) dx[c] += g * row[c];
  }
}

void outer_accumulate(Tensor& dw, std::span<const double> dy, std::span<const double> x) {
  for (std::size_t r = 0; r < dw.rows(); ++r) {
    const double g = dy[r];
    if (g == 0.0) continue;
    auto row = dw.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += g * x[c];
  }
}

void axpy(double a, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

void softmax_inplace(std::span<double> z) {
  if (z.empty()) return;
  const double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - m);
    sum += v;
  }
  for (double& v : z) v /= sum;
}

void softmax_backward(std::span<const double> p, std::span<const double> dp, std::span<double> dz) {
  const double inner = dot(p, dp);
  for (std::size_t i = 0; i < p.size(); ++i) dz[i] = p[i] * (dp[i] - inner);
}

Tensor masked_softmax(const Tensor& logits, const AdditiveMask& mask) {
  if (logits.rows() != mask.values.rows() || logits.cols() != mask.values.cols())
    throw std::invalid_argument("masked_softmax: logits and mask shapes differ");
  Tensor out(logits.rows(), logits.cols());
  std::vector<double> buf;
  std::vector<std::size_t> cols;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    buf.clear();
    cols.clear();
    for (std::size_t c = 0; c < logits.cols(); ++c) {
      if (mask.masked(r, c)) continue;
      buf.push_back(logits(r, c) + mask.values(r, c));
      cols.push_back(c);
    }
    if (buf.empty())
      throw std::invalid_argument("masked_softmax: row " + std::to_string(r) + " is fully masked");
    softmax_inplace(buf);
    for (std::size_t k = 0; k < cols.size(); ++k) out(r, cols[k]) = buf[k];
  }
  return out;
}

Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.cols() != x.rows() || bias.size() != weight.rows())
    throw std::invalid_argument("affine: dimension mismatch (W " + std::to_string(weight.rows()) + "x" +
                                std::to_string(weight.cols()) + ", x " + std::to_string(x.rows()) + "x" +
                                std::to_string(x.cols()) + ")");
  Tensor y(weight.rows(), x.cols());
  std::vector<double> xc, yc(weight.rows());
  for (std::size_t c = 0; c < x.cols(); ++c) {
    xc = x.col(c);
    affine_into(weight, bias.data(), xc, yc);
    y.set_col(c, yc);
  }
  return y;
}

AffineGrad affine_backward(const Tensor& x, const Tensor& weight, const Tensor& dy) {
  if (weight.cols() != x.rows() || dy.rows() != weight.rows() || dy.cols() != x.cols())
    throw std::invalid_argument("affine_backward: dimension mismatch");
  AffineGrad g{Tensor(x.rows(), x.cols()), Tensor(weight.rows(), weight.cols()),
               Tensor(weight.rows(), 1)};
  for (std::size_t c = 0; c < x.cols(); ++c) {
    const auto xc = x.col(c);
    const auto dyc = dy.col(c);
    std::vector<double> dxc(x.rows(), 0.0);
    matvec_t_accumulate(weight, dyc, dxc);
    g.dx.set_col(c, dxc);
    outer_accumulate(g.dweight, dyc, xc);
    axpy(1.0, dyc, g.dbias.data());
  }
  return g;
}

double activate(Activation kind, double x) {
  switch (kind) {
    case Activation::kSigmoid: return sigmoid(x);
    case Activation::kTanh: return std::tanh(x);
    case Activation::kRelu: return x > 0.0 ? x : 0.0;
  }
  return 0.0;
}

double activate_derivative(Activation kind, double x, double y) {
  switch (kind) {
    case Activation::kSigmoid: return y * (1.0 - y);
    case Activation::kTanh: return 1.0 - y * y;
    case Activation::kRelu: return x > 0.0 ? 1.0 : 0.0;
  }
  return 0.0;
}

Tensor elementwise(Activation kind, const Tensor& x) {
  Tensor y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = activate(kind, x[i]);
  return y;
}

Tensor elementwise_backward(Activation kind, const Tensor& x, const Tensor& y, const Tensor& dy) {
  Tensor dx(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * activate_derivative(kind, x[i], y[i]);
  return dx;
}

}  // namespace kvec

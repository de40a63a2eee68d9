#include "exitdepth/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "exitdepth/errors.hpp"

namespace exitdepth {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(product(shape_), fill) {
  if (shape_.size() > 2) throw DimensionError("tensor rank above 2 is not supported");
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.size() > 2) throw DimensionError("tensor rank above 2 is not supported");
  if (data_.size() != product(shape_)) {
    throw DimensionError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_string(shape_));
  }
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

std::size_t Tensor::rows() const noexcept {
  switch (shape_.size()) {
    case 0:
    case 1:
      return 1;
    default:
      return shape_[0];
  }
}

std::size_t Tensor::cols() const noexcept {
  switch (shape_.size()) {
    case 0:
      return 1;
    case 1:
      return shape_[0];
    default:
      return shape_[1];
  }
}

double Tensor::item() const {
  if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double v) noexcept { std::fill(data_.begin(), data_.end(), v); }

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace kernels {

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    std::fill(crow, crow + n, 0.0);
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor c({a.rows(), b.cols()});
  gemm(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
  return c;
}

std::vector<double> linear_row(std::span<const double> x, const Tensor& weight,
                               const Tensor& bias) {
  if (weight.rows() != x.size() || bias.size() != weight.cols()) {
    throw DimensionError("linear_row: input " + std::to_string(x.size()) + " weight " +
                         shape_string(weight.shape()));
  }
  std::vector<double> out(weight.cols());
  gemm(x.data(), weight.data(), out.data(), 1, x.size(), weight.cols());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] += bias[j];
  return out;
}

void softmax_row(std::span<const double> in, std::span<double> out) {
  const double mx = *std::max_element(in.begin(), in.end());
  double total = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = std::exp(in[i] - mx);
    total += out[i];
  }
  for (double& v : out) v /= total;
}

void log_softmax_row(std::span<const double> in, std::span<double> out) {
  const double mx = *std::max_element(in.begin(), in.end());
  double total = 0.0;
  for (double v : in) total += std::exp(v - mx);
  const double lse = mx + std::log(total);
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] - lse;
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double log_sigmoid(double z) {
  // log(1 / (1 + e^-z)) without overflow on either tail
  if (z >= 0) return -std::log1p(std::exp(-z));
  return z - std::log1p(std::exp(z));
}

LayerNormStats layer_norm_row(std::span<const double> in, std::span<const double> gain,
                              std::span<const double> bias, double eps, std::span<double> out) {
  const auto n = static_cast<double>(in.size());
  double mean = 0.0;
  for (double v : in) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : in) var += (v - mean) * (v - mean);
  var /= n;
  const double rstd = 1.0 / std::sqrt(var + eps);
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = (in[i] - mean) * rstd * gain[i] + bias[i];
  return {mean, rstd};
}

void attend_row(std::span<const double> query, std::span<const double> keys,
                std::span<const double> vals, std::size_t begin, std::size_t end,
                std::size_t heads, std::span<double> out, std::span<double> weights) {
  const std::size_t d = query.size();
  const std::size_t dh = d / heads;
  const std::size_t span = end - begin;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> scores(span);
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t j = 0; j < span; ++j) {
      const double* krow = keys.data() + (begin + j) * d + off;
      double s = 0.0;
      for (std::size_t c = 0; c < dh; ++c) s += query[off + c] * krow[c];
      scores[j] = s * scale;
    }
    softmax_row(scores, scores);
    for (std::size_t j = 0; j < span; ++j) {
      const double* vrow = vals.data() + (begin + j) * d + off;
      const double w = scores[j];
      for (std::size_t c = 0; c < dh; ++c) out[off + c] += w * vrow[c];
    }
    if (!weights.empty()) std::copy(scores.begin(), scores.end(), weights.begin() + h * span);
  }
}

void add_position_encoding(std::size_t pos, std::span<double> out) {
  const std::size_t d = out.size();
  const auto p = static_cast<double>(pos);
  for (std::size_t i = 0; i < d; i += 2) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
    out[i] += std::sin(p * freq);
    if (i + 1 < d) out[i + 1] += std::cos(p * freq);
  }
}

}  // namespace kernels
}  // namespace exitdepth

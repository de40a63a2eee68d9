#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace exitdepth {

/// Dense row-major array of doubles. Rank 0 (scalar), 1 (vector) or 2 (matrix).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  // A rank-1 tensor is viewed as a single row.
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols(), cols()};
  }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }
  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double item() const;
  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
  bool all_finite() const noexcept;
  void fill(double v) noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

/// Forward kernels shared by the tape ops and the tape-free incremental decoder.
/// Every kernel computes each output row independently of the other rows, so a
/// row evaluated alone is bit-identical to the same row inside a larger batch.
namespace kernels {

/// c[m x n] = a[m x k] * b[k x n].
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n);

Tensor matmul(const Tensor& a, const Tensor& b);
/// x W + bias for a single row vector.
std::vector<double> linear_row(std::span<const double> x, const Tensor& weight,
                               const Tensor& bias);

void softmax_row(std::span<const double> in, std::span<double> out);
void log_softmax_row(std::span<const double> in, std::span<double> out);
double sigmoid(double z);
double log_sigmoid(double z);

struct LayerNormStats {
  double mean = 0.0;
  double rstd = 0.0;
};
LayerNormStats layer_norm_row(std::span<const double> in, std::span<const double> gain,
                              std::span<const double> bias, double eps, std::span<double> out);

/// Multi-head scaled dot-product attention of one query row over key/value
/// rows [begin, end) of the row-major `keys`/`vals` (row width = query size).
/// Per-head weights land in `weights` (heads x (end - begin)) when non-empty.
void attend_row(std::span<const double> query, std::span<const double> keys,
                std::span<const double> vals, std::size_t begin, std::size_t end,
                std::size_t heads, std::span<double> out, std::span<double> weights);

/// Sinusoidal position encoding for 0-based position `pos`, added into `out`.
void add_position_encoding(std::size_t pos, std::span<double> out);

}  // namespace kernels
}  // namespace exitdepth

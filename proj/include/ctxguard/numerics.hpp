#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace ctxguard {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  void fill(double v);
  bool all_finite() const noexcept;
  std::string shape_str() const;

  friend bool operator==(const Matrix& a, const Matrix& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// a * b.
Matrix matmul(const Matrix& a, const Matrix& b);
/// transpose(a) * b.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a * transpose(b).
Matrix matmul_nt(const Matrix& a, const Matrix& b);

/// out += transpose(a) * b, shapes must already agree.
void accumulate_tn(const Matrix& a, const Matrix& b, Matrix& out);

Matrix transpose(const Matrix& a);

/// Adds `bias` to every row.
void add_row_vector(Matrix& m, std::span<const double> bias);
/// Column sums accumulated into `out`.
void accumulate_column_sums(const Matrix& m, std::span<double> out);

std::vector<double> softmax(std::span<const double> v);
/// Row-wise softmax in place.
void softmax_rows(Matrix& m);

struct LayerNormResult {
  std::vector<double> out;
  std::vector<double> normalized;  // (v - mean) / sqrt(var + eps)
  double inv_std = 0.0;
};

std::vector<double> layer_norm(std::span<const double> v, std::span<const double> gamma,
                               std::span<const double> beta, double eps);
LayerNormResult layer_norm_full(std::span<const double> v, std::span<const double> gamma,
                                std::span<const double> beta, double eps);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
double max_abs(std::span<const double> a);

struct ValueGrad {
  double value = 0.0;
  std::vector<double> grad;
};

using Objective = std::function<ValueGrad(std::span<const double>)>;

/// Max over checked coordinates of |analytic - central difference| / max(1, |analytic|).
/// An empty `indices` checks every coordinate.
double grad_check(const Objective& f, std::span<const double> x, double h,
                  std::span<const std::size_t> indices = {});

/// Counter-based deterministic generator: draw k of stream `seed` is a pure
/// function of (seed, k).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n);
  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi);
  double normal();
  bool bernoulli(double p);

  /// Independent child stream; does not advance this stream.
  Rng split(std::uint64_t stream_id) const;

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace ctxguard

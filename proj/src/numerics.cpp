#include "ctxguard/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "ctxguard/errors.hpp"

namespace ctxguard {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("ragged matrix initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Matrix::shape_str() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

namespace {

void require_finite(const Matrix& m, const char* op) {
  if (!m.all_finite()) throw NumericError(std::string(op) + ": non-finite output");
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + a.shape_str() + " * " + b.shape_str());
  }
  Matrix out(a.rows(), b.cols());
  const std::size_t n = a.cols();
  const std::size_t m = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* __restrict o = out.data().data() + i * m;
    const double* arow = a.data().data() + i * n;
    for (std::size_t k = 0; k < n; ++k) {
      const double s = arow[k];
      if (s == 0.0) continue;
      const double* __restrict brow = b.data().data() + k * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += s * brow[j];
    }
  }
  require_finite(out, "matmul");
  return out;
}

void accumulate_tn(const Matrix& a, const Matrix& b, Matrix& out) {
  if (a.rows() != b.rows() || out.rows() != a.cols() || out.cols() != b.cols()) {
    throw ShapeError("accumulate_tn: " + a.shape_str() + "^T * " + b.shape_str() + " into " +
                     out.shape_str());
  }
  const std::size_t m = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* arow = a.data().data() + k * a.cols();
    const double* __restrict brow = b.data().data() + k * m;
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double s = arow[i];
      if (s == 0.0) continue;
      double* __restrict o = out.data().data() + i * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += s * brow[j];
    }
  }
  require_finite(out, "accumulate_tn");
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: " + a.shape_str() + "^T * " + b.shape_str());
  }
  Matrix out(a.cols(), b.cols());
  accumulate_tn(a, b, out);
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + a.shape_str() + " * " + b.shape_str() + "^T");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(a.row(i), b.row(j));
  }
  require_finite(out, "matmul_nt");
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

void add_row_vector(Matrix& m, std::span<const double> bias) {
  if (bias.size() != m.cols()) {
    throw ShapeError("add_row_vector: bias " + std::to_string(bias.size()) + " vs " +
                     m.shape_str());
  }
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
}

void accumulate_column_sums(const Matrix& m, std::span<double> out) {
  if (out.size() != m.cols()) throw ShapeError("accumulate_column_sums: width mismatch");
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) out[j] += r[j];
  }
}

std::vector<double> softmax(std::span<const double> v) {
  if (v.empty()) throw ArgumentError("softmax: empty vector");
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) throw NumericError("softmax: non-finite input");
  std::vector<double> out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (double& o : out) o /= sum;
  return out;
}

void softmax_rows(Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    auto s = softmax(r);
    std::copy(s.begin(), s.end(), r.begin());
  }
}

LayerNormResult layer_norm_full(std::span<const double> v, std::span<const double> gamma,
                                std::span<const double> beta, double eps) {
  if (v.size() != gamma.size() || v.size() != beta.size()) {
    throw ShapeError("layer_norm: lengths " + std::to_string(v.size()) + ", " +
                     std::to_string(gamma.size()) + ", " + std::to_string(beta.size()));
  }
  if (!(eps > 0.0)) throw ArgumentError("layer_norm: eps must be positive");
  if (v.empty()) throw ArgumentError("layer_norm: empty vector");
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= n;
  LayerNormResult res;
  res.inv_std = 1.0 / std::sqrt(var + eps);
  res.out.resize(v.size());
  res.normalized.resize(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    res.normalized[i] = (v[i] - mean) * res.inv_std;
    res.out[i] = gamma[i] * res.normalized[i] + beta[i];
  }
  return res;
}

std::vector<double> layer_norm(std::span<const double> v, std::span<const double> gamma,
                               std::span<const double> beta, double eps) {
  return layer_norm_full(v, gamma, beta, eps).out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double max_abs(std::span<const double> a) {
  double m = 0.0;
  for (double x : a) m = std::max(m, std::abs(x));
  return m;
}

double grad_check(const Objective& f, std::span<const double> x, double h,
                  std::span<const std::size_t> indices) {
  if (!(h > 0.0)) throw ArgumentError("grad_check: step must be positive");
  const ValueGrad base = f(x);
  if (base.grad.size() != x.size()) throw ShapeError("grad_check: gradient length mismatch");
  std::vector<std::size_t> all;
  if (indices.empty()) {
    all.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) all[i] = i;
    indices = all;
  }
  std::vector<double> probe(x.begin(), x.end());
  double worst = 0.0;
  for (std::size_t i : indices) {
    probe[i] = x[i] + h;
    const double up = f(probe).value;
    probe[i] = x[i] - h;
    const double down = f(probe).value;
    probe[i] = x[i];
    if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(base.grad[i])) {
      throw NumericError("grad_check: non-finite evaluation at index " + std::to_string(i));
    }
    const double numeric = (up - down) / (2.0 * h);
    const double err = std::abs(base.grad[i] - numeric) / std::max(1.0, std::abs(base.grad[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t key = mix64(seed_ ^ 0x6A09E667F3BCC909ULL);
  const std::uint64_t c = counter_++;
  return mix64(key + (c + 1) * 0x9E3779B97F4A7C15ULL);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  if (n == 0) throw ArgumentError("uniform_int: empty range");
  const unsigned __int128 prod = static_cast<unsigned __int128>(next_u64()) * n;
  return static_cast<std::uint64_t>(prod >> 64);
}

int Rng::uniform_int(int lo, int hi) {
  if (hi < lo) throw ArgumentError("uniform_int: hi < lo");
  return lo + static_cast<int>(uniform_int(static_cast<std::uint64_t>(hi - lo) + 1));
}

double Rng::normal() {
  double u1 = uniform();
  const double u2 = uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

bool Rng::bernoulli(double p) { return uniform() < p; }

Rng Rng::split(std::uint64_t stream_id) const {
  return Rng(mix64(mix64(seed_ + 0x243F6A8885A308D3ULL) ^ mix64(stream_id + 0x13198A2E03707344ULL)));
}

}  // namespace ctxguard

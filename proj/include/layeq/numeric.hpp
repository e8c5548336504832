#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace layeq {

/// Dense row-major matrix of doubles. Vectors are stored as one-column
/// matrices where a matrix is required (biases, probes).
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  /// Takes ownership of `data`; throws DimensionError on a length mismatch and
  /// ConfigError on non-finite entries.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);
  static Matrix column(std::span<const double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::vector<double> col(std::size_t c) const;

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  Matrix transpose() const;
  bool all_finite() const;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Standard product. The inner index is summed left to right.
Matrix matmul(const Matrix& a, const Matrix& b);
std::vector<double> matvec(const Matrix& a, std::span<const double> x);

Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& a);

double max_abs(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);
double frobenius_norm(const Matrix& a);

double max_abs(std::span<const double> v);
double max_abs_diff(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);
double dot(std::span<const double> a, std::span<const double> b);

/// Inverse of a square matrix. Throws DimensionError when not square and
/// ConfigError when singular.
Matrix inverse(const Matrix& a);
/// Reciprocal 1-norm condition number, 0 for singular input.
double reciprocal_condition(const Matrix& a);
/// Minimum-norm solution X of min ||A X - B||_F.
Matrix least_squares(const Matrix& a, const Matrix& b);

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Origin-passing pointwise activation.
class Activation {
 public:
  enum class Kind { Tanh, ReLU, GELU, Identity, Power };

  static Activation tanh() { return Activation(Kind::Tanh, 1); }
  static Activation relu() { return Activation(Kind::ReLU, 1); }
  static Activation gelu() { return Activation(Kind::GELU, 1); }
  static Activation identity() { return Activation(Kind::Identity, 1); }
  /// t -> t^m; throws ConfigError for m <= 0.
  static Activation power(int m);
  /// Inverse of name(): "tanh", "relu", "gelu", "identity", "power<m>".
  static Activation parse(const std::string& name);

  Kind kind() const noexcept { return kind_; }
  int exponent() const noexcept { return exponent_; }
  std::string name() const;

  double operator()(double x) const;
  double derivative(double x) const;
  /// True when sigma(x) - sigma(-x) = x holds identically.
  bool has_bypass_relation() const noexcept {
    return kind_ == Kind::GELU || kind_ == Kind::ReLU;
  }

  bool operator==(const Activation&) const = default;

 private:
  Activation(Kind kind, int exponent) : kind_(kind), exponent_(exponent) {}
  Kind kind_ = Kind::Identity;
  int exponent_ = 1;
};

Matrix apply_activation(const Activation& sigma, const Matrix& m);

/// Row-wise softmax with max subtraction.
Matrix softmax_rows(const Matrix& m);

// ---------------------------------------------------------------------------
// Randomness
// ---------------------------------------------------------------------------

/// Seeded generator: std::mt19937_64 for raw bits, 53-bit mantissa uniforms,
/// and Box-Muller normals. All draws are specified exactly so streams are
/// reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Uniform on {0, ..., n-1} by rejection.
  std::size_t index(std::size_t n);
  /// Uniformly random permutation (Fisher-Yates).
  std::vector<std::size_t> permutation(std::size_t n);
  double sign() { return uniform() < 0.5 ? -1.0 : 1.0; }

  Matrix normal_matrix(std::size_t rows, std::size_t cols, double scale = 1.0);
  std::vector<double> normal_vector(std::size_t n, double scale = 1.0);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace layeq

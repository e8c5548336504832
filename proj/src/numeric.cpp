#include "layeq/numeric.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "layeq/error.hpp"

namespace layeq {

namespace {

using EigenMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

EigenMat to_eigen(const Matrix& m) {
  EigenMat e(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) e(r, c) = m(r, c);
  return e;
}

Matrix from_eigen(const EigenMat& e) {
  Matrix m(e.rows(), e.cols());
  for (Eigen::Index r = 0; r < e.rows(); ++r)
    for (Eigen::Index c = 0; c < e.cols(); ++c) m(r, c) = e(r, c);
  return m;
}

double one_norm(const EigenMat& e) {
  double best = 0.0;
  for (Eigen::Index c = 0; c < e.cols(); ++c) best = std::max(best, e.col(c).cwiseAbs().sum());
  return best;
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shapes " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " and " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()) + " differ");
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols)
    throw DimensionError("matrix data has " + std::to_string(data_.size()) + " entries, expected " +
                         std::to_string(rows * cols));
  if (!all_finite()) throw ConfigError("matrix entries must be finite");
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::column(std::span<const double> values) {
  return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

std::vector<double> Matrix::col(std::size_t c) const {
  std::vector<double> out(rows_);
  for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
  return out;
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  }
  return out;
}

std::vector<double> matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size())
    throw DimensionError("matvec: matrix has " + std::to_string(a.cols()) + " columns, vector has " +
                         std::to_string(x.size()) + " entries");
  std::vector<double> out(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * x[k];
    out[i] = acc;
  }
  return out;
}

Matrix operator+(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "subtract");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}

Matrix operator*(double s, const Matrix& a) {
  Matrix out = a;
  for (double& v : out.data()) v *= s;
  return out;
}

double max_abs(const Matrix& a) { return max_abs(std::span<const double>(a.data())); }

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  return max_abs_diff(std::span<const double>(a.data()), std::span<const double>(b.data()));
}

double frobenius_norm(const Matrix& a) { return norm2(a.data()); }

double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw DimensionError("max_abs_diff: lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double reciprocal_condition(const Matrix& a) {
  if (a.rows() != a.cols()) throw DimensionError("reciprocal_condition: matrix is not square");
  if (a.rows() == 0) return 1.0;
  const EigenMat e = to_eigen(a);
  Eigen::FullPivLU<EigenMat> lu(e);
  if (!lu.isInvertible()) return 0.0;
  const double norm = one_norm(e);
  const double inv_norm = one_norm(lu.inverse());
  if (norm == 0.0 || !std::isfinite(inv_norm)) return 0.0;
  return 1.0 / (norm * inv_norm);
}

Matrix inverse(const Matrix& a) {
  if (a.rows() != a.cols()) throw DimensionError("inverse: matrix is not square");
  const EigenMat e = to_eigen(a);
  Eigen::FullPivLU<EigenMat> lu(e);
  if (!lu.isInvertible()) throw ConfigError("inverse: matrix is singular");
  return from_eigen(lu.inverse());
}

Matrix least_squares(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw DimensionError("least_squares: row counts differ");
  const EigenMat ea = to_eigen(a);
  const EigenMat eb = to_eigen(b);
  Eigen::CompleteOrthogonalDecomposition<EigenMat> cod(ea);
  return from_eigen(cod.solve(eb));
}

// ---------------------------------------------------------------------------

Activation Activation::power(int m) {
  if (m <= 0) throw ConfigError("power activation needs a positive exponent, got " + std::to_string(m));
  return Activation(Kind::Power, m);
}

Activation Activation::parse(const std::string& name) {
  if (name == "tanh") return tanh();
  if (name == "relu") return relu();
  if (name == "gelu") return gelu();
  if (name == "identity") return identity();
  if (name.rfind("power", 0) == 0) {
    const std::string digits = name.substr(5);
    if (digits.empty() || digits.find_first_not_of("-0123456789") != std::string::npos)
      throw ConfigError("bad power activation '" + name + "'");
    return power(std::stoi(digits));
  }
  throw ConfigError("unknown activation '" + name + "'");
}

std::string Activation::name() const {
  switch (kind_) {
    case Kind::Tanh: return "tanh";
    case Kind::ReLU: return "relu";
    case Kind::GELU: return "gelu";
    case Kind::Identity: return "identity";
    case Kind::Power: return "power" + std::to_string(exponent_);
  }
  return "identity";
}

double Activation::operator()(double x) const {
  switch (kind_) {
    case Kind::Tanh: return std::tanh(x);
    case Kind::ReLU: return x > 0.0 ? x : 0.0;
    // Exact Gaussian-CDF form.
    case Kind::GELU: return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
    case Kind::Identity: return x;
    case Kind::Power: {
      double out = 1.0;
      for (int i = 0; i < exponent_; ++i) out *= x;
      return out;
    }
  }
  return x;
}

double Activation::derivative(double x) const {
  switch (kind_) {
    case Kind::Tanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Kind::ReLU: return x > 0.0 ? 1.0 : 0.0;
    case Kind::GELU: {
      const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
      const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
      return cdf + x * pdf;
    }
    case Kind::Identity: return 1.0;
    case Kind::Power: {
      double out = static_cast<double>(exponent_);
      for (int i = 1; i < exponent_; ++i) out *= x;
      return out;
    }
  }
  return 1.0;
}

Matrix apply_activation(const Activation& sigma, const Matrix& m) {
  Matrix out = m;
  for (double& v : out.data()) v = sigma(v);
  return out;
}

Matrix softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto in = m.row(r);
    auto dst = out.row(r);
    double hi = -std::numeric_limits<double>::infinity();
    for (double v : in) hi = std::max(hi, v);
    double total = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      dst[c] = std::exp(in[c] - hi);
      total += dst[c];
    }
    for (double& v : dst) v /= total;
  }
  return out;
}

// ---------------------------------------------------------------------------

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw ConfigError("Rng::index on empty range");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t draw = engine_();
  while (draw >= limit) draw = engine_();
  return static_cast<std::size_t>(draw % bound);
}

std::vector<std::size_t> Rng::permutation(std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[index(i)]);
  return p;
}

Matrix Rng::normal_matrix(std::size_t rows, std::size_t cols, double scale) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = scale * normal();
  return m;
}

std::vector<double> Rng::normal_vector(std::size_t n, double scale) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * normal();
  return v;
}

}  // namespace layeq

#include "layeq/latent.hpp"

#include "layeq/error.hpp"

namespace layeq {

std::string Shape::to_string() const {
  return "(" + std::to_string(tokens) + "," + std::to_string(dim) + "," + std::to_string(heads) + ")";
}

Latent::Latent(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.size())
    throw DimensionError("latent of shape " + shape_.to_string() + " given " +
                         std::to_string(data_.size()) + " values");
}

Latent Latent::vector(std::vector<double> values) {
  const Shape shape = Shape::vector(values.size());
  return Latent(shape, std::move(values));
}

Latent Latent::from_tokens(const Matrix& m) {
  return Latent(Shape{m.rows(), m.cols(), 1}, m.data());
}

Matrix Latent::token_matrix() const {
  return Matrix(shape_.tokens, shape_.heads * shape_.dim, data_);
}

Matrix Latent::head_matrix(std::size_t s) const {
  if (s >= shape_.heads) throw DimensionError("head index out of range");
  Matrix m(shape_.tokens, shape_.dim);
  for (std::size_t p = 0; p < shape_.tokens; ++p)
    for (std::size_t q = 0; q < shape_.dim; ++q) m(p, q) = at(p, q, s);
  return m;
}

void Latent::set_head(std::size_t s, const Matrix& m) {
  if (s >= shape_.heads || m.rows() != shape_.tokens || m.cols() != shape_.dim)
    throw DimensionError("set_head: slice shape mismatch");
  for (std::size_t p = 0; p < shape_.tokens; ++p)
    for (std::size_t q = 0; q < shape_.dim; ++q) at(p, q, s) = m(p, q);
}

Latent Latent::reshaped(Shape shape) const {
  if (shape.size() != data_.size())
    throw DimensionError("cannot reshape " + shape_.to_string() + " to " + shape.to_string());
  return Latent(shape, data_);
}

double max_abs_diff(const Latent& a, const Latent& b) {
  if (!(a.shape() == b.shape()))
    throw DimensionError("latent shapes " + a.shape().to_string() + " and " +
                         b.shape().to_string() + " differ");
  return max_abs_diff(std::span<const double>(a.data()), std::span<const double>(b.data()));
}

std::vector<Latent> gaussian_probes(Shape shape, std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Latent> probes;
  probes.reserve(count);
  for (std::size_t i = 0; i < count; ++i) probes.emplace_back(shape, rng.normal_vector(shape.size()));
  return probes;
}

}  // namespace layeq

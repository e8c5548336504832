#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "layeq/numeric.hpp"

namespace layeq {

/// Shape of a latent space R^{tokens x dim x heads}. MLP latents are
/// (1, d, 1); attention latents carry one slice per head.
struct Shape {
  std::size_t tokens = 1;
  std::size_t dim = 1;
  std::size_t heads = 1;

  static Shape vector(std::size_t d) { return {1, d, 1}; }
  std::size_t size() const noexcept { return tokens * dim * heads; }
  std::string to_string() const;
  bool operator==(const Shape&) const = default;
};

/// A point of a latent space. Storage is token-major, then head, then
/// feature: entry (p, q, s) lives at (p * heads + s) * dim + q, so each token
/// row is the head-major flattening [head 0 features | head 1 features | ...].
class Latent {
 public:
  Latent() = default;
  explicit Latent(Shape shape) : shape_(shape), data_(shape.size(), 0.0) {}
  Latent(Shape shape, std::vector<double> data);

  static Latent vector(std::vector<double> values);
  /// Tokens as rows of `m` (n x dim), single head.
  static Latent from_tokens(const Matrix& m);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& at(std::size_t p, std::size_t q, std::size_t s) {
    return data_[(p * shape_.heads + s) * shape_.dim + q];
  }
  double at(std::size_t p, std::size_t q, std::size_t s) const {
    return data_[(p * shape_.heads + s) * shape_.dim + q];
  }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  /// n x (heads * dim) matrix with one token per row.
  Matrix token_matrix() const;
  /// n x dim matrix of one head's slice.
  Matrix head_matrix(std::size_t s) const;
  void set_head(std::size_t s, const Matrix& m);

  /// Same data viewed under another shape of equal size.
  Latent reshaped(Shape shape) const;

  bool operator==(const Latent&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

double max_abs_diff(const Latent& a, const Latent& b);

/// `count` latents with i.i.d. standard normal entries.
std::vector<Latent> gaussian_probes(Shape shape, std::size_t count, std::uint64_t seed);

}  // namespace layeq

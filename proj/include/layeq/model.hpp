#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "layeq/latent.hpp"
#include "layeq/numeric.hpp"

namespace layeq {

/// x -> sigma(W x + b), or W x + b when `apply_activation` is false. Consumes
/// any latent with `in_dim` entries (flattened), produces a (1, out_dim, 1)
/// vector.
struct AffineSpec {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Activation activation = Activation::identity();
  bool apply_activation = true;

  bool operator==(const AffineSpec&) const = default;
};

/// Multi-head attention with the attention matrix W_A parametrized directly.
///
/// Input X is n x (in_heads * in_dim); Xbar = X W_O (+ positional encodings)
/// is n x in_dim. Head j outputs smax(Q W_A^j Xbar^T) Xbar W_V^j where Q is
/// Xbar itself, or a single learned query row when `query_token` is set (the
/// output then has one token).
struct AttentionSpec {
  std::size_t tokens = 0;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  std::size_t heads = 1;
  std::size_t in_heads = 1;
  bool positional_encoding = false;
  bool query_token = false;

  std::size_t out_tokens() const noexcept { return query_token ? 1 : tokens; }
  bool operator==(const AttentionSpec&) const = default;
};

using LayerSpec = std::variant<AffineSpec, AttentionSpec>;

struct AffineParams {
  Matrix weight;             // out_dim x in_dim
  std::vector<double> bias;  // out_dim

  bool operator==(const AffineParams&) const = default;
};

struct AttentionParams {
  std::vector<Matrix> attention;   // heads x (in_dim x in_dim)
  std::vector<Matrix> value;       // heads x (in_dim x out_dim)
  Matrix projection;               // (in_heads * in_dim) x in_dim
  std::optional<Matrix> positional;  // tokens x in_dim
  std::optional<Matrix> query;       // 1 x in_dim

  bool operator==(const AttentionParams&) const = default;
};

using LayerParams = std::variant<AffineParams, AttentionParams>;

struct Layer {
  LayerSpec spec;
  LayerParams params;

  bool is_affine() const noexcept { return std::holds_alternative<AffineSpec>(spec); }
  bool is_attention() const noexcept { return std::holds_alternative<AttentionSpec>(spec); }
  const AffineSpec& affine_spec() const { return std::get<AffineSpec>(spec); }
  const AttentionSpec& attention_spec() const { return std::get<AttentionSpec>(spec); }
  const AffineParams& affine() const { return std::get<AffineParams>(params); }
  AffineParams& affine() { return std::get<AffineParams>(params); }
  const AttentionParams& attention() const { return std::get<AttentionParams>(params); }
  AttentionParams& attention() { return std::get<AttentionParams>(params); }

  bool operator==(const Layer&) const = default;
};

Shape input_shape(const LayerSpec& spec);
Shape output_shape(const LayerSpec& spec);
/// Throws DimensionError when the parameter shapes do not match `spec`.
void validate_layer(const LayerSpec& spec, const LayerParams& params);

Latent forward_layer(const LayerSpec& spec, const LayerParams& params, const Latent& x);
inline Latent forward_layer(const Layer& layer, const Latent& x) {
  return forward_layer(layer.spec, layer.params, x);
}

/// Intermediate values of one attention forward pass.
struct AttentionTrace {
  Matrix input;                // n x (in_heads * in_dim)
  Matrix xbar;                 // n x in_dim
  Matrix queries;              // m x in_dim
  std::vector<Matrix> pattern;  // per head, m x n softmax output
  std::vector<Matrix> values;   // per head, n x out_dim
  Latent output;
};

AttentionTrace trace_attention(const AttentionSpec& spec, const AttentionParams& params,
                               const Latent& x);

/// A depth-L model: layers f_1..f_L between latent spaces V_0..V_L.
/// Layer and latent indices are 1-based for layers and 0-based for latents,
/// so layer(i) maps latent_shape(i - 1) to latent_shape(i).
class Model {
 public:
  Model() = default;
  /// Validates every layer and the shape chain.
  explicit Model(std::vector<Layer> layers);

  std::size_t depth() const noexcept { return layers_.size(); }
  const Layer& layer(std::size_t i) const;
  /// Mutable parameter access for trainers; the shapes must be preserved.
  LayerParams& params(std::size_t i);
  void set_params(std::size_t i, LayerParams params);

  const std::vector<Layer>& layers() const noexcept { return layers_; }
  const std::vector<Shape>& latent_shapes() const noexcept { return shapes_; }
  Shape latent_shape(std::size_t i) const { return shapes_.at(i); }

  /// True when every layer is affine.
  bool is_mlp() const;

  Latent forward(const Latent& x) const;
  /// Outputs of every layer, index 0 holding x itself.
  std::vector<Latent> forward_all(const Latent& x) const;

  bool operator==(const Model&) const = default;

 private:
  std::vector<Layer> layers_;
  std::vector<Shape> shapes_;
};

/// All parameters of a layer in a fixed order (W, b for affine; W_A per head,
/// W_V per head, W_O, positional, query for attention).
std::vector<double> flatten_params(const LayerParams& params);
/// Inverse of flatten_params into parameters of the same shapes.
void unflatten_params(LayerParams& params, std::span<const double> values);

/// Affine layer with Gaussian weights scaled by 1/sqrt(in_dim) and Gaussian
/// biases scaled by `bias_scale`.
Layer random_affine(std::size_t in_dim, std::size_t out_dim, Activation sigma, bool apply_activation,
                    Rng& rng, double bias_scale = 0.1);
/// MLP with widths d_0..d_L; the last layer has no activation.
Model random_mlp(std::span<const std::size_t> widths, Activation sigma, Rng& rng,
                 double bias_scale = 0.1);
Layer random_attention(const AttentionSpec& spec, Rng& rng, double scale = 1.0);

}  // namespace layeq

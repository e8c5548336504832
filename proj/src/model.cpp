#include "layeq/model.hpp"

#include <algorithm>
#include <cmath>

#include "layeq/error.hpp"

namespace layeq {

namespace {

void check_matrix(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& what) {
  if (m.rows() != rows || m.cols() != cols)
    throw DimensionError(what + " is " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                         ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
}

bool accepts(const LayerSpec& spec, const Shape& shape) {
  if (const auto* a = std::get_if<AffineSpec>(&spec)) return shape.size() == a->in_dim;
  return input_shape(spec) == shape;
}

}  // namespace

Shape input_shape(const LayerSpec& spec) {
  if (const auto* a = std::get_if<AffineSpec>(&spec)) return Shape::vector(a->in_dim);
  const auto& t = std::get<AttentionSpec>(spec);
  return Shape{t.tokens, t.in_dim, t.in_heads};
}

Shape output_shape(const LayerSpec& spec) {
  if (const auto* a = std::get_if<AffineSpec>(&spec)) return Shape::vector(a->out_dim);
  const auto& t = std::get<AttentionSpec>(spec);
  return Shape{t.out_tokens(), t.out_dim, t.heads};
}

void validate_layer(const LayerSpec& spec, const LayerParams& params) {
  if (const auto* a = std::get_if<AffineSpec>(&spec)) {
    if (a->in_dim == 0 || a->out_dim == 0) throw DimensionError("affine layer dims must be positive");
    const auto* p = std::get_if<AffineParams>(&params);
    if (p == nullptr) throw DimensionError("affine layer given attention parameters");
    check_matrix(p->weight, a->out_dim, a->in_dim, "affine weight");
    if (p->bias.size() != a->out_dim)
      throw DimensionError("affine bias has " + std::to_string(p->bias.size()) + " entries, expected " +
                           std::to_string(a->out_dim));
    return;
  }
  const auto& t = std::get<AttentionSpec>(spec);
  if (t.tokens == 0 || t.in_dim == 0 || t.out_dim == 0 || t.heads == 0 || t.in_heads == 0)
    throw DimensionError("attention layer dims must be positive");
  const auto* p = std::get_if<AttentionParams>(&params);
  if (p == nullptr) throw DimensionError("attention layer given affine parameters");
  if (p->attention.size() != t.heads || p->value.size() != t.heads)
    throw DimensionError("attention layer needs one attention and value matrix per head");
  for (std::size_t j = 0; j < t.heads; ++j) {
    check_matrix(p->attention[j], t.in_dim, t.in_dim, "W_A[" + std::to_string(j) + "]");
    check_matrix(p->value[j], t.in_dim, t.out_dim, "W_V[" + std::to_string(j) + "]");
  }
  check_matrix(p->projection, t.in_heads * t.in_dim, t.in_dim, "W_O");
  if (t.positional_encoding != p->positional.has_value())
    throw DimensionError("positional encoding presence does not match the layer spec");
  if (p->positional) check_matrix(*p->positional, t.tokens, t.in_dim, "positional encoding");
  if (t.query_token != p->query.has_value())
    throw DimensionError("query token presence does not match the layer spec");
  if (p->query) check_matrix(*p->query, 1, t.in_dim, "query token");
}

AttentionTrace trace_attention(const AttentionSpec& spec, const AttentionParams& params,
                               const Latent& x) {
  if (!(x.shape() == input_shape(spec)))
    throw DimensionError("attention input has shape " + x.shape().to_string() + ", expected " +
                         input_shape(spec).to_string());
  AttentionTrace trace;
  trace.input = x.token_matrix();
  trace.xbar = matmul(trace.input, params.projection);
  if (params.positional) trace.xbar = trace.xbar + *params.positional;
  trace.queries = params.query ? *params.query : trace.xbar;
  const Matrix xbar_t = trace.xbar.transpose();
  trace.output = Latent(output_shape(spec));
  for (std::size_t j = 0; j < spec.heads; ++j) {
    const Matrix logits = matmul(matmul(trace.queries, params.attention[j]), xbar_t);
    trace.pattern.push_back(softmax_rows(logits));
    trace.values.push_back(matmul(trace.xbar, params.value[j]));
    trace.output.set_head(j, matmul(trace.pattern.back(), trace.values.back()));
  }
  return trace;
}

Latent forward_layer(const LayerSpec& spec, const LayerParams& params, const Latent& x) {
  if (const auto* a = std::get_if<AffineSpec>(&spec)) {
    const auto& p = std::get<AffineParams>(params);
    if (x.size() != a->in_dim)
      throw DimensionError("affine input has " + std::to_string(x.size()) + " entries, expected " +
                           std::to_string(a->in_dim));
    std::vector<double> out = matvec(p.weight, x.data());
    for (std::size_t r = 0; r < out.size(); ++r) {
      out[r] += p.bias[r];
      if (a->apply_activation) out[r] = a->activation(out[r]);
    }
    return Latent::vector(std::move(out));
  }
  return trace_attention(std::get<AttentionSpec>(spec), std::get<AttentionParams>(params), x).output;
}

Model::Model(std::vector<Layer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw DimensionError("a model needs at least one layer");
  shapes_.push_back(input_shape(layers_.front().spec));
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    validate_layer(layers_[i].spec, layers_[i].params);
    if (!accepts(layers_[i].spec, shapes_.back()))
      throw DimensionError("layer " + std::to_string(i + 1) + " cannot consume latent of shape " +
                           shapes_.back().to_string());
    shapes_.push_back(output_shape(layers_[i].spec));
  }
}

const Layer& Model::layer(std::size_t i) const {
  if (i == 0 || i > layers_.size()) throw DimensionError("layer index " + std::to_string(i) + " out of range");
  return layers_[i - 1];
}

LayerParams& Model::params(std::size_t i) {
  if (i == 0 || i > layers_.size()) throw DimensionError("layer index " + std::to_string(i) + " out of range");
  return layers_[i - 1].params;
}

void Model::set_params(std::size_t i, LayerParams params) {
  if (i == 0 || i > layers_.size()) throw DimensionError("layer index " + std::to_string(i) + " out of range");
  validate_layer(layers_[i - 1].spec, params);
  layers_[i - 1].params = std::move(params);
}

bool Model::is_mlp() const {
  for (const auto& l : layers_)
    if (!l.is_affine()) return false;
  return true;
}

Latent Model::forward(const Latent& x) const {
  if (!accepts(layers_.front().spec, x.shape()))
    throw DimensionError("model input has shape " + x.shape().to_string() + ", expected " +
                         shapes_.front().to_string());
  Latent h = x;
  for (const auto& l : layers_) h = forward_layer(l, h);
  return h;
}

std::vector<Latent> Model::forward_all(const Latent& x) const {
  std::vector<Latent> out{x};
  for (const auto& l : layers_) out.push_back(forward_layer(l, out.back()));
  return out;
}

namespace {

template <typename F>
void for_each_block(LayerParams& params, F&& f) {
  if (auto* a = std::get_if<AffineParams>(&params)) {
    f(a->weight.data());
    f(a->bias);
    return;
  }
  auto& t = std::get<AttentionParams>(params);
  for (auto& m : t.attention) f(m.data());
  for (auto& m : t.value) f(m.data());
  f(t.projection.data());
  if (t.positional) f(t.positional->data());
  if (t.query) f(t.query->data());
}

}  // namespace

std::vector<double> flatten_params(const LayerParams& params) {
  std::vector<double> out;
  LayerParams copy = params;
  for_each_block(copy, [&](std::vector<double>& v) { out.insert(out.end(), v.begin(), v.end()); });
  return out;
}

void unflatten_params(LayerParams& params, std::span<const double> values) {
  std::size_t pos = 0;
  for_each_block(params, [&](std::vector<double>& v) {
    if (pos + v.size() > values.size()) throw DimensionError("too few values to unflatten parameters");
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(pos), v.size(), v.begin());
    pos += v.size();
  });
  if (pos != values.size()) throw DimensionError("too many values to unflatten parameters");
}

Layer random_affine(std::size_t in_dim, std::size_t out_dim, Activation sigma, bool apply_activation,
                    Rng& rng, double bias_scale) {
  AffineParams p;
  p.weight = rng.normal_matrix(out_dim, in_dim, 1.0 / std::sqrt(static_cast<double>(in_dim)));
  p.bias = rng.normal_vector(out_dim, bias_scale);
  return Layer{AffineSpec{in_dim, out_dim, sigma, apply_activation}, std::move(p)};
}

Model random_mlp(std::span<const std::size_t> widths, Activation sigma, Rng& rng, double bias_scale) {
  if (widths.size() < 2) throw DimensionError("an MLP needs at least two widths");
  std::vector<Layer> layers;
  for (std::size_t i = 1; i < widths.size(); ++i) {
    const bool last = i + 1 == widths.size();
    layers.push_back(random_affine(widths[i - 1], widths[i], sigma, !last, rng, bias_scale));
  }
  return Model(std::move(layers));
}

Layer random_attention(const AttentionSpec& spec, Rng& rng, double scale) {
  AttentionParams p;
  const double s = scale / std::sqrt(static_cast<double>(spec.in_dim));
  for (std::size_t j = 0; j < spec.heads; ++j) {
    p.attention.push_back(rng.normal_matrix(spec.in_dim, spec.in_dim, s));
    p.value.push_back(rng.normal_matrix(spec.in_dim, spec.out_dim, s));
  }
  p.projection = rng.normal_matrix(spec.in_heads * spec.in_dim, spec.in_dim,
                                   scale / std::sqrt(static_cast<double>(spec.in_heads * spec.in_dim)));
  if (spec.positional_encoding) p.positional = rng.normal_matrix(spec.tokens, spec.in_dim, scale);
  if (spec.query_token) p.query = rng.normal_matrix(1, spec.in_dim, scale);
  return Layer{spec, std::move(p)};
}

}  // namespace layeq

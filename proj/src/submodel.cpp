#include "layeq/submodel.hpp"

#include <algorithm>
#include <cmath>

#include "layeq/error.hpp"

namespace layeq {

using nlohmann::json;

namespace {

constexpr std::size_t npos = LatentEmbedding::npos;

// Units of hidden latent i: neurons when produced by an affine layer, heads
// when produced by attention.
struct Layout {
  std::size_t tokens = 1;
  std::size_t units = 0;
  std::size_t unit_size = 1;
  std::size_t row() const { return units * unit_size; }
};

Layout layout_of(const Model& model, std::size_t i) {
  const Shape s = model.latent_shape(i);
  if (i == 0 || i == model.depth() || model.layer(i).is_affine())
    return Layout{s.tokens, s.heads * s.dim, 1};
  return Layout{s.tokens, s.heads, s.dim};
}

Activation hidden_activation(const Layer& producer) {
  const auto& spec = producer.affine_spec();
  return spec.apply_activation ? spec.activation : Activation::identity();
}

std::vector<double> incoming(const Layer& producer, std::size_t u) {
  if (producer.is_affine()) {
    const auto& p = producer.affine();
    std::vector<double> v(p.weight.row(u).begin(), p.weight.row(u).end());
    v.push_back(p.bias[u]);
    return v;
  }
  return producer.attention().value[u].data();
}

std::vector<double> outgoing(const Layer& consumer, const Layout& lay, std::size_t u) {
  std::vector<double> out;
  const std::size_t r = lay.row();
  if (consumer.is_affine()) {
    const Matrix& w = consumer.affine().weight;
    for (std::size_t p = 0; p < lay.tokens; ++p)
      for (std::size_t c = u * lay.unit_size; c < (u + 1) * lay.unit_size; ++c)
        for (std::size_t o = 0; o < w.rows(); ++o) out.push_back(w(o, p * r + c));
    return out;
  }
  const Matrix& wo = consumer.attention().projection;
  for (std::size_t c = u * lay.unit_size; c < (u + 1) * lay.unit_size; ++c)
    out.insert(out.end(), wo.row(c).begin(), wo.row(c).end());
  return out;
}

void zero_incoming(Layer& producer, std::size_t u) {
  auto& p = producer.affine();
  for (double& v : p.weight.row(u)) v = 0.0;
  p.bias[u] = 0.0;
}

void zero_outgoing(Layer& consumer, const Layout& lay, std::size_t u) {
  const std::size_t r = lay.row();
  if (consumer.is_affine()) {
    Matrix& w = consumer.affine().weight;
    for (std::size_t p = 0; p < lay.tokens; ++p)
      for (std::size_t c = u * lay.unit_size; c < (u + 1) * lay.unit_size; ++c)
        for (std::size_t o = 0; o < w.rows(); ++o) w(o, p * r + c) = 0.0;
    return;
  }
  Matrix& wo = consumer.attention().projection;
  for (std::size_t c = u * lay.unit_size; c < (u + 1) * lay.unit_size; ++c)
    for (double& v : wo.row(c)) v = 0.0;
}

// Replaces the input side of `consumer` by composing with the per-token map
// T (r_old x r_new).
void compose_input(Layer& consumer, const Matrix& t, std::size_t tokens) {
  const std::size_t r_old = t.rows();
  const std::size_t r_new = t.cols();
  if (consumer.is_affine()) {
    auto& spec = std::get<AffineSpec>(consumer.spec);
    const Matrix& w = consumer.affine().weight;
    Matrix out(w.rows(), tokens * r_new);
    for (std::size_t o = 0; o < w.rows(); ++o)
      for (std::size_t p = 0; p < tokens; ++p)
        for (std::size_t cn = 0; cn < r_new; ++cn) {
          double acc = 0.0;
          for (std::size_t c = 0; c < r_old; ++c) acc += w(o, p * r_old + c) * t(c, cn);
          out(o, p * r_new + cn) = acc;
        }
    consumer.affine().weight = std::move(out);
    spec.in_dim = tokens * r_new;
    return;
  }
  auto& spec = std::get<AttentionSpec>(consumer.spec);
  if (r_new % spec.in_dim != 0)
    throw UnsupportedError("cannot change the token width of an attention layer's feature dimension");
  consumer.attention().projection = matmul(t.transpose(), consumer.attention().projection);
  spec.in_heads = r_new / spec.in_dim;
}

double max_abs_vec(const std::vector<double>& v) { return max_abs(std::span<const double>(v)); }

// sigma(s t) = c sigma(t)
double forward_coefficient(const Activation& sigma, double s) {
  switch (sigma.kind()) {
    case Activation::Kind::GELU: return 1.0;
    case Activation::Kind::Power: return std::pow(s, sigma.exponent());
    default: return s;
  }
}

std::optional<double> allowed_scale(const Activation& sigma, double s, double tol) {
  if (!std::isfinite(s) || s == 0.0) return std::nullopt;
  switch (sigma.kind()) {
    case Activation::Kind::Tanh:
      if (std::abs(s - 1.0) <= tol) return 1.0;
      if (std::abs(s + 1.0) <= tol) return -1.0;
      return std::nullopt;
    case Activation::Kind::GELU:
      if (std::abs(s - 1.0) <= tol) return 1.0;
      return std::nullopt;
    case Activation::Kind::ReLU: return s > 0.0 ? std::optional(s) : std::nullopt;
    case Activation::Kind::Power:
    case Activation::Kind::Identity: return s;
  }
  return std::nullopt;
}

std::size_t argmax_abs(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (std::abs(v[i]) > std::abs(v[best])) best = i;
  return best;
}

std::vector<NeuronStatus> neuron_status(const Model& model, std::size_t i, double tol) {
  const Layer& producer = model.layer(i);
  const Layer& consumer = model.layer(i + 1);
  const Layout lay = layout_of(model, i);
  const Activation sigma = hidden_activation(producer);
  std::vector<NeuronStatus> status(lay.units);
  std::vector<std::vector<double>> in(lay.units);
  std::vector<bool> in_zero(lay.units), out_zero(lay.units);
  for (std::size_t u = 0; u < lay.units; ++u) {
    in[u] = incoming(producer, u);
    in_zero[u] = max_abs_vec(in[u]) <= tol;
    out_zero[u] = max_abs_vec(outgoing(consumer, lay, u)) <= tol;
  }
  std::vector<std::size_t> reps;
  for (std::size_t u = 0; u < lay.units; ++u) {
    if (in_zero[u] && out_zero[u]) {
      status[u] = NeuronStatus::inactive();
      continue;
    }
    if (!in_zero[u]) {
      bool matched = false;
      for (std::size_t j : reps) {
        const std::size_t q = argmax_abs(in[j]);
        const auto s = allowed_scale(sigma, in[u][q] / in[j][q], tol);
        if (!s) continue;
        double worst = 0.0;
        for (std::size_t t = 0; t < in[u].size(); ++t) worst = std::max(worst, std::abs(in[u][t] - *s * in[j][t]));
        if (worst <= tol) {
          status[u] = NeuronStatus::redundant(j, *s);
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    if (!in_zero[u]) reps.push_back(u);
    status[u] = NeuronStatus::active();
  }
  return status;
}

std::vector<NeuronStatus> head_status(const Model& model, std::size_t i, double tol) {
  const Layer& producer = model.layer(i);
  const Layer& consumer = model.layer(i + 1);
  const Layout lay = layout_of(model, i);
  std::vector<NeuronStatus> status(lay.units);
  const auto probes = gaussian_probes(model.latent_shape(i - 1), 16, 0x4ead5ULL + i);
  std::vector<Latent> outputs;
  for (const auto& x : probes) outputs.push_back(forward_layer(producer, x));
  std::vector<std::size_t> reps;
  for (std::size_t s = 0; s < lay.units; ++s) {
    if (max_abs_vec(incoming(producer, s)) <= tol || max_abs_vec(outgoing(consumer, lay, s)) <= tol) {
      status[s] = NeuronStatus::inactive();
      continue;
    }
    bool matched = false;
    for (std::size_t j : reps) {
      double worst = 0.0;
      for (const auto& y : outputs) worst = std::max(worst, max_abs_diff(y.head_matrix(s), y.head_matrix(j)));
      if (worst <= tol) {
        status[s] = NeuronStatus::redundant(j, 1.0);
        matched = true;
        break;
      }
    }
    if (!matched) reps.push_back(s);
  }
  return status;
}

std::optional<std::string> find_half_dead(const Model& model, double tol) {
  for (std::size_t i = 1; i < model.depth(); ++i) {
    if (!model.layer(i).is_affine()) continue;
    const Layout lay = layout_of(model, i);
    for (std::size_t u = 0; u < lay.units; ++u) {
      const bool in_zero = max_abs_vec(incoming(model.layer(i), u)) <= tol;
      const bool out_zero = max_abs_vec(outgoing(model.layer(i + 1), lay, u)) <= tol;
      if (in_zero != out_zero)
        return "layer " + std::to_string(i) + " neuron " + std::to_string(u) +
               (in_zero ? " has a zero incoming row but a nonzero outgoing column"
                        : " has a nonzero incoming row but a zero outgoing column");
    }
  }
  return std::nullopt;
}

LatentEmbedding build_embedding(const Model& model, std::size_t i, std::vector<NeuronStatus> status,
                                double tol) {
  const Layout lay = layout_of(model, i);
  const bool neurons = lay.unit_size == 1;
  const Activation sigma = neurons ? hidden_activation(model.layer(i)) : Activation::identity();
  LatentEmbedding e;
  e.unit_size = lay.unit_size;
  e.unit_class.assign(lay.units, npos);
  e.coeff.assign(lay.units, 0.0);
  e.witness_scale.assign(lay.units, 0.0);
  std::vector<std::size_t> rep_of_class;
  for (std::size_t u = 0; u < lay.units; ++u) {
    if (status[u].kind != NeuronStatus::Kind::Active) continue;
    e.unit_class[u] = rep_of_class.size();
    e.coeff[u] = 1.0;
    e.witness_scale[u] = 1.0;
    rep_of_class.push_back(u);
  }
  for (std::size_t u = 0; u < lay.units; ++u) {
    if (status[u].kind != NeuronStatus::Kind::Redundant) continue;
    e.unit_class[u] = e.unit_class[status[u].partner];
    e.coeff[u] = forward_coefficient(sigma, status[u].scale);
    e.witness_scale[u] = status[u].scale;
  }
  const std::size_t reduced = rep_of_class.size();
  const std::size_t us = lay.unit_size;
  e.alpha = Matrix(lay.units * us, reduced * us);
  e.alpha_star = Matrix(reduced * us, lay.units * us);
  e.witness = Matrix(lay.units * us, reduced * us);
  for (std::size_t u = 0; u < lay.units; ++u) {
    if (e.unit_class[u] == npos) continue;
    for (std::size_t c = 0; c < us; ++c) {
      e.alpha(u * us + c, e.unit_class[u] * us + c) = e.coeff[u];
      e.witness(u * us + c, e.unit_class[u] * us + c) = neurons ? e.witness_scale[u] : e.coeff[u];
    }
  }
  // Left inverse: spread over a class in proportion to the outgoing weights
  // when they are proportional, so beta reproduces the ambient parameters.
  const Layer& consumer = model.layer(i + 1);
  for (std::size_t m = 0; m < reduced; ++m) {
    std::vector<std::size_t> members;
    for (std::size_t u = 0; u < lay.units; ++u)
      if (e.unit_class[u] == m) members.push_back(u);
    const std::size_t rep = rep_of_class[m];
    std::vector<double> weights(lay.units, 0.0);
    weights[rep] = 1.0;
    if (members.size() > 1) {
      const std::vector<double> v = outgoing(consumer, lay, rep);
      const double vv = dot(v, v);
      bool proportional = vv > 0.0;
      std::vector<double> mu(lay.units, 0.0);
      double denom = 0.0;
      for (std::size_t u : members) {
        if (!proportional) break;
        const std::vector<double> o = outgoing(consumer, lay, u);
        mu[u] = dot(o, v) / vv;
        for (std::size_t t = 0; t < o.size(); ++t)
          if (std::abs(o[t] - mu[u] * v[t]) > std::max(tol, 1e-12)) proportional = false;
        denom += e.coeff[u] * mu[u];
      }
      if (proportional && std::abs(denom) > 1e-12) {
        for (std::size_t u : members) weights[u] = mu[u] / denom;
      }
    }
    for (std::size_t u : members)
      for (std::size_t c = 0; c < us; ++c) e.alpha_star(m * us + c, u * us + c) = weights[u];
  }
  e.status = std::move(status);
  return e;
}

Matrix kron_identity_apply(const Matrix& per_token, const Latent& x, const Shape& out_shape) {
  Matrix rows = matmul(x.token_matrix(), per_token.transpose());
  if (rows.size() != out_shape.size()) throw DimensionError("embedding map does not match the latent shape");
  return rows;
}

}  // namespace

std::string status_name(NeuronStatus::Kind kind) {
  switch (kind) {
    case NeuronStatus::Kind::Active: return "active";
    case NeuronStatus::Kind::Inactive: return "inactive";
    case NeuronStatus::Kind::Redundant: return "redundant";
  }
  return "active";
}

std::size_t LatentEmbedding::reduced_units() const {
  std::size_t n = 0;
  for (std::size_t c : unit_class)
    if (c != npos) n = std::max(n, c + 1);
  return n;
}

bool LatentEmbedding::is_identity() const {
  for (std::size_t u = 0; u < unit_class.size(); ++u)
    if (unit_class[u] != u || coeff[u] != 1.0) return false;
  return true;
}

LatentEmbedding LatentEmbedding::identity(std::size_t units, std::size_t unit_size) {
  LatentEmbedding e;
  e.unit_size = unit_size;
  e.unit_class.resize(units);
  for (std::size_t u = 0; u < units; ++u) e.unit_class[u] = u;
  e.coeff.assign(units, 1.0);
  e.witness_scale.assign(units, 1.0);
  e.status.assign(units, NeuronStatus::active());
  e.alpha = Matrix::identity(units * unit_size);
  e.alpha_star = e.alpha;
  e.witness = e.alpha;
  return e;
}

Latent SubmodelEmbedding::alpha(std::size_t i, const Latent& reduced) const {
  if (!(reduced.shape() == reduced_shapes.at(i))) throw DimensionError("alpha: latent shape mismatch");
  return Latent(ambient_shapes[i], kron_identity_apply(latents[i].alpha, reduced, ambient_shapes[i]).data());
}

Latent SubmodelEmbedding::alpha_star(std::size_t i, const Latent& ambient) const {
  if (!(ambient.shape() == ambient_shapes.at(i))) throw DimensionError("alpha*: latent shape mismatch");
  return Latent(reduced_shapes[i],
                kron_identity_apply(latents[i].alpha_star, ambient, reduced_shapes[i]).data());
}

Layer SubmodelEmbedding::beta(std::size_t i, const Layer& reduced) const {
  if (i == 0 || i > depth()) throw DimensionError("beta: layer index out of range");
  Layer out = reduced;
  compose_input(out, latents[i - 1].alpha_star, ambient_shapes[i - 1].tokens);
  const LatentEmbedding& e = latents[i];
  if (out.is_affine()) {
    auto& p = out.affine();
    p.weight = matmul(e.witness, p.weight);
    p.bias = matvec(e.witness, p.bias);
  } else if (!e.is_identity()) {
    const auto& src = out.attention();
    AttentionParams p = src;
    const std::size_t d = std::get<AttentionSpec>(out.spec).in_dim;
    p.attention.clear();
    p.value.clear();
    for (std::size_t u = 0; u < e.ambient_units(); ++u) {
      if (e.unit_class[u] == npos) {
        p.attention.emplace_back(d, d);
        p.value.emplace_back(d, src.value.front().cols());
      } else {
        p.attention.push_back(src.attention[e.unit_class[u]]);
        p.value.push_back(e.coeff[u] * src.value[e.unit_class[u]]);
      }
    }
    out.params = std::move(p);
  }
  out.spec = ambient_specs[i - 1];
  validate_layer(out.spec, out.params);
  return out;
}

std::optional<GroupElement> SubmodelEmbedding::gamma(std::size_t i, const GroupElement& reduced) const {
  const LatentEmbedding& e = latents.at(i);
  if (e.is_identity()) return reduced;
  const std::size_t classes = e.reduced_units();
  std::vector<std::vector<std::size_t>> members(classes);
  for (std::size_t u = 0; u < e.ambient_units(); ++u)
    if (e.unit_class[u] != npos) members[e.unit_class[u]].push_back(u);
  const std::size_t n = e.ambient_units();

  if (reduced.variant() == GroupElement::Variant::Dense) {
    if (e.unit_size != 1) return std::nullopt;
    for (const auto& m : members)
      if (m.size() != 1) return std::nullopt;
    Matrix k = Matrix::identity(n);
    for (std::size_t a = 0; a < classes; ++a) {
      for (std::size_t b = 0; b < classes; ++b) {
        const std::size_t ua = members[a][0], ub = members[b][0];
        k(ua, ub) = e.coeff[ua] * reduced.matrix()(a, b) / e.coeff[ub];
      }
    }
    return GroupElement::dense(std::move(k));
  }

  const bool heads = reduced.variant() == GroupElement::Variant::HeadSym;
  if (heads != (e.unit_size > 1 && reduced.heads() == classes)) {
    if (heads || e.unit_size != 1) return std::nullopt;
  }
  if (reduced.perm().size() != classes) return std::nullopt;
  std::vector<std::size_t> perm(n);
  std::vector<double> scales(n, 1.0);
  std::vector<Matrix> blocks;
  for (std::size_t u = 0; u < n; ++u) {
    perm[u] = u;
    if (heads) blocks.push_back(Matrix::identity(e.unit_size));
  }
  for (std::size_t m = 0; m < classes; ++m) {
    const auto& src = members[m];
    const auto& dst = members[reduced.perm()[m]];
    if (src.size() != dst.size()) return std::nullopt;
    for (std::size_t j = 0; j < src.size(); ++j) {
      const std::size_t u = src[j];
      perm[u] = dst[j];
      const double ratio = e.coeff[u] / e.coeff[dst[j]];
      if (heads) {
        blocks[u] = ratio * reduced.blocks()[m];
      } else {
        scales[u] = ratio * reduced.scales()[m];
      }
    }
  }
  if (heads) return GroupElement::head_symmetry(std::move(perm), std::move(blocks));
  bool unit = true, sign = true;
  for (double s : scales) {
    unit = unit && s == 1.0;
    sign = sign && (s == 1.0 || s == -1.0);
  }
  if (unit) return GroupElement::permutation(std::move(perm));
  if (sign) return GroupElement::signed_permutation(std::move(perm), std::move(scales));
  return GroupElement::monomial(std::move(perm), std::move(scales));
}

json SubmodelEmbedding::to_json() const {
  json out = json::array();
  for (std::size_t i = 0; i < latents.size(); ++i) {
    const auto& e = latents[i];
    json classes = json::array();
    for (std::size_t c : e.unit_class) classes.push_back(c == npos ? json(nullptr) : json(c));
    out.push_back({{"latent", i},
                   {"ambient_shape", {ambient_shapes[i].tokens, ambient_shapes[i].dim, ambient_shapes[i].heads}},
                   {"reduced_shape", {reduced_shapes[i].tokens, reduced_shapes[i].dim, reduced_shapes[i].heads}},
                   {"unit_size", e.unit_size},
                   {"unit_class", std::move(classes)},
                   {"coefficients", e.coeff},
                   {"status", status_json(e.status)},
                   {"alpha", {{"rows", e.alpha.rows()}, {"cols", e.alpha.cols()}, {"data", e.alpha.data()}}},
                   {"alpha_star",
                    {{"rows", e.alpha_star.rows()}, {"cols", e.alpha_star.cols()}, {"data", e.alpha_star.data()}}}});
  }
  return out;
}

SubmodelEmbedding trivial_embedding(const Model& model) {
  SubmodelEmbedding emb;
  for (std::size_t i = 0; i <= model.depth(); ++i) {
    const Shape s = model.latent_shape(i);
    const Layout lay = layout_of(model, i);
    emb.latents.push_back(LatentEmbedding::identity(lay.units, lay.unit_size));
    emb.ambient_shapes.push_back(s);
    emb.reduced_shapes.push_back(s);
  }
  for (const auto& l : model.layers()) emb.ambient_specs.push_back(l.spec);
  return emb;
}

double EmbeddingReport::max_layer_residual() const {
  double worst = 0.0;
  for (double r : layer_residuals) worst = std::max(worst, r);
  return worst;
}

json EmbeddingReport::to_json() const {
  return {{"layer_residuals", std::vector<double>(layer_residuals.begin() + (layer_residuals.empty() ? 0 : 1),
                                                  layer_residuals.end())},
          {"end_to_end_residual", end_to_end_residual},
          {"parameter_residual", parameter_residual},
          {"left_inverse_residual", left_inverse_residual}};
}

EmbeddingReport verify_embedding(const Model& ambient, const Model& reduced, const SubmodelEmbedding& emb,
                                 std::size_t probes, std::uint64_t seed) {
  if (ambient.depth() != reduced.depth() || emb.depth() != ambient.depth() ||
      emb.latents.size() != ambient.depth() + 1)
    throw DimensionError("embedding depth does not match the models");
  for (std::size_t i = 0; i <= ambient.depth(); ++i) {
    if (!(ambient.latent_shape(i) == emb.ambient_shapes[i]) || !(reduced.latent_shape(i) == emb.reduced_shapes[i]))
      throw DimensionError("latent " + std::to_string(i) + " shape does not match the embedding");
  }
  if (!(ambient.latent_shape(0) == reduced.latent_shape(0)) ||
      !(ambient.latent_shape(ambient.depth()) == reduced.latent_shape(reduced.depth())))
    throw DimensionError("boundary latent spaces must coincide");

  EmbeddingReport report;
  report.layer_residuals.assign(ambient.depth() + 1, 0.0);
  for (std::size_t i = 1; i <= ambient.depth(); ++i) {
    const Layer lifted = emb.beta(i, reduced.layer(i));
    for (const auto& x : gaussian_probes(ambient.latent_shape(i - 1), probes, seed + i)) {
      const Latent lhs = emb.alpha(i, forward_layer(reduced.layer(i), emb.alpha_star(i - 1, x)));
      const Latent rhs = forward_layer(lifted, x);
      report.layer_residuals[i] = std::max(report.layer_residuals[i], max_abs_diff(lhs, rhs));
    }
    report.parameter_residual =
        std::max(report.parameter_residual,
                 max_abs_diff(flatten_params(lifted.params), flatten_params(ambient.layer(i).params)));
  }
  for (const auto& x : gaussian_probes(ambient.latent_shape(0), probes, seed)) {
    report.end_to_end_residual =
        std::max(report.end_to_end_residual, max_abs_diff(ambient.forward(x), reduced.forward(x)));
  }
  for (const auto& e : emb.latents) {
    const Matrix prod = matmul(e.alpha_star, e.alpha);
    report.left_inverse_residual =
        std::max(report.left_inverse_residual, max_abs_diff(prod, Matrix::identity(prod.rows())));
  }
  return report;
}

double gamma_equivariance_residual(const SubmodelEmbedding& emb, std::size_t i, const GroupElement& reduced,
                                   std::size_t probes, std::uint64_t seed) {
  const auto lifted = emb.gamma(i, reduced);
  if (!lifted) throw UnsupportedError("element does not lift through this embedding");
  double worst = 0.0;
  for (const auto& x : gaussian_probes(emb.reduced_shapes.at(i), probes, seed)) {
    const Latent lhs = act(*lifted, emb.alpha(i, x));
    const Latent rhs = emb.alpha(i, act(reduced, x));
    worst = std::max(worst, max_abs_diff(lhs, rhs));
  }
  return worst;
}

std::vector<NeuronStatus> detect_neuron_status(const Model& model, std::size_t layer, double tol) {
  if (layer == 0 || layer >= model.depth())
    throw UnsupportedError("neuron status is defined for hidden layers only");
  if (!model.layer(layer).is_affine()) throw UnsupportedError("neuron status needs an affine layer");
  return neuron_status(model, layer, tol);
}

Model normalize_for_reduction(const Model& model, double tol) {
  std::vector<Layer> layers = model.layers();
  bool changed = true;
  while (changed) {
    changed = false;
    const Model current(layers);
    for (std::size_t i = 1; i < current.depth(); ++i) {
      if (!current.layer(i).is_affine()) continue;
      const Layout lay = layout_of(current, i);
      for (std::size_t u = 0; u < lay.units; ++u) {
        const bool in_zero = max_abs_vec(incoming(layers[i - 1], u)) <= tol;
        const bool out_zero = max_abs_vec(outgoing(layers[i], lay, u)) <= tol;
        if (in_zero == out_zero) continue;
        if (!in_zero) zero_incoming(layers[i - 1], u);
        if (!out_zero) zero_outgoing(layers[i], lay, u);
        changed = true;
      }
    }
  }
  return Model(std::move(layers));
}

Reduction reduce(const Model& model, double tol) {
  if (auto msg = find_half_dead(model, tol))
    throw PreconditionError("model is not normalized for reduction: " + *msg);
  SubmodelEmbedding emb = trivial_embedding(model);
  const std::size_t depth = model.depth();
  for (std::size_t i = 1; i < depth; ++i) {
    auto status = model.layer(i).is_affine() ? neuron_status(model, i, tol) : head_status(model, i, tol);
    emb.latents[i] = build_embedding(model, i, std::move(status), tol);
  }
  std::vector<Layer> layers;
  for (std::size_t i = 1; i <= depth; ++i) {
    Layer layer = model.layer(i);
    const LatentEmbedding& out = emb.latents[i];
    if (i < depth) {
      std::vector<std::size_t> reps;
      for (std::size_t u = 0; u < out.ambient_units(); ++u)
        if (out.unit_class[u] != npos && out.status[u].kind == NeuronStatus::Kind::Active) reps.push_back(u);
      if (layer.is_affine()) {
        AffineParams p;
        const auto& src = layer.affine();
        p.weight = Matrix(reps.size(), src.weight.cols());
        for (std::size_t m = 0; m < reps.size(); ++m) {
          std::copy(src.weight.row(reps[m]).begin(), src.weight.row(reps[m]).end(), p.weight.row(m).begin());
          p.bias.push_back(src.bias[reps[m]]);
        }
        std::get<AffineSpec>(layer.spec).out_dim = reps.size();
        layer.params = std::move(p);
      } else {
        AttentionParams p = layer.attention();
        p.attention.clear();
        p.value.clear();
        for (std::size_t s : reps) {
          p.attention.push_back(layer.attention().attention[s]);
          p.value.push_back(layer.attention().value[s]);
        }
        std::get<AttentionSpec>(layer.spec).heads = reps.size();
        layer.params = std::move(p);
      }
      if (reps.empty()) throw UnsupportedError("layer " + std::to_string(i) + " has no active units left");
    }
    if (i > 1) compose_input(layer, emb.latents[i - 1].alpha, model.latent_shape(i - 1).tokens);
    layers.push_back(std::move(layer));
  }
  Model reduced(std::move(layers));
  emb.reduced_shapes = reduced.latent_shapes();
  return Reduction{std::move(reduced), std::move(emb)};
}

json status_json(const std::vector<NeuronStatus>& status) {
  json out = json::array();
  for (const auto& s : status) {
    json entry = {{"kind", status_name(s.kind)}};
    if (s.kind == NeuronStatus::Kind::Redundant) {
      entry["partner"] = s.partner;
      entry["scale"] = s.scale;
    }
    out.push_back(std::move(entry));
  }
  return out;
}

}  // namespace layeq

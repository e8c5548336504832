#include "layeq/group.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "layeq/error.hpp"

namespace layeq {

using nlohmann::json;
using Variant = GroupElement::Variant;

namespace {

std::vector<std::size_t> iota_perm(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  return p;
}

void check_permutation(const std::vector<std::size_t>& perm) {
  std::vector<bool> seen(perm.size(), false);
  for (std::size_t v : perm) {
    if (v >= perm.size() || seen[v]) throw ConfigError("not a permutation");
    seen[v] = true;
  }
}

std::vector<std::size_t> invert_perm(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

int family(Variant v) {
  switch (v) {
    case Variant::Permutation:
    case Variant::SignedPermutation:
    case Variant::Monomial: return 0;
    case Variant::Dense: return 1;
    case Variant::HeadSym: return 2;
  }
  return 0;
}

bool is_identity_perm(const std::vector<std::size_t>& p) {
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] != i) return false;
  return true;
}

}  // namespace

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Permutation: return "permutation";
    case Variant::SignedPermutation: return "signed_permutation";
    case Variant::Monomial: return "monomial";
    case Variant::Dense: return "dense";
    case Variant::HeadSym: return "head_symmetry";
  }
  return "permutation";
}

GroupElement GroupElement::identity(std::size_t dim) { return permutation(iota_perm(dim)); }

GroupElement GroupElement::permutation(std::vector<std::size_t> perm) {
  check_permutation(perm);
  GroupElement k;
  k.variant_ = Variant::Permutation;
  k.scales_.assign(perm.size(), 1.0);
  k.perm_ = std::move(perm);
  return k;
}

GroupElement GroupElement::signed_permutation(std::vector<std::size_t> perm, std::vector<double> signs) {
  check_permutation(perm);
  if (signs.size() != perm.size()) throw DimensionError("signed permutation: sign count mismatch");
  for (double s : signs)
    if (s != 1.0 && s != -1.0) throw ConfigError("signed permutation signs must be +1 or -1");
  GroupElement k;
  k.variant_ = Variant::SignedPermutation;
  k.perm_ = std::move(perm);
  k.scales_ = std::move(signs);
  return k;
}

GroupElement GroupElement::monomial(std::vector<std::size_t> perm, std::vector<double> scales) {
  check_permutation(perm);
  if (scales.size() != perm.size()) throw DimensionError("monomial: scale count mismatch");
  for (double s : scales)
    if (s == 0.0 || !std::isfinite(s)) throw ConfigError("monomial scales must be finite and nonzero");
  GroupElement k;
  k.variant_ = Variant::Monomial;
  k.perm_ = std::move(perm);
  k.scales_ = std::move(scales);
  return k;
}

GroupElement GroupElement::dense(Matrix m) {
  if (m.rows() != m.cols()) throw DimensionError("dense group element must be square");
  if (reciprocal_condition(m) <= kInvertibilityThreshold)
    throw ConfigError("dense group element is not safely invertible");
  GroupElement k;
  k.variant_ = Variant::Dense;
  k.dense_ = std::move(m);
  return k;
}

GroupElement GroupElement::head_symmetry(std::vector<std::size_t> head_perm, std::vector<Matrix> blocks) {
  check_permutation(head_perm);
  if (blocks.size() != head_perm.size() || blocks.empty())
    throw DimensionError("head symmetry needs one block per head");
  const std::size_t d = blocks.front().rows();
  for (const auto& b : blocks) {
    if (b.rows() != d || b.cols() != d) throw DimensionError("head symmetry blocks must share a square shape");
    if (reciprocal_condition(b) <= kInvertibilityThreshold)
      throw ConfigError("head symmetry block is not safely invertible");
  }
  GroupElement k;
  k.variant_ = Variant::HeadSym;
  k.perm_ = std::move(head_perm);
  k.blocks_ = std::move(blocks);
  return k;
}

GroupElement GroupElement::head_identity(std::size_t heads, std::size_t dim) {
  return head_symmetry(iota_perm(heads), std::vector<Matrix>(heads, Matrix::identity(dim)));
}

std::size_t GroupElement::dim() const noexcept {
  switch (variant_) {
    case Variant::Dense: return dense_.rows();
    case Variant::HeadSym: return perm_.size() * block_dim();
    default: return perm_.size();
  }
}

std::size_t GroupElement::block_dim() const noexcept {
  if (variant_ == Variant::HeadSym) return blocks_.empty() ? 0 : blocks_.front().rows();
  return dim();
}

Matrix GroupElement::to_matrix() const {
  switch (variant_) {
    case Variant::Dense: return dense_;
    case Variant::HeadSym: {
      const std::size_t d = block_dim();
      Matrix m(dim(), dim());
      for (std::size_t s = 0; s < perm_.size(); ++s)
        for (std::size_t a = 0; a < d; ++a)
          for (std::size_t b = 0; b < d; ++b) m(s * d + a, perm_[s] * d + b) = blocks_[s](a, b);
      return m;
    }
    default: {
      Matrix m(dim(), dim());
      for (std::size_t i = 0; i < perm_.size(); ++i) m(i, perm_[i]) = scales_[i];
      return m;
    }
  }
}

bool GroupElement::is_identity(double tol) const {
  switch (variant_) {
    case Variant::Dense: return max_abs_diff(dense_, Matrix::identity(dense_.rows())) <= tol;
    case Variant::HeadSym:
      if (!is_identity_perm(perm_)) return false;
      for (const auto& b : blocks_)
        if (max_abs_diff(b, Matrix::identity(b.rows())) > tol) return false;
      return true;
    default:
      if (!is_identity_perm(perm_)) return false;
      for (double s : scales_)
        if (std::abs(s - 1.0) > tol) return false;
      return true;
  }
}

std::vector<double> GroupElement::encode() const {
  std::vector<double> code{static_cast<double>(family(variant_))};
  for (std::size_t p : perm_) code.push_back(static_cast<double>(p));
  for (double s : scales_) code.push_back(s);
  if (variant_ == Variant::Dense) code.insert(code.end(), dense_.data().begin(), dense_.data().end());
  for (const auto& b : blocks_) code.insert(code.end(), b.data().begin(), b.data().end());
  return code;
}

json GroupElement::to_json() const {
  json out;
  out["variant"] = variant_name(variant_);
  switch (variant_) {
    case Variant::Dense: out["matrix"] = dense_.data(); out["dim"] = dim(); break;
    case Variant::HeadSym: {
      out["perm"] = perm_;
      json blocks = json::array();
      for (const auto& b : blocks_) blocks.push_back(b.data());
      out["matrices"] = std::move(blocks);
      break;
    }
    case Variant::Permutation: out["perm"] = perm_; break;
    case Variant::SignedPermutation: out["perm"] = perm_; out["signs"] = scales_; break;
    case Variant::Monomial: out["perm"] = perm_; out["scales"] = scales_; break;
  }
  return out;
}

GroupElement compose(const GroupElement& k1, const GroupElement& k2) {
  if (family(k1.variant()) != family(k2.variant()))
    throw VariantMismatch("cannot compose " + variant_name(k1.variant()) + " with " +
                          variant_name(k2.variant()));
  if (k1.dim() != k2.dim() || k1.heads() != k2.heads())
    throw VariantMismatch("cannot compose group elements of different dimensions");
  GroupElement out;
  if (k1.variant() == Variant::Dense) return GroupElement::dense(matmul(k1.matrix(), k2.matrix()));
  const auto& p1 = k1.perm();
  const auto& p2 = k2.perm();
  std::vector<std::size_t> perm(p1.size());
  for (std::size_t i = 0; i < p1.size(); ++i) perm[i] = p2[p1[i]];
  if (k1.variant() == Variant::HeadSym) {
    std::vector<Matrix> blocks;
    for (std::size_t s = 0; s < p1.size(); ++s) blocks.push_back(matmul(k1.blocks()[s], k2.blocks()[p1[s]]));
    return GroupElement::head_symmetry(std::move(perm), std::move(blocks));
  }
  std::vector<double> scales(p1.size());
  for (std::size_t i = 0; i < p1.size(); ++i) scales[i] = k1.scales()[i] * k2.scales()[p1[i]];
  const Variant v = std::max(k1.variant(), k2.variant());
  if (v == Variant::Permutation) return GroupElement::permutation(std::move(perm));
  if (v == Variant::SignedPermutation) return GroupElement::signed_permutation(std::move(perm), std::move(scales));
  return GroupElement::monomial(std::move(perm), std::move(scales));
}

GroupElement inverse(const GroupElement& k) {
  if (k.variant() == Variant::Dense) return GroupElement::dense(inverse(k.matrix()));
  const std::vector<std::size_t> q = invert_perm(k.perm());
  if (k.variant() == Variant::HeadSym) {
    std::vector<Matrix> blocks;
    for (std::size_t t = 0; t < q.size(); ++t) blocks.push_back(inverse(k.blocks()[q[t]]));
    return GroupElement::head_symmetry(q, std::move(blocks));
  }
  std::vector<double> scales(q.size());
  for (std::size_t j = 0; j < q.size(); ++j) scales[j] = 1.0 / k.scales()[q[j]];
  switch (k.variant()) {
    case Variant::Permutation: return GroupElement::permutation(q);
    case Variant::SignedPermutation: return GroupElement::signed_permutation(q, std::move(scales));
    default: return GroupElement::monomial(q, std::move(scales));
  }
}

Latent act(const GroupElement& k, const Latent& x) {
  const Shape& shape = x.shape();
  const std::size_t row = shape.heads * shape.dim;
  if (k.variant() == Variant::HeadSym) {
    if (shape.heads != k.heads() || shape.dim != k.block_dim())
      throw DimensionError("head symmetry over " + std::to_string(k.heads()) + " heads of dim " +
                           std::to_string(k.block_dim()) + " cannot act on " + shape.to_string());
  } else if (row != k.dim()) {
    throw DimensionError(variant_name(k.variant()) + " of dim " + std::to_string(k.dim()) +
                         " cannot act on latent " + shape.to_string());
  }
  Latent out(shape);
  const auto& in = x.data();
  auto& dst = out.data();
  for (std::size_t p = 0; p < shape.tokens; ++p) {
    const std::size_t base = p * row;
    switch (k.variant()) {
      case Variant::Dense:
        for (std::size_t i = 0; i < row; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < row; ++j) acc += k.matrix()(i, j) * in[base + j];
          dst[base + i] = acc;
        }
        break;
      case Variant::HeadSym: {
        const std::size_t d = shape.dim;
        for (std::size_t s = 0; s < shape.heads; ++s) {
          const std::size_t src = base + k.perm()[s] * d;
          for (std::size_t a = 0; a < d; ++a) {
            double acc = 0.0;
            for (std::size_t b = 0; b < d; ++b) acc += k.blocks()[s](a, b) * in[src + b];
            dst[base + s * d + a] = acc;
          }
        }
        break;
      }
      default:
        for (std::size_t i = 0; i < row; ++i) dst[base + i] = k.scales()[i] * in[base + k.perm()[i]];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

bool LatentAction::is_trivial() const {
  return is_identity_perm(token_perm) && (!element || element->is_identity());
}

json LatentAction::to_json() const {
  json out;
  out["token_perm"] = token_perm;
  out["element"] = element ? element->to_json() : json(nullptr);
  return out;
}

Latent act(const LatentAction& g, const Latent& x) {
  Latent y = x;
  if (!g.token_perm.empty()) {
    const Shape& shape = x.shape();
    if (g.token_perm.size() != shape.tokens)
      throw DimensionError("token permutation of length " + std::to_string(g.token_perm.size()) +
                           " cannot act on " + shape.to_string());
    const std::size_t row = shape.heads * shape.dim;
    for (std::size_t p = 0; p < shape.tokens; ++p)
      std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(g.token_perm[p] * row), row,
                  y.data().begin() + static_cast<std::ptrdiff_t>(p * row));
  }
  if (g.element) y = act(*g.element, y);
  return y;
}

LatentAction compose(const LatentAction& a, const LatentAction& b) {
  LatentAction out;
  if (a.token_perm.empty()) {
    out.token_perm = b.token_perm;
  } else if (b.token_perm.empty()) {
    out.token_perm = a.token_perm;
  } else {
    if (a.token_perm.size() != b.token_perm.size()) throw VariantMismatch("token permutation lengths differ");
    out.token_perm.resize(a.token_perm.size());
    for (std::size_t p = 0; p < a.token_perm.size(); ++p) out.token_perm[p] = b.token_perm[a.token_perm[p]];
  }
  if (a.element && b.element) {
    out.element = compose(*a.element, *b.element);
  } else {
    out.element = a.element ? a.element : b.element;
  }
  return out;
}

LatentAction inverse(const LatentAction& g) {
  LatentAction out;
  if (!g.token_perm.empty()) out.token_perm = invert_perm(g.token_perm);
  if (g.element) out.element = inverse(*g.element);
  return out;
}

Matrix action_matrix(const LatentAction& g, const Shape& shape) {
  const std::size_t n = shape.size();
  Matrix m(n, n);
  Latent basis(shape);
  for (std::size_t j = 0; j < n; ++j) {
    basis.data()[j] = 1.0;
    const Latent image = act(g, basis);
    for (std::size_t i = 0; i < n; ++i) m(i, j) = image.data()[i];
    basis.data()[j] = 0.0;
  }
  return m;
}

GroupPresentation trivial_group() { return GroupPresentation{"trivial", {}, {}, 1}; }

GroupPresentation swap_group(std::size_t input_dim, std::size_t output_dim) {
  (void)output_dim;
  if (input_dim < 2) throw DimensionError("swap group needs at least two input coordinates");
  std::vector<std::size_t> perm = iota_perm(input_dim);
  std::swap(perm[0], perm[1]);
  GroupGenerator g{"swap", LatentAction::of(GroupElement::permutation(perm)), LatentAction::trivial(), 2};
  return GroupPresentation{"swap", {g}, {{0, 0}}, 2};
}

std::vector<std::size_t> mirror_permutation(std::size_t channels, std::size_t height, std::size_t width) {
  std::vector<std::size_t> perm(channels * height * width);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x)
        perm[(c * height + y) * width + x] = (c * height + y) * width + (width - 1 - x);
  return perm;
}

GroupPresentation mirror_group(std::size_t channels, std::size_t height, std::size_t width,
                               bool output_image, std::size_t output_dim) {
  const auto perm = mirror_permutation(channels, height, width);
  GroupGenerator g{"mirror", LatentAction::of(GroupElement::permutation(perm)), LatentAction::trivial(), 2};
  if (output_image) {
    if (output_dim != perm.size()) throw DimensionError("mirrored output must have the input image size");
    g.on_output = LatentAction::of(GroupElement::permutation(perm));
  }
  return GroupPresentation{"mirror", {g}, {{0, 0}}, 2};
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::uint64_t kIntertwinerSeed = 0x1a7e57ULL;

// sigma(a t) = b sigma(t) for all t.
std::optional<double> forward_scale(const Activation& sigma, double a) {
  if (a == 0.0) return 0.0;
  switch (sigma.kind()) {
    case Activation::Kind::Tanh: return (a == 1.0 || a == -1.0) ? std::optional(a) : std::nullopt;
    case Activation::Kind::ReLU: return a > 0.0 ? std::optional(a) : std::nullopt;
    case Activation::Kind::GELU: return a == 1.0 ? std::optional(a) : std::nullopt;
    case Activation::Kind::Identity: return a;
    case Activation::Kind::Power: return std::pow(a, sigma.exponent());
  }
  return std::nullopt;
}

// a sigma(t) = sigma(b t) for all t.
std::optional<double> backward_scale(const Activation& sigma, double a) {
  if (a == 0.0) return 0.0;
  switch (sigma.kind()) {
    case Activation::Kind::Tanh: return (a == 1.0 || a == -1.0) ? std::optional(a) : std::nullopt;
    case Activation::Kind::ReLU: return a > 0.0 ? std::optional(a) : std::nullopt;
    case Activation::Kind::GELU: return a == 1.0 ? std::optional(a) : std::nullopt;
    case Activation::Kind::Identity: return a;
    case Activation::Kind::Power: {
      const int m = sigma.exponent();
      if (m % 2 == 0 && a < 0.0) return std::nullopt;
      const double root = std::pow(std::abs(a), 1.0 / m);
      return a < 0.0 ? -root : root;
    }
  }
  return std::nullopt;
}

bool at_most_one_nonzero_per_row(const Matrix& a) {
  for (std::size_t r = 0; r < a.rows(); ++r) {
    std::size_t nz = 0;
    for (double v : a.row(r)) nz += v != 0.0 ? 1 : 0;
    if (nz > 1) return false;
  }
  return true;
}

std::optional<Matrix> map_entries(const Matrix& a, const std::function<std::optional<double>(double)>& f) {
  Matrix b(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto v = f(a.data()[i]);
    if (!v) return std::nullopt;
    b.data()[i] = *v;
  }
  return b;
}

Matrix probe_block(std::size_t dim) {
  Rng rng(kIntertwinerSeed + dim);
  return rng.normal_matrix(dim, kIntertwinerProbes, 2.0);
}

// max |lhs_outer(sigma(lhs_inner Y)) - rhs_outer(sigma(rhs_inner Y))| in the
// two orientations used by the two intertwiner forms.
double forward_residual(const Activation& sigma, const Matrix& a, const Matrix& b, const Matrix& y) {
  return max_abs_diff(apply_activation(sigma, matmul(a, y)), matmul(b, apply_activation(sigma, y)));
}

double backward_residual(const Activation& sigma, const Matrix& a, const Matrix& b, const Matrix& y) {
  return max_abs_diff(matmul(a, apply_activation(sigma, y)), apply_activation(sigma, matmul(b, y)));
}

}  // namespace

std::optional<Matrix> is_intertwiner(const Activation& sigma, const Matrix& a) {
  const Matrix y = probe_block(a.cols());
  if (at_most_one_nonzero_per_row(a)) {
    if (auto b = map_entries(a, [&](double v) { return forward_scale(sigma, v); })) {
      if (forward_residual(sigma, a, *b, y) <= kIntertwinerTolerance) return b;
    }
  }
  // General fallback: fit B on the probes, then verify it.
  const Matrix s = apply_activation(sigma, y);
  const Matrix t = apply_activation(sigma, matmul(a, y));
  const Matrix b = least_squares(s.transpose(), t.transpose()).transpose();
  if (forward_residual(sigma, a, b, y) <= kIntertwinerTolerance) return b;
  return std::nullopt;
}

std::optional<Matrix> rectangular_intertwiner(const Activation& sigma, const Matrix& a) {
  if (!at_most_one_nonzero_per_row(a)) {
    if (sigma.kind() == Activation::Kind::Identity) return a;
    return std::nullopt;
  }
  auto b = map_entries(a, [&](double v) { return backward_scale(sigma, v); });
  if (!b) return std::nullopt;
  const Matrix y = probe_block(a.cols());
  if (backward_residual(sigma, a, *b, y) > kIntertwinerTolerance) return std::nullopt;
  return b;
}

// ---------------------------------------------------------------------------

namespace {

// theta' with f(h x; theta) = f(x; theta').
Layer absorb_input(const LatentAction& h, const Layer& layer) {
  Layer out = layer;
  if (layer.is_affine()) {
    // A flattened multi-token latent: recover its layout from the action.
    Shape shape = input_shape(layer.spec);
    if (h.element && h.element->dim() != shape.size() && shape.size() % h.element->dim() == 0) {
      const GroupElement& k = *h.element;
      shape = k.variant() == GroupElement::Variant::HeadSym
                  ? Shape{shape.size() / k.dim(), k.block_dim(), k.heads()}
                  : Shape{shape.size() / k.dim(), k.dim(), 1};
    } else if (!h.token_perm.empty() && h.token_perm.size() != 1 && shape.size() % h.token_perm.size() == 0) {
      shape = Shape{h.token_perm.size(), shape.size() / h.token_perm.size(), 1};
    }
    const Matrix hm = action_matrix(h, shape);
    out.affine().weight = matmul(layer.affine().weight, hm);
    return out;
  }
  const auto& spec = layer.attention_spec();
  auto& p = out.attention();
  if (h.element) {
    const Matrix e = h.element->to_matrix();
    if (e.rows() != spec.in_heads * spec.in_dim)
      throw DimensionError("input action does not match the attention token width");
    p.projection = matmul(e.transpose(), layer.attention().projection);
  }
  if (!is_identity_perm(h.token_perm)) {
    if (!spec.query_token)
      throw UnsupportedError("token permutations permute the outputs of a self-attention layer; "
                             "use the generalized adjunction instead");
    if (h.token_perm.size() != spec.tokens) throw DimensionError("token permutation length mismatch");
    if (p.positional) {
      const Matrix& pe = *layer.attention().positional;
      for (std::size_t t = 0; t < spec.tokens; ++t)
        for (std::size_t c = 0; c < spec.in_dim; ++c) (*p.positional)(h.token_perm[t], c) = pe(t, c);
    }
  }
  return out;
}

}  // namespace

Layer act_on_first_layer(const LatentAction& g, const Layer& layer) {
  return absorb_input(inverse(g), layer);
}

Layer act_on_last_layer(const LatentAction& g, const Layer& layer) {
  Layer out = layer;
  if (layer.is_affine()) {
    const auto& spec = layer.affine_spec();
    if (!is_identity_perm(g.token_perm)) throw DimensionError("an affine output has a single token");
    if (!g.element) return out;
    const Matrix gm = g.element->to_matrix();
    if (spec.apply_activation && g.element->variant() != GroupElement::Variant::Permutation &&
        !is_intertwiner(spec.activation, gm))
      throw UnsupportedError("output action does not commute with the final activation");
    out.affine().weight = matmul(gm, layer.affine().weight);
    out.affine().bias = matvec(gm, layer.affine().bias);
    return out;
  }
  const auto& spec = layer.attention_spec();
  if (spec.heads != 1) throw UnsupportedError("a final attention layer must have a single head");
  if (!is_identity_perm(g.token_perm))
    throw UnsupportedError("token permutations of attention outputs are not absorbable into parameters");
  if (g.element) {
    const Matrix gm = g.element->to_matrix();
    if (gm.rows() != spec.out_dim) throw DimensionError("output action does not match the token width");
    out.attention().value[0] = matmul(layer.attention().value[0], gm.transpose());
  }
  return out;
}

double verify_generalized_adjunction(const LatentAction& g_in, const LatentAction& g_out,
                                     const ParamMap& param_map, const Layer& layer,
                                     const std::vector<Latent>& probes) {
  Layer mapped = layer;
  mapped.params = param_map(layer.params);
  validate_layer(mapped.spec, mapped.params);
  const LatentAction out_inv = inverse(g_out);
  double worst = 0.0;
  for (const auto& x : probes) {
    const Latent lhs = act(out_inv, forward_layer(layer, act(g_in, x)));
    const Latent rhs = forward_layer(mapped, x);
    worst = std::max(worst, max_abs_diff(lhs, rhs));
  }
  return worst;
}

}  // namespace layeq

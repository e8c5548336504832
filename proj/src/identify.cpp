#include "layeq/identify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "layeq/assignment.hpp"
#include "layeq/error.hpp"

namespace layeq {

using nlohmann::json;

namespace {

constexpr double kInfeasible = 1e30;

GroupElement identity_for(const Shape& s, LatentFamily f) {
  if (f == LatentFamily::HeadSym) return GroupElement::head_identity(s.heads, s.dim);
  return GroupElement::identity(s.heads * s.dim);
}

double output_scale(const std::vector<Latent>& ys) {
  double m = 1.0;
  for (const auto& y : ys) m = std::max(m, max_abs(std::span<const double>(y.data())));
  return m;
}

std::vector<Latent> outputs(const Layer& layer, const std::vector<Latent>& xs) {
  std::vector<Latent> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(forward_layer(layer, x));
  return out;
}

std::vector<Latent> pulled_outputs(const Layer& layer, const GroupElement& k_inv, const std::vector<Latent>& xs) {
  std::vector<Latent> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(forward_layer(layer, act(k_inv, x)));
  return out;
}

// Gaussian latents in `shape`.
std::vector<Latent> latent_probes(const Shape& shape, std::size_t count, std::uint64_t seed) {
  return gaussian_probes(shape, count, seed);
}

// Feature vectors whose proportionality decides the monomial match: rows of
// [W K^-1 | b] for affine layers, output series otherwise.
struct Features {
  std::vector<std::vector<double>> a;
  std::vector<std::vector<double>> b;
  bool rows = false;
};

Features affine_features(const Layer& la, const Layer& lb, const Shape& input, const GroupElement& k_inv) {
  const Matrix kmat = action_matrix(LatentAction::of(k_inv), input);
  const Matrix wa = matmul(la.affine().weight, kmat);
  Features f;
  f.rows = true;
  for (std::size_t r = 0; r < wa.rows(); ++r) {
    std::vector<double> ra(wa.row(r).begin(), wa.row(r).end());
    ra.push_back(la.affine().bias[r]);
    std::vector<double> rb(lb.affine().weight.row(r).begin(), lb.affine().weight.row(r).end());
    rb.push_back(lb.affine().bias[r]);
    f.a.push_back(std::move(ra));
    f.b.push_back(std::move(rb));
  }
  return f;
}

Features output_features(const std::vector<Latent>& ya, const std::vector<Latent>& yb) {
  Features f;
  const Shape s = ya.front().shape();
  const std::size_t r = s.heads * s.dim;
  f.a.assign(r, {});
  f.b.assign(r, {});
  for (std::size_t n = 0; n < ya.size(); ++n)
    for (std::size_t p = 0; p < s.tokens; ++p)
      for (std::size_t c = 0; c < r; ++c) {
        f.a[c].push_back(ya[n].data()[p * r + c]);
        f.b[c].push_back(yb[n].data()[p * r + c]);
      }
  return f;
}

double forward_coefficient(const Activation& sigma, double s) {
  switch (sigma.kind()) {
    case Activation::Kind::GELU: return 1.0;
    case Activation::Kind::Power: return std::pow(s, sigma.exponent());
    default: return s;
  }
}

// Best allowed s with fb ~ s fa; nullopt when none.
std::optional<double> best_scale(const std::vector<double>& fa, const std::vector<double>& fb, LatentFamily fam,
                                 bool positive_only) {
  const double aa = dot(fa, fa);
  const double s = aa > 0.0 ? dot(fa, fb) / aa : 0.0;
  switch (fam) {
    case LatentFamily::Permutation: return 1.0;
    case LatentFamily::SignedPermutation: return s < 0.0 ? -1.0 : 1.0;
    default:
      if (aa == 0.0) return 1.0;
      if (s == 0.0 || (positive_only && s < 0.0)) return std::nullopt;
      return s;
  }
}

std::optional<GroupElement> monomial_match(const Features& f, LatentFamily fam, const Activation& sigma) {
  const std::size_t n = f.a.size();
  const bool positive_only = f.rows && sigma.kind() == Activation::Kind::ReLU;
  Matrix cost(n, n);
  std::vector<std::vector<double>> scale(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const auto s = best_scale(f.a[j], f.b[i], fam, positive_only);
      if (!s) {
        cost(i, j) = kInfeasible;
        continue;
      }
      scale[i][j] = *s;
      double acc = 0.0;
      for (std::size_t t = 0; t < f.a[j].size(); ++t) {
        const double d = f.b[i][t] - *s * f.a[j][t];
        acc += d * d;
      }
      cost(i, j) = std::sqrt(acc);
    }
  }
  const auto assign = solve_assignment(cost);
  std::vector<double> scales(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (cost(i, assign[i]) >= kInfeasible) return std::nullopt;
    const double s = scale[i][assign[i]];
    scales[i] = f.rows ? forward_coefficient(sigma, s) : s;
  }
  try {
    switch (fam) {
      case LatentFamily::Permutation: return GroupElement::permutation(assign);
      case LatentFamily::SignedPermutation: return GroupElement::signed_permutation(assign, scales);
      default: return GroupElement::monomial(assign, scales);
    }
  } catch (const ConfigError&) {
    return std::nullopt;
  }
}

// Stacks token rows of all probe outputs into one matrix.
Matrix stacked_rows(const std::vector<Latent>& ys) {
  const Shape s = ys.front().shape();
  const std::size_t r = s.heads * s.dim;
  Matrix m(ys.size() * s.tokens, r);
  for (std::size_t n = 0; n < ys.size(); ++n)
    std::copy(ys[n].data().begin(), ys[n].data().end(), m.data().begin() + static_cast<std::ptrdiff_t>(n * s.tokens * r));
  return m;
}

Matrix stacked_head(const std::vector<Latent>& ys, std::size_t head) {
  const Shape s = ys.front().shape();
  Matrix m(ys.size() * s.tokens, s.dim);
  for (std::size_t n = 0; n < ys.size(); ++n)
    for (std::size_t p = 0; p < s.tokens; ++p)
      for (std::size_t q = 0; q < s.dim; ++q) m(n * s.tokens + p, q) = ys[n].at(p, q, head);
  return m;
}

std::optional<GroupElement> dense_fit(const std::vector<Latent>& ya, const std::vector<Latent>& yb) {
  const Matrix za = stacked_rows(ya);
  const Matrix zb = stacked_rows(yb);
  try {
    return GroupElement::dense(least_squares(za, zb).transpose());
  } catch (const ConfigError&) {
    return std::nullopt;
  }
}

std::optional<GroupElement> head_fit(const std::vector<Latent>& ya, const std::vector<Latent>& yb) {
  const Shape s = ya.front().shape();
  const std::size_t h = s.heads;
  std::vector<Matrix> za, zb;
  for (std::size_t j = 0; j < h; ++j) {
    za.push_back(stacked_head(ya, j));
    zb.push_back(stacked_head(yb, j));
  }
  Matrix cost(h, h);
  std::vector<std::vector<Matrix>> fits(h, std::vector<Matrix>(h));
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < h; ++j) {
      if (max_abs(za[j]) == 0.0 && max_abs(zb[i]) == 0.0) {
        fits[i][j] = Matrix::identity(s.dim);
        cost(i, j) = 0.0;
        continue;
      }
      const Matrix mt = least_squares(za[j], zb[i]);
      fits[i][j] = mt.transpose();
      cost(i, j) = frobenius_norm(matmul(za[j], mt) - zb[i]);
    }
  }
  const auto assign = solve_assignment(cost);
  std::vector<Matrix> blocks;
  for (std::size_t i = 0; i < h; ++i) blocks.push_back(fits[i][assign[i]]);
  try {
    return GroupElement::head_symmetry(assign, std::move(blocks));
  } catch (const ConfigError&) {
    return std::nullopt;
  }
}

std::vector<GroupElement> enumerate(LatentFamily f, std::size_t dim) {
  std::vector<GroupElement> out;
  if (f == LatentFamily::Trivial) {
    out.push_back(GroupElement::identity(dim));
    return out;
  }
  std::vector<std::size_t> perm(dim);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  do {
    if (f == LatentFamily::Permutation) {
      out.push_back(GroupElement::permutation(perm));
      continue;
    }
    for (std::size_t mask = 0; mask < (std::size_t{1} << dim); ++mask) {
      std::vector<double> signs(dim);
      for (std::size_t i = 0; i < dim; ++i) signs[i] = ((mask >> (dim - 1 - i)) & 1U) ? 1.0 : -1.0;
      out.push_back(GroupElement::signed_permutation(perm, std::move(signs)));
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return out;
}

void check_pair(const Model& a, const Model& b, const GroupFamily& family) {
  if (a.depth() != b.depth()) throw DimensionError("models have different depths");
  for (std::size_t i = 0; i <= a.depth(); ++i)
    if (!(a.latent_shape(i) == b.latent_shape(i)))
      throw DimensionError("latent " + std::to_string(i) + " shapes differ between the models");
  if (family.size() != a.depth() + 1) throw DimensionError("group family needs one entry per latent");
  if (family.front() != LatentFamily::Trivial || family.back() != LatentFamily::Trivial)
    throw ConfigError("K_0 and K_L must be trivial");
}

}  // namespace

std::string family_name(LatentFamily f) {
  switch (f) {
    case LatentFamily::Trivial: return "trivial";
    case LatentFamily::Permutation: return "permutation";
    case LatentFamily::SignedPermutation: return "signed_permutation";
    case LatentFamily::Monomial: return "monomial";
    case LatentFamily::Dense: return "dense";
    case LatentFamily::HeadSym: return "head_symmetry";
  }
  return "trivial";
}

bool is_finite(LatentFamily f) {
  return f == LatentFamily::Trivial || f == LatentFamily::Permutation || f == LatentFamily::SignedPermutation;
}

GroupFamily natural_family(const Model& model) {
  GroupFamily out{LatentFamily::Trivial};
  for (std::size_t i = 1; i < model.depth(); ++i) {
    const Layer& l = model.layer(i);
    if (l.is_attention()) {
      out.push_back(LatentFamily::HeadSym);
      continue;
    }
    const auto& spec = l.affine_spec();
    const Activation sigma = spec.apply_activation ? spec.activation : Activation::identity();
    switch (sigma.kind()) {
      case Activation::Kind::Tanh: out.push_back(LatentFamily::SignedPermutation); break;
      case Activation::Kind::GELU: out.push_back(LatentFamily::Permutation); break;
      case Activation::Kind::ReLU:
      case Activation::Kind::Power: out.push_back(LatentFamily::Monomial); break;
      case Activation::Kind::Identity: out.push_back(LatentFamily::Dense); break;
    }
  }
  out.push_back(LatentFamily::Trivial);
  return out;
}

double SymmetrySequence::max_residual() const {
  double m = 0.0;
  for (double r : residuals) m = std::max(m, r);
  return m;
}

json SymmetrySequence::to_json() const {
  json els = json::array();
  for (const auto& e : elements) els.push_back(e.to_json());
  return {{"elements", std::move(els)},
          {"residuals", std::vector<double>(residuals.begin() + (residuals.empty() ? 0 : 1), residuals.end())},
          {"continuous", continuous}};
}

double layer_residual(const Layer& a, const Layer& b, const GroupElement& k_in, const GroupElement& k_out,
                      const std::vector<Latent>& probes) {
  const GroupElement k_inv = inverse(k_in);
  double worst = 0.0;
  for (const auto& x : probes) {
    const Latent lhs = forward_layer(b, x);
    const Latent rhs = act(k_out, forward_layer(a, act(k_inv, x)));
    worst = std::max(worst, max_abs_diff(lhs, rhs));
  }
  return worst;
}

LayerSolve solve_layer(const Layer& a, const Layer& b, const Shape& input, const GroupElement& k_prev,
                       LatentFamily target, const std::vector<Latent>& solve, const std::vector<Latent>& verify,
                       double tol) {
  const GroupElement k_inv = inverse(k_prev);
  const Shape out_shape = output_shape(a.spec);
  std::optional<GroupElement> k;
  switch (target) {
    case LatentFamily::Trivial: k = identity_for(out_shape, target); break;
    case LatentFamily::Permutation:
    case LatentFamily::SignedPermutation:
    case LatentFamily::Monomial: {
      if (a.is_affine()) {
        const auto& spec = a.affine_spec();
        const Activation sigma = spec.apply_activation ? spec.activation : Activation::identity();
        k = monomial_match(affine_features(a, b, input, k_inv), target, sigma);
      } else {
        k = monomial_match(output_features(pulled_outputs(a, k_inv, solve), outputs(b, solve)), target,
                           Activation::identity());
      }
      break;
    }
    case LatentFamily::Dense: k = dense_fit(pulled_outputs(a, k_inv, solve), outputs(b, solve)); break;
    case LatentFamily::HeadSym: k = head_fit(pulled_outputs(a, k_inv, solve), outputs(b, solve)); break;
  }
  LayerSolve result;
  if (!k) {
    result.residual = std::numeric_limits<double>::infinity();
    return result;
  }
  result.residual = layer_residual(a, b, k_prev, *k, verify);
  if (result.residual <= tol * output_scale(outputs(b, verify))) result.element = std::move(k);
  return result;
}

Extraction extract_symmetry_detailed(const Model& a, const Model& b, const GroupFamily& family,
                                     const ExtractOptions& opt) {
  check_pair(a, b, family);
  const std::size_t depth = a.depth();
  const bool data = !opt.inputs.empty();
  std::vector<Latent> in_solve, in_verify;
  if (data) {
    const std::size_t half = std::max<std::size_t>(1, opt.inputs.size() / 2);
    in_solve.assign(opt.inputs.begin(), opt.inputs.begin() + static_cast<std::ptrdiff_t>(half));
    in_verify.assign(opt.inputs.begin() + static_cast<std::ptrdiff_t>(std::min(half, opt.inputs.size() - 1)),
                     opt.inputs.end());
  } else {
    in_solve = gaussian_probes(a.latent_shape(0), opt.probes, opt.seed);
    in_verify = gaussian_probes(a.latent_shape(0), opt.probes, opt.seed + 1);
  }
  if (opt.check_end_to_end) {
    double worst = 0.0, scale = 1.0;
    for (const auto* set : {&in_solve, &in_verify})
      for (const auto& x : *set) {
        const Latent fb = b.forward(x);
        worst = std::max(worst, max_abs_diff(a.forward(x), fb));
        scale = std::max(scale, max_abs(std::span<const double>(fb.data())));
      }
    if (worst > opt.tol * scale)
      throw PreconditionError("end-to-end functions differ on the probes (residual " + std::to_string(worst) + ")");
  }
  // Per-layer input probes.
  std::vector<std::vector<Latent>> solve(depth + 1), verify(depth + 1);
  if (data) {
    for (const auto& x : in_solve) {
      const auto all = b.forward_all(x);
      for (std::size_t i = 0; i < depth; ++i) solve[i].push_back(all[i]);
    }
    for (const auto& x : in_verify) {
      const auto all = b.forward_all(x);
      for (std::size_t i = 0; i < depth; ++i) verify[i].push_back(all[i]);
    }
  } else {
    for (std::size_t i = 0; i < depth; ++i) {
      solve[i] = latent_probes(a.latent_shape(i), opt.probes, opt.seed + 2 * i + 2);
      verify[i] = latent_probes(a.latent_shape(i), opt.probes, opt.seed + 2 * i + 3);
    }
  }

  Extraction out;
  SymmetrySequence& seq = out.partial;
  seq.elements.push_back(identity_for(a.latent_shape(0), family[0]));
  seq.residuals.push_back(0.0);
  for (std::size_t i = 1; i <= depth; ++i) {
    const LayerSolve step = solve_layer(a.layer(i), b.layer(i), a.latent_shape(i - 1), seq.elements.back(),
                                        family[i], solve[i - 1], verify[i - 1], opt.tol);
    if (!step.element) {
      out.failed_layer = i;
      out.failed_residual = step.residual;
      return out;
    }
    if (!is_finite(family[i])) seq.continuous = true;
    seq.elements.push_back(*step.element);
    seq.residuals.push_back(step.residual);
  }
  out.sequence = seq;
  return out;
}

std::optional<SymmetrySequence> extract_symmetry(const Model& a, const Model& b, const GroupFamily& family,
                                                 const ExtractOptions& opt) {
  return extract_symmetry_detailed(a, b, family, opt).sequence;
}

std::size_t family_size(LatentFamily f, std::size_t dim) {
  constexpr std::size_t kMax = std::numeric_limits<std::size_t>::max();
  if (f == LatentFamily::Trivial) return 1;
  if (!is_finite(f)) return kMax;
  std::size_t n = 1;
  for (std::size_t i = 2; i <= dim; ++i) {
    if (n > kMax / i) return kMax;
    n *= i;
  }
  if (f == LatentFamily::SignedPermutation) {
    for (std::size_t i = 0; i < dim; ++i) {
      if (n > kMax / 2) return kMax;
      n *= 2;
    }
  }
  return n;
}

std::vector<SymmetrySequence> brute_force_symmetries(const Model& a, const Model& b, const GroupFamily& family,
                                                     double tol, std::size_t probes, std::uint64_t seed) {
  check_pair(a, b, family);
  const std::size_t depth = a.depth();
  std::vector<std::vector<GroupElement>> candidates(depth + 1);
  for (std::size_t i = 1; i < depth; ++i) {
    if (!is_finite(family[i]))
      throw UnsupportedError("brute force needs finite latent groups; K_" + std::to_string(i) + " is " +
                             family_name(family[i]));
    const Shape s = a.latent_shape(i);
    const std::size_t dim = s.heads * s.dim;
    const std::size_t size = family_size(family[i], dim);
    if (size > kBruteForceCapacity)
      throw CapacityError("K_" + std::to_string(i) + " has " +
                          (size == std::numeric_limits<std::size_t>::max() ? std::string("too many")
                                                                           : std::to_string(size)) +
                          " elements, above the brute-force limit of " + std::to_string(kBruteForceCapacity));
  }
  for (std::size_t i = 1; i < depth; ++i) {
    const Shape s = a.latent_shape(i);
    candidates[i] = enumerate(family[i], s.heads * s.dim);
  }
  candidates[depth].push_back(identity_for(a.latent_shape(depth), family[depth]));

  std::vector<std::vector<Latent>> xs(depth + 1);
  std::vector<double> thresholds(depth + 1, 0.0);
  for (std::size_t i = 1; i <= depth; ++i) {
    xs[i] = latent_probes(a.latent_shape(i - 1), probes, seed + 2 * i);
    auto more = latent_probes(a.latent_shape(i - 1), probes, seed + 2 * i + 1);
    xs[i].insert(xs[i].end(), more.begin(), more.end());
    thresholds[i] = tol * output_scale(outputs(b.layer(i), xs[i]));
  }

  std::vector<SymmetrySequence> found;
  SymmetrySequence current;
  current.elements.push_back(identity_for(a.latent_shape(0), family[0]));
  current.residuals.push_back(0.0);
  auto dfs = [&](auto&& self, std::size_t i) -> void {
    if (i > depth) {
      found.push_back(current);
      return;
    }
    for (const auto& k : candidates[i]) {
      const double r = layer_residual(a.layer(i), b.layer(i), current.elements.back(), k, xs[i]);
      if (r > thresholds[i]) continue;
      current.elements.push_back(k);
      current.residuals.push_back(r);
      self(self, i + 1);
      current.elements.pop_back();
      current.residuals.pop_back();
    }
  };
  dfs(dfs, 1);
  return found;
}

std::string status_name(Certificate::Status s) {
  switch (s) {
    case Certificate::Status::Certified: return "certified";
    case Certificate::Status::NotCertified: return "not_certified";
    case Certificate::Status::ContinuousUnchecked: return "fitted_uniqueness_unchecked";
  }
  return "not_certified";
}

json Certificate::to_json() const {
  json fam = json::array();
  for (auto f : family) fam.push_back(family_name(f));
  json syms = json::array();
  for (const auto& s : symmetries) syms.push_back(s.to_json());
  json out = {{"status", status_name(status)},
              {"holds", holds()},
              {"reason", reason},
              {"family", std::move(fam)},
              {"symmetries", std::move(syms)},
              {"tolerances", {{"tol", options.tol}, {"reduction_tol", options.reduction_tol}}},
              {"normalize", options.normalize},
              {"probes", options.probes},
              {"seed", options.seed}};
  if (reduction) {
    out["embedding"] = reduction->embedding.to_json();
    std::vector<std::size_t> widths;
    for (const auto& s : reduction->model.latent_shapes()) widths.push_back(s.size());
    out["reduced_widths"] = widths;
  } else {
    out["embedding"] = nullptr;
  }
  return out;
}

Certificate certify_weak_identifiability(const Model& model, const CertifyOptions& opt) {
  Certificate cert;
  cert.options = opt;
  const Model prepared = opt.normalize ? normalize_for_reduction(model) : model;
  try {
    cert.reduction = reduce(prepared, opt.reduction_tol);
  } catch (const PreconditionError& e) {
    cert.status = Certificate::Status::NotCertified;
    cert.reason = e.what();
    return cert;
  }
  const Model& reduced = cert.reduction->model;
  cert.family = natural_family(reduced);
  for (auto f : cert.family) {
    if (!is_finite(f)) {
      cert.status = Certificate::Status::ContinuousUnchecked;
      cert.reason = "latent group " + family_name(f) + " is continuous; uniqueness is only checked for finite groups";
      return cert;
    }
  }
  cert.symmetries = brute_force_symmetries(reduced, reduced, cert.family, opt.tol, opt.probes, opt.seed);
  if (cert.symmetries.size() == 1) {
    cert.status = Certificate::Status::Certified;
    cert.reason = "the identity is the only self-symmetry of the reduced model";
  } else {
    cert.status = Certificate::Status::NotCertified;
    cert.reason = std::to_string(cert.symmetries.size()) + " self-symmetries found";
  }
  return cert;
}

}  // namespace layeq

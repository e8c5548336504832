#include "layeq/analyze.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <tuple>

#include "layeq/assignment.hpp"
#include "layeq/error.hpp"
#include "layeq/io.hpp"

namespace layeq {

std::string category_name(FilterCategoryKind k) {
  switch (k) {
    case FilterCategoryKind::MirroredCopy: return "mirrored_copy";
    case FilterCategoryKind::MirroredNegatedCopy: return "mirrored_negated_copy";
    case FilterCategoryKind::NegatedCopy: return "negated_copy";
    case FilterCategoryKind::Symmetric: return "symmetric";
    case FilterCategoryKind::AntiSymmetric: return "anti_symmetric";
    case FilterCategoryKind::Other: return "other";
  }
  return "?";
}

std::vector<double> normalized_filter(const std::vector<double>& v) {
  if (v.empty()) return {};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - mean;
  const double n = norm2(out);
  if (!(n > 0.0)) return {};
  for (double& x : out) x /= n;
  return out;
}

namespace {

double normalized_distance(const std::vector<double>& a, const std::vector<double>& b, double sign) {
  if (a.empty() || b.empty()) return 2.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - sign * b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

std::vector<double> gather(const std::vector<double>& x, const std::vector<std::size_t>& perm) {
  std::vector<double> out(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out[i] = x[perm[i]];
  return out;
}

}  // namespace

double filter_distance(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("filters of different sizes");
  return normalized_distance(normalized_filter(a), normalized_filter(b), 1.0);
}

std::vector<FilterCategory> categorize_filters(const Matrix& w1, const ImageShape& image, double tol) {
  if (w1.cols() != image.size())
    throw DimensionError("filters have " + std::to_string(w1.cols()) + " weights, image shape needs " +
                         std::to_string(image.size()));
  const auto perm = mirror_permutation(image.channels, image.height, image.width);
  const std::size_t f = w1.rows();
  std::vector<std::vector<double>> n(f), m(f);
  for (std::size_t i = 0; i < f; ++i) {
    n[i] = normalized_filter(std::vector<double>(w1.row(i).begin(), w1.row(i).end()));
    if (!n[i].empty()) m[i] = gather(n[i], perm);
  }

  using K = FilterCategoryKind;
  struct Candidate {
    double d;
    K kind;
    std::size_t i, j;
  };
  std::vector<Candidate> cands;
  std::vector<double> best(f, 2.0);
  auto add = [&](double d, K kind, std::size_t i, std::size_t j) {
    best[i] = std::min(best[i], d);
    best[j] = std::min(best[j], d);
    cands.push_back({d, kind, i, j});
  };
  for (std::size_t i = 0; i < f; ++i) {
    if (n[i].empty()) continue;
    add(normalized_distance(n[i], m[i], 1.0), K::Symmetric, i, i);
    add(normalized_distance(n[i], m[i], -1.0), K::AntiSymmetric, i, i);
    for (std::size_t j = i + 1; j < f; ++j) {
      if (n[j].empty()) continue;
      add(normalized_distance(n[i], m[j], 1.0), K::MirroredCopy, i, j);
      add(normalized_distance(n[i], m[j], -1.0), K::MirroredNegatedCopy, i, j);
      add(normalized_distance(n[i], n[j], -1.0), K::NegatedCopy, i, j);
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    return std::tie(a.d, a.kind, a.i, a.j) < std::tie(b.d, b.kind, b.i, b.j);
  });

  std::vector<FilterCategory> out(f);
  std::vector<bool> used(f, false);
  for (const auto& c : cands) {
    if (c.d > tol) break;
    if (used[c.i] || used[c.j]) continue;
    used[c.i] = used[c.j] = true;
    out[c.i] = {c.kind, c.i == c.j ? std::nullopt : std::optional<std::size_t>(c.j), c.d};
    out[c.j] = {c.kind, c.i == c.j ? std::nullopt : std::optional<std::size_t>(c.i), c.d};
  }
  for (std::size_t i = 0; i < f; ++i)
    if (!used[i]) out[i] = {K::Other, std::nullopt, best[i]};
  return out;
}

std::string categories_csv(const std::vector<FilterCategory>& cats) {
  std::string out = "filter_index,category,partner,distance\n";
  char buf[64];
  for (std::size_t i = 0; i < cats.size(); ++i) {
    out += std::to_string(i) + "," + category_name(cats[i].kind) + ",";
    if (cats[i].partner) out += std::to_string(*cats[i].partner);
    std::snprintf(buf, sizeof buf, ",%.9g\n", cats[i].match_distance);
    out += buf;
  }
  return out;
}

double categorized_fraction(const std::vector<FilterCategory>& cats) {
  if (cats.empty()) return 0.0;
  const auto n = std::count_if(cats.begin(), cats.end(),
                               [](const FilterCategory& c) { return c.kind != FilterCategoryKind::Other; });
  return static_cast<double>(n) / static_cast<double>(cats.size());
}

// ---------------------------------------------------------------------------

std::vector<BypassPair> detect_bypass_pairs(const Model& model, std::size_t layer, double tol) {
  const Layer& l = model.layer(layer);
  if (!l.is_affine()) throw PreconditionError("layer " + std::to_string(layer) + " is not affine");
  const auto& spec = l.affine_spec();
  if (!spec.apply_activation || !spec.activation.has_bypass_relation())
    throw UnsupportedError("activation " + spec.activation.name() + " of layer " + std::to_string(layer) +
                           " does not satisfy sigma(x) - sigma(-x) = x");
  if (layer >= model.depth() || !model.layer(layer + 1).is_affine())
    throw PreconditionError("bypass detection needs an affine layer after layer " + std::to_string(layer));
  const auto& w = l.affine();
  const auto& next = model.layer(layer + 1).affine().weight;
  const std::size_t d = spec.out_dim;

  std::vector<std::vector<double>> rows(d), cols(d);
  for (std::size_t i = 0; i < d; ++i) {
    rows[i].assign(w.weight.row(i).begin(), w.weight.row(i).end());
    rows[i].push_back(w.bias[i]);
    cols[i] = next.col(i);
  }
  auto opposite = [](const std::vector<double>& a, const std::vector<double>& b) {
    const double scale = std::max(norm2(a), norm2(b));
    if (!(scale > 0.0)) return 2.0;
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] + b[k]) * (a[k] + b[k]);
    return std::sqrt(s) / scale;
  };
  std::vector<BypassPair> cands;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j) {
      const double rd = opposite(rows[i], rows[j]), cd = opposite(cols[i], cols[j]);
      if (rd <= tol && cd <= tol) cands.push_back({i, j, rd, cd});
    }
  std::sort(cands.begin(), cands.end(), [](const BypassPair& a, const BypassPair& b) {
    return std::make_tuple(std::max(a.row_distance, a.column_distance), a.first, a.second) <
           std::make_tuple(std::max(b.row_distance, b.column_distance), b.first, b.second);
  });
  std::vector<bool> used(d, false);
  std::vector<BypassPair> out;
  for (const auto& c : cands) {
    if (used[c.first] || used[c.second]) continue;
    used[c.first] = used[c.second] = true;
    out.push_back(c);
  }
  return out;
}

// ---------------------------------------------------------------------------

nlohmann::json HeadPermutation::to_json() const {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& v : assignment) a.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
  return {{"assignment", a}, {"residuals", residuals}, {"bijective", bijective}};
}

HeadPermutation detect_head_permutation(const Model& model, std::size_t layer, const LatentAction& g, double tol,
                                        const std::vector<Latent>& probes) {
  const Layer& l = model.layer(layer);
  if (!l.is_attention()) throw PreconditionError("layer " + std::to_string(layer) + " is not an attention layer");
  if (probes.empty()) throw PreconditionError("head matching needs at least one probe");
  const auto& spec = l.attention_spec();
  const std::size_t heads = spec.heads, n = spec.tokens;
  std::vector<std::size_t> pi = g.token_perm;
  if (pi.empty())
    for (std::size_t p = 0; p < n; ++p) pi.push_back(p);
  if (pi.size() != n) throw DimensionError("token permutation does not match the layer's token count");

  Matrix cost(heads, heads);
  for (const auto& x : probes) {
    const AttentionTrace tx = trace_attention(spec, l.attention(), x);
    const AttentionTrace tg = trace_attention(spec, l.attention(), act(g, x));
    for (std::size_t j = 0; j < heads; ++j)
      for (std::size_t k = 0; k < heads; ++k) {
        const Matrix& a = tx.pattern[j];
        const Matrix& b = tg.pattern[k];
        double r = cost(j, k);
        for (std::size_t q = 0; q < b.rows(); ++q) {
          const std::size_t qq = spec.query_token ? q : pi[q];
          for (std::size_t p = 0; p < n; ++p) r = std::max(r, std::abs(b(q, p) - a(qq, pi[p])));
        }
        cost(j, k) = r;
      }
  }
  const auto match = solve_assignment(cost);
  HeadPermutation hp;
  hp.bijective = true;
  for (std::size_t j = 0; j < heads; ++j) {
    const double r = cost(j, match[j]);
    hp.residuals.push_back(r);
    if (r <= tol) {
      hp.assignment.emplace_back(match[j]);
    } else {
      hp.assignment.emplace_back(std::nullopt);
      hp.bijective = false;
    }
  }
  return hp;
}

HeadPermutation detect_head_permutation(const Model& model, std::size_t layer, const LatentAction& g, double tol,
                                        std::size_t probes, std::uint64_t seed) {
  return detect_head_permutation(model, layer, g, tol, gaussian_probes(model.latent_shape(layer - 1), probes, seed));
}

EncodingCheck check_positional_encoding_equivariance(const Matrix& pe, const std::vector<std::size_t>& token_perm,
                                                     const GroupElement& g, double tol) {
  if (token_perm.size() != pe.rows()) throw DimensionError("token permutation does not match the encoding rows");
  if (g.dim() != pe.cols()) throw DimensionError("token action does not match the encoding width");
  EncodingCheck out{0.0, tol};
  for (std::size_t p = 0; p < pe.rows(); ++p) {
    const Latent gp = act(g, Latent::vector(std::vector<double>(pe.row(p).begin(), pe.row(p).end())));
    const auto target = pe.row(token_perm[p]);
    for (std::size_t q = 0; q < pe.cols(); ++q) out.residual = std::max(out.residual, std::abs(target[q] - gp.data()[q]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace {

using Rgb = std::array<unsigned char, 3>;

struct Canvas {
  std::size_t width, height;
  std::vector<unsigned char> px;

  Canvas(std::size_t w, std::size_t h) : width(w), height(h), px(w * h * 3, 0) {}
  void set(std::size_t x, std::size_t y, Rgb c) {
    std::copy(c.begin(), c.end(), px.begin() + static_cast<std::ptrdiff_t>((y * width + x) * 3));
  }
  std::string ppm() const {
    std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    out.append(px.begin(), px.end());
    return out;
  }
};

unsigned char level(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

Rgb category_colour(FilterCategoryKind k) {
  switch (k) {
    case FilterCategoryKind::MirroredCopy: return {255, 64, 160};
    case FilterCategoryKind::MirroredNegatedCopy: return {64, 160, 255};
    case FilterCategoryKind::NegatedCopy: return {255, 200, 0};
    case FilterCategoryKind::Symmetric: return {0, 200, 80};
    case FilterCategoryKind::AntiSymmetric: return {160, 64, 255};
    case FilterCategoryKind::Other: return {64, 64, 64};
  }
  return {0, 0, 0};
}

}  // namespace

std::string filter_grid_ppm(const Matrix& w1, const ImageShape& image, const std::vector<FilterCategory>& cats,
                            std::size_t scale) {
  if (w1.cols() != image.size()) throw DimensionError("filters do not match the image shape");
  if (image.channels != 1 && image.channels != 3) throw DimensionError("filters must have 1 or 3 channels");
  if (cats.size() != w1.rows()) throw DimensionError("one category per filter is required");
  if (scale == 0) throw ConfigError("scale must be positive");
  const std::size_t f = w1.rows();
  const std::size_t cols = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(f)))));
  const std::size_t rows = (f + cols - 1) / cols;
  const std::size_t cw = image.width * scale + 2, ch = image.height * scale + 2;
  Canvas canvas(cols * cw, std::max<std::size_t>(rows, 1) * ch);
  const std::size_t plane = image.height * image.width;
  for (std::size_t i = 0; i < f; ++i) {
    const auto row = w1.row(i);
    const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
    const double range = *hi - *lo;
    const std::size_t ox = (i % cols) * cw, oy = (i / cols) * ch;
    const Rgb frame = category_colour(cats[i].kind);
    for (std::size_t x = 0; x < cw; ++x) {
      canvas.set(ox + x, oy, frame);
      canvas.set(ox + x, oy + ch - 1, frame);
    }
    for (std::size_t y = 0; y < ch; ++y) {
      canvas.set(ox, oy + y, frame);
      canvas.set(ox + cw - 1, oy + y, frame);
    }
    for (std::size_t y = 0; y < image.height; ++y)
      for (std::size_t x = 0; x < image.width; ++x) {
        Rgb c;
        for (std::size_t k = 0; k < 3; ++k) {
          const std::size_t chan = image.channels == 3 ? k : 0;
          const double v = row[chan * plane + y * image.width + x];
          c[k] = level(range > 0.0 ? (v - *lo) / range : 0.5);
        }
        for (std::size_t dy = 0; dy < scale; ++dy)
          for (std::size_t dx = 0; dx < scale; ++dx) canvas.set(ox + 1 + x * scale + dx, oy + 1 + y * scale + dy, c);
      }
  }
  return canvas.ppm();
}

void render_filter_grid(const Matrix& w1, const ImageShape& image, const std::vector<FilterCategory>& cats,
                        const std::string& path, std::size_t scale) {
  write_file_atomic(path, filter_grid_ppm(w1, image, cats, scale));
}

std::string attention_maps_ppm(const Model& model, const std::vector<Latent>& inputs, std::size_t scale) {
  std::size_t layer = 0;
  for (std::size_t i = 1; i <= model.depth() && layer == 0; ++i)
    if (model.layer(i).is_attention()) layer = i;
  if (layer == 0) throw PreconditionError("model has no attention layer");
  if (scale == 0) throw ConfigError("scale must be positive");
  const auto& spec = model.layer(layer).attention_spec();
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(spec.tokens))));
  if (side * side != spec.tokens) throw DimensionError("attention maps need a square token grid");
  const std::size_t cell = side * scale + 1;
  Canvas canvas(spec.heads * cell + 1, inputs.size() * cell + 1);
  for (std::size_t r = 0; r < inputs.size(); ++r) {
    Latent h = inputs[r];
    for (std::size_t i = 1; i < layer; ++i) h = forward_layer(model.layer(i), h);
    const AttentionTrace tr = trace_attention(spec, model.layer(layer).attention(), h);
    for (std::size_t j = 0; j < spec.heads; ++j) {
      const Matrix& pat = tr.pattern[j];
      std::vector<double> mean(spec.tokens, 0.0);
      for (std::size_t q = 0; q < pat.rows(); ++q)
        for (std::size_t p = 0; p < spec.tokens; ++p) mean[p] += pat(q, p) / static_cast<double>(pat.rows());
      const double mx = *std::max_element(mean.begin(), mean.end());
      for (std::size_t p = 0; p < spec.tokens; ++p) {
        const unsigned char v = level(mx > 0.0 ? mean[p] / mx : 0.0);
        for (std::size_t dy = 0; dy < scale; ++dy)
          for (std::size_t dx = 0; dx < scale; ++dx)
            canvas.set(1 + j * cell + (p % side) * scale + dx, 1 + r * cell + (p / side) * scale + dy, {v, v, v});
      }
    }
  }
  return canvas.ppm();
}

void render_attention_maps(const Model& model, const std::vector<Latent>& inputs, const std::string& path,
                           std::size_t scale) {
  write_file_atomic(path, attention_maps_ppm(model, inputs, scale));
}

}  // namespace layeq

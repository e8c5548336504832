#include <doctest.h>

#include <cmath>

#include "layeq/analyze.hpp"
#include "layeq/error.hpp"
#include "layeq/train.hpp"

#include "planted.hpp"

using namespace layeq;
using K = FilterCategoryKind;

namespace {

const ImageShape kImage{1, 4, 4};

void put_row(Matrix& m, std::size_t r, const std::vector<double>& v) { std::copy(v.begin(), v.end(), m.row(r).begin()); }

std::vector<double> negate(std::vector<double> v) {
  for (double& x : v) x = -x;
  return v;
}

// Rows: mirrored pair, mirrored negated pair, symmetric, anti-symmetric, negated pair.
Matrix planted_filters(std::uint64_t seed) {
  Rng rng(seed);
  Matrix w(8, 16);
  const auto a = rng.normal_vector(16), b = rng.normal_vector(16), c = rng.normal_vector(16), d = rng.normal_vector(16),
             e = rng.normal_vector(16);
  put_row(w, 0, a);
  put_row(w, 1, testkit::mirrored(a, 4, 4));
  put_row(w, 2, b);
  put_row(w, 3, negate(testkit::mirrored(b, 4, 4)));
  std::vector<double> sym(16), anti(16);
  const auto mc = testkit::mirrored(c, 4, 4), md = testkit::mirrored(d, 4, 4);
  for (std::size_t i = 0; i < 16; ++i) {
    sym[i] = c[i] + mc[i];
    anti[i] = d[i] - md[i];
  }
  put_row(w, 4, sym);
  put_row(w, 5, anti);
  put_row(w, 6, e);
  put_row(w, 7, negate(e));
  return w;
}

const std::vector<K> kPlantedKinds{K::MirroredCopy, K::MirroredCopy, K::MirroredNegatedCopy, K::MirroredNegatedCopy,
                                   K::Symmetric,    K::AntiSymmetric, K::NegatedCopy,        K::NegatedCopy};

std::size_t ppm_header_size(const std::string& ppm) {
  std::size_t pos = 0;
  for (int lines = 0; lines < 3; ++lines) pos = ppm.find('\n', pos) + 1;
  return pos;
}

}  // namespace

TEST_CASE("planted filters are categorized exactly") {
  const Matrix w = planted_filters(1);
  const auto cats = categorize_filters(w, kImage, kPlantedFilterTolerance);
  REQUIRE(cats.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(cats[i].kind == kPlantedKinds[i]);
    CHECK(cats[i].match_distance <= 1e-12);
  }
  CHECK(cats[0].partner == 1u);
  CHECK(cats[1].partner == 0u);
  CHECK(cats[3].partner == 2u);
  CHECK(cats[6].partner == 7u);
  CHECK_FALSE(cats[4].partner.has_value());
  CHECK(categorized_fraction(cats) == 1.0);
}

TEST_CASE("testkit mirror model filters follow their planted kinds") {
  const auto planted = testkit::planted_mirror_mlp(4, 4, 8, 3, 2, 5);
  const auto cats = categorize_filters(planted.model.layer(1).affine().weight, kImage, kPlantedFilterTolerance);
  std::size_t row = 0;
  for (auto kind : planted.kinds) {
    switch (kind) {
      case testkit::FilterKind::MirrorPair:
        CHECK(cats[row].kind == K::MirroredCopy);
        CHECK(cats[row].partner == row + 1);
        row += 2;
        break;
      case testkit::FilterKind::NegatedMirrorPair:
        CHECK(cats[row].kind == K::MirroredNegatedCopy);
        row += 2;
        break;
      case testkit::FilterKind::Symmetric:
        CHECK(cats[row++].kind == K::Symmetric);
        break;
      case testkit::FilterKind::AntiSymmetric:
        CHECK(cats[row++].kind == K::AntiSymmetric);
        break;
    }
  }
}

TEST_CASE("categories follow a reordering of the filters") {
  const Matrix w = planted_filters(2);
  const auto base = categorize_filters(w, kImage, kPlantedFilterTolerance);
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const auto perm = rng.permutation(8);  // new row r is old row perm[r]
    std::vector<std::size_t> where(8);
    Matrix shuffled(8, 16);
    for (std::size_t r = 0; r < 8; ++r) {
      std::copy(w.row(perm[r]).begin(), w.row(perm[r]).end(), shuffled.row(r).begin());
      where[perm[r]] = r;
    }
    const auto cats = categorize_filters(shuffled, kImage, kPlantedFilterTolerance);
    for (std::size_t r = 0; r < 8; ++r) {
      const auto& old = base[perm[r]];
      CHECK(cats[r].kind == old.kind);
      if (old.partner)
        CHECK(cats[r].partner == where[*old.partner]);
      else
        CHECK_FALSE(cats[r].partner.has_value());
    }
  }
}

TEST_CASE("small noise leaves categories unchanged") {
  for (double tol : {kPlantedFilterTolerance, kTrainedFilterTolerance}) {
    const Matrix w = planted_filters(4);
    Rng rng(5);
    Matrix noisy = w;
    const double eta = tol / 10;
    // Per-row noise of norm eta / 4 relative to the row norm.
    for (std::size_t r = 0; r < 8; ++r) {
      const double scale = norm2(w.row(r));
      const auto z = rng.normal_vector(16);
      const double zn = norm2(z);
      for (std::size_t k = 0; k < 16; ++k) noisy(r, k) += eta * scale * z[k] / zn / 4;
    }
    const auto cats = categorize_filters(noisy, kImage, tol);
    for (std::size_t i = 0; i < 8; ++i) CHECK(cats[i].kind == kPlantedKinds[i]);
  }
}

TEST_CASE("generic and degenerate filters are Other") {
  Rng rng(6);
  Matrix w = rng.normal_matrix(6, 16);
  for (std::size_t k = 0; k < 16; ++k) w(5, k) = 0.0;
  const auto cats = categorize_filters(w, kImage, kPlantedFilterTolerance);
  for (const auto& c : cats) CHECK(c.kind == K::Other);
  CHECK(cats[5].match_distance == 2.0);
  CHECK(normalized_filter(std::vector<double>(16, 3.0)).empty());
  CHECK_THROWS_AS(categorize_filters(w, ImageShape{1, 3, 4}, 0.1), DimensionError);
  CHECK(filter_distance(std::vector<double>{1, 2, 3}, std::vector<double>{2, 4, 6}) <= 1e-15);
  CHECK(filter_distance(std::vector<double>{1, 2, 3}, std::vector<double>{3, 2, 1}) == doctest::Approx(2.0));
}

TEST_CASE("category CSV") {
  const auto cats = categorize_filters(planted_filters(7), kImage, kPlantedFilterTolerance);
  const std::string csv = categories_csv(cats);
  CHECK(csv.rfind("filter_index,category,partner,distance\n0,mirrored_copy,1,", 0) == 0);
  CHECK(csv.find("\n4,symmetric,,") != std::string::npos);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 9);
}

TEST_CASE("bypass pairs") {
  Rng rng(8);
  const std::vector<std::size_t> widths{5, 6, 3};
  Model m = random_mlp(widths, Activation::gelu(), rng);
  auto p1 = m.layer(1).affine();
  auto p2 = m.layer(2).affine();
  for (std::size_t k = 0; k < 5; ++k) p1.weight(4, k) = -p1.weight(1, k);
  p1.bias[4] = -p1.bias[1];
  for (std::size_t r = 0; r < 3; ++r) p2.weight(r, 4) = -p2.weight(r, 1);
  m.set_params(1, p1);
  m.set_params(2, p2);
  const auto pairs = detect_bypass_pairs(m, 1, 1e-6);
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].first == 1);
  CHECK(pairs[0].second == 4);
  CHECK(pairs[0].row_distance == 0.0);

  // The pair passes x linearly: c sigma(z) - c sigma(-z) = c z.
  const double z = 0.37;
  CHECK(Activation::gelu()(z) - Activation::gelu()(-z) == doctest::Approx(z).epsilon(1e-14));

  CHECK(detect_bypass_pairs(random_mlp(widths, Activation::relu(), rng), 1, 1e-6).empty());
  CHECK_THROWS_AS(detect_bypass_pairs(random_mlp(widths, Activation::tanh(), rng), 1, 1e-6), UnsupportedError);
  CHECK_THROWS_AS(detect_bypass_pairs(m, 2, 1e-6), UnsupportedError);
}

namespace {

struct HeadFixture {
  Model model;
  LatentAction g;
};

HeadFixture head_fixture(const std::vector<std::size_t>& swap, std::uint64_t seed, bool query) {
  const LatentAction g = token_mirror_action(1, 8, 8, 2);
  const Layer att = testkit::planted_head_layer(16, 4, swap, g.element->to_matrix(), seed, query);
  return {Model({att}), g};
}

}  // namespace

TEST_CASE("head permutation of planted attention layers") {
  for (bool query : {true, false}) {
    const auto two = head_fixture({1, 0}, 9, query);
    auto hp = detect_head_permutation(two.model, 1, two.g, 1e-8);
    CHECK(hp.bijective);
    CHECK(hp.assignment == std::vector<std::optional<std::size_t>>{1, 0});
    for (double r : hp.residuals) CHECK(r < 1e-12);

    const auto one = head_fixture({0}, 10, query);
    hp = detect_head_permutation(one.model, 1, one.g, 1e-8);
    CHECK(hp.assignment == std::vector<std::optional<std::size_t>>{0});

    const auto eight = head_fixture({4, 1, 2, 3, 0, 5, 6, 7}, 11, query);
    hp = detect_head_permutation(eight.model, 1, eight.g, 1e-8);
    CHECK(hp.bijective);
    for (std::size_t j = 0; j < 8; ++j) CHECK(hp.assignment[j] == (j == 0 ? 4u : j == 4 ? 0u : j));
  }
}

TEST_CASE("heads without a mirrored partner are reported unmatched") {
  Rng rng(12);
  const Layer att = random_attention(AttentionSpec{16, 4, 4, 3, 1, false, true}, rng, 2.0);
  const Model m({att});
  const auto hp = detect_head_permutation(m, 1, token_mirror_action(1, 8, 8, 2), 1e-8);
  CHECK_FALSE(hp.bijective);
  std::size_t unmatched = 0;
  for (std::size_t j = 0; j < 3; ++j)
    if (!hp.assignment[j]) {
      ++unmatched;
      CHECK(hp.residuals[j] > 1e-8);
    }
  CHECK(unmatched > 0);
  CHECK(hp.to_json()["assignment"].size() == 3);
}

TEST_CASE("positional encoding equivariance") {
  Rng rng(13);
  const LatentAction g = token_mirror_action(1, 8, 8, 2);
  const auto& pi = g.token_perm;
  const GroupElement& k = *g.element;

  Matrix constant(16, 4);
  for (std::size_t p = 0; p < 16; ++p)
    for (std::size_t q = 0; q < 4; ++q) constant(p, q) = 0.1 * static_cast<double>(q);
  CHECK(check_positional_encoding_equivariance(constant, pi, GroupElement::identity(4), 1e-12).residual == 0.0);

  // pe[pi(p)] = k pe[p] on every orbit of the token involution.
  Matrix planted(16, 4);
  for (std::size_t p = 0; p < 16; ++p) {
    if (pi[p] < p) continue;
    const auto v = rng.normal_vector(4);
    const auto kv = act(k, Latent::vector(v)).data();
    for (std::size_t q = 0; q < 4; ++q) {
      planted(p, q) = v[q];
      planted(pi[p], q) = kv[q];
    }
  }
  const auto ok = check_positional_encoding_equivariance(planted, pi, k, 1e-12);
  CHECK(ok.residual == 0.0);
  CHECK(ok.passed());

  const Matrix random = rng.normal_matrix(16, 4);
  const auto bad = check_positional_encoding_equivariance(random, pi, k, 1e-2);
  CHECK_FALSE(bad.passed());
  CHECK(bad.residual > 0.5);
}

TEST_CASE("filter grid layout") {
  Matrix w(4, 16);
  const Matrix p = planted_filters(14);
  for (std::size_t r = 0; r < 3; ++r) std::copy(p.row(r).begin(), p.row(r).end(), w.row(r).begin());
  const auto cats = categorize_filters(w, kImage, kPlantedFilterTolerance);
  CHECK(cats[3].kind == K::Other);
  const std::string ppm = filter_grid_ppm(w, kImage, cats, 3);
  const std::size_t cell = 4 * 3 + 2;
  CHECK(ppm.rfind("P6\n" + std::to_string(2 * cell) + " " + std::to_string(2 * cell) + "\n255\n", 0) == 0);
  const std::size_t header = ppm_header_size(ppm);
  CHECK(ppm.size() == header + 3 * (2 * cell) * (2 * cell));
  // The zero filter (bottom right) is mid-gray inside its frame.
  for (std::size_t y = cell + 1; y < 2 * cell - 1; ++y)
    for (std::size_t x = cell + 1; x < 2 * cell - 1; ++x)
      CHECK(static_cast<unsigned char>(ppm[header + 3 * (y * 2 * cell + x)]) == 128);
  // Each filter spans the full range.
  unsigned char lo = 255, hi = 0;
  for (std::size_t y = 1; y < cell - 1; ++y)
    for (std::size_t x = 1; x < cell - 1; ++x) {
      const auto v = static_cast<unsigned char>(ppm[header + 3 * (y * 2 * cell + x)]);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  CHECK(lo == 0);
  CHECK(hi == 255);
  CHECK_THROWS_AS(filter_grid_ppm(w, kImage, {}, 3), DimensionError);
}

TEST_CASE("uniform attention renders uniform squares") {
  AttentionParams p;
  p.attention.assign(2, Matrix(4, 4));
  Rng rng(15);
  p.value = {rng.normal_matrix(4, 2), rng.normal_matrix(4, 2)};
  p.projection = Matrix::identity(4);
  p.query = rng.normal_matrix(1, 4);
  const Model m({Layer{AttentionSpec{16, 4, 2, 2, 1, false, true}, p}});
  const auto inputs = gaussian_probes(Shape{16, 4, 1}, 3, 16);
  const std::string ppm = attention_maps_ppm(m, inputs, 2);
  const std::size_t cell = 4 * 2 + 1, w = 2 * cell + 1, h = 3 * cell + 1;
  CHECK(ppm.rfind("P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n", 0) == 0);
  const std::size_t header = ppm_header_size(ppm);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
          const std::size_t px = 1 + j * cell + x, py = 1 + r * cell + y;
          CHECK(static_cast<unsigned char>(ppm[header + 3 * (py * w + px)]) == 255);
        }
  CHECK_THROWS_AS(attention_maps_ppm(random_mlp(std::vector<std::size_t>{2, 2}, Activation::tanh(), rng), inputs),
                  PreconditionError);
}

TEST_CASE("renderers write through the filesystem") {
  const std::string path = "/nonexistent-dir/x.ppm";
  const Matrix w = planted_filters(16);
  const auto cats = categorize_filters(w, kImage, kPlantedFilterTolerance);
  CHECK_THROWS_AS(render_filter_grid(w, kImage, cats, path), IoError);
}

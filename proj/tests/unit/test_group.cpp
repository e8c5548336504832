#include <doctest.h>

#include <cmath>

#include "layeq/checkpoint.hpp"
#include "layeq/error.hpp"
#include "layeq/group.hpp"
#include "layeq/model.hpp"

#include "planted.hpp"

using namespace layeq;
using V = GroupElement::Variant;

namespace {

const std::string kFixtures = LAYEQ_FIXTURE_DIR;

GroupElement random_element(V v, std::size_t dim, Rng& rng, std::size_t heads = 2) {
  switch (v) {
    case V::Permutation:
      return GroupElement::permutation(rng.permutation(dim));
    case V::SignedPermutation: {
      std::vector<double> s(dim);
      for (double& x : s) x = rng.sign();
      return GroupElement::signed_permutation(rng.permutation(dim), s);
    }
    case V::Monomial: {
      std::vector<double> s(dim);
      for (double& x : s) x = rng.sign() * rng.uniform(0.5, 2.0);
      return GroupElement::monomial(rng.permutation(dim), s);
    }
    case V::Dense:
      return GroupElement::dense(Matrix::identity(dim) + 0.3 * rng.normal_matrix(dim, dim));
    case V::HeadSym: {
      std::vector<Matrix> blocks;
      for (std::size_t s = 0; s < heads; ++s) blocks.push_back(Matrix::identity(dim) + 0.3 * rng.normal_matrix(dim, dim));
      return GroupElement::head_symmetry(rng.permutation(heads), blocks);
    }
  }
  return GroupElement::identity(dim);
}

Shape shape_for(const GroupElement& k, std::size_t tokens) {
  return k.variant() == V::HeadSym ? Shape{tokens, k.block_dim(), k.heads()} : Shape{tokens, k.dim(), 1};
}

Latent random_latent(Shape s, Rng& rng) { return Latent(s, rng.normal_vector(s.size())); }

}  // namespace

TEST_CASE("act on worked values") {
  const Latent x = Latent::vector({3.0, 5.0});
  CHECK(act(GroupElement::identity(2), x) == x);
  // gather form: out[0] = -x[1], out[1] = x[0]
  const auto k = GroupElement::signed_permutation({1, 0}, {-1, 1});
  CHECK(act(k, x) == Latent::vector({-5.0, 3.0}));
  CHECK_THROWS_AS(act(k, Latent::vector({1, 2, 3})), DimensionError);
  CHECK_THROWS_AS(GroupElement::signed_permutation({0, 1}, {1, 0.5}), ConfigError);
  CHECK_THROWS_AS(GroupElement::monomial({0, 1}, {1, 0}), ConfigError);
  CHECK_THROWS_AS(GroupElement::dense(Matrix(2, 2)), ConfigError);
}

TEST_CASE("group axioms for every variant") {
  Rng rng(31);
  for (V v : {V::Permutation, V::SignedPermutation, V::Monomial, V::Dense, V::HeadSym}) {
    for (int t = 0; t < 25; ++t) {
      const std::size_t dim = 1 + rng.index(4);
      const auto a = random_element(v, dim, rng);
      const auto b = random_element(v, dim, rng);
      const auto c = random_element(v, dim, rng);
      const Latent x = random_latent(shape_for(a, 1 + rng.index(3)), rng);
      const double scale = 1e-12 * std::max(1.0, max_abs(Matrix(1, x.size(), x.data())));
      CHECK(max_abs_diff(act(compose(a, b), x), act(a, act(b, x))) <= 1e2 * scale);
      CHECK(max_abs_diff(act(compose(compose(a, b), c), x), act(compose(a, compose(b, c)), x)) <= 1e2 * scale);
      CHECK(max_abs_diff(act(a, act(inverse(a), x)), x) <= 1e2 * scale);
      CHECK(max_abs_diff(act(compose(inverse(a), a), x), x) <= 1e2 * scale);
      const auto e = v == V::HeadSym ? GroupElement::head_identity(a.heads(), a.block_dim())
                     : v == V::Dense ? GroupElement::dense(Matrix::identity(a.dim()))
                                     : GroupElement::identity(a.dim());
      CHECK(max_abs_diff(act(compose(e, a), x), act(a, x)) == 0.0);
    }
  }
}

TEST_CASE("compose across families is rejected") {
  Rng rng(32);
  CHECK_THROWS_AS(compose(random_element(V::Dense, 3, rng), GroupElement::identity(3)), VariantMismatch);
  CHECK_THROWS_AS(compose(GroupElement::identity(2), GroupElement::identity(3)), VariantMismatch);
}

TEST_CASE("swap is an involution") {
  const auto s = GroupElement::permutation({1, 0});
  CHECK(compose(s, s).is_identity());
  const auto g = swap_group(2, 1);
  REQUIRE(g.generators.size() == 1);
  const auto& gen = g.generators[0];
  CHECK(compose(gen.on_input, gen.on_input).is_trivial());
  CHECK(gen.order == 2);
}

TEST_CASE("monomial composition matches the act-twice oracle") {
  Rng rng(33);
  for (int t = 0; t < 50; ++t) {
    const std::size_t d = 1 + rng.index(6);
    const auto a = random_element(V::Monomial, d, rng);
    const auto b = random_element(V::SignedPermutation, d, rng);
    const auto c = compose(a, b);
    CHECK(c.variant() == V::Monomial);
    const Latent x = random_latent(Shape::vector(d), rng);
    CHECK(max_abs_diff(act(c, x), act(a, act(b, x))) <= 1e-12);
    // Matrix of the composite is the product of matrices.
    CHECK(max_abs_diff(c.to_matrix(), matmul(a.to_matrix(), b.to_matrix())) <= 1e-12);
  }
}

TEST_CASE("head symmetry permutes head slices then applies blocks") {
  Rng rng(34);
  const auto k = random_element(V::HeadSym, 2, rng, 3);
  const Latent x = random_latent({4, 2, 3}, rng);
  const Latent y = act(k, x);
  for (std::size_t s = 0; s < 3; ++s) {
    const Matrix expected = matmul(x.head_matrix(k.perm()[s]), k.blocks()[s].transpose());
    CHECK(max_abs_diff(y.head_matrix(s), expected) <= 1e-12);
  }
  CHECK_THROWS_AS(act(k, random_latent({4, 2, 2}, rng)), DimensionError);
}

TEST_CASE("latent actions compose with token permutations") {
  Rng rng(35);
  for (int t = 0; t < 30; ++t) {
    const std::size_t n = 1 + rng.index(5), d = 1 + rng.index(3);
    const LatentAction a{rng.permutation(n), random_element(V::Monomial, d, rng)};
    const LatentAction b{rng.permutation(n), random_element(V::SignedPermutation, d, rng)};
    const Latent x = random_latent({n, d, 1}, rng);
    CHECK(max_abs_diff(act(compose(a, b), x), act(a, act(b, x))) <= 1e-12);
    CHECK(max_abs_diff(act(inverse(a), act(a, x)), x) <= 1e-12);
    const Matrix m = action_matrix(a, x.shape());
    const Matrix y = matmul(m, Matrix(x.size(), 1, x.data()));
    CHECK(max_abs_diff(Latent(x.shape(), y.data()), act(a, x)) <= 1e-12);
  }
}

TEST_CASE("mirror permutation reverses columns") {
  const auto p = mirror_permutation(2, 2, 3);
  const std::vector<std::size_t> expected{2, 1, 0, 5, 4, 3, 8, 7, 6, 11, 10, 9};
  CHECK(p == expected);
  const auto g = mirror_group(1, 4, 4, true, 16);
  const auto& m = g.generators.at(0);
  CHECK(compose(m.on_input, m.on_input).is_trivial());
  CHECK(compose(m.on_output, m.on_output).is_trivial());
}

TEST_CASE("intertwiner worked examples") {
  const Matrix flip = Matrix::from_rows({{-1, 0}, {0, 1}});
  const auto b = is_intertwiner(Activation::tanh(), flip);
  REQUIRE(b.has_value());
  CHECK(*b == flip);
  const Matrix diag = Matrix::from_rows({{2, 0}, {0, 3}});
  const auto r = is_intertwiner(Activation::relu(), diag);
  REQUIRE(r.has_value());
  CHECK(*r == diag);
  CHECK_FALSE(is_intertwiner(Activation::gelu(), -1.0 * Matrix::identity(2)).has_value());
  CHECK_FALSE(is_intertwiner(Activation::relu(), flip).has_value());
  CHECK_FALSE(is_intertwiner(Activation::tanh(), diag).has_value());
  CHECK_FALSE(is_intertwiner(Activation::tanh(), Matrix::from_rows({{1, 1}, {0, 1}})).has_value());
  CHECK(is_intertwiner(Activation::identity(), Matrix::from_rows({{1, 1}, {0, 1}})).has_value());
}

TEST_CASE("intertwiners accept the monomial families of each activation") {
  Rng rng(36);
  for (int t = 0; t < 20; ++t) {
    const std::size_t d = 1 + rng.index(5);
    const auto sp = random_element(V::SignedPermutation, d, rng);
    CHECK(is_intertwiner(Activation::tanh(), sp.to_matrix()).has_value());
    const auto p = random_element(V::Permutation, d, rng);
    CHECK(is_intertwiner(Activation::gelu(), p.to_matrix()).has_value());

    std::vector<double> pos(d);
    for (double& x : pos) x = rng.uniform(0.2, 3.0);
    const auto relu_k = GroupElement::monomial(rng.permutation(d), pos);
    const auto rb = is_intertwiner(Activation::relu(), relu_k.to_matrix());
    REQUIRE(rb.has_value());
    CHECK(max_abs_diff(*rb, relu_k.to_matrix()) <= 1e-12);

    const auto mono = random_element(V::Monomial, d, rng);
    for (int m : {2, 3}) {
      const auto pb = is_intertwiner(Activation::power(m), mono.to_matrix());
      REQUIRE(pb.has_value());
      // Witness carries the scales raised to m.
      for (std::size_t i = 0; i < d; ++i)
        CHECK(std::abs((*pb)(i, mono.perm()[i]) - std::pow(mono.scales()[i], m)) <= 1e-12);
    }
  }
}

TEST_CASE("rectangular intertwiners") {
  // Duplicating a coordinate with a positive scale is rectangular for ReLU.
  const Matrix a = Matrix::from_rows({{1}, {2}});
  const auto b = rectangular_intertwiner(Activation::relu(), a);
  REQUIRE(b.has_value());
  CHECK(*b == a);
  const auto t = rectangular_intertwiner(Activation::tanh(), Matrix::from_rows({{1}, {-1}}));
  REQUIRE(t.has_value());
  CHECK_FALSE(rectangular_intertwiner(Activation::tanh(), Matrix::from_rows({{1}, {2}})).has_value());
  const auto p = rectangular_intertwiner(Activation::power(3), Matrix::from_rows({{8}, {-1}}));
  REQUIRE(p.has_value());
  CHECK(std::abs((*p)(0, 0) - 2.0) <= 1e-12);
  CHECK(std::abs((*p)(1, 0) + 1.0) <= 1e-12);
}

TEST_CASE("identity actions leave layers unchanged") {
  Rng rng(37);
  const Layer l = random_affine(3, 4, Activation::tanh(), true, rng);
  CHECK(act_on_first_layer(LatentAction::trivial(), l) == l);
  CHECK(act_on_last_layer(LatentAction::trivial(), l) == l);
  const auto probes = gaussian_probes(Shape::vector(3), 10, 1);
  const ParamMap same = [](const LayerParams& p) { return p; };
  CHECK(verify_generalized_adjunction(LatentAction::trivial(), LatentAction::trivial(), same, l, probes) == 0.0);
}

TEST_CASE("appendix B first layer is a fixed point of the swap") {
  const Model prime = load_checkpoint(kFixtures + "/appendix_b_theta0_prime.json");
  const auto swap = swap_group(2, 1).generators.at(0).on_input;
  CHECK(act_on_first_layer(inverse(swap), prime.layer(1)) == prime.layer(1));
  CHECK(act_on_first_layer(swap, prime.layer(1)) == prime.layer(1));
  const Model orig = load_checkpoint(kFixtures + "/appendix_b_theta0.json");
  CHECK_FALSE(act_on_first_layer(swap, orig.layer(1)) == orig.layer(1));
}

TEST_CASE("adjunction on random first and last layers") {
  Rng rng(38);
  for (int t = 0; t < 100; ++t) {
    const std::size_t din = 1 + rng.index(5), dout = 1 + rng.index(5);
    const V v = t % 3 == 0 ? V::Dense : (t % 3 == 1 ? V::Monomial : V::Permutation);
    const auto g_in = LatentAction::of(random_element(v, din, rng));
    const Layer first = random_affine(din, dout, Activation::tanh(), true, rng);
    const Layer moved = act_on_first_layer(inverse(g_in), first);
    const auto x = rng.normal_vector(din);
    const Latent xin(Shape::vector(din), x);
    CHECK(max_abs_diff(forward_layer(first, act(g_in, xin)), forward_layer(moved, xin)) <= 1e-10);

    const auto g_out = LatentAction::of(random_element(v, dout, rng));
    const Layer last = random_affine(din, dout, Activation::tanh(), false, rng);
    const Layer shifted = act_on_last_layer(g_out, last);
    CHECK(max_abs_diff(act(g_out, forward_layer(last, xin)), forward_layer(shifted, xin)) <= 1e-10);
  }
}

TEST_CASE("last layer with an activation needs an intertwiner") {
  Rng rng(39);
  const Layer l = random_affine(3, 2, Activation::gelu(), true, rng);
  CHECK_THROWS(act_on_last_layer(LatentAction::of(GroupElement::signed_permutation({1, 0}, {-1, 1})), l));
  const Layer moved = act_on_last_layer(LatentAction::of(GroupElement::permutation({1, 0})), l);
  const Latent x(Shape::vector(3), rng.normal_vector(3));
  CHECK(max_abs_diff(act(GroupElement::permutation({1, 0}), forward_layer(l, x)), forward_layer(moved, x)) <=
        1e-12);
}

TEST_CASE("first-layer action on attention projection and encodings") {
  Rng rng(40);
  AttentionSpec spec{4, 3, 2, 2, 1, true, true};
  const Layer l = random_attention(spec, rng);
  const LatentAction g{rng.permutation(4), random_element(V::Dense, 3, rng)};
  const Layer moved = act_on_first_layer(inverse(g), l);
  for (const auto& x : gaussian_probes(Shape{4, 3, 1}, 20, 2))
    CHECK(max_abs_diff(forward_layer(l, act(g, x)), forward_layer(moved, x)) <= 1e-10);

  AttentionSpec plain{4, 3, 2, 2, 1, false, false};
  const Layer p = random_attention(plain, rng);
  CHECK_THROWS_AS(act_on_first_layer(LatentAction{rng.permutation(4), std::nullopt}, p), UnsupportedError);
}

TEST_CASE("generalized adjunction for token permutations") {
  Rng rng(41);
  const ParamMap same = [](const LayerParams& p) { return p; };
  double worst_plain = 0.0, best_pe = 1e30;
  for (int t = 0; t < 50; ++t) {
    AttentionSpec spec{5, 3, 3, 2, 1, false, false};
    const Layer plain = random_attention(spec, rng);
    spec.positional_encoding = true;
    const Layer pe = random_attention(spec, rng);
    std::vector<std::size_t> perm = rng.permutation(5);
    while (perm == std::vector<std::size_t>{0, 1, 2, 3, 4}) perm = rng.permutation(5);
    const LatentAction g{perm, std::nullopt};
    const auto probes = gaussian_probes(Shape{5, 3, 1}, 8, 100 + t);
    worst_plain = std::max(worst_plain, verify_generalized_adjunction(g, g, same, plain, probes));
    best_pe = std::min(best_pe, verify_generalized_adjunction(g, g, same, pe, probes));
  }
  CHECK(worst_plain < 1e-10);
  CHECK(best_pe > 1e-2);
}

TEST_CASE("planted head swap satisfies adjunction with a head symmetry") {
  const Matrix conj = Matrix::from_rows({{0, 1}, {1, 0}});
  const Layer l = testkit::planted_head_layer(4, 2, {1, 0}, conj, 5, false);
  const LatentAction g_in = LatentAction::of(GroupElement::dense(conj));
  const LatentAction g_out = LatentAction::of(GroupElement::head_symmetry({1, 0}, {Matrix::identity(2), Matrix::identity(2)}));
  const ParamMap same = [](const LayerParams& p) { return p; };
  CHECK(verify_generalized_adjunction(g_in, g_out, same, l, gaussian_probes(Shape{4, 2, 1}, 20, 3)) <= 1e-10);
}

TEST_CASE("element json carries variant and data") {
  const auto k = GroupElement::signed_permutation({1, 0}, {-1, 1});
  const auto j = k.to_json();
  CHECK(j["variant"] == "signed_permutation");
  CHECK(j["perm"] == nlohmann::json::array({1, 0}));
  CHECK(j["signs"] == nlohmann::json::array({-1.0, 1.0}));
}

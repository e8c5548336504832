#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "layeq/checkpoint.hpp"
#include "layeq/error.hpp"
#include "layeq/group.hpp"
#include "layeq/io.hpp"
#include "layeq/model.hpp"

using namespace layeq;

namespace {

const std::string kFixtures = LAYEQ_FIXTURE_DIR;

Model appendix_b(bool prime) {
  return load_checkpoint(kFixtures + (prime ? "/appendix_b_theta0_prime.json" : "/appendix_b_theta0.json"));
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("layeq_" + name)).string();
}

}  // namespace

TEST_CASE("appendix B layer and model values") {
  const Model m = appendix_b(false);
  const Latent x = Latent::vector({0.5, 0.5});
  const Latent h = forward_layer(m.layer(1), x);
  CHECK(h.data()[0] == std::tanh(1.0));
  CHECK(h.data()[1] == std::tanh(2.5));
  CHECK(std::abs(m.forward(x).data()[0] - (-2.0 * std::tanh(1.0))) <= 1e-12);
  CHECK(std::abs(m.forward(x).data()[0] - (-1.5232)) <= 1e-4);
}

TEST_CASE("appendix B parameters agree as functions") {
  const Model a = appendix_b(false);
  const Model b = appendix_b(true);
  for (const auto& x : gaussian_probes(Shape::vector(2), 100, 7))
    CHECK(max_abs_diff(a.forward(x), b.forward(x)) <= 1e-12);
}

TEST_CASE("fixture loads to the exact matrices") {
  const Model a = appendix_b(false);
  CHECK(a.layer(1).affine().weight == Matrix::from_rows({{1, 1}, {2, 3}}));
  CHECK(a.layer(2).affine().weight == Matrix::from_rows({{-2, 0}}));
  CHECK(a.layer(1).affine().bias == std::vector<double>{0, 0});
  CHECK_FALSE(a.layer(2).affine_spec().apply_activation);
  const Model b = appendix_b(true);
  CHECK(b.layer(1).affine().weight == Matrix::from_rows({{1, 1}, {0, 0}}));
}

TEST_CASE("identity model returns its input") {
  AffineParams p{Matrix::identity(3), {0, 0, 0}};
  const Model m({Layer{AffineSpec{3, 3, Activation::identity(), false}, p}});
  const Latent x = Latent::vector({1.5, -2, 0.25});
  CHECK(m.forward(x) == x);
}

TEST_CASE("affine layer matches a per-entry loop") {
  Rng rng(21);
  for (int t = 0; t < 20; ++t) {
    const std::size_t in = 1 + rng.index(6), out = 1 + rng.index(6);
    const Layer l = random_affine(in, out, Activation::gelu(), true, rng, 0.5);
    const Latent x(Shape::vector(in), rng.normal_vector(in));
    const Latent y = forward_layer(l, x);
    for (std::size_t r = 0; r < out; ++r) {
      double s = l.affine().bias[r];
      for (std::size_t c = 0; c < in; ++c) s += l.affine().weight(r, c) * x.data()[c];
      CHECK(std::abs(y.data()[r] - Activation::gelu()(s)) <= 1e-12);
    }
  }
}

TEST_CASE("zero attention matrix averages value tokens") {
  Rng rng(22);
  AttentionSpec spec{5, 3, 2, 2, 1, false, false};
  Layer l = random_attention(spec, rng);
  for (auto& a : l.attention().attention) a = Matrix(3, 3);
  const Latent x(Shape{5, 3, 1}, rng.normal_vector(15));
  const Latent y = forward_layer(l, x);
  const Matrix xbar = matmul(x.token_matrix(), l.attention().projection);
  for (std::size_t j = 0; j < 2; ++j) {
    const Matrix v = matmul(xbar, l.attention().value[j]);
    for (std::size_t q = 0; q < 2; ++q) {
      double mean = 0.0;
      for (std::size_t p = 0; p < 5; ++p) mean += v(p, q) / 5.0;
      for (std::size_t p = 0; p < 5; ++p) CHECK(std::abs(y.at(p, q, j) - mean) <= 1e-12);
    }
  }
}

TEST_CASE("forward equals manual composition") {
  Rng rng(23);
  for (int t = 0; t < 30; ++t) {
    const std::size_t depth = 1 + rng.index(5);
    std::vector<std::size_t> widths;
    for (std::size_t i = 0; i <= depth; ++i) widths.push_back(1 + rng.index(6));
    const Model m = random_mlp(widths, Activation::tanh(), rng);
    const Latent x(m.latent_shape(0), rng.normal_vector(widths[0]));
    Latent h = x;
    for (std::size_t i = 1; i <= depth; ++i) h = forward_layer(m.layer(i), h);
    CHECK(m.forward(x) == h);
  }
}

TEST_CASE("attention commutes with token permutations without positional encodings") {
  Rng rng(24);
  for (int t = 0; t < 30; ++t) {
    AttentionSpec spec{2 + rng.index(5), 1 + rng.index(4), 1 + rng.index(4), 1 + rng.index(3), 1 + rng.index(2),
                       false, false};
    const Layer l = random_attention(spec, rng);
    const Latent x(input_shape(spec), rng.normal_vector(input_shape(spec).size()));
    LatentAction g;
    g.token_perm = rng.permutation(spec.tokens);
    const Latent lhs = forward_layer(l, act(g, x));
    const Latent rhs = act(g, forward_layer(l, x));
    CHECK(max_abs_diff(lhs, rhs) <= 1e-10);
  }
}

TEST_CASE("model rejects broken shape chains") {
  Rng rng(25);
  std::vector<Layer> layers{random_affine(3, 4, Activation::tanh(), true, rng),
                            random_affine(5, 2, Activation::tanh(), false, rng)};
  CHECK_THROWS_AS(Model{layers}, DimensionError);
}

TEST_CASE("checkpoint round trip is bit exact") {
  Rng rng(26);
  std::vector<Layer> layers;
  AttentionSpec spec{4, 3, 3, 2, 1, true, true};
  layers.push_back(random_attention(spec, rng));
  layers.push_back(random_affine(6, 5, Activation::power(3), true, rng));
  layers.push_back(random_affine(5, 2, Activation::gelu(), false, rng));
  const Model m(std::move(layers));
  const std::string path = temp_path("roundtrip.json");
  save_checkpoint(m, path);
  const Model back = load_checkpoint(path);
  CHECK(back == m);
  CHECK(model_hash(back) == model_hash(m));
  CHECK(serialize_model(back) == serialize_model(m));
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint parse errors name the field") {
  const std::string good = read_file(kFixtures + "/appendix_b_theta0.json");
  auto doc = nlohmann::json::parse(good);
  doc["latent_shapes"][1] = {1, 3, 1};
  try {
    model_from_json(doc);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.field() == "$.latent_shapes[1]");
  }
  doc = nlohmann::json::parse(good);
  doc["layers"][0]["params"]["W"] = {1.0, 2.0, 3.0};
  try {
    model_from_json(doc);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.field() == "$.layers[0].params.W");
  }
  CHECK_THROWS_AS(parse_model("{not json"), ParseError);
  CHECK_THROWS_AS(load_checkpoint(temp_path("missing.json")), IoError);
}

TEST_CASE("flatten and unflatten parameters") {
  Rng rng(27);
  AttentionSpec spec{3, 2, 2, 2, 1, true, false};
  const Layer l = random_attention(spec, rng);
  auto v = flatten_params(l.params);
  LayerParams copy = l.params;
  for (double& x : v) x *= 2.0;
  unflatten_params(copy, v);
  CHECK(std::get<AttentionParams>(copy).projection == 2.0 * l.attention().projection);
  CHECK_THROWS_AS(unflatten_params(copy, std::vector<double>(3)), DimensionError);
}

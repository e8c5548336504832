#include <doctest.h>

#include <cmath>
#include <numeric>

#include "layeq/audit.hpp"
#include "layeq/checkpoint.hpp"
#include "layeq/error.hpp"
#include "layeq/train.hpp"

using namespace layeq;

namespace {

std::vector<std::size_t> range(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

std::vector<double> mirror_flat(const std::vector<double>& img, std::size_t h, std::size_t w) {
  std::vector<double> out(img.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out[y * w + x] = img[y * w + (w - 1 - x)];
  return out;
}

// 1 x 2 images (a, b) paired with (b, a).
Dataset two_pixel_data(std::size_t pairs, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.height = 1;
  d.width = 2;
  d.classes = 1;
  d.mirror_map = {1, 0};
  for (std::size_t i = 0; i < pairs; ++i) {
    const double a = rng.normal(), b = rng.normal();
    d.inputs.push_back(Latent::vector({a, b}));
    d.inputs.push_back(Latent::vector({b, a}));
    d.labels.insert(d.labels.end(), {0, 0});
  }
  return d;
}

TrainConfig small_config(Task task, Activation sigma, std::size_t classes = 0) {
  TrainConfig c;
  c.task = task;
  c.widths = {16, 6, 5, task == Task::Autoencode ? 16 : classes};
  c.activations = {sigma, Activation::tanh()};
  c.dataset = {DatasetKind::Blobs, 8, 4, 3};
  c.seed = 21;
  return c;
}

}  // namespace

TEST_CASE("synthetic datasets pair every image with its mirror") {
  for (auto kind : {DatasetKind::Stripes, DatasetKind::Blobs, DatasetKind::LabeledPairs}) {
    const Dataset d = make_synthetic_mirror_dataset(kind, 40, 6, 4);
    REQUIRE(d.size() == 40);
    std::vector<double> mean(36, 0.0);
    for (std::size_t i = 0; i < d.size(); i += 2) {
      CHECK(d.inputs[i + 1].data() == mirror_flat(d.inputs[i].data(), 6, 6));
      CHECK(d.labels[i] == d.labels[i + 1]);
      CHECK(d.labels[i] < d.classes);
    }
    for (const auto& x : d.inputs)
      for (std::size_t k = 0; k < 36; ++k) mean[k] += x.data()[k] / 40.0;
    CHECK(max_abs_diff(mean, mirror_flat(mean, 6, 6)) <= 1e-12);
    for (std::size_t i = 0; i < 36; ++i) CHECK(d.mirror_map[d.mirror_map[i]] == i);
  }
  const Dataset two = make_synthetic_mirror_dataset(DatasetKind::Stripes, 2, 4, 9);
  CHECK(two.inputs[1].data() == mirror_flat(two.inputs[0].data(), 4, 4));
  CHECK_THROWS_AS(make_synthetic_mirror_dataset(DatasetKind::Blobs, 4, 5, 1), ConfigError);
  CHECK_THROWS_AS(make_synthetic_mirror_dataset(DatasetKind::Blobs, 3, 4, 1), ConfigError);
  CHECK(make_synthetic_mirror_dataset(DatasetKind::Blobs, 6, 4, 11).inputs ==
        make_synthetic_mirror_dataset(DatasetKind::Blobs, 6, 4, 11).inputs);
}

TEST_CASE("token grids mirror like the images they come from") {
  const Dataset flat = make_synthetic_mirror_dataset(DatasetKind::Blobs, 6, 8, 2);
  const Dataset tok = tokenize(flat, 2);
  CHECK(tok.inputs[0].shape() == Shape{16, 4, 1});
  const LatentAction g = tok.input_action();
  for (std::size_t i = 0; i < flat.size(); ++i) {
    CHECK(tok.image(i) == flat.inputs[i]);
    CHECK(act(g, tok.inputs[i]) == tok.inputs[i ^ 1]);
  }
  // Token (0, 0) holds pixels (0,0), (0,1), (1,0), (1,1).
  const auto& img = flat.inputs[0].data();
  CHECK(tok.inputs[0].at(0, 1, 0) == img[1]);
  CHECK(tok.inputs[0].at(0, 2, 0) == img[8]);
  CHECK(tok.inputs[0].at(5, 3, 0) == img[3 * 8 + 3]);
  CHECK_THROWS_AS(tokenize(flat, 3), ConfigError);
}

TEST_CASE("equivariance loss") {
  const Dataset data = make_synthetic_mirror_dataset(DatasetKind::Stripes, 4, 4, 5);
  const auto p = mirror_permutation(1, 4, 4);
  const Matrix pm = GroupElement::permutation(p).to_matrix();
  Rng rng(6);

  // W commuting with the mirror and a mirror-invariant bias.
  const Matrix r = rng.normal_matrix(16, 16, 0.3);
  AffineParams eq{0.5 * (r + matmul(matmul(pm, r), pm)), std::vector<double>(16, 0.2)};
  const Model equivariant({Layer{AffineSpec{16, 16, Activation::tanh(), true}, eq}});
  for (const auto& x : data.inputs) CHECK(equivariance_loss(equivariant, x, Task::Autoencode, data) <= 1e-30);

  AffineParams constant{Matrix(3, 16), {0.5, -1.0, 2.0}};
  const Model flat({Layer{AffineSpec{16, 3, Activation::identity(), false}, constant}});
  CHECK(equivariance_loss(flat, data.inputs[0], Task::Classify, data) == 0.0);

  const std::vector<std::size_t> w{16, 7, 16};
  const Model m = random_mlp(w, Activation::gelu(), rng);
  for (const auto& x : data.inputs) {
    const auto fx = m.forward(x).data();
    std::vector<double> mx(16);
    for (std::size_t i = 0; i < 16; ++i) mx[i] = x.data()[p[i]];
    const auto fmx = m.forward(Latent::vector(mx)).data();
    double ae = 0.0, cl = 0.0;
    for (std::size_t i = 0; i < 16; ++i) {
      ae += std::pow(fx[i] - fmx[p[i]], 2) / 16.0;
      cl += std::pow(fx[i] - fmx[i], 2) / 16.0;
    }
    CHECK(equivariance_loss(m, x, Task::Autoencode, data) == doctest::Approx(ae).epsilon(1e-14));
    CHECK(equivariance_loss(m, x, Task::Classify, data) == doctest::Approx(cl).epsilon(1e-14));
  }
}

TEST_CASE("batch losses match a direct computation") {
  const Dataset data = make_synthetic_mirror_dataset(DatasetKind::LabeledPairs, 6, 4, 7);
  Rng rng(8);
  const std::vector<std::size_t> w{16, 5, 4};
  const Model m = random_mlp(w, Activation::tanh(), rng);
  const auto idx = range(6);
  const LossValue lv = batch_loss(m, data, idx, Task::Classify, 2.0);
  double ce = 0.0, eq = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    const auto f = m.forward(data.inputs[i]).data();
    double z = 0.0;
    for (double v : f) z += std::exp(v);
    ce += (std::log(z) - f[data.labels[i]]) / 6.0;
    eq += equivariance_loss(m, data.inputs[i], Task::Classify, data) / 6.0;
  }
  CHECK(lv.task == doctest::Approx(ce).epsilon(1e-13));
  CHECK(lv.equiv == doctest::Approx(eq).epsilon(1e-13));
  CHECK(lv.total == doctest::Approx(ce + 2.0 * eq).epsilon(1e-13));
}

TEST_CASE("analytic gradients match central differences") {
  const Dataset ae_data = make_synthetic_mirror_dataset(DatasetKind::Blobs, 8, 4, 3);
  const Dataset cl_data = make_synthetic_mirror_dataset(DatasetKind::LabeledPairs, 8, 4, 3);
  const auto batch = range(8);
  for (auto sigma : {Activation::tanh(), Activation::gelu()}) {
    for (double lambda : {0.0, 5.0}) {
      for (auto task : {Task::Autoencode, Task::Classify}) {
        const Dataset& data = task == Task::Autoencode ? ae_data : cl_data;
        const Model m = initial_model(small_config(task, sigma, data.classes), data);
        const auto gc = gradient_check(m, data, batch, task, lambda);
        INFO(sigma.name(), " lambda ", lambda, " ", task_name(task));
        CHECK(gc.coordinates == 60);
        CHECK(gc.worst() < 1e-5);
      }
    }
  }
}

TEST_CASE("attention gradients match central differences") {
  const Dataset data = tokenize(make_synthetic_mirror_dataset(DatasetKind::Blobs, 6, 8, 4), 2);
  for (bool positional : {false, true}) {
    TrainConfig c;
    c.widths = {64, 12, 8, 64};
    c.activations = {Activation::tanh()};
    c.attention = AttentionConfig{2, 4, 3, positional};
    c.seed = 31;
    const Model m = initial_model(c, data);
    CHECK(m.layer(1).is_attention());
    for (double lambda : {0.0, 5.0}) {
      const auto gc = gradient_check(m, data, range(6), Task::Autoencode, lambda);
      INFO("positional ", positional, " lambda ", lambda);
      CHECK(gc.max_relative[1] < 1e-5);
      CHECK(gc.worst() < 1e-5);
    }
  }
}

TEST_CASE("lambda schedule and config validation") {
  TrainConfig c;
  c.epochs = 400;
  CHECK(c.lambda_at(0) == 0.0);
  CHECK(c.lambda_at(199) == 0.0);
  CHECK(c.lambda_at(200) == 5.0);
  CHECK(c.lambda_at(399) == 5.0);
  c.activations = {};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.weight_decay = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.attention = AttentionConfig{};
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("config documents round trip and name bad fields") {
  TrainConfig c;
  c.task = Task::Classify;
  c.widths = {64, 16, 16, 3};
  c.activations = {Activation::gelu(), Activation::tanh()};
  c.dataset = {DatasetKind::Stripes, 128, 8, 4};
  c.lambda = 1.0;
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());

  auto doc = c.to_json();
  doc["activations"][1] = "softsign";
  try {
    TrainConfig::from_json(doc);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.field() == "$.activations[1]");
  }
  doc = c.to_json();
  doc["lambda_schedule"]["lambda"] = "five";
  CHECK_THROWS_AS(TrainConfig::from_json(doc), ParseError);
  const auto partial = TrainConfig::from_json(nlohmann::json{{"epochs", 3}});
  CHECK(partial.epochs == 3);
  CHECK(partial.widths == TrainConfig{}.widths);
}

TEST_CASE("zero learning rate leaves the model bitwise unchanged") {
  TrainConfig c = small_config(Task::Autoencode, Activation::tanh());
  c.epochs = 5;
  c.learning_rate = 0.0;
  const Dataset data = prepare_dataset(c);
  const TrainResult r = train(c, data);
  CHECK(r.steps == 5);
  CHECK(serialize_model(r.model) == serialize_model(initial_model(c, data)));
}

TEST_CASE("training is deterministic") {
  TrainConfig c = small_config(Task::Autoencode, Activation::gelu());
  c.epochs = 6;
  c.batch_size = 3;
  std::vector<std::size_t> saved;
  const Dataset data = prepare_dataset(c);
  c.save_interval = 2;
  const TrainResult a = train(c, data, [&](std::size_t e, const Model&) { saved.push_back(e); });
  const TrainResult b = train(c, data);
  CHECK(serialize_model(a.model) == serialize_model(b.model));
  CHECK(curve_csv(a.curve) == curve_csv(b.curve));
  CHECK(saved == std::vector<std::size_t>{2, 4, 6});
  CHECK(a.curve.size() == 7);
  CHECK(curve_csv(a.curve).rfind("epoch,task_loss,equiv_loss\n0,", 0) == 0);
}

TEST_CASE("linear autoencoder on two-pixel mirror data becomes equivariant") {
  const Dataset data = two_pixel_data(32, 41);
  TrainConfig c;
  c.widths = {2, 2, 2};
  c.activations = {Activation::identity()};
  c.epochs = 400;
  c.batch_size = 16;
  c.learning_rate = 5e-2;
  c.weight_decay = 1.0;
  c.seed = 42;
  const TrainResult r = train(c, data);
  REQUIRE_FALSE(r.diverged);
  const double initial = r.curve.front().task_loss;
  const double final_total = r.curve.back().task_loss + c.lambda * r.curve.back().equiv_loss;
  CHECK(final_total < 0.1 * initial);
  const auto group = mirror_group(1, 1, 2, true, 2);
  CHECK(check_equivariance(r.model, group).residual < 1e-3);
}

TEST_CASE("classifier separates the labeled pairs") {
  TrainConfig c;
  c.task = Task::Classify;
  c.widths = {64, 16, 4};
  c.dataset = {DatasetKind::LabeledPairs, 64, 8, 5};
  c.epochs = 60;
  c.batch_size = 16;
  c.learning_rate = 5e-2;
  c.lambda = 1.0;
  c.seed = 43;
  const Dataset data = prepare_dataset(c);
  const TrainResult r = train(c, data);
  REQUIRE_FALSE(r.diverged);
  CHECK(accuracy(r.model, data) == 1.0);
}

TEST_CASE("divergence stops with the last finite model") {
  TrainConfig c = small_config(Task::Autoencode, Activation::identity());
  c.activations = {Activation::identity(), Activation::identity()};
  c.learning_rate = 1e6;
  c.epochs = 50;
  const Dataset data = prepare_dataset(c);
  const TrainResult r = train(c, data);
  CHECK(r.diverged);
  for (const auto& l : r.model.layers()) {
    const auto v = flatten_params(l.params);
    for (double x : v) CHECK(std::isfinite(x));
  }
  // The returned model is the one whose losses the last finite curve row holds.
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  auto row = r.curve.rbegin();
  while (row != r.curve.rend() && !std::isfinite(row->task_loss)) ++row;
  REQUIRE(row != r.curve.rend());
  CHECK(batch_loss(r.model, data, all, c.task, 0.0).task == row->task_loss);
}

TEST_CASE("mismatched data is rejected") {
  TrainConfig c;
  const Dataset small = make_synthetic_mirror_dataset(DatasetKind::Blobs, 4, 4, 1);
  CHECK_THROWS_AS(train(c, small), ConfigError);
  c.widths = {16, 8, 16};
  c.attention = AttentionConfig{2, 2, 4, true};
  CHECK_THROWS_AS(train(c, small), ConfigError);
}

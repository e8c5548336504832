#include "layeq/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "layeq/error.hpp"

namespace layeq {

using nlohmann::json;

std::string task_name(Task t) { return t == Task::Autoencode ? "autoencode" : "classify"; }

Task parse_task(const std::string& name) {
  if (name == "autoencode") return Task::Autoencode;
  if (name == "classify") return Task::Classify;
  throw ConfigError("unknown task '" + name + "' (expected autoencode or classify)");
}

std::string dataset_kind_name(DatasetKind k) {
  switch (k) {
    case DatasetKind::Stripes: return "stripes";
    case DatasetKind::Blobs: return "blobs";
    case DatasetKind::LabeledPairs: return "labeled-pairs";
  }
  return "?";
}

DatasetKind parse_dataset_kind(const std::string& name) {
  if (name == "stripes") return DatasetKind::Stripes;
  if (name == "blobs") return DatasetKind::Blobs;
  if (name == "labeled-pairs") return DatasetKind::LabeledPairs;
  throw ConfigError("unknown dataset kind '" + name + "' (expected stripes, blobs or labeled-pairs)");
}

namespace {

constexpr double kPi = 3.14159265358979323846;

std::size_t class_count(DatasetKind k) { return k == DatasetKind::LabeledPairs ? 4 : 3; }

std::vector<double> gather(const std::vector<double>& x, const std::vector<std::size_t>& perm) {
  std::vector<double> out(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out[i] = x[perm[i]];
  return out;
}

}  // namespace

LatentAction Dataset::input_action() const {
  if (patch != 0) return token_mirror_action(channels, height, width, patch);
  return image_action();
}

LatentAction Dataset::image_action() const { return LatentAction::of(GroupElement::permutation(mirror_map)); }

Latent Dataset::image(std::size_t i) const {
  const Latent& x = inputs.at(i);
  if (patch == 0) return x;
  Latent out(Shape::vector(pixels()));
  const std::size_t gw = width / patch;
  for (std::size_t t = 0; t < x.shape().tokens; ++t)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t dy = 0; dy < patch; ++dy)
        for (std::size_t dx = 0; dx < patch; ++dx) {
          const std::size_t y = (t / gw) * patch + dy, xx = (t % gw) * patch + dx;
          out.data()[(c * height + y) * width + xx] = x.at(t, (c * patch + dy) * patch + dx, 0);
        }
  return out;
}

Dataset make_synthetic_mirror_dataset(DatasetKind kind, std::size_t n, std::size_t size, std::uint64_t seed) {
  if (size == 0 || size % 2 != 0) throw ConfigError("image size must be even, got " + std::to_string(size));
  if (n % 2 != 0) throw ConfigError("sample count must be even so every image has its mirror");
  Rng rng(seed);
  Dataset d;
  d.height = d.width = size;
  d.classes = class_count(kind);
  d.mirror_map = mirror_permutation(1, size, size);
  const double c = 0.5 * static_cast<double>(size - 1);

  std::vector<std::vector<double>> prototypes;
  if (kind == DatasetKind::LabeledPairs)
    for (std::size_t k = 0; k < d.classes; ++k) prototypes.push_back(rng.normal_vector(size * size, 0.5));

  for (std::size_t s = 0; s < n / 2; ++s) {
    std::vector<double> img(size * size, 0.0);
    std::size_t label = 0;
    switch (kind) {
      case DatasetKind::Stripes: {
        label = rng.index(3);
        const double theta = rng.uniform(0.0, kPi), phase = rng.uniform(0.0, 2 * kPi);
        const double freq = 2 * kPi * static_cast<double>(label + 1) / static_cast<double>(size);
        for (std::size_t y = 0; y < size; ++y)
          for (std::size_t x = 0; x < size; ++x) {
            const double u = (static_cast<double>(x) - c) * std::cos(theta) + (static_cast<double>(y) - c) * std::sin(theta);
            img[y * size + x] = std::cos(freq * u + phase);
          }
        break;
      }
      case DatasetKind::Blobs: {
        label = rng.index(3);
        for (std::size_t b = 0; b <= label; ++b) {
          const double cy = rng.uniform(0.0, static_cast<double>(size)) - 0.5;
          const double cx = rng.uniform(0.0, static_cast<double>(size)) - 0.5;
          const double width = rng.uniform(0.8, 2.0);
          const double amp = rng.sign() * rng.uniform(0.5, 1.0);
          for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) {
              const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
              img[y * size + x] += amp * std::exp(-(dx * dx + dy * dy) / (2 * width * width));
            }
        }
        break;
      }
      case DatasetKind::LabeledPairs: {
        label = rng.index(d.classes);
        const auto noise = rng.normal_vector(size * size, 0.05);
        for (std::size_t i = 0; i < img.size(); ++i) img[i] = prototypes[label][i] + noise[i];
        break;
      }
    }
    std::vector<double> mirror = gather(img, d.mirror_map);
    d.inputs.push_back(Latent::vector(std::move(img)));
    d.inputs.push_back(Latent::vector(std::move(mirror)));
    d.labels.push_back(label);
    d.labels.push_back(label);
  }
  return d;
}

Latent image_to_tokens(const Latent& image, std::size_t channels, std::size_t height, std::size_t width,
                       std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0)
    throw ConfigError("patch size " + std::to_string(patch) + " does not tile a " + std::to_string(height) + "x" +
                      std::to_string(width) + " image");
  if (image.size() != channels * height * width) throw DimensionError("image has the wrong number of pixels");
  const std::size_t gw = width / patch, tokens = (height / patch) * gw;
  Latent out(Shape{tokens, channels * patch * patch, 1});
  for (std::size_t t = 0; t < tokens; ++t)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t dy = 0; dy < patch; ++dy)
        for (std::size_t dx = 0; dx < patch; ++dx) {
          const std::size_t y = (t / gw) * patch + dy, x = (t % gw) * patch + dx;
          out.at(t, (c * patch + dy) * patch + dx, 0) = image.data()[(c * height + y) * width + x];
        }
  return out;
}

Dataset tokenize(const Dataset& flat, std::size_t patch) {
  if (flat.patch != 0) throw ConfigError("dataset is already tokenized");
  Dataset d = flat;
  d.patch = patch;
  for (auto& x : d.inputs) x = image_to_tokens(x, d.channels, d.height, d.width, patch);
  return d;
}

LatentAction token_mirror_action(std::size_t channels, std::size_t height, std::size_t width, std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0) throw ConfigError("patch size does not tile the image");
  const std::size_t gw = width / patch, tokens = (height / patch) * gw;
  std::vector<std::size_t> token_perm(tokens), feature_perm(channels * patch * patch);
  for (std::size_t t = 0; t < tokens; ++t) token_perm[t] = (t / gw) * gw + (gw - 1 - t % gw);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t dy = 0; dy < patch; ++dy)
      for (std::size_t dx = 0; dx < patch; ++dx)
        feature_perm[(c * patch + dy) * patch + dx] = (c * patch + dy) * patch + (patch - 1 - dx);
  return LatentAction{token_perm, GroupElement::permutation(feature_perm)};
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (widths.size() < 2) throw ConfigError("widths needs at least an input and an output entry");
  for (auto w : widths)
    if (w == 0) throw ConfigError("widths must be positive");
  const std::size_t depth = widths.size() - 1;
  const std::size_t affine_layers = attention ? depth - 1 : depth;
  if (attention && depth < 2) throw ConfigError("an attention model needs at least one affine layer after it");
  if (activations.size() + 1 != affine_layers)
    throw ConfigError("expected " + std::to_string(affine_layers - 1) + " hidden activations, got " +
                      std::to_string(activations.size()));
  if (attention) {
    if (attention->patch == 0) throw ConfigError("attention patch must be positive");
    if (attention->heads == 0 || attention->head_dim == 0) throw ConfigError("attention heads must be nonempty");
    if (widths[1] != attention->heads * attention->head_dim)
      throw ConfigError("widths[1] must equal heads * head_dim with attention");
  }
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
  if (!(weight_decay > 0.0 && weight_decay <= 1.0)) throw ConfigError("weight_decay must lie in (0, 1]");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ConfigError("warmup_fraction must lie in [0, 1]");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be >= 0");
}

double TrainConfig::lambda_at(std::size_t epoch) const {
  return static_cast<double>(epoch) < warmup_fraction * static_cast<double>(epochs) ? 0.0 : lambda;
}

json TrainConfig::to_json() const {
  json acts = json::array();
  for (const auto& a : activations) acts.push_back(a.name());
  json j{{"task", task_name(task)},
         {"widths", widths},
         {"activations", acts},
         {"epochs", epochs},
         {"batch_size", batch_size},
         {"learning_rate", learning_rate},
         {"weight_decay", weight_decay},
         {"lambda_schedule", {{"warmup_fraction", warmup_fraction}, {"lambda", lambda}}},
         {"seed", seed},
         {"save_interval", save_interval},
         {"dataset",
          {{"kind", dataset_kind_name(dataset.kind)}, {"n", dataset.n}, {"size", dataset.size}, {"seed", dataset.seed}}}};
  if (attention)
    j["attention"] = {{"patch", attention->patch},
                      {"heads", attention->heads},
                      {"head_dim", attention->head_dim},
                      {"positional", attention->positional}};
  else
    j["attention"] = nullptr;
  return j;
}

namespace {

template <typename T, typename Check>
void read_opt(const json& obj, const char* key, const std::string& path, T& out, Check ok, const char* expected) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  if (!ok(*it)) throw ParseError(path + "." + key, std::string("expected ") + expected);
  out = it->template get<T>();
}

bool non_negative_integer(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

void read_count(const json& obj, const char* key, const std::string& path, std::size_t& out) {
  read_opt(obj, key, path, out, non_negative_integer, "a non-negative integer");
}

void read_seed(const json& obj, const char* key, const std::string& path, std::uint64_t& out) {
  read_opt(obj, key, path, out, non_negative_integer, "a non-negative integer");
}

void read_real(const json& obj, const char* key, const std::string& path, double& out) {
  read_opt(obj, key, path, out, [](const json& v) { return v.is_number(); }, "a number");
}

template <typename F>
auto translate(const std::string& path, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ParseError(path, e.what());
  }
}

}  // namespace

TrainConfig TrainConfig::from_json(const json& doc) {
  if (!doc.is_object()) throw ParseError("$", "expected an object");
  TrainConfig c;
  if (auto it = doc.find("task"); it != doc.end()) {
    if (!it->is_string()) throw ParseError("$.task", "expected a string");
    c.task = translate("$.task", [&] { return parse_task(it->get<std::string>()); });
  }
  if (auto it = doc.find("widths"); it != doc.end()) {
    if (!it->is_array()) throw ParseError("$.widths", "expected an array");
    c.widths.clear();
    for (std::size_t i = 0; i < it->size(); ++i) {
      const json& v = (*it)[i];
      if (!non_negative_integer(v) || v.get<std::size_t>() == 0)
        throw ParseError("$.widths[" + std::to_string(i) + "]", "expected a positive width");
      c.widths.push_back(v.get<std::size_t>());
    }
  }
  if (auto it = doc.find("activations"); it != doc.end()) {
    if (!it->is_array()) throw ParseError("$.activations", "expected an array");
    c.activations.clear();
    for (std::size_t i = 0; i < it->size(); ++i) {
      const std::string path = "$.activations[" + std::to_string(i) + "]";
      if (!(*it)[i].is_string()) throw ParseError(path, "expected an activation name");
      c.activations.push_back(translate(path, [&] { return Activation::parse((*it)[i].get<std::string>()); }));
    }
  }
  read_count(doc, "epochs", "$", c.epochs);
  read_count(doc, "batch_size", "$", c.batch_size);
  read_real(doc, "learning_rate", "$", c.learning_rate);
  read_real(doc, "weight_decay", "$", c.weight_decay);
  read_seed(doc, "seed", "$", c.seed);
  read_count(doc, "save_interval", "$", c.save_interval);
  if (auto it = doc.find("lambda_schedule"); it != doc.end()) {
    if (!it->is_object()) throw ParseError("$.lambda_schedule", "expected an object");
    read_real(*it, "warmup_fraction", "$.lambda_schedule", c.warmup_fraction);
    read_real(*it, "lambda", "$.lambda_schedule", c.lambda);
  }
  if (auto it = doc.find("dataset"); it != doc.end()) {
    if (!it->is_object()) throw ParseError("$.dataset", "expected an object");
    if (auto k = it->find("kind"); k != it->end()) {
      if (!k->is_string()) throw ParseError("$.dataset.kind", "expected a string");
      c.dataset.kind = translate("$.dataset.kind", [&] { return parse_dataset_kind(k->get<std::string>()); });
    }
    read_count(*it, "n", "$.dataset", c.dataset.n);
    read_count(*it, "size", "$.dataset", c.dataset.size);
    read_seed(*it, "seed", "$.dataset", c.dataset.seed);
  }
  if (auto it = doc.find("attention"); it != doc.end() && !it->is_null()) {
    if (!it->is_object()) throw ParseError("$.attention", "expected an object or null");
    AttentionConfig a;
    read_count(*it, "patch", "$.attention", a.patch);
    read_count(*it, "heads", "$.attention", a.heads);
    read_count(*it, "head_dim", "$.attention", a.head_dim);
    read_opt(*it, "positional", "$.attention", a.positional, [](const json& v) { return v.is_boolean(); },
             "a boolean");
    c.attention = a;
  }
  translate("$", [&] {
    c.validate();
    return 0;
  });
  return c;
}

// ---------------------------------------------------------------------------
// Forward and backward passes
// ---------------------------------------------------------------------------

MirrorActions mirror_actions(const Dataset& data, Task task) {
  return {data.input_action(), task == Task::Autoencode ? data.image_action() : LatentAction::trivial()};
}

double equivariance_loss(const Model& model, const Latent& x, Task task, const Dataset& data) {
  const auto g = mirror_actions(data, task);
  const Latent fx = model.forward(x);
  const Latent rhs = act(g.output, model.forward(act(g.input, x)));
  double s = 0.0;
  for (std::size_t i = 0; i < fx.size(); ++i) {
    const double e = fx.data()[i] - rhs.data()[i];
    s += e * e;
  }
  return s / static_cast<double>(fx.size());
}

namespace {

struct Tape {
  std::vector<Latent> acts;                      // latent 0..L
  std::vector<std::vector<double>> pre;          // affine pre-activations per layer
  std::vector<std::optional<AttentionTrace>> traces;
};

Tape record(const Model& model, const Latent& x) {
  Tape t;
  t.acts.push_back(x);
  for (std::size_t i = 1; i <= model.depth(); ++i) {
    const Layer& l = model.layer(i);
    if (l.is_affine()) {
      const auto& p = l.affine();
      std::vector<double> z = matvec(p.weight, t.acts.back().data());
      for (std::size_t r = 0; r < z.size(); ++r) z[r] += p.bias[r];
      std::vector<double> a = z;
      if (l.affine_spec().apply_activation)
        for (double& v : a) v = l.affine_spec().activation(v);
      t.pre.push_back(std::move(z));
      t.traces.emplace_back();
      t.acts.push_back(Latent::vector(std::move(a)));
    } else {
      t.pre.emplace_back();
      t.traces.push_back(trace_attention(l.attention_spec(), l.attention(), t.acts.back()));
      t.acts.push_back(t.traces.back()->output);
    }
  }
  return t;
}

void add_into(Matrix& dst, const Matrix& src) {
  for (std::size_t k = 0; k < dst.size(); ++k) dst.data()[k] += src.data()[k];
}

std::vector<double> attention_backward(const AttentionSpec& spec, const AttentionParams& p, const AttentionTrace& tr,
                                       const std::vector<double>& dout, AttentionParams& g) {
  const Latent dlat(output_shape(spec), dout);
  const std::size_t m = tr.queries.rows();
  Matrix dxbar(tr.xbar.rows(), tr.xbar.cols());
  Matrix dq(m, tr.queries.cols());
  for (std::size_t j = 0; j < spec.heads; ++j) {
    const Matrix d_o = dlat.head_matrix(j);
    const Matrix& pat = tr.pattern[j];
    const Matrix dpat = matmul(d_o, tr.values[j].transpose());
    const Matrix dval = matmul(pat.transpose(), d_o);
    add_into(g.value[j], matmul(tr.xbar.transpose(), dval));
    add_into(dxbar, matmul(dval, p.value[j].transpose()));
    Matrix dlogit(m, pat.cols());
    for (std::size_t r = 0; r < m; ++r) {
      double inner = 0.0;
      for (std::size_t c = 0; c < pat.cols(); ++c) inner += dpat(r, c) * pat(r, c);
      for (std::size_t c = 0; c < pat.cols(); ++c) dlogit(r, c) = pat(r, c) * (dpat(r, c) - inner);
    }
    add_into(g.attention[j], matmul(matmul(tr.queries.transpose(), dlogit), tr.xbar));
    add_into(dq, matmul(matmul(dlogit, tr.xbar), p.attention[j].transpose()));
    add_into(dxbar, matmul(matmul(dlogit.transpose(), tr.queries), p.attention[j]));
  }
  if (p.query)
    add_into(*g.query, dq);
  else
    add_into(dxbar, dq);
  if (p.positional) add_into(*g.positional, dxbar);
  add_into(g.projection, matmul(tr.input.transpose(), dxbar));
  return matmul(dxbar, p.projection.transpose()).data();
}

void backward(const Model& model, const Tape& t, std::vector<double> dout, std::vector<LayerParams>& grads) {
  for (std::size_t i = model.depth(); i >= 1; --i) {
    const Layer& l = model.layer(i);
    if (l.is_affine()) {
      const auto& spec = l.affine_spec();
      const auto& p = l.affine();
      auto& g = std::get<AffineParams>(grads[i - 1]);
      const auto& h = t.acts[i - 1].data();
      const auto& z = t.pre[i - 1];
      std::vector<double> din(spec.in_dim, 0.0);
      for (std::size_t r = 0; r < spec.out_dim; ++r) {
        const double dz = spec.apply_activation ? dout[r] * spec.activation.derivative(z[r]) : dout[r];
        g.bias[r] += dz;
        auto grow = g.weight.row(r);
        const auto wrow = p.weight.row(r);
        for (std::size_t c = 0; c < spec.in_dim; ++c) {
          grow[c] += dz * h[c];
          din[c] += wrow[c] * dz;
        }
      }
      dout = std::move(din);
    } else {
      dout = attention_backward(l.attention_spec(), l.attention(), *t.traces[i - 1], dout,
                                std::get<AttentionParams>(grads[i - 1]));
    }
  }
}

LayerParams zero_like(const LayerParams& p) {
  LayerParams z = p;
  const std::vector<double> zeros(flatten_params(p).size(), 0.0);
  unflatten_params(z, zeros);
  return z;
}

// Mean cross-entropy term for one sample and its logit gradient.
double cross_entropy(const std::vector<double>& logits, std::size_t label, std::vector<double>* grad, double scale) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  if (grad)
    for (std::size_t k = 0; k < logits.size(); ++k)
      (*grad)[k] += scale * (std::exp(logits[k] - lse) - (k == label ? 1.0 : 0.0));
  return lse - logits[label];
}

// Transpose of a gather action applied to a flat vector.
std::vector<double> adjoint(const Matrix& m, const std::vector<double>& e) {
  std::vector<double> out(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) out[c] += row[c] * e[r];
  }
  return out;
}

LossValue accumulate(const Model& model, const Dataset& data, std::span<const std::size_t> batch, Task task,
                     double lambda, std::vector<LayerParams>* grads) {
  if (batch.empty()) throw ConfigError("empty batch");
  const auto g = mirror_actions(data, task);
  const Shape out_shape = model.latent_shape(model.depth());
  const std::size_t dim = out_shape.size();
  const Matrix out_matrix = action_matrix(g.output, out_shape);
  const double b = static_cast<double>(batch.size());
  const double mse_scale = 1.0 / (b * static_cast<double>(dim));
  const bool need_equiv_grad = grads && lambda != 0.0;
  LossValue lv;
  for (std::size_t idx : batch) {
    const Latent& x = data.inputs.at(idx);
    const Tape tx = record(model, x);
    const auto& f = tx.acts.back().data();
    std::vector<double> df(dim, 0.0);
    if (task == Task::Autoencode) {
      const Latent y = data.image(idx);
      for (std::size_t k = 0; k < dim; ++k) {
        const double e = f[k] - y.data()[k];
        lv.task += e * e * mse_scale;
        df[k] += 2.0 * e * mse_scale;
      }
    } else {
      lv.task += cross_entropy(f, data.labels.at(idx), grads ? &df : nullptr, 1.0 / b) / b;
    }

    const Tape tg = record(model, act(g.input, x));
    const std::vector<double> rhs = matvec(out_matrix, tg.acts.back().data());
    std::vector<double> e(dim);
    for (std::size_t k = 0; k < dim; ++k) {
      e[k] = f[k] - rhs[k];
      lv.equiv += e[k] * e[k] * mse_scale;
    }
    if (grads) {
      if (need_equiv_grad)
        for (std::size_t k = 0; k < dim; ++k) df[k] += lambda * 2.0 * e[k] * mse_scale;
      backward(model, tx, std::move(df), *grads);
      if (need_equiv_grad) {
        std::vector<double> dg = adjoint(out_matrix, e);
        for (double& v : dg) v *= -lambda * 2.0 * mse_scale;
        backward(model, tg, std::move(dg), *grads);
      }
    }
  }
  lv.total = lv.task + lambda * lv.equiv;
  return lv;
}

}  // namespace

LossValue batch_loss(const Model& model, const Dataset& data, std::span<const std::size_t> batch, Task task,
                     double lambda) {
  return accumulate(model, data, batch, task, lambda, nullptr);
}

std::vector<std::vector<double>> loss_gradient(const Model& model, const Dataset& data,
                                               std::span<const std::size_t> batch, Task task, double lambda,
                                               LossValue* loss) {
  std::vector<LayerParams> grads;
  for (const auto& l : model.layers()) grads.push_back(zero_like(l.params));
  const LossValue lv = accumulate(model, data, batch, task, lambda, &grads);
  if (loss) *loss = lv;
  std::vector<std::vector<double>> out;
  for (const auto& g : grads) out.push_back(flatten_params(g));
  return out;
}

double GradientCheck::worst() const {
  double w = 0.0;
  for (double v : max_relative) w = std::max(w, v);
  return w;
}

GradientCheck gradient_check(const Model& model, const Dataset& data, std::span<const std::size_t> batch, Task task,
                             double lambda, std::size_t per_layer, double h, std::uint64_t seed, double floor) {
  const auto analytic = loss_gradient(model, data, batch, task, lambda);
  Rng rng(seed);
  GradientCheck gc;
  gc.max_relative.assign(model.depth() + 1, 0.0);
  Model probe = model;
  for (std::size_t i = 1; i <= model.depth(); ++i) {
    const std::vector<double> base = flatten_params(model.layer(i).params);
    for (std::size_t s = 0; s < per_layer; ++s) {
      const std::size_t k = rng.index(base.size());
      std::vector<double> shifted = base;
      LayerParams params = model.layer(i).params;
      shifted[k] = base[k] + h;
      unflatten_params(params, shifted);
      probe.set_params(i, params);
      const double up = batch_loss(probe, data, batch, task, lambda).total;
      shifted[k] = base[k] - h;
      unflatten_params(params, shifted);
      probe.set_params(i, params);
      const double down = batch_loss(probe, data, batch, task, lambda).total;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[i - 1][k];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      gc.max_relative[i] = std::max(gc.max_relative[i], rel);
      ++gc.coordinates;
    }
    probe.set_params(i, model.layer(i).params);
  }
  return gc;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

void check_data(const TrainConfig& config, const Dataset& data) {
  if (data.size() == 0) throw ConfigError("empty dataset");
  if ((config.attention != std::nullopt) != (data.patch != 0))
    throw ConfigError("dataset tokenization does not match the attention setting");
  if (config.attention && config.attention->patch != data.patch)
    throw ConfigError("dataset patch size differs from the attention patch");
  const std::size_t pixels = data.pixels();
  if (config.widths.front() != pixels)
    throw ConfigError("widths[0] must be the pixel count " + std::to_string(pixels));
  if (config.task == Task::Autoencode && config.widths.back() != pixels)
    throw ConfigError("an autoencoder must output " + std::to_string(pixels) + " values");
  if (config.task == Task::Classify && config.widths.back() != data.classes)
    throw ConfigError("a classifier must output " + std::to_string(data.classes) + " logits");
}

}  // namespace

Model initial_model(const TrainConfig& config, const Dataset& data) {
  config.validate();
  check_data(config, data);
  Rng rng(config.seed);
  std::vector<Layer> layers;
  std::size_t first_affine = 0;
  if (config.attention) {
    const auto& a = *config.attention;
    AttentionSpec spec{data.inputs.front().shape().tokens, data.channels * a.patch * a.patch, a.head_dim, a.heads, 1,
                       a.positional, true};
    layers.push_back(random_attention(spec, rng));
    first_affine = 1;
  }
  const std::size_t depth = config.widths.size() - 1;
  for (std::size_t i = first_affine; i < depth; ++i) {
    const bool last = i + 1 == depth;
    const Activation sigma = last ? Activation::identity() : config.activations[i - first_affine];
    layers.push_back(random_affine(config.widths[i], config.widths[i + 1], sigma, !last, rng));
  }
  return Model(std::move(layers));
}

Dataset prepare_dataset(const TrainConfig& config) {
  const auto& d = config.dataset;
  Dataset data = make_synthetic_mirror_dataset(d.kind, d.n, d.size, d.seed);
  if (config.attention) data = tokenize(data, config.attention->patch);
  return data;
}

namespace {

bool finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

bool finite(const LossValue& lv) { return std::isfinite(lv.task) && std::isfinite(lv.equiv) && std::isfinite(lv.total); }

// Count of leading flattened entries that decay (all but the bias of affine layers).
std::size_t decayed_prefix(const Layer& l) {
  if (l.is_affine()) return l.affine().weight.size();
  return flatten_params(l.params).size();
}

}  // namespace

TrainResult train(const TrainConfig& config, const Dataset& data, const CheckpointHook& on_checkpoint) {
  TrainResult res;
  res.model = initial_model(config, data);
  Rng shuffle(config.seed ^ 0x9e3779b97f4a7c15ULL);

  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto record_row = [&](std::size_t epoch) {
    const LossValue lv = batch_loss(res.model, data, all, config.task, 0.0);
    res.curve.push_back({epoch, lv.task, lv.equiv});
    return finite(lv);
  };
  if (!record_row(0)) {
    res.diverged = true;
    return res;
  }

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lambda = config.lambda_at(epoch);
    const std::vector<std::size_t> order = shuffle.permutation(data.size());
    const Model epoch_start = res.model;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const std::span<const std::size_t> batch(order.data() + start, end - start);
      LossValue lv;
      const auto grads = loss_gradient(res.model, data, batch, config.task, lambda, &lv);
      if (!finite(lv)) {
        res.model = epoch_start;
        res.diverged = true;
        return res;
      }
      ++res.steps;
      if (config.learning_rate == 0.0) continue;
      Model next = res.model;
      bool ok = true;
      for (std::size_t i = 1; i <= next.depth() && ok; ++i) {
        std::vector<double> v = flatten_params(next.layer(i).params);
        const std::size_t decayed = decayed_prefix(next.layer(i));
        for (std::size_t k = 0; k < v.size(); ++k) {
          v[k] -= config.learning_rate * grads[i - 1][k];
          if (k < decayed) v[k] *= config.weight_decay;
        }
        ok = finite(v);
        LayerParams p = next.layer(i).params;
        unflatten_params(p, v);
        next.set_params(i, std::move(p));
      }
      if (!ok) {
        res.model = epoch_start;
        res.diverged = true;
        return res;
      }
      res.model = std::move(next);
    }
    if (!record_row(epoch + 1)) {
      res.model = epoch_start;
      res.diverged = true;
      return res;
    }
    if (on_checkpoint && config.save_interval != 0 && (epoch + 1) % config.save_interval == 0)
      on_checkpoint(epoch + 1, res.model);
  }
  return res;
}

std::string curve_csv(const std::vector<CurveRow>& curve) {
  std::string out = "epoch,task_loss,equiv_loss\n";
  char buf[96];
  for (const auto& r : curve) {
    std::snprintf(buf, sizeof buf, "%zu,%.12g,%.12g\n", r.epoch, r.task_loss, r.equiv_loss);
    out += buf;
  }
  return out;
}

double accuracy(const Model& model, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto out = model.forward(data.inputs[i]).data();
    const auto best = static_cast<std::size_t>(std::max_element(out.begin(), out.end()) - out.begin());
    if (best == data.labels.at(i)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

}  // namespace layeq

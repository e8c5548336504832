#include "layeq/checkpoint.hpp"

#include <cmath>

#include "layeq/error.hpp"
#include "layeq/io.hpp"

namespace layeq {

using nlohmann::json;

namespace {

json matrix_json(const Matrix& m) { return json(m.data()); }

const json& field(const json& obj, const std::string& key, const std::string& path) {
  if (!obj.is_object()) throw ParseError(path, "expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(path + "." + key, "missing field");
  return *it;
}

std::size_t read_count(const json& obj, const std::string& key, const std::string& path) {
  const json& v = field(obj, key, path);
  if (!v.is_number_unsigned()) throw ParseError(path + "." + key, "expected a non-negative integer");
  return v.get<std::size_t>();
}

bool read_flag(const json& obj, const std::string& key, const std::string& path) {
  const json& v = field(obj, key, path);
  if (!v.is_boolean()) throw ParseError(path + "." + key, "expected a boolean");
  return v.get<bool>();
}

std::vector<double> read_values(const json& v, std::size_t expected, const std::string& path) {
  if (!v.is_array()) throw ParseError(path, "expected an array of numbers");
  if (v.size() != expected)
    throw ParseError(path, "expected " + std::to_string(expected) + " values, got " + std::to_string(v.size()));
  std::vector<double> out;
  out.reserve(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) throw ParseError(path + "[" + std::to_string(i) + "]", "expected a number");
    const double x = v[i].get<double>();
    if (!std::isfinite(x)) throw ParseError(path + "[" + std::to_string(i) + "]", "non-finite value");
    out.push_back(x);
  }
  return out;
}

Matrix read_matrix(const json& v, std::size_t rows, std::size_t cols, const std::string& path) {
  return Matrix(rows, cols, read_values(v, rows * cols, path));
}

std::vector<Matrix> read_matrix_list(const json& v, std::size_t count, std::size_t rows, std::size_t cols,
                                     const std::string& path) {
  if (!v.is_array() || v.size() != count)
    throw ParseError(path, "expected a list of " + std::to_string(count) + " matrices");
  std::vector<Matrix> out;
  for (std::size_t j = 0; j < count; ++j)
    out.push_back(read_matrix(v[j], rows, cols, path + "[" + std::to_string(j) + "]"));
  return out;
}

Activation read_activation(const json& v, const std::string& path) {
  if (!v.is_string()) throw ParseError(path, "expected an activation name");
  try {
    return Activation::parse(v.get<std::string>());
  } catch (const ConfigError& e) {
    throw ParseError(path, e.what());
  }
}

json layer_json(const Layer& layer) {
  json out;
  if (layer.is_affine()) {
    const auto& s = layer.affine_spec();
    out["kind"] = "affine";
    out["dims"] = {{"in", s.in_dim}, {"out", s.out_dim}};
    out["activation"] = s.activation.name();
    out["apply_activation"] = s.apply_activation;
    out["params"] = {{"W", matrix_json(layer.affine().weight)}, {"b", layer.affine().bias}};
    return out;
  }
  const auto& s = layer.attention_spec();
  const auto& p = layer.attention();
  out["kind"] = "attention";
  out["dims"] = {{"tokens", s.tokens}, {"in", s.in_dim},       {"out", s.out_dim},
                 {"heads", s.heads},   {"in_heads", s.in_heads}};
  out["positional_encoding"] = s.positional_encoding;
  out["query_token"] = s.query_token;
  json params;
  params["W_A"] = json::array();
  params["W_V"] = json::array();
  for (const auto& m : p.attention) params["W_A"].push_back(matrix_json(m));
  for (const auto& m : p.value) params["W_V"].push_back(matrix_json(m));
  params["W_O"] = matrix_json(p.projection);
  if (p.positional) params["positional"] = matrix_json(*p.positional);
  if (p.query) params["query"] = matrix_json(*p.query);
  out["params"] = std::move(params);
  return out;
}

Layer layer_from_json(const json& v, const std::string& path) {
  const json& kind = field(v, "kind", path);
  if (!kind.is_string()) throw ParseError(path + ".kind", "expected a string");
  const json& dims = field(v, "dims", path);
  const json& params = field(v, "params", path);
  const std::string dpath = path + ".dims";
  const std::string ppath = path + ".params";
  if (kind == "affine") {
    AffineSpec s;
    s.in_dim = read_count(dims, "in", dpath);
    s.out_dim = read_count(dims, "out", dpath);
    s.activation = read_activation(field(v, "activation", path), path + ".activation");
    s.apply_activation = read_flag(v, "apply_activation", path);
    AffineParams p;
    p.weight = read_matrix(field(params, "W", ppath), s.out_dim, s.in_dim, ppath + ".W");
    p.bias = read_values(field(params, "b", ppath), s.out_dim, ppath + ".b");
    return Layer{s, std::move(p)};
  }
  if (kind == "attention") {
    AttentionSpec s;
    s.tokens = read_count(dims, "tokens", dpath);
    s.in_dim = read_count(dims, "in", dpath);
    s.out_dim = read_count(dims, "out", dpath);
    s.heads = read_count(dims, "heads", dpath);
    s.in_heads = read_count(dims, "in_heads", dpath);
    s.positional_encoding = read_flag(v, "positional_encoding", path);
    s.query_token = read_flag(v, "query_token", path);
    AttentionParams p;
    p.attention = read_matrix_list(field(params, "W_A", ppath), s.heads, s.in_dim, s.in_dim, ppath + ".W_A");
    p.value = read_matrix_list(field(params, "W_V", ppath), s.heads, s.in_dim, s.out_dim, ppath + ".W_V");
    p.projection = read_matrix(field(params, "W_O", ppath), s.in_heads * s.in_dim, s.in_dim, ppath + ".W_O");
    if (s.positional_encoding)
      p.positional = read_matrix(field(params, "positional", ppath), s.tokens, s.in_dim, ppath + ".positional");
    if (s.query_token) p.query = read_matrix(field(params, "query", ppath), 1, s.in_dim, ppath + ".query");
    return Layer{s, std::move(p)};
  }
  throw ParseError(path + ".kind", "unknown layer kind '" + kind.get<std::string>() + "'");
}

}  // namespace

json model_to_json(const Model& model) {
  json doc;
  doc["format_version"] = kCheckpointVersion;
  json sigma = json::array();
  json layers = json::array();
  for (const auto& l : model.layers()) {
    sigma.push_back(l.is_affine() ? (l.affine_spec().apply_activation ? l.affine_spec().activation.name()
                                                                      : std::string("identity"))
                                  : std::string("attention"));
    layers.push_back(layer_json(l));
  }
  json shapes = json::array();
  for (const auto& s : model.latent_shapes()) shapes.push_back({s.tokens, s.dim, s.heads});
  doc["sigma"] = std::move(sigma);
  doc["latent_shapes"] = std::move(shapes);
  doc["layers"] = std::move(layers);
  return doc;
}

Model model_from_json(const json& doc) {
  const json& version = field(doc, "format_version", "$");
  if (!version.is_number_integer() || version.get<int>() != kCheckpointVersion)
    throw ParseError("$.format_version", "unsupported checkpoint version");
  const json& layers = field(doc, "layers", "$");
  if (!layers.is_array() || layers.empty()) throw ParseError("$.layers", "expected a non-empty array");
  std::vector<Layer> parsed;
  for (std::size_t i = 0; i < layers.size(); ++i)
    parsed.push_back(layer_from_json(layers[i], "$.layers[" + std::to_string(i) + "]"));
  Model model = [&] {
    try {
      return Model(std::move(parsed));
    } catch (const DimensionError& e) {
      throw ParseError("$.layers", e.what());
    }
  }();

  const json& shapes = field(doc, "latent_shapes", "$");
  if (!shapes.is_array() || shapes.size() != model.depth() + 1)
    throw ParseError("$.latent_shapes", "expected " + std::to_string(model.depth() + 1) + " shapes");
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const std::string path = "$.latent_shapes[" + std::to_string(i) + "]";
    const json& s = shapes[i];
    if (!s.is_array() || s.size() != 3) throw ParseError(path, "expected [tokens, dim, heads]");
    for (const auto& x : s)
      if (!x.is_number_unsigned()) throw ParseError(path, "expected non-negative integers");
    const Shape declared{s[0].get<std::size_t>(), s[1].get<std::size_t>(), s[2].get<std::size_t>()};
    if (!(declared == model.latent_shape(i)))
      throw ParseError(path, "declared " + declared.to_string() + " but layers imply " +
                                 model.latent_shape(i).to_string());
  }
  const json& sigma = field(doc, "sigma", "$");
  if (!sigma.is_array() || sigma.size() != model.depth())
    throw ParseError("$.sigma", "expected one entry per layer");
  return model;
}

std::string serialize_model(const Model& model) { return model_to_json(model).dump(1) + "\n"; }

Model parse_model(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("$", e.what());
  }
  return model_from_json(doc);
}

void save_checkpoint(const Model& model, const std::string& path) {
  write_file_atomic(path, serialize_model(model));
}

Model load_checkpoint(const std::string& path) { return parse_model(read_file(path)); }

std::string model_hash(const Model& model) { return hex64(fnv1a64(model_to_json(model).dump())); }

}  // namespace layeq

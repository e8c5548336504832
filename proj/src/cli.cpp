#include "layeq/cli.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "layeq/audit.hpp"
#include "layeq/checkpoint.hpp"
#include "layeq/error.hpp"
#include "layeq/identify.hpp"
#include "layeq/io.hpp"
#include "layeq/submodel.hpp"
#include "layeq/train.hpp"

#ifndef LAYEQ_DEFAULT_FIXTURE_DIR
#define LAYEQ_DEFAULT_FIXTURE_DIR "fixtures"
#endif

namespace layeq::cli {

using nlohmann::json;

namespace {

std::size_t exact_sqrt(std::size_t n) {
  const auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  return r * r == n ? r : 0;
}

json file_entry(const std::string& path) {
  return {{"path", path}, {"fnv1a64", hex64(fnv1a64(read_file(path)))}};
}

json base_report(const std::string& command, std::uint64_t seed, json tolerances, json inputs) {
  return {{"command", command}, {"seed", seed}, {"tolerances", std::move(tolerances)}, {"inputs", std::move(inputs)}};
}

void emit_report(const json& report, const std::string& path) {
  if (!path.empty()) write_file_atomic(path, report.dump(2) + "\n");
}

std::string path_stem(const std::string& path) {
  const auto slash = path.find_last_of('/');
  const auto dot = path.find_last_of('.');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) return path;
  return path.substr(0, dot);
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

TrainConfig load_config(const std::string& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError("$", std::string("malformed config: ") + e.what());
  }
  return TrainConfig::from_json(doc);
}

GroupPresentation named_group(const std::string& name, const Model& model, const std::optional<ImageShape>& image) {
  if (name == "mirror") return model_mirror_group(model, image);
  if (name == "swap") return swap_group(model.latent_shape(0).size(), model.latent_shape(model.depth()).size());
  if (name == "trivial") return trivial_group();
  throw ConfigError("unknown group '" + name + "' (expected mirror, swap or trivial)");
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string out;
  std::string curve;
  std::string report;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  TrainConfig config = a.config.empty() ? TrainConfig{} : load_config(a.config);
  if (a.seed) config.seed = *a.seed;
  config.validate();
  const Dataset data = prepare_dataset(config);
  const std::string stem = path_stem(a.out);
  const TrainResult r = train(config, data, [&](std::size_t epoch, const Model& m) {
    save_checkpoint(m, stem + ".epoch" + std::to_string(epoch) + ".json");
  });
  save_checkpoint(r.model, a.out);
  if (!a.curve.empty()) write_file_atomic(a.curve, curve_csv(r.curve));

  json inputs = json::object();
  if (!a.config.empty()) inputs["config"] = file_entry(a.config);
  json report = base_report("train", config.seed, {{"lambda", config.lambda}}, std::move(inputs));
  report["config"] = config.to_json();
  report["model_hash"] = model_hash(r.model);
  report["steps"] = r.steps;
  report["diverged"] = r.diverged;
  report["final"] = {{"epoch", r.curve.back().epoch},
                     {"task_loss", r.curve.back().task_loss},
                     {"equiv_loss", r.curve.back().equiv_loss}};
  if (config.task == Task::Classify) report["accuracy"] = accuracy(r.model, data);
  emit_report(report, a.report);

  if (r.diverged) {
    err << "error: training diverged after epoch " << r.curve.back().epoch << "; last finite model written to "
        << a.out << "\n";
    return kExitError;
  }
  out << "trained " << r.steps << " steps: task_loss " << fmt(r.curve.back().task_loss) << " equiv_loss "
      << fmt(r.curve.back().equiv_loss) << "\nmodel " << a.out << " (" << model_hash(r.model) << ")\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct AuditArgs {
  std::string model;
  std::string group = "mirror";
  std::string image;
  std::string data;
  std::string report;
  double tol = kExactTolerance;
  double reduction_tol = kReductionTolerance;
  std::size_t probes = 64;
  std::uint64_t seed = AuditOptions{}.seed;
  bool trained_mode = false;
  bool normalize = false;
};

int cmd_audit(const AuditArgs& a, std::ostream& out, std::ostream& err) {
  const Model model = load_checkpoint(a.model);
  const std::optional<ImageShape> image = a.image.empty() ? std::nullopt : std::optional(parse_image_shape(a.image));
  const GroupPresentation group = named_group(a.group, model, image);
  AuditOptions opt;
  opt.tol = a.tol;
  opt.reduction_tol = a.reduction_tol;
  opt.probes = a.probes;
  opt.seed = a.seed;
  opt.normalize = a.normalize;
  opt.trained_mode = a.trained_mode;
  if (a.trained_mode) opt.certification = CertificationPolicy::Waived;
  json inputs = {{"model", file_entry(a.model)}};
  if (!a.data.empty()) {
    opt.inputs = prepare_dataset(load_config(a.data)).inputs;
    inputs["data_config"] = file_entry(a.data);
  }
  const AuditReport rep = audit(model, group, opt);

  json report = base_report("audit", a.seed, {{"tol", a.tol}, {"reduction_tol", a.reduction_tol}}, std::move(inputs));
  report["audit"] = rep.to_json();
  emit_report(report, a.report);

  out << "end-to-end residual " << fmt(rep.equivariance.residual) << " (output scale "
      << fmt(rep.equivariance.output_scale) << ")\n";
  out << "certification " << rep.certification << "\n";
  for (std::size_t i = 1; i < rep.layers.residuals.size(); ++i)
    out << "layer " << i << " equivariance residual " << fmt(rep.layers.residuals[i]) << "\n";
  if (!rep.passed) {
    err << "audit FAILED: " << rep.failure << "\n";
    return kExitCheckFailed;
  }
  out << "audit passed\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct ReduceArgs {
  std::string model;
  std::string out;
  std::string report;
  double reduction_tol = kReductionTolerance;
  std::size_t probes = 64;
  std::uint64_t seed = 0x5eb0de1ULL;
  bool normalize = false;
};

int cmd_reduce(const ReduceArgs& a, std::ostream& out, std::ostream&) {
  const Model model = load_checkpoint(a.model);
  const Model source = a.normalize ? normalize_for_reduction(model, a.reduction_tol) : model;
  const Reduction r = reduce(source, a.reduction_tol);
  const EmbeddingReport check = verify_embedding(source, r.model, r.embedding, a.probes, a.seed);
  save_checkpoint(r.model, a.out);

  json widths_before = json::array(), widths_after = json::array();
  for (const auto& s : source.latent_shapes()) widths_before.push_back(s.size());
  for (const auto& s : r.model.latent_shapes()) widths_after.push_back(s.size());
  json report = base_report("reduce", a.seed, {{"reduction_tol", a.reduction_tol}}, {{"model", file_entry(a.model)}});
  report["normalize"] = a.normalize;
  report["probes"] = a.probes;
  report["widths"] = {{"ambient", widths_before}, {"reduced", widths_after}};
  report["embedding"] = r.embedding.to_json();
  report["diagrams"] = check.to_json();
  report["reduced_model_hash"] = model_hash(r.model);
  emit_report(report, a.report);

  out << "widths";
  for (const auto& w : widths_before) out << " " << w.get<std::size_t>();
  out << " ->";
  for (const auto& w : widths_after) out << " " << w.get<std::size_t>();
  out << "\ndiagram residual " << fmt(check.max_layer_residual()) << ", end-to-end " << fmt(check.end_to_end_residual)
      << "\nreduced model " << a.out << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct CertifyArgs {
  std::string model;
  std::string report;
  double tol = kExactTolerance;
  double reduction_tol = kReductionTolerance;
  std::size_t probes = 64;
  std::uint64_t seed = CertifyOptions{}.seed;
  bool normalize = false;
};

int cmd_certify(const CertifyArgs& a, std::ostream& out, std::ostream& err) {
  const Model model = load_checkpoint(a.model);
  CertifyOptions opt;
  opt.tol = a.tol;
  opt.reduction_tol = a.reduction_tol;
  opt.normalize = a.normalize;
  opt.probes = a.probes;
  opt.seed = a.seed;
  const Certificate cert = certify_weak_identifiability(model, opt);
  json report = base_report("certify", a.seed, {{"tol", a.tol}, {"reduction_tol", a.reduction_tol}},
                            {{"model", file_entry(a.model)}});
  report["certificate"] = cert.to_json();
  emit_report(report, a.report);
  out << "status " << status_name(cert.status) << "\n";
  if (!cert.holds()) {
    err << "certification FAILED: " << cert.reason << "\n";
    return kExitCheckFailed;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct FilterArgs {
  std::string model;
  std::string image;
  std::string out;
  std::string csv;
  std::string report;
  double tol = kTrainedFilterTolerance;
  double bypass_tol = kTrainedFilterTolerance;
  std::size_t scale = 4;
};

int cmd_analyze_filters(const FilterArgs& a, std::ostream& out, std::ostream&) {
  const Model model = load_checkpoint(a.model);
  if (!model.layer(1).is_affine()) throw UnsupportedError("analyze-filters needs an affine first layer");
  const Matrix& w1 = model.layer(1).affine().weight;
  ImageShape image;
  if (!a.image.empty()) {
    image = parse_image_shape(a.image);
  } else {
    const std::size_t side = exact_sqrt(w1.cols());
    if (side == 0) throw ConfigError("cannot infer a square image from " + std::to_string(w1.cols()) + " inputs; pass --image");
    image = {1, side, side};
  }
  const auto cats = categorize_filters(w1, image, a.tol);
  if (!a.csv.empty()) write_file_atomic(a.csv, categories_csv(cats));
  if (!a.out.empty()) render_filter_grid(w1, image, cats, a.out, a.scale);

  json counts = json::object();
  for (const auto& c : cats) counts[category_name(c.kind)] = counts.value(category_name(c.kind), 0) + 1;
  json report = base_report("analyze-filters", 0, {{"tol", a.tol}, {"bypass_tol", a.bypass_tol}},
                            {{"model", file_entry(a.model)}});
  report["image"] = {image.channels, image.height, image.width};
  report["counts"] = counts;
  report["categorized_fraction"] = categorized_fraction(cats);
  json rows = json::array();
  for (const auto& c : cats) {
    json row = {{"category", category_name(c.kind)}, {"distance", c.match_distance}};
    row["partner"] = c.partner ? json(*c.partner) : json(nullptr);
    rows.push_back(std::move(row));
  }
  report["filters"] = std::move(rows);

  const auto& spec = model.layer(1).affine_spec();
  const bool bypass_applicable = spec.apply_activation && spec.activation.has_bypass_relation() && model.depth() >= 2 &&
                                 model.layer(2).is_affine();
  out << "categorized " << fmt(100.0 * categorized_fraction(cats)) << "% of " << cats.size() << " filters:";
  for (const auto& [name, n] : counts.items()) out << " " << name << "=" << n.get<int>();
  out << "\n";
  if (bypass_applicable) {
    json pairs = json::array();
    const auto found = detect_bypass_pairs(model, 1, a.bypass_tol);
    for (const auto& p : found)
      pairs.push_back({{"first", p.first}, {"second", p.second}, {"row_distance", p.row_distance},
                       {"column_distance", p.column_distance}});
    report["bypass_pairs"] = std::move(pairs);
    out << "bypass pairs " << found.size() << "\n";
  } else {
    report["bypass_pairs"] = nullptr;
  }
  emit_report(report, a.report);
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct AttentionArgs {
  std::string model;
  std::string image;
  std::string data;
  std::string out;
  std::string report;
  double tol = 1e-6;
  std::size_t probes = 16;
  std::uint64_t seed = 0x4ead;
  std::size_t maps = 4;
  std::size_t scale = 8;
};

int cmd_analyze_attention(const AttentionArgs& a, std::ostream& out, std::ostream&) {
  const Model model = load_checkpoint(a.model);
  if (!model.layer(1).is_attention()) throw UnsupportedError("analyze-attention needs an attention first layer");
  const std::optional<ImageShape> image = a.image.empty() ? std::nullopt : std::optional(parse_image_shape(a.image));
  const GroupPresentation group = model_mirror_group(model, image);
  const LatentAction& g = group.generators.at(0).on_input;

  json inputs = {{"model", file_entry(a.model)}};
  std::vector<Latent> probes;
  if (!a.data.empty()) {
    probes = prepare_dataset(load_config(a.data)).inputs;
    if (probes.size() > a.probes) probes.resize(a.probes);
    inputs["data_config"] = file_entry(a.data);
  } else {
    probes = gaussian_probes(model.latent_shape(0), a.probes, a.seed);
  }
  const HeadPermutation hp = detect_head_permutation(model, 1, g, a.tol, probes);
  json report = base_report("analyze-attention", a.seed, {{"tol", a.tol}}, std::move(inputs));
  report["probes"] = probes.size();
  report["head_permutation"] = hp.to_json();

  out << "head assignment:";
  for (const auto& h : hp.assignment) out << " " << (h ? std::to_string(*h) : std::string("-"));
  out << (hp.bijective ? " (bijective)\n" : " (unmatched heads)\n");

  const auto& params = model.layer(1).attention();
  if (params.positional) {
    const auto pe = check_positional_encoding_equivariance(*params.positional, g.token_perm,
                                                           GroupElement::identity(params.positional->cols()), a.tol);
    report["positional_encoding"] = {{"residual", pe.residual}, {"passed", pe.passed()}};
    out << "positional encoding residual " << fmt(pe.residual) << "\n";
  } else {
    report["positional_encoding"] = nullptr;
  }
  if (!a.out.empty()) {
    std::vector<Latent> shown(probes.begin(), probes.begin() + std::min(a.maps, probes.size()));
    render_attention_maps(model, shown, a.out, a.scale);
  }
  emit_report(report, a.report);
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct FixtureArgs {
  std::string name;
  std::string dir = LAYEQ_DEFAULT_FIXTURE_DIR;
  std::string report;
  std::size_t probes = 100;
  std::uint64_t seed = 0xb0b;
};

int cmd_verify_fixture(const FixtureArgs& a, std::ostream& out, std::ostream& err) {
  if (a.name != "appendix-b") throw ConfigError("unknown fixture '" + a.name + "' (expected appendix-b)");
  const std::string orig_path = a.dir + "/appendix_b_theta0.json";
  const std::string prime_path = a.dir + "/appendix_b_theta0_prime.json";
  const Model orig = load_checkpoint(orig_path);
  const Model prime = load_checkpoint(prime_path);

  double forward = 0.0;
  for (const auto& x : gaussian_probes(Shape::vector(2), a.probes, a.seed)) {
    const double expected = -2.0 * std::tanh(x.data()[0] + x.data()[1]);
    forward = std::max(forward, std::abs(orig.forward(x).data()[0] - expected));
  }
  const bool normalized = normalize_for_reduction(orig) == prime;
  const Reduction r = reduce(prime);
  const EmbeddingReport diagrams = verify_embedding(prime, r.model, r.embedding, a.probes, a.seed);
  const auto swap = swap_group(2, 1);
  const Matrix& w1 = prime.layer(1).affine().weight;
  const Matrix w1g = matmul(w1, action_matrix(swap.generators[0].on_input, Shape::vector(2)));
  const bool fixed = w1g == w1;
  const AuditReport rep = audit(prime, swap);
  const bool trivial = rep.passed && rep.actions.words.at(0).rho.at(1).is_trivial();

  const bool ok = forward <= 1e-12 && normalized && diagrams.max_layer_residual() == 0.0 &&
                  diagrams.end_to_end_residual == 0.0 && fixed && trivial;
  out << "forward max |f(x) + 2 tanh(x1 + x2)| = " << fmt(forward) << "\n";
  out << "normalize_for_reduction(theta0) == theta0': " << (normalized ? "yes" : "no") << "\n";
  for (std::size_t i = 1; i < diagrams.layer_residuals.size(); ++i)
    out << "diagram layer " << i << " residual " << fmt(diagrams.layer_residuals[i]) << "\n";
  out << "W1' g == W1': " << (fixed ? "yes" : "no") << "\n";
  out << "audit (S2 swap): " << (rep.passed ? "passed" : "FAILED") << ", hidden action "
      << (trivial ? "trivial" : "nontrivial") << "\n";

  json report = base_report("verify-fixture", a.seed, {{"forward", 1e-12}, {"diagram", 0.0}},
                            {{"theta0", file_entry(orig_path)}, {"theta0_prime", file_entry(prime_path)}});
  report["fixture"] = a.name;
  report["forward_residual"] = forward;
  report["normalized_matches"] = normalized;
  report["diagrams"] = diagrams.to_json();
  report["first_layer_fixed"] = fixed;
  report["audit"] = rep.to_json();
  report["passed"] = ok;
  emit_report(report, a.report);
  if (!ok) {
    err << "fixture check FAILED\n";
    return kExitCheckFailed;
  }
  return kExitOk;
}

}  // namespace

// ---------------------------------------------------------------------------

ImageShape parse_image_shape(const std::string& text) {
  ImageShape s;
  char x1 = 0, x2 = 0;
  std::istringstream in(text);
  if (!(in >> s.channels >> x1 >> s.height >> x2 >> s.width) || x1 != 'x' || x2 != 'x' || !in.eof() ||
      s.size() == 0)
    throw ConfigError("image shape '" + text + "' is not of the form CxHxW");
  return s;
}

GroupPresentation model_mirror_group(const Model& model, const std::optional<ImageShape>& image) {
  const Shape in = model.latent_shape(0);
  const std::size_t out_dim = model.latent_shape(model.depth()).size();
  if (in.tokens == 1) {
    ImageShape img;
    if (image) {
      img = *image;
    } else {
      const std::size_t side = exact_sqrt(in.size());
      if (side == 0) throw ConfigError("cannot infer a square image from " + std::to_string(in.size()) + " inputs");
      img = {1, side, side};
    }
    if (img.size() != in.size()) throw DimensionError("image shape does not match the model input");
    return mirror_group(img.channels, img.height, img.width, out_dim == img.size(), out_dim);
  }
  const std::size_t grid = exact_sqrt(in.tokens);
  const std::size_t channels = image ? image->channels : 1;
  const std::size_t patch = channels == 0 || in.dim * in.heads % channels ? 0 : exact_sqrt(in.dim * in.heads / channels);
  if (grid == 0 || patch == 0) throw ConfigError("token input is not a square grid of square patches");
  const std::size_t side = grid * patch;
  if (image && (image->height != side || image->width != side)) throw DimensionError("image shape does not match the token grid");
  GroupPresentation g = mirror_group(channels, side, side, out_dim == channels * side * side, out_dim);
  g.generators[0].on_input = token_mirror_action(channels, side, side, patch);
  return g;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Layerwise equivariance auditing and desk-scale training"};
  app.name("layeq");
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file and write its checkpoint");
  train_cmd->add_option("--config", ta.config, "TrainConfig JSON (defaults when omitted)")->check(CLI::ExistingFile);
  train_cmd->add_option("--out", ta.out, "Checkpoint path")->required();
  train_cmd->add_option("--curve", ta.curve, "Loss curve CSV path");
  train_cmd->add_option("--report", ta.report, "JSON report path");
  train_cmd->add_option("--seed", ta.seed, "Override the config seed");

  AuditArgs aa;
  auto* audit_cmd = app.add_subcommand("audit", "Audit a model for layerwise equivariance");
  audit_cmd->add_option("--model", aa.model, "Checkpoint path")->required()->check(CLI::ExistingFile);
  audit_cmd->add_option("--group", aa.group, "mirror, swap or trivial")->capture_default_str();
  audit_cmd->add_option("--image", aa.image, "Input image shape CxHxW (square single channel when omitted)");
  audit_cmd->add_option("--data", aa.data, "TrainConfig whose dataset supplies the probes")->check(CLI::ExistingFile);
  audit_cmd->add_option("--tol", aa.tol, "Relative residual tolerance")->capture_default_str();
  audit_cmd->add_option("--reduction-tol", aa.reduction_tol, "Neuron status tolerance")->capture_default_str();
  audit_cmd->add_option("--probes", aa.probes, "Gaussian probe count")->capture_default_str();
  audit_cmd->add_option("--seed", aa.seed, "Probe seed")->capture_default_str();
  audit_cmd->add_flag("--trained-mode", aa.trained_mode, "Skip reduction and waive brute-force certification");
  audit_cmd->add_flag("--normalize", aa.normalize, "Zero half-dead neurons first");
  audit_cmd->add_option("--report", aa.report, "JSON report path");

  ReduceArgs ra;
  auto* reduce_cmd = app.add_subcommand("reduce", "Drop inactive and merge redundant neurons");
  reduce_cmd->add_option("--model", ra.model, "Checkpoint path")->required()->check(CLI::ExistingFile);
  reduce_cmd->add_option("--out", ra.out, "Reduced checkpoint path")->required();
  reduce_cmd->add_option("--tol,--reduction-tol", ra.reduction_tol, "Neuron status tolerance")->capture_default_str();
  reduce_cmd->add_option("--probes", ra.probes, "Diagram probe count")->capture_default_str();
  reduce_cmd->add_option("--seed", ra.seed, "Probe seed")->capture_default_str();
  reduce_cmd->add_flag("--normalize", ra.normalize, "Zero half-dead neurons first");
  reduce_cmd->add_option("--report", ra.report, "JSON report path");

  CertifyArgs ca;
  auto* certify_cmd = app.add_subcommand("certify", "Brute-force weak identifiability certificate");
  certify_cmd->add_option("--model", ca.model, "Checkpoint path")->required()->check(CLI::ExistingFile);
  certify_cmd->add_option("--tol", ca.tol, "Symmetry residual tolerance")->capture_default_str();
  certify_cmd->add_option("--reduction-tol", ca.reduction_tol, "Neuron status tolerance")->capture_default_str();
  certify_cmd->add_option("--probes", ca.probes, "Probe count")->capture_default_str();
  certify_cmd->add_option("--seed", ca.seed, "Probe seed")->capture_default_str();
  certify_cmd->add_flag("--normalize", ca.normalize, "Zero half-dead neurons first");
  certify_cmd->add_option("--report", ca.report, "JSON report path");

  FilterArgs fa;
  auto* filters_cmd = app.add_subcommand("analyze-filters", "Categorize first-layer filters and find bypass pairs");
  filters_cmd->add_option("--model", fa.model, "Checkpoint path")->required()->check(CLI::ExistingFile);
  filters_cmd->add_option("--image", fa.image, "Filter image shape CxHxW");
  filters_cmd->add_option("--tol", fa.tol, "Filter distance tolerance")->capture_default_str();
  filters_cmd->add_option("--bypass-tol", fa.bypass_tol, "Bypass pair tolerance")->capture_default_str();
  filters_cmd->add_option("--out", fa.out, "Filter grid PPM path");
  filters_cmd->add_option("--scale", fa.scale, "Pixels per weight")->capture_default_str();
  filters_cmd->add_option("--csv", fa.csv, "Category CSV path");
  filters_cmd->add_option("--report", fa.report, "JSON report path");

  AttentionArgs at;
  auto* attention_cmd = app.add_subcommand("analyze-attention", "Match attention heads under mirroring");
  attention_cmd->add_option("--model", at.model, "Checkpoint path")->required()->check(CLI::ExistingFile);
  attention_cmd->add_option("--image", at.image, "Input image shape CxHxW");
  attention_cmd->add_option("--data", at.data, "TrainConfig whose dataset supplies the probes")->check(CLI::ExistingFile);
  attention_cmd->add_option("--tol", at.tol, "Fingerprint tolerance")->capture_default_str();
  attention_cmd->add_option("--probes", at.probes, "Probe count")->capture_default_str();
  attention_cmd->add_option("--seed", at.seed, "Probe seed")->capture_default_str();
  attention_cmd->add_option("--out", at.out, "Attention map PPM path");
  attention_cmd->add_option("--maps", at.maps, "Inputs shown in the PPM")->capture_default_str();
  attention_cmd->add_option("--report", at.report, "JSON report path");

  FixtureArgs xa;
  auto* fixture_cmd = app.add_subcommand("verify-fixture", "Check a shipped worked example");
  fixture_cmd->add_option("--name", xa.name, "Fixture name (appendix-b)")->required();
  fixture_cmd->add_option("--fixture-dir", xa.dir, "Fixture directory")->capture_default_str();
  fixture_cmd->add_option("--probes", xa.probes, "Probe count")->capture_default_str();
  fixture_cmd->add_option("--seed", xa.seed, "Probe seed")->capture_default_str();
  fixture_cmd->add_option("--report", xa.report, "JSON report path");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitError;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(ta, out, err);
    if (audit_cmd->parsed()) return cmd_audit(aa, out, err);
    if (reduce_cmd->parsed()) return cmd_reduce(ra, out, err);
    if (certify_cmd->parsed()) return cmd_certify(ca, out, err);
    if (filters_cmd->parsed()) return cmd_analyze_filters(fa, out, err);
    if (attention_cmd->parsed()) return cmd_analyze_attention(at, out, err);
    if (fixture_cmd->parsed()) return cmd_verify_fixture(xa, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace layeq::cli

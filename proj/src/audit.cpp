#include "layeq/audit.hpp"

#include <algorithm>
#include <cmath>

#include "layeq/checkpoint.hpp"
#include "layeq/error.hpp"

namespace layeq {

using json = nlohmann::json;

namespace {

double latent_scale(const Latent& x) { return max_abs(std::span<const double>(x.data())); }

LatentAction word_action(const GroupPresentation& group, const std::vector<std::size_t>& word, bool input) {
  LatentAction out;
  for (auto it = word.rbegin(); it != word.rend(); ++it) {
    const auto& g = group.generators.at(*it);
    out = compose(input ? g.on_input : g.on_output, out);
  }
  return out;
}

std::string word_name(const GroupPresentation& group, const std::vector<std::size_t>& word) {
  std::string name;
  for (std::size_t i = 0; i < word.size(); ++i) {
    if (i) name += "*";
    name += group.generators.at(word[i]).name;
  }
  return name.empty() ? "e" : name;
}

bool is_discrete(const LatentAction& a) {
  if (!a.element) return true;
  const auto v = a.element->variant();
  return v == GroupElement::Variant::Permutation || v == GroupElement::Variant::SignedPermutation;
}

// The model's own latents on `inputs`, or Gaussian latents of each shape.
std::vector<std::vector<Latent>> layer_inputs(const Model& model, std::size_t probes, std::uint64_t seed,
                                              const std::vector<Latent>& inputs) {
  std::vector<std::vector<Latent>> xs(model.depth() + 1);
  if (!inputs.empty()) {
    for (const auto& x : inputs) {
      const auto all = model.forward_all(x);
      for (std::size_t i = 0; i < model.depth(); ++i) xs[i + 1].push_back(all[i]);
    }
    return xs;
  }
  for (std::size_t i = 1; i <= model.depth(); ++i)
    xs[i] = gaussian_probes(model.latent_shape(i - 1), probes, seed + i);
  return xs;
}

// Local Lipschitz estimate of a layer in the max norm, from small random
// displacements around each probe.
double layer_lipschitz(const Layer& layer, const std::vector<Latent>& xs, std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (const auto& x : xs) {
    Latent y = x;
    const double step = 1e-4 * std::max(1.0, latent_scale(x));
    double moved = 0.0;
    for (double& v : y.data()) {
      const double d = step * rng.normal();
      v += d;
      moved = std::max(moved, std::abs(d));
    }
    if (moved == 0.0) continue;
    worst = std::max(worst, max_abs_diff(forward_layer(layer, x), forward_layer(layer, y)) / moved);
  }
  return worst;
}

}  // namespace

// ---------------------------------------------------------------------------

double EquivarianceCheck::relative() const { return residual / std::max(output_scale, 1e-300); }

json EquivarianceCheck::to_json() const {
  return {{"residual", residual},
          {"output_scale", output_scale},
          {"relative", relative()},
          {"per_generator", per_generator}};
}

EquivarianceCheck check_equivariance(const Model& model, const GroupPresentation& group,
                                     const std::vector<Latent>& probes) {
  EquivarianceCheck out;
  for (const auto& x : probes) out.output_scale = std::max(out.output_scale, latent_scale(model.forward(x)));
  for (const auto& g : group.generators) {
    double worst = 0.0;
    for (const auto& x : probes) {
      const Latent lhs = model.forward(act(g.on_input, x));
      const Latent rhs = act(g.on_output, model.forward(x));
      worst = std::max(worst, max_abs_diff(lhs, rhs));
    }
    out.per_generator.push_back(worst);
    out.residual = std::max(out.residual, worst);
  }
  return out;
}

EquivarianceCheck check_equivariance(const Model& model, const GroupPresentation& group, std::size_t probes,
                                     std::uint64_t seed) {
  return check_equivariance(model, group, gaussian_probes(model.latent_shape(0), probes, seed));
}

std::string policy_name(CertificationPolicy p) {
  switch (p) {
    case CertificationPolicy::Required: return "required";
    case CertificationPolicy::IfFeasible: return "if-feasible";
    case CertificationPolicy::Waived: return "waived";
  }
  return "if-feasible";
}

CertificationPolicy parse_policy(const std::string& name) {
  if (name == "required") return CertificationPolicy::Required;
  if (name == "if-feasible") return CertificationPolicy::IfFeasible;
  if (name == "waived") return CertificationPolicy::Waived;
  throw ConfigError("unknown certification policy '" + name + "' (expected required, if-feasible or waived)");
}

// ---------------------------------------------------------------------------

const WordAction* LayerwiseAction::find(const std::vector<std::size_t>& word) const {
  for (const auto& w : words)
    if (w.word == word) return &w;
  return nullptr;
}

json LayerwiseAction::to_json() const {
  json ws = json::array();
  for (const auto& w : words) {
    json rho = json::array();
    for (const auto& r : w.rho) rho.push_back(r.to_json());
    ws.push_back({{"word", w.name},
                  {"rho", std::move(rho)},
                  {"extraction_residuals",
                   std::vector<double>(w.residuals.begin() + (w.residuals.empty() ? 0 : 1), w.residuals.end())}});
  }
  json out = {{"words", std::move(ws)}, {"continuous", continuous}};
  if (failure)
    out["failure"] = {{"word", failure->word},
                      {"layer", failure->layer},
                      {"residual", failure->residual},
                      {"reason", failure->reason}};
  return out;
}

LayerwiseAction extract_layerwise_actions(const Model& model, const Reduction& reduction,
                                          const GroupPresentation& group, const AuditOptions& opt) {
  const Model& reduced = reduction.model;
  const SubmodelEmbedding& emb = reduction.embedding;
  const std::size_t depth = reduced.depth();
  if (model.depth() != depth) throw DimensionError("reduction depth does not match the model");
  const GroupFamily family = opt.family ? *opt.family : natural_family(reduced);

  LayerwiseAction la;
  la.generator_count = group.generators.size();
  std::vector<std::vector<std::size_t>> words;
  for (std::size_t g = 0; g < group.generators.size(); ++g) words.push_back({g});
  for (std::size_t g = 0; g < group.generators.size(); ++g)
    for (std::size_t h = 0; h < group.generators.size(); ++h) words.push_back({g, h});

  ExtractOptions eopt;
  eopt.tol = opt.tol;
  eopt.probes = opt.probes;
  eopt.seed = opt.seed;
  eopt.inputs = opt.inputs;
  eopt.check_end_to_end = !opt.trained_mode;

  for (const auto& word : words) {
    WordAction wa;
    wa.word = word;
    wa.name = word_name(group, word);
    const LatentAction in = word_action(group, word, true);
    const LatentAction out = word_action(group, word, false);

    std::vector<Layer> layers = reduced.layers();
    try {
      layers.front() = act_on_first_layer(inverse(in), layers.front());
    } catch (const Error& e) {
      la.failure = ActionFailure{wa.name, 1, 0.0, std::string("cannot absorb the input action: ") + e.what()};
      return la;
    }
    try {
      layers.back() = act_on_last_layer(inverse(out), layers.back());
    } catch (const Error& e) {
      la.failure = ActionFailure{wa.name, depth, 0.0, std::string("cannot absorb the output action: ") + e.what()};
      return la;
    }
    const Model moved(std::move(layers));

    Extraction ex;
    try {
      ex = extract_symmetry_detailed(reduced, moved, family, eopt);
    } catch (const PreconditionError& e) {
      la.failure = ActionFailure{wa.name, 0, 0.0, e.what()};
      return la;
    }
    if (!ex.sequence) {
      la.failure = ActionFailure{wa.name, ex.failed_layer, ex.failed_residual,
                                 "no element of K_" + std::to_string(ex.failed_layer) + " (" +
                                     family_name(family[ex.failed_layer]) + ") fits layer " +
                                     std::to_string(ex.failed_layer)};
      return la;
    }
    la.continuous = la.continuous || ex.sequence->continuous;
    wa.reduced = ex.sequence->elements;
    wa.residuals = ex.sequence->residuals;
    wa.rho.push_back(in);
    for (std::size_t i = 1; i < depth; ++i) {
      const auto lifted = emb.gamma(i, wa.reduced[i]);
      if (!lifted) {
        la.failure = ActionFailure{wa.name, i, 0.0, "reduced latent symmetry does not lift through gamma_" +
                                                        std::to_string(i)};
        return la;
      }
      wa.rho.push_back(lifted->is_identity() ? LatentAction::trivial() : LatentAction::of(*lifted));
    }
    wa.rho.push_back(out);
    la.words.push_back(std::move(wa));
  }
  return la;
}

// ---------------------------------------------------------------------------

json HomomorphismReport::to_json() const {
  json cs = json::array();
  for (const auto& c : checks) {
    json j = {{"name", c.name}, {"latent", c.layer}, {"residual", c.residual}};
    j["exact"] = c.exact ? json(*c.exact) : json(nullptr);
    cs.push_back(std::move(j));
  }
  return {{"checks", std::move(cs)}, {"max_residual", max_residual}, {"probe_scale", probe_scale}};
}

HomomorphismReport verify_homomorphism(const Model& model, const LayerwiseAction& la, const GroupPresentation& group,
                                       std::size_t probes, std::uint64_t seed) {
  HomomorphismReport rep;
  const std::size_t n = group.generators.size();
  if (la.failure) throw PreconditionError("layerwise actions were not extracted: " + la.failure->reason);

  auto rho_of = [&](const std::vector<std::size_t>& word, std::size_t i) {
    LatentAction out;
    for (auto it = word.rbegin(); it != word.rend(); ++it) {
      const WordAction* w = la.find({*it});
      if (!w) throw PreconditionError("missing action for generator " + group.generators.at(*it).name);
      out = compose(w->rho.at(i), out);
    }
    return out;
  };
  auto add = [&](std::string name, std::size_t i, const LatentAction& lhs, const LatentAction& rhs) {
    const Shape shape = model.latent_shape(i);
    double worst = 0.0;
    for (const auto& x : gaussian_probes(shape, probes, seed + i)) {
      rep.probe_scale = std::max(rep.probe_scale, latent_scale(x));
      worst = std::max(worst, max_abs_diff(act(lhs, x), act(rhs, x)));
    }
    HomomorphismReport::Check c{std::move(name), i, worst, std::nullopt};
    if (is_discrete(lhs) && is_discrete(rhs))
      c.exact = max_abs_diff(action_matrix(lhs, shape), action_matrix(rhs, shape)) == 0.0;
    rep.max_residual = std::max(rep.max_residual, worst);
    rep.checks.push_back(std::move(c));
  };

  for (std::size_t i = 0; i <= model.depth(); ++i) {
    for (std::size_t g = 0; g < n; ++g) {
      for (std::size_t h = 0; h < n; ++h) {
        const WordAction* gh = la.find({g, h});
        if (!gh) throw PreconditionError("missing action for a generator product");
        add("rho(" + group.generators[g].name + ")rho(" + group.generators[h].name + ")=rho(" + gh->name + ")", i,
            rho_of({g, h}, i), gh->rho.at(i));
      }
      if (group.generators[g].order == 2)
        add("rho(" + group.generators[g].name + ")^2=1", i, rho_of({g, g}, i), LatentAction::trivial());
    }
    for (const auto& rel : group.relators)
      add("rho(" + word_name(group, rel) + ")=1", i, rho_of(rel, i), LatentAction::trivial());
  }
  return rep;
}

// ---------------------------------------------------------------------------

double LayerEquivariance::max_relative() const {
  double worst = 0.0;
  for (std::size_t i = 1; i < residuals.size(); ++i)
    worst = std::max(worst, residuals[i] / std::max(1.0, scales[i]));
  return worst;
}

json LayerEquivariance::to_json() const {
  auto tail = [](const std::vector<double>& v) {
    return std::vector<double>(v.begin() + (v.empty() ? 0 : 1), v.end());
  };
  return {{"residuals", tail(residuals)}, {"scales", tail(scales)}, {"lipschitz", tail(lipschitz)}};
}

LayerEquivariance verify_layerwise_equivariance(const Model& model, const LayerwiseAction& la, std::size_t probes,
                                                std::uint64_t seed, const std::vector<Latent>& inputs) {
  const std::size_t depth = model.depth();
  LayerEquivariance out;
  out.residuals.assign(depth + 1, 0.0);
  out.scales.assign(depth + 1, 0.0);
  out.lipschitz.assign(depth + 1, 0.0);
  const auto xs = layer_inputs(model, probes, seed, inputs);
  for (std::size_t i = 1; i <= depth; ++i) {
    const Layer& layer = model.layer(i);
    for (const auto& x : xs[i]) out.scales[i] = std::max(out.scales[i], latent_scale(forward_layer(layer, x)));
    out.lipschitz[i] = layer_lipschitz(layer, xs[i], seed ^ (0x11b5ULL + i));
    for (std::size_t g = 0; g < la.generator_count && g < la.words.size(); ++g) {
      const auto& rho = la.words[g].rho;
      for (const auto& x : xs[i]) {
        const Latent lhs = act(rho.at(i), forward_layer(layer, x));
        const Latent rhs = forward_layer(layer, act(rho.at(i - 1), x));
        out.residuals[i] = std::max(out.residuals[i], max_abs_diff(lhs, rhs));
      }
    }
  }
  return out;
}

json CompositionCheck::to_json() const {
  return {{"end_to_end", end_to_end},
          {"max_layer_residual", max_layer_residual},
          {"lipschitz_bound", lipschitz_bound},
          {"bound", bound},
          {"consistent", consistent}};
}

CompositionCheck composition_check(const EquivarianceCheck& e2e, const LayerEquivariance& layers) {
  CompositionCheck c;
  c.end_to_end = e2e.residual;
  const std::size_t depth = layers.residuals.empty() ? 0 : layers.residuals.size() - 1;
  for (std::size_t i = 1; i <= depth; ++i) {
    c.max_layer_residual = std::max(c.max_layer_residual, layers.residuals[i]);
    double amplification = 1.0;
    for (std::size_t j = i + 1; j <= depth; ++j) amplification *= std::max(1.0, layers.lipschitz[j]);
    c.lipschitz_bound = std::max(c.lipschitz_bound, amplification);
  }
  c.bound = static_cast<double>(depth) * c.lipschitz_bound * c.max_layer_residual;
  // Allow for rounding when every residual is at noise level.
  c.consistent = c.end_to_end <= c.bound + 1e-12 * std::max(1.0, e2e.output_scale);
  return c;
}

// ---------------------------------------------------------------------------

json AuditReport::to_json() const {
  json per_layer = json::array();
  const std::size_t depth = layers.residuals.empty() ? 0 : layers.residuals.size() - 1;
  for (std::size_t i = 0; i <= depth; ++i) {
    json rho = json::array();
    for (std::size_t g = 0; g < actions.generator_count && g < actions.words.size(); ++g)
      rho.push_back({{"generator", actions.words[g].name}, {"action", actions.words[g].rho.at(i).to_json()}});
    json hom = json::array();
    for (const auto& c : homomorphism.checks)
      if (c.layer == i) hom.push_back({{"name", c.name}, {"residual", c.residual}});
    json entry = {{"latent", i}, {"rho", std::move(rho)}, {"homomorphism_residuals", std::move(hom)}};
    if (i > 0) {
      entry["equivariance_residual"] = layers.residuals[i];
      entry["output_scale"] = layers.scales[i];
    }
    per_layer.push_back(std::move(entry));
  }
  json out = {{"model_hash", model_hash},
              {"group", group},
              {"generators", generators},
              {"passed", passed},
              {"failure", failure},
              {"tolerances", {{"tol", options.tol}, {"reduction_tol", options.reduction_tol}}},
              {"seeds", {{"audit", options.seed}}},
              {"probes", options.probes},
              {"trained_mode", options.trained_mode},
              {"normalize", options.normalize},
              {"data_probes", options.inputs.size()},
              {"certification_policy", policy_name(options.certification)},
              {"certification", certification},
              {"equivariance", equivariance.to_json()},
              {"actions", actions.to_json()},
              {"homomorphism", homomorphism.to_json()},
              {"layers", layers.to_json()},
              {"composition", composition.to_json()},
              {"per_layer", std::move(per_layer)}};
  out["certificate"] = certificate ? certificate->to_json() : json(nullptr);
  if (reduction) {
    std::vector<std::size_t> widths;
    for (const auto& s : reduction->model.latent_shapes()) widths.push_back(s.size());
    out["reduction"] = {{"reduced_widths", widths}, {"embedding", reduction->embedding.to_json()}};
  } else {
    out["reduction"] = nullptr;
  }
  return out;
}

AuditReport audit(const Model& model, const GroupPresentation& group, const AuditOptions& opt) {
  AuditReport rep;
  rep.model_hash = layeq::model_hash(model);
  rep.group = group.name;
  for (const auto& g : group.generators) rep.generators.push_back(g.name);
  rep.options = opt;
  auto fail = [&](std::string why) {
    rep.passed = false;
    rep.failure = std::move(why);
    return rep;
  };
  auto within = [&](double residual, double scale) { return residual <= opt.tol * std::max(1.0, scale); };

  const std::vector<Latent> probes =
      opt.inputs.empty() ? gaussian_probes(model.latent_shape(0), opt.probes, opt.seed) : opt.inputs;
  rep.equivariance = check_equivariance(model, group, probes);
  for (std::size_t g = 0; g < group.generators.size(); ++g) {
    if (!within(rep.equivariance.per_generator[g], rep.equivariance.output_scale))
      return fail("generator " + group.generators[g].name + ": end-to-end equivariance residual " +
                  std::to_string(rep.equivariance.per_generator[g]) + " exceeds tolerance");
  }

  const Model prepared = opt.normalize && !opt.trained_mode ? normalize_for_reduction(model) : model;
  if (opt.trained_mode) {
    rep.reduction = Reduction{model, trivial_embedding(model)};
  } else {
    try {
      rep.reduction = reduce(prepared, opt.reduction_tol);
    } catch (const PreconditionError& e) {
      return fail(e.what());
    }
  }

  if (opt.trained_mode || opt.certification == CertificationPolicy::Waived) {
    rep.certification = opt.trained_mode ? "waived (trained mode)" : "waived";
  } else {
    CertifyOptions copt;
    copt.tol = opt.tol;
    copt.reduction_tol = opt.reduction_tol;
    copt.probes = opt.probes;
    copt.seed = opt.seed;
    try {
      rep.certificate = certify_weak_identifiability(prepared, copt);
      rep.certification = status_name(rep.certificate->status);
    } catch (const CapacityError& e) {
      if (opt.certification == CertificationPolicy::Required) return fail(e.what());
      rep.certification = std::string("skipped: ") + e.what();
    }
    if (rep.certificate) {
      const auto st = rep.certificate->status;
      if (st == Certificate::Status::NotCertified)
        return fail("weak identifiability not certified: " + rep.certificate->reason);
      if (st == Certificate::Status::ContinuousUnchecked && opt.certification == CertificationPolicy::Required)
        return fail("weak identifiability required but " + rep.certificate->reason);
    }
  }

  rep.actions = extract_layerwise_actions(prepared, *rep.reduction, group, opt);
  if (rep.actions.failure) {
    const auto& f = *rep.actions.failure;
    return fail("generator " + f.word + ": extraction failed at layer " + std::to_string(f.layer) + " (residual " +
                std::to_string(f.residual) + "): " + f.reason);
  }
  rep.homomorphism = verify_homomorphism(prepared, rep.actions, group, 32, opt.seed + 0x40e0ULL);
  rep.layers = verify_layerwise_equivariance(prepared, rep.actions, opt.probes, opt.seed + 0x1a9e5ULL, opt.inputs);
  rep.composition = composition_check(rep.equivariance, rep.layers);

  if (!within(rep.homomorphism.max_residual, rep.homomorphism.probe_scale)) {
    for (const auto& c : rep.homomorphism.checks)
      if (!within(c.residual, rep.homomorphism.probe_scale))
        return fail(c.name + " fails at latent " + std::to_string(c.layer) + " (residual " +
                    std::to_string(c.residual) + ")");
  }
  for (std::size_t i = 1; i < rep.layers.residuals.size(); ++i)
    if (!within(rep.layers.residuals[i], rep.layers.scales[i]))
      return fail("layer " + std::to_string(i) + " is not equivariant under the extracted actions (residual " +
                  std::to_string(rep.layers.residuals[i]) + ")");
  rep.passed = true;
  return rep;
}

}  // namespace layeq

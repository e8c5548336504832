// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "layeq/analyze.hpp"
#include "layeq/audit.hpp"
#include "layeq/checkpoint.hpp"
#include "layeq/identify.hpp"
#include "layeq/io.hpp"
#include "layeq/submodel.hpp"
#include "layeq/train.hpp"

#include "planted.hpp"

using namespace layeq;

namespace {

const std::string kFixtures = LAYEQ_FIXTURE_DIR;
const std::string kConfigs = LAYEQ_CONFIG_DIR;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

bool same_matrix(const GroupElement& a, const GroupElement& b) {
  const Matrix am = a.to_matrix(), bm = b.to_matrix();
  return am.rows() == bm.rows() && am.cols() == bm.cols() && max_abs_diff(am, bm) == 0.0;
}

bool is_signed_permutation(const LatentAction& a) {
  if (!a.element) return true;
  const auto v = a.element->variant();
  return v == GroupElement::Variant::Permutation || v == GroupElement::Variant::SignedPermutation;
}

TrainConfig load_config(const std::string& name) {
  return TrainConfig::from_json(nlohmann::json::parse(read_file(kConfigs + "/" + name)));
}

// ---------------------------------------------------------------------------

void appendix_b(Outcome& o) {
  const Model orig = load_checkpoint(kFixtures + "/appendix_b_theta0.json");
  const Model prime = load_checkpoint(kFixtures + "/appendix_b_theta0_prime.json");

  double forward = 0.0;
  for (const auto& x : gaussian_probes(Shape::vector(2), 100, 0xb)) {
    const double expected = -2.0 * std::tanh(x.data()[0] + x.data()[1]);
    forward = std::max(forward, std::abs(orig.forward(x).data()[0] - expected));
  }
  o.require(forward <= 1e-12, "(a) forward values");

  o.require(normalize_for_reduction(orig) == prime, "(b) normalization");

  const Reduction r = reduce(prime);
  const EmbeddingReport diagrams = verify_embedding(prime, r.model, r.embedding, 100);
  o.require(r.model.latent_shape(1).size() == 1, "(c) width-1 submodel");
  o.require(diagrams.layer_residuals.size() == 3 && diagrams.layer_residuals[1] == 0.0 &&
                diagrams.layer_residuals[2] == 0.0,
            "(c) diagram residuals");

  const auto swap = swap_group(2, 1);
  const Matrix& w1 = prime.layer(1).affine().weight;
  o.require(matmul(w1, action_matrix(swap.generators[0].on_input, Shape::vector(2))) == w1, "(d) W1' g = W1'");

  const AuditReport rep = audit(prime, swap);
  o.require(rep.passed && rep.certification == "certified", "(e) audit certified");
  if (rep.passed) {
    const auto& rho = rep.actions.words.at(0).rho;
    o.require(rho.at(1).is_trivial(), "(e) trivial hidden action");
    o.require(rep.layers.residuals[1] == 0.0 && rep.layers.residuals[2] == 0.0, "(e) layer residuals");
  }
  o.detail << "forward " << forward << ", diagrams " << diagrams.layer_residuals[1] << "/" << diagrams.layer_residuals[2]
           << ", certification " << rep.certification;
}

void plant_and_recover(Outcome& o) {
  std::size_t recovered = 0, unique = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng(1000 + s);
    const std::size_t depth = 2 + rng.index(2);
    std::vector<std::size_t> widths;
    for (std::size_t i = 0; i <= depth; ++i) widths.push_back(2 + rng.index(3));
    const auto pair = testkit::planted_signed_pair(widths, 5000 + s);
    const auto family = natural_family(pair.a);
    const auto seq = extract_symmetry(pair.a, pair.b, family);
    bool exact = seq.has_value();
    for (std::size_t i = 0; exact && i < pair.k.size(); ++i) exact = same_matrix(seq->elements[i], pair.k[i]);
    recovered += exact;
    const auto all = brute_force_symmetries(pair.a, pair.b, family);
    bool sole = all.size() == 1;
    for (std::size_t i = 0; sole && i < pair.k.size(); ++i) sole = same_matrix(all[0].elements[i], pair.k[i]);
    unique += sole;
  }
  o.require(recovered == 100, "exact recovery");
  o.require(unique == 100, "brute-force uniqueness");
  o.detail << recovered << "/100 recovered, " << unique << "/100 unique";
}

void planted_pipeline(Outcome& o) {
  double worst = 0.0;
  std::size_t models = 0;
  for (std::uint64_t seed = 40; seed < 45; ++seed, ++models) {
    const auto planted = testkit::planted_mirror_mlp(4, 4, 8, 3, 3, seed);
    const Reduction red = reduce(planted.model);
    AuditOptions opt;
    const LayerwiseAction la = extract_layerwise_actions(planted.model, red, planted.group, opt);
    o.require(!la.failure, "extraction");
    if (la.failure || la.words.empty()) continue;
    const auto& rho = la.words[0].rho;
    for (std::size_t i = 0; i < rho.size(); ++i) {
      o.require(is_signed_permutation(rho[i]), "signed permutation at latent " + std::to_string(i));
      o.require(compose(rho[i], rho[i]).is_trivial(), "rho^2 = 1 at latent " + std::to_string(i));
    }
    const LayerEquivariance eq = verify_layerwise_equivariance(planted.model, la);
    for (std::size_t i = 1; i < eq.residuals.size(); ++i) worst = std::max(worst, eq.residuals[i]);
  }
  o.require(worst < 1e-9, "layer residual");
  o.detail << models << " models, worst layer residual " << worst;
}

struct DeskRun {
  TrainConfig config;
  Dataset data;
  TrainResult result;
};

DeskRun desk_run(const std::string& config_name) {
  DeskRun run{load_config(config_name), {}, {}};
  run.data = prepare_dataset(run.config);
  run.result = train(run.config, run.data);
  return run;
}

void learned_equivariance(Outcome& o, const DeskRun& run) {
  const Model& m = run.result.model;
  o.require(!run.result.diverged, "training diverged");
  o.require(run.config.widths == std::vector<std::size_t>{64, 16, 64} && run.config.epochs == 400 &&
                run.config.lambda == 5.0 && run.config.warmup_fraction == 0.5 &&
                run.config.activations == std::vector<Activation>{Activation::tanh()},
            "desk configuration");
  const auto group = mirror_group(1, 8, 8, true, 64);
  const EquivarianceCheck on_data = check_equivariance(m, group, run.data.inputs);
  const EquivarianceCheck on_gauss = check_equivariance(m, group);
  o.require(on_data.relative() < 5e-2 && on_gauss.relative() < 5e-2, "(a) relative equivariance");

  AuditOptions opt;
  opt.trained_mode = true;
  opt.certification = CertificationPolicy::Waived;
  opt.tol = 1e-1;
  opt.inputs = run.data.inputs;
  const AuditReport rep = audit(m, group, opt);
  o.require(rep.passed, "(b) trained-mode audit: " + rep.failure);
  double extract = 0.0;
  if (!rep.actions.words.empty()) {
    const auto& w = rep.actions.words[0];
    for (std::size_t i = 1; i < w.residuals.size(); ++i) extract = std::max(extract, w.residuals[i]);
    for (const auto& a : w.rho) o.require(is_signed_permutation(a), "(b) signed permutation");
  }
  o.require(rep.passed && extract < 1e-1, "(b) extraction residual");

  const auto cats = categorize_filters(m.layer(1).affine().weight, ImageShape{1, 8, 8}, kTrainedFilterTolerance);
  const double fraction = categorized_fraction(cats);
  o.require(fraction >= 0.6, "(c) categorized fraction");
  o.detail << "task loss " << run.result.curve.back().task_loss << ", relative equivariance " << on_data.relative()
           << " (data) " << on_gauss.relative() << " (gaussian), extraction residual " << extract << ", categorized "
           << 100.0 * fraction << "%";
}

void gradients(Outcome& o) {
  double worst = 0.0;
  std::size_t checks = 0;
  auto check = [&](TrainConfig config, const std::string& what) {
    config.dataset = DatasetSpec{DatasetKind::Blobs, 16, 4, 9};
    const Dataset data = prepare_dataset(config);
    const Model model = initial_model(config, data);
    const std::vector<std::size_t> batch{0, 1, 2, 3, 4, 5, 6, 7};
    for (double lambda : {0.0, 5.0}) {
      const GradientCheck g = gradient_check(model, data, batch, config.task, lambda, 20);
      o.require(g.worst() < 1e-5, what + " lambda " + std::to_string(lambda));
      worst = std::max(worst, g.worst());
      ++checks;
    }
  };
  for (const Activation& sigma : {Activation::tanh(), Activation::gelu()}) {
    TrainConfig c;
    c.widths = {16, 6, 5, 16};
    c.activations = {sigma, sigma};
    check(c, sigma.name());
  }
  for (bool positional : {false, true}) {
    TrainConfig c;
    c.attention = AttentionConfig{2, 2, 3, positional};
    c.widths = {16, 6, 5, 16};
    c.activations = {Activation::gelu()};
    check(c, positional ? "attention+pe" : "attention");
  }
  o.detail << checks << " checks x 20 coordinates per layer, worst relative error " << worst;
}

void gelu_degeneracy(Outcome& o, const DeskRun& tanh_run, const DeskRun& gelu_run) {
  o.require(!gelu_run.result.diverged, "GELU training diverged");
  o.require(gelu_run.config.activations == std::vector<Activation>{Activation::gelu()}, "GELU configuration");
  const auto pairs = detect_bypass_pairs(gelu_run.result.model, 1, kTrainedFilterTolerance);
  o.require(!pairs.empty(), "GELU bypass pair");
  const auto cats = categorize_filters(tanh_run.result.model.layer(1).affine().weight, ImageShape{1, 8, 8}, 0.05);
  std::size_t negated = 0;
  for (const auto& c : cats) negated += c.kind == FilterCategoryKind::NegatedCopy;
  o.require(negated == 0, "Tanh negated copies");
  o.detail << pairs.size() << " GELU bypass pairs at tol " << kTrainedFilterTolerance << ", " << negated
           << " Tanh NegatedCopy filters at tol 0.05";
}

void head_permutation(Outcome& o) {
  const LatentAction g = token_mirror_action(1, 8, 8, 2);
  const Matrix conj = g.element->to_matrix();
  double worst = 0.0;
  std::size_t layers = 0;
  for (bool query : {true, false}) {
    for (std::uint64_t seed = 70; seed < 73; ++seed, ++layers) {
      const Model m({testkit::planted_head_layer(16, 4, {1, 0, 2, 3}, conj, seed, query)});
      const HeadPermutation hp = detect_head_permutation(m, 1, g, 1e-8);
      const std::vector<std::optional<std::size_t>> expected{1, 0, 2, 3};
      o.require(hp.bijective && hp.assignment == expected, "transposition (0 1)");
      for (double r : hp.residuals) worst = std::max(worst, r);
    }
  }
  o.require(worst < 1e-8, "residuals");
  o.detail << layers << " planted layers, worst residual " << worst;
}

void adjunction(Outcome& o) {
  Rng rng(0xad7);
  const ParamMap same = [](const LayerParams& p) { return p; };
  double worst_plain = 0.0, best_pe = 1e300;
  for (int t = 0; t < 50; ++t) {
    AttentionSpec spec{6, 4, 3, 2, 1, false, false};
    const Layer plain = random_attention(spec, rng);
    spec.positional_encoding = true;
    const Layer pe = random_attention(spec, rng);
    std::vector<std::size_t> perm = rng.permutation(6);
    while (perm == std::vector<std::size_t>{0, 1, 2, 3, 4, 5}) perm = rng.permutation(6);
    const LatentAction g{perm, std::nullopt};
    const auto probes = gaussian_probes(Shape{6, 4, 1}, 4, 300 + t);
    worst_plain = std::max(worst_plain, verify_generalized_adjunction(g, g, same, plain, probes));
    best_pe = std::min(best_pe, verify_generalized_adjunction(g, g, same, pe, probes));
  }
  o.require(worst_plain < 1e-10, "token permutation without encodings");
  o.require(best_pe > 1e-2, "random encodings break the adjunction");

  const LatentAction g = token_mirror_action(1, 8, 8, 2);
  const auto& pi = g.token_perm;
  const GroupElement& k = *g.element;
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
  const auto ok = check_positional_encoding_equivariance(planted, pi, k, 0.0);
  const auto bad = check_positional_encoding_equivariance(rng.normal_matrix(16, 4), pi, k, 1e-2);
  o.require(ok.residual == 0.0 && ok.passed(), "planted encoding scored 0");
  o.require(!bad.passed(), "random encoding rejected");
  o.detail << "plain worst " << worst_plain << ", encoded best " << best_pe << ", planted encoding " << ok.residual
           << ", random encoding " << bad.residual;
}

struct Criterion {
  int number;
  std::string name;
  double budget_seconds;
  std::function<void(Outcome&)> body;
};

}  // namespace

int main(int argc, char** argv) {
  std::optional<DeskRun> tanh_run;
  auto tanh_desk = [&]() -> const DeskRun& {
    if (!tanh_run) tanh_run = desk_run("desk_tanh.json");
    return *tanh_run;
  };

  const std::vector<Criterion> criteria{
      {1, "appendix B fixture", 1.0, appendix_b},
      {2, "plant-and-recover identifiability", 30.0, plant_and_recover},
      {3, "layerwise actions on planted equivariant models", 10.0, planted_pipeline},
      {4, "learned equivariance at desk scale", 300.0,
       [&](Outcome& o) {
         learned_equivariance(o, tanh_desk());
       }},
      {5, "gradient correctness", 0.0, gradients},
      {6, "GELU degeneracy", 0.0,
       [&](Outcome& o) {
         const DeskRun& tanh = tanh_desk();
         gelu_degeneracy(o, tanh, desk_run("desk_gelu.json"));
       }},
      {7, "attention head permutation", 5.0, head_permutation},
      {8, "generalized adjunction", 0.0, adjunction},
  };

  // Optional arguments select criteria by number.
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.number) == selected.end()) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.body(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << " [exception: " << e.what() << "]";
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_seconds > 0.0 && seconds >= c.budget_seconds) {
      o.pass = false;
      o.detail << " [over the " << c.budget_seconds << " s budget]";
    }
    failures += !o.pass;
    std::printf("%s criterion %d: %s (%.2f s) %s\n", o.pass ? "PASS" : "FAIL", c.number, c.name.c_str(), seconds,
                o.detail.str().c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}

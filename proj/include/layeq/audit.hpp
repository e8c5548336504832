#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "layeq/group.hpp"
#include "layeq/identify.hpp"
#include "layeq/model.hpp"
#include "layeq/submodel.hpp"

namespace layeq {

/// End-to-end residual max |f(g x) - g f(x)| over generators and probes.
struct EquivarianceCheck {
  double residual = 0.0;
  double output_scale = 0.0;  // max |f(x)| over the probes
  std::vector<double> per_generator;

  double relative() const;
  nlohmann::json to_json() const;
};

EquivarianceCheck check_equivariance(const Model& model, const GroupPresentation& group,
                                     const std::vector<Latent>& probes);
EquivarianceCheck check_equivariance(const Model& model, const GroupPresentation& group, std::size_t probes = 64,
                                     std::uint64_t seed = 0xe9c7ULL);

enum class CertificationPolicy { Required, IfFeasible, Waived };
std::string policy_name(CertificationPolicy p);
CertificationPolicy parse_policy(const std::string& name);

struct AuditOptions {
  /// Relative tolerance for end-to-end, extraction and per-layer residuals
  /// (residual <= tol * max(1, output scale)).
  double tol = kExactTolerance;
  double reduction_tol = kReductionTolerance;
  std::size_t probes = 64;
  std::uint64_t seed = 0xa0d17ULL;
  CertificationPolicy certification = CertificationPolicy::IfFeasible;
  /// Skip reduction and certification and measure on `inputs` instead of
  /// Gaussian probes.
  bool trained_mode = false;
  /// Zero half-dead neurons before reducing.
  bool normalize = false;
  std::vector<Latent> inputs;
  /// Latent groups of the (reduced) model; the natural family when unset.
  std::optional<GroupFamily> family;
};

/// rho_0..rho_L for one group word (a generator or a product of two).
struct WordAction {
  std::vector<std::size_t> word;
  std::string name;
  std::vector<LatentAction> rho;       // ambient, latents 0..L
  std::vector<GroupElement> reduced;   // k~_0..k~_L on the reduced model
  std::vector<double> residuals;       // extraction residuals, index 0 unused
};

struct ActionFailure {
  std::string word;
  std::size_t layer = 0;
  double residual = 0.0;
  std::string reason;
};

struct LayerwiseAction {
  /// The generators in order, then every ordered pair (g, h) as g h.
  std::vector<WordAction> words;
  std::size_t generator_count = 0;
  bool continuous = false;
  std::optional<ActionFailure> failure;

  const WordAction* find(const std::vector<std::size_t>& word) const;
  nlohmann::json to_json() const;
};

/// Builds theta' = (g^-1 . theta_1, theta_2, ..., g^-1 . theta_L) on the
/// reduced model for every word g, extracts k~ with extract_symmetry and
/// pushes it to the ambient model through gamma.
LayerwiseAction extract_layerwise_actions(const Model& model, const Reduction& reduction,
                                          const GroupPresentation& group, const AuditOptions& opt);

struct HomomorphismReport {
  struct Check {
    std::string name;
    std::size_t layer = 0;  // latent index
    double residual = 0.0;
    /// For discrete elements: the composite is exactly the expected element.
    std::optional<bool> exact;
  };
  std::vector<Check> checks;
  double max_residual = 0.0;
  double probe_scale = 0.0;  // max |x| over the latent probes

  bool passed(double tol) const { return max_residual <= tol * std::max(1.0, probe_scale); }
  nlohmann::json to_json() const;
};

/// rho_i(g) rho_i(h) = rho_i(gh) for every ordered pair, rho_i(g)^2 = 1 for
/// order-2 generators and every relator evaluating to the identity, at every
/// latent, measured on Gaussian latents.
HomomorphismReport verify_homomorphism(const Model& model, const LayerwiseAction& la, const GroupPresentation& group,
                                       std::size_t probes = 32, std::uint64_t seed = 0x40e0ULL);

struct LayerEquivariance {
  std::vector<double> residuals;  // per layer 1..L, index 0 unused
  std::vector<double> scales;     // max |f_i(x)| over the probes
  /// Probe-based Lipschitz estimate of each layer (index 0 unused).
  std::vector<double> lipschitz;

  double max_relative() const;
  nlohmann::json to_json() const;
};

/// residual_i = max over generators and probes of
/// |rho_i(g) f_i(x) - f_i(rho_{i-1}(g) x)|. Latent probes are Gaussian, or the
/// model's latents on `inputs` when given.
LayerEquivariance verify_layerwise_equivariance(const Model& model, const LayerwiseAction& la,
                                                std::size_t probes = 64, std::uint64_t seed = 0x1a9e5ULL,
                                                const std::vector<Latent>& inputs = {});

/// Per-layer residuals chained through the measured Lipschitz estimates.
struct CompositionCheck {
  double end_to_end = 0.0;
  double max_layer_residual = 0.0;
  double lipschitz_bound = 1.0;  // max over i of prod_{j > i} C_j
  double bound = 0.0;            // L * C * eps
  bool consistent = true;

  nlohmann::json to_json() const;
};

CompositionCheck composition_check(const EquivarianceCheck& e2e, const LayerEquivariance& layers);

struct AuditReport {
  std::string model_hash;
  std::string group;
  std::vector<std::string> generators;
  AuditOptions options;
  EquivarianceCheck equivariance;
  std::string certification = "not_run";
  std::optional<Certificate> certificate;
  std::optional<Reduction> reduction;
  LayerwiseAction actions;
  HomomorphismReport homomorphism;
  LayerEquivariance layers;
  CompositionCheck composition;
  bool passed = false;
  std::string failure;

  nlohmann::json to_json() const;
};

AuditReport audit(const Model& model, const GroupPresentation& group, const AuditOptions& opt = {});

}  // namespace layeq

#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "layeq/group.hpp"
#include "layeq/model.hpp"

namespace layeq {

inline constexpr double kReductionTolerance = 1e-8;

/// Status of one hidden unit: a neuron of an MLP latent or a head of an
/// attention latent. A redundant unit replicates `partner` (always a lower,
/// active index) up to `scale`.
struct NeuronStatus {
  enum class Kind { Active, Inactive, Redundant };
  Kind kind = Kind::Active;
  std::size_t partner = 0;
  double scale = 1.0;

  static NeuronStatus active() { return {}; }
  static NeuronStatus inactive() { return {Kind::Inactive, 0, 0.0}; }
  static NeuronStatus redundant(std::size_t partner, double scale) {
    return {Kind::Redundant, partner, scale};
  }
  bool operator==(const NeuronStatus&) const = default;
};

std::string status_name(NeuronStatus::Kind kind);

/// Embedding data for one latent space. Units are neurons (one coordinate of
/// each token row) or heads (a block of `unit_size` coordinates). Ambient unit
/// k carries `coeff[k]` times reduced unit `unit_class[k]`, or nothing when
/// `unit_class[k]` is npos.
struct LatentEmbedding {
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  std::size_t unit_size = 1;
  std::vector<std::size_t> unit_class;
  std::vector<double> coeff;
  /// Pre-activation witness scales (B_i = rows scaled by these); 1 for heads.
  std::vector<double> witness_scale;
  std::vector<NeuronStatus> status;
  Matrix alpha;       // A_i, per-token-row map R^{r~} -> R^r
  Matrix alpha_star;  // A_i^*, a left inverse
  Matrix witness;     // B_i with A_i sigma(y) = sigma(B_i y); identity when no activation

  std::size_t ambient_units() const noexcept { return unit_class.size(); }
  std::size_t reduced_units() const;
  bool is_identity() const;
  static LatentEmbedding identity(std::size_t units, std::size_t unit_size);
};

/// Maps alpha_i, alpha_i^*, beta_i, gamma_i linking a reduced model into an
/// ambient one, for latents 0..L.
struct SubmodelEmbedding {
  std::vector<LatentEmbedding> latents;
  std::vector<Shape> ambient_shapes;
  std::vector<Shape> reduced_shapes;
  std::vector<LayerSpec> ambient_specs;

  std::size_t depth() const noexcept { return ambient_specs.size(); }

  Latent alpha(std::size_t i, const Latent& reduced) const;
  Latent alpha_star(std::size_t i, const Latent& ambient) const;
  /// beta_i: ambient parameters realizing the reduced layer i.
  Layer beta(std::size_t i, const Layer& reduced) const;
  /// gamma_i on one element of the reduced latent group, or nullopt when the
  /// element does not lift (e.g. it swaps unit classes of different sizes).
  std::optional<GroupElement> gamma(std::size_t i, const GroupElement& reduced) const;

  nlohmann::json to_json() const;
};

/// Identity embedding of a model into itself.
SubmodelEmbedding trivial_embedding(const Model& model);

struct EmbeddingReport {
  std::vector<double> layer_residuals;  // per layer 1..L (index 0 unused)
  double end_to_end_residual = 0.0;
  /// max |theta - beta(theta~)| over parameters: zero when beta reproduces the
  /// ambient parameters exactly, informational otherwise.
  double parameter_residual = 0.0;
  double left_inverse_residual = 0.0;

  double max_layer_residual() const;
  nlohmann::json to_json() const;
};

/// Throws DimensionError on a structural mismatch between the models and the
/// embedding.
EmbeddingReport verify_embedding(const Model& ambient, const Model& reduced, const SubmodelEmbedding& emb,
                                 std::size_t probes, std::uint64_t seed = 0x5eb0de1ULL);

/// Max over probes of |gamma_i(k) . alpha_i(x) - alpha_i(k . x)|.
double gamma_equivariance_residual(const SubmodelEmbedding& emb, std::size_t i, const GroupElement& reduced,
                                   std::size_t probes, std::uint64_t seed = 0x9a3a1ULL);

/// Status of every neuron of hidden affine layer `layer` (1-based). Throws
/// UnsupportedError for attention or final layers.
std::vector<NeuronStatus> detect_neuron_status(const Model& model, std::size_t layer,
                                               double tol = kReductionTolerance);

/// Zeroes both sides of every half-dead neuron (incoming side zero and
/// outgoing side not, or the reverse). Repeats until no half-dead neuron is
/// left, so the function is preserved exactly.
Model normalize_for_reduction(const Model& model, double tol = 0.0);

struct Reduction {
  Model model;
  SubmodelEmbedding embedding;
};

/// Drops inactive units and merges redundant ones. Throws PreconditionError
/// naming the first half-dead neuron.
Reduction reduce(const Model& model, double tol = kReductionTolerance);

nlohmann::json status_json(const std::vector<NeuronStatus>& status);

}  // namespace layeq

#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "layeq/latent.hpp"
#include "layeq/model.hpp"
#include "layeq/numeric.hpp"

namespace layeq {

/// Dense elements must have reciprocal condition above this.
inline constexpr double kInvertibilityThreshold = 1e-10;

/// An invertible transformation of a latent space.
///
/// Monomial-family elements (Permutation, SignedPermutation, Monomial) use
/// gather form: (k x)[i] = scales[i] * x[perm[i]]. HeadSym first gathers heads
/// by `perm` and then left-multiplies every token's slice of head s by
/// blocks[s]. Monomial and Dense elements of dimension d act per token on
/// latents of shape (n, d, 1); HeadSym of (h heads, d) acts on (n, d, h).
class GroupElement {
 public:
  enum class Variant { Permutation, SignedPermutation, Monomial, Dense, HeadSym };

  GroupElement() = default;

  static GroupElement identity(std::size_t dim);
  static GroupElement permutation(std::vector<std::size_t> perm);
  /// Throws ConfigError unless every sign is exactly +1 or -1.
  static GroupElement signed_permutation(std::vector<std::size_t> perm, std::vector<double> signs);
  /// Throws ConfigError on zero scales.
  static GroupElement monomial(std::vector<std::size_t> perm, std::vector<double> scales);
  /// Throws ConfigError when the reciprocal condition is below the threshold.
  static GroupElement dense(Matrix m);
  static GroupElement head_symmetry(std::vector<std::size_t> head_perm, std::vector<Matrix> blocks);
  static GroupElement head_identity(std::size_t heads, std::size_t dim);

  Variant variant() const noexcept { return variant_; }
  bool is_monomial_family() const noexcept {
    return variant_ == Variant::Permutation || variant_ == Variant::SignedPermutation ||
           variant_ == Variant::Monomial;
  }
  /// Coordinates acted on per token: d for Monomial/Dense, h*d for HeadSym.
  std::size_t dim() const noexcept;
  std::size_t heads() const noexcept { return variant_ == Variant::HeadSym ? perm_.size() : 1; }
  std::size_t block_dim() const noexcept;

  const std::vector<std::size_t>& perm() const noexcept { return perm_; }
  const std::vector<double>& scales() const noexcept { return scales_; }
  const Matrix& matrix() const noexcept { return dense_; }
  const std::vector<Matrix>& blocks() const noexcept { return blocks_; }

  /// Matrix of the action on one token row (head-major for HeadSym).
  Matrix to_matrix() const;
  bool is_identity(double tol = 0.0) const;

  /// Lexicographic code used to order enumerated sequences.
  std::vector<double> encode() const;
  nlohmann::json to_json() const;

  bool operator==(const GroupElement&) const = default;

 private:
  Variant variant_ = Variant::Permutation;
  std::vector<std::size_t> perm_;
  std::vector<double> scales_;
  Matrix dense_;
  std::vector<Matrix> blocks_;
};

std::string variant_name(GroupElement::Variant v);

/// k1 after k2. Throws VariantMismatch across families (monomial, dense,
/// head symmetry) or dimensions.
GroupElement compose(const GroupElement& k1, const GroupElement& k2);
GroupElement inverse(const GroupElement& k);
Latent act(const GroupElement& k, const Latent& x);

/// Group action on a latent space: a token gather (out token p is input token
/// token_perm[p]; empty means identity) followed by a per-token element.
struct LatentAction {
  std::vector<std::size_t> token_perm;
  std::optional<GroupElement> element;

  static LatentAction trivial() { return {}; }
  static LatentAction of(GroupElement k) { return {{}, std::move(k)}; }
  bool is_trivial() const;
  nlohmann::json to_json() const;
  bool operator==(const LatentAction&) const = default;
};

Latent act(const LatentAction& g, const Latent& x);
LatentAction compose(const LatentAction& a, const LatentAction& b);
LatentAction inverse(const LatentAction& g);
/// Matrix of `g` on the flattening of latents of `shape`.
Matrix action_matrix(const LatentAction& g, const Shape& shape);

/// One generator of G with its actions on V_0 and V_L. `order` is 0 when
/// unknown.
struct GroupGenerator {
  std::string name;
  LatentAction on_input;
  LatentAction on_output;
  std::size_t order = 0;
};

/// G given by generators (and optional relators as words in generator
/// indices that evaluate to the identity).
struct GroupPresentation {
  std::string name;
  std::vector<GroupGenerator> generators;
  std::vector<std::vector<std::size_t>> relators;
  std::optional<std::size_t> element_order_bound;
};

GroupPresentation trivial_group();
/// S_2 swapping input coordinates 0 and 1 of R^d, trivial on the output.
GroupPresentation swap_group(std::size_t input_dim, std::size_t output_dim);
/// Gather permutation mirroring a (channels, height, width) image left to right.
std::vector<std::size_t> mirror_permutation(std::size_t channels, std::size_t height, std::size_t width);
/// Z/2 mirroring flattened images; the output is mirrored too when
/// `output_image` is set and acted on trivially otherwise.
GroupPresentation mirror_group(std::size_t channels, std::size_t height, std::size_t width,
                               bool output_image, std::size_t output_dim);

// ---------------------------------------------------------------------------
// Intertwiners
// ---------------------------------------------------------------------------

inline constexpr std::size_t kIntertwinerProbes = 200;
inline constexpr double kIntertwinerTolerance = 1e-9;

/// Witness B with sigma(A y) = B sigma(y) on a fixed probe set, or nullopt.
std::optional<Matrix> is_intertwiner(const Activation& sigma, const Matrix& a);
/// Witness B with A sigma(y) = sigma(B y) (the rectangular form used by
/// submodel embeddings), or nullopt.
std::optional<Matrix> rectangular_intertwiner(const Activation& sigma, const Matrix& a);

// ---------------------------------------------------------------------------
// Parameter actions
// ---------------------------------------------------------------------------

/// g . theta_1, satisfying f_1(g x; theta_1) = f_1(x; g^-1 . theta_1). For
/// attention, positional encodings count as first-layer parameters; a token
/// permutation is only absorbable in query-token mode.
Layer act_on_first_layer(const LatentAction& g, const Layer& layer);
/// g . theta_L, satisfying g f_L(x; theta_L) = f_L(x; g . theta_L).
Layer act_on_last_layer(const LatentAction& g, const Layer& layer);

using ParamMap = std::function<LayerParams(const LayerParams&)>;

/// max over probes of |g_out^-1 f(g_in x; theta) - f(x; param_map(theta))|.
double verify_generalized_adjunction(const LatentAction& g_in, const LatentAction& g_out,
                                     const ParamMap& param_map, const Layer& layer,
                                     const std::vector<Latent>& probes);

}  // namespace layeq

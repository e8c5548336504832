#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "layeq/group.hpp"
#include "layeq/model.hpp"

namespace layeq {

struct ImageShape {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const noexcept { return channels * height * width; }
};

enum class FilterCategoryKind { MirroredCopy, MirroredNegatedCopy, NegatedCopy, Symmetric, AntiSymmetric, Other };
std::string category_name(FilterCategoryKind k);

struct FilterCategory {
  FilterCategoryKind kind = FilterCategoryKind::Other;
  std::optional<std::size_t> partner;
  /// Distance of the assigned match, or of the best rejected candidate for Other.
  double match_distance = 0.0;
};

/// Mean-subtracted, unit-normalized copy of `v`; empty when v is constant.
std::vector<double> normalized_filter(const std::vector<double>& v);
/// |n(a) - n(b)| for the normalized filters, 2 (the maximum) when either is
/// constant.
double filter_distance(const std::vector<double>& a, const std::vector<double>& b);

inline constexpr double kTrainedFilterTolerance = 0.1;
inline constexpr double kPlantedFilterTolerance = 1e-6;

/// Greedy pairing of the rows of `w1` (one filter per row). Candidates are
/// every filter against the mirror, negated mirror and negation of every
/// other filter, and against its own mirror (Symmetric) and negated mirror
/// (AntiSymmetric). Candidates are taken in order of distance, then category
/// in declaration order, then lower indices, while both filters are free and
/// the distance is within `tol`; the rest are Other.
std::vector<FilterCategory> categorize_filters(const Matrix& w1, const ImageShape& image, double tol);

/// filter_index,category,partner,distance
std::string categories_csv(const std::vector<FilterCategory>& cats);
/// Share of filters outside Other.
double categorized_fraction(const std::vector<FilterCategory>& cats);

struct BypassPair {
  std::size_t first = 0;
  std::size_t second = 0;
  double row_distance = 0.0;     // |r_i + r_j| / max(|r_i|, |r_j|), bias included
  double column_distance = 0.0;  // same for the outgoing columns
};

/// Neuron pairs of the affine layer `layer` whose incoming rows and outgoing
/// columns are opposite within `tol`, paired greedily by the larger of the
/// two distances. Throws UnsupportedError unless the activation satisfies
/// sigma(x) - sigma(-x) = x, and PreconditionError unless layers `layer` and
/// `layer + 1` are affine.
std::vector<BypassPair> detect_bypass_pairs(const Model& model, std::size_t layer, double tol);

struct HeadPermutation {
  /// Head j of x corresponds to head assignment[j] of g x; nullopt when the
  /// best assignment is above tolerance.
  std::vector<std::optional<std::size_t>> assignment;
  /// Fingerprint residual of each head's assigned match.
  std::vector<double> residuals;
  bool bijective = false;

  nlohmann::json to_json() const;
};

/// Compares softmax attention patterns of `layer` on probes x and g x, with
/// key (and, without a query token, query) positions pulled back through the
/// token permutation of g. Heads are matched by a minimum-cost assignment of
/// the max-abs fingerprint differences.
HeadPermutation detect_head_permutation(const Model& model, std::size_t layer, const LatentAction& g, double tol,
                                        const std::vector<Latent>& probes);
HeadPermutation detect_head_permutation(const Model& model, std::size_t layer, const LatentAction& g, double tol,
                                        std::size_t probes = 16, std::uint64_t seed = 0x4ead);

struct EncodingCheck {
  double residual = 0.0;
  double tol = 0.0;
  bool passed() const noexcept { return residual <= tol; }
};

/// residual = max_p |pe[token_perm[p]] - g pe[p]| over the rows of `pe`.
EncodingCheck check_positional_encoding_equivariance(const Matrix& pe, const std::vector<std::size_t>& token_perm,
                                                     const GroupElement& g, double tol);

/// Filters on a near-square grid, each scaled to [0, 1] (constant filters
/// mid-gray) and framed in its category colour. `scale` pixels per weight.
std::string filter_grid_ppm(const Matrix& w1, const ImageShape& image, const std::vector<FilterCategory>& cats,
                            std::size_t scale = 4);
void render_filter_grid(const Matrix& w1, const ImageShape& image, const std::vector<FilterCategory>& cats,
                        const std::string& path, std::size_t scale = 4);

/// One row per input and one square per head of the first attention layer,
/// showing the (query-averaged) attention over the token grid scaled by its
/// maximum. The grid is square; throws DimensionError otherwise.
std::string attention_maps_ppm(const Model& model, const std::vector<Latent>& inputs, std::size_t scale = 8);
void render_attention_maps(const Model& model, const std::vector<Latent>& inputs, const std::string& path,
                           std::size_t scale = 8);

}  // namespace layeq

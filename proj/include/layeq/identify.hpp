#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "layeq/group.hpp"
#include "layeq/model.hpp"
#include "layeq/submodel.hpp"

namespace layeq {

inline constexpr double kExactTolerance = 1e-7;
inline constexpr double kTrainedTolerance = 1e-2;
inline constexpr std::size_t kBruteForceCapacity = 100000;

/// Which group K_i acts on latent i.
enum class LatentFamily { Trivial, Permutation, SignedPermutation, Monomial, Dense, HeadSym };

std::string family_name(LatentFamily f);
bool is_finite(LatentFamily f);

/// K_0..K_L.
using GroupFamily = std::vector<LatentFamily>;

/// Trivial at the boundary; for hidden latents: signed permutations for Tanh,
/// permutations for GELU, monomials for ReLU and powers, dense for linear
/// layers, head symmetries for attention.
GroupFamily natural_family(const Model& model);

/// k_0..k_L relating two parameters, with per-layer residuals (index 0 unused)
/// measured on held-out probes.
struct SymmetrySequence {
  std::vector<GroupElement> elements;
  std::vector<double> residuals;
  /// Some element was fitted in a continuous family, so uniqueness is not
  /// checked.
  bool continuous = false;

  double max_residual() const;
  nlohmann::json to_json() const;
};

struct ExtractOptions {
  double tol = kExactTolerance;
  std::size_t probes = 64;
  std::uint64_t seed = 0x1de7ULL;
  /// Inputs in V_0 used instead of Gaussian probes. Latent probes are then
  /// obtained by running them through the second model; the first half solves
  /// and the second half verifies.
  std::vector<Latent> inputs;
  /// Skip the end-to-end agreement check (callers that already did it).
  bool check_end_to_end = true;
};

struct Extraction {
  std::optional<SymmetrySequence> sequence;
  /// 1-based layer at which extraction failed, 0 on success.
  std::size_t failed_layer = 0;
  double failed_residual = 0.0;
  /// Elements and residuals found before the failure.
  SymmetrySequence partial;
};

/// Solves f_i(x; b_i) = k_i f_i(k_{i-1}^-1 x; a_i) layer by layer with k_0 and
/// k_L the identity. Throws PreconditionError when the end-to-end functions
/// differ on the probes.
Extraction extract_symmetry_detailed(const Model& a, const Model& b, const GroupFamily& family,
                                     const ExtractOptions& opt = {});
std::optional<SymmetrySequence> extract_symmetry(const Model& a, const Model& b, const GroupFamily& family,
                                                 const ExtractOptions& opt = {});

/// Solves layer i alone for a given k_{i-1} acting on V_{i-1}. Residual is
/// measured on `verify`; returns nullopt when no element fits within tol.
struct LayerSolve {
  std::optional<GroupElement> element;
  double residual = 0.0;
};
LayerSolve solve_layer(const Layer& a, const Layer& b, const Shape& input, const GroupElement& k_prev,
                       LatentFamily target, const std::vector<Latent>& solve, const std::vector<Latent>& verify,
                       double tol);

/// Max over probes of |f(x; b) - k_out f(k_in^-1 x; a)|.
double layer_residual(const Layer& a, const Layer& b, const GroupElement& k_in, const GroupElement& k_out,
                      const std::vector<Latent>& probes);

/// Every sequence in finite K satisfying the layer equations on the probes,
/// in lexicographic order of encoded elements. Throws CapacityError when a
/// K_i has more than 1e5 elements and UnsupportedError for infinite families.
std::vector<SymmetrySequence> brute_force_symmetries(const Model& a, const Model& b, const GroupFamily& family,
                                                     double tol = kExactTolerance, std::size_t probes = 64,
                                                     std::uint64_t seed = 0x1de7ULL);

/// Number of elements of a finite family on `dim` coordinates, saturating at
/// SIZE_MAX.
std::size_t family_size(LatentFamily f, std::size_t dim);

struct CertifyOptions {
  double tol = kExactTolerance;
  double reduction_tol = kReductionTolerance;
  bool normalize = false;
  std::size_t probes = 64;
  std::uint64_t seed = 0x1de7ULL;
};

struct Certificate {
  enum class Status { Certified, NotCertified, ContinuousUnchecked };
  Status status = Status::NotCertified;
  std::string reason;
  std::optional<Reduction> reduction;
  GroupFamily family;
  std::vector<SymmetrySequence> symmetries;
  CertifyOptions options;

  bool holds() const noexcept { return status == Status::Certified; }
  nlohmann::json to_json() const;
};

std::string status_name(Certificate::Status s);

/// normalize (optional) -> reduce -> brute-force self-symmetries of the
/// reduced model. Holds iff the identity is the only self-symmetry.
Certificate certify_weak_identifiability(const Model& model, const CertifyOptions& opt = {});

}  // namespace layeq

#pragma once

#include <cstddef>
#include <vector>

#include "layeq/numeric.hpp"

namespace layeq {

/// Minimum-cost assignment of every row to a distinct column (rows <= cols),
/// Hungarian algorithm with potentials. Returns the column of each row.
/// Among equal-cost optima the one found by scanning lower indices first wins.
std::vector<std::size_t> solve_assignment(const Matrix& cost);

}  // namespace layeq

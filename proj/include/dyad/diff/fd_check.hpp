#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dyad/diff/layers.hpp"

namespace dyad::diff {

struct FdReport {
  double max_rel_error = 0.0;
  std::size_t entries_checked = 0;
  std::string worst;  // "<input or parameter>[index]"
};

struct FdOptions {
  double eps = 1e-5;
  /// Denominator floor: rel = |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1e-6;
  /// Check at most this many entries per tensor (sampled with `seed`).
  std::size_t max_entries_per_tensor = static_cast<std::size_t>(-1);
  std::uint64_t seed = 7;
};

using ScalarOp = std::function<Var(Tape<double>&, std::span<const Var>)>;

/// Compares reverse-mode gradients of a scalar-valued op with central
/// differences, over every entry of every input.
FdReport finite_difference_check(const ScalarOp& op, const std::vector<NdArray<double>>& inputs,
                                 const FdOptions& options = {});

/// Same, with respect to every parameter of `store`; `op` must be deterministic.
FdReport finite_difference_check_params(const std::function<Var(Tape<double>&)>& op, ParamStore<double>& store,
                                        const FdOptions& options = {});

}  // namespace dyad::diff

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "vitpose/tensor.hpp"

namespace vitpose {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the tape gradient of a scalar function with central differences.
/// Relative error per coordinate is |a - n| / max(abs_floor, |a|, |n|); the
/// maximum over all coordinates of all params is returned. Where the differences at
/// steps h and h/2 disagree the step is reduced tenfold, down to eps / 1000.
GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps = 1e-5,
                           double abs_floor = 1e-3);

/// Same comparison on at most max_coords coordinates per parameter, drawn without
/// replacement from Rng(seed). Used for models too large to perturb exhaustively.
GradCheckResult grad_check_sampled(const std::function<Tensor()>& f, std::vector<Tensor> params, std::size_t max_coords,
                                   std::uint64_t seed, double eps = 1e-5, double abs_floor = 1e-3);

}  // namespace vitpose

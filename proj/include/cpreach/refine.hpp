#pragma once

#include "cpreach/common.hpp"

namespace cpreach {

// Component residual matrix {R_i^j} and the scalar residuals {R_i} computed
// under the pre-refinement alpha on a fresh dataset. Rows with R_i = 0 are
// skipped by the solver (0/0 ratios carry no constraint).
struct RefinementInput {
    Mat components;  // L x nK
    Vec scalars;     // L
};

// Analytical solution of the surface-minimizing linear program:
// omega'_j = max_i R_i^j / R_i.
Vec refine_scaling_omega(const RefinementInput& input);

// alpha' = 1 / omega' with the same 1e-12 floor as normalize_alpha.
Vec refine_scaling_alpha(const RefinementInput& input);

// Interpolates trained-step omegas to every step of the refined horizon
// (used with interpolated surrogates); the first interval extends the first
// trained step's value.
Vec interpolate_omega(const Vec& omega_trained, int n, int factor);

} // namespace cpreach

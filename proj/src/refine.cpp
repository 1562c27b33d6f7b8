#include "cpreach/refine.hpp"

namespace cpreach {

Vec refine_scaling_omega(const RefinementInput& input) {
    require(input.components.rows() >= 1, "refinement input is empty");
    require(input.components.rows() == input.scalars.size(), "row count mismatch");
    const Eigen::Index width = input.components.cols();

    Vec omega = Vec::Zero(width);
    long used = 0;
    for (Eigen::Index i = 0; i < input.scalars.size(); ++i) {
        const double r = input.scalars[i];
        if (r <= 0.0) continue;
        omega = omega.cwiseMax(input.components.row(i).transpose() / r);
        ++used;
    }
    if (used == 0) throw InfeasibleError("all scalar residuals are zero; nothing to refine");
    return omega;
}

Vec refine_scaling_alpha(const RefinementInput& input) {
    constexpr double eps_floor = 1e-12;
    return refine_scaling_omega(input).cwiseMax(eps_floor).cwiseInverse();
}

Vec interpolate_omega(const Vec& omega_trained, int n, int factor) {
    require(n >= 1 && factor >= 1, "bad interpolation parameters");
    require(omega_trained.size() % n == 0, "omega width must be a multiple of n");
    if (factor == 1) return omega_trained;
    const int k_trained = static_cast<int>(omega_trained.size()) / n;
    const int k_full = k_trained * factor;

    Vec full(static_cast<Eigen::Index>(n) * k_full);
    for (int k = 1; k <= k_full; ++k) {
        const int m = k / factor;
        const int d = k % factor;
        for (int c = 0; c < n; ++c) {
            const Eigen::Index row = static_cast<Eigen::Index>(k - 1) * n + c;
            if (d == 0) {
                full[row] = omega_trained[(m - 1) * n + c];
            } else {
                const double wr = static_cast<double>(d) / factor;
                const double right = omega_trained[m * n + c];
                const double left = (m == 0) ? right : omega_trained[(m - 1) * n + c];
                full[row] = (1.0 - wr) * left + wr * right;
            }
        }
    }
    return full;
}

} // namespace cpreach

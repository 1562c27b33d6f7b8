#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>

#include "cpreach/common.hpp"
#include "cpreach/dynamics.hpp"
#include "cpreach/surrogate.hpp"

namespace cpreach {

struct ResidualRecord {
    Vec components;  // R^j, j in [nK]
    double scalar;   // max_j alpha_j R^j
};

// Component-wise prediction errors of one trajectory against the surrogate,
// plus the scaled trajectory residual.
ResidualRecord component_residuals(const SurrogateNet& net, const Vec& alpha,
                                   const Trajectory& trajectory);

enum class Divergence { TotalVariation, Kl };

struct DivergenceSpec {
    Divergence kind = Divergence::TotalVariation;
    double tau = 0.0;
};

std::string divergence_name(Divergence kind);
Divergence divergence_from_name(const std::string& name);

// f-divergence generators: TV f(z) = |z-1|/2, KL f(z) = z log z.
double divergence_generator(Divergence kind, double z);

// Total-variation closed forms: g(beta) = max(0, beta - tau), g^-1(gamma) =
// gamma + tau for gamma in (0, 1 - tau).
double g_tv(double beta, double tau);
double g_tv_inv(double gamma, double tau);

// Worst-case CDF transform for a generic convex generator f with f(1) = 0,
// located by bisection to 1e-10: g(beta) is the least z in [0, beta] with
// beta f(z/beta) + (1-beta) f((1-z)/(1-beta)) <= tau; the inverse is the
// largest beta with g(beta) <= gamma.
double g_numeric(const std::function<double(double)>& f, double tau, double beta);
double g_numeric_inv(const std::function<double(double)>& f, double tau, double gamma);
double g_value(const DivergenceSpec& spec, double beta);
double g_inverse(const DivergenceSpec& spec, double gamma);

// Adjusted miscoverage level: eps_bar = 1 - g^-1(1 - eps_m) with
// eps_m = 1 - g((1 + 1/m) g^-1(1 - eps)); the TV kind uses the closed form
// eps_bar = 1 - (1 + 1/m)(1 - eps + tau). Throws InfeasibleError (naming the
// minimum feasible m when one exists).
double adjusted_epsilon(double epsilon, const DivergenceSpec& divergence, std::size_t m);

// Conservative empirical quantile over {R_1..R_m, inf}: the l-th smallest
// residual with l = ceil((m+1)(1-eps)), or +inf when l > m.
double conformal_quantile(std::span<const double> residuals, double epsilon);

struct RobustQuantileResult {
    double epsilon = 0.0;
    double epsilon_bar = 0.0;
    std::size_t m = 0;
    double r_star = 0.0;  // +inf means "insufficient calibration data"
    DivergenceSpec divergence;
    bool insufficient_data() const { return std::isinf(r_star); }
};

RobustQuantileResult robust_quantile(std::span<const double> residuals, double epsilon,
                                     const DivergenceSpec& divergence);

// Smallest calibration size L with (1 + 1/L) g^-1(delta) < 1 and
// ceil((L+1) g^-1(delta)) <= L. Throws InfeasibleError past a 1e9 cap.
long min_calibration_size(double delta, const DivergenceSpec& divergence);

// Histogram estimate of the total-variation distance between two scalar
// residual samples (equal-width bins over the pooled range).
double estimate_shift_tv(std::span<const double> sim, std::span<const double> real, int bins);

// Fraction of residuals <= r_star (closed comparison; +inf covers all).
double coverage_fraction(std::span<const double> residuals, double r_star);

void save_quantile_json(const RobustQuantileResult& result, const std::string& path);
RobustQuantileResult load_quantile_json(const std::string& path);

// Residual CSV: header "scalar,R1,..,RnK", one row per trajectory.
void save_residuals_csv(const Mat& components, const Vec& scalars, const std::string& path);
std::pair<Mat, Vec> load_residuals_csv(const std::string& path);

} // namespace cpreach

#include "cpreach/conformal.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpreach/csv.hpp"

namespace cpreach {

using json = nlohmann::ordered_json;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// ceil with a relative slack absorbing the rounding of the level arithmetic;
// level products land exactly on integers in several of the documented cases.
long ceil_index(double x) {
    const double slack = 64.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(x));
    return static_cast<long>(std::ceil(x - slack));
}

} // namespace

ResidualRecord component_residuals(const SurrogateNet& net, const Vec& alpha,
                                   const Trajectory& trajectory) {
    const int n = net.input_dim();
    const int out = net.output_dim();
    require(trajectory.size() == n + out, "trajectory length does not match the network");
    require(alpha.size() == out, "alpha width mismatch");
    const Vec pred = forward(net, trajectory.head(n));
    ResidualRecord rec;
    rec.components = (trajectory.tail(out) - pred).cwiseAbs();
    rec.scalar = rec.components.cwiseProduct(alpha).maxCoeff();
    return rec;
}

std::string divergence_name(Divergence kind) {
    return kind == Divergence::TotalVariation ? "total-variation" : "kl";
}

Divergence divergence_from_name(const std::string& name) {
    if (name == "total-variation" || name == "tv") return Divergence::TotalVariation;
    if (name == "kl") return Divergence::Kl;
    throw std::invalid_argument("unknown divergence: " + name);
}

double divergence_generator(Divergence kind, double z) {
    if (z < 0.0) return kInf;
    if (kind == Divergence::TotalVariation) return 0.5 * std::abs(z - 1.0);
    return z == 0.0 ? 0.0 : z * std::log(z);
}

double g_tv(double beta, double tau) {
    require(beta >= 0.0 && beta <= 1.0, "beta must be in [0,1]");
    require(tau >= 0.0 && tau <= 1.0, "tau must be in [0,1] for total variation");
    return std::max(0.0, beta - tau);
}

double g_tv_inv(double gamma, double tau) {
    require(tau >= 0.0 && tau <= 1.0, "tau must be in [0,1] for total variation");
    if (gamma >= 1.0 - tau)
        throw InfeasibleError("g_tv inverse undefined for gamma >= 1 - tau");
    return gamma + tau;
}

namespace {

// beta f(z/beta) + (1-beta) f((1-z)/(1-beta)) with the 0 * f(./0) = 0 and
// f(+inf) = +inf conventions.
double mixture_value(const std::function<double(double)>& f, double beta, double z) {
    double acc = 0.0;
    if (beta > 0.0)
        acc += beta * f(z / beta);
    else if (z > 0.0)
        return kInf;
    if (beta < 1.0)
        acc += (1.0 - beta) * f((1.0 - z) / (1.0 - beta));
    else if (z < 1.0)
        return kInf;
    return acc;
}

constexpr double kBisectTol = 1e-10;
constexpr int kBisectSteps = 200;

} // namespace

double g_numeric(const std::function<double(double)>& f, double tau, double beta) {
    require(beta >= 0.0 && beta <= 1.0, "beta must be in [0,1]");
    require(tau >= 0.0, "tau must be >= 0");
    // the feasible set {z : phi(z) <= tau} is an interval containing beta
    // (phi is convex with phi(beta) = 0); the infimum sits left of beta
    if (mixture_value(f, beta, 0.0) <= tau) return 0.0;
    double lo = 0.0, hi = beta;
    for (int it = 0; it < kBisectSteps && hi - lo > kBisectTol; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mixture_value(f, beta, mid) <= tau)
            hi = mid;
        else
            lo = mid;
    }
    if (hi - lo > kBisectTol)
        throw NumericError("g bisection did not converge; residual interval " +
                           format_double(hi - lo));
    return hi;
}

double g_numeric_inv(const std::function<double(double)>& f, double tau, double gamma) {
    require(gamma >= 0.0 && gamma < 1.0, "gamma must be in [0,1)");
    // g is nondecreasing in beta; find the largest beta with g(beta) <= gamma
    if (g_numeric(f, tau, 1.0) <= gamma) return 1.0;
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < kBisectSteps && hi - lo > kBisectTol; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (g_numeric(f, tau, mid) <= gamma)
            lo = mid;
        else
            hi = mid;
    }
    if (hi - lo > kBisectTol)
        throw NumericError("g inverse bisection did not converge; residual interval " +
                           format_double(hi - lo));
    return lo;
}

double g_value(const DivergenceSpec& spec, double beta) {
    if (spec.kind == Divergence::TotalVariation) return g_tv(beta, spec.tau);
    return g_numeric([](double z) { return divergence_generator(Divergence::Kl, z); }, spec.tau,
                     beta);
}

double g_inverse(const DivergenceSpec& spec, double gamma) {
    if (spec.kind == Divergence::TotalVariation) return g_tv_inv(gamma, spec.tau);
    return g_numeric_inv([](double z) { return divergence_generator(Divergence::Kl, z); },
                         spec.tau, gamma);
}

double adjusted_epsilon(double epsilon, const DivergenceSpec& divergence, std::size_t m) {
    require(epsilon > 0.0 && epsilon <= 1.0, "epsilon must be in (0,1]");
    require(m >= 1, "m must be >= 1");
    const double correction = 1.0 + 1.0 / static_cast<double>(m);

    if (divergence.kind == Divergence::TotalVariation) {
        const double tau = divergence.tau;
        if (epsilon <= tau)
            throw InfeasibleError("adjusted miscoverage infeasible: epsilon <= tau (no finite m)");
        const double target = 1.0 - epsilon + tau;  // g^-1(1 - eps)
        if (correction * target > 1.0) {
            const long min_m = static_cast<long>(std::ceil(target / (epsilon - tau)));
            throw InfeasibleError("adjusted miscoverage infeasible at m = " + std::to_string(m) +
                                  "; minimum feasible m = " + std::to_string(min_m));
        }
        return 1.0 - correction * target;
    }

    const double gamma = g_inverse(divergence, 1.0 - epsilon);
    const double lifted = correction * gamma;
    if (lifted > 1.0) {
        const long min_m = static_cast<long>(std::ceil(gamma / (1.0 - gamma)));
        throw InfeasibleError("adjusted miscoverage infeasible at m = " + std::to_string(m) +
                              "; minimum feasible m = " + std::to_string(min_m));
    }
    const double eps_m = 1.0 - g_value(divergence, lifted);
    return 1.0 - g_inverse(divergence, 1.0 - eps_m);
}

double conformal_quantile(std::span<const double> residuals, double epsilon) {
    require(!residuals.empty(), "empty calibration set");
    require(epsilon > 0.0 && epsilon < 1.0, "epsilon must be in (0,1)");
    const long m = static_cast<long>(residuals.size());
    const long l = ceil_index((m + 1) * (1.0 - epsilon));
    if (l > m) return kInf;
    std::vector<double> sorted(residuals.begin(), residuals.end());
    std::nth_element(sorted.begin(), sorted.begin() + (l - 1), sorted.end());
    return sorted[l - 1];
}

RobustQuantileResult robust_quantile(std::span<const double> residuals, double epsilon,
                                     const DivergenceSpec& divergence) {
    RobustQuantileResult result;
    result.epsilon = epsilon;
    result.m = residuals.size();
    result.divergence = divergence;
    result.epsilon_bar = adjusted_epsilon(epsilon, divergence, residuals.size());
    result.r_star = result.epsilon_bar > 0.0 ? conformal_quantile(residuals, result.epsilon_bar)
                                             : kInf;
    return result;
}

long min_calibration_size(double delta, const DivergenceSpec& divergence) {
    require(delta > 0.0 && delta < 1.0, "delta must be in (0,1)");
    double gamma;
    try {
        gamma = g_inverse(divergence, delta);
    } catch (const InfeasibleError&) {
        throw InfeasibleError("no calibration size is feasible for delta = " +
                              format_double(delta));
    }
    if (gamma >= 1.0)
        throw InfeasibleError("no calibration size is feasible for delta = " +
                              format_double(delta));

    constexpr long cap = 1000000000L;
    // the remark's bound: smallest L with (1 + 1/L) gamma < 1
    long L = std::max<long>(1, static_cast<long>(std::floor(gamma / (1.0 - gamma))) - 2);
    constexpr double strict = 1e-12;
    while (L <= cap && (1.0 + 1.0 / static_cast<double>(L)) * gamma >= 1.0 - strict) ++L;
    // and the index constraint ceil((L+1) gamma) <= L
    while (L <= cap && ceil_index((L + 1) * gamma) > L) ++L;
    if (L > cap)
        throw InfeasibleError("minimum calibration size exceeds cap for delta = " +
                              format_double(delta));
    return L;
}

double estimate_shift_tv(std::span<const double> sim, std::span<const double> real, int bins) {
    require(!sim.empty() && !real.empty(), "both samples must be nonempty");
    require(bins >= 1, "bins must be >= 1");
    double lo = kInf, hi = -kInf;
    for (double v : sim) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    for (double v : real) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (!(hi > lo)) return 0.0;  // all mass in one degenerate cell

    const double width = (hi - lo) / bins;
    std::vector<double> p(bins, 0.0), q(bins, 0.0);
    auto bin_of = [&](double v) {
        return std::min<long>(bins - 1, static_cast<long>((v - lo) / width));
    };
    for (double v : sim) p[bin_of(v)] += 1.0 / static_cast<double>(sim.size());
    for (double v : real) q[bin_of(v)] += 1.0 / static_cast<double>(real.size());
    double tv = 0.0;
    for (int b = 0; b < bins; ++b) tv += std::abs(p[b] - q[b]);
    return 0.5 * tv;
}

double coverage_fraction(std::span<const double> residuals, double r_star) {
    require(!residuals.empty(), "empty sample");
    long covered = 0;
    for (double r : residuals)
        if (r <= r_star) ++covered;
    return static_cast<double>(covered) / static_cast<double>(residuals.size());
}

void save_quantile_json(const RobustQuantileResult& result, const std::string& path) {
    json j;
    j["epsilon"] = result.epsilon;
    j["epsilon_bar"] = result.epsilon_bar;
    j["m"] = result.m;
    j["r_star"] = std::isinf(result.r_star) ? json("inf") : json(result.r_star);
    j["divergence"] = {{"kind", divergence_name(result.divergence.kind)},
                       {"tau", result.divergence.tau}};
    write_text_file(path, j.dump(2) + "\n");
}

RobustQuantileResult load_quantile_json(const std::string& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw IoError("malformed quantile json " + path + ": " + e.what());
    }
    RobustQuantileResult result;
    result.epsilon = j.at("epsilon").get<double>();
    result.epsilon_bar = j.at("epsilon_bar").get<double>();
    result.m = j.at("m").get<std::size_t>();
    result.r_star = j.at("r_star").is_string() ? kInf : j.at("r_star").get<double>();
    result.divergence.kind = divergence_from_name(j.at("divergence").at("kind").get<std::string>());
    result.divergence.tau = j.at("divergence").at("tau").get<double>();
    return result;
}

void save_residuals_csv(const Mat& components, const Vec& scalars, const std::string& path) {
    require(components.rows() == scalars.size(), "residual row count mismatch");
    std::ostringstream out;
    out << "scalar";
    for (Eigen::Index j = 0; j < components.cols(); ++j) out << ",R" << (j + 1);
    out << '\n';
    for (Eigen::Index i = 0; i < components.rows(); ++i) {
        out << format_double(scalars[i]);
        for (Eigen::Index j = 0; j < components.cols(); ++j)
            out << ',' << format_double(components(i, j));
        out << '\n';
    }
    write_text_file(path, out.str());
}

std::pair<Mat, Vec> load_residuals_csv(const std::string& path) {
    std::istringstream in(read_text_file(path));
    std::string line;
    if (!std::getline(in, line)) throw IoError("empty residual file: " + path);
    const auto header = split_csv_line(line);
    if (header.size() < 2 || header[0] != "scalar")
        throw IoError("malformed residual header in " + path);
    const std::size_t width = header.size() - 1;

    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != width + 1) throw IoError("residual row width mismatch in " + path);
        std::vector<double> row(fields.size());
        for (std::size_t j = 0; j < fields.size(); ++j) row[j] = std::stod(fields[j]);
        rows.push_back(std::move(row));
    }
    Mat components(rows.size(), width);
    Vec scalars(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        scalars[i] = rows[i][0];
        for (std::size_t j = 0; j < width; ++j) components(i, j) = rows[i][j + 1];
    }
    return {components, scalars};
}

} // namespace cpreach

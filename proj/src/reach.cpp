#include "cpreach/reach.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "cpreach/csv.hpp"

namespace cpreach {

using json = nlohmann::ordered_json;

void validate_box(const Box& box) {
    require(box.lower.size() == box.upper.size(), "box bound sizes differ");
    for (Eigen::Index i = 0; i < box.lower.size(); ++i)
        if (!(box.lower[i] <= box.upper[i]))
            throw std::invalid_argument("box lower > upper in dimension " + std::to_string(i));
}

Box interval_hull(const Zonotope& z) {
    const Vec radius = z.generators.cwiseAbs().rowwise().sum();
    return Box{z.center - radius, z.center + radius};
}

std::vector<Box> partition(const Box& init, const std::vector<int>& splits) {
    validate_box(init);
    const int d = init.dim();
    require(static_cast<int>(splits.size()) == d, "splits must give one count per dimension");
    for (int s : splits) require(s >= 1, "splits must be >= 1");

    long total = 1;
    for (int s : splits) total *= s;
    std::vector<Box> cells;
    cells.reserve(total);

    std::vector<int> idx(d, 0);
    for (long c = 0; c < total; ++c) {
        Box cell{Vec(d), Vec(d)};
        for (int i = 0; i < d; ++i) {
            const double width = (init.upper[i] - init.lower[i]) / splits[i];
            cell.lower[i] = init.lower[i] + idx[i] * width;
            cell.upper[i] = (idx[i] + 1 == splits[i]) ? init.upper[i]
                                                      : init.lower[i] + (idx[i] + 1) * width;
        }
        cells.push_back(std::move(cell));
        for (int i = d - 1; i >= 0; --i) {
            if (++idx[i] < splits[i]) break;
            idx[i] = 0;
        }
    }
    return cells;
}

Zonotope reduce_order(const Zonotope& z, int max_generators, int protected_prefix) {
    const int p = static_cast<int>(z.generators.cols());
    if (max_generators <= 0 || p <= max_generators) return z;
    const int d = static_cast<int>(z.center.size());
    protected_prefix = std::min(protected_prefix, p);

    // keep the largest (by L1 norm) mergeable generators, box the rest
    std::vector<int> mergeable(p - protected_prefix);
    std::iota(mergeable.begin(), mergeable.end(), protected_prefix);
    std::stable_sort(mergeable.begin(), mergeable.end(), [&](int a, int b) {
        return z.generators.col(a).lpNorm<1>() > z.generators.col(b).lpNorm<1>();
    });

    const int keep_budget = std::max(0, max_generators - protected_prefix - d);
    const int kept = std::min<int>(keep_budget, static_cast<int>(mergeable.size()));

    Zonotope out;
    out.center = z.center;
    out.generators.resize(d, protected_prefix + kept + d);
    out.generators.leftCols(protected_prefix) = z.generators.leftCols(protected_prefix);
    Vec box_radius = Vec::Zero(d);
    for (int i = 0; i < static_cast<int>(mergeable.size()); ++i) {
        if (i < kept)
            out.generators.col(protected_prefix + i) = z.generators.col(mergeable[i]);
        else
            box_radius += z.generators.col(mergeable[i]).cwiseAbs();
    }
    out.generators.rightCols(d) = box_radius.asDiagonal();
    return out;
}

Propagated propagate(const SurrogateNet& net, const Box& part, const PropagateOptions& options) {
    validate_net(net);
    validate_box(part);
    require(part.dim() == net.input_dim(), "partition dimension mismatch");

    const int n = net.input_dim();
    Zonotope z;
    z.center = 0.5 * (part.lower + part.upper);
    z.generators = (0.5 * (part.upper - part.lower)).asDiagonal();
    Box bounds = part;
    const Zonotope input = z;

    const int L = net.num_layers();
    for (int l = 0; l < L; ++l) {
        // affine image is exact on zonotopes; the tracked concrete bounds are
        // refined by the zonotope hull, which keeps cross-neuron correlations
        z.center = net.weights[l] * z.center + net.biases[l];
        z.generators = net.weights[l] * z.generators;
        Box hull = interval_hull(z);
        Vec pos = net.weights[l].cwiseMax(0.0) * bounds.upper +
                  net.weights[l].cwiseMin(0.0) * bounds.lower + net.biases[l];
        Vec neg = net.weights[l].cwiseMax(0.0) * bounds.lower +
                  net.weights[l].cwiseMin(0.0) * bounds.upper + net.biases[l];
        bounds.lower = hull.lower.cwiseMax(neg);
        bounds.upper = hull.upper.cwiseMin(pos);

        if (!bounds.lower.allFinite() || !bounds.upper.allFinite())
            throw NumericError("non-finite bounds at layer " + std::to_string(l));
        if (l + 1 == L) break;

        const int width = static_cast<int>(z.center.size());
        std::vector<double> fresh(width, 0.0);
        int fresh_count = 0;
        for (int i = 0; i < width; ++i) {
            const double lo = bounds.lower[i];
            const double hi = bounds.upper[i];
            if (lo >= 0.0) continue;  // identity region
            if (hi <= 0.0) {          // dead neuron
                z.center[i] = 0.0;
                z.generators.row(i).setZero();
                continue;
            }
            const double lambda = hi / (hi - lo);
            const double mu = -lambda * lo / 2.0;
            z.center[i] = lambda * z.center[i] + mu;
            z.generators.row(i) *= lambda;
            fresh[i] = mu;
            ++fresh_count;
        }
        if (fresh_count > 0) {
            Mat extended(width, z.generators.cols() + fresh_count);
            extended.leftCols(z.generators.cols()) = z.generators;
            extended.rightCols(fresh_count).setZero();
            int col = static_cast<int>(z.generators.cols());
            for (int i = 0; i < width; ++i)
                if (fresh[i] != 0.0) extended(i, col++) = fresh[i];
            z.generators = std::move(extended);
        }
        bounds.lower = bounds.lower.cwiseMax(0.0);
        bounds.upper = bounds.upper.cwiseMax(0.0);
        Box hull2 = interval_hull(z);
        bounds.lower = bounds.lower.cwiseMax(hull2.lower);
        bounds.upper = bounds.upper.cwiseMin(hull2.upper);

        if (options.generator_cap_factor > 0 &&
            z.generators.cols() > static_cast<Eigen::Index>(options.generator_cap_factor) * width)
            z = reduce_order(z, options.generator_cap_factor * width, n);
    }

    if (net.interp) {
        const Mat& w = net.interp->output_weights;
        const Mat& s0w = net.interp->init_state_weights;
        Zonotope full;
        full.center = w * z.center + s0w * input.center;
        full.generators = w * z.generators;
        // the input generators are the first n columns throughout, so the s0
        // term folds into them exactly (shared generator coordinates)
        full.generators.leftCols(n) += s0w * input.generators;
        Vec pos = w.cwiseMax(0.0) * bounds.upper + w.cwiseMin(0.0) * bounds.lower;
        Vec neg = w.cwiseMax(0.0) * bounds.lower + w.cwiseMin(0.0) * bounds.upper;
        Vec pos0 = s0w.cwiseMax(0.0) * part.upper + s0w.cwiseMin(0.0) * part.lower;
        Vec neg0 = s0w.cwiseMax(0.0) * part.lower + s0w.cwiseMin(0.0) * part.upper;
        Box hull = interval_hull(full);
        Box full_bounds{(neg + neg0).cwiseMax(hull.lower), (pos + pos0).cwiseMin(hull.upper)};
        return Propagated{std::move(full), std::move(full_bounds)};
    }
    return Propagated{std::move(z), std::move(bounds)};
}

Flowpipe surrogate_flowpipe(const SurrogateNet& net, const std::vector<Box>& partitions,
                            Exec exec, const PropagateOptions& options) {
    require(!partitions.empty(), "no partitions");
    const int n = net.input_dim();
    const int out = net.output_dim();
    require(out % n == 0, "output width must be a multiple of n");

    Flowpipe fp;
    fp.n = n;
    fp.K = out / n;
    fp.parts.resize(partitions.size());
    par_for(partitions.size(), exec, [&](std::size_t i) {
        const Propagated prop = propagate(net, partitions[i], options);
        Box part{Vec(n + out), Vec(n + out)};
        part.lower.head(n) = partitions[i].lower;
        part.upper.head(n) = partitions[i].upper;
        part.lower.tail(out) = prop.bounds.lower;
        part.upper.tail(out) = prop.bounds.upper;
        fp.parts[i] = std::move(part);
    });
    return fp;
}

Flowpipe inflate(const Flowpipe& fp, double r_star, const Vec& alpha) {
    require(!fp.inflated, "flowpipe is already inflated");
    if (std::isinf(r_star))
        throw InfeasibleError("insufficient calibration data: the robust quantile is infinite");
    require(r_star >= 0.0, "r_star must be >= 0");
    require(alpha.size() == static_cast<Eigen::Index>(fp.n) * fp.K, "alpha width mismatch");
    require(alpha.minCoeff() > 0.0, "alpha must be positive");

    Flowpipe out = fp;
    const Vec widths = r_star * alpha.cwiseInverse();
    for (Box& part : out.parts) {
        part.lower.tail(widths.size()) -= widths;
        part.upper.tail(widths.size()) += widths;
    }
    out.inflated = true;
    out.r_star = r_star;
    out.alpha = alpha;
    return out;
}

bool contains(const Flowpipe& fp, const Trajectory& trajectory) {
    require(trajectory.size() == static_cast<Eigen::Index>(fp.n) * (fp.K + 1),
            "trajectory length mismatch");
    for (const Box& part : fp.parts)
        if (part.contains(trajectory)) return true;
    return false;
}

long count_contained(const Flowpipe& fp, const TrajectoryDataset& dataset, Exec exec) {
    require(dataset.n == fp.n && dataset.K == fp.K, "dataset/flowpipe shape mismatch");
    return chunked_reduce<long>(
        static_cast<std::size_t>(dataset.count()), exec,
        [&](long& acc, std::size_t i) {
            if (contains(fp, dataset.trajectory(static_cast<Eigen::Index>(i)))) ++acc;
        },
        [](long& total, const long& c) { total += c; });
}

std::vector<StepInterval> project(const Flowpipe& fp, int state_dim, int step_lo, int step_hi) {
    require(state_dim >= 0 && state_dim < fp.n, "state component out of range");
    require(step_lo >= 0 && step_hi <= fp.K && step_lo <= step_hi, "step range out of bounds");
    std::vector<StepInterval> out;
    out.reserve(step_hi - step_lo + 1);
    for (int k = step_lo; k <= step_hi; ++k) {
        const int flat = k * fp.n + state_dim;
        double lo = std::numeric_limits<double>::infinity();
        double hi = -std::numeric_limits<double>::infinity();
        for (const Box& part : fp.parts) {
            lo = std::min(lo, part.lower[flat]);
            hi = std::max(hi, part.upper[flat]);
        }
        out.push_back({k, lo, hi});
    }
    return out;
}

void save_flowpipe_json(const Flowpipe& fp, const std::string& path) {
    json j;
    j["n"] = fp.n;
    j["K"] = fp.K;
    j["delta"] = fp.delta;
    j["tau"] = fp.tau;
    j["inflated"] = fp.inflated;
    if (fp.inflated) {
        j["r_star"] = fp.r_star;
        json alpha = json::array();
        for (Eigen::Index i = 0; i < fp.alpha.size(); ++i) alpha.push_back(fp.alpha[i]);
        j["alpha"] = alpha;
    }
    json parts = json::array();
    for (const Box& part : fp.parts) {
        json lower = json::array(), upper = json::array();
        for (Eigen::Index i = 0; i < part.lower.size(); ++i) {
            lower.push_back(part.lower[i]);
            upper.push_back(part.upper[i]);
        }
        parts.push_back({{"lower", lower}, {"upper", upper}});
    }
    j["parts"] = parts;
    write_text_file(path, j.dump() + "\n");
}

Flowpipe load_flowpipe_json(const std::string& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw IoError("malformed flowpipe json " + path + ": " + e.what());
    }
    Flowpipe fp;
    fp.n = j.at("n").get<int>();
    fp.K = j.at("K").get<int>();
    fp.delta = j.at("delta").get<double>();
    fp.tau = j.at("tau").get<double>();
    fp.inflated = j.at("inflated").get<bool>();
    if (fp.inflated) {
        fp.r_star = j.at("r_star").get<double>();
        const auto& alpha = j.at("alpha");
        fp.alpha.resize(alpha.size());
        for (std::size_t i = 0; i < alpha.size(); ++i) fp.alpha[i] = alpha[i].get<double>();
    }
    for (const auto& part : j.at("parts")) {
        const auto& lower = part.at("lower");
        const auto& upper = part.at("upper");
        Box box{Vec(lower.size()), Vec(upper.size())};
        for (std::size_t i = 0; i < lower.size(); ++i) {
            box.lower[i] = lower[i].get<double>();
            box.upper[i] = upper[i].get<double>();
        }
        fp.parts.push_back(std::move(box));
    }
    return fp;
}

} // namespace cpreach

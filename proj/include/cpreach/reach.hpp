#pragma once

#include <string>
#include <vector>

#include "cpreach/common.hpp"
#include "cpreach/dynamics.hpp"
#include "cpreach/parallel.hpp"
#include "cpreach/surrogate.hpp"

namespace cpreach {

struct Box {
    Vec lower;
    Vec upper;

    int dim() const { return static_cast<int>(lower.size()); }
    bool contains(const Vec& x) const {
        return (x.array() >= lower.array()).all() && (x.array() <= upper.array()).all();
    }
};

void validate_box(const Box& box);

// {center + sum_i mu_i g_i : mu_i in [-1,1]}; generators are the columns.
struct Zonotope {
    Vec center;
    Mat generators;  // d x p
};

// Per-dimension [b_i - sum_j |g_ij|, b_i + sum_j |g_ij|].
Box interval_hull(const Zonotope& z);

// Regular grid refinement of a box; the union equals the input and cell
// interiors are disjoint.
std::vector<Box> partition(const Box& init, const std::vector<int>& splits);

// Merges the smallest generators (beyond the first protected_prefix columns)
// into an axis-aligned box term so at most max_generators columns remain.
// Sound: the reduced zonotope contains the original.
Zonotope reduce_order(const Zonotope& z, int max_generators, int protected_prefix = 0);

struct PropagateOptions {
    // order reduction triggers when the generator count exceeds
    // cap_factor * (current layer width); 0 disables reduction
    int generator_cap_factor = 4;
};

struct Propagated {
    Zonotope zonotope;
    Box bounds;  // interval hull tightened by the concrete per-neuron bounds
};

// Sound over-approximation of the image of `part` under the network. Affine
// layers map the zonotope exactly; an undecided ReLU neuron with concrete
// pre-activation bounds [l, u] becomes y = lambda x + mu plus a fresh
// generator of magnitude mu, lambda = u/(u-l), mu = -lambda l / 2.
Propagated propagate(const SurrogateNet& net, const Box& part,
                     const PropagateOptions& options = {});

// Union of per-partition boxes in R^{n(K+1)}; the first n dimensions of each
// part equal its source partition.
struct Flowpipe {
    int n = 0;
    int K = 0;
    std::vector<Box> parts;
    bool inflated = false;
    double r_star = 0.0;
    Vec alpha;
    double delta = 0.0;
    double tau = 0.0;
};

Flowpipe surrogate_flowpipe(const SurrogateNet& net, const std::vector<Box>& partitions,
                            Exec exec = Exec::OpenMP, const PropagateOptions& options = {});

// Minkowski sum with the inflating box: output dimension j widens by
// r_star / alpha_j, the initial-state dimensions stay untouched.
Flowpipe inflate(const Flowpipe& fp, double r_star, const Vec& alpha);

// Closed-interval membership: true iff some part contains the trajectory.
bool contains(const Flowpipe& fp, const Trajectory& trajectory);

long count_contained(const Flowpipe& fp, const TrajectoryDataset& dataset,
                     Exec exec = Exec::OpenMP);

struct StepInterval {
    int step;
    double lower;
    double upper;
};

// Per-step union hull of one state component over steps [step_lo, step_hi].
std::vector<StepInterval> project(const Flowpipe& fp, int state_dim, int step_lo, int step_hi);

void save_flowpipe_json(const Flowpipe& fp, const std::string& path);
Flowpipe load_flowpipe_json(const std::string& path);

} // namespace cpreach

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cpreach/common.hpp"
#include "cpreach/parallel.hpp"
#include "cpreach/rng.hpp"

namespace cpreach {

enum class ModelKind { DifferenceEquation, Ode };
enum class Integrator { Euler, Rk4 };

// A named stochastic dynamical system: deterministic update rule plus
// additive zero-mean Gaussian noise applied once per sampled step.
struct SystemModel {
    std::string name;
    int n = 0;
    ModelKind kind = ModelKind::DifferenceEquation;
    double dt = 0.0;          // sampling time, ode kind only
    Vec noise_cov;            // diagonal of the covariance (variances)
    Integrator integrator = Integrator::Rk4;
    std::string controller;   // built-in controller id, quadcopter only
};

// Built-in benchmarks: "periodic2d" (n=2, difference equation),
// "trvdp" (n=2, ode, dt=0.02), "quadcopter12d" (n=12, ode, dt=0.05).
SystemModel make_model(const std::string& name);

struct ShiftSpec {
    double noise_scale = 1.0;
    std::optional<Vec> replace_cov;  // diagonal replacement, overrides noise_scale
};

SystemModel apply_shift(const SystemModel& model, const ShiftSpec& shift);

struct InitialSet {
    enum class Dist { Uniform, TruncatedGaussian };
    Vec lower;
    Vec upper;
    Dist dist = Dist::Uniform;
    Vec tg_mean;  // TruncatedGaussian only
    Vec tg_std;   // componentwise standard deviations
};

void validate_initial_set(const InitialSet& init, int n);
Vec sample_initial_state(const InitialSet& init, RngStream& rng);

// Flattened trajectory [s_0^T, s_1^T, ..., s_K^T], length n(K+1).
using Trajectory = Vec;

struct TrajectoryDataset {
    int n = 0;
    int K = 0;
    std::uint64_t seed = 0;
    std::string source_model;
    Mat initial_states;  // L x n
    Mat tails;           // L x nK, row i continues initial_states.row(i)
    Eigen::Index count() const { return initial_states.rows(); }
    Trajectory trajectory(Eigen::Index i) const;
};

// One noise-free step of the deterministic part (difference update, or one
// integrator step over dt for ode models).
Vec deterministic_step(const SystemModel& model, const Vec& s);

// Simulates K steps; noise drawn from rng as N(0, noise_cov) after each
// deterministic step. Throws NumericError (with the step index) if the state
// leaves the finite range. When noise_log is given, the per-step noise
// vectors are recorded there.
Trajectory simulate(const SystemModel& model, const Vec& s0, int K, RngStream& rng,
                    std::vector<Vec>* noise_log = nullptr);

// L i.i.d. trajectories, one RNG substream per trajectory; bit-identical for
// a given seed regardless of exec mode.
TrajectoryDataset sample_dataset(const SystemModel& model, const InitialSet& init, int K, long L,
                                 std::uint64_t seed, Exec exec = Exec::OpenMP);

// Dataset CSV: one header row with the values n,K,L,seed,model followed by
// one row per trajectory holding the n(K+1) flattened states (round-trip
// exact decimals).
void save_dataset_csv(const TrajectoryDataset& ds, const std::string& path);
TrajectoryDataset load_dataset_csv(const std::string& path);

} // namespace cpreach

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cpreach/common.hpp"
#include "cpreach/conformal.hpp"
#include "cpreach/dynamics.hpp"
#include "cpreach/reach.hpp"
#include "cpreach/surrogate.hpp"

namespace cpreach {

struct SeedSet {
    std::uint64_t train = 1;
    std::uint64_t calibration = 2;
    std::uint64_t lp = 3;
    std::uint64_t validation = 4;
};

struct DatasetSizes {
    long train = 10000;
    long calibration = 2000;
    long lp = 2000;
    long validation = 10000;
};

struct ExperimentConfig {
    std::string model = "periodic2d";
    ShiftSpec shift;                 // deployment environment = model + shift
    InitialSet initial_set;
    int horizon = 20;                // K
    DatasetSizes sizes;
    TrainConfig train;
    std::vector<int> hidden_layers = {32, 64};
    int interp_factor = 1;           // >1 trains on subsampled steps
    std::vector<int> partitions;     // per dimension; empty = 1 per dimension
    double delta = 0.95;
    double tau = 0.0;
    Divergence divergence = Divergence::TotalVariation;
    bool refine_alpha = true;
    int shift_bins = 100;
    SeedSet seeds;
    std::string output_dir = "out";
};

ExperimentConfig load_config(const std::string& path);
std::string config_json(const ExperimentConfig& config);
std::uint64_t config_hash(const ExperimentConfig& config);

void validate_config(const ExperimentConfig& config);

struct ValidationReport {
    double delta_tilde = 0.0;          // fraction of fresh residuals <= r*
    double Delta_tilde = 0.0;          // fraction of fresh trajectories inside the flowpipe
    double vanilla_delta_tilde = 0.0;
    double vanilla_Delta_tilde = 0.0;
    double tau_tilde = 0.0;            // estimated shift between sim and deployment residuals
    long validation_count = 0;
    std::uint64_t seed = 0;
};

struct PipelineResult {
    ModelArtifact model;
    RobustQuantileResult robust;
    RobustQuantileResult vanilla;
    Flowpipe surrogate_fp;
    Flowpipe inflated_fp;
    Flowpipe vanilla_fp;
    ValidationReport report;
};

// Samples fresh trajectories from the deployed (shifted) system, reports
// empirical coverages for the inflated flowpipes and quantiles, and estimates
// the residual-space shift against a fresh simulator sample.
ValidationReport validate(const Flowpipe& robust_fp, const Flowpipe& vanilla_fp,
                          const ModelArtifact& model, const SystemModel& deployed,
                          const SystemModel& sim, const InitialSet& init, long count, int bins,
                          std::uint64_t seed, double r_star_robust, double r_star_vanilla,
                          Exec exec = Exec::OpenMP);

// sample -> train -> (refine) -> calibrate -> partition/propagate -> inflate
// -> validate; every intermediate artifact is written under out_dir. The
// calibration dataset is sampled with its own seed and never touches the
// training stage.
PipelineResult run_pipeline(const ExperimentConfig& config, const std::string& out_dir,
                            bool quiet = false);

// Plot-ready projection CSVs (step, lower, upper) per requested component for
// the surrogate and inflated pipes plus a manifest tying files to the config
// hash. Returns the written paths.
std::vector<std::string> export_flowpipes(const Flowpipe& surrogate, const Flowpipe& inflated,
                                          const std::vector<int>& components,
                                          const std::string& out_dir, std::uint64_t config_hash);

void save_report_json(const ValidationReport& report, const RobustQuantileResult& robust,
                      const RobustQuantileResult& vanilla, const std::string& path);

} // namespace cpreach

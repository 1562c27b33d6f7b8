#include "cpreach/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <span>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cpreach/csv.hpp"
#include "cpreach/refine.hpp"

namespace cpreach {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

Vec vec_from_json(const json& arr) {
    Vec v(arr.size());
    for (std::size_t i = 0; i < arr.size(); ++i) v[i] = arr[i].get<double>();
    return v;
}

json vec_to_json(const Vec& v) {
    json arr = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
    return arr;
}

double elapsed_s(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

} // namespace

ExperimentConfig load_config(const std::string& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw IoError("malformed config " + path + ": " + e.what());
    }
    ExperimentConfig cfg;
    cfg.model = j.value("model", cfg.model);
    if (j.contains("shift")) {
        const auto& s = j.at("shift");
        if (s.contains("replace_cov")) cfg.shift.replace_cov = vec_from_json(s.at("replace_cov"));
        cfg.shift.noise_scale = s.value("noise_scale", 1.0);
    }
    if (j.contains("initial_set")) {
        const auto& s = j.at("initial_set");
        cfg.initial_set.lower = vec_from_json(s.at("lower"));
        cfg.initial_set.upper = vec_from_json(s.at("upper"));
        const std::string dist = s.value("distribution", "uniform");
        if (dist == "uniform") {
            cfg.initial_set.dist = InitialSet::Dist::Uniform;
        } else if (dist == "truncated-gaussian") {
            cfg.initial_set.dist = InitialSet::Dist::TruncatedGaussian;
            cfg.initial_set.tg_mean = vec_from_json(s.at("mean"));
            cfg.initial_set.tg_std = vec_from_json(s.at("std"));
        } else {
            throw std::invalid_argument("unknown initial distribution: " + dist);
        }
    }
    cfg.horizon = j.value("horizon", cfg.horizon);
    if (j.contains("sizes")) {
        const auto& s = j.at("sizes");
        cfg.sizes.train = s.value("train", cfg.sizes.train);
        cfg.sizes.calibration = s.value("calibration", cfg.sizes.calibration);
        cfg.sizes.lp = s.value("lp", cfg.sizes.lp);
        cfg.sizes.validation = s.value("validation", cfg.sizes.validation);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        cfg.train.loss_mode = loss_mode_from_name(t.value("loss_mode", "quantile"));
        cfg.train.c = t.value("c", cfg.train.c);
        cfg.train.lipschitz_cap = t.value("lipschitz_cap", cfg.train.lipschitz_cap);
        cfg.train.epochs = t.value("epochs", cfg.train.epochs);
        cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
        cfg.train.learning_rate = t.value("learning_rate", cfg.train.learning_rate);
        cfg.train.momentum = t.value("momentum", cfg.train.momentum);
        if (t.contains("hidden")) cfg.hidden_layers = t.at("hidden").get<std::vector<int>>();
    }
    cfg.interp_factor = j.value("interp_factor", cfg.interp_factor);
    if (j.contains("partitions")) {
        if (j.at("partitions").is_number_integer()) {
            cfg.partitions.assign(cfg.initial_set.lower.size(),
                                  j.at("partitions").get<int>());
        } else {
            cfg.partitions = j.at("partitions").get<std::vector<int>>();
        }
    }
    cfg.delta = j.value("delta", cfg.delta);
    cfg.tau = j.value("tau", cfg.tau);
    if (j.contains("divergence")) cfg.divergence = divergence_from_name(j.at("divergence"));
    cfg.refine_alpha = j.value("refine", cfg.refine_alpha);
    cfg.shift_bins = j.value("shift_bins", cfg.shift_bins);
    if (j.contains("seeds")) {
        const auto& s = j.at("seeds");
        cfg.seeds.train = s.value("train", cfg.seeds.train);
        cfg.seeds.calibration = s.value("calibration", cfg.seeds.calibration);
        cfg.seeds.lp = s.value("lp", cfg.seeds.lp);
        cfg.seeds.validation = s.value("validation", cfg.seeds.validation);
    }
    cfg.output_dir = j.value("output", cfg.output_dir);
    return cfg;
}

std::string config_json(const ExperimentConfig& cfg) {
    json j;
    j["model"] = cfg.model;
    json shift;
    shift["noise_scale"] = cfg.shift.noise_scale;
    if (cfg.shift.replace_cov) shift["replace_cov"] = vec_to_json(*cfg.shift.replace_cov);
    j["shift"] = shift;
    json init;
    init["lower"] = vec_to_json(cfg.initial_set.lower);
    init["upper"] = vec_to_json(cfg.initial_set.upper);
    init["distribution"] =
        cfg.initial_set.dist == InitialSet::Dist::Uniform ? "uniform" : "truncated-gaussian";
    if (cfg.initial_set.dist == InitialSet::Dist::TruncatedGaussian) {
        init["mean"] = vec_to_json(cfg.initial_set.tg_mean);
        init["std"] = vec_to_json(cfg.initial_set.tg_std);
    }
    j["initial_set"] = init;
    j["horizon"] = cfg.horizon;
    j["sizes"] = {{"train", cfg.sizes.train},
                  {"calibration", cfg.sizes.calibration},
                  {"lp", cfg.sizes.lp},
                  {"validation", cfg.sizes.validation}};
    j["train"] = {{"loss_mode", loss_mode_name(cfg.train.loss_mode)},
                  {"c", cfg.train.c},
                  {"lipschitz_cap", cfg.train.lipschitz_cap},
                  {"epochs", cfg.train.epochs},
                  {"batch_size", cfg.train.batch_size},
                  {"learning_rate", cfg.train.learning_rate},
                  {"momentum", cfg.train.momentum},
                  {"hidden", cfg.hidden_layers}};
    j["interp_factor"] = cfg.interp_factor;
    j["partitions"] = cfg.partitions;
    j["delta"] = cfg.delta;
    j["tau"] = cfg.tau;
    j["divergence"] = divergence_name(cfg.divergence);
    j["refine"] = cfg.refine_alpha;
    j["shift_bins"] = cfg.shift_bins;
    j["seeds"] = {{"train", cfg.seeds.train},
                  {"calibration", cfg.seeds.calibration},
                  {"lp", cfg.seeds.lp},
                  {"validation", cfg.seeds.validation}};
    return j.dump(2) + "\n";
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
    // FNV-1a over the canonical dump
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : config_json(cfg)) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    return h;
}

void validate_config(const ExperimentConfig& cfg) {
    require(cfg.delta > 0.0 && cfg.delta < 1.0, "delta must be in (0,1)");
    require(cfg.tau >= 0.0, "tau must be >= 0");
    require(cfg.horizon >= 1, "horizon must be >= 1");
    require(cfg.sizes.train >= 1 && cfg.sizes.calibration >= 1 && cfg.sizes.lp >= 1 &&
                cfg.sizes.validation >= 1,
            "all dataset sizes must be >= 1");
    require(cfg.interp_factor >= 1, "interp_factor must be >= 1");
    if (cfg.interp_factor > 1)
        require(cfg.horizon % cfg.interp_factor == 0,
                "horizon must be divisible by interp_factor");
    const SystemModel model = make_model(cfg.model);
    validate_initial_set(cfg.initial_set, model.n);
    if (!cfg.partitions.empty())
        require(static_cast<int>(cfg.partitions.size()) == model.n,
                "partitions must give one count per state dimension");

    const DivergenceSpec div{cfg.divergence, cfg.tau};
    const long min_m = min_calibration_size(cfg.delta, div);
    if (cfg.sizes.calibration < min_m)
        throw InfeasibleError("calibration size " + std::to_string(cfg.sizes.calibration) +
                              " is below the minimum " + std::to_string(min_m) +
                              " required for delta = " + format_double(cfg.delta) +
                              ", tau = " + format_double(cfg.tau));
}

ValidationReport validate(const Flowpipe& robust_fp, const Flowpipe& vanilla_fp,
                          const ModelArtifact& model, const SystemModel& deployed,
                          const SystemModel& sim, const InitialSet& init, long count, int bins,
                          std::uint64_t seed, double r_star_robust, double r_star_vanilla,
                          Exec exec) {
    require(robust_fp.inflated, "validation needs an inflated flowpipe");
    require(count >= 1, "validation count must be >= 1");
    require(deployed.n == robust_fp.n, "model/flowpipe dimension mismatch");

    const TrajectoryDataset fresh = sample_dataset(deployed, init, robust_fp.K, count, seed, exec);
    const Mat comp = dataset_component_residuals(model.net, fresh, exec);
    const Vec scalars = scalar_residuals(comp, model.alpha);

    // fresh simulator sample for the shift estimate, independent substream
    const TrajectoryDataset sim_fresh =
        sample_dataset(sim, init, robust_fp.K, count, seed ^ 0x73696d2d73616d70ull, exec);
    const Vec sim_scalars =
        scalar_residuals(dataset_component_residuals(model.net, sim_fresh, exec), model.alpha);

    ValidationReport report;
    report.validation_count = count;
    report.seed = seed;
    report.delta_tilde =
        coverage_fraction(std::span(scalars.data(), scalars.size()), r_star_robust);
    report.vanilla_delta_tilde =
        coverage_fraction(std::span(scalars.data(), scalars.size()), r_star_vanilla);
    report.Delta_tilde =
        static_cast<double>(count_contained(robust_fp, fresh, exec)) / static_cast<double>(count);
    report.vanilla_Delta_tilde =
        vanilla_fp.inflated
            ? static_cast<double>(count_contained(vanilla_fp, fresh, exec)) /
                  static_cast<double>(count)
            : 0.0;
    report.tau_tilde = estimate_shift_tv(std::span(sim_scalars.data(), sim_scalars.size()),
                                         std::span(scalars.data(), scalars.size()), bins);
    return report;
}

void save_report_json(const ValidationReport& report, const RobustQuantileResult& robust,
                      const RobustQuantileResult& vanilla, const std::string& path) {
    json j;
    j["delta_tilde"] = report.delta_tilde;
    j["Delta_tilde"] = report.Delta_tilde;
    j["vanilla_delta_tilde"] = report.vanilla_delta_tilde;
    j["vanilla_Delta_tilde"] = report.vanilla_Delta_tilde;
    j["tau_tilde"] = report.tau_tilde;
    j["validation_count"] = report.validation_count;
    j["validation_seed"] = report.seed;
    j["robust"] = {{"epsilon", robust.epsilon},
                   {"epsilon_bar", robust.epsilon_bar},
                   {"m", robust.m},
                   {"r_star", std::isinf(robust.r_star) ? json("inf") : json(robust.r_star)}};
    j["vanilla"] = {{"epsilon", vanilla.epsilon},
                    {"epsilon_bar", vanilla.epsilon_bar},
                    {"m", vanilla.m},
                    {"r_star", std::isinf(vanilla.r_star) ? json("inf") : json(vanilla.r_star)}};
    write_text_file(path, j.dump(2) + "\n");
}

std::vector<std::string> export_flowpipes(const Flowpipe& surrogate, const Flowpipe& inflated,
                                          const std::vector<int>& components,
                                          const std::string& out_dir,
                                          std::uint64_t config_hash_value) {
    fs::create_directories(out_dir);
    std::vector<std::string> files;
    auto write_projection = [&](const Flowpipe& fp, int comp, const std::string& tag) {
        if (comp < 0 || comp >= fp.n)
            throw std::invalid_argument("unknown component index " + std::to_string(comp));
        std::ostringstream out;
        out << "step,lower,upper\n";
        for (const StepInterval& si : project(fp, comp, 0, fp.K))
            out << si.step << ',' << format_double(si.lower) << ',' << format_double(si.upper)
                << '\n';
        const std::string path =
            (fs::path(out_dir) / ("projection_c" + std::to_string(comp) + "_" + tag + ".csv"))
                .string();
        write_text_file(path, out.str());
        files.push_back(path);
    };
    for (int comp : components) {
        write_projection(surrogate, comp, "surrogate");
        write_projection(inflated, comp, "inflated");
    }

    json manifest;
    manifest["config_hash"] = config_hash_value;
    json names = json::array();
    for (const std::string& f : files) names.push_back(fs::path(f).filename().string());
    manifest["files"] = names;
    const std::string manifest_path = (fs::path(out_dir) / "manifest.json").string();
    write_text_file(manifest_path, manifest.dump(2) + "\n");
    files.push_back(manifest_path);
    return files;
}

PipelineResult run_pipeline(const ExperimentConfig& cfg, const std::string& out_dir, bool quiet) {
    validate_config(cfg);
    fs::create_directories(out_dir);
    auto say = [&](const std::string& msg) {
        if (!quiet) std::cout << msg << std::endl;
    };
    const auto path = [&](const std::string& name) {
        return (fs::path(out_dir) / name).string();
    };

    const SystemModel sim = make_model(cfg.model);
    const SystemModel deployed = apply_shift(sim, cfg.shift);
    const DivergenceSpec div{cfg.divergence, cfg.tau};
    const double epsilon = 1.0 - cfg.delta;
    const double eps_bar = adjusted_epsilon(epsilon, div, cfg.sizes.calibration);
    const int k_trained = cfg.horizon / cfg.interp_factor;

    write_text_file(path("config.json"), config_json(cfg));

    // -- sample the training data (simulator only)
    auto t0 = std::chrono::steady_clock::now();
    TrajectoryDataset train_full =
        sample_dataset(sim, cfg.initial_set, cfg.horizon, cfg.sizes.train, cfg.seeds.train,
                       cfg.train.exec);
    save_dataset_csv(train_full, path("train_dataset.csv"));

    TrajectoryDataset train_ds = train_full;
    if (cfg.interp_factor > 1) {
        // train on every interp_factor-th step; the interpolation stage
        // restores the full horizon afterwards
        train_ds.K = k_trained;
        train_ds.tails.resize(train_full.count(), sim.n * k_trained);
        for (int k = 1; k <= k_trained; ++k)
            train_ds.tails.middleCols(static_cast<Eigen::Index>(k - 1) * sim.n, sim.n) =
                train_full.tails.middleCols(
                    (static_cast<Eigen::Index>(k) * cfg.interp_factor - 1) * sim.n, sim.n);
    }
    say("sampled " + std::to_string(train_full.count()) + " training trajectories in " +
        format_double(elapsed_s(t0)) + "s");

    // -- train
    t0 = std::chrono::steady_clock::now();
    std::vector<int> arch;
    arch.push_back(sim.n);
    for (int h : cfg.hidden_layers) arch.push_back(h);
    arch.push_back(sim.n * k_trained);
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seeds.train;
    tc.delta_bar = 1.0 - eps_bar;
    TrainResult trained = train(train_ds, arch, tc);

    ModelArtifact model;
    model.net = std::move(trained.net);
    model.q = trained.q;
    model.n = sim.n;
    model.K = cfg.horizon;
    model.loss_mode = tc.loss_mode;
    model.seed = cfg.seeds.train;
    if (cfg.interp_factor > 1) {
        model.net.interp = build_interp_matrix(sim.n * k_trained, sim.n * cfg.horizon, sim.n);
        // scaling factors carry over to un-sampled steps by interpolating the
        // widths omega = 1/alpha
        constexpr double eps_floor = 1e-12;
        Vec omega = trained.alpha.cwiseInverse();
        model.alpha = interpolate_omega(omega, sim.n, cfg.interp_factor)
                          .cwiseMax(eps_floor)
                          .cwiseInverse();
        if (tc.loss_mode == LossMode::Mse) model.alpha = normalize_alpha(model.net, train_full);
    } else {
        model.alpha = trained.alpha;
    }
    model.alpha_provenance = tc.loss_mode == LossMode::Mse ? "normalized" : "trained";
    {
        std::ostringstream hist;
        hist << "epoch,l1,l2,total\n";
        for (std::size_t e = 0; e < trained.loss_history.size(); ++e)
            hist << e << ',' << format_double(trained.loss_history[e][0]) << ','
                 << format_double(trained.loss_history[e][1]) << ','
                 << format_double(trained.loss_history[e][2]) << '\n';
        write_text_file(path("loss_history.csv"), hist.str());
    }
    say("trained " + loss_mode_name(tc.loss_mode) + " surrogate in " +
        format_double(elapsed_s(t0)) + "s (lipschitz bound " + format_double(trained.lipschitz) +
        ")");

    // -- optional scaling refinement on a fresh dataset
    if (cfg.refine_alpha) {
        t0 = std::chrono::steady_clock::now();
        const TrajectoryDataset lp_ds = sample_dataset(sim, cfg.initial_set, cfg.horizon,
                                                       cfg.sizes.lp, cfg.seeds.lp, cfg.train.exec);
        save_dataset_csv(lp_ds, path("lp_dataset.csv"));
        RefinementInput input;
        input.components = dataset_component_residuals(model.net, lp_ds, cfg.train.exec);
        input.scalars = scalar_residuals(input.components, model.alpha);
        model.alpha = refine_scaling_alpha(input);
        model.alpha_provenance = "refined";
        say("refined scaling factors in " + format_double(elapsed_s(t0)) + "s");
    }
    save_model_json(model, path("model.json"));

    // -- calibrate (robust + vanilla quantiles from the same residuals)
    t0 = std::chrono::steady_clock::now();
    const TrajectoryDataset calib_ds =
        sample_dataset(sim, cfg.initial_set, cfg.horizon, cfg.sizes.calibration,
                       cfg.seeds.calibration, cfg.train.exec);
    save_dataset_csv(calib_ds, path("calibration_dataset.csv"));
    const Mat calib_comp = dataset_component_residuals(model.net, calib_ds, cfg.train.exec);
    const Vec calib_scalars = scalar_residuals(calib_comp, model.alpha);
    save_residuals_csv(calib_comp, calib_scalars, path("calibration_residuals.csv"));

    PipelineResult result;
    result.model = model;
    const std::span<const double> calib_span(calib_scalars.data(), calib_scalars.size());
    result.robust = robust_quantile(calib_span, epsilon, div);
    result.vanilla.epsilon = epsilon;
    result.vanilla.epsilon_bar = epsilon;  // vanilla CI neglects the shift
    result.vanilla.m = calib_scalars.size();
    result.vanilla.divergence = DivergenceSpec{cfg.divergence, 0.0};
    result.vanilla.r_star = conformal_quantile(calib_span, epsilon);
    save_quantile_json(result.robust, path("quantile.json"));
    save_quantile_json(result.vanilla, path("quantile_vanilla.json"));
    if (result.robust.insufficient_data())
        throw InfeasibleError("robust quantile is infinite: calibration set too small");
    say("calibrated r* = " + format_double(result.robust.r_star) +
        " (vanilla " + format_double(result.vanilla.r_star) + ") in " +
        format_double(elapsed_s(t0)) + "s");

    // -- reachability
    t0 = std::chrono::steady_clock::now();
    std::vector<int> splits = cfg.partitions;
    if (splits.empty()) splits.assign(sim.n, 1);
    const std::vector<Box> parts =
        partition(Box{cfg.initial_set.lower, cfg.initial_set.upper}, splits);
    result.surrogate_fp = surrogate_flowpipe(model.net, parts, cfg.train.exec);
    result.surrogate_fp.delta = cfg.delta;
    result.surrogate_fp.tau = cfg.tau;
    save_flowpipe_json(result.surrogate_fp, path("flowpipe_surrogate.json"));

    result.inflated_fp = inflate(result.surrogate_fp, result.robust.r_star, model.alpha);
    save_flowpipe_json(result.inflated_fp, path("flowpipe_inflated.json"));
    result.vanilla_fp = inflate(result.surrogate_fp, result.vanilla.r_star, model.alpha);
    save_flowpipe_json(result.vanilla_fp, path("flowpipe_vanilla.json"));
    say("propagated " + std::to_string(parts.size()) + " partitions in " +
        format_double(elapsed_s(t0)) + "s");

    // -- validate against the deployment environment
    t0 = std::chrono::steady_clock::now();
    result.report = validate(result.inflated_fp, result.vanilla_fp, model, deployed, sim,
                             cfg.initial_set, cfg.sizes.validation, cfg.shift_bins,
                             cfg.seeds.validation, result.robust.r_star, result.vanilla.r_star,
                             cfg.train.exec);
    save_report_json(result.report, result.robust, result.vanilla, path("report.json"));
    say("validated on " + std::to_string(cfg.sizes.validation) + " fresh trajectories in " +
        format_double(elapsed_s(t0)) + "s: delta~ = " + format_double(result.report.delta_tilde) +
        ", Delta~ = " + format_double(result.report.Delta_tilde) +
        ", tau~ = " + format_double(result.report.tau_tilde));

    // -- plot-ready exports
    std::vector<int> components(sim.n);
    for (int i = 0; i < sim.n; ++i) components[i] = i;
    export_flowpipes(result.surrogate_fp, result.inflated_fp, components, out_dir,
                     config_hash(cfg));
    return result;
}

} // namespace cpreach

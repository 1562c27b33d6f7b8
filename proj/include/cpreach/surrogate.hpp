#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cpreach/common.hpp"
#include "cpreach/dynamics.hpp"
#include "cpreach/parallel.hpp"

namespace cpreach {

// Linear interpolation stage appended after the base network: full-horizon
// prediction = output_weights * base_output + init_state_weights * s0.
// The s0 term carries the first-interval rows, which interpolate between the
// (exactly known) initial state and the first trained step.
struct InterpMap {
    Mat output_weights;      // nK_full x nK_trained
    Mat init_state_weights;  // nK_full x n
};

// Feedforward ReLU network mapping an initial state to the flattened
// trajectory tail. Hidden layers apply max(0,.), the last layer is affine.
struct SurrogateNet {
    std::vector<int> layer_sizes;  // [n, h1, ..., hp, nK]
    std::vector<Mat> weights;      // weights[l]: layer_sizes[l+1] x layer_sizes[l]
    std::vector<Vec> biases;
    std::optional<InterpMap> interp;

    int input_dim() const { return layer_sizes.front(); }
    int base_output_dim() const { return layer_sizes.back(); }
    int output_dim() const {
        return interp ? static_cast<int>(interp->output_weights.rows()) : base_output_dim();
    }
    int num_layers() const { return static_cast<int>(weights.size()); }
};

void validate_net(const SurrogateNet& net);

Vec forward(const SurrogateNet& net, const Vec& s0);

// One row per input row; bit-identical across exec modes.
Mat forward_batch(const SurrogateNet& net, const Mat& s0s, Exec exec = Exec::OpenMP);

// Pinball loss driving q toward the delta_bar-quantile of the residuals:
//   sum_i  delta_bar*max(0, R_i - q) + (1 - delta_bar)*max(0, q - R_i)
double loss_quantile_l1(std::span<const double> residuals, double q, double delta_bar);

// Surface proxy of the inflating box: q * sum_j 1/alpha_j.
double loss_surface_l2(double q, const Vec& alpha);

double loss_combined(double l1, double l2, double c);

// Appendix variant: mse + (1/batch) * sum_i max_j(alpha_j R_i^j) * sum_j 1/alpha_j.
double loss_mse_surface(double mse, const Mat& component_residuals, const Vec& alpha);

// Product of per-layer spectral norms (power iteration); a global Lipschitz
// upper bound for ReLU networks. Interp stages enter as |W|*bound + |S|.
double lipschitz_bound(const SurrogateNet& net);

enum class LossMode { Quantile, Mse, MseSurface };

std::string loss_mode_name(LossMode mode);
LossMode loss_mode_from_name(const std::string& name);

struct TrainConfig {
    LossMode loss_mode = LossMode::Quantile;
    double delta_bar = 0.95;      // target quantile level in (0,1)
    double c = 1e3;               // L1 penalty weight
    double lipschitz_cap = 0.0;   // 0 disables the projection
    int epochs = 60;
    int batch_size = 128;
    double learning_rate = 1e-6;
    double momentum = 0.9;
    std::uint64_t seed = 0;
    Exec exec = Exec::OpenMP;
};

struct TrainResult {
    SurrogateNet net;
    Vec alpha;
    double q = 0.0;
    std::vector<std::array<double, 3>> loss_history;  // per epoch: {l1, l2, total}
    double lipschitz = 0.0;
};

// SGD-with-momentum training of (theta, alpha, q) under the configured loss.
// alpha is parameterized as exp(a) so positivity needs no projection. In Mse
// mode alpha is not a decision variable; it is set post hoc by
// normalize_alpha and q is set to the empirical delta_bar-quantile of the
// final residuals. Deterministic for a given config.seed.
TrainResult train(const TrajectoryDataset& dataset, const std::vector<int>& arch,
                  const TrainConfig& config);

// alpha_j = 1 / max_i R_i^j with a 1e-12 floor on the column maximum.
Vec normalize_alpha(const SurrogateNet& net, const TrajectoryDataset& dataset,
                    Exec exec = Exec::OpenMP);

// Interpolation stage mapping predictions at every (factor)-th step to all
// steps of the refined horizon; trained steps are copied exactly.
InterpMap build_interp_matrix(int nk_trained, int nk_full, int n);

// Component-wise residuals |tail_j - prediction_j| for every trajectory of
// the dataset; rows follow the dataset order.
Mat dataset_component_residuals(const SurrogateNet& net, const TrajectoryDataset& dataset,
                                Exec exec = Exec::OpenMP);

// Scalar residuals R_i = max_j alpha_j * R_i^j.
Vec scalar_residuals(const Mat& component_residuals, const Vec& alpha);

// Trained model plus everything needed to reuse it: scaling factors, quantile
// parameter and provenance metadata. This is what model.json stores.
struct ModelArtifact {
    SurrogateNet net;
    Vec alpha;
    double q = 0.0;
    int n = 0;
    int K = 0;  // horizon of the (possibly interpolated) predictions
    LossMode loss_mode = LossMode::Quantile;
    std::uint64_t seed = 0;
    std::string alpha_provenance = "trained";
};

void save_model_json(const ModelArtifact& model, const std::string& path);
ModelArtifact load_model_json(const std::string& path);

} // namespace cpreach

#include "cpreach/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "cpreach/csv.hpp"
#include "cpreach/rng.hpp"

namespace cpreach {

using json = nlohmann::ordered_json;

void validate_net(const SurrogateNet& net) {
    require(net.layer_sizes.size() >= 2, "network needs at least one affine layer");
    require(net.weights.size() == net.layer_sizes.size() - 1 &&
                net.biases.size() == net.weights.size(),
            "layer count mismatch");
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
        require(net.weights[l].rows() == net.layer_sizes[l + 1] &&
                    net.weights[l].cols() == net.layer_sizes[l],
                "weight shape mismatch at layer " + std::to_string(l));
        require(net.biases[l].size() == net.layer_sizes[l + 1],
                "bias shape mismatch at layer " + std::to_string(l));
        if (!net.weights[l].allFinite() || !net.biases[l].allFinite())
            throw NumericError("non-finite parameters at layer " + std::to_string(l));
    }
    if (net.interp) {
        require(net.interp->output_weights.cols() == net.layer_sizes.back(),
                "interp matrix width must match the base output");
        require(net.interp->init_state_weights.rows() == net.interp->output_weights.rows() &&
                    net.interp->init_state_weights.cols() == net.layer_sizes.front(),
                "interp init-state matrix shape mismatch");
    }
}

Vec forward(const SurrogateNet& net, const Vec& s0) {
    require(s0.size() == net.input_dim(), "input dimension mismatch");
    Vec z = s0;
    const int L = net.num_layers();
    for (int l = 0; l < L; ++l) {
        z = net.weights[l] * z + net.biases[l];
        if (l + 1 < L) z = z.cwiseMax(0.0);
    }
    if (net.interp) return net.interp->output_weights * z + net.interp->init_state_weights * s0;
    return z;
}

Mat forward_batch(const SurrogateNet& net, const Mat& s0s, Exec exec) {
    Mat out(s0s.rows(), net.output_dim());
    par_for(static_cast<std::size_t>(s0s.rows()), exec, [&](std::size_t i) {
        out.row(i) = forward(net, s0s.row(i).transpose()).transpose();
    });
    return out;
}

double loss_quantile_l1(std::span<const double> residuals, double q, double delta_bar) {
    require(delta_bar > 0.0 && delta_bar < 1.0, "delta_bar must be in (0,1)");
    double sum = 0.0;
    for (double r : residuals)
        sum += delta_bar * std::max(0.0, r - q) + (1.0 - delta_bar) * std::max(0.0, q - r);
    return sum;
}

double loss_surface_l2(double q, const Vec& alpha) {
    require(alpha.size() > 0 && alpha.minCoeff() > 0.0, "alpha must be positive");
    return q * alpha.cwiseInverse().sum();
}

double loss_combined(double l1, double l2, double c) {
    require(c > 0.0, "c must be positive");
    return c * l1 + l2;
}

double loss_mse_surface(double mse, const Mat& component_residuals, const Vec& alpha) {
    require(component_residuals.rows() > 0, "empty batch");
    require(alpha.size() == component_residuals.cols() && alpha.minCoeff() > 0.0,
            "alpha must be positive and match the residual width");
    const double surface = alpha.cwiseInverse().sum();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < component_residuals.rows(); ++i)
        acc += (component_residuals.row(i).transpose().cwiseProduct(alpha)).maxCoeff();
    return mse + acc / static_cast<double>(component_residuals.rows()) * surface;
}

namespace {

double spectral_norm(const Mat& w, Vec& v, int max_iters = 100, double tol = 1e-8) {
    if (w.size() == 0) return 0.0;
    if (v.size() != w.cols() || v.norm() == 0.0) {
        RngStream rng = RngStream::substream(0x53504543u, static_cast<std::uint64_t>(w.size()));
        v.resize(w.cols());
        for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.uniform(-1.0, 1.0);
        v.normalize();
    }
    double sigma = 0.0;
    for (int it = 0; it < max_iters; ++it) {
        Vec u = w * v;
        const double s = u.norm();
        if (s == 0.0) return 0.0;
        v = w.transpose() * (u / s);
        const double nv = v.norm();
        if (nv == 0.0) return s;
        v /= nv;
        if (std::abs(s - sigma) <= tol * std::max(1.0, s)) return s;
        sigma = s;
    }
    return sigma;
}

double spectral_norm(const Mat& w) {
    Vec v;
    return spectral_norm(w, v);
}

} // namespace

double lipschitz_bound(const SurrogateNet& net) {
    validate_net(net);
    double bound = 1.0;
    for (const Mat& w : net.weights) bound *= spectral_norm(w);
    if (net.interp)
        bound = spectral_norm(net.interp->output_weights) * bound +
                spectral_norm(net.interp->init_state_weights);
    return bound;
}

std::string loss_mode_name(LossMode mode) {
    switch (mode) {
        case LossMode::Quantile: return "quantile";
        case LossMode::Mse: return "mse";
        case LossMode::MseSurface: return "mse-surface";
    }
    return "quantile";
}

LossMode loss_mode_from_name(const std::string& name) {
    if (name == "quantile") return LossMode::Quantile;
    if (name == "mse") return LossMode::Mse;
    if (name == "mse-surface") return LossMode::MseSurface;
    throw std::invalid_argument("unknown loss mode: " + name);
}

namespace {

// Per-chunk gradient accumulator; combined serially in chunk order so the
// result does not depend on the thread count.
struct GradBuffer {
    std::vector<Mat> gw;
    std::vector<Vec> gb;
    Vec ga;
    double gq = 0.0;
    double l1 = 0.0;    // pinball sum (quantile mode) or squared-error sum
    double aux = 0.0;   // surface contribution accumulated per sample

    void init(const SurrogateNet& net, int alpha_dim) {
        gw.resize(net.num_layers());
        gb.resize(net.num_layers());
        for (int l = 0; l < net.num_layers(); ++l) {
            gw[l] = Mat::Zero(net.weights[l].rows(), net.weights[l].cols());
            gb[l] = Vec::Zero(net.biases[l].size());
        }
        ga = Vec::Zero(alpha_dim);
    }

    void add(const GradBuffer& o) {
        for (std::size_t l = 0; l < gw.size(); ++l) {
            gw[l] += o.gw[l];
            gb[l] += o.gb[l];
        }
        ga += o.ga;
        gq += o.gq;
        l1 += o.l1;
        aux += o.aux;
    }
};

struct ForwardTrace {
    std::vector<Vec> acts;  // acts[0] = input, acts[l+1] = post-activation of layer l
    std::vector<Vec> pres;  // pre-activation of each layer
};

Vec traced_forward(const SurrogateNet& net, const Vec& s0, ForwardTrace& tr) {
    const int L = net.num_layers();
    tr.acts.assign(L + 1, Vec());
    tr.pres.assign(L, Vec());
    tr.acts[0] = s0;
    for (int l = 0; l < L; ++l) {
        tr.pres[l] = net.weights[l] * tr.acts[l] + net.biases[l];
        tr.acts[l + 1] = (l + 1 < L) ? tr.pres[l].cwiseMax(0.0).eval() : tr.pres[l];
    }
    return tr.acts[L];
}

// Accumulates d(loss)/d(theta) for one sample given d(loss)/d(output).
void backprop(const SurrogateNet& net, const ForwardTrace& tr, Vec delta, GradBuffer& g) {
    for (int l = net.num_layers() - 1; l >= 0; --l) {
        g.gw[l] += delta * tr.acts[l].transpose();
        g.gb[l] += delta;
        if (l > 0) {
            delta = (net.weights[l].transpose() * delta).eval();
            for (Eigen::Index i = 0; i < delta.size(); ++i)
                if (tr.pres[l - 1][i] <= 0.0) delta[i] = 0.0;
        }
    }
}

struct Params {
    SurrogateNet net;
    Vec a;  // alpha = exp(a)
    double q = 0.0;
};

struct Velocity {
    std::vector<Mat> vw;
    std::vector<Vec> vb;
    Vec va;
    double vq = 0.0;
};

int first_argmax(const Vec& v) {
    int best = 0;
    for (Eigen::Index j = 1; j < v.size(); ++j)
        if (v[j] > v[best]) best = static_cast<int>(j);
    return best;
}

} // namespace

TrainResult train(const TrajectoryDataset& dataset, const std::vector<int>& arch,
                  const TrainConfig& config) {
    const long L = dataset.count();
    require(L >= 1, "dataset is empty");
    require(!arch.empty() && arch.front() == dataset.n, "arch input width must equal n");
    require(arch.back() == dataset.n * dataset.K, "arch output width must equal nK");
    require(config.batch_size >= 1 && config.batch_size <= L, "batch size must be in [1, L]");
    require(config.delta_bar > 0.0 && config.delta_bar < 1.0, "delta_bar must be in (0,1)");
    require(config.c > 0.0, "c must be positive");

    const int out_dim = arch.back();
    const double delta_bar = config.delta_bar;

    Params p;
    p.net.layer_sizes = arch;
    RngStream init_rng = RngStream::substream(config.seed, 0);
    for (std::size_t l = 0; l + 1 < arch.size(); ++l) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(arch[l]));
        Mat w(arch[l + 1], arch[l]);
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = init_rng.uniform(-bound, bound);
        p.net.weights.push_back(std::move(w));
        p.net.biases.push_back(Vec::Zero(arch[l + 1]));
    }
    p.a = Vec::Zero(out_dim);

    std::vector<std::size_t> order(L);
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngStream shuffle_rng = RngStream::substream(config.seed, 1);
    auto shuffle = [&] {
        for (std::size_t i = L; i > 1; --i) {
            const std::size_t j = shuffle_rng.next_u64() % i;
            std::swap(order[i - 1], order[j]);
        }
    };

    shuffle();
    // q starts at the mean residual of the first batch under the initial net
    if (config.loss_mode == LossMode::Quantile) {
        double acc = 0.0;
        for (int i = 0; i < config.batch_size; ++i) {
            const auto row = order[i];
            const Vec pred = forward(p.net, dataset.initial_states.row(row).transpose());
            const Vec err =
                (dataset.tails.row(row).transpose() - pred).cwiseAbs();
            acc += err.maxCoeff();  // alpha = 1 initially
        }
        p.q = acc / config.batch_size;
    }

    Velocity vel;
    vel.vw.resize(p.net.num_layers());
    vel.vb.resize(p.net.num_layers());
    for (int l = 0; l < p.net.num_layers(); ++l) {
        vel.vw[l] = Mat::Zero(p.net.weights[l].rows(), p.net.weights[l].cols());
        vel.vb[l] = Vec::Zero(p.net.biases[l].size());
    }
    vel.va = Vec::Zero(out_dim);

    // warm-started singular vectors for the projection's power iteration
    std::vector<Vec> lip_vs(p.net.num_layers());
    const int depth = p.net.num_layers();

    TrainResult result;
    const bool train_alpha =
        config.loss_mode == LossMode::Quantile || config.loss_mode == LossMode::MseSurface;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        if (epoch > 0) shuffle();
        double epoch_l1 = 0.0, epoch_l2 = 0.0, epoch_total = 0.0;
        int batches = 0;

        for (long start = 0; start < L; start += config.batch_size) {
            const int M = static_cast<int>(std::min<long>(config.batch_size, L - start));
            const Vec alpha = p.a.array().exp().matrix();
            const Vec inv_alpha = (-p.a.array()).exp().matrix();
            const double surface = inv_alpha.sum();

            auto accumulate = [&](GradBuffer& g, std::size_t bi) {
                if (g.gw.empty()) g.init(p.net, out_dim);
                const std::size_t row = order[start + bi];
                ForwardTrace tr;
                const Vec pred = traced_forward(p.net, dataset.initial_states.row(row).transpose(), tr);
                const Vec err = dataset.tails.row(row).transpose() - pred;
                const Vec comp = err.cwiseAbs();

                if (config.loss_mode == LossMode::Mse ||
                    config.loss_mode == LossMode::MseSurface) {
                    const double norm = 1.0 / (static_cast<double>(M) * out_dim);
                    Vec delta = (-2.0 * norm) * err;
                    g.l1 += norm * err.squaredNorm();
                    if (config.loss_mode == LossMode::MseSurface) {
                        const Vec scaled = comp.cwiseProduct(alpha);
                        const int jstar = first_argmax(scaled);
                        const double mx = scaled[jstar];
                        const double invM = 1.0 / static_cast<double>(M);
                        g.aux += invM * mx * surface;
                        // through the max term: d/dpred_jstar and d/da
                        delta[jstar] +=
                            invM * alpha[jstar] * (err[jstar] > 0 ? -1.0 : (err[jstar] < 0 ? 1.0 : 0.0)) * surface;
                        g.ga[jstar] += invM * mx * surface;  // d(alpha_j R^j)/da_j = alpha_j R^j
                        g.ga -= (invM * mx) * inv_alpha;     // d(sum 1/alpha)/da_j = -1/alpha_j
                    }
                    backprop(p.net, tr, std::move(delta), g);
                    return;
                }

                // quantile mode
                const Vec scaled = comp.cwiseProduct(alpha);
                const int jstar = first_argmax(scaled);
                const double R = scaled[jstar];
                g.l1 += delta_bar * std::max(0.0, R - p.q) +
                        (1.0 - delta_bar) * std::max(0.0, p.q - R);
                double s = 0.0;  // dL1/dR for this sample
                if (R > p.q) {
                    s = delta_bar;
                    g.gq -= config.c * delta_bar;
                } else if (R < p.q) {
                    s = -(1.0 - delta_bar);
                    g.gq += config.c * (1.0 - delta_bar);
                }
                if (s != 0.0) {
                    const double sign = err[jstar] > 0 ? -1.0 : (err[jstar] < 0 ? 1.0 : 0.0);
                    Vec delta = Vec::Zero(out_dim);
                    delta[jstar] = config.c * s * alpha[jstar] * sign;
                    g.ga[jstar] += config.c * s * R;  // alpha_jstar * comp_jstar = R
                    backprop(p.net, tr, std::move(delta), g);
                }
            };

            GradBuffer total = chunked_reduce<GradBuffer>(
                static_cast<std::size_t>(M), config.exec, accumulate,
                [](GradBuffer& t, const GradBuffer& c) {
                    if (t.gw.empty())
                        t = c;
                    else if (!c.gw.empty())
                        t.add(c);
                });
            if (total.gw.empty()) total.init(p.net, out_dim);

            double l1 = total.l1, l2 = 0.0, batch_loss;
            if (config.loss_mode == LossMode::Quantile) {
                l2 = p.q * surface;
                total.gq += surface;                 // dL2/dq
                total.ga -= p.q * inv_alpha;         // dL2/da_j = -q/alpha_j * dalpha... = -q e^{-a}
                batch_loss = config.c * l1 + l2;
            } else if (config.loss_mode == LossMode::MseSurface) {
                l2 = total.aux;
                batch_loss = l1 + l2;
            } else {
                batch_loss = l1;
            }
            if (!std::isfinite(batch_loss))
                throw NumericError("divergent loss at epoch " + std::to_string(epoch));

            for (int l = 0; l < p.net.num_layers(); ++l) {
                vel.vw[l] = config.momentum * vel.vw[l] + total.gw[l];
                vel.vb[l] = config.momentum * vel.vb[l] + total.gb[l];
                p.net.weights[l] -= config.learning_rate * vel.vw[l];
                p.net.biases[l] -= config.learning_rate * vel.vb[l];
            }
            if (train_alpha) {
                vel.va = config.momentum * vel.va + total.ga;
                p.a -= config.learning_rate * vel.va;
            }
            if (config.loss_mode == LossMode::Quantile) {
                vel.vq = config.momentum * vel.vq + total.gq;
                p.q -= config.learning_rate * vel.vq;
            }

            if (config.lipschitz_cap > 0.0) {
                double bound = 1.0;
                for (int l = 0; l < depth; ++l)
                    bound *= spectral_norm(p.net.weights[l], lip_vs[l]);
                if (bound > config.lipschitz_cap) {
                    const double scale =
                        std::pow(config.lipschitz_cap / bound, 1.0 / static_cast<double>(depth));
                    for (int l = 0; l < depth; ++l) p.net.weights[l] *= scale;
                }
            }

            epoch_l1 += l1;
            epoch_l2 += l2;
            epoch_total += batch_loss;
            ++batches;
        }
        result.loss_history.push_back(
            {epoch_l1 / batches, epoch_l2 / batches, epoch_total / batches});
    }

    result.net = std::move(p.net);
    if (config.loss_mode == LossMode::Mse) {
        result.alpha = normalize_alpha(result.net, dataset, config.exec);
        const Mat comp = dataset_component_residuals(result.net, dataset, config.exec);
        Vec scalars = scalar_residuals(comp, result.alpha);
        std::sort(scalars.begin(), scalars.end());
        const Eigen::Index idx = std::min<Eigen::Index>(
            scalars.size() - 1,
            static_cast<Eigen::Index>(std::ceil(delta_bar * scalars.size())) - 1);
        result.q = scalars[std::max<Eigen::Index>(idx, 0)];
    } else {
        result.alpha = p.a.array().exp().matrix();
        result.q = p.q;
    }
    result.lipschitz = lipschitz_bound(result.net);
    return result;
}

Vec normalize_alpha(const SurrogateNet& net, const TrajectoryDataset& dataset, Exec exec) {
    require(dataset.count() >= 1, "dataset is empty");
    const Mat comp = dataset_component_residuals(net, dataset, exec);
    Vec col_max = comp.colwise().maxCoeff().transpose();
    constexpr double eps_floor = 1e-12;
    return col_max.cwiseMax(eps_floor).cwiseInverse();
}

InterpMap build_interp_matrix(int nk_trained, int nk_full, int n) {
    require(n >= 1 && nk_trained >= 1 && nk_full >= nk_trained, "bad interp dimensions");
    require(nk_trained % n == 0 && nk_full % n == 0, "output widths must be multiples of n");
    const int k_trained = nk_trained / n;
    const int k_full = nk_full / n;
    if (k_full % k_trained != 0)
        throw std::invalid_argument("full horizon must be an integer multiple of the trained one");
    const int factor = k_full / k_trained;

    InterpMap map;
    map.output_weights = Mat::Zero(nk_full, nk_trained);
    map.init_state_weights = Mat::Zero(nk_full, n);
    for (int k = 1; k <= k_full; ++k) {
        const int m = k / factor;
        const int d = k % factor;
        for (int c = 0; c < n; ++c) {
            const int row = (k - 1) * n + c;
            if (d == 0) {
                map.output_weights(row, (m - 1) * n + c) = 1.0;
                continue;
            }
            const double wr = static_cast<double>(d) / factor;
            map.output_weights(row, m * n + c) = wr;
            if (m == 0)
                map.init_state_weights(row, c) = 1.0 - wr;
            else
                map.output_weights(row, (m - 1) * n + c) = 1.0 - wr;
        }
    }
    return map;
}

Mat dataset_component_residuals(const SurrogateNet& net, const TrajectoryDataset& dataset,
                                Exec exec) {
    require(net.output_dim() == dataset.n * dataset.K,
            "network output width does not match the dataset horizon");
    Mat residuals(dataset.count(), net.output_dim());
    par_for(static_cast<std::size_t>(dataset.count()), exec, [&](std::size_t i) {
        const Vec pred = forward(net, dataset.initial_states.row(i).transpose());
        residuals.row(i) = (dataset.tails.row(i).transpose() - pred).cwiseAbs().transpose();
    });
    return residuals;
}

Vec scalar_residuals(const Mat& component_residuals, const Vec& alpha) {
    require(alpha.size() == component_residuals.cols(), "alpha width mismatch");
    Vec out(component_residuals.rows());
    for (Eigen::Index i = 0; i < component_residuals.rows(); ++i)
        out[i] = (component_residuals.row(i).transpose().cwiseProduct(alpha)).maxCoeff();
    return out;
}

namespace {

json mat_to_json_rowmajor(const Mat& m) {
    json arr = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) arr.push_back(m(r, c));
    return arr;
}

Mat mat_from_json_rowmajor(const json& arr, Eigen::Index rows, Eigen::Index cols) {
    if (static_cast<Eigen::Index>(arr.size()) != rows * cols)
        throw IoError("matrix payload size mismatch");
    Mat m(rows, cols);
    Eigen::Index k = 0;
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = arr[k++].get<double>();
    return m;
}

json vec_to_json(const Vec& v) {
    json arr = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
    return arr;
}

Vec vec_from_json(const json& arr) {
    Vec v(arr.size());
    for (std::size_t i = 0; i < arr.size(); ++i) v[i] = arr[i].get<double>();
    return v;
}

} // namespace

void save_model_json(const ModelArtifact& model, const std::string& path) {
    validate_net(model.net);
    json j;
    j["layer_sizes"] = model.net.layer_sizes;
    json weights = json::array(), biases = json::array();
    for (int l = 0; l < model.net.num_layers(); ++l) {
        weights.push_back(mat_to_json_rowmajor(model.net.weights[l]));
        biases.push_back(vec_to_json(model.net.biases[l]));
    }
    j["weights"] = weights;
    j["biases"] = biases;
    j["alpha"] = vec_to_json(model.alpha);
    j["q"] = model.q;
    if (model.net.interp) {
        j["interp_matrix"] = mat_to_json_rowmajor(model.net.interp->output_weights);
        j["interp_init_state_matrix"] = mat_to_json_rowmajor(model.net.interp->init_state_weights);
        j["interp_rows"] = model.net.interp->output_weights.rows();
    }
    j["metadata"] = {{"n", model.n},
                     {"K", model.K},
                     {"loss_mode", loss_mode_name(model.loss_mode)},
                     {"seed", model.seed},
                     {"alpha_provenance", model.alpha_provenance}};
    write_text_file(path, j.dump(2) + "\n");
}

ModelArtifact load_model_json(const std::string& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw IoError("malformed model json " + path + ": " + e.what());
    }
    ModelArtifact model;
    model.net.layer_sizes = j.at("layer_sizes").get<std::vector<int>>();
    const auto& weights = j.at("weights");
    const auto& biases = j.at("biases");
    for (std::size_t l = 0; l + 1 < model.net.layer_sizes.size(); ++l) {
        model.net.weights.push_back(mat_from_json_rowmajor(
            weights.at(l), model.net.layer_sizes[l + 1], model.net.layer_sizes[l]));
        model.net.biases.push_back(vec_from_json(biases.at(l)));
    }
    if (j.contains("interp_matrix")) {
        InterpMap map;
        const Eigen::Index rows = j.at("interp_rows").get<Eigen::Index>();
        map.output_weights =
            mat_from_json_rowmajor(j.at("interp_matrix"), rows, model.net.layer_sizes.back());
        map.init_state_weights = mat_from_json_rowmajor(j.at("interp_init_state_matrix"), rows,
                                                        model.net.layer_sizes.front());
        model.net.interp = std::move(map);
    }
    model.alpha = vec_from_json(j.at("alpha"));
    model.q = j.at("q").get<double>();
    const auto& meta = j.at("metadata");
    model.n = meta.at("n").get<int>();
    model.K = meta.at("K").get<int>();
    model.loss_mode = loss_mode_from_name(meta.at("loss_mode").get<std::string>());
    model.seed = meta.at("seed").get<std::uint64_t>();
    if (meta.contains("alpha_provenance"))
        model.alpha_provenance = meta.at("alpha_provenance").get<std::string>();
    validate_net(model.net);
    return model;
}

} // namespace cpreach

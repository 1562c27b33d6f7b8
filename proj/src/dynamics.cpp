#include "cpreach/dynamics.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "cpreach/csv.hpp"

namespace cpreach {

namespace {

Vec periodic2d_update(const Vec& s) {
    const double x = s[0], y = s[1];
    Vec out(2);
    out[0] = 0.985 * y + std::sin(0.5 * x) - 0.6 * std::sin(x + y) - 0.07;
    out[1] = 0.985 * x + std::cos(0.5 * y) - 0.6 * std::cos(x + y) - 0.07;
    return out;
}

Vec trvdp_field(const Vec& s) {
    constexpr double mu = -1.0;
    Vec f(2);
    f[0] = s[1];
    f[1] = mu * s[1] * (1.0 - s[0] * s[0]) - s[0];
    return f;
}

// Proportional hover controller. Derivation near hover: alt rate ~ -x6 and
// d(x6)/dt ~ -u1/1.4, so u1 = 1.4*(2*x6 - x3) places the altitude loop at
// critical damping; the angular loops damp roll/pitch rates against the
// corresponding Euler angles. Yaw rate x12 is left uncontrolled.
void quad_hover_control(const Vec& s, double& u1, double& u2, double& u3) {
    u1 = 1.4 * (2.0 * s[5] - s[2]);
    u2 = (-4.0 * s[9] - 4.0 * s[6]) / 18.5185;
    u3 = (-4.0 * s[10] - 4.0 * s[7]) / 18.5185;
}

Vec quadcopter_field(const Vec& s) {
    const double x4 = s[3], x5 = s[4], x6 = s[5];
    const double x7 = s[6], x8 = s[7], x9 = s[8];
    const double x10 = s[9], x11 = s[10], x12 = s[11];
    const double s7 = std::sin(x7), c7 = std::cos(x7);
    const double s8 = std::sin(x8), c8 = std::cos(x8);
    const double s9 = std::sin(x9), c9 = std::cos(x9);
    const double t8 = s8 / c8;

    double u1 = 0.0, u2 = 0.0, u3 = 0.0;
    quad_hover_control(s, u1, u2, u3);

    Vec f(12);
    f[0] = c8 * c9 * x4 + (s7 * s8 * c9 - c7 * s9) * x5 + (c7 * s8 * c9 + s7 * s9) * x6;
    f[1] = c8 * s9 * x4 + (s7 * s8 * s9 + c7 * c9) * x5 + (c7 * s8 * s9 - s7 * c9) * x6;
    f[2] = s8 * x4 - s7 * c8 * x5 - c7 * c8 * x6;
    f[3] = x12 * x5 - x11 * x6 - 9.81 * s8;
    f[4] = x10 * x6 - x12 * x4 + 9.81 * c8 * s7;
    f[5] = x11 * x4 - x10 * x5 + 9.81 * c8 * c7 - 9.81 - u1 / 1.4;
    f[6] = x10 + s7 * t8 * x11 + c7 * t8 * x12;
    f[7] = c7 * x11 - s7 * x12;
    f[8] = (s7 / c8) * x11 + (c7 / c8) * x12;
    f[9] = -0.9259 * x11 * x12 + 18.5185 * u2;
    f[10] = 0.9259 * x10 * x12 + 18.5185 * u3;
    f[11] = 0.0;
    return f;
}

Vec vector_field(const SystemModel& model, const Vec& s) {
    if (model.name.rfind("trvdp", 0) == 0) return trvdp_field(s);
    return quadcopter_field(s);
}

Vec integrate_step(const SystemModel& model, const Vec& s) {
    const double h = model.dt;
    if (model.integrator == Integrator::Euler) return s + h * vector_field(model, s);
    const Vec k1 = vector_field(model, s);
    const Vec k2 = vector_field(model, s + 0.5 * h * k1);
    const Vec k3 = vector_field(model, s + 0.5 * h * k2);
    const Vec k4 = vector_field(model, s + h * k3);
    return s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

} // namespace

SystemModel make_model(const std::string& name) {
    SystemModel m;
    m.name = name;
    if (name == "periodic2d") {
        m.n = 2;
        m.kind = ModelKind::DifferenceEquation;
        m.noise_cov = Vec::Constant(2, 0.01 * 0.01);
    } else if (name == "trvdp") {
        m.n = 2;
        m.kind = ModelKind::Ode;
        m.dt = 0.02;
        m.integrator = Integrator::Euler;
        m.noise_cov = Vec::Constant(2, 0.1 * 0.1);
    } else if (name == "quadcopter12d") {
        m.n = 12;
        m.kind = ModelKind::Ode;
        m.dt = 0.05;
        m.integrator = Integrator::Rk4;
        m.controller = "hover-p";
        m.noise_cov = Vec(12);
        for (int i = 0; i < 6; ++i) m.noise_cov[i] = 0.05 * 0.05;
        for (int i = 6; i < 12; ++i) m.noise_cov[i] = 0.01 * 0.01;
    } else {
        throw std::invalid_argument("unknown model: " + name);
    }
    return m;
}

SystemModel apply_shift(const SystemModel& model, const ShiftSpec& shift) {
    SystemModel out = model;
    if (shift.replace_cov) {
        require(shift.replace_cov->size() == model.n, "replacement covariance dimension mismatch");
        require(shift.replace_cov->minCoeff() >= 0.0, "covariance entries must be >= 0");
        out.noise_cov = *shift.replace_cov;
        out.name = model.name + "[shift:custom]";
    } else {
        if (!(shift.noise_scale > 0.0))
            throw std::invalid_argument("noise_scale must be positive");
        out.noise_cov = model.noise_cov * shift.noise_scale;
        out.name = model.name + "[shift:x" + format_double(shift.noise_scale) + "]";
    }
    return out;
}

void validate_initial_set(const InitialSet& init, int n) {
    require(init.lower.size() == n && init.upper.size() == n, "initial set dimension mismatch");
    for (int i = 0; i < n; ++i)
        if (!(init.lower[i] <= init.upper[i]))
            throw std::invalid_argument("initial set lower > upper in dimension " + std::to_string(i));
    if (init.dist == InitialSet::Dist::TruncatedGaussian)
        require(init.tg_mean.size() == n && init.tg_std.size() == n,
                "truncated gaussian needs mean and std of dimension n");
}

Vec sample_initial_state(const InitialSet& init, RngStream& rng) {
    const int n = static_cast<int>(init.lower.size());
    Vec s(n);
    if (init.dist == InitialSet::Dist::Uniform) {
        for (int i = 0; i < n; ++i) s[i] = rng.uniform(init.lower[i], init.upper[i]);
        return s;
    }
    // truncated gaussian: componentwise rejection inside the box
    for (int i = 0; i < n; ++i) {
        if (init.lower[i] == init.upper[i]) {
            s[i] = init.lower[i];
            continue;
        }
        double v;
        int attempts = 0;
        do {
            v = init.tg_mean[i] + init.tg_std[i] * rng.gaussian();
            if (++attempts > 100000)
                throw NumericError("truncated gaussian: box has negligible mass in dimension " +
                                   std::to_string(i));
        } while (v < init.lower[i] || v > init.upper[i]);
        s[i] = v;
    }
    return s;
}

Trajectory TrajectoryDataset::trajectory(Eigen::Index i) const {
    Trajectory t(n * (K + 1));
    t.head(n) = initial_states.row(i).transpose();
    t.tail(n * K) = tails.row(i).transpose();
    return t;
}

Vec deterministic_step(const SystemModel& model, const Vec& s) {
    require(s.size() == model.n, "state dimension mismatch");
    if (model.kind == ModelKind::DifferenceEquation) {
        if (model.name.rfind("periodic2d", 0) == 0) return periodic2d_update(s);
        throw std::invalid_argument("no update rule for model " + model.name);
    }
    if (!(model.dt > 0.0)) throw std::invalid_argument("ode model requires dt > 0");
    return integrate_step(model, s);
}

Trajectory simulate(const SystemModel& model, const Vec& s0, int K, RngStream& rng,
                    std::vector<Vec>* noise_log) {
    require(s0.size() == model.n, "s0 dimension mismatch");
    require(K >= 1, "K must be >= 1");
    const int n = model.n;
    const Vec noise_std = model.noise_cov.cwiseSqrt();

    Trajectory traj(n * (K + 1));
    traj.head(n) = s0;
    Vec s = s0;
    for (int k = 1; k <= K; ++k) {
        s = deterministic_step(model, s);
        Vec w = rng.gaussian_vec(n).cwiseProduct(noise_std);
        s += w;
        if (noise_log) noise_log->push_back(w);
        if (!s.allFinite())
            throw NumericError("non-finite state at step " + std::to_string(k) + " of model " +
                               model.name);
        traj.segment(k * n, n) = s;
    }
    return traj;
}

TrajectoryDataset sample_dataset(const SystemModel& model, const InitialSet& init, int K, long L,
                                 std::uint64_t seed, Exec exec) {
    require(L >= 1, "L must be >= 1");
    require(K >= 1, "K must be >= 1");
    validate_initial_set(init, model.n);

    TrajectoryDataset ds;
    ds.n = model.n;
    ds.K = K;
    ds.seed = seed;
    ds.source_model = model.name;
    ds.initial_states.resize(L, model.n);
    ds.tails.resize(L, model.n * K);

    par_for(static_cast<std::size_t>(L), exec, [&](std::size_t i) {
        RngStream rng = RngStream::substream(seed, i);
        const Vec s0 = sample_initial_state(init, rng);
        const Trajectory t = simulate(model, s0, K, rng);
        ds.initial_states.row(i) = s0.transpose();
        ds.tails.row(i) = t.tail(model.n * K).transpose();
    });
    return ds;
}

void save_dataset_csv(const TrajectoryDataset& ds, const std::string& path) {
    std::ostringstream out;
    out << ds.n << ',' << ds.K << ',' << ds.count() << ',' << ds.seed << ',' << ds.source_model
        << '\n';
    const int width = ds.n * (ds.K + 1);
    for (Eigen::Index i = 0; i < ds.count(); ++i) {
        const Trajectory t = ds.trajectory(i);
        for (int j = 0; j < width; ++j) {
            if (j) out << ',';
            out << format_double(t[j]);
        }
        out << '\n';
    }
    write_text_file(path, out.str());
}

TrajectoryDataset load_dataset_csv(const std::string& path) {
    std::istringstream in(read_text_file(path));
    std::string line;
    if (!std::getline(in, line)) throw IoError("empty dataset file: " + path);
    auto header = split_csv_line(line);
    if (header.size() != 5) throw IoError("malformed dataset header in " + path);

    TrajectoryDataset ds;
    ds.n = std::stoi(header[0]);
    ds.K = std::stoi(header[1]);
    const long L = std::stol(header[2]);
    ds.seed = std::stoull(header[3]);
    ds.source_model = header[4];
    ds.initial_states.resize(L, ds.n);
    ds.tails.resize(L, ds.n * ds.K);

    const std::size_t width = static_cast<std::size_t>(ds.n) * (ds.K + 1);
    for (long i = 0; i < L; ++i) {
        if (!std::getline(in, line)) throw IoError("dataset row count mismatch in " + path);
        auto fields = split_csv_line(line);
        if (fields.size() != width) throw IoError("dataset row width mismatch in " + path);
        for (std::size_t j = 0; j < width; ++j) {
            const double v = std::stod(fields[j]);
            if (j < static_cast<std::size_t>(ds.n))
                ds.initial_states(i, j) = v;
            else
                ds.tails(i, j - ds.n) = v;
        }
    }
    return ds;
}

} // namespace cpreach

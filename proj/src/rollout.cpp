#include "gpssm/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "gpssm/errors.hpp"
#include "gpssm/recognition.hpp"
#include "gpssm/sparse_gp.hpp"
#include "gpssm/state_posterior.hpp"

namespace gpssm {

namespace {

// splitmix64-style mixer: decorrelated per-sample streams from (seed, index).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
}

double quantile(std::vector<double> values, double q) {
    std::sort(values.begin(), values.end());
    const double rank = q * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(rank);
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return (1.0 - frac) * values[lo] + frac * values[hi];
}

void append_csv_value(std::string& line, double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    line += ',';
    line += buf;
}

}  // namespace

RolloutResult free_simulate(const GpssmModel& model, const Vector& m0, const Matrix& L0,
                            const Matrix& actions, const RolloutOptions& options) {
    validate(model);
    const Eigen::Index D = model.state_dim();
    const Eigen::Index P = model.action_dim();
    const Eigen::Index O = model.obs_dim();
    const Eigen::Index T = actions.rows();
    if (m0.size() != D) throw InputError("free_simulate: m0 must have state_dim entries");
    if (L0.rows() != D || L0.cols() != D)
        throw InputError("free_simulate: L0 must be state_dim x state_dim");
    if (actions.cols() != P)
        throw InputError("free_simulate: actions must have action_dim columns");
    if (options.num_samples < 1) throw InputError("free_simulate: need at least one sample");

    GpPredictor pred = make_predictor(model.gp);
    const double sigma_f = std::sqrt(model.gp.sigma_f2);
    const double sigma_g = std::sqrt(model.emission.sigma_g2);
    const int S = options.num_samples;

    RolloutResult out;
    out.states.reserve(S);
    out.observations.reserve(S);
    for (int s = 0; s < S; ++s) {
        Rng rng(mix_seed(options.seed, static_cast<std::uint64_t>(s)));

        // One inducing-output draw per sample pins a single transition
        // function; steps then follow its conditional mean.
        Matrix frozen_alpha;
        if (options.freeze_u) {
            frozen_alpha.resize(model.gp.num_inducing(), D);
            for (Eigen::Index d = 0; d < D; ++d) {
                Vector u = model.gp.U_mu.col(d);
                if (!options.deterministic)
                    u += model.gp.U_chol[d] * rng.normal_vector(u.size());
                Vector resid = u - model.gp.Z.col(d);
                Vector tmp = pred.C.triangularView<Eigen::Lower>().solve(resid);
                frozen_alpha.col(d) =
                    pred.C.transpose().triangularView<Eigen::Upper>().solve(tmp);
            }
        }

        Matrix X(T + 1, D);
        Vector x0 = m0;
        if (!options.deterministic) x0 += L0 * rng.normal_vector(D);
        X.row(0) = x0.transpose();
        Matrix input(1, D + P);
        for (Eigen::Index t = 0; t < T; ++t) {
            input.leftCols(D) = X.row(t);
            if (P > 0) input.rightCols(P) = actions.row(t);
            Matrix mean, var;
            if (options.freeze_u) {
                Matrix k = cross(model.gp.kernel, input, model.gp.Z);  // 1 x M
                mean = X.row(t) + k * frozen_alpha;
                var = Matrix::Zero(1, D);  // function pinned by the u draw
            } else {
                predict(pred, input, mean, var);
            }
            for (Eigen::Index d = 0; d < D; ++d) {
                double x = mean(0, d);
                if (!options.deterministic)
                    x += std::sqrt(var(0, d) + sigma_f * sigma_f) * rng.normal();
                X(t + 1, d) = x;
            }
        }

        Matrix Y(T, O);
        for (Eigen::Index t = 0; t < T; ++t) {
            Y.row(t) =
                (model.emission.W * X.row(t + 1).transpose() + model.emission.b).transpose();
            if (options.obs_noise && !options.deterministic)
                Y.row(t) += (sigma_g * rng.normal_vector(O)).transpose();
        }
        out.states.push_back(std::move(X));
        out.observations.push_back(std::move(Y));
    }

    out.spread = Matrix::Zero(T, O);
    if (S > 1 && !options.deterministic) {
        for (Eigen::Index t = 0; t < T; ++t) {
            for (Eigen::Index c = 0; c < O; ++c) {
                double sum = 0.0;
                for (const Matrix& Y : out.observations) sum += Y(t, c);
                const double mean = sum / S;
                double sumsq = 0.0;
                for (const Matrix& Y : out.observations) {
                    const double r = Y(t, c) - mean;
                    sumsq += r * r;
                }
                out.spread(t, c) = std::sqrt(sumsq / S);
            }
        }
    }
    return out;
}

std::pair<Vector, Matrix> encode_initial(const GpssmModel& model, const Matrix& prefix_Y,
                                         const Matrix& prefix_A) {
    if (prefix_Y.rows() < 1) throw InputError("encode_initial: prefix must have at least one row");
    if (prefix_Y.cols() != model.obs_dim())
        throw InputError("encode_initial: prefix observations must have obs_dim columns");
    if (prefix_A.rows() != prefix_Y.rows() || prefix_A.cols() != model.action_dim())
        throw InputError("encode_initial: prefix actions must align with the observations");
    Matrix inputs(prefix_Y.rows(), prefix_Y.cols() + prefix_A.cols());
    inputs.leftCols(prefix_Y.cols()) = prefix_Y;
    if (prefix_A.cols() > 0) inputs.rightCols(prefix_A.cols()) = prefix_A;
    GaussMarkov q = encode(model.recognition, inputs);
    return {q.m0, q.L0};
}

TransitionGrid transition_grid(const GpssmModel& model, const Matrix& probes) {
    validate(model);
    if (probes.cols() != model.gp.input_dim())
        throw InputError("transition_grid: probes must have state_dim + action_dim columns");
    TransitionGrid grid;
    grid.probes = probes;
    GpPredictor pred = make_predictor(model.gp);
    predict(pred, probes, grid.mean, grid.var);
    grid.Z = model.gp.Z;
    grid.U_mu = model.gp.U_mu;
    return grid;
}

void write_transition_csv(const TransitionGrid& grid, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("write_transition_csv: cannot open " + path);
    const Eigen::Index in_dim = grid.probes.cols();
    const Eigen::Index D = grid.mean.cols();
    std::string header = "kind";
    for (Eigen::Index j = 0; j < in_dim; ++j) header += ",x" + std::to_string(j);
    for (Eigen::Index d = 0; d < D; ++d) {
        const std::string sd = std::to_string(d);
        header += ",mean" + sd + ",var" + sd + ",lo" + sd + ",hi" + sd;
    }
    out << header << '\n';
    auto write_row = [&](const char* kind, const auto& x, const auto& mean, const auto& var) {
        std::string line = kind;
        for (Eigen::Index j = 0; j < in_dim; ++j) append_csv_value(line, x(j));
        for (Eigen::Index d = 0; d < D; ++d) {
            const double band = 2.0 * std::sqrt(std::max(0.0, var(d)));
            append_csv_value(line, mean(d));
            append_csv_value(line, var(d));
            append_csv_value(line, mean(d) - band);
            append_csv_value(line, mean(d) + band);
        }
        out << line << '\n';
    };
    for (Eigen::Index i = 0; i < grid.probes.rows(); ++i)
        write_row("grid", grid.probes.row(i), grid.mean.row(i), grid.var.row(i));
    const Vector zero = Vector::Zero(D);
    for (Eigen::Index i = 0; i < grid.Z.rows(); ++i)
        write_row("inducing", grid.Z.row(i), grid.U_mu.row(i), zero);
    if (!out) throw IoError("write_transition_csv: write failed for " + path);
}

void write_rollout_csv(const RolloutResult& rollout, const std::string& path) {
    if (rollout.observations.empty())
        throw InputError("write_rollout_csv: rollout has no samples");
    std::ofstream out(path);
    if (!out) throw IoError("write_rollout_csv: cannot open " + path);
    const Eigen::Index T = rollout.observations.front().rows();
    const Eigen::Index O = rollout.observations.front().cols();
    std::string header = "t";
    for (Eigen::Index c = 0; c < O; ++c) {
        const std::string sc = std::to_string(c);
        header += ",mean" + sc + ",p05" + sc + ",p95" + sc;
    }
    out << header << '\n';
    for (Eigen::Index t = 0; t < T; ++t) {
        std::string line = std::to_string(t + 1);
        for (Eigen::Index c = 0; c < O; ++c) {
            std::vector<double> values;
            values.reserve(rollout.observations.size());
            double sum = 0.0;
            for (const Matrix& Y : rollout.observations) {
                values.push_back(Y(t, c));
                sum += Y(t, c);
            }
            append_csv_value(line, sum / static_cast<double>(values.size()));
            append_csv_value(line, quantile(values, 0.05));
            append_csv_value(line, quantile(values, 0.95));
        }
        out << line << '\n';
    }
    if (!out) throw IoError("write_rollout_csv: write failed for " + path);
}

double tip_error(const std::vector<Matrix>& predicted, const Matrix& truth, double pole_length,
                 Eigen::Index position_channel, Eigen::Index angle_channel) {
    if (predicted.empty()) throw InputError("tip_error: need at least one predicted trajectory");
    if (pole_length <= 0.0) throw InputError("tip_error: pole length must be positive");
    const Eigen::Index T = truth.rows();
    const Eigen::Index O = truth.cols();
    if (position_channel < 0 || position_channel >= O || angle_channel < 0 || angle_channel >= O)
        throw InputError("tip_error: channel out of range");
    auto tip = [&](double pos, double angle) {
        return std::pair<double, double>(pos + pole_length * std::sin(angle),
                                         -pole_length * std::cos(angle));
    };
    double total = 0.0;
    for (const Matrix& Y : predicted) {
        if (Y.rows() != T || Y.cols() != O)
            throw InputError("tip_error: predicted trajectory shape does not match the truth");
        for (Eigen::Index t = 0; t < T; ++t) {
            auto [px, py] = tip(Y(t, position_channel), Y(t, angle_channel));
            auto [tx, ty] = tip(truth(t, position_channel), truth(t, angle_channel));
            total += std::hypot(px - tx, py - ty);
        }
    }
    const double steps = static_cast<double>(T) * static_cast<double>(predicted.size());
    return total / steps / pole_length;
}

}  // namespace gpssm

#include "gpssm/data.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "gpssm/errors.hpp"

namespace gpssm {

using nlohmann::json;

void validate(const Dataset& ds) {
    for (std::size_t i = 0; i < ds.episodes.size(); ++i) {
        const Episode& ep = ds.episodes[i];
        const std::string where = "Dataset episode " + std::to_string(i);
        if (ep.Y.rows() < 1) throw InputError(where + ": empty episode");
        if (ep.Y.cols() != ds.obs_dim)
            throw InputError(where + ": observation width does not match the dataset");
        if (ep.A.cols() != ds.action_dim)
            throw InputError(where + ": action width does not match the dataset");
        if (ep.A.rows() != ep.Y.rows())
            throw InputError(where + ": Y and A must cover the same steps");
        if (!ep.Y.allFinite() || !ep.A.allFinite())
            throw InputError(where + ": entries must be finite");
    }
}

double kink_f(double x) { return x < 4.0 ? x + 1.0 : 13.0 - 2.0 * x; }

Dataset kink_generate(int n_episodes, int length, double sigma_f2, double sigma_g2,
                      std::uint64_t seed) {
    if (n_episodes < 1 || length < 1)
        throw InputError("kink_generate: need at least one episode and one step");
    if (sigma_f2 < 0.0 || sigma_g2 < 0.0)
        throw InputError("kink_generate: noise variances must be non-negative");
    Rng rng(seed);
    const double sf = std::sqrt(sigma_f2), sg = std::sqrt(sigma_g2);

    Dataset ds;
    ds.name = "kink";
    ds.obs_dim = 1;
    ds.action_dim = 0;
    for (int e = 0; e < n_episodes; ++e) {
        Episode ep;
        ep.Y.resize(length, 1);
        ep.A.resize(length, 0);
        double x = rng.normal();
        for (int t = 0; t < length; ++t) {
            x = kink_f(x) + sf * rng.normal();
            ep.Y(t, 0) = x + sg * rng.normal();
        }
        ds.episodes.push_back(std::move(ep));
    }
    return ds;
}

Vector cartpole_derivative(const Vector& state, double force, const CartPoleParams& cp) {
    const double theta = state(2), dp = state(1), dtheta = state(3);
    const double s = std::sin(theta), c = std::cos(theta);
    const double m = cp.pole_mass, M = cp.cart_mass, l = cp.pole_length, g = cp.gravity;
    const double ddp = (force + m * s * (l * dtheta * dtheta + g * c)) / (M + m * s * s);
    const double ddtheta = -(ddp * c + g * s) / l;
    Vector out(4);
    out << dp, ddp, dtheta, ddtheta;
    return out;
}

Vector cartpole_rk4_step(const Vector& state, double force, double dt, const CartPoleParams& cp) {
    Vector x = state;
    const double h = dt / cp.substeps;
    for (int i = 0; i < cp.substeps; ++i) {
        Vector k1 = cartpole_derivative(x, force, cp);
        Vector k2 = cartpole_derivative(x + 0.5 * h * k1, force, cp);
        Vector k3 = cartpole_derivative(x + 0.5 * h * k2, force, cp);
        Vector k4 = cartpole_derivative(x + h * k3, force, cp);
        x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    return x;
}

double cartpole_energy(const Vector& state, const CartPoleParams& cp) {
    const double dp = state(1), theta = state(2), dtheta = state(3);
    const double m = cp.pole_mass, M = cp.cart_mass, l = cp.pole_length;
    const double kinetic = 0.5 * (M + m) * dp * dp + m * l * dp * dtheta * std::cos(theta) +
                           0.5 * m * l * l * dtheta * dtheta;
    return kinetic - m * cp.gravity * l * std::cos(theta);
}

ActionFn sinusoid_policy(double amplitude, double period, double phase) {
    if (!(period > 0.0)) throw InputError("sinusoid_policy: period must be positive");
    return [=](int t, const Vector&) {
        return amplitude * std::sin(2.0 * M_PI * t / period + phase);
    };
}

ActionFn smooth_random_policy(std::uint64_t seed, double amplitude, double correlation) {
    if (correlation < 0.0 || correlation >= 1.0)
        throw InputError("smooth_random_policy: correlation must be in [0, 1)");
    auto rng = std::make_shared<Rng>(seed);
    auto level = std::make_shared<double>(0.0);
    return [=](int, const Vector&) {
        // Stationary AR(1) with unit marginal variance, scaled to the amplitude.
        *level = correlation * *level +
                 std::sqrt(1.0 - correlation * correlation) * rng->normal();
        return amplitude * *level;
    };
}

Dataset cartpole_simulate(int n_episodes, int length, double dt, const ActionFn& action_fn,
                          std::uint64_t seed, const CartPoleOptions& opts) {
    if (n_episodes < 1 || length < 1)
        throw InputError("cartpole_simulate: need at least one episode and one step");
    if (!(dt > 0.0)) throw InputError("cartpole_simulate: dt must be positive");
    if (opts.action_lag < 0) throw InputError("cartpole_simulate: action lag must be >= 0");
    Rng rng(seed);
    const CartPoleParams& cp = opts.params;
    const Eigen::Index obs_dim = opts.full_observation ? 4 : 2;

    Dataset ds;
    ds.name = "cartpole";
    ds.obs_dim = obs_dim;
    ds.action_dim = 1;
    ds.dt = dt;
    for (int e = 0; e < n_episodes; ++e) {
        Vector x(4);
        x << 0.0, 0.0, opts.init_angle_std * rng.normal(), 0.0;
        std::vector<double> commands;
        Matrix Y(length, obs_dim), A(length, 1);
        int recorded = 0;
        for (int t = 0; t < length; ++t) {
            double cmd = std::clamp(action_fn(t, x), -cp.action_limit, cp.action_limit);
            commands.push_back(cmd);
            const int src = t - opts.action_lag;
            const double applied = src >= 0 ? commands[src] : 0.0;
            x = cartpole_rk4_step(x, applied, dt, cp);
            if (!x.allFinite() || std::abs(x(0)) > cp.position_bound) {
                std::cerr << "cartpole_simulate: episode " << e << " diverged at step " << t
                          << ", truncating\n";
                break;
            }
            A(recorded, 0) = applied;
            if (opts.full_observation) {
                Y.row(recorded) = x.transpose();
            } else {
                Y(recorded, 0) = x(0);
                Y(recorded, 1) = x(2);
            }
            for (Eigen::Index j = 0; j < obs_dim; ++j)
                Y(recorded, j) += opts.obs_noise_std * rng.normal();
            ++recorded;
        }
        if (recorded == 0) {
            std::cerr << "cartpole_simulate: episode " << e << " diverged immediately, dropped\n";
            continue;
        }
        ds.episodes.push_back({Y.topRows(recorded), A.topRows(recorded)});
    }
    return ds;
}

// ---- Dataset file format ----

void save_dataset(const Dataset& ds, const std::string& path) {
    validate(ds);
    std::ofstream out(path);
    if (!out) throw IoError("save_dataset: cannot open " + path);

    json header = {{"name", ds.name},
                   {"obs_dim", ds.obs_dim},
                   {"action_dim", ds.action_dim},
                   {"dt", ds.dt},
                   {"episodes", ds.episodes.size()}};
    out << header.dump() << '\n';
    for (std::size_t e = 0; e < ds.episodes.size(); ++e) {
        const Episode& ep = ds.episodes[e];
        for (Eigen::Index t = 0; t < ep.horizon(); ++t) {
            json rec = {{"episode", e}, {"t", t}, {"y", json::array()}, {"a", json::array()}};
            for (Eigen::Index j = 0; j < ep.Y.cols(); ++j) rec["y"].push_back(ep.Y(t, j));
            for (Eigen::Index j = 0; j < ep.A.cols(); ++j) rec["a"].push_back(ep.A(t, j));
            out << rec.dump() << '\n';
        }
    }
    if (!out) throw IoError("save_dataset: write failed for " + path);
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_dataset: cannot open " + path);

    std::string line;
    std::size_t lineno = 0;
    auto parse = [&](const std::string& text) {
        json j = json::parse(text, nullptr, false);
        if (j.is_discarded())
            throw IoError("load_dataset: " + path + ":" + std::to_string(lineno) +
                          ": malformed JSON");
        return j;
    };

    if (!std::getline(in, line)) throw IoError("load_dataset: " + path + " is empty");
    ++lineno;
    json header = parse(line);
    Dataset ds;
    std::size_t expected = 0;
    try {
        ds.name = header.at("name").get<std::string>();
        ds.obs_dim = header.at("obs_dim").get<Eigen::Index>();
        ds.action_dim = header.at("action_dim").get<Eigen::Index>();
        ds.dt = header.at("dt").get<double>();
        expected = header.at("episodes").get<std::size_t>();
    } catch (const json::exception& e) {
        throw IoError("load_dataset: " + path + ":1: bad header: " + e.what());
    }

    std::vector<std::vector<std::pair<Vector, Vector>>> rows(expected);
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json rec = parse(line);
        const std::string where = "load_dataset: " + path + ":" + std::to_string(lineno);
        try {
            const std::size_t e = rec.at("episode").get<std::size_t>();
            const std::size_t t = rec.at("t").get<std::size_t>();
            if (e >= expected) throw IoError(where + ": episode index out of range");
            if (t != rows[e].size()) throw IoError(where + ": non-contiguous step index");
            const auto& y = rec.at("y");
            const auto& a = rec.at("a");
            if (static_cast<Eigen::Index>(y.size()) != ds.obs_dim ||
                static_cast<Eigen::Index>(a.size()) != ds.action_dim)
                throw IoError(where + ": row width does not match the header");
            Vector yv(ds.obs_dim), av(ds.action_dim);
            for (Eigen::Index j = 0; j < ds.obs_dim; ++j) yv(j) = y.at(j).get<double>();
            for (Eigen::Index j = 0; j < ds.action_dim; ++j) av(j) = a.at(j).get<double>();
            rows[e].emplace_back(std::move(yv), std::move(av));
        } catch (const json::exception& e) {
            throw IoError(where + ": bad record: " + e.what());
        }
    }

    for (std::size_t e = 0; e < expected; ++e) {
        if (rows[e].empty())
            throw IoError("load_dataset: " + path + ": episode " + std::to_string(e) +
                          " has no steps");
        Episode ep;
        ep.Y.resize(rows[e].size(), ds.obs_dim);
        ep.A.resize(rows[e].size(), ds.action_dim);
        for (std::size_t t = 0; t < rows[e].size(); ++t) {
            ep.Y.row(t) = rows[e][t].first.transpose();
            ep.A.row(t) = rows[e][t].second.transpose();
        }
        ds.episodes.push_back(std::move(ep));
    }
    validate(ds);
    return ds;
}

// ---- Checkpoint format ----

namespace {

constexpr char kMagic[8] = {'G', 'P', 'S', 'S', 'M', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& in, T& v, const std::string& path) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw IoError("load_checkpoint: " + path + " is truncated");
}

}  // namespace

const Matrix& Checkpoint::tensor(const std::string& name) const {
    for (const auto& [n, m] : tensors)
        if (n == name) return m;
    throw InputError("Checkpoint: no tensor named " + name);
}

bool Checkpoint::has_tensor(const std::string& name) const {
    for (const auto& [n, m] : tensors)
        if (n == name) return true;
    return false;
}

void save_checkpoint(const Checkpoint& cp, const std::string& path) {
    json manifest;
    manifest["config"] = cp.config_echo;
    manifest["rng"] = cp.rng_state;
    manifest["tensors"] = json::array();
    for (const auto& [name, m] : cp.tensors)
        manifest["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    const std::string text = manifest.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_checkpoint: cannot open " + path);
    out.write(kMagic, sizeof(kMagic));
    write_pod(out, kVersion);
    write_pod(out, static_cast<std::uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, m] : cp.tensors) {
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
        out.write(reinterpret_cast<const char*>(rm.data()),
                  static_cast<std::streamsize>(sizeof(double) * rm.size()));
    }
    if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_checkpoint: cannot open " + path);

    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw IoError("load_checkpoint: " + path + " is not a checkpoint file");
    std::uint32_t version = 0;
    read_pod(in, version, path);
    if (version != kVersion)
        throw IoError("load_checkpoint: " + path + " has unsupported format version " +
                      std::to_string(version));
    std::uint64_t manifest_len = 0;
    read_pod(in, manifest_len, path);
    std::string text(manifest_len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(manifest_len));
    if (!in) throw IoError("load_checkpoint: " + path + " is truncated");

    json manifest = json::parse(text, nullptr, false);
    if (manifest.is_discarded())
        throw IoError("load_checkpoint: " + path + " has a malformed manifest");

    Checkpoint cp;
    try {
        cp.config_echo = manifest.at("config").get<std::string>();
        cp.rng_state = manifest.at("rng").get<std::string>();
        for (const auto& entry : manifest.at("tensors")) {
            const std::string name = entry.at("name").get<std::string>();
            const Eigen::Index rows = entry.at("rows").get<Eigen::Index>();
            const Eigen::Index cols = entry.at("cols").get<Eigen::Index>();
            if (rows < 0 || cols < 0)
                throw IoError("load_checkpoint: " + path + ": bad shape for " + name);
            Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
            in.read(reinterpret_cast<char*>(rm.data()),
                    static_cast<std::streamsize>(sizeof(double) * rm.size()));
            if (!in) throw IoError("load_checkpoint: " + path + " is truncated");
            cp.tensors.emplace_back(name, Matrix(rm));
        }
    } catch (const json::exception& e) {
        throw IoError("load_checkpoint: " + path + ": bad manifest: " + e.what());
    }
    if (in.peek() != std::ifstream::traits_type::eof())
        throw IoError("load_checkpoint: " + path + " has trailing bytes");
    return cp;
}

}  // namespace gpssm

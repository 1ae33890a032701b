#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gpssm/rng.hpp"

namespace gpssm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// One observation/action sequence. Row t of Y is the observation after t+1
/// transitions (y_1..y_T for latent states x_0..x_T); row t of A is the
/// action applied at time t (a_0..a_{T-1}). A has zero columns for
/// action-free systems.
struct Episode {
    Matrix Y;
    Matrix A;
    Eigen::Index horizon() const { return Y.rows(); }
};

struct Dataset {
    std::vector<Episode> episodes;
    std::string name;
    Eigen::Index obs_dim = 0;
    Eigen::Index action_dim = 0;
    double dt = 0.0;  // 0 for discrete-time maps
};

/// Throws InputError unless every episode matches the declared dimensions,
/// has equal Y/A horizons and finite entries.
void validate(const Dataset& ds);

/// Piecewise-linear benchmark transition: x + 1 below 4, 13 - 2x from 4 up
/// (both branches meet at f(4) = 5).
double kink_f(double x);

/// Episodes of the scalar kink system: x_0 ~ N(0,1),
/// x_{t+1} ~ N(f(x_t), sigma_f2), y_t ~ N(x_t, sigma_g2).
Dataset kink_generate(int n_episodes, int length, double sigma_f2, double sigma_g2,
                      std::uint64_t seed);

/// Frictionless cart with a pendulum hanging from it; angle 0 is the stable
/// downward equilibrium. The pole's mass sits at its tip.
struct CartPoleParams {
    double cart_mass = 0.5;
    double pole_mass = 0.5;
    double pole_length = 0.5;
    double gravity = 9.82;
    double action_limit = 10.0;    // applied force clamped to +-limit
    double position_bound = 10.0;  // |position| beyond this truncates the episode
    int substeps = 8;              // internal integrator steps per recorded step
};

/// State layout: (position, velocity, angle, angular velocity).
Vector cartpole_derivative(const Vector& state, double force, const CartPoleParams& cp);
Vector cartpole_rk4_step(const Vector& state, double force, double dt, const CartPoleParams& cp);
double cartpole_energy(const Vector& state, const CartPoleParams& cp);

using ActionFn = std::function<double(int t, const Vector& state)>;

ActionFn sinusoid_policy(double amplitude, double period, double phase = 0.0);
/// First-order-filtered white noise, smooth enough to excite the dynamics
/// without chattering.
ActionFn smooth_random_policy(std::uint64_t seed, double amplitude, double correlation = 0.8);

struct CartPoleOptions {
    CartPoleParams params;
    bool full_observation = true;  // false: observe (position, angle) only
    int action_lag = 0;            // applied action at t is the one commanded at t-lag
    double obs_noise_std = 0.0;
    double init_angle_std = 0.1;   // initial state drawn N(0, diag(...)) around rest
};

/// Integrates the cart-pole under the policy. Episodes whose cart leaves the
/// position bound are truncated at that point with a warning on stderr (and
/// dropped entirely if nothing remains).
Dataset cartpole_simulate(int n_episodes, int length, double dt, const ActionFn& action_fn,
                          std::uint64_t seed, const CartPoleOptions& opts = {});

/// Text format: one JSON object per line. The first line is a header with
/// the dataset metadata; each following line is one time step
/// {"episode": e, "t": row, "y": [...], "a": [...]}. Doubles are written
/// with shortest round-trip precision, so save/load is exact.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

/// Named-tensor container persisted as a small binary file: magic, format
/// version, JSON manifest (names, shapes, config echo, RNG state), then the
/// tensor blobs as row-major 64-bit floats in manifest order.
struct Checkpoint {
    std::vector<std::pair<std::string, Matrix>> tensors;
    std::string config_echo;
    std::string rng_state;

    const Matrix& tensor(const std::string& name) const;
    bool has_tensor(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& cp, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace gpssm

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "gpssm/model.hpp"

namespace gpssm {

struct RolloutOptions {
    int num_samples = 30;
    bool deterministic = false;  // suppress every noise source: mean rollout
    bool freeze_u = false;       // one inducing-output draw per sample, then
                                 // conditional means (no per-step function noise)
    bool obs_noise = false;      // add N(0, sigma_g2 I) to emitted observations
    std::uint64_t seed = 0;
};

/// Sampled futures of the learned system. states[s] covers t = 0..T;
/// observations[s] maps x_1..x_T through the emission mean, matching the
/// dataset convention that Y rows pair with t = 1..T. spread is the empirical
/// across-sample standard deviation per step and observation channel.
struct RolloutResult {
    std::vector<Matrix> states;        // S entries, (T+1) x D
    std::vector<Matrix> observations;  // S entries, T x O
    Matrix spread;                     // T x O
};

/// Rolls the model forward under the given action sequence from
/// x_0 ~ N(m0, L0 L0^T). Each step draws x_t^(d) from the GP posterior
/// marginal at the previous state-action pair, widened by the process noise:
/// N(mean_d, var_d + sigma_f2). Samples use independent per-sample RNG
/// streams derived from the seed, so sample s does not depend on num_samples.
RolloutResult free_simulate(const GpssmModel& model, const Vector& m0, const Matrix& L0,
                            const Matrix& actions, const RolloutOptions& options);

/// Initial-state source for evaluating a held-out episode: runs the
/// recognition network over the prefix observations (and aligned actions)
/// and returns the posterior's initial-state pair (m0, L0).
std::pair<Vector, Matrix> encode_initial(const GpssmModel& model, const Matrix& prefix_Y,
                                         const Matrix& prefix_A);

/// Posterior transition function tabulated on probe inputs, plus the
/// inducing locations, for external plotting.
struct TransitionGrid {
    Matrix probes;  // N x (state_dim + action_dim)
    Matrix mean;    // N x state_dim
    Matrix var;     // N x state_dim, noise-free marginal variance
    Matrix Z;       // M x (state_dim + action_dim)
    Matrix U_mu;    // M x state_dim
};

TransitionGrid transition_grid(const GpssmModel& model, const Matrix& probes);

/// CSV with one row per probe (kind=grid) and one per inducing input
/// (kind=inducing): kind, the input coordinates, then per coordinate d the
/// posterior mean, variance and mean -/+ 2 sqrt(var). Inducing rows carry
/// the inducing-output mean with zero variance.
void write_transition_csv(const TransitionGrid& grid, const std::string& path);

/// Per-step across-sample summary of a rollout in observation space: one row
/// per step t = 1..T with mean, 5th and 95th percentile per channel.
void write_rollout_csv(const RolloutResult& rollout, const std::string& path);

/// Mean over samples and steps of the Euclidean distance between predicted
/// and true pendulum-tip positions, in units of the pole length. The tip of
/// a pole of length `pole_length` at cart position p and angle theta
/// (measured from the hanging rest pose) sits at
/// (p + l sin(theta), -l cos(theta)).
double tip_error(const std::vector<Matrix>& predicted, const Matrix& truth, double pole_length,
                 Eigen::Index position_channel, Eigen::Index angle_channel);

}  // namespace gpssm

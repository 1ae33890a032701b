#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gpssm/data.hpp"
#include "gpssm/elbo.hpp"

namespace gpssm {

/// Ordered name -> tensor collection. Construction fixes the order; every
/// trainable parameter appears exactly once (constrained quantities are kept
/// in unconstrained form, e.g. "*_raw" softplus pre-images).
using ParamSet = std::vector<std::pair<std::string, Matrix>>;

const Matrix& get_param(const ParamSet& params, const std::string& name);

double global_norm(const ParamSet& grads);

/// Rescales in place so the global norm is at most max_norm.
void clip_global_norm(ParamSet& grads, double max_norm);

/// Builds a differentiable scalar from parameters bound through the lookup.
using LossGraph = std::function<ad::Var(ad::Tape&, const RawParamFn&)>;

struct GradientResult {
    double value = 0.0;
    ParamSet grads;
};

/// Exact reverse-mode derivatives of the computation the graph executes.
/// Throws NumericalError naming the first parameter whose gradient (or the
/// objective itself) comes out non-finite.
GradientResult gradient(const LossGraph& loss, const ParamSet& params);

struct AdamState {
    double alpha = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    long step = 0;
    ParamSet m;  // first moments, shapes mirror the parameters
    ParamSet v;  // second moments
};

AdamState init_adam(const ParamSet& params, double alpha = 1e-3, double beta1 = 0.9,
                    double beta2 = 0.999, double epsilon = 1e-8);

/// One bias-corrected descent step in place: params -= alpha * mhat /
/// (sqrt(vhat) + epsilon). Ascent on the bound is realised by passing the
/// gradients of its negation.
void adam_step(AdamState& state, ParamSet& params, const ParamSet& grads);

struct TrainConfig {
    int steps = 2000;
    int batch_size = 16;  // capped at the dataset size
    int num_samples = 1;  // trajectory draws per episode per step
    double alpha = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double clip_norm = 0.0;  // 0 disables clipping; 100 is the safety-valve value
    std::uint64_t seed = 0;
    int checkpoint_every = 0;  // 0: only the final checkpoint
    std::string run_dir;       // empty: keep everything in memory, write no files
    std::string config_echo = "{}";  // JSON stored verbatim in checkpoints
};

struct StepRecord {
    long step = 0;
    ElboBreakdown elbo;
    double grad_norm = 0.0;
    double wall_seconds = 0.0;
};

struct TrainResult {
    GpssmModel model;
    AdamState adam;
    Rng rng;  // state after the last completed step, for chained continuation
    std::vector<StepRecord> history;
    std::string metrics_path;     // empty when run_dir is empty
    std::string checkpoint_path;  // last checkpoint written (final or last good)
    bool aborted = false;
    std::string abort_reason;
};

/// Maximises the bound with Adam on mini-batches of episodes. Each step
/// samples a batch, draws fresh trajectory noise, differentiates the bound
/// and updates every parameter; one metrics record per step. A non-finite
/// objective or gradient aborts, keeping the last finite parameters (and the
/// last checkpoint already on disk).
TrainResult train(const GpssmModel& init, const Dataset& dataset, const TrainConfig& config);

/// The engine behind train/resume_training. The unconstrained ParamSet is
/// the canonical optimisation state; `structure` only supplies shapes, the
/// kernel wiring, the emission mode and any fixed (non-trained) values.
/// config.steps more steps are run from the given state.
TrainResult train_continue(const GpssmModel& structure, ParamSet params, AdamState adam, Rng rng,
                           const Dataset& dataset, const TrainConfig& config);

/// Picks up training exactly where a checkpoint written by train left off.
/// The stored unconstrained tensors, Adam moments and RNG state are used
/// verbatim, so an interrupted run continues bit-for-bit like an
/// uninterrupted one.
TrainResult resume_training(const GpssmModel& structure, const Checkpoint& cp,
                            const Dataset& dataset, const TrainConfig& config);

/// Checkpoint carrying the model parameters plus everything needed for a
/// bitwise resume: Adam moments under "adam.m.<param>" / "adam.v.<param>",
/// the step counter and hyperparameters under "adam.state", and the
/// serialised RNG.
Checkpoint training_checkpoint(const ParamSet& params, const AdamState& adam, const Rng& rng,
                               const std::string& config_echo);

/// Stored unconstrained tensors in the canonical order of
/// model_raw_params(structure), bit-for-bit as saved.
ParamSet checkpoint_params(const GpssmModel& structure, const Checkpoint& cp);

/// Optimiser moments, step counter and hyperparameters from a checkpoint.
AdamState checkpoint_adam(const ParamSet& params, const Checkpoint& cp);

/// Materialises model values from a checkpoint; ignores optimiser state.
GpssmModel model_from_checkpoint(const GpssmModel& structure, const Checkpoint& cp);

}  // namespace gpssm

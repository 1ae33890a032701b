#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gpssm/data.hpp"
#include "gpssm/recognition.hpp"
#include "gpssm/sparse_gp.hpp"

namespace gpssm {

/// Linear-Gaussian measurement map: y ~ N(W x + b, sigma_g2 I). When
/// `learned` is false the emission stays fixed and contributes no trainable
/// parameters (useful when observations are known state coordinates).
struct EmissionModel {
    Matrix W;  // obs_dim x state_dim
    Vector b;  // obs_dim
    double sigma_g2 = 0.1;
    bool learned = true;
};

/// Everything the trainer owns: GP transition, emission, and the recognition
/// network that amortises the state posterior.
struct GpssmModel {
    SparseGp gp;
    EmissionModel emission;
    RecognitionNet recognition;

    Eigen::Index state_dim() const { return gp.state_dim(); }
    Eigen::Index action_dim() const { return gp.input_dim() - gp.state_dim(); }
    Eigen::Index obs_dim() const { return emission.W.rows(); }
};

void validate(const GpssmModel& model);

/// W selects the first obs_dim state coordinates (identity when obs_dim ==
/// state_dim), b = 0.
EmissionModel coordinate_emission(Eigen::Index obs_dim, Eigen::Index state_dim, double sigma_g2,
                                  bool learned);

/// Inducing inputs drawn uniformly over the box spanned by least-squares
/// state estimates of the observations (through the emission pseudo-inverse)
/// and by the episode actions, padded by 10% per side.
Matrix init_inducing(const std::vector<Episode>& episodes, const EmissionModel& emission,
                     Eigen::Index num_inducing, Eigen::Index action_dim, Rng& rng);

struct ModelInit {
    Kernel kernel;              // structure over state_dim + action_dim inputs
    Eigen::Index state_dim = 1;
    Eigen::Index num_inducing = 20;
    Eigen::Index hidden_dim = 20;
    double sigma_f2 = 0.01;
    double sigma_g2 = 0.1;
    bool learn_emission = true;
    bool learn_gp_noise = true;
};

GpssmModel init_model(const ModelInit& init, const std::vector<Episode>& episodes,
                      Eigen::Index obs_dim, Eigen::Index action_dim, Rng& rng);

struct EmissionVars {
    ad::Var W;
    ad::Var b;
    ad::Var sigma_g2;  // 1 x 1, positive
};

struct ModelVars {
    SparseGpVars gp;
    EmissionVars emission;
    RecognitionVars recognition;
};

/// Unconstrained tensors of every trainable parameter, in a fixed order:
/// "gp.*" (kernel under "gp.kernel."), "emission.W"/"emission.b"/
/// "emission.sigma_g2_raw" (only when learned), "recognition.*".
std::vector<std::pair<std::string, Matrix>> model_raw_params(const GpssmModel& model);

/// Binds through `lookup` for trainable tensors; a fixed emission is bound
/// as constants so no gradient flows into it.
ModelVars bind_model(ad::Tape& tape, const GpssmModel& model, const RawParamFn& lookup);

GpssmModel model_from_raw(const GpssmModel& structure,
                          const std::function<Matrix(const std::string&)>& raw);

}  // namespace gpssm

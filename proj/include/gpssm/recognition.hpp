#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "gpssm/ad.hpp"
#include "gpssm/rng.hpp"
#include "gpssm/state_posterior.hpp"

namespace gpssm {

/// Gated recurrent cell:
///   z = sigmoid(Wz in + Uz h + bz)
///   r = sigmoid(Wr in + Ur h + br)
///   hcand = tanh(Wh in + Uh (r * h) + bh)
///   h' = (1 - z) * h + z * hcand
struct GruCell {
    Matrix Wz, Uz, Wr, Ur, Wh, Uh;  // W*: hidden x input, U*: hidden x hidden
    Vector bz, br, bh;
};

/// Two recurrences over the observation/action sequence plus affine heads
/// that emit the Gauss-Markov posterior parameters. Row t of the input holds
/// the observation made after transition t (with that transition's action
/// appended), so the backward pass ends on the earliest observation and its
/// final state parameterises the initial-state head.
struct RecognitionNet {
    GruCell fwd, bwd;
    Matrix WA;     // D*D x 2H
    Vector bA;
    Matrix WL;     // D(D+1)/2 x 2H
    Vector bL;
    Matrix Winit;  // (D + D(D+1)/2) x H
    Vector binit;
    Eigen::Index input_dim = 0, hidden_dim = 0, state_dim = 0;
};

/// Fresh network: orthogonal recurrent weights, small-uniform input and head
/// weights, zero biases except those placing the heads near A = I, L = 0.1 I.
RecognitionNet init_recognition(Eigen::Index input_dim, Eigen::Index hidden_dim,
                                Eigen::Index state_dim, Rng& rng);

void validate(const RecognitionNet& net);

Vector gru_step(const GruCell& cell, const Vector& h, const Vector& input);

/// Runs both passes over a T x input_dim sequence and assembles the posterior
/// (horizon T: factors for transitions 1..T plus the initial-state pair).
GaussMarkov encode(const RecognitionNet& net, const Matrix& inputs);

// ---- Differentiable route ----

struct GruCellVars {
    ad::Var Wz, Uz, Wr, Ur, Wh, Uh, bz, br, bh;
};

struct RecognitionVars {
    GruCellVars fwd, bwd;
    ad::Var WA, bA, WL, bL, Winit, binit;
    Eigen::Index state_dim = 0;
};

std::vector<std::pair<std::string, Matrix>> recognition_raw_params(const RecognitionNet& net,
                                                                   const std::string& prefix);

using RawParamFn = std::function<ad::Var(const std::string&)>;

RecognitionVars bind_recognition(ad::Tape& tape, const RecognitionNet& net,
                                 const std::string& prefix, const RawParamFn& lookup);

RecognitionNet recognition_from_raw(const RecognitionNet& structure, const std::string& prefix,
                                    const std::function<Matrix(const std::string&)>& raw);

ad::Var gru_step_var(const GruCellVars& cell, const ad::Var& h, const ad::Var& input);

GaussMarkovVars encode_var(ad::Tape& tape, const RecognitionVars& net, const Matrix& inputs);

}  // namespace gpssm

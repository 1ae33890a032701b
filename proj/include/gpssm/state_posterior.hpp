#pragma once

#include <Eigen/Dense>
#include <vector>

#include "gpssm/ad.hpp"

namespace gpssm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Gauss-Markov posterior over a state trajectory x_0..x_T:
///   x_0 = m0 + L0 e_0,   x_t = A_t x_{t-1} + L_t e_t,   e_t ~ N(0, I).
/// A and L have one entry per transition (T total); L factors are lower
/// triangular with positive diagonal.
struct GaussMarkov {
    Vector m0;
    Matrix L0;
    std::vector<Matrix> A;
    std::vector<Matrix> L;

    Eigen::Index horizon() const { return static_cast<Eigen::Index>(A.size()); }
    Eigen::Index dim() const { return m0.size(); }
};

/// Checks shapes, lower-triangularity, and positive diagonals; throws InputError.
void validate(const GaussMarkov& q);

/// Deterministic pass of standard-normal draws through the recursion.
/// eps is (T+1) x D, row t driving x_t; the result is (T+1) x D.
Matrix sample_trajectory(const GaussMarkov& q, const Matrix& eps);

struct Marginal {
    Vector mean;
    Matrix cov;
};

/// Per-step marginals: mean_t = A_t mean_{t-1}, S_t = A_t S_{t-1} A_t^T + L_t L_t^T.
std::vector<Marginal> marginals(const GaussMarkov& q);

/// Differential entropy of the joint Gaussian over x_0..x_T.
double entropy(const GaussMarkov& q);

/// Dense covariance of the stacked trajectory vector (x_0; ...; x_T),
/// assembled block-wise from the recursion. Oracle-grade; O((TD)^2) memory.
Matrix joint_covariance(const GaussMarkov& q);

// ---- Differentiable route ----

struct GaussMarkovVars {
    ad::Var m0;               // D x 1
    ad::Var L0;               // D x D, already lower with positive diagonal
    std::vector<ad::Var> A;   // T of D x D
    std::vector<ad::Var> L;   // T of D x D, lower with positive diagonal
};

/// States x_0..x_T as D x 1 graph values driven by fixed draws (rows of eps).
std::vector<ad::Var> sample_states_var(ad::Tape& tape, const GaussMarkovVars& q,
                                       const Matrix& eps);

/// Stacks per-state columns into a (T+1) x D trajectory value.
ad::Var stack_states(const std::vector<ad::Var>& states);

struct MarginalVars {
    ad::Var mean;  // D x 1
    ad::Var cov;   // D x D
};

std::vector<MarginalVars> marginals_var(ad::Tape& tape, const GaussMarkovVars& q);

ad::Var entropy_var(ad::Tape& tape, const GaussMarkovVars& q);

/// Binds the posterior's current values as constants.
GaussMarkovVars bind_gauss_markov_const(ad::Tape& tape, const GaussMarkov& q);

/// Plain-value views of the bound posterior (for handing graph results back).
GaussMarkov gauss_markov_values(const GaussMarkovVars& q);

}  // namespace gpssm

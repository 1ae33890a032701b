#pragma once

#include <string>
#include <utility>
#include <vector>

#include "gpssm/ad.hpp"
#include "gpssm/kernels.hpp"

namespace gpssm {

/// Sparse Gaussian-process transition model. One independent GP per latent
/// state coordinate; all of them share the kernel, the inducing inputs Z and
/// the process-noise variance. The GP models the full next state around an
/// identity mean, so the d-th prior mean at input [x, a] is x(d).
///
/// Z is M x (state_dim + action_dim). Column d of U_mu holds the mean of the
/// inducing-output distribution for coordinate d; U_chol[d] is the
/// lower-triangular factor of its covariance.
struct SparseGp {
    Kernel kernel;
    Matrix Z;
    Matrix U_mu;
    std::vector<Matrix> U_chol;
    double sigma_f2 = 0.01;
    bool learn_sigma_f2 = true;  // when false sigma_f2 stays at its set value

    Eigen::Index num_inducing() const { return Z.rows(); }
    Eigen::Index input_dim() const { return Z.cols(); }
    Eigen::Index state_dim() const { return U_mu.cols(); }
};

/// Starts the inducing-output distributions at the GP prior: U_mu = identity
/// mean at Z, U_chol[d] = chol(Kzz + jitter I). At this point the posterior
/// mean is the identity map and the inducing KL is zero.
SparseGp init_sparse_gp(Kernel kernel, Matrix Z, Eigen::Index state_dim, double sigma_f2,
                        bool learn_sigma_f2 = true);

void validate(const SparseGp& gp);

struct CholResult {
    Matrix C;       // lower-triangular factor of K + jitter I
    double jitter;  // ridge that succeeded, level * variance_scale
    double level;   // relative level, one of 1e-6 .. 1e-2
};

/// Cholesky with an escalating diagonal ridge: tries jitter = variance_scale
/// times 1e-6, 1e-5, ..., 1e-2 and keeps the first level that factorises.
/// Throws NumericalError carrying all attempted levels if none works.
CholResult chol_with_escalating_jitter(const Matrix& K, double variance_scale);

/// Precomputed quantities for repeated posterior prediction (value route).
struct GpPredictor {
    Kernel kernel;
    Matrix Z;
    Matrix C;                  // chol(Kzz + jitter I)
    Matrix alpha;              // M x D, column d solves (Kzz + jI) alpha_d = mu_d - Z.col(d)
    std::vector<Matrix> CiS;   // C^{-1} U_chol[d]
    double total_var = 1.0;
    double jitter = 0.0;
    double sigma_f2 = 0.01;
    Eigen::Index state_dim = 0;
};

GpPredictor make_predictor(const SparseGp& gp);

/// Posterior marginals of the transition function (noise-free) at the rows of
/// X (n x input_dim): mean and variance become n x state_dim. Variances are
/// clamped at zero against roundoff.
void predict(const GpPredictor& p, const Matrix& X, Matrix& mean, Matrix& var);

/// Sum over coordinates of KL between the inducing-output distribution and
/// its GP prior N(Z.col(d), Kzz + jitter I).
double kl_inducing(const SparseGp& gp, double jitter);

/// GP parameters bound onto a tape. U_chol factors and sigma_f2 are already
/// in constrained space (softplus applied along the diagonal / to the scalar).
struct SparseGpVars {
    KernelVars kernel;
    ad::Var Z;
    std::vector<ad::Var> u_mu;    // M x 1 each
    std::vector<ad::Var> u_chol;  // M x M lower-triangular each
    ad::Var sigma_f2;             // 1 x 1
    Eigen::Index state_dim = 0;
};

/// Unconstrained tensors for the GP under `prefix`: "Z", "u.<d>.mu",
/// "u.<d>.chol_raw" (dense storage; only the lower triangle is read, with an
/// inverse softplus on the diagonal), "sigma_f2_raw" (omitted when the noise
/// is fixed), and the kernel's own parameters under "kernel.".
std::vector<std::pair<std::string, Matrix>> sparse_gp_raw_params(const SparseGp& gp,
                                                                 const std::string& prefix);

SparseGpVars bind_sparse_gp(ad::Tape& tape, const SparseGp& gp, const std::string& prefix,
                            const RawParamFn& lookup);

SparseGp sparse_gp_from_raw(const SparseGp& structure, const std::string& prefix,
                            const std::function<Matrix(const std::string&)>& raw);

/// Inducing-input algebra shared by every prediction in one graph. The ridge
/// LEVEL is chosen on the value pass (chol_with_escalating_jitter on the
/// current gram) and frozen; the ridge itself is level * total_variance as a
/// graph node, so its kernel dependence is differentiated through.
struct GpPosteriorVars {
    ad::Var C;                    // chol(Kzz + jitter I)
    std::vector<ad::Var> c_mean;  // C^{-1} (u_mu[d] - Z.col(d))
    std::vector<ad::Var> CiS;     // C^{-1} u_chol[d]
    ad::Var kdiag;                // 1 x 1 prior marginal variance
    double jitter = 0.0;
};

GpPosteriorVars gp_posterior_vars(ad::Tape& tape, const SparseGpVars& gp);

/// Posterior marginals at the rows of X (n x input_dim, may require
/// gradients): per-coordinate n x 1 mean and variance columns.
struct GpMarginalsVars {
    std::vector<ad::Var> mean;
    std::vector<ad::Var> var;
};

GpMarginalsVars gp_marginals_var(ad::Tape& tape, const SparseGpVars& gp,
                                 const GpPosteriorVars& post, const ad::Var& X);

ad::Var kl_inducing_var(ad::Tape& tape, const SparseGpVars& gp, const GpPosteriorVars& post);

}  // namespace gpssm

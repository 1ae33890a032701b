#pragma once

#include <vector>

#include "gpssm/model.hpp"
#include "gpssm/state_posterior.hpp"

namespace gpssm {

/// The bound split into its parts. total = emission + transition + entropy
/// - kl_u + prior_x0; everything except kl_u is scaled to the full dataset
/// when estimated on a mini-batch, kl_u enters once unscaled.
struct ElboBreakdown {
    double emission = 0.0;
    double transition = 0.0;
    double entropy = 0.0;
    double kl_u = 0.0;
    double prior_x0 = 0.0;
    double total = 0.0;
};

/// Expected log-likelihood of the observations under the posterior marginals
/// (closed form): sum_t [log N(y_t | W m_t + b, sigma_g2 I)
/// - tr(W^T W S_t) / (2 sigma_g2)]. `marginals` covers t = 0..T; rows of Y
/// pair with t = 1..T.
double emission_term(const EmissionModel& em, const std::vector<Marginal>& marginals,
                     const Matrix& Y);

/// Single-trajectory estimate of the expected transition log-density minus
/// the per-step posterior-variance penalty, summed over steps and
/// coordinates. xhat is a sampled (T+1) x D trajectory; actions is T x P.
double transition_term(const GpPredictor& p, const Matrix& xhat, const Matrix& actions);
double transition_term(const SparseGp& gp, const Matrix& xhat, const Matrix& actions);

/// E_q[log p(x_0)] for the standard-normal initial-state prior.
double prior_x0_term(const Vector& m0, const Matrix& L0);

/// Standard-normal driving noise for every episode and sample:
/// eps[episode][sample] is (T_e + 1) x state_dim. Episode-major draw order.
std::vector<std::vector<Matrix>> draw_eps(const std::vector<Episode>& batch,
                                          Eigen::Index state_dim, int num_samples, Rng& rng);

/// Value-route estimate with caller-supplied noise (deterministic).
ElboBreakdown elbo_estimate_with(const GpssmModel& model, const std::vector<Episode>& batch,
                                 const std::vector<std::vector<Matrix>>& eps,
                                 Eigen::Index total_episodes);

/// Draws num_samples trajectories per episode from rng, then averages the
/// transition estimate; closed-form parts carry no sampling noise.
ElboBreakdown elbo_estimate(const GpssmModel& model, const std::vector<Episode>& batch,
                            int num_samples, Eigen::Index total_episodes, Rng& rng);

struct ElboVars {
    ad::Var emission;
    ad::Var transition;
    ad::Var entropy;
    ad::Var kl_u;
    ad::Var prior_x0;
    ad::Var total;

    ElboBreakdown values() const;
};

/// Differentiable counterpart of elbo_estimate_with on parameters already
/// bound through `vars`. Episode data and eps draws enter as constants.
ElboVars elbo_graph(ad::Tape& tape, const GpssmModel& structure, const ModelVars& vars,
                    const std::vector<Episode>& batch,
                    const std::vector<std::vector<Matrix>>& eps, Eigen::Index total_episodes);

}  // namespace gpssm

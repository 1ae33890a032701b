#include "gpssm/elbo.hpp"

#include <cmath>

#include "gpssm/errors.hpp"

namespace gpssm {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

void check_batch(const std::vector<Episode>& batch, const std::vector<std::vector<Matrix>>& eps,
                 const GpssmModel& model, Eigen::Index total_episodes) {
    if (batch.empty()) throw InputError("elbo: batch must be non-empty");
    if (total_episodes < static_cast<Eigen::Index>(batch.size()))
        throw InputError("elbo: total episode count below the batch size");
    if (eps.size() != batch.size()) throw InputError("elbo: need one eps set per episode");
    const std::size_t k = eps.front().size();
    if (k < 1) throw InputError("elbo: need at least one sample");
    for (std::size_t e = 0; e < batch.size(); ++e) {
        if (eps[e].size() != k) throw InputError("elbo: ragged sample counts across episodes");
        for (const Matrix& m : eps[e])
            if (m.rows() != batch[e].horizon() + 1 || m.cols() != model.state_dim())
                throw InputError("elbo: eps shape must be (T+1) x state_dim");
        if (batch[e].Y.cols() != model.obs_dim() || batch[e].A.cols() != model.action_dim())
            throw InputError("elbo: episode width does not match the model");
    }
}

}  // namespace

double emission_term(const EmissionModel& em, const std::vector<Marginal>& marginals,
                     const Matrix& Y) {
    const Eigen::Index T = Y.rows(), O = Y.cols();
    if (static_cast<Eigen::Index>(marginals.size()) != T + 1)
        throw InputError("emission_term: need marginals for t = 0..T");
    const Matrix WtW = em.W.transpose() * em.W;
    double quad = 0.0, trace = 0.0;
    for (Eigen::Index t = 1; t <= T; ++t) {
        Vector r = Y.row(t - 1).transpose() - em.W * marginals[t].mean - em.b;
        quad += r.squaredNorm();
        trace += (WtW * marginals[t].cov).trace();
    }
    return -0.5 * static_cast<double>(T * O) * (kLog2Pi + std::log(em.sigma_g2)) -
           (quad + trace) / (2.0 * em.sigma_g2);
}

double transition_term(const GpPredictor& p, const Matrix& xhat, const Matrix& actions) {
    const Eigen::Index T = xhat.rows() - 1, D = p.state_dim;
    if (T < 1) throw InputError("transition_term: need at least one transition");
    if (actions.rows() != T) throw InputError("transition_term: need one action row per step");
    Matrix X(T, xhat.cols() + actions.cols());
    X << xhat.topRows(T), actions;
    Matrix mean, var;
    predict(p, X, mean, var);
    const double fit = var.sum() + (xhat.bottomRows(T) - mean).squaredNorm();
    return -fit / (2.0 * p.sigma_f2) -
           0.5 * static_cast<double>(T * D) * (kLog2Pi + std::log(p.sigma_f2));
}

double transition_term(const SparseGp& gp, const Matrix& xhat, const Matrix& actions) {
    return transition_term(make_predictor(gp), xhat, actions);
}

double prior_x0_term(const Vector& m0, const Matrix& L0) {
    return -0.5 * static_cast<double>(m0.size()) * kLog2Pi -
           0.5 * (m0.squaredNorm() + L0.squaredNorm());
}

std::vector<std::vector<Matrix>> draw_eps(const std::vector<Episode>& batch,
                                          Eigen::Index state_dim, int num_samples, Rng& rng) {
    if (num_samples < 1) throw InputError("draw_eps: need at least one sample");
    std::vector<std::vector<Matrix>> eps(batch.size());
    for (std::size_t e = 0; e < batch.size(); ++e)
        for (int k = 0; k < num_samples; ++k)
            eps[e].push_back(rng.normal_matrix(batch[e].horizon() + 1, state_dim));
    return eps;
}

ElboBreakdown elbo_estimate_with(const GpssmModel& model, const std::vector<Episode>& batch,
                                 const std::vector<std::vector<Matrix>>& eps,
                                 Eigen::Index total_episodes) {
    check_batch(batch, eps, model, total_episodes);
    GpPredictor pred = make_predictor(model.gp);

    double em = 0.0, tr = 0.0, ent = 0.0, prior = 0.0;
    for (std::size_t e = 0; e < batch.size(); ++e) {
        const Episode& ep = batch[e];
        Matrix inputs(ep.horizon(), model.obs_dim() + model.action_dim());
        inputs << ep.Y, ep.A;
        GaussMarkov q = encode(model.recognition, inputs);
        em += emission_term(model.emission, marginals(q), ep.Y);
        ent += entropy(q);
        prior += prior_x0_term(q.m0, q.L0);
        double t_sum = 0.0;
        for (const Matrix& draw : eps[e])
            t_sum += transition_term(pred, sample_trajectory(q, draw), ep.A);
        tr += t_sum / static_cast<double>(eps[e].size());
    }

    const double scale =
        static_cast<double>(total_episodes) / static_cast<double>(batch.size());
    ElboBreakdown out;
    out.emission = scale * em;
    out.transition = scale * tr;
    out.entropy = scale * ent;
    out.prior_x0 = scale * prior;
    out.kl_u = kl_inducing(model.gp, pred.jitter);
    out.total = out.emission + out.transition + out.entropy - out.kl_u + out.prior_x0;
    return out;
}

ElboBreakdown elbo_estimate(const GpssmModel& model, const std::vector<Episode>& batch,
                            int num_samples, Eigen::Index total_episodes, Rng& rng) {
    return elbo_estimate_with(model, batch, draw_eps(batch, model.state_dim(), num_samples, rng),
                              total_episodes);
}

ElboBreakdown ElboVars::values() const {
    ElboBreakdown out;
    out.emission = emission.value()(0, 0);
    out.transition = transition.value()(0, 0);
    out.entropy = entropy.value()(0, 0);
    out.kl_u = kl_u.value()(0, 0);
    out.prior_x0 = prior_x0.value()(0, 0);
    out.total = total.value()(0, 0);
    return out;
}

ElboVars elbo_graph(ad::Tape& tape, const GpssmModel& structure, const ModelVars& vars,
                    const std::vector<Episode>& batch,
                    const std::vector<std::vector<Matrix>>& eps, Eigen::Index total_episodes) {
    check_batch(batch, eps, structure, total_episodes);
    const Eigen::Index D = structure.state_dim(), O = structure.obs_dim(),
                       P = structure.action_dim();

    GpPosteriorVars post = gp_posterior_vars(tape, vars.gp);
    ad::Var kl = kl_inducing_var(tape, vars.gp, post);
    ad::Var inv_s2 = ad::cwise_inv(vars.emission.sigma_g2);
    ad::Var log_s2 = ad::cwise_log(vars.emission.sigma_g2);
    ad::Var inv_sf2 = ad::cwise_inv(vars.gp.sigma_f2);
    ad::Var log_sf2 = ad::cwise_log(vars.gp.sigma_f2);
    ad::Var WtW = ad::transpose(vars.emission.W) * vars.emission.W;

    ad::Var em_sum, tr_sum, ent_sum, prior_sum;
    bool first = true;
    auto add = [&](ad::Var& acc, const ad::Var& v) { acc = first ? v : acc + v; };

    for (std::size_t e = 0; e < batch.size(); ++e) {
        const Episode& ep = batch[e];
        const Eigen::Index T = ep.horizon();
        Matrix inputs(T, O + P);
        inputs << ep.Y, ep.A;
        GaussMarkovVars q = encode_var(tape, vars.recognition, inputs);
        std::vector<MarginalVars> marg = marginals_var(tape, q);

        // Emission: residuals of the marginal means plus the trace penalty.
        std::vector<ad::Var> mean_rows;
        ad::Var cov_sum = marg[1].cov;
        mean_rows.push_back(ad::transpose(marg[1].mean));
        for (Eigen::Index t = 2; t <= T; ++t) {
            mean_rows.push_back(ad::transpose(marg[t].mean));
            cov_sum = cov_sum + marg[t].cov;
        }
        ad::Var mstack = ad::stack_rows(mean_rows);
        ad::Var ones_t = tape.constant(Matrix(Matrix::Ones(T, 1)));
        ad::Var pred = mstack * ad::transpose(vars.emission.W) +
                       ones_t * ad::transpose(vars.emission.b);
        ad::Var resid = tape.constant(ep.Y) - pred;
        ad::Var fit = ad::sum(ad::cwise_square(resid)) + ad::sum(ad::cwise_mul(WtW, cov_sum));
        ad::Var em = ad::scale(-0.5 * static_cast<double>(T * O), ad::shift(log_s2, kLog2Pi)) +
                     ad::scale(-0.5, ad::scale_by(inv_s2, fit));
        add(em_sum, em);

        add(ent_sum, entropy_var(tape, q));
        ad::Var prior = ad::shift(
            ad::scale(-0.5, ad::sum(ad::cwise_square(q.m0)) + ad::sum(ad::cwise_square(q.L0))),
            -0.5 * static_cast<double>(D) * kLog2Pi);
        add(prior_sum, prior);

        // Transition: averaged single-trajectory estimates.
        ad::Var t_acc;
        for (std::size_t k = 0; k < eps[e].size(); ++k) {
            std::vector<ad::Var> states = sample_states_var(tape, q, eps[e][k]);
            ad::Var xall = stack_states(states);
            ad::Var xprev = ad::block(xall, 0, 0, T, D);
            ad::Var xnext = ad::block(xall, 1, 0, T, D);
            ad::Var xtilde = P > 0 ? ad::hstack(xprev, tape.constant(ep.A)) : xprev;
            GpMarginalsVars gm = gp_marginals_var(tape, vars.gp, post, xtilde);
            ad::Var gfit;
            for (Eigen::Index d = 0; d < D; ++d) {
                ad::Var r = ad::block(xnext, 0, d, T, 1) - gm.mean[d];
                ad::Var part = ad::sum(gm.var[d]) + ad::sum(ad::cwise_square(r));
                gfit = d == 0 ? part : gfit + part;
            }
            ad::Var term =
                ad::scale(-0.5 * static_cast<double>(T * D), ad::shift(log_sf2, kLog2Pi)) +
                ad::scale(-0.5, ad::scale_by(inv_sf2, gfit));
            t_acc = k == 0 ? term : t_acc + term;
        }
        add(tr_sum, ad::scale(1.0 / static_cast<double>(eps[e].size()), t_acc));
        first = false;
    }

    const double scale =
        static_cast<double>(total_episodes) / static_cast<double>(batch.size());
    ElboVars out;
    out.emission = ad::scale(scale, em_sum);
    out.transition = ad::scale(scale, tr_sum);
    out.entropy = ad::scale(scale, ent_sum);
    out.prior_x0 = ad::scale(scale, prior_sum);
    out.kl_u = kl;
    out.total = out.emission + out.transition + out.entropy - out.kl_u + out.prior_x0;
    return out;
}

}  // namespace gpssm

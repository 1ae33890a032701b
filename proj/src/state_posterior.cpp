#include "gpssm/state_posterior.hpp"

#include <cmath>

#include "gpssm/errors.hpp"

namespace gpssm {

namespace {

void check_factor(const Matrix& L, Eigen::Index d, const char* name) {
    if (L.rows() != d || L.cols() != d)
        throw InputError(std::string("GaussMarkov: ") + name + " has wrong shape");
    for (Eigen::Index i = 0; i < d; ++i) {
        if (L(i, i) <= 0.0)
            throw InputError(std::string("GaussMarkov: ") + name +
                             " needs a positive diagonal");
        for (Eigen::Index j = i + 1; j < d; ++j)
            if (L(i, j) != 0.0)
                throw InputError(std::string("GaussMarkov: ") + name +
                                 " must be lower triangular");
    }
}

}  // namespace

void validate(const GaussMarkov& q) {
    const Eigen::Index d = q.dim();
    if (d == 0) throw InputError("GaussMarkov: empty state dimension");
    if (q.A.size() != q.L.size())
        throw InputError("GaussMarkov: A and L must have one entry per transition");
    check_factor(q.L0, d, "L0");
    for (std::size_t t = 0; t < q.A.size(); ++t) {
        if (q.A[t].rows() != d || q.A[t].cols() != d)
            throw InputError("GaussMarkov: A has wrong shape");
        check_factor(q.L[t], d, "L");
    }
}

Matrix sample_trajectory(const GaussMarkov& q, const Matrix& eps) {
    const Eigen::Index T = q.horizon(), d = q.dim();
    if (eps.rows() != T + 1 || eps.cols() != d)
        throw InputError("sample_trajectory: eps must be (T+1) x D");
    Matrix out(T + 1, d);
    Vector x = q.m0 + q.L0 * eps.row(0).transpose();
    out.row(0) = x.transpose();
    for (Eigen::Index t = 1; t <= T; ++t) {
        x = q.A[t - 1] * x + q.L[t - 1] * eps.row(t).transpose();
        out.row(t) = x.transpose();
    }
    return out;
}

std::vector<Marginal> marginals(const GaussMarkov& q) {
    const Eigen::Index T = q.horizon();
    std::vector<Marginal> out;
    out.reserve(T + 1);
    out.push_back({q.m0, q.L0 * q.L0.transpose()});
    for (Eigen::Index t = 1; t <= T; ++t) {
        const Matrix& A = q.A[t - 1];
        const Matrix& L = q.L[t - 1];
        out.push_back({A * out.back().mean, A * out.back().cov * A.transpose() + L * L.transpose()});
    }
    return out;
}

double entropy(const GaussMarkov& q) {
    const Eigen::Index T = q.horizon(), d = q.dim();
    double logdet = q.L0.diagonal().array().log().sum();
    for (const Matrix& L : q.L) logdet += L.diagonal().array().log().sum();
    return 0.5 * static_cast<double>((T + 1) * d) * std::log(2.0 * M_PI * M_E) + logdet;
}

Matrix joint_covariance(const GaussMarkov& q) {
    const Eigen::Index T = q.horizon(), d = q.dim();
    std::vector<Marginal> marg = marginals(q);
    Matrix out((T + 1) * d, (T + 1) * d);
    // Cov(x_s, x_t) for s <= t follows from x_t = A_t x_{t-1} + noise:
    // Cov(x_s, x_t) = Cov(x_s, x_{t-1}) A_t^T.
    for (Eigen::Index s = 0; s <= T; ++s) {
        out.block(s * d, s * d, d, d) = marg[s].cov;
        Matrix cross = marg[s].cov;
        for (Eigen::Index t = s + 1; t <= T; ++t) {
            cross = cross * q.A[t - 1].transpose();
            out.block(s * d, t * d, d, d) = cross;
            out.block(t * d, s * d, d, d) = cross.transpose();
        }
    }
    return out;
}

std::vector<ad::Var> sample_states_var(ad::Tape& tape, const GaussMarkovVars& q,
                                       const Matrix& eps) {
    const std::size_t T = q.A.size();
    if (eps.rows() != static_cast<Eigen::Index>(T) + 1 || eps.cols() != q.m0.rows())
        throw InputError("sample_states_var: eps must be (T+1) x D");
    std::vector<ad::Var> states;
    states.reserve(T + 1);
    ad::Var x = q.m0 + q.L0 * tape.constant(Matrix(eps.row(0).transpose()));
    states.push_back(x);
    for (std::size_t t = 1; t <= T; ++t) {
        x = q.A[t - 1] * x +
            q.L[t - 1] * tape.constant(Matrix(eps.row(static_cast<Eigen::Index>(t)).transpose()));
        states.push_back(x);
    }
    return states;
}

ad::Var stack_states(const std::vector<ad::Var>& states) {
    std::vector<ad::Var> rows;
    rows.reserve(states.size());
    for (const ad::Var& x : states) rows.push_back(ad::transpose(x));
    return ad::stack_rows(rows);
}

std::vector<MarginalVars> marginals_var(ad::Tape& tape, const GaussMarkovVars& q) {
    std::vector<MarginalVars> out;
    out.reserve(q.A.size() + 1);
    out.push_back({q.m0, q.L0 * ad::transpose(q.L0)});
    for (std::size_t t = 0; t < q.A.size(); ++t) {
        ad::Var mean = q.A[t] * out.back().mean;
        ad::Var cov = q.A[t] * out.back().cov * ad::transpose(q.A[t]) +
                      q.L[t] * ad::transpose(q.L[t]);
        out.push_back({mean, cov});
    }
    return out;
}

ad::Var entropy_var(ad::Tape& tape, const GaussMarkovVars& q) {
    const double n = static_cast<double>((q.A.size() + 1)) * static_cast<double>(q.m0.rows());
    ad::Var logdet = ad::sum(ad::cwise_log(ad::diagonal(q.L0)));
    for (const ad::Var& L : q.L) logdet = logdet + ad::sum(ad::cwise_log(ad::diagonal(L)));
    return ad::shift(logdet, 0.5 * n * std::log(2.0 * M_PI * M_E));
}

GaussMarkovVars bind_gauss_markov_const(ad::Tape& tape, const GaussMarkov& q) {
    GaussMarkovVars out;
    out.m0 = tape.constant(Matrix(q.m0));
    out.L0 = tape.constant(q.L0);
    for (const Matrix& A : q.A) out.A.push_back(tape.constant(A));
    for (const Matrix& L : q.L) out.L.push_back(tape.constant(L));
    return out;
}

GaussMarkov gauss_markov_values(const GaussMarkovVars& q) {
    GaussMarkov out;
    out.m0 = q.m0.value().col(0);
    out.L0 = q.L0.value();
    for (const ad::Var& A : q.A) out.A.push_back(A.value());
    for (const ad::Var& L : q.L) out.L.push_back(L.value());
    return out;
}

}  // namespace gpssm

#include "gpssm/sparse_gp.hpp"

#include <cmath>

#include "gpssm/errors.hpp"

namespace gpssm {

SparseGp init_sparse_gp(Kernel kernel, Matrix Z, Eigen::Index state_dim, double sigma_f2,
                        bool learn_sigma_f2) {
    if (Z.rows() < 1) throw InputError("init_sparse_gp: need at least one inducing input");
    if (state_dim < 1 || state_dim > Z.cols())
        throw InputError("init_sparse_gp: state dimension must be in [1, input dimension]");
    if (!(sigma_f2 > 0.0) || !std::isfinite(sigma_f2))
        throw InputError("init_sparse_gp: process-noise variance must be positive");
    validate(kernel, Z.cols());

    SparseGp gp;
    gp.kernel = std::move(kernel);
    gp.U_mu = Z.leftCols(state_dim);
    CholResult chol = chol_with_escalating_jitter(gram(gp.kernel, Z), total_variance(gp.kernel));
    gp.U_chol.assign(state_dim, chol.C);
    gp.Z = std::move(Z);
    gp.sigma_f2 = sigma_f2;
    gp.learn_sigma_f2 = learn_sigma_f2;
    return gp;
}

void validate(const SparseGp& gp) {
    const Eigen::Index m = gp.Z.rows(), d = gp.U_mu.cols();
    if (m < 1) throw InputError("SparseGp: need at least one inducing input");
    if (d < 1 || d > gp.Z.cols())
        throw InputError("SparseGp: state dimension must be in [1, input dimension]");
    if (gp.U_mu.rows() != m) throw InputError("SparseGp: U_mu must have one row per inducing input");
    if (static_cast<Eigen::Index>(gp.U_chol.size()) != d)
        throw InputError("SparseGp: need one covariance factor per state coordinate");
    for (const Matrix& s : gp.U_chol) {
        if (s.rows() != m || s.cols() != m)
            throw InputError("SparseGp: covariance factors must be M x M");
        for (Eigen::Index i = 0; i < m; ++i) {
            if (!(s(i, i) > 0.0)) throw InputError("SparseGp: factor diagonals must be positive");
            for (Eigen::Index j = i + 1; j < m; ++j)
                if (s(i, j) != 0.0)
                    throw InputError("SparseGp: covariance factors must be lower-triangular");
        }
    }
    if (!(gp.sigma_f2 > 0.0) || !std::isfinite(gp.sigma_f2))
        throw InputError("SparseGp: process-noise variance must be positive");
    validate(gp.kernel, gp.Z.cols());
}

CholResult chol_with_escalating_jitter(const Matrix& K, double variance_scale) {
    if (K.rows() != K.cols()) throw InputError("chol_with_escalating_jitter: matrix must be square");
    const Eigen::Index n = K.rows();
    std::vector<double> attempted;
    for (double level : {1e-6, 1e-5, 1e-4, 1e-3, 1e-2}) {
        const double jitter = level * variance_scale;
        Eigen::LLT<Matrix> llt(K + jitter * Matrix::Identity(n, n));
        if (llt.info() == Eigen::Success) return {Matrix(llt.matrixL()), jitter, level};
        attempted.push_back(jitter);
    }
    throw NumericalError("cholesky failed at every jitter level", attempted);
}

GpPredictor make_predictor(const SparseGp& gp) {
    validate(gp);
    GpPredictor p;
    p.kernel = gp.kernel;
    p.Z = gp.Z;
    p.total_var = total_variance(gp.kernel);
    p.sigma_f2 = gp.sigma_f2;
    p.state_dim = gp.state_dim();

    CholResult chol = chol_with_escalating_jitter(gram(gp.kernel, gp.Z), p.total_var);
    p.C = chol.C;
    p.jitter = chol.jitter;
    auto lower = p.C.triangularView<Eigen::Lower>();
    auto upper = p.C.transpose().triangularView<Eigen::Upper>();

    const Eigen::Index d = gp.state_dim();
    p.alpha.resize(gp.num_inducing(), d);
    p.CiS.reserve(d);
    for (Eigen::Index k = 0; k < d; ++k) {
        Vector resid = gp.U_mu.col(k) - gp.Z.col(k);
        p.alpha.col(k) = upper.solve(Vector(lower.solve(resid)));
        p.CiS.push_back(lower.solve(gp.U_chol[k]));
    }
    return p;
}

void predict(const GpPredictor& p, const Matrix& X, Matrix& mean, Matrix& var) {
    if (X.cols() != p.Z.cols()) throw InputError("predict: input width does not match Z");
    const Eigen::Index n = X.rows(), d = p.state_dim;
    Matrix Kxz = cross(p.kernel, X, p.Z);
    Matrix A = p.C.triangularView<Eigen::Lower>().solve(Matrix(Kxz.transpose()));

    mean.resize(n, d);
    var.resize(n, d);
    Vector common = Vector::Constant(n, p.total_var) - A.colwise().squaredNorm().transpose();
    for (Eigen::Index k = 0; k < d; ++k) {
        mean.col(k) = X.col(k) + Kxz * p.alpha.col(k);
        var.col(k) = (common + (p.CiS[k].transpose() * A).colwise().squaredNorm().transpose())
                         .cwiseMax(0.0);
    }
}

double kl_inducing(const SparseGp& gp, double jitter) {
    const Eigen::Index m = gp.num_inducing();
    Eigen::LLT<Matrix> llt(gram(gp.kernel, gp.Z, jitter));
    if (llt.info() != Eigen::Success)
        throw NumericalError("kl_inducing: prior covariance is not positive definite", {jitter});
    Matrix C = llt.matrixL();
    auto lower = C.triangularView<Eigen::Lower>();
    const double logdet_prior = 2.0 * C.diagonal().array().log().sum();

    double total = 0.0;
    for (Eigen::Index d = 0; d < gp.state_dim(); ++d) {
        Matrix CiS = lower.solve(gp.U_chol[d]);
        Vector cm = lower.solve(Vector(gp.U_mu.col(d) - gp.Z.col(d)));
        const double logdet_q = 2.0 * gp.U_chol[d].diagonal().array().log().sum();
        total += 0.5 * (CiS.squaredNorm() + cm.squaredNorm() - static_cast<double>(m) +
                        logdet_prior - logdet_q);
    }
    return total;
}

// ---- Differentiable route ----

std::vector<std::pair<std::string, Matrix>> sparse_gp_raw_params(const SparseGp& gp,
                                                                 const std::string& prefix) {
    auto out = kernel_raw_params(gp.kernel, prefix + "kernel.");
    out.emplace_back(prefix + "Z", gp.Z);
    for (Eigen::Index d = 0; d < gp.state_dim(); ++d) {
        const std::string base = prefix + "u." + std::to_string(d) + ".";
        out.emplace_back(base + "mu", Matrix(gp.U_mu.col(d)));
        Matrix raw = gp.U_chol[d];
        for (Eigen::Index i = 0; i < raw.rows(); ++i)
            raw(i, i) = ad::softplus_inverse(raw(i, i));
        out.emplace_back(base + "chol_raw", raw);
    }
    if (gp.learn_sigma_f2)
        out.emplace_back(prefix + "sigma_f2_raw",
                         Matrix::Constant(1, 1, ad::softplus_inverse(gp.sigma_f2)));
    return out;
}

SparseGpVars bind_sparse_gp(ad::Tape& tape, const SparseGp& gp, const std::string& prefix,
                            const RawParamFn& lookup) {
    SparseGpVars out;
    out.kernel = bind_kernel(tape, gp.kernel, prefix + "kernel.", lookup);
    out.Z = lookup(prefix + "Z");
    for (Eigen::Index d = 0; d < gp.state_dim(); ++d) {
        const std::string base = prefix + "u." + std::to_string(d) + ".";
        out.u_mu.push_back(lookup(base + "mu"));
        out.u_chol.push_back(ad::tril_softplus_diag(lookup(base + "chol_raw")));
    }
    out.sigma_f2 = gp.learn_sigma_f2 ? ad::cwise_softplus(lookup(prefix + "sigma_f2_raw"))
                                     : tape.constant(gp.sigma_f2);
    out.state_dim = gp.state_dim();
    return out;
}

SparseGp sparse_gp_from_raw(const SparseGp& structure, const std::string& prefix,
                            const std::function<Matrix(const std::string&)>& raw) {
    SparseGp out = structure;
    out.kernel = kernel_from_raw(structure.kernel, prefix + "kernel.", raw);
    out.Z = raw(prefix + "Z");
    out.U_mu.resize(out.Z.rows(), structure.state_dim());
    out.U_chol.clear();
    for (Eigen::Index d = 0; d < structure.state_dim(); ++d) {
        const std::string base = prefix + "u." + std::to_string(d) + ".";
        out.U_mu.col(d) = raw(base + "mu");
        Matrix s = raw(base + "chol_raw");
        Matrix tri = Matrix::Zero(s.rows(), s.cols());
        tri.triangularView<Eigen::StrictlyLower>() = s;
        for (Eigen::Index i = 0; i < s.rows(); ++i) tri(i, i) = ad::softplus(s(i, i));
        out.U_chol.push_back(tri);
    }
    if (structure.learn_sigma_f2)
        out.sigma_f2 = ad::softplus(raw(prefix + "sigma_f2_raw")(0, 0));
    return out;
}

GpPosteriorVars gp_posterior_vars(ad::Tape& tape, const SparseGpVars& gp) {
    GpPosteriorVars post;
    post.kdiag = total_variance_var(tape, gp.kernel);

    ad::Var g0 = gram_var(tape, gp.kernel, gp.Z, 0.0);
    // The ridge level is picked on the value pass, then the ridge itself is
    // level * total_variance as a graph node: gradients see the ridge's
    // dependence on the kernel, which matters when the gram is close to
    // singular and the bound is sensitive to the ridge size.
    CholResult pick = chol_with_escalating_jitter(g0.value(), post.kdiag.value()(0, 0));
    post.jitter = pick.jitter;
    const Eigen::Index m = g0.value().rows();
    ad::Var ridge = ad::scale_by(ad::scale(pick.level, post.kdiag),
                                 tape.constant(Matrix(Matrix::Identity(m, m))));
    post.C = ad::cholesky(g0 + ridge);

    for (Eigen::Index d = 0; d < gp.state_dim; ++d) {
        ad::Var eta = ad::block(gp.Z, 0, d, m, 1);
        post.c_mean.push_back(ad::trisolve_lower(post.C, gp.u_mu[d] - eta));
        post.CiS.push_back(ad::trisolve_lower(post.C, gp.u_chol[d]));
    }
    return post;
}

GpMarginalsVars gp_marginals_var(ad::Tape& tape, const SparseGpVars& gp,
                                 const GpPosteriorVars& post, const ad::Var& X) {
    const Eigen::Index n = X.value().rows();
    ad::Var Kxz = cross_var(tape, gp.kernel, X, gp.Z);
    ad::Var A = ad::trisolve_lower(post.C, ad::transpose(Kxz));

    ad::Var prior_diag = ad::scale_by(post.kdiag, tape.constant(Matrix(Matrix::Ones(n, 1))));
    ad::Var common = prior_diag - ad::transpose(ad::colwise_sum(ad::cwise_square(A)));

    GpMarginalsVars out;
    for (Eigen::Index d = 0; d < gp.state_dim; ++d) {
        out.mean.push_back(ad::block(X, 0, d, n, 1) + ad::transpose(A) * post.c_mean[d]);
        ad::Var corr = ad::colwise_sum(ad::cwise_square(ad::transpose(post.CiS[d]) * A));
        out.var.push_back(common + ad::transpose(corr));
    }
    return out;
}

ad::Var kl_inducing_var(ad::Tape& tape, const SparseGpVars& gp, const GpPosteriorVars& post) {
    const double m = static_cast<double>(post.C.value().rows());
    ad::Var logdet_prior = ad::sum(ad::cwise_log(ad::diagonal(post.C)));
    ad::Var total = tape.constant(Matrix(Matrix::Zero(1, 1)));
    for (Eigen::Index d = 0; d < gp.state_dim; ++d) {
        ad::Var logdet_q = ad::sum(ad::cwise_log(ad::diagonal(gp.u_chol[d])));
        ad::Var fit = ad::sum(ad::cwise_square(post.CiS[d])) +
                      ad::sum(ad::cwise_square(post.c_mean[d]));
        total = total + ad::scale(0.5, ad::shift(fit + ad::scale(2.0, logdet_prior - logdet_q), -m));
    }
    return total;
}

}  // namespace gpssm

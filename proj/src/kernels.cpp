#include "gpssm/kernels.hpp"

#include <cmath>

#include "gpssm/errors.hpp"

namespace gpssm {

Kernel make_rbf(double variance, Vector lengthscales) {
    Kernel k;
    k.variant = KernelVariant::Rbf;
    k.variance = variance;
    k.lengthscales = std::move(lengthscales);
    return k;
}

Kernel make_matern12(double variance, Vector lengthscales) {
    Kernel k;
    k.variant = KernelVariant::Matern12;
    k.variance = variance;
    k.lengthscales = std::move(lengthscales);
    return k;
}

Kernel make_arccos0(double variance) {
    Kernel k;
    k.variant = KernelVariant::ArcCosine0;
    k.variance = variance;
    return k;
}

Kernel make_sum(std::vector<Kernel> children) {
    Kernel k;
    k.variant = KernelVariant::Sum;
    k.children = std::move(children);
    return k;
}

Kernel make_warped(Kernel base, std::vector<WarpLayer> warp) {
    Kernel k;
    k.variant = KernelVariant::Warped;
    k.children.push_back(std::move(base));
    k.warp = std::move(warp);
    return k;
}

namespace {

bool is_leaf(KernelVariant v) {
    return v == KernelVariant::Rbf || v == KernelVariant::Matern12 ||
           v == KernelVariant::ArcCosine0;
}

void validate_leaf(const Kernel& k, Eigen::Index input_dim) {
    if (k.variance <= 0.0) throw InputError("kernel: variance must be positive");
    if (k.lengthscales.size() != 1 && k.lengthscales.size() != input_dim)
        throw InputError("kernel: lengthscales must be shared (size 1) or one per input dimension");
    if ((k.lengthscales.array() <= 0.0).any())
        throw InputError("kernel: lengthscales must be positive");
    if (!k.children.empty()) throw InputError("kernel: leaf kernels take no children");
}

/// Per-dimension scale for a leaf: broadcast when a single shared value.
double lengthscale_at(const Kernel& k, Eigen::Index i) {
    return k.lengthscales.size() == 1 ? k.lengthscales(0) : k.lengthscales(i);
}

Vector scaled(const Kernel& k, const Vector& x) {
    Vector out(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) out(i) = x(i) / lengthscale_at(k, i);
    return out;
}

}  // namespace

void validate(const Kernel& k, Eigen::Index input_dim) {
    switch (k.variant) {
        case KernelVariant::Rbf:
        case KernelVariant::Matern12:
        case KernelVariant::ArcCosine0:
            validate_leaf(k, input_dim);
            return;
        case KernelVariant::Sum:
            if (k.children.size() < 2) throw InputError("kernel: Sum needs at least two children");
            for (const Kernel& child : k.children) validate(child, input_dim);
            return;
        case KernelVariant::Warped: {
            if (k.children.size() != 1) throw InputError("kernel: Warped needs exactly one base");
            if (k.warp.empty()) throw InputError("kernel: Warped needs at least one layer");
            Eigen::Index dim = input_dim;
            for (const WarpLayer& layer : k.warp) {
                if (layer.W.cols() != dim || layer.W.rows() != layer.b.size())
                    throw InputError("kernel: warp layer shapes do not chain");
                dim = layer.W.rows();
            }
            validate(k.children.front(), dim);
            return;
        }
    }
    throw InputError("kernel: unknown variant");
}

double total_variance(const Kernel& k) {
    switch (k.variant) {
        case KernelVariant::Sum: {
            double total = 0.0;
            for (const Kernel& child : k.children) total += total_variance(child);
            return total;
        }
        case KernelVariant::Warped:
            return total_variance(k.children.front());
        default:
            return k.variance;
    }
}

Vector warp_forward(const std::vector<WarpLayer>& warp, Vector x) {
    for (const WarpLayer& layer : warp) x = (layer.W * x + layer.b).array().tanh();
    return x;
}

double eval(const Kernel& k, const Vector& x, const Vector& y) {
    if (x.size() != y.size()) throw InputError("kernel eval: input sizes differ");
    switch (k.variant) {
        case KernelVariant::Rbf: {
            double sq = 0.0;
            for (Eigen::Index i = 0; i < x.size(); ++i) {
                double d = (x(i) - y(i)) / lengthscale_at(k, i);
                sq += d * d;
            }
            return k.variance * std::exp(-0.5 * sq);
        }
        case KernelVariant::Matern12: {
            double sq = 0.0;
            for (Eigen::Index i = 0; i < x.size(); ++i) {
                double d = (x(i) - y(i)) / lengthscale_at(k, i);
                sq += d * d;
            }
            return k.variance * std::exp(-std::sqrt(sq));
        }
        case KernelVariant::ArcCosine0: {
            Vector xs = scaled(k, x), ys = scaled(k, y);
            double nx = xs.norm(), ny = ys.norm();
            double theta = 0.0;
            // Zero-norm or identical inputs take angle 0; going through acos
            // would turn the last ulp of the cosine into an O(1e-8) angle.
            if (nx > 0.0 && ny > 0.0 && xs != ys) {
                double c = xs.dot(ys) / (nx * ny);
                theta = std::acos(std::min(1.0, std::max(-1.0, c)));
            }
            return k.variance * (1.0 - theta / M_PI);
        }
        case KernelVariant::Sum: {
            double total = 0.0;
            for (const Kernel& child : k.children) total += eval(child, x, y);
            return total;
        }
        case KernelVariant::Warped:
            return eval(k.children.front(), warp_forward(k.warp, x), warp_forward(k.warp, y));
    }
    throw InputError("kernel eval: unknown variant");
}

Matrix gram(const Kernel& k, const Matrix& X, double jitter) {
    Matrix out(X.rows(), X.rows());
    for (Eigen::Index i = 0; i < X.rows(); ++i)
        for (Eigen::Index j = 0; j <= i; ++j) {
            out(i, j) = eval(k, X.row(i), X.row(j));
            out(j, i) = out(i, j);
        }
    out.diagonal().array() += jitter;
    return out;
}

Matrix cross(const Kernel& k, const Matrix& X, const Matrix& Z) {
    Matrix out(X.rows(), Z.rows());
    for (Eigen::Index i = 0; i < X.rows(); ++i)
        for (Eigen::Index j = 0; j < Z.rows(); ++j) out(i, j) = eval(k, X.row(i), Z.row(j));
    return out;
}

// ---- Differentiable route ----

namespace {

Matrix raw_of_positive(const Vector& v) {
    Matrix raw(v.size(), 1);
    for (Eigen::Index i = 0; i < v.size(); ++i) raw(i, 0) = ad::softplus_inverse(v(i));
    return raw;
}

void collect_raw(const Kernel& k, const std::string& prefix,
                 std::vector<std::pair<std::string, Matrix>>& out) {
    switch (k.variant) {
        case KernelVariant::Rbf:
        case KernelVariant::Matern12:
        case KernelVariant::ArcCosine0:
            out.emplace_back(prefix + "variance_raw",
                             Matrix::Constant(1, 1, ad::softplus_inverse(k.variance)));
            out.emplace_back(prefix + "lengthscale_raw", raw_of_positive(k.lengthscales));
            return;
        case KernelVariant::Sum:
            for (std::size_t i = 0; i < k.children.size(); ++i)
                collect_raw(k.children[i], prefix + "c" + std::to_string(i) + ".", out);
            return;
        case KernelVariant::Warped:
            for (std::size_t i = 0; i < k.warp.size(); ++i) {
                out.emplace_back(prefix + "warp" + std::to_string(i) + ".W", k.warp[i].W);
                out.emplace_back(prefix + "warp" + std::to_string(i) + ".b",
                                 Matrix(k.warp[i].b));
            }
            collect_raw(k.children.front(), prefix + "base.", out);
            return;
    }
}

}  // namespace

std::vector<std::pair<std::string, Matrix>> kernel_raw_params(const Kernel& k,
                                                              const std::string& prefix) {
    std::vector<std::pair<std::string, Matrix>> out;
    collect_raw(k, prefix, out);
    return out;
}

KernelVars bind_kernel(ad::Tape& tape, const Kernel& k, const std::string& prefix,
                       const RawParamFn& lookup) {
    KernelVars kv;
    kv.variant = k.variant;
    switch (k.variant) {
        case KernelVariant::Rbf:
        case KernelVariant::Matern12:
        case KernelVariant::ArcCosine0:
            kv.variance = ad::cwise_softplus(lookup(prefix + "variance_raw"));
            kv.lengthscales = ad::cwise_softplus(lookup(prefix + "lengthscale_raw"));
            return kv;
        case KernelVariant::Sum:
            for (std::size_t i = 0; i < k.children.size(); ++i)
                kv.children.push_back(
                    bind_kernel(tape, k.children[i], prefix + "c" + std::to_string(i) + ".", lookup));
            return kv;
        case KernelVariant::Warped:
            for (std::size_t i = 0; i < k.warp.size(); ++i) {
                std::string base = prefix + "warp" + std::to_string(i) + ".";
                kv.warp.emplace_back(lookup(base + "W"), lookup(base + "b"));
            }
            kv.children.push_back(bind_kernel(tape, k.children.front(), prefix + "base.", lookup));
            return kv;
    }
    throw InputError("bind_kernel: unknown variant");
}

KernelVars bind_kernel_const(ad::Tape& tape, const Kernel& k) {
    auto params = kernel_raw_params(k, "");
    return bind_kernel(tape, k, "", [&](const std::string& name) {
        for (const auto& [n, v] : params)
            if (n == name) return tape.constant(v);
        throw InputError("bind_kernel_const: unknown parameter " + name);
    });
}

Kernel kernel_from_raw(const Kernel& structure, const std::string& prefix,
                       const std::function<Matrix(const std::string&)>& raw) {
    Kernel out = structure;
    switch (structure.variant) {
        case KernelVariant::Rbf:
        case KernelVariant::Matern12:
        case KernelVariant::ArcCosine0: {
            out.variance = ad::softplus(raw(prefix + "variance_raw")(0, 0));
            Matrix ls = raw(prefix + "lengthscale_raw");
            out.lengthscales.resize(ls.rows());
            for (Eigen::Index i = 0; i < ls.rows(); ++i)
                out.lengthscales(i) = ad::softplus(ls(i, 0));
            return out;
        }
        case KernelVariant::Sum:
            for (std::size_t i = 0; i < structure.children.size(); ++i)
                out.children[i] = kernel_from_raw(structure.children[i],
                                                  prefix + "c" + std::to_string(i) + ".", raw);
            return out;
        case KernelVariant::Warped:
            for (std::size_t i = 0; i < structure.warp.size(); ++i) {
                std::string base = prefix + "warp" + std::to_string(i) + ".";
                out.warp[i].W = raw(base + "W");
                out.warp[i].b = raw(base + "b");
            }
            out.children[0] = kernel_from_raw(structure.children[0], prefix + "base.", raw);
            return out;
    }
    throw InputError("kernel_from_raw: unknown variant");
}

namespace {

/// Divides each input column by its (possibly shared) lengthscale.
ad::Var scale_inputs(ad::Tape& tape, const KernelVars& k, const ad::Var& X) {
    if (k.lengthscales.value().size() == 1)
        return ad::scale_by(ad::cwise_inv(k.lengthscales), X);
    return X * ad::diag_matrix(ad::cwise_inv(k.lengthscales));
}

ad::Var warp_inputs(ad::Tape& tape, const KernelVars& k, ad::Var X) {
    for (const auto& [W, b] : k.warp) {
        ad::Var ones = tape.constant(Matrix::Ones(X.rows(), 1));
        X = ad::cwise_tanh(X * ad::transpose(W) + ones * ad::transpose(b));
    }
    return X;
}

}  // namespace

ad::Var cross_var(ad::Tape& tape, const KernelVars& k, const ad::Var& X, const ad::Var& Z) {
    switch (k.variant) {
        case KernelVariant::Rbf: {
            ad::Var sq = ad::pairwise_sqdist(scale_inputs(tape, k, X), scale_inputs(tape, k, Z));
            return ad::scale_by(k.variance, ad::cwise_exp(ad::scale(-0.5, sq)));
        }
        case KernelVariant::Matern12: {
            ad::Var sq = ad::pairwise_sqdist(scale_inputs(tape, k, X), scale_inputs(tape, k, Z));
            return ad::scale_by(k.variance, ad::cwise_exp(-ad::cwise_sqrt(sq)));
        }
        case KernelVariant::ArcCosine0: {
            ad::Var c = ad::cosine_similarity(scale_inputs(tape, k, X), scale_inputs(tape, k, Z));
            ad::Var theta = ad::cwise_acos_clamped(c);
            return ad::scale_by(k.variance, ad::shift(ad::scale(-1.0 / M_PI, theta), 1.0));
        }
        case KernelVariant::Sum: {
            ad::Var total = cross_var(tape, k.children.front(), X, Z);
            for (std::size_t i = 1; i < k.children.size(); ++i)
                total = total + cross_var(tape, k.children[i], X, Z);
            return total;
        }
        case KernelVariant::Warped:
            return cross_var(tape, k.children.front(), warp_inputs(tape, k, X),
                             warp_inputs(tape, k, Z));
    }
    throw InputError("cross_var: unknown variant");
}

ad::Var gram_var(ad::Tape& tape, const KernelVars& k, const ad::Var& X, double jitter) {
    ad::Var g = ad::symmetrize(cross_var(tape, k, X, X));
    if (jitter != 0.0)
        g = g + tape.constant(Matrix(jitter * Matrix::Identity(X.rows(), X.rows())));
    return g;
}

ad::Var total_variance_var(ad::Tape& tape, const KernelVars& k) {
    switch (k.variant) {
        case KernelVariant::Sum: {
            ad::Var total = total_variance_var(tape, k.children.front());
            for (std::size_t i = 1; i < k.children.size(); ++i)
                total = total + total_variance_var(tape, k.children[i]);
            return total;
        }
        case KernelVariant::Warped:
            return total_variance_var(tape, k.children.front());
        default:
            return k.variance;
    }
}

}  // namespace gpssm

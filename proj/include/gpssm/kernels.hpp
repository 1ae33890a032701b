#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "gpssm/ad.hpp"

namespace gpssm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class KernelVariant { Rbf, Matern12, ArcCosine0, Sum, Warped };

struct WarpLayer {
    Matrix W;  // out x in
    Vector b;  // out
};

/// Covariance function over row-vector inputs. Leaves hold constrained
/// hyperparameters (positive variance, positive lengthscales); Sum holds two
/// or more children; Warped holds exactly one child evaluated on inputs mapped
/// through a tanh multi-layer net.
struct Kernel {
    KernelVariant variant = KernelVariant::Rbf;
    double variance = 1.0;
    Vector lengthscales = Vector::Ones(1);  // size 1: shared scalar; size d: per-dimension
    std::vector<Kernel> children;
    std::vector<WarpLayer> warp;
};

Kernel make_rbf(double variance = 1.0, Vector lengthscales = Vector::Ones(1));
Kernel make_matern12(double variance = 1.0, Vector lengthscales = Vector::Ones(1));
Kernel make_arccos0(double variance = 1.0);
Kernel make_sum(std::vector<Kernel> children);
Kernel make_warped(Kernel base, std::vector<WarpLayer> warp);

/// Checks structural invariants against the input dimension; throws InputError.
void validate(const Kernel& k, Eigen::Index input_dim);

/// Sum of leaf variances reachable through the structure; every supported
/// kernel has k(x, x) equal to this value.
double total_variance(const Kernel& k);

/// Maps a point through a warp net (tanh after every layer).
Vector warp_forward(const std::vector<WarpLayer>& warp, Vector x);

/// Single covariance value from the scalar formulas. Reference route, kept
/// independent of the matrix builders.
double eval(const Kernel& k, const Vector& x, const Vector& y);

/// Pairwise eval over rows of X, plus jitter on the diagonal.
Matrix gram(const Kernel& k, const Matrix& X, double jitter = 0.0);

/// Pairwise eval between rows of X and rows of Z.
Matrix cross(const Kernel& k, const Matrix& X, const Matrix& Z);

// ---- Differentiable route ----

/// Kernel with parameters bound onto a tape. Variance and lengthscales are
/// constrained values (softplus already applied to their raw leaves).
struct KernelVars {
    KernelVariant variant;
    ad::Var variance;
    ad::Var lengthscales;  // column vector, size 1 or input dim
    std::vector<KernelVars> children;
    std::vector<std::pair<ad::Var, ad::Var>> warp;  // (W, b) per layer, b as column
};

/// Names and raw (unconstrained) values of every trainable tensor in the
/// kernel, in a fixed order. Variances and lengthscales are stored through
/// the inverse softplus; warp weights are stored as-is.
std::vector<std::pair<std::string, Matrix>> kernel_raw_params(const Kernel& k,
                                                              const std::string& prefix);

using RawParamFn = std::function<ad::Var(const std::string&)>;

/// Binds the kernel's parameters through lookup (which must return the raw
/// tensors named by kernel_raw_params) and applies the positivity transforms.
KernelVars bind_kernel(ad::Tape& tape, const Kernel& k, const std::string& prefix,
                       const RawParamFn& lookup);

/// Binds the kernel's current values as constants.
KernelVars bind_kernel_const(ad::Tape& tape, const Kernel& k);

/// Copies raw tensors (as named by kernel_raw_params) back into a Kernel.
Kernel kernel_from_raw(const Kernel& structure, const std::string& prefix,
                       const std::function<Matrix(const std::string&)>& raw);

/// Covariance between rows of X and rows of Z.
ad::Var cross_var(ad::Tape& tape, const KernelVars& k, const ad::Var& X, const ad::Var& Z);

/// Symmetrized gram of rows of X with jitter added to the diagonal.
ad::Var gram_var(ad::Tape& tape, const KernelVars& k, const ad::Var& X, double jitter);

/// k(x, x) as a 1x1 graph value (sum of leaf variances).
ad::Var total_variance_var(ad::Tape& tape, const KernelVars& k);

}  // namespace gpssm

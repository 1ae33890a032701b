#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

namespace gpssm::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

/// Handle to a node on a Tape. Cheap to copy; owns nothing.
class Var {
public:
    Var() = default;

    const Matrix& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    double scalar() const;

    Tape* tape() const { return tape_; }
    int index() const { return index_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, int index) : tape_(tape), index_(index) {}

    Tape* tape_ = nullptr;
    int index_ = -1;
};

/// Record of a matrix-valued computation for reverse-mode differentiation.
/// Nodes are appended in evaluation order; backward() visits them in reverse,
/// each pulling its output adjoint and accumulating into its parents.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Node with no gradient tracking (data, fixed coefficients).
    Var constant(Matrix value);
    Var constant(double value) { return constant(Matrix::Constant(1, 1, value)); }

    /// Differentiable input; its gradient is available after backward().
    Var leaf(Matrix value);

    /// Runs reverse accumulation from a scalar root. Clears previous adjoints.
    void backward(const Var& root);

    /// Gradient of the last backward() root w.r.t. a node; zeros if the node
    /// does not influence the root.
    Matrix grad(const Var& v) const;

    /// Drops all nodes, keeping allocated capacity.
    void reset();

    std::size_t size() const { return nodes_.size(); }

    // -- Internals used by the op implementations.

    using Pull = std::function<void(Tape&)>;

    Var emit(Matrix value, bool requires_grad);
    void set_pull(int index, Pull pull) { nodes_[index].pull = std::move(pull); }
    const Matrix& value_of(int index) const { return nodes_[index].value; }
    bool requires_grad(int index) const { return nodes_[index].requires_grad; }

    /// Output adjoint of a node (zero-initialised on first access).
    Matrix& adjoint(int index);

    /// Accumulates into a parent's adjoint, skipping non-differentiable nodes.
    void accumulate(int index, const Matrix& contribution);

private:
    struct Node {
        Matrix value;
        Matrix adj;
        Pull pull;           // empty for leaves and constants
        bool requires_grad = false;
        bool touched = false;
    };

    std::vector<Node> nodes_;
};

// ---- Arithmetic ----
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator-(const Var& a);
Var operator*(const Var& a, const Var& b);  ///< matrix product
Var scale(double c, const Var& a);
Var shift(const Var& a, double c);          ///< element-wise a + c
Var scale_by(const Var& s, const Var& a);   ///< 1x1 s times matrix a
Var transpose(const Var& a);
Var symmetrize(const Var& a);               ///< (a + a^T) / 2

// ---- Element-wise ----
Var cwise_mul(const Var& a, const Var& b);
Var cwise_inv(const Var& a);
Var cwise_exp(const Var& a);
Var cwise_log(const Var& a);
Var cwise_sqrt(const Var& a);   ///< negative inputs clamp to 0; derivative 0 there
Var cwise_square(const Var& a);
Var cwise_tanh(const Var& a);
Var cwise_sigmoid(const Var& a);
Var cwise_softplus(const Var& a);
Var cwise_max(const Var& a, double floor);  ///< derivative 0 where a <= floor
Var cwise_acos_clamped(const Var& a);       ///< clamps to [-1,1]; derivative 0 at the clamp

// ---- Reductions and shape ----
Var sum(const Var& a);                       ///< 1x1
Var rowwise_sum(const Var& a);               ///< n x 1
Var colwise_sum(const Var& a);               ///< 1 x m
Var diagonal(const Var& a);                  ///< n x 1 from square a
Var diag_matrix(const Var& v);               ///< n x 1 -> n x n
Var block(const Var& a, Eigen::Index i, Eigen::Index j, Eigen::Index rows, Eigen::Index cols);
Var hstack(const Var& a, const Var& b);
Var vstack(const Var& a, const Var& b);
Var stack_rows(const std::vector<Var>& rows);             ///< k rows of 1 x m -> k x m
Var reshape_rows(const Var& v, Eigen::Index rows, Eigen::Index cols);  ///< n x 1 -> rows x cols, row-major fill

// ---- Structured ----
/// Lower triangle of a square raw matrix with softplus applied to the diagonal.
Var tril_softplus_diag(const Var& raw);
/// Packs a d(d+1)/2 vector (row-major over the lower triangle) into a d x d
/// lower-triangular matrix with softplus applied to the diagonal.
Var pack_tril_softplus(const Var& v, Eigen::Index d);
/// Cosine of the angle between each row of X and each row of Z; rows with zero
/// norm produce cosine 1 with zero derivative.
Var cosine_similarity(const Var& X, const Var& Z);
/// Squared Euclidean distance between each row of X and each row of Z,
/// computed without cancellation so identical rows give exactly zero.
Var pairwise_sqdist(const Var& X, const Var& Z);

// ---- Factorizations ----
/// Lower Cholesky factor of a symmetric positive-definite input; throws
/// NumericalError otherwise. The gradient uses the symmetric convention, so
/// feed it symmetrize()d inputs to keep finite differences consistent.
Var cholesky(const Var& a);
Var trisolve_lower(const Var& L, const Var& B);    ///< L^{-1} B
Var trisolve_lower_t(const Var& L, const Var& B);  ///< L^{-T} B

/// Numerically stable softplus and its inverse, shared by parameter transforms.
double softplus(double x);
double softplus_inverse(double y);

}  // namespace gpssm::ad

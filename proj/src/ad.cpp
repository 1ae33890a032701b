#include "gpssm/ad.hpp"

#include <cmath>
#include <utility>

#include "gpssm/errors.hpp"

namespace gpssm::ad {

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double softplus_inverse(double y) {
    if (y <= 0.0) throw InputError("softplus_inverse: argument must be positive");
    return y > 30.0 ? y : std::log(std::expm1(y));
}

namespace {

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw InputError(std::string(op) + ": shape mismatch");
}

/// Emits a node and, when gradients are required, registers its pull. The
/// callback receives the tape, the node's output adjoint, and its index so it
/// can read the forward value without recomputing it.
template <typename PullFn>
Var make_node(Tape& t, Matrix value, bool requires_grad, PullFn&& fn) {
    Var out = t.emit(std::move(value), requires_grad);
    if (requires_grad) {
        t.set_pull(out.index(),
                   [fn = std::forward<PullFn>(fn), io = out.index()](Tape& tape) {
                       fn(tape, tape.adjoint(io), io);
                   });
    }
    return out;
}

}  // namespace

const Matrix& Var::value() const { return tape_->value_of(index_); }

double Var::scalar() const {
    const Matrix& v = value();
    if (v.size() != 1) throw InputError("Var::scalar: not 1x1");
    return v(0, 0);
}

Var Tape::emit(Matrix value, bool requires_grad) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::constant(Matrix value) { return emit(std::move(value), false); }

Var Tape::leaf(Matrix value) { return emit(std::move(value), true); }

Matrix& Tape::adjoint(int index) {
    Node& node = nodes_[index];
    if (!node.touched) {
        node.adj = Matrix::Zero(node.value.rows(), node.value.cols());
        node.touched = true;
    }
    return node.adj;
}

void Tape::accumulate(int index, const Matrix& contribution) {
    if (!nodes_[index].requires_grad) return;
    adjoint(index) += contribution;
}

void Tape::backward(const Var& root) {
    if (root.tape() != this) throw InputError("Tape::backward: root from another tape");
    if (nodes_[root.index()].value.size() != 1)
        throw InputError("Tape::backward: root must be scalar");
    for (Node& node : nodes_) node.touched = false;
    adjoint(root.index())(0, 0) = 1.0;
    for (int i = root.index(); i >= 0; --i) {
        Node& node = nodes_[i];
        if (node.touched && node.pull) node.pull(*this);
    }
}

Matrix Tape::grad(const Var& v) const {
    const Node& node = nodes_[v.index()];
    if (!node.touched) return Matrix::Zero(node.value.rows(), node.value.cols());
    return node.adj;
}

void Tape::reset() { nodes_.clear(); }

Var operator+(const Var& a, const Var& b) {
    check_same_shape(a, b, "operator+");
    Tape& t = *a.tape();
    bool req = t.requires_grad(a.index()) || t.requires_grad(b.index());
    return make_node(t, a.value() + b.value(), req,
                     [ia = a.index(), ib = b.index()](Tape& t, const Matrix& g, int) {
                         t.accumulate(ia, g);
                         t.accumulate(ib, g);
                     });
}

Var operator-(const Var& a, const Var& b) {
    check_same_shape(a, b, "operator-");
    Tape& t = *a.tape();
    bool req = t.requires_grad(a.index()) || t.requires_grad(b.index());
    return make_node(t, a.value() - b.value(), req,
                     [ia = a.index(), ib = b.index()](Tape& t, const Matrix& g, int) {
                         t.accumulate(ia, g);
                         t.accumulate(ib, -g);
                     });
}

Var operator-(const Var& a) {
    Tape& t = *a.tape();
    return make_node(t, -a.value(), t.requires_grad(a.index()),
                     [ia = a.index()](Tape& t, const Matrix& g, int) { t.accumulate(ia, -g); });
}

Var operator*(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) throw InputError("operator*: inner dimensions differ");
    Tape& t = *a.tape();
    bool req = t.requires_grad(a.index()) || t.requires_grad(b.index());
    return make_node(t, a.value() * b.value(), req,
                     [ia = a.index(), ib = b.index()](Tape& t, const Matrix& g, int) {
                         t.accumulate(ia, g * t.value_of(ib).transpose());
                         t.accumulate(ib, t.value_of(ia).transpose() * g);
                     });
}

Var scale(double c, const Var& a) {
    Tape& t = *a.tape();
    return make_node(t, c * a.value(), t.requires_grad(a.index()),
                     [ia = a.index(), c](Tape& t, const Matrix& g, int) {
                         t.accumulate(ia, c * g);
                     });
}

Var shift(const Var& a, double c) {
    Tape& t = *a.tape();
    return make_node(t, Matrix((a.value().array() + c).matrix()), t.requires_grad(a.index()),
                     [ia = a.index()](Tape& t, const Matrix& g, int) { t.accumulate(ia, g); });
}

Var scale_by(const Var& s, const Var& a) {
    if (s.value().size() != 1) throw InputError("scale_by: scale must be 1x1");
    Tape& t = *a.tape();
    bool req = t.requires_grad(s.index()) || t.requires_grad(a.index());
    return make_node(t, s.value()(0, 0) * a.value(), req,
                     [is = s.index(), ia = a.index()](Tape& t, const Matrix& g, int) {
                         t.accumulate(ia, t.value_of(is)(0, 0) * g);
                         Matrix gs(1, 1);
                         gs(0, 0) = (g.array() * t.value_of(ia).array()).sum();
                         t.accumulate(is, gs);
                     });
}

Var transpose(const Var& a) {
    Tape& t = *a.tape();
    return make_node(t, a.value().transpose(), t.requires_grad(a.index()),
                     [ia = a.index()](Tape& t, const Matrix& g, int) {
                         t.accumulate(ia, g.transpose());
                     });
}

Var symmetrize(const Var& a) {
    if (a.rows() != a.cols()) throw InputError("symmetrize: matrix must be square");
    Tape& t = *a.tape();
    return make_node(t, 0.5 * (a.value() + a.value().transpose()), t.requires_grad(a.index()),
                     [ia = a.index()](Tape& t, const Matrix& g, int) {
                         t.accumulate(ia, 0.5 * (g + g.transpose()));
                     });
}

Var cwise_mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "cwise_mul");
    Tape& t = *a.tape();
    bool req = t.requires_grad(a.index()) || t.requires_grad(b.index());
    return make_node(t, a.value().cwiseProduct(b.value()), req,
                     [ia = a.index(), ib = b.index()](Tape& t, const Matrix& g, int) {
                         t.accumulate(ia, g.cwiseProduct(t.value_of(ib)));
                         t.accumulate(ib, g.cwiseProduct(t.value_of(ia)));
                     });
}

Var cwise_inv(const Var& a) {
    Tape& t = *a.tape();
    return make_node(t, a.value().cwiseInverse(), t.requires_grad(a.index()),
                     [ia = a.index()](Tape& t, const Matrix& g, int io) {
                         const Matrix& inv = t.value_of(io);
                         t.accumulate(ia, -g.cwiseProduct(inv).cwiseProduct(inv));
                     });
}

Var cwise_exp(const Var& a) {
    Tape& t = *a.tape();
    return make_node(t, Matrix(a.value().array().exp().matrix()), t.requires_grad(a.index()),
                     [ia = a.index()](Tape& t, const Matrix& g, int io) {
                         t.accumulate(ia, g.cwiseProduct(t.value_of(io)));
                     });
}

Var cwise_log(const Var& a) {
    Tape& t = *a.tape();
    return make_node(t, Matrix(a.value().array().log().matrix()), t.requires_grad(a.index()),
                     [ia = a.index()](Tape& t, const Matrix& g, int) {
                         t.accumulate(ia, g.cwiseQuotient(t.value_of(ia)));
                     });
}

Var cwise_sqrt(const Var& a) {
    Tape& t = *a.tape();
    return make_node(t, Matrix(a.value().array().max(0.0).sqrt().matrix()), t.requires_grad(a.index()),
                     [ia = a.index()](Tape& t, const Matrix& g, int io) {
                         const Eigen::ArrayXXd out = t.value_of(io).array();
                         Eigen::ArrayXXd contrib =
                             (out > 0.0).select(0.5 * g.array() / out.max(1e-300), 0.0);
                         t.accumulate(ia, contrib.matrix());
                     });
}

Var cwise_square(const Var& a) {
    Tape& t = *a.tape();
    return make_node(t, Matrix(a.value().array().square().matrix()), t.requires_grad(a.index()),
                     [ia = a.index()](Tape& t, const Matrix& g, int) {
                         t.accumulate(ia, 2.0 * g.cwiseProduct(t.value_of(ia)));
                     });
}

Var cwise_tanh(const Var& a) {
    Tape& t = *a.tape();
    return make_node(t, Matrix(a.value().array().tanh().matrix()), t.requires_grad(a.index()),
                     [ia = a.index()](Tape& t, const Matrix& g, int io) {
                         const Eigen::ArrayXXd out = t.value_of(io).array();
                         t.accumulate(ia, (g.array() * (1.0 - out.square())).matrix());
                     });
}

Var cwise_sigmoid(const Var& a) {
    Tape& t = *a.tape();
    Matrix value = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
    return make_node(t, std::move(value), t.requires_grad(a.index()),
                     [ia = a.index()](Tape& t, const Matrix& g, int io) {
                         const Eigen::ArrayXXd out = t.value_of(io).array();
                         t.accumulate(ia, (g.array() * out * (1.0 - out)).matrix());
                     });
}

Var cwise_softplus(const Var& a) {
    Tape& t = *a.tape();
    Matrix value = a.value().unaryExpr([](double x) { return softplus(x); });
    return make_node(t, std::move(value), t.requires_grad(a.index()),
                     [ia = a.index()](Tape& t, const Matrix& g, int) {
                         Eigen::ArrayXXd s = 1.0 / (1.0 + (-t.value_of(ia).array()).exp());
                         t.accumulate(ia, (g.array() * s).matrix());
                     });
}

Var cwise_max(const Var& a, double floor) {
    Tape& t = *a.tape();
    return make_node(t, Matrix(a.value().array().max(floor).matrix()), t.requires_grad(a.index()),
                     [ia = a.index(), floor](Tape& t, const Matrix& g, int) {
                         Eigen::ArrayXXd pass =
                             (t.value_of(ia).array() > floor).cast<double>();
                         t.accumulate(ia, (g.array() * pass).matrix());
                     });
}

Var cwise_acos_clamped(const Var& a) {
    Tape& t = *a.tape();
    Matrix value = a.value().array().min(1.0).max(-1.0).acos().matrix();
    return make_node(t, std::move(value), t.requires_grad(a.index()),
                     [ia = a.index()](Tape& t, const Matrix& g, int) {
                         const Eigen::ArrayXXd x = t.value_of(ia).array();
                         Eigen::ArrayXXd inside = (x.abs() < 1.0).cast<double>();
                         Eigen::ArrayXXd denom =
                             (1.0 - x.min(1.0).max(-1.0).square()).sqrt().max(1e-300);
                         t.accumulate(ia, (-g.array() * inside / denom).matrix());
                     });
}

Var sum(const Var& a) {
    Tape& t = *a.tape();
    return make_node(t, Matrix::Constant(1, 1, a.value().sum()), t.requires_grad(a.index()),
                     [ia = a.index(), r = a.rows(), c = a.cols()](Tape& t, const Matrix& g, int) {
                         t.accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
                     });
}

Var rowwise_sum(const Var& a) {
    Tape& t = *a.tape();
    return make_node(t, a.value().rowwise().sum(), t.requires_grad(a.index()),
                     [ia = a.index(), c = a.cols()](Tape& t, const Matrix& g, int) {
                         t.accumulate(ia, g.replicate(1, c));
                     });
}

Var colwise_sum(const Var& a) {
    Tape& t = *a.tape();
    return make_node(t, a.value().colwise().sum(), t.requires_grad(a.index()),
                     [ia = a.index(), r = a.rows()](Tape& t, const Matrix& g, int) {
                         t.accumulate(ia, g.replicate(r, 1));
                     });
}

Var diagonal(const Var& a) {
    if (a.rows() != a.cols()) throw InputError("diagonal: matrix must be square");
    Tape& t = *a.tape();
    return make_node(t, a.value().diagonal(), t.requires_grad(a.index()),
                     [ia = a.index(), n = a.rows()](Tape& t, const Matrix& g, int) {
                         Matrix contrib = Matrix::Zero(n, n);
                         contrib.diagonal() = g.col(0);
                         t.accumulate(ia, contrib);
                     });
}

Var diag_matrix(const Var& v) {
    if (v.cols() != 1) throw InputError("diag_matrix: expected a column vector");
    Tape& t = *v.tape();
    Matrix value = Matrix::Zero(v.rows(), v.rows());
    value.diagonal() = v.value().col(0);
    return make_node(t, std::move(value), t.requires_grad(v.index()),
                     [iv = v.index()](Tape& t, const Matrix& g, int) {
                         t.accumulate(iv, g.diagonal());
                     });
}

Var block(const Var& a, Eigen::Index i, Eigen::Index j, Eigen::Index rows, Eigen::Index cols) {
    if (i < 0 || j < 0 || i + rows > a.rows() || j + cols > a.cols())
        throw InputError("block: out of range");
    Tape& t = *a.tape();
    return make_node(t, a.value().block(i, j, rows, cols), t.requires_grad(a.index()),
                     [ia = a.index(), i, j, rows, cols, ar = a.rows(), ac = a.cols()](
                         Tape& t, const Matrix& g, int) {
                         Matrix contrib = Matrix::Zero(ar, ac);
                         contrib.block(i, j, rows, cols) = g;
                         t.accumulate(ia, contrib);
                     });
}

Var hstack(const Var& a, const Var& b) {
    if (a.rows() != b.rows()) throw InputError("hstack: row counts differ");
    Tape& t = *a.tape();
    Matrix value(a.rows(), a.cols() + b.cols());
    value << a.value(), b.value();
    bool req = t.requires_grad(a.index()) || t.requires_grad(b.index());
    return make_node(t, std::move(value), req,
                     [ia = a.index(), ib = b.index(), ca = a.cols()](Tape& t, const Matrix& g,
                                                                     int) {
                         t.accumulate(ia, g.leftCols(ca));
                         t.accumulate(ib, g.rightCols(g.cols() - ca));
                     });
}

Var vstack(const Var& a, const Var& b) {
    if (a.cols() != b.cols()) throw InputError("vstack: column counts differ");
    Tape& t = *a.tape();
    Matrix value(a.rows() + b.rows(), a.cols());
    value << a.value(), b.value();
    bool req = t.requires_grad(a.index()) || t.requires_grad(b.index());
    return make_node(t, std::move(value), req,
                     [ia = a.index(), ib = b.index(), ra = a.rows()](Tape& t, const Matrix& g,
                                                                     int) {
                         t.accumulate(ia, g.topRows(ra));
                         t.accumulate(ib, g.bottomRows(g.rows() - ra));
                     });
}

Var stack_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw InputError("stack_rows: no rows");
    Tape& t = *rows.front().tape();
    const Eigen::Index m = rows.front().cols();
    Matrix value(static_cast<Eigen::Index>(rows.size()), m);
    bool req = false;
    std::vector<int> indices;
    indices.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].rows() != 1 || rows[i].cols() != m)
            throw InputError("stack_rows: rows must all be 1 x m");
        value.row(static_cast<Eigen::Index>(i)) = rows[i].value();
        req = req || t.requires_grad(rows[i].index());
        indices.push_back(rows[i].index());
    }
    return make_node(t, std::move(value), req,
                     [indices = std::move(indices)](Tape& t, const Matrix& g, int) {
                         for (std::size_t i = 0; i < indices.size(); ++i)
                             t.accumulate(indices[i], g.row(static_cast<Eigen::Index>(i)));
                     });
}

Var reshape_rows(const Var& v, Eigen::Index rows, Eigen::Index cols) {
    if (v.cols() != 1 || v.rows() != rows * cols)
        throw InputError("reshape_rows: expected a (rows*cols) x 1 vector");
    Tape& t = *v.tape();
    Matrix value(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) value(i, j) = v.value()(i * cols + j, 0);
    return make_node(t, std::move(value), t.requires_grad(v.index()),
                     [iv = v.index(), rows, cols](Tape& t, const Matrix& g, int) {
                         Matrix contrib(rows * cols, 1);
                         for (Eigen::Index i = 0; i < rows; ++i)
                             for (Eigen::Index j = 0; j < cols; ++j)
                                 contrib(i * cols + j, 0) = g(i, j);
                         t.accumulate(iv, contrib);
                     });
}

Var tril_softplus_diag(const Var& raw) {
    if (raw.rows() != raw.cols()) throw InputError("tril_softplus_diag: matrix must be square");
    Tape& t = *raw.tape();
    const Eigen::Index n = raw.rows();
    Matrix value = raw.value().triangularView<Eigen::StrictlyLower>();
    for (Eigen::Index i = 0; i < n; ++i) value(i, i) = softplus(raw.value()(i, i));
    return make_node(t, std::move(value), t.requires_grad(raw.index()),
                     [ir = raw.index(), n](Tape& t, const Matrix& g, int) {
                         Matrix contrib = g.triangularView<Eigen::StrictlyLower>();
                         const Matrix& x = t.value_of(ir);
                         for (Eigen::Index i = 0; i < n; ++i)
                             contrib(i, i) = g(i, i) / (1.0 + std::exp(-x(i, i)));
                         t.accumulate(ir, contrib);
                     });
}

Var pack_tril_softplus(const Var& v, Eigen::Index d) {
    if (v.cols() != 1 || v.rows() != d * (d + 1) / 2)
        throw InputError("pack_tril_softplus: expected a d(d+1)/2 x 1 vector");
    Tape& t = *v.tape();
    Matrix value = Matrix::Zero(d, d);
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < d; ++i)
        for (Eigen::Index j = 0; j <= i; ++j, ++k)
            value(i, j) = (i == j) ? softplus(v.value()(k, 0)) : v.value()(k, 0);
    return make_node(t, std::move(value), t.requires_grad(v.index()),
                     [iv = v.index(), d](Tape& t, const Matrix& g, int) {
                         const Matrix& x = t.value_of(iv);
                         Matrix contrib(d * (d + 1) / 2, 1);
                         Eigen::Index k = 0;
                         for (Eigen::Index i = 0; i < d; ++i)
                             for (Eigen::Index j = 0; j <= i; ++j, ++k)
                                 contrib(k, 0) = (i == j)
                                                     ? g(i, j) / (1.0 + std::exp(-x(k, 0)))
                                                     : g(i, j);
                         t.accumulate(iv, contrib);
                     });
}

Var cosine_similarity(const Var& X, const Var& Z) {
    if (X.cols() != Z.cols()) throw InputError("cosine_similarity: feature dimensions differ");
    Tape& t = *X.tape();
    const Matrix& x = X.value();
    const Matrix& z = Z.value();
    Eigen::VectorXd nx = x.rowwise().norm();
    Eigen::VectorXd nz = z.rowwise().norm();
    Matrix value = x * z.transpose();
    for (Eigen::Index i = 0; i < value.rows(); ++i)
        for (Eigen::Index j = 0; j < value.cols(); ++j) {
            // Identical rows must give exactly 1; acos would amplify the last
            // ulp of dot/(|x||z|) into an O(1e-8) error otherwise.
            if (nx(i) == 0.0 || nz(j) == 0.0 || x.row(i) == z.row(j))
                value(i, j) = 1.0;
            else
                value(i, j) /= nx(i) * nz(j);
        }
    bool req = t.requires_grad(X.index()) || t.requires_grad(Z.index());
    return make_node(
        t, std::move(value), req,
        [ix = X.index(), iz = Z.index()](Tape& t, const Matrix& g, int) {
            const Matrix& x = t.value_of(ix);
            const Matrix& z = t.value_of(iz);
            Eigen::VectorXd nx = x.rowwise().norm();
            Eigen::VectorXd nz = z.rowwise().norm();
            Matrix gx = Matrix::Zero(x.rows(), x.cols());
            Matrix gz = Matrix::Zero(z.rows(), z.cols());
            for (Eigen::Index i = 0; i < x.rows(); ++i) {
                if (nx(i) == 0.0) continue;
                for (Eigen::Index j = 0; j < z.rows(); ++j) {
                    if (nz(j) == 0.0 || g(i, j) == 0.0 || x.row(i) == z.row(j)) continue;
                    const double dot = x.row(i).dot(z.row(j));
                    const double c = dot / (nx(i) * nz(j));
                    gx.row(i) += g(i, j) * (z.row(j) / (nx(i) * nz(j)) -
                                            c * x.row(i) / (nx(i) * nx(i)));
                    gz.row(j) += g(i, j) * (x.row(i) / (nx(i) * nz(j)) -
                                            c * z.row(j) / (nz(j) * nz(j)));
                }
            }
            t.accumulate(ix, gx);
            t.accumulate(iz, gz);
        });
}

Var pairwise_sqdist(const Var& X, const Var& Z) {
    if (X.cols() != Z.cols()) throw InputError("pairwise_sqdist: feature dimensions differ");
    Tape& t = *X.tape();
    const Matrix& x = X.value();
    const Matrix& z = Z.value();
    Matrix value(x.rows(), z.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = 0; j < z.rows(); ++j)
            value(i, j) = (x.row(i) - z.row(j)).squaredNorm();
    bool req = t.requires_grad(X.index()) || t.requires_grad(Z.index());
    return make_node(t, std::move(value), req,
                     [ix = X.index(), iz = Z.index()](Tape& t, const Matrix& g, int) {
                         const Matrix& x = t.value_of(ix);
                         const Matrix& z = t.value_of(iz);
                         Matrix gx = Matrix::Zero(x.rows(), x.cols());
                         Matrix gz = Matrix::Zero(z.rows(), z.cols());
                         for (Eigen::Index i = 0; i < x.rows(); ++i)
                             for (Eigen::Index j = 0; j < z.rows(); ++j) {
                                 if (g(i, j) == 0.0) continue;
                                 Eigen::RowVectorXd diff =
                                     2.0 * g(i, j) * (x.row(i) - z.row(j));
                                 gx.row(i) += diff;
                                 gz.row(j) -= diff;
                             }
                         t.accumulate(ix, gx);
                         t.accumulate(iz, gz);
                     });
}

Var cholesky(const Var& a) {
    if (a.rows() != a.cols()) throw InputError("cholesky: matrix must be square");
    Tape& t = *a.tape();
    Eigen::LLT<Matrix> llt(a.value());
    if (llt.info() != Eigen::Success)
        throw NumericalError("cholesky: matrix is not positive definite");
    Matrix L = llt.matrixL();
    return make_node(t, std::move(L), t.requires_grad(a.index()),
                     [ia = a.index()](Tape& t, const Matrix& g, int io) {
                         const Matrix& L = t.value_of(io);
                         Matrix phi = (L.transpose() * g).triangularView<Eigen::Lower>();
                         phi.diagonal() *= 0.5;
                         Matrix s = phi + phi.transpose();
                         Matrix y = L.transpose().triangularView<Eigen::Upper>().solve(s);
                         Matrix contrib =
                             0.5 * L.transpose()
                                       .triangularView<Eigen::Upper>()
                                       .solve(y.transpose())
                                       .transpose();
                         t.accumulate(ia, contrib);
                     });
}

Var trisolve_lower(const Var& L, const Var& B) {
    if (L.rows() != L.cols() || L.rows() != B.rows())
        throw InputError("trisolve_lower: shape mismatch");
    Tape& t = *L.tape();
    Matrix X = L.value().triangularView<Eigen::Lower>().solve(B.value());
    bool req = t.requires_grad(L.index()) || t.requires_grad(B.index());
    return make_node(t, std::move(X), req,
                     [il = L.index(), ib = B.index()](Tape& t, const Matrix& g, int io) {
                         const Matrix& Lv = t.value_of(il);
                         const Matrix& Xv = t.value_of(io);
                         Matrix G = Lv.transpose().triangularView<Eigen::Upper>().solve(g);
                         t.accumulate(ib, G);
                         Matrix gl = -(G * Xv.transpose());
                         t.accumulate(il, Matrix(gl.triangularView<Eigen::Lower>()));
                     });
}

Var trisolve_lower_t(const Var& L, const Var& B) {
    if (L.rows() != L.cols() || L.rows() != B.rows())
        throw InputError("trisolve_lower_t: shape mismatch");
    Tape& t = *L.tape();
    Matrix X = L.value().transpose().triangularView<Eigen::Upper>().solve(B.value());
    bool req = t.requires_grad(L.index()) || t.requires_grad(B.index());
    return make_node(t, std::move(X), req,
                     [il = L.index(), ib = B.index()](Tape& t, const Matrix& g, int io) {
                         const Matrix& Lv = t.value_of(il);
                         const Matrix& Xv = t.value_of(io);
                         Matrix G = Lv.triangularView<Eigen::Lower>().solve(g);
                         t.accumulate(ib, G);
                         Matrix gl = -(Xv * G.transpose());
                         t.accumulate(il, Matrix(gl.triangularView<Eigen::Lower>()));
                     });
}

}  // namespace gpssm::ad

#include "gpssm/recognition.hpp"

#include <cmath>

#include "gpssm/errors.hpp"

namespace gpssm {

namespace {

Vector sigmoid(const Vector& v) { return (1.0 / (1.0 + (-v.array()).exp())).matrix(); }

/// Orthogonal matrix from the QR of a Gaussian draw, sign-fixed so the result
/// is unique for a given draw.
Matrix orthogonal(Rng& rng, Eigen::Index n) {
    Matrix g = rng.normal_matrix(n, n);
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ();
    Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Eigen::Index i = 0; i < n; ++i)
        if (r(i, i) < 0.0) q.col(i) = -q.col(i);
    return q;
}

Matrix small_uniform(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
    Matrix out(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = rng.uniform(-0.1, 0.1);
    return out;
}

GruCell init_cell(Eigen::Index input_dim, Eigen::Index hidden, Rng& rng) {
    GruCell cell;
    cell.Wz = small_uniform(rng, hidden, input_dim);
    cell.Wr = small_uniform(rng, hidden, input_dim);
    cell.Wh = small_uniform(rng, hidden, input_dim);
    cell.Uz = orthogonal(rng, hidden);
    cell.Ur = orthogonal(rng, hidden);
    cell.Uh = orthogonal(rng, hidden);
    cell.bz = Vector::Zero(hidden);
    cell.br = Vector::Zero(hidden);
    cell.bh = Vector::Zero(hidden);
    return cell;
}

void check_cell(const GruCell& cell, Eigen::Index input_dim, Eigen::Index hidden,
                const char* name) {
    auto bad = [&](bool cond) {
        if (cond) throw InputError(std::string("RecognitionNet: ") + name + " has wrong shapes");
    };
    bad(cell.Wz.rows() != hidden || cell.Wz.cols() != input_dim);
    bad(cell.Wr.rows() != hidden || cell.Wr.cols() != input_dim);
    bad(cell.Wh.rows() != hidden || cell.Wh.cols() != input_dim);
    bad(cell.Uz.rows() != hidden || cell.Uz.cols() != hidden);
    bad(cell.Ur.rows() != hidden || cell.Ur.cols() != hidden);
    bad(cell.Uh.rows() != hidden || cell.Uh.cols() != hidden);
    bad(cell.bz.size() != hidden || cell.br.size() != hidden || cell.bh.size() != hidden);
}

}  // namespace

RecognitionNet init_recognition(Eigen::Index input_dim, Eigen::Index hidden_dim,
                                Eigen::Index state_dim, Rng& rng) {
    if (input_dim < 1 || hidden_dim < 1 || state_dim < 1)
        throw InputError("init_recognition: dimensions must be positive");
    RecognitionNet net;
    net.input_dim = input_dim;
    net.hidden_dim = hidden_dim;
    net.state_dim = state_dim;
    net.fwd = init_cell(input_dim, hidden_dim, rng);
    net.bwd = init_cell(input_dim, hidden_dim, rng);

    const Eigen::Index d = state_dim;
    const Eigen::Index tri = d * (d + 1) / 2;
    net.WA = small_uniform(rng, d * d, 2 * hidden_dim);
    net.WL = small_uniform(rng, tri, 2 * hidden_dim);
    net.Winit = small_uniform(rng, d + tri, hidden_dim);

    // Biases centre the heads at A = I and L = 0.1 I (and L0 at softplus(0) I).
    net.bA = Vector::Zero(d * d);
    for (Eigen::Index i = 0; i < d; ++i) net.bA(i * d + i) = 1.0;
    net.bL = Vector::Zero(tri);
    const double raw_tenth = ad::softplus_inverse(0.1);
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < d; ++i)
        for (Eigen::Index j = 0; j <= i; ++j, ++k)
            if (i == j) net.bL(k) = raw_tenth;
    net.binit = Vector::Zero(d + tri);
    return net;
}

void validate(const RecognitionNet& net) {
    if (net.input_dim < 1 || net.hidden_dim < 1 || net.state_dim < 1)
        throw InputError("RecognitionNet: dimensions must be positive");
    check_cell(net.fwd, net.input_dim, net.hidden_dim, "fwd");
    check_cell(net.bwd, net.input_dim, net.hidden_dim, "bwd");
    const Eigen::Index d = net.state_dim;
    const Eigen::Index tri = d * (d + 1) / 2;
    if (net.WA.rows() != d * d || net.WA.cols() != 2 * net.hidden_dim ||
        net.bA.size() != d * d)
        throw InputError("RecognitionNet: transition head has wrong shapes");
    if (net.WL.rows() != tri || net.WL.cols() != 2 * net.hidden_dim || net.bL.size() != tri)
        throw InputError("RecognitionNet: noise head has wrong shapes");
    if (net.Winit.rows() != d + tri || net.Winit.cols() != net.hidden_dim ||
        net.binit.size() != d + tri)
        throw InputError("RecognitionNet: initial-state head has wrong shapes");
}

Vector gru_step(const GruCell& cell, const Vector& h, const Vector& input) {
    Vector z = sigmoid(cell.Wz * input + cell.Uz * h + cell.bz);
    Vector r = sigmoid(cell.Wr * input + cell.Ur * h + cell.br);
    Vector cand = (cell.Wh * input + cell.Uh * r.cwiseProduct(h) + cell.bh).array().tanh().matrix();
    return (1.0 - z.array()).matrix().cwiseProduct(h) + z.cwiseProduct(cand);
}

namespace {

Matrix pack_lower_softplus(const Vector& v, Eigen::Index d) {
    Matrix out = Matrix::Zero(d, d);
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < d; ++i)
        for (Eigen::Index j = 0; j <= i; ++j, ++k)
            out(i, j) = (i == j) ? ad::softplus(v(k)) : v(k);
    return out;
}

Matrix unpack_rows(const Vector& v, Eigen::Index d) {
    Matrix out(d, d);
    for (Eigen::Index i = 0; i < d; ++i)
        for (Eigen::Index j = 0; j < d; ++j) out(i, j) = v(i * d + j);
    return out;
}

}  // namespace

GaussMarkov encode(const RecognitionNet& net, const Matrix& inputs) {
    if (inputs.cols() != net.input_dim)
        throw InputError("encode: input width does not match the network");
    const Eigen::Index T = inputs.rows();
    if (T < 1) throw InputError("encode: need at least one observation");
    const Eigen::Index H = net.hidden_dim, d = net.state_dim;

    std::vector<Vector> hf(T), hb(T);
    Vector h = Vector::Zero(H);
    for (Eigen::Index t = 0; t < T; ++t) {
        h = gru_step(net.fwd, h, inputs.row(t).transpose());
        hf[t] = h;
    }
    h = Vector::Zero(H);
    for (Eigen::Index t = T - 1; t >= 0; --t) {
        h = gru_step(net.bwd, h, inputs.row(t).transpose());
        hb[t] = h;
    }

    GaussMarkov q;
    Vector init = net.Winit * hb[0] + net.binit;
    q.m0 = init.head(d);
    q.L0 = pack_lower_softplus(init.tail(d * (d + 1) / 2), d);
    for (Eigen::Index t = 0; t < T; ++t) {
        Vector joint(2 * H);
        joint << hf[t], hb[t];
        q.A.push_back(unpack_rows(net.WA * joint + net.bA, d));
        q.L.push_back(pack_lower_softplus(net.WL * joint + net.bL, d));
    }
    return q;
}

// ---- Differentiable route ----

namespace {

void collect_cell(const GruCell& cell, const std::string& prefix,
                  std::vector<std::pair<std::string, Matrix>>& out) {
    out.emplace_back(prefix + "Wz", cell.Wz);
    out.emplace_back(prefix + "Uz", cell.Uz);
    out.emplace_back(prefix + "bz", Matrix(cell.bz));
    out.emplace_back(prefix + "Wr", cell.Wr);
    out.emplace_back(prefix + "Ur", cell.Ur);
    out.emplace_back(prefix + "br", Matrix(cell.br));
    out.emplace_back(prefix + "Wh", cell.Wh);
    out.emplace_back(prefix + "Uh", cell.Uh);
    out.emplace_back(prefix + "bh", Matrix(cell.bh));
}

GruCellVars bind_cell(const std::string& prefix, const RawParamFn& lookup) {
    GruCellVars cell;
    cell.Wz = lookup(prefix + "Wz");
    cell.Uz = lookup(prefix + "Uz");
    cell.bz = lookup(prefix + "bz");
    cell.Wr = lookup(prefix + "Wr");
    cell.Ur = lookup(prefix + "Ur");
    cell.br = lookup(prefix + "br");
    cell.Wh = lookup(prefix + "Wh");
    cell.Uh = lookup(prefix + "Uh");
    cell.bh = lookup(prefix + "bh");
    return cell;
}

GruCell cell_from_raw(const std::string& prefix,
                      const std::function<Matrix(const std::string&)>& raw) {
    GruCell cell;
    cell.Wz = raw(prefix + "Wz");
    cell.Uz = raw(prefix + "Uz");
    cell.bz = raw(prefix + "bz");
    cell.Wr = raw(prefix + "Wr");
    cell.Ur = raw(prefix + "Ur");
    cell.br = raw(prefix + "br");
    cell.Wh = raw(prefix + "Wh");
    cell.Uh = raw(prefix + "Uh");
    cell.bh = raw(prefix + "bh");
    return cell;
}

}  // namespace

std::vector<std::pair<std::string, Matrix>> recognition_raw_params(const RecognitionNet& net,
                                                                   const std::string& prefix) {
    std::vector<std::pair<std::string, Matrix>> out;
    collect_cell(net.fwd, prefix + "fwd.", out);
    collect_cell(net.bwd, prefix + "bwd.", out);
    out.emplace_back(prefix + "head_A.W", net.WA);
    out.emplace_back(prefix + "head_A.b", Matrix(net.bA));
    out.emplace_back(prefix + "head_L.W", net.WL);
    out.emplace_back(prefix + "head_L.b", Matrix(net.bL));
    out.emplace_back(prefix + "head_init.W", net.Winit);
    out.emplace_back(prefix + "head_init.b", Matrix(net.binit));
    return out;
}

RecognitionVars bind_recognition(ad::Tape& tape, const RecognitionNet& net,
                                 const std::string& prefix, const RawParamFn& lookup) {
    RecognitionVars out;
    out.fwd = bind_cell(prefix + "fwd.", lookup);
    out.bwd = bind_cell(prefix + "bwd.", lookup);
    out.WA = lookup(prefix + "head_A.W");
    out.bA = lookup(prefix + "head_A.b");
    out.WL = lookup(prefix + "head_L.W");
    out.bL = lookup(prefix + "head_L.b");
    out.Winit = lookup(prefix + "head_init.W");
    out.binit = lookup(prefix + "head_init.b");
    out.state_dim = net.state_dim;
    return out;
}

RecognitionNet recognition_from_raw(const RecognitionNet& structure, const std::string& prefix,
                                    const std::function<Matrix(const std::string&)>& raw) {
    RecognitionNet out = structure;
    out.fwd = cell_from_raw(prefix + "fwd.", raw);
    out.bwd = cell_from_raw(prefix + "bwd.", raw);
    out.WA = raw(prefix + "head_A.W");
    out.bA = raw(prefix + "head_A.b");
    out.WL = raw(prefix + "head_L.W");
    out.bL = raw(prefix + "head_L.b");
    out.Winit = raw(prefix + "head_init.W");
    out.binit = raw(prefix + "head_init.b");
    return out;
}

ad::Var gru_step_var(const GruCellVars& cell, const ad::Var& h, const ad::Var& input) {
    ad::Var z = ad::cwise_sigmoid(cell.Wz * input + cell.Uz * h + cell.bz);
    ad::Var r = ad::cwise_sigmoid(cell.Wr * input + cell.Ur * h + cell.br);
    ad::Var cand = ad::cwise_tanh(cell.Wh * input + cell.Uh * ad::cwise_mul(r, h) + cell.bh);
    return h + ad::cwise_mul(z, cand - h);  // (1 - z) h + z cand
}

GaussMarkovVars encode_var(ad::Tape& tape, const RecognitionVars& net, const Matrix& inputs) {
    const Eigen::Index T = inputs.rows();
    if (T < 1) throw InputError("encode_var: need at least one observation");
    const Eigen::Index H = net.fwd.Uz.rows();
    const Eigen::Index d = net.state_dim;

    std::vector<ad::Var> in_cols;
    in_cols.reserve(T);
    for (Eigen::Index t = 0; t < T; ++t)
        in_cols.push_back(tape.constant(Matrix(inputs.row(t).transpose())));

    std::vector<ad::Var> hf(T), hb(T);
    ad::Var h = tape.constant(Matrix(Matrix::Zero(H, 1)));
    for (Eigen::Index t = 0; t < T; ++t) {
        h = gru_step_var(net.fwd, h, in_cols[t]);
        hf[t] = h;
    }
    h = tape.constant(Matrix(Matrix::Zero(H, 1)));
    for (Eigen::Index t = T - 1; t >= 0; --t) {
        h = gru_step_var(net.bwd, h, in_cols[t]);
        hb[t] = h;
    }

    GaussMarkovVars q;
    ad::Var init = net.Winit * hb[0] + net.binit;
    q.m0 = ad::block(init, 0, 0, d, 1);
    q.L0 = ad::pack_tril_softplus(ad::block(init, d, 0, d * (d + 1) / 2, 1), d);
    for (Eigen::Index t = 0; t < T; ++t) {
        ad::Var joint = ad::vstack(hf[t], hb[t]);
        q.A.push_back(ad::reshape_rows(net.WA * joint + net.bA, d, d));
        q.L.push_back(ad::pack_tril_softplus(net.WL * joint + net.bL, d));
    }
    return q;
}

}  // namespace gpssm

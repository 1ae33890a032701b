#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gpssm/errors.hpp"
#include "gpssm/model.hpp"
#include "gpssm/rollout.hpp"
#include "support/checks.hpp"

using namespace gpssm;

namespace {

GpssmModel make_model(Eigen::Index state_dim, Eigen::Index obs_dim, Eigen::Index action_dim,
                      Eigen::Index num_inducing, Eigen::Index hidden_dim, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Episode> episodes;
    for (int e = 0; e < 2; ++e) {
        Episode ep;
        ep.Y = rng.normal_matrix(12, obs_dim);
        ep.A = action_dim > 0 ? rng.normal_matrix(12, action_dim) : Matrix(12, 0);
        episodes.push_back(std::move(ep));
    }
    ModelInit init;
    init.kernel = make_rbf(1.0);
    init.state_dim = state_dim;
    init.num_inducing = num_inducing;
    init.hidden_dim = hidden_dim;
    init.sigma_f2 = 0.01;
    init.sigma_g2 = 0.05;
    return init_model(init, episodes, obs_dim, action_dim, rng);
}

// Sets q(u) to its prior: zero posterior correction, so the transition mean
// is the identity and the noise-free variance equals the kernel variance.
void reset_to_prior(GpssmModel& model) {
    const Eigen::Index d = model.state_dim();
    for (Eigen::Index k = 0; k < d; ++k) model.gp.U_mu.col(k) = model.gp.Z.col(k);
    const double tv = total_variance(model.gp.kernel);
    CholResult chol = chol_with_escalating_jitter(gram(model.gp.kernel, model.gp.Z), tv);
    for (Eigen::Index k = 0; k < d; ++k) model.gp.U_chol[k] = chol.C;
}

double max_abs_diff(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(bool(in));
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> parts;
    std::stringstream ss(line);
    std::string part;
    while (std::getline(ss, part, ',')) parts.push_back(part);
    return parts;
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& tag)
        : path("/tmp/gpssm_rollout_" + tag + "_" + std::to_string(::getpid()) + ".csv") {}
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("rollout entry points validate their inputs") {
    GpssmModel model = make_model(1, 1, 0, 4, 3, 5);
    RolloutOptions opt;
    Matrix actions(6, 0);
    CHECK_THROWS_AS(free_simulate(model, Vector::Zero(2), Matrix::Zero(1, 1), actions, opt),
                    InputError);
    CHECK_THROWS_AS(free_simulate(model, Vector::Zero(1), Matrix::Zero(1, 2), actions, opt),
                    InputError);
    CHECK_THROWS_AS(free_simulate(model, Vector::Zero(1), Matrix::Zero(1, 1), Matrix(6, 2), opt),
                    InputError);
    RolloutOptions bad;
    bad.num_samples = 0;
    CHECK_THROWS_AS(free_simulate(model, Vector::Zero(1), Matrix::Zero(1, 1), actions, bad),
                    InputError);

    CHECK_THROWS_AS(encode_initial(model, Matrix(0, 1), Matrix(0, 0)), InputError);
    CHECK_THROWS_AS(encode_initial(model, Matrix::Zero(4, 2), Matrix(4, 0)), InputError);
    CHECK_THROWS_AS(encode_initial(model, Matrix::Zero(4, 1), Matrix(3, 0)), InputError);

    CHECK_THROWS_AS(transition_grid(model, Matrix::Zero(3, 2)), InputError);
}

TEST_CASE("deterministic rollout follows the posterior mean map") {
    GpssmModel model = make_model(2, 2, 1, 6, 4, 9);
    Vector m0(2);
    m0 << 0.3, -0.2;
    Matrix L0 = 0.5 * Matrix::Identity(2, 2);  // ignored when deterministic
    Matrix actions = Vector::LinSpaced(8, -1.0, 1.0);

    RolloutOptions opt;
    opt.num_samples = 3;
    opt.deterministic = true;
    opt.seed = 7;
    RolloutResult r = free_simulate(model, m0, L0, actions, opt);

    REQUIRE(r.states.size() == 3);
    REQUIRE(r.observations.size() == 3);
    CHECK(max_abs_diff(r.states[0], r.states[1]) == 0.0);
    CHECK(max_abs_diff(r.states[0], r.states[2]) == 0.0);
    CHECK(r.spread.maxCoeff() == 0.0);

    GpPredictor pred = make_predictor(model.gp);
    Matrix x = m0.transpose();
    CHECK(max_abs_diff(r.states[0].row(0), x) == 0.0);
    for (Eigen::Index t = 0; t < actions.rows(); ++t) {
        Matrix input(1, 3);
        input.leftCols(2) = x;
        input.rightCols(1) = actions.row(t);
        Matrix mean, var;
        predict(pred, input, mean, var);
        x = mean;
        CHECK(max_abs_diff(r.states[0].row(t + 1), x) == 0.0);
        Matrix y = (model.emission.W * x.transpose() + model.emission.b).transpose();
        CHECK(max_abs_diff(r.observations[0].row(t), y) == 0.0);
    }
}

TEST_CASE("same seed reproduces a stochastic rollout bitwise") {
    GpssmModel model = make_model(1, 1, 1, 5, 3, 3);
    Vector m0 = Vector::Zero(1);
    Matrix L0 = Matrix::Identity(1, 1);
    Matrix actions = Vector::LinSpaced(6, -0.5, 0.5);

    RolloutOptions opt;
    opt.num_samples = 4;
    opt.obs_noise = true;
    opt.seed = 21;
    RolloutResult r1 = free_simulate(model, m0, L0, actions, opt);
    RolloutResult r2 = free_simulate(model, m0, L0, actions, opt);
    for (int s = 0; s < 4; ++s) {
        CHECK(max_abs_diff(r1.states[s], r2.states[s]) == 0.0);
        CHECK(max_abs_diff(r1.observations[s], r2.observations[s]) == 0.0);
    }
    CHECK(max_abs_diff(r1.spread, r2.spread) == 0.0);

    RolloutOptions other = opt;
    other.seed = 22;
    RolloutResult r3 = free_simulate(model, m0, L0, actions, other);
    CHECK(max_abs_diff(r1.states[0], r3.states[0]) > 0.0);
}

TEST_CASE("sample streams do not depend on the sample count") {
    GpssmModel model = make_model(2, 1, 0, 5, 3, 17);
    Vector m0 = Vector::Zero(2);
    Matrix L0 = Matrix::Identity(2, 2);
    Matrix actions(5, 0);

    RolloutOptions small;
    small.num_samples = 3;
    small.seed = 40;
    RolloutOptions large = small;
    large.num_samples = 7;
    RolloutResult a = free_simulate(model, m0, L0, actions, small);
    RolloutResult b = free_simulate(model, m0, L0, actions, large);
    for (int s = 0; s < 3; ++s) {
        CHECK(max_abs_diff(a.states[s], b.states[s]) == 0.0);
        CHECK(max_abs_diff(a.observations[s], b.observations[s]) == 0.0);
    }
}

TEST_CASE("a prior inducing distribution resets the transition to the identity") {
    GpssmModel model = make_model(1, 1, 0, 5, 3, 13);
    reset_to_prior(model);
    Matrix probes = Vector::LinSpaced(9, -2.0, 2.0);
    TransitionGrid grid = transition_grid(model, probes);
    CHECK(max_abs_diff(grid.mean, probes) == 0.0);
    const double tv = total_variance(model.gp.kernel);
    for (Eigen::Index i = 0; i < probes.rows(); ++i)
        CHECK(std::abs(grid.var(i, 0) - tv) < 1e-12);
    CHECK(max_abs_diff(grid.Z, model.gp.Z) == 0.0);
    CHECK(max_abs_diff(grid.U_mu, model.gp.U_mu) == 0.0);
}

TEST_CASE("posterior mean interpolates the inducing outputs at their locations") {
    GpssmModel model = make_model(1, 1, 0, 5, 3, 29);
    model.gp.Z.col(0) = Vector::LinSpaced(5, -2.0, 2.0);
    model.gp.U_mu.col(0) = model.gp.Z.col(0).array().sin();
    model.gp.U_chol[0] = 1e-4 * Matrix::Identity(5, 5);

    TransitionGrid grid = transition_grid(model, model.gp.Z);
    CHECK(max_abs_diff(grid.mean, model.gp.U_mu) < 1e-3);
    CHECK(grid.var.maxCoeff() < 1e-3);
}

TEST_CASE("prior-reset rollout spreads like a random walk") {
    GpssmModel model = make_model(1, 1, 0, 5, 3, 31);
    reset_to_prior(model);
    REQUIRE(max_abs_diff(model.emission.W, Matrix::Identity(1, 1)) == 0.0);

    const double step_var = total_variance(model.gp.kernel) + model.gp.sigma_f2;
    RolloutOptions opt;
    opt.num_samples = 500;
    opt.seed = 11;
    RolloutResult r =
        free_simulate(model, Vector::Zero(1), Matrix::Zero(1, 1), Matrix(10, 0), opt);

    // The transition is the identity with constant noise, so the rollout is a
    // pure random walk: Var(y_t) = t * step_var.
    const double s1 = r.spread(0, 0);
    const double s10 = r.spread(9, 0);
    CHECK(std::abs(s1 - std::sqrt(step_var)) < 0.1 * std::sqrt(step_var));
    CHECK(s10 / s1 > 2.6);
    CHECK(s10 / s1 < 3.8);
}

TEST_CASE("one-step pushforward mean matches quadrature") {
    GpssmModel model = make_model(1, 1, 0, 5, 3, 29);
    model.gp.Z.col(0) = Vector::LinSpaced(5, -2.0, 2.0);
    model.gp.U_mu.col(0) = model.gp.Z.col(0).array().sin();
    model.gp.U_chol[0] = 0.05 * Matrix::Identity(5, 5);

    const double m0 = 0.3, s0 = 0.4;
    RolloutOptions opt;
    opt.num_samples = 20000;
    opt.seed = 77;
    RolloutResult r = free_simulate(model, Vector::Constant(1, m0),
                                    Matrix::Constant(1, 1, s0), Matrix(1, 0), opt);

    double sum = 0.0, sumsq = 0.0;
    for (const Matrix& X : r.states) {
        sum += X(1, 0);
        sumsq += X(1, 0) * X(1, 0);
    }
    const double n = static_cast<double>(r.states.size());
    const double sample_mean = sum / n;
    const double sample_sd = std::sqrt(sumsq / n - sample_mean * sample_mean);

    // E[x_1] = integral of the posterior mean against the initial density;
    // the noise terms are mean-zero.
    GpPredictor pred = make_predictor(model.gp);
    const Eigen::Index nodes = 4001;
    Matrix xs = Vector::LinSpaced(nodes, m0 - 8.0 * s0, m0 + 8.0 * s0);
    Matrix mean, var;
    predict(pred, xs, mean, var);
    const double dx = (xs(nodes - 1, 0) - xs(0, 0)) / static_cast<double>(nodes - 1);
    double integral = 0.0;
    for (Eigen::Index i = 0; i < nodes; ++i) {
        const double z = (xs(i, 0) - m0) / s0;
        const double pdf = std::exp(-0.5 * z * z) / (s0 * std::sqrt(2.0 * M_PI));
        const double w = (i == 0 || i == nodes - 1) ? 0.5 : 1.0;
        integral += w * pdf * mean(i, 0) * dx;
    }
    CHECK(std::abs(sample_mean - integral) < 4.0 * sample_sd / std::sqrt(n));
}

TEST_CASE("freezing the inducing draw pins one transition function") {
    GpssmModel model = make_model(1, 1, 0, 5, 3, 29);
    model.gp.Z.col(0) = Vector::LinSpaced(5, -2.0, 2.0);
    model.gp.U_mu.col(0) = model.gp.Z.col(0).array().sin();
    model.gp.U_chol[0] = 0.3 * Matrix::Identity(5, 5);
    Vector m0 = Vector::Constant(1, 0.7);
    Matrix L0 = Matrix::Zero(1, 1);

    SUBCASE("deterministic frozen rollout equals the mean rollout") {
        RolloutOptions det;
        det.num_samples = 1;
        det.deterministic = true;
        RolloutOptions frozen = det;
        frozen.freeze_u = true;
        RolloutResult a = free_simulate(model, m0, L0, Matrix(6, 0), det);
        RolloutResult b = free_simulate(model, m0, L0, Matrix(6, 0), frozen);
        CHECK(max_abs_diff(a.states[0], b.states[0]) < 1e-12);
    }

    SUBCASE("a collapsed inducing distribution recovers the mean path") {
        GpssmModel tight = model;
        tight.gp.U_chol[0] = 1e-9 * Matrix::Identity(5, 5);
        tight.gp.sigma_f2 = 1e-18;
        RolloutOptions det;
        det.num_samples = 1;
        det.deterministic = true;
        RolloutOptions frozen;
        frozen.num_samples = 5;
        frozen.freeze_u = true;
        frozen.seed = 3;
        RolloutResult a = free_simulate(tight, m0, L0, Matrix(6, 0), det);
        RolloutResult b = free_simulate(tight, m0, L0, Matrix(6, 0), frozen);
        for (int s = 0; s < 5; ++s) CHECK(max_abs_diff(a.states[0], b.states[s]) < 1e-6);
    }

    SUBCASE("across-sample variance reflects only the inducing uncertainty") {
        GpssmModel quiet = model;
        quiet.gp.sigma_f2 = 1e-18;
        RolloutOptions frozen;
        frozen.num_samples = 20000;
        frozen.freeze_u = true;
        frozen.seed = 19;
        RolloutResult r = free_simulate(quiet, m0, L0, Matrix(1, 0), frozen);
        double sum = 0.0, sumsq = 0.0;
        for (const Matrix& X : r.states) {
            sum += X(1, 0);
            sumsq += X(1, 0) * X(1, 0);
        }
        const double n = static_cast<double>(r.states.size());
        const double mean = sum / n;
        const double sample_var = sumsq / n - mean * mean;

        // Pinning u and following its conditional mean keeps the q(u) spread
        // but drops the residual process variance, so across samples
        // Var(x_1) = a' Sigma a with a = (Kzz + jI)^{-1} k(x_0).
        GpPredictor pred = make_predictor(quiet.gp);
        Matrix k = cross(quiet.gp.kernel, m0.transpose(), quiet.gp.Z);
        Matrix A = pred.C.triangularView<Eigen::Lower>().solve(Matrix(k.transpose()));
        const double expected = (pred.CiS[0].transpose() * A).squaredNorm();
        CHECK(std::abs(sample_var - expected) < 0.06 * expected);
    }
}

TEST_CASE("tip error measures normalized tip distance") {
    Matrix truth = Matrix::Zero(4, 3);
    truth.col(0) = Vector::LinSpaced(4, 0.0, 1.5);

    SUBCASE("perfect prediction scores zero") {
        CHECK(tip_error({truth, truth}, truth, 0.5, 0, 2) == 0.0);
    }

    SUBCASE("a pole flipped upright scores two pole lengths") {
        Matrix flipped = truth;
        flipped.col(2).array() += M_PI;
        CHECK(tip_error({flipped}, truth, 1.0, 0, 2) == doctest::Approx(2.0).epsilon(1e-12));
        CHECK(tip_error({flipped}, truth, 0.5, 0, 2) == doctest::Approx(2.0).epsilon(1e-12));
    }

    SUBCASE("shifting every cart position leaves the error unchanged") {
        Rng rng(55);
        Matrix pred = truth + 0.2 * rng.normal_matrix(4, 3);
        const double base = tip_error({pred}, truth, 0.5, 0, 2);
        Matrix pred_shift = pred;
        Matrix truth_shift = truth;
        pred_shift.col(0).array() += 3.7;
        truth_shift.col(0).array() += 3.7;
        CHECK(tip_error({pred_shift}, truth_shift, 0.5, 0, 2) ==
              doctest::Approx(base).epsilon(1e-12));
    }

    SUBCASE("invalid arguments throw") {
        CHECK_THROWS_AS(tip_error({}, truth, 0.5, 0, 2), InputError);
        CHECK_THROWS_AS(tip_error({truth}, truth, 0.0, 0, 2), InputError);
        CHECK_THROWS_AS(tip_error({truth}, truth, 0.5, 3, 2), InputError);
        CHECK_THROWS_AS(tip_error({truth}, truth, 0.5, 0, -1), InputError);
        CHECK_THROWS_AS(tip_error({Matrix::Zero(3, 3)}, truth, 0.5, 0, 2), InputError);
    }
}

TEST_CASE("rollout CSV summarises per-step quantiles") {
    RolloutResult r;
    Matrix y1(2, 1), y2(2, 1);
    y1 << 0.0, 10.0;
    y2 << 1.0, 30.0;
    r.observations = {y1, y2};

    TempFile tmp("quantiles");
    write_rollout_csv(r, tmp.path);
    std::vector<std::string> lines = read_lines(tmp.path);
    REQUIRE(lines.size() == 3);
    CHECK(lines[0] == "t,mean0,p050,p950");

    std::vector<std::string> row1 = split(lines[1]);
    REQUIRE(row1.size() == 4);
    CHECK(row1[0] == "1");
    CHECK(std::stod(row1[1]) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(std::stod(row1[2]) == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(std::stod(row1[3]) == doctest::Approx(0.95).epsilon(1e-12));

    std::vector<std::string> row2 = split(lines[2]);
    CHECK(row2[0] == "2");
    CHECK(std::stod(row2[1]) == doctest::Approx(20.0).epsilon(1e-12));
    CHECK(std::stod(row2[2]) == doctest::Approx(11.0).epsilon(1e-12));
    CHECK(std::stod(row2[3]) == doctest::Approx(29.0).epsilon(1e-12));

    SUBCASE("a single sample collapses the quantiles onto the mean") {
        RolloutResult one;
        one.observations = {y1};
        TempFile single("single");
        write_rollout_csv(one, single.path);
        std::vector<std::string> out = read_lines(single.path);
        std::vector<std::string> row = split(out[1]);
        CHECK(row[1] == row[2]);
        CHECK(row[2] == row[3]);
    }

    SUBCASE("empty and unwritable inputs throw") {
        RolloutResult empty;
        CHECK_THROWS_AS(write_rollout_csv(empty, tmp.path), InputError);
        CHECK_THROWS_AS(write_rollout_csv(r, "/nonexistent_dir_xyz/out.csv"), IoError);
    }
}

TEST_CASE("transition CSV carries probes, bands and inducing rows") {
    GpssmModel model = make_model(1, 1, 0, 4, 3, 13);
    reset_to_prior(model);
    Matrix probes = Vector::LinSpaced(6, -1.0, 1.0);
    TransitionGrid grid = transition_grid(model, probes);

    TempFile tmp("grid");
    write_transition_csv(grid, tmp.path);
    std::vector<std::string> lines = read_lines(tmp.path);
    REQUIRE(lines.size() == 1 + 6 + 4);
    CHECK(lines[0] == "kind,x0,mean0,var0,lo0,hi0");

    const double tv = total_variance(model.gp.kernel);
    for (int i = 0; i < 6; ++i) {
        std::vector<std::string> row = split(lines[1 + i]);
        REQUIRE(row.size() == 6);
        CHECK(row[0] == "grid");
        const double x = std::stod(row[1]);
        CHECK(x == doctest::Approx(probes(i, 0)).epsilon(1e-12));
        CHECK(std::stod(row[2]) == doctest::Approx(x).epsilon(1e-12));
        CHECK(std::stod(row[3]) == doctest::Approx(tv).epsilon(1e-9));
        CHECK(std::stod(row[4]) == doctest::Approx(x - 2.0 * std::sqrt(tv)).epsilon(1e-9));
        CHECK(std::stod(row[5]) == doctest::Approx(x + 2.0 * std::sqrt(tv)).epsilon(1e-9));
    }
    for (int i = 0; i < 4; ++i) {
        std::vector<std::string> row = split(lines[7 + i]);
        CHECK(row[0] == "inducing");
        CHECK(std::stod(row[1]) == doctest::Approx(model.gp.Z(i, 0)).epsilon(1e-12));
        CHECK(std::stod(row[2]) == doctest::Approx(model.gp.U_mu(i, 0)).epsilon(1e-12));
        CHECK(std::stod(row[3]) == 0.0);
        CHECK(row[4] == row[2]);
        CHECK(row[5] == row[2]);
    }

    CHECK_THROWS_AS(write_transition_csv(grid, "/nonexistent_dir_xyz/grid.csv"), IoError);
}

TEST_CASE("encode_initial matches running the recognition network on a prefix") {
    GpssmModel model = make_model(2, 2, 1, 5, 4, 41);
    Rng rng(8);
    Matrix prefix_Y = rng.normal_matrix(5, 2);
    Matrix prefix_A = rng.normal_matrix(5, 1);

    auto [m0, L0] = encode_initial(model, prefix_Y, prefix_A);
    Matrix inputs(5, 3);
    inputs.leftCols(2) = prefix_Y;
    inputs.rightCols(1) = prefix_A;
    GaussMarkov q = encode(model.recognition, inputs);
    CHECK(max_abs_diff(m0, q.m0) == 0.0);
    CHECK(max_abs_diff(L0, q.L0) == 0.0);
    CHECK(m0.size() == 2);
    CHECK(L0.rows() == 2);
}

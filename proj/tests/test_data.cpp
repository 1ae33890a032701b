#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "gpssm/data.hpp"
#include "gpssm/errors.hpp"

using namespace gpssm;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/gpssm_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("kink transition branch values") {
    CHECK(kink_f(3.5) == 4.5);
    CHECK(kink_f(4.0) == 5.0);  // branches meet: continuous at the kink
    CHECK(kink_f(5.0) == 3.0);
    CHECK(kink_f(-2.0) == -1.0);
    CHECK(kink_f(8.0) == -3.0);

    double x = 0.0;
    const double want[10] = {0, 1, 2, 3, 4, 5, 3, 4, 5, 3};
    for (int t = 0; t < 10; ++t) {
        CHECK(x == want[t]);
        x = kink_f(x);
    }
}

TEST_CASE("kink generator: determinism, shapes, noise-free recursion") {
    Dataset a = kink_generate(4, 12, 0.01, 0.1, 42);
    Dataset b = kink_generate(4, 12, 0.01, 0.1, 42);
    Dataset c = kink_generate(4, 12, 0.01, 0.1, 43);
    CHECK_NOTHROW(validate(a));
    CHECK(a.obs_dim == 1);
    CHECK(a.action_dim == 0);
    REQUIRE(a.episodes.size() == 4);
    CHECK(a.episodes[2].Y.rows() == 12);
    CHECK(a.episodes[2].A.cols() == 0);
    CHECK((a.episodes[3].Y - b.episodes[3].Y).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.episodes[0].Y - c.episodes[0].Y).cwiseAbs().maxCoeff() > 0.0);

    Dataset clean = kink_generate(2, 8, 0.0, 0.0, 7);
    for (const Episode& ep : clean.episodes)
        for (int t = 0; t + 1 < 8; ++t)
            CHECK(ep.Y(t + 1, 0) == doctest::Approx(kink_f(ep.Y(t, 0))).epsilon(1e-14));

    CHECK_THROWS_AS(kink_generate(0, 5, 0.01, 0.1, 1), InputError);
    CHECK_THROWS_AS(kink_generate(1, 5, -0.1, 0.1, 1), InputError);
}

TEST_CASE("cart-pole rest state is a fixed point") {
    CartPoleParams cp;
    Vector rest = Vector::Zero(4);
    Vector next = cartpole_rk4_step(rest, 0.0, 0.1, cp);
    CHECK(next.cwiseAbs().maxCoeff() == 0.0);

    CartPoleOptions opts;
    opts.init_angle_std = 0.0;
    Dataset ds = cartpole_simulate(1, 5, 0.1, [](int, const Vector&) { return 0.0; }, 1, opts);
    CHECK(ds.episodes[0].Y.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("unactuated cart-pole conserves energy over forty steps") {
    CartPoleParams cp;
    Vector x(4);
    x << 0.0, 0.0, 2.0, 0.0;  // released from a large swing angle
    const double e0 = cartpole_energy(x, cp);
    double worst = 0.0;
    for (int t = 0; t < 40; ++t) {
        x = cartpole_rk4_step(x, 0.0, 0.1, cp);
        worst = std::max(worst, std::abs(cartpole_energy(x, cp) - e0));
    }
    CHECK(worst / std::abs(e0) < 1e-4);
}

TEST_CASE("cart-pole simulation: shapes, action lag, observation subset") {
    ActionFn policy = sinusoid_policy(5.0, 20.0);
    Dataset full = cartpole_simulate(2, 15, 0.1, policy, 3);
    CHECK_NOTHROW(validate(full));
    CHECK(full.obs_dim == 4);
    CHECK(full.action_dim == 1);
    CHECK(full.dt == 0.1);
    CHECK(full.episodes[0].Y.rows() == 15);

    CartPoleOptions partial;
    partial.full_observation = false;
    Dataset pos_angle = cartpole_simulate(1, 10, 0.1, policy, 3, partial);
    CHECK(pos_angle.obs_dim == 2);

    // A state-independent policy commands the same forces regardless of lag,
    // so the lagged action matrix is exactly the unlagged one pushed down.
    CartPoleOptions lagged;
    lagged.action_lag = 2;
    Dataset no_lag = cartpole_simulate(1, 10, 0.1, policy, 5);
    Dataset lag2 = cartpole_simulate(1, 10, 0.1, policy, 5, lagged);
    CHECK(lag2.episodes[0].A(0, 0) == 0.0);
    CHECK(lag2.episodes[0].A(1, 0) == 0.0);
    for (int t = 2; t < 10; ++t)
        CHECK(lag2.episodes[0].A(t, 0) == no_lag.episodes[0].A(t - 2, 0));
}

TEST_CASE("diverging cart is truncated") {
    CartPoleOptions opts;
    opts.params.position_bound = 0.5;
    Dataset ds = cartpole_simulate(1, 40, 0.1, [](int, const Vector&) { return 10.0; }, 2, opts);
    REQUIRE(ds.episodes.size() == 1);
    CHECK(ds.episodes[0].horizon() < 40);
    CHECK(ds.episodes[0].horizon() >= 1);
    CHECK(ds.episodes[0].Y.col(0).cwiseAbs().maxCoeff() <= 0.5);
}

TEST_CASE("dataset file round-trips exactly") {
    Dataset ds = kink_generate(3, 7, 0.01, 0.1, 11);
    TempFile f("kink.jsonl");
    save_dataset(ds, f.path);
    Dataset back = load_dataset(f.path);
    CHECK(back.name == "kink");
    CHECK(back.obs_dim == 1);
    CHECK(back.dt == 0.0);
    REQUIRE(back.episodes.size() == 3);
    for (int e = 0; e < 3; ++e)
        CHECK((back.episodes[e].Y - ds.episodes[e].Y).cwiseAbs().maxCoeff() == 0.0);

    Dataset cart = cartpole_simulate(2, 6, 0.1, sinusoid_policy(3.0, 10.0), 12);
    TempFile g("cart.jsonl");
    save_dataset(cart, g.path);
    Dataset cart_back = load_dataset(g.path);
    for (int e = 0; e < 2; ++e) {
        CHECK((cart_back.episodes[e].Y - cart.episodes[e].Y).cwiseAbs().maxCoeff() == 0.0);
        CHECK((cart_back.episodes[e].A - cart.episodes[e].A).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("empty dataset is a header-only file") {
    Dataset ds;
    ds.name = "empty";
    ds.obs_dim = 2;
    ds.action_dim = 1;
    TempFile f("empty.jsonl");
    save_dataset(ds, f.path);
    std::ifstream in(f.path);
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) ++lines;
    CHECK(lines == 1);
    Dataset back = load_dataset(f.path);
    CHECK(back.episodes.empty());
    CHECK(back.obs_dim == 2);
}

TEST_CASE("hand-written two-step file parses field by field") {
    TempFile f("fixture.jsonl");
    {
        std::ofstream out(f.path);
        out << R"({"name":"toy","obs_dim":2,"action_dim":1,"dt":0.5,"episodes":1})" << "\n";
        out << R"({"episode":0,"t":0,"y":[1.5,-2.0],"a":[0.25]})" << "\n";
        out << R"({"episode":0,"t":1,"y":[3.0,4.0],"a":[-1.0]})" << "\n";
    }
    Dataset ds = load_dataset(f.path);
    CHECK(ds.name == "toy");
    CHECK(ds.dt == 0.5);
    REQUIRE(ds.episodes.size() == 1);
    const Episode& ep = ds.episodes[0];
    REQUIRE(ep.horizon() == 2);
    CHECK(ep.Y(0, 0) == 1.5);
    CHECK(ep.Y(0, 1) == -2.0);
    CHECK(ep.Y(1, 1) == 4.0);
    CHECK(ep.A(0, 0) == 0.25);
    CHECK(ep.A(1, 0) == -1.0);
}

TEST_CASE("dataset loader reports the offending line") {
    TempFile f("broken.jsonl");
    {
        std::ofstream out(f.path);
        out << R"({"name":"toy","obs_dim":1,"action_dim":0,"dt":0,"episodes":1})" << "\n";
        out << R"({"episode":0,"t":0,"y":[1.0],"a":[]})" << "\n";
        out << "not json at all\n";
    }
    try {
        load_dataset(f.path);
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find(":3") != std::string::npos);
    }

    TempFile g("gap.jsonl");
    {
        std::ofstream out(g.path);
        out << R"({"name":"toy","obs_dim":1,"action_dim":0,"dt":0,"episodes":1})" << "\n";
        out << R"({"episode":0,"t":1,"y":[1.0],"a":[]})" << "\n";
    }
    CHECK_THROWS_AS(load_dataset(g.path), IoError);
}

TEST_CASE("checkpoint round-trips bitwise") {
    Rng rng(21);
    Checkpoint cp;
    cp.config_echo = R"({"model":{"state_dim":2}})";
    cp.rng_state = rng.serialize();
    cp.tensors.emplace_back("gp.Z", rng.normal_matrix(4, 3));
    cp.tensors.emplace_back("scalar", Matrix::Constant(1, 1, -0.0));
    cp.tensors.emplace_back("recognition.fwd.Wz", rng.normal_matrix(5, 2));
    cp.tensors[2].second(0, 0) = 1e-310;  // subnormal survives the round trip

    TempFile f("model.ckpt");
    save_checkpoint(cp, f.path);
    Checkpoint back = load_checkpoint(f.path);
    CHECK(back.config_echo == cp.config_echo);
    CHECK(back.rng_state == cp.rng_state);
    REQUIRE(back.tensors.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back.tensors[i].first == cp.tensors[i].first);
        REQUIRE(back.tensors[i].second.rows() == cp.tensors[i].second.rows());
        CHECK(std::memcmp(back.tensors[i].second.data(), cp.tensors[i].second.data(),
                          sizeof(double) * back.tensors[i].second.size()) == 0);
    }
    CHECK(std::signbit(back.tensor("scalar")(0, 0)));
    CHECK(back.has_tensor("gp.Z"));
    CHECK_FALSE(back.has_tensor("missing"));
    CHECK_THROWS_AS(back.tensor("missing"), InputError);
}

TEST_CASE("checkpoint loader rejects damage") {
    Rng rng(22);
    Checkpoint cp;
    cp.tensors.emplace_back("w", rng.normal_matrix(3, 3));
    TempFile f("damage.ckpt");
    save_checkpoint(cp, f.path);

    // Truncation: drop the last 8 bytes.
    std::ifstream in(f.path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    TempFile t("trunc.ckpt");
    {
        std::ofstream out(t.path, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 8));
    }
    CHECK_THROWS_AS(load_checkpoint(t.path), IoError);

    TempFile m("magic.ckpt");
    {
        std::string bad = bytes;
        bad[0] = 'X';
        std::ofstream out(m.path, std::ios::binary);
        out.write(bad.data(), static_cast<std::streamsize>(bad.size()));
    }
    CHECK_THROWS_AS(load_checkpoint(m.path), IoError);

    TempFile v("version.ckpt");
    {
        std::string bad = bytes;
        bad[8] = 99;  // format version field
        std::ofstream out(v.path, std::ios::binary);
        out.write(bad.data(), static_cast<std::streamsize>(bad.size()));
    }
    CHECK_THROWS_AS(load_checkpoint(v.path), IoError);

    TempFile x("extra.ckpt");
    {
        std::string bad = bytes + "junk";
        std::ofstream out(x.path, std::ios::binary);
        out.write(bad.data(), static_cast<std::streamsize>(bad.size()));
    }
    CHECK_THROWS_AS(load_checkpoint(x.path), IoError);
}

TEST_CASE("dataset validation rejects inconsistency") {
    Dataset ds = kink_generate(2, 5, 0.01, 0.1, 30);
    ds.episodes[1].Y.conservativeResize(4, 1);
    CHECK_THROWS_AS(validate(ds), InputError);
    ds = kink_generate(1, 5, 0.01, 0.1, 30);
    ds.episodes[0].Y(2, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(validate(ds), InputError);
}

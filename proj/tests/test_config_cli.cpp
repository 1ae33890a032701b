#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "gpssm/cli.hpp"
#include "gpssm/config.hpp"
#include "gpssm/errors.hpp"
#include "gpssm/rollout.hpp"

using namespace gpssm;

namespace {

struct TempDir {
    std::string path;
    explicit TempDir(const std::string& tag)
        : path("/tmp/gpssm_cli_" + tag + "_" + std::to_string(::getpid())) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

Config make_config(const std::vector<std::pair<std::string, std::string>>& kvs) {
    Json tree = Json::object();
    for (const auto& [k, v] : kvs) apply_override(tree, k, v);
    return finalize_config(std::move(tree));
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    return std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(bool(in));
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int count_lines(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(bool(in));
    int n = 0;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) ++n;
    return n;
}

int call_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "gpssm");
    std::vector<char*> argv;
    for (std::string& a : args) argv.push_back(a.data());
    std::stringstream sink;
    std::streambuf* out = std::cout.rdbuf(sink.rdbuf());
    std::streambuf* err = std::cerr.rdbuf(sink.rdbuf());
    const int code = run_cli(static_cast<int>(argv.size()), argv.data());
    std::cout.rdbuf(out);
    std::cerr.rdbuf(err);
    return code;
}

std::string write_kink_dataset(const TempDir& dir, int episodes = 6, int length = 8) {
    Dataset ds = kink_generate(episodes, length, 0.01, 0.1, 3);
    const std::string path = dir.path + "/kink.jsonl";
    save_dataset(ds, path);
    return path;
}

#define CHECK_CONFIG_ERROR(expr, fragment)                               \
    do {                                                                 \
        try {                                                            \
            (void)(expr);                                                \
            FAIL("expected ConfigError from " #expr);                    \
        } catch (const ConfigError& e) {                                 \
            CHECK(std::string(e.what()).find(fragment) != std::string::npos); \
        }                                                                \
    } while (0)

}  // namespace

TEST_CASE("defaults fill in and validate") {
    Config cfg = finalize_config(Json::object());
    CHECK(cfg.at("training.steps").get<int>() == 2000);
    CHECK(cfg.at("training.learning_rate").get<double>() == 1e-3);
    CHECK(cfg.at("model.kernel").get<std::string>() == "rbf");
    CHECK(cfg.at("model.num_inducing").get<int>() == 20);
    CHECK(cfg.at("recognition.hidden_dim").get<int>() == 20);
    CHECK(cfg.at("rollout.init_prefix").get<int>() == 5);
    CHECK(cfg.at("output.root").get<std::string>() == "runs");
    CHECK(cfg.tree == default_config());

    CHECK_THROWS_AS(cfg.at("model.no_such_key"), ConfigError);

    // Partial user trees keep their values and inherit the rest.
    Config partial = finalize_config(parse_config_text(R"({"training": {"steps": 7}})"));
    CHECK(partial.at("training.steps").get<int>() == 7);
    CHECK(partial.at("training.batch_size").get<int>() == 16);
}

TEST_CASE("schema errors name the offending key path") {
    auto with = [](const std::string& key, const std::string& value) {
        Json tree = Json::object();
        apply_override(tree, key, value);
        return finalize_config(std::move(tree));
    };

    CHECK_CONFIG_ERROR(finalize_config(parse_config_text(R"({"modle": {}})")), "modle");
    CHECK_CONFIG_ERROR(with("model.stat_dim", "2"), "model.stat_dim");
    CHECK_CONFIG_ERROR(with("training.steps", "\"many\""), "training.steps");
    CHECK_CONFIG_ERROR(with("training.steps", "2.5"), "must be an integer");
    CHECK_CONFIG_ERROR(with("training.steps", "-1"), "must be >= 0");
    CHECK_CONFIG_ERROR(with("model.ard", "1"), "true or false");
    CHECK_CONFIG_ERROR(with("model.sigma_f2", "0"), "must be > 0");
    CHECK_CONFIG_ERROR(with("model.emission", "froozen"), "one of learned, fixed");
    CHECK_CONFIG_ERROR(with("model.kernel", "rbff"), "unknown kernel leaf");
    CHECK_CONFIG_ERROR(with("model.kernel_variance", "[1.0, 2.0]"), "one entry per kernel leaf");
    CHECK_CONFIG_ERROR(with("model.warp_widths", "[0]"), "model.warp_widths");
    CHECK_CONFIG_ERROR(with("data.generator", "pendulum"), "one of kink, cartpole");
    CHECK_CONFIG_ERROR(with("rollout.metric", "mse"), "rollout.metric");
    CHECK_CONFIG_ERROR(with("export.grid_max", "-10"), "export.grid_max");

    CHECK_THROWS_AS(parse_config_text("not json"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("[1, 2]"), ConfigError);
    CHECK_THROWS_AS(load_config_file("/nonexistent_dir_xyz/c.json"), IoError);
}

TEST_CASE("overrides set dotted paths with JSON value parsing") {
    Json tree = Json::object();
    apply_override(tree, "training.steps", "55");
    apply_override(tree, "model.kernel", "rbf+matern12");
    apply_override(tree, "model.warp_widths", "[3, 2]");
    apply_override(tree, "model.ard", "true");
    CHECK(tree["training"]["steps"].is_number_integer());
    CHECK(tree["training"]["steps"] == 55);
    CHECK(tree["model"]["kernel"] == "rbf+matern12");
    CHECK(tree["model"]["warp_widths"] == Json::array({3, 2}));
    CHECK(tree["model"]["ard"] == true);

    Config cfg = finalize_config(tree);
    CHECK(cfg.at("training.steps").get<int>() == 55);

    Json clash = Json::object();
    clash["training"] = 5;
    CHECK_THROWS_AS(apply_override(clash, "training.steps", "1"), ConfigError);
    CHECK_THROWS_AS(apply_override(tree, "", "1"), ConfigError);
}

TEST_CASE("canonical text and hash ignore key order and see value changes") {
    Json a = Json::object();
    apply_override(a, "training.steps", "5");
    apply_override(a, "model.state_dim", "2");
    Json b = Json::object();
    apply_override(b, "model.state_dim", "2");
    apply_override(b, "training.steps", "5");
    Config ca = finalize_config(a), cb = finalize_config(b);
    CHECK(canonical_text(ca) == canonical_text(cb));
    CHECK(config_hash8(ca) == config_hash8(cb));
    CHECK(config_hash8(ca).size() == 8);
    CHECK(config_hash8(ca).find_first_not_of("0123456789abcdef") == std::string::npos);

    Json c = a;
    apply_override(c, "training.steps", "6");
    CHECK(config_hash8(finalize_config(c)) != config_hash8(ca));
}

TEST_CASE("kernel_from_config builds each configured variant") {
    Rng rng(4);

    SUBCASE("single leaf with defaults") {
        Kernel k = kernel_from_config(default_config()["model"], 2, rng);
        CHECK(k.variant == KernelVariant::Rbf);
        CHECK(k.variance == 1.0);
        CHECK(k.lengthscales.size() == 1);
        validate(k, 2);
    }

    SUBCASE("sum with per-leaf initialisers") {
        Json model = default_config()["model"];
        model["kernel"] = "rbf+matern12";
        model["kernel_variance"] = {1.5, 0.5};
        model["kernel_lengthscale"] = {10.0, 0.1};
        Kernel k = kernel_from_config(model, 1, rng);
        REQUIRE(k.variant == KernelVariant::Sum);
        REQUIRE(k.children.size() == 2);
        CHECK(k.children[0].variant == KernelVariant::Rbf);
        CHECK(k.children[0].variance == 1.5);
        CHECK(k.children[0].lengthscales(0) == 10.0);
        CHECK(k.children[1].variant == KernelVariant::Matern12);
        CHECK(k.children[1].variance == 0.5);
        CHECK(k.children[1].lengthscales(0) == 0.1);
        CHECK(total_variance(k) == 2.0);
        validate(k, 1);
    }

    SUBCASE("ard sizes lengthscales to the input dimension") {
        Json model = default_config()["model"];
        model["ard"] = true;
        model["kernel_lengthscale"] = 0.7;
        Kernel k = kernel_from_config(model, 3, rng);
        REQUIRE(k.lengthscales.size() == 3);
        CHECK(k.lengthscales.minCoeff() == 0.7);
        CHECK(k.lengthscales.maxCoeff() == 0.7);
        validate(k, 3);
    }

    SUBCASE("warp widths wrap the kernel in a tanh net") {
        Json model = default_config()["model"];
        model["warp_widths"] = {4, 2};
        model["ard"] = true;
        Kernel k = kernel_from_config(model, 3, rng);
        REQUIRE(k.variant == KernelVariant::Warped);
        REQUIRE(k.warp.size() == 2);
        CHECK(k.warp[0].W.rows() == 4);
        CHECK(k.warp[0].W.cols() == 3);
        CHECK(k.warp[1].W.rows() == 2);
        CHECK(k.warp[1].W.cols() == 4);
        REQUIRE(k.children.size() == 1);
        CHECK(k.children[0].lengthscales.size() == 2);  // ard over the warped space
        validate(k, 3);
    }

    SUBCASE("arccos0 leaf carries only a variance") {
        Json model = default_config()["model"];
        model["kernel"] = "arccos0";
        model["kernel_variance"] = 2.5;
        Kernel k = kernel_from_config(model, 2, rng);
        CHECK(k.variant == KernelVariant::ArcCosine0);
        CHECK(k.variance == 2.5);
        validate(k, 2);
    }
}

TEST_CASE("generate_from_config matches the generators") {
    SUBCASE("kink") {
        Config cfg = make_config({{"data.generator", "kink"},
                                  {"data.episodes", "3"},
                                  {"data.length", "7"},
                                  {"data.sigma_f2", "0.02"},
                                  {"data.sigma_g2", "0.05"},
                                  {"data.seed", "5"}});
        Dataset got = generate_from_config(cfg);
        Dataset want = kink_generate(3, 7, 0.02, 0.05, 5);
        REQUIRE(got.episodes.size() == want.episodes.size());
        for (std::size_t e = 0; e < want.episodes.size(); ++e)
            CHECK(bitwise_equal(got.episodes[e].Y, want.episodes[e].Y));
        CHECK(got.obs_dim == 1);
        CHECK(got.action_dim == 0);
    }

    SUBCASE("cartpole with a sinusoid policy") {
        Config cfg = make_config({{"data.generator", "cartpole"},
                                  {"data.episodes", "2"},
                                  {"data.length", "9"},
                                  {"data.seed", "8"},
                                  {"data.policy", "sinusoid"},
                                  {"data.policy_amplitude", "3.0"},
                                  {"data.policy_period", "12.0"}});
        Dataset got = generate_from_config(cfg);
        Dataset want = cartpole_simulate(2, 9, 0.1, sinusoid_policy(3.0, 12.0), 8, {});
        REQUIRE(got.episodes.size() == want.episodes.size());
        for (std::size_t e = 0; e < want.episodes.size(); ++e) {
            CHECK(bitwise_equal(got.episodes[e].Y, want.episodes[e].Y));
            CHECK(bitwise_equal(got.episodes[e].A, want.episodes[e].A));
        }
        CHECK(got.obs_dim == 4);
        CHECK(got.action_dim == 1);
    }
}

TEST_CASE("cmd_generate writes a loadable dataset") {
    TempDir dir("generate");

    SUBCASE("explicit output path skips the run directory") {
        const std::string out = dir.path + "/k.jsonl";
        Config cfg = make_config({{"data.generator", "kink"},
                                  {"data.episodes", "2"},
                                  {"data.length", "6"},
                                  {"data.out", out},
                                  {"output.root", dir.path + "/runs"}});
        CHECK(cmd_generate(cfg) == out);
        Dataset ds = load_dataset(out);
        CHECK(ds.episodes.size() == 2);
        CHECK(!std::filesystem::exists(dir.path + "/runs"));
    }

    SUBCASE("default output lands in a run directory with the config") {
        Config cfg = make_config({{"data.generator", "kink"},
                                  {"data.episodes", "2"},
                                  {"data.length", "6"},
                                  {"output.root", dir.path + "/runs"}});
        const std::string path = cmd_generate(cfg);
        CHECK(path.find(dir.path + "/runs/") == 0);
        CHECK(path.find("dataset.jsonl") != std::string::npos);
        CHECK(load_dataset(path).episodes.size() == 2);
        const std::string cfg_path =
            std::filesystem::path(path).parent_path().string() + "/config.json";
        Config echoed = finalize_config(parse_config_text(slurp(cfg_path)));
        CHECK(canonical_text(echoed) == canonical_text(cfg));
    }
}

TEST_CASE("cmd_train trains, checkpoints, and resumes bitwise") {
    TempDir dir("train");
    const std::string data_path = write_kink_dataset(dir);
    auto train_cfg = [&](const std::string& steps) {
        return make_config({{"data.path", data_path},
                            {"training.steps", steps},
                            {"training.batch_size", "4"},
                            {"training.seed", "12"},
                            {"model.num_inducing", "5"},
                            {"recognition.hidden_dim", "3"},
                            {"output.root", dir.path + "/runs"}});
    };

    TrainOutputs full = cmd_train(train_cfg("8"));
    CHECK(!full.aborted);
    CHECK(std::filesystem::exists(full.checkpoint_path));
    CHECK(count_lines(full.metrics_path) == 8);
    Config echoed =
        finalize_config(parse_config_text(slurp(full.run_dir + "/config.json")));
    CHECK(canonical_text(echoed) == canonical_text(train_cfg("8")));

    SUBCASE("zero steps still writes the initial checkpoint") {
        TrainOutputs none = cmd_train(train_cfg("0"));
        CHECK(std::filesystem::exists(none.checkpoint_path));
        CHECK(count_lines(none.metrics_path) == 0);
    }

    SUBCASE("same config and seed reproduce the checkpoint bitwise") {
        TrainOutputs again = cmd_train(train_cfg("8"));
        Checkpoint a = load_checkpoint(full.checkpoint_path);
        Checkpoint b = load_checkpoint(again.checkpoint_path);
        REQUIRE(a.tensors.size() == b.tensors.size());
        for (std::size_t i = 0; i < a.tensors.size(); ++i) {
            CHECK(a.tensors[i].first == b.tensors[i].first);
            CHECK(bitwise_equal(a.tensors[i].second, b.tensors[i].second));
        }
    }

    SUBCASE("interrupting and resuming matches the straight run bitwise") {
        TrainOutputs head = cmd_train(train_cfg("4"));
        Json resumed_tree = train_cfg("4").tree;
        resumed_tree["training"]["resume"] = head.checkpoint_path;
        TrainOutputs tail = cmd_train(finalize_config(resumed_tree));

        Checkpoint straight = load_checkpoint(full.checkpoint_path);
        Checkpoint stitched = load_checkpoint(tail.checkpoint_path);
        REQUIRE(straight.tensors.size() == stitched.tensors.size());
        for (std::size_t i = 0; i < straight.tensors.size(); ++i) {
            CHECK(straight.tensors[i].first == stitched.tensors[i].first);
            CHECK(bitwise_equal(straight.tensors[i].second, stitched.tensors[i].second));
        }
        CHECK(straight.rng_state == stitched.rng_state);
    }
}

TEST_CASE("cmd_eval scores rollouts against a dataset") {
    TempDir dir("eval");

    SUBCASE("rmse report structure on kink data") {
        const std::string data_path = write_kink_dataset(dir, 3, 8);
        Config train_cfg = make_config({{"data.path", data_path},
                                        {"training.steps", "2"},
                                        {"training.batch_size", "3"},
                                        {"model.num_inducing", "5"},
                                        {"recognition.hidden_dim", "3"},
                                        {"output.root", dir.path + "/runs"}});
        TrainOutputs trained = cmd_train(train_cfg);

        Json tree = train_cfg.tree;
        tree["data"]["checkpoint"] = trained.checkpoint_path;
        tree["rollout"]["num_samples"] = 4;
        tree["rollout"]["init_prefix"] = 3;
        Config eval_cfg = finalize_config(tree);
        const std::string path = cmd_eval(eval_cfg);

        Json report = parse_config_text(slurp(path));
        CHECK(report["metric"] == "rmse");
        CHECK(report["episodes"] == 3);
        CHECK(report["per_episode"].size() == 3);
        CHECK(report["per_channel"].size() == 1);
        for (const Json& v : report["per_episode"]) CHECK(v.get<double>() >= 0.0);
        CHECK(report["mean"].get<double>() > 0.0);
    }

    SUBCASE("tip error matches a local recomputation") {
        Config gen_cfg = make_config({{"data.generator", "cartpole"},
                                      {"data.episodes", "2"},
                                      {"data.length", "8"},
                                      {"data.seed", "2"},
                                      {"data.out", dir.path + "/cp.jsonl"}});
        cmd_generate(gen_cfg);

        std::vector<std::pair<std::string, std::string>> kv = {
            {"data.path", dir.path + "/cp.jsonl"},
            {"training.steps", "0"},
            {"training.seed", "6"},
            {"model.state_dim", "4"},
            {"model.num_inducing", "6"},
            {"recognition.hidden_dim", "4"},
            {"output.root", dir.path + "/runs"}};
        TrainOutputs trained = cmd_train(make_config(kv));

        kv.push_back({"data.checkpoint", trained.checkpoint_path});
        kv.push_back({"rollout.metric", "tip_error"});
        kv.push_back({"rollout.num_samples", "3"});
        kv.push_back({"rollout.seed", "9"});
        kv.push_back({"rollout.init_prefix", "4"});
        Config eval_cfg = make_config(kv);
        Json report = parse_config_text(slurp(cmd_eval(eval_cfg)));
        REQUIRE(report["per_episode"].size() == 2);

        Dataset ds = load_dataset(dir.path + "/cp.jsonl");
        Rng rng(6);
        GpssmModel structure =
            model_from_config(eval_cfg, ds.episodes, ds.obs_dim, ds.action_dim, rng);
        GpssmModel model =
            model_from_checkpoint(structure, load_checkpoint(trained.checkpoint_path));
        for (std::size_t e = 0; e < ds.episodes.size(); ++e) {
            const Episode& ep = ds.episodes[e];
            auto [m0, L0] = encode_initial(model, ep.Y.topRows(4), ep.A.topRows(4));
            RolloutOptions opt;
            opt.num_samples = 3;
            opt.seed = 9 + e;
            RolloutResult r = free_simulate(model, m0, L0, ep.A, opt);
            const double want = tip_error(r.observations, ep.Y, 0.5, 0, 2);
            CHECK(report["per_episode"][e].get<double>() == want);
        }
    }

    SUBCASE("structured errors for unusable settings") {
        const std::string data_path = write_kink_dataset(dir, 2, 6);
        Config train_cfg = make_config({{"data.path", data_path},
                                        {"training.steps", "0"},
                                        {"model.num_inducing", "4"},
                                        {"recognition.hidden_dim", "3"},
                                        {"output.root", dir.path + "/runs"}});
        TrainOutputs trained = cmd_train(train_cfg);
        auto eval_with = [&](const std::string& key, const std::string& value) {
            Json tree = train_cfg.tree;
            tree["data"]["checkpoint"] = trained.checkpoint_path;
            apply_override(tree, key, value);
            return cmd_eval(finalize_config(tree));
        };
        CHECK_CONFIG_ERROR(eval_with("rollout.metric", "tip_error"), "angle_channel");
        CHECK_CONFIG_ERROR(eval_with("rollout.init_prefix", "7"), "shorter than the prefix");
        Json no_ckpt = train_cfg.tree;
        CHECK_CONFIG_ERROR(cmd_eval(finalize_config(no_ckpt)), "data.checkpoint");
    }
}

TEST_CASE("cmd_export tabulates the learned transition") {
    TempDir dir("export");
    const std::string data_path = write_kink_dataset(dir);
    std::vector<std::pair<std::string, std::string>> kv = {
        {"data.path", data_path},
        {"training.steps", "3"},
        {"training.batch_size", "4"},
        {"model.num_inducing", "5"},
        {"recognition.hidden_dim", "3"},
        {"output.root", dir.path + "/runs"}};
    TrainOutputs trained = cmd_train(make_config(kv));

    kv.push_back({"data.checkpoint", trained.checkpoint_path});
    kv.push_back({"export.grid_min", "0.0"});
    kv.push_back({"export.grid_max", "6.0"});
    kv.push_back({"export.grid_points", "13"});
    Config cfg = make_config(kv);
    const std::string path = cmd_export(cfg);
    CHECK(count_lines(path) == 1 + 13 + 5);

    // Rebuilding the model from the same checkpoint and probing the same grid
    // must reproduce the exported file byte for byte.
    Dataset ds = load_dataset(data_path);
    Rng rng(0);
    GpssmModel structure = model_from_config(cfg, ds.episodes, ds.obs_dim, ds.action_dim, rng);
    GpssmModel model =
        model_from_checkpoint(structure, load_checkpoint(trained.checkpoint_path));
    Matrix probes = Vector::LinSpaced(13, 0.0, 6.0);
    const std::string again = dir.path + "/expected.csv";
    write_transition_csv(transition_grid(model, probes), again);
    CHECK(slurp(path) == slurp(again));

    Json tree = cfg.tree;
    tree["export"]["channel"] = 3;
    CHECK_CONFIG_ERROR(cmd_export(finalize_config(tree)), "export.channel");
}

TEST_CASE("run_cli maps outcomes to exit codes") {
    TempDir dir("exit");
    const std::string out = dir.path + "/ds.jsonl";

    CHECK(call_cli({}) == 2);  // missing subcommand
    CHECK(call_cli({"train", "--data.path", dir.path + "/missing.jsonl"}) == 2);
    CHECK(call_cli({"train", "--config", dir.path + "/missing.json"}) == 4);
    CHECK(call_cli({"train", "--model.stat_dim", "2"}) == 2);  // unknown flag

    CHECK(call_cli({"generate", "--data.episodes", "2", "--data.length", "5",
                    "--data.out", out}) == 0);
    CHECK(load_dataset(out).episodes.size() == 2);

    CHECK(call_cli({"generate", "--set", "data.episodes=3", "--set", "data.out=" + out}) == 0);
    CHECK(load_dataset(out).episodes.size() == 3);

    SUBCASE("flags override the config file") {
        const std::string cfg_path = dir.path + "/c.json";
        {
            std::ofstream cfg(cfg_path);
            cfg << R"({"data": {"episodes": 2, "length": 5, "out": ")" << out << R"("}})";
        }
        CHECK(call_cli({"generate", "--config", cfg_path, "--data.episodes", "4"}) == 0);
        CHECK(load_dataset(out).episodes.size() == 4);
    }

    SUBCASE("a diverging run exits with the numerical code") {
        CHECK(call_cli({"generate", "--data.episodes", "4", "--data.length", "6",
                        "--data.out", out}) == 0);
        CHECK(call_cli({"train", "--data.path", out, "--training.steps", "10",
                        "--training.learning_rate", "1e30", "--model.num_inducing", "4",
                        "--recognition.hidden_dim", "3",
                        "--output.root", dir.path + "/runs"}) == 3);
    }
}

#include "gpssm/cli.hpp"

#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <vector>

#include "gpssm/errors.hpp"
#include "gpssm/rollout.hpp"

namespace gpssm {

namespace {

std::string require_file(const Config& config, const std::string& key,
                         const std::string& purpose) {
    const std::string path = config.at(key).get<std::string>();
    if (path.empty()) throw ConfigError(key + ": required for " + purpose);
    if (!std::filesystem::exists(path))
        throw ConfigError(key + ": file not found: " + path);
    return path;
}

void write_config_copy(const Config& config, const std::string& run_dir) {
    const std::string path = run_dir + "/config.json";
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << config.tree.dump(2) << '\n';
}

Matrix action_prefix(const Episode& ep, Eigen::Index rows) {
    return ep.A.cols() > 0 ? Matrix(ep.A.topRows(rows)) : Matrix(rows, 0);
}

RolloutOptions rollout_options(const Config& config, std::uint64_t episode_index) {
    RolloutOptions opt;
    opt.num_samples = config.at("rollout.num_samples").get<int>();
    opt.deterministic = config.at("rollout.deterministic").get<bool>();
    opt.freeze_u = config.at("rollout.freeze_u").get<bool>();
    opt.obs_noise = config.at("rollout.obs_noise").get<bool>();
    opt.seed = config.at("rollout.seed").get<std::uint64_t>() + episode_index;
    return opt;
}

/// Rebuilds the trained model: structure from the config (shapes, kernel
/// wiring, emission mode), values from the checkpoint.
GpssmModel model_for_eval(const Config& config, const Checkpoint& cp,
                          const std::vector<Episode>& episodes, Eigen::Index obs_dim,
                          Eigen::Index action_dim) {
    Rng rng(config.at("training.seed").get<std::uint64_t>());
    GpssmModel structure = model_from_config(config, episodes, obs_dim, action_dim, rng);
    return model_from_checkpoint(structure, cp);
}

}  // namespace

std::string cmd_generate(const Config& config) {
    Dataset ds = generate_from_config(config);
    std::string out = config.at("data.out").get<std::string>();
    if (out.empty()) {
        const std::string run_dir = make_run_dir(config);
        write_config_copy(config, run_dir);
        out = run_dir + "/dataset.jsonl";
    }
    save_dataset(ds, out);
    return out;
}

TrainOutputs cmd_train(const Config& config) {
    const std::string data_path = require_file(config, "data.path", "train");
    const std::string resume = config.at("training.resume").get<std::string>();
    if (!resume.empty() && !std::filesystem::exists(resume))
        throw ConfigError("training.resume: file not found: " + resume);

    Dataset ds = load_dataset(data_path);
    const std::string run_dir = make_run_dir(config);
    write_config_copy(config, run_dir);
    TrainConfig tc = train_config_from(config, run_dir);

    Rng rng(tc.seed);
    GpssmModel structure =
        model_from_config(config, ds.episodes, ds.obs_dim, ds.action_dim, rng);
    TrainResult result = resume.empty()
                             ? train(structure, ds, tc)
                             : resume_training(structure, load_checkpoint(resume), ds, tc);

    TrainOutputs out;
    out.run_dir = run_dir;
    out.checkpoint_path = result.checkpoint_path;
    out.metrics_path = result.metrics_path;
    out.aborted = result.aborted;
    out.abort_reason = result.abort_reason;
    return out;
}

std::string cmd_eval(const Config& config) {
    const std::string data_path = require_file(config, "data.path", "eval");
    const std::string cp_path = require_file(config, "data.checkpoint", "eval");
    Dataset ds = load_dataset(data_path);
    GpssmModel model =
        model_for_eval(config, load_checkpoint(cp_path), ds.episodes, ds.obs_dim, ds.action_dim);

    const Eigen::Index prefix = config.at("rollout.init_prefix").get<Eigen::Index>();
    const std::string metric = config.at("rollout.metric").get<std::string>();
    const Eigen::Index pos = config.at("rollout.position_channel").get<Eigen::Index>();
    const Eigen::Index angle = config.at("rollout.angle_channel").get<Eigen::Index>();
    if (metric == "tip_error" && (pos >= ds.obs_dim || angle >= ds.obs_dim))
        throw ConfigError("rollout.position_channel/angle_channel: out of range for " +
                          std::to_string(ds.obs_dim) + " observation channels");

    std::vector<double> per_episode;
    Vector channel_sq = Vector::Zero(ds.obs_dim);
    long channel_rows = 0;
    for (std::size_t e = 0; e < ds.episodes.size(); ++e) {
        const Episode& ep = ds.episodes[e];
        if (ep.horizon() < prefix)
            throw ConfigError("rollout.init_prefix: episode " + std::to_string(e) +
                              " is shorter than the prefix");
        auto [m0, L0] = encode_initial(model, ep.Y.topRows(prefix), action_prefix(ep, prefix));
        RolloutResult r = free_simulate(model, m0, L0, ep.A, rollout_options(config, e));

        if (metric == "tip_error") {
            per_episode.push_back(
                tip_error(r.observations, ep.Y,
                          config.at("rollout.pole_length").get<double>(), pos, angle));
        } else {
            Matrix mean = Matrix::Zero(ep.horizon(), ds.obs_dim);
            for (const Matrix& Y : r.observations) mean += Y;
            mean /= static_cast<double>(r.observations.size());
            Matrix err = mean - ep.Y;
            channel_sq += err.array().square().colwise().sum().matrix().transpose();
            channel_rows += ep.horizon();
            per_episode.push_back(std::sqrt(err.array().square().mean()));
        }
    }

    Json report;
    report["metric"] = metric;
    report["episodes"] = per_episode.size();
    report["per_episode"] = per_episode;
    double total = 0.0;
    for (double v : per_episode) total += v;
    report["mean"] = per_episode.empty() ? 0.0 : total / static_cast<double>(per_episode.size());
    if (metric == "rmse") {
        std::vector<double> per_channel;
        for (Eigen::Index c = 0; c < ds.obs_dim; ++c)
            per_channel.push_back(std::sqrt(channel_sq(c) / static_cast<double>(channel_rows)));
        report["per_channel"] = per_channel;
    }

    const std::string run_dir = make_run_dir(config);
    write_config_copy(config, run_dir);
    const std::string path = run_dir + "/eval.json";
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << report.dump(2) << '\n';
    return path;
}

std::string cmd_export(const Config& config) {
    const std::string cp_path = require_file(config, "data.checkpoint", "export");
    Checkpoint cp = load_checkpoint(cp_path);

    // No dataset is involved, so the structural dimensions come from the
    // checkpoint itself: Z fixes the input width, the emission map (when
    // trained) fixes the observation count, full observation otherwise.
    const Eigen::Index state_dim = config.at("model.state_dim").get<Eigen::Index>();
    if (!cp.has_tensor("gp.Z")) throw ConfigError("data.checkpoint: gp.Z tensor missing");
    const Eigen::Index input_dim = cp.tensor("gp.Z").cols();
    if (input_dim < state_dim)
        throw ConfigError("model.state_dim: exceeds the checkpoint input width");
    const Eigen::Index action_dim = input_dim - state_dim;
    const Eigen::Index obs_dim =
        cp.has_tensor("emission.W") ? cp.tensor("emission.W").rows() : state_dim;

    std::vector<Episode> synthetic(1);
    synthetic[0].Y = Matrix::Zero(2, obs_dim);
    synthetic[0].A = Matrix::Zero(2, action_dim);
    GpssmModel model = model_for_eval(config, cp, synthetic, obs_dim, action_dim);

    const Eigen::Index channel = config.at("export.channel").get<Eigen::Index>();
    if (channel >= input_dim)
        throw ConfigError("export.channel: out of range for " + std::to_string(input_dim) +
                          " transition inputs");
    const Eigen::Index points = config.at("export.grid_points").get<Eigen::Index>();
    Matrix probes =
        Matrix::Constant(points, input_dim, config.at("export.fill").get<double>());
    probes.col(channel) = Vector::LinSpaced(points, config.at("export.grid_min").get<double>(),
                                            config.at("export.grid_max").get<double>());

    const std::string run_dir = make_run_dir(config);
    write_config_copy(config, run_dir);
    const std::string path = run_dir + "/transition.csv";
    write_transition_csv(transition_grid(model, probes), path);
    return path;
}

namespace {

void collect_leaf_paths(const Json& node, const std::string& prefix,
                        std::vector<std::string>& out) {
    for (auto it = node.begin(); it != node.end(); ++it) {
        const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (it.value().is_object())
            collect_leaf_paths(it.value(), path, out);
        else
            out.push_back(path);
    }
}

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::map<std::string, std::string> flag_values;
    std::map<std::string, CLI::Option*> flag_options;
};

void add_common(CLI::App* cmd, CommonArgs& args, const std::vector<std::string>& leaves) {
    cmd->add_option("--config", args.config_path, "JSON configuration file");
    cmd->add_option("--set", args.sets, "override as dotted.key=value")->allow_extra_args(false);
    for (const std::string& leaf : leaves)
        args.flag_options[leaf] =
            cmd->add_option("--" + leaf, args.flag_values[leaf], "override " + leaf);
}

Config build_config(const CommonArgs& args) {
    Json tree = args.config_path.empty() ? Json::object() : load_config_file(args.config_path);
    for (const std::string& set : args.sets) {
        const auto eq = set.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("--set expects dotted.key=value, got '" + set + "'");
        apply_override(tree, set.substr(0, eq), set.substr(eq + 1));
    }
    for (const auto& [leaf, option] : args.flag_options)
        if (option->count() > 0) apply_override(tree, leaf, args.flag_values.at(leaf));
    return finalize_config(tree);
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"Gaussian-process state-space model toolkit"};
    app.require_subcommand(1);
    std::vector<std::string> leaves;
    collect_leaf_paths(default_config(), "", leaves);

    CommonArgs generate_args, train_args, eval_args, export_args;
    CLI::App* generate = app.add_subcommand("generate", "write a synthetic dataset");
    CLI::App* train = app.add_subcommand("train", "optimise the model on a dataset");
    CLI::App* eval = app.add_subcommand("eval", "score free simulations on a dataset");
    CLI::App* exp = app.add_subcommand("export", "tabulate the learned transition");
    add_common(generate, generate_args, leaves);
    add_common(train, train_args, leaves);
    add_common(eval, eval_args, leaves);
    add_common(exp, export_args, leaves);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (generate->parsed()) {
            std::cout << "dataset: " << cmd_generate(build_config(generate_args)) << "\n";
        } else if (train->parsed()) {
            TrainOutputs out = cmd_train(build_config(train_args));
            std::cout << "run_dir: " << out.run_dir << "\n"
                      << "checkpoint: " << out.checkpoint_path << "\n"
                      << "metrics: " << out.metrics_path << "\n";
            if (out.aborted) {
                std::cerr << "training aborted: " << out.abort_reason << "\n";
                return 3;
            }
        } else if (eval->parsed()) {
            std::cout << "metrics: " << cmd_eval(build_config(eval_args)) << "\n";
        } else if (exp->parsed()) {
            std::cout << "transition: " << cmd_export(build_config(export_args)) << "\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const InputError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 4;
    }
    return 0;
}

}  // namespace gpssm

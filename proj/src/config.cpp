#include "gpssm/config.hpp"

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <vector>

#include "gpssm/errors.hpp"

namespace gpssm {

namespace {

std::vector<std::string> split_path(const std::string& dotted) {
    std::vector<std::string> parts;
    std::stringstream ss(dotted);
    std::string part;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    return parts;
}

std::vector<std::string> kernel_leaves(const std::string& spec, const std::string& key) {
    std::vector<std::string> leaves;
    std::stringstream ss(spec);
    std::string piece;
    while (std::getline(ss, piece, '+')) {
        const auto first = piece.find_first_not_of(" \t");
        const auto last = piece.find_last_not_of(" \t");
        if (first == std::string::npos) throw ConfigError(key + ": empty kernel leaf");
        piece = piece.substr(first, last - first + 1);
        if (piece != "rbf" && piece != "matern12" && piece != "arccos0")
            throw ConfigError(key + ": unknown kernel leaf '" + piece + "'");
        leaves.push_back(piece);
    }
    if (leaves.empty()) throw ConfigError(key + ": kernel must name at least one leaf");
    return leaves;
}

/// Validates one section against its expected keys, producing errors that
/// name the full dotted path of the offending key.
class Checker {
  public:
    Checker(const Json& section, std::string prefix)
        : section_(section), prefix_(std::move(prefix)) {}

    long integer(const std::string& key, long lo) {
        const Json& v = fetch(key);
        if (!v.is_number_integer())
            throw ConfigError(path(key) + ": must be an integer");
        const long n = v.get<long>();
        if (n < lo)
            throw ConfigError(path(key) + ": must be >= " + std::to_string(lo));
        return n;
    }

    double number(const std::string& key, double lo, bool exclusive) {
        const Json& v = fetch(key);
        if (!v.is_number()) throw ConfigError(path(key) + ": must be a number");
        const double x = v.get<double>();
        if (!std::isfinite(x) || (exclusive ? !(x > lo) : !(x >= lo)))
            throw ConfigError(path(key) + ": must be " + (exclusive ? "> " : ">= ") +
                              std::to_string(lo));
        return x;
    }

    double any_number(const std::string& key) {
        const Json& v = fetch(key);
        if (!v.is_number() || !std::isfinite(v.get<double>()))
            throw ConfigError(path(key) + ": must be a finite number");
        return v.get<double>();
    }

    bool boolean(const std::string& key) {
        const Json& v = fetch(key);
        if (!v.is_boolean()) throw ConfigError(path(key) + ": must be true or false");
        return v.get<bool>();
    }

    std::string text(const std::string& key) {
        const Json& v = fetch(key);
        if (!v.is_string()) throw ConfigError(path(key) + ": must be a string");
        return v.get<std::string>();
    }

    std::string choice(const std::string& key, const std::vector<std::string>& allowed) {
        const std::string v = text(key);
        for (const std::string& a : allowed)
            if (v == a) return v;
        std::string options;
        for (const std::string& a : allowed) options += (options.empty() ? "" : ", ") + a;
        throw ConfigError(path(key) + ": must be one of " + options);
    }

    // A positive scalar, or an array of positive scalars with exactly
    // `count` entries.
    void per_leaf(const std::string& key, std::size_t count) {
        const Json& v = fetch(key);
        if (v.is_number()) {
            if (!(v.get<double>() > 0.0)) throw ConfigError(path(key) + ": must be > 0");
            return;
        }
        if (!v.is_array())
            throw ConfigError(path(key) + ": must be a number or an array of numbers");
        if (v.size() != count)
            throw ConfigError(path(key) + ": need one entry per kernel leaf (" +
                              std::to_string(count) + ")");
        for (const Json& e : v)
            if (!e.is_number() || !(e.get<double>() > 0.0))
                throw ConfigError(path(key) + ": entries must be > 0");
    }

    void int_array(const std::string& key, long lo) {
        const Json& v = fetch(key);
        if (!v.is_array()) throw ConfigError(path(key) + ": must be an array of integers");
        for (const Json& e : v)
            if (!e.is_number_integer() || e.get<long>() < lo)
                throw ConfigError(path(key) + ": entries must be integers >= " +
                                  std::to_string(lo));
    }

    void finish() const {
        for (auto it = section_.begin(); it != section_.end(); ++it)
            if (!seen_.contains(it.key()))
                throw ConfigError("config: unknown key " + prefix_ + "." + it.key());
    }

  private:
    std::string path(const std::string& key) const { return prefix_ + "." + key; }

    const Json& fetch(const std::string& key) {
        seen_.insert(key);
        auto it = section_.find(key);
        if (it == section_.end()) throw ConfigError("config: missing key " + path(key));
        return *it;
    }

    const Json& section_;
    std::string prefix_;
    std::set<std::string> seen_;
};

void merge_missing(Json& tree, const Json& defaults) {
    for (auto it = defaults.begin(); it != defaults.end(); ++it) {
        auto found = tree.find(it.key());
        if (found == tree.end()) {
            tree[it.key()] = it.value();
        } else if (it.value().is_object()) {
            if (!found->is_object())
                throw ConfigError("config: " + it.key() + " must be an object");
            merge_missing(*found, it.value());
        }
    }
}

void check_schema(const Json& tree) {
    static const std::set<std::string> sections = {
        "model", "recognition", "training", "data", "rollout", "export", "output"};
    for (auto it = tree.begin(); it != tree.end(); ++it)
        if (!sections.contains(it.key()))
            throw ConfigError("config: unknown key " + it.key());

    {
        Checker c(tree.at("model"), "model");
        c.integer("state_dim", 1);
        c.integer("num_inducing", 1);
        const std::string spec = c.text("kernel");
        const std::size_t leaves = kernel_leaves(spec, "model.kernel").size();
        c.per_leaf("kernel_variance", leaves);
        c.per_leaf("kernel_lengthscale", leaves);
        c.boolean("ard");
        c.int_array("warp_widths", 1);
        c.number("sigma_f2", 0.0, true);
        c.number("sigma_g2", 0.0, true);
        c.choice("emission", {"learned", "fixed"});
        c.finish();
    }
    {
        Checker c(tree.at("recognition"), "recognition");
        c.integer("hidden_dim", 1);
        c.finish();
    }
    {
        Checker c(tree.at("training"), "training");
        c.integer("steps", 0);
        c.integer("batch_size", 1);
        c.number("learning_rate", 0.0, true);
        c.integer("num_samples", 1);
        c.integer("seed", 0);
        c.integer("checkpoint_every", 0);
        c.number("clip_norm", 0.0, false);
        c.text("resume");
        c.finish();
    }
    {
        Checker c(tree.at("data"), "data");
        c.text("path");
        c.text("checkpoint");
        c.text("out");
        c.choice("generator", {"kink", "cartpole"});
        c.integer("episodes", 1);
        c.integer("length", 1);
        c.integer("seed", 0);
        c.number("sigma_f2", 0.0, false);
        c.number("sigma_g2", 0.0, false);
        c.number("dt", 0.0, true);
        c.boolean("full_observation");
        c.integer("action_lag", 0);
        c.number("obs_noise_std", 0.0, false);
        c.choice("policy", {"sinusoid", "smooth_random"});
        c.number("policy_amplitude", 0.0, true);
        c.number("policy_period", 0.0, true);
        c.number("cart_mass", 0.0, true);
        c.number("pole_mass", 0.0, true);
        c.number("pole_length", 0.0, true);
        c.number("gravity", 0.0, true);
        c.finish();
    }
    {
        Checker c(tree.at("rollout"), "rollout");
        c.integer("num_samples", 1);
        c.integer("horizon", 1);
        c.integer("init_prefix", 1);
        c.boolean("deterministic");
        c.boolean("freeze_u");
        c.boolean("obs_noise");
        c.integer("seed", 0);
        c.choice("metric", {"rmse", "tip_error"});
        c.number("pole_length", 0.0, true);
        c.integer("position_channel", 0);
        c.integer("angle_channel", 0);
        c.finish();
    }
    {
        Checker c(tree.at("export"), "export");
        c.any_number("grid_min");
        const double hi = c.any_number("grid_max");
        const double lo = tree.at("export").at("grid_min").get<double>();
        if (!(hi > lo)) throw ConfigError("export.grid_max: must exceed export.grid_min");
        c.integer("grid_points", 2);
        c.integer("channel", 0);
        c.any_number("fill");
        c.finish();
    }
    {
        Checker c(tree.at("output"), "output");
        c.text("root");
        c.finish();
    }
}

}  // namespace

const Json& Config::at(const std::string& dotted) const {
    const Json* node = &tree;
    for (const std::string& part : split_path(dotted)) {
        if (!node->is_object() || !node->contains(part))
            throw ConfigError("config: missing key " + dotted);
        node = &node->at(part);
    }
    return *node;
}

Json default_config() {
    Json d;
    d["model"] = {{"state_dim", 1},
                  {"num_inducing", 20},
                  {"kernel", "rbf"},
                  {"kernel_variance", 1.0},
                  {"kernel_lengthscale", 1.0},
                  {"ard", false},
                  {"warp_widths", Json::array()},
                  {"sigma_f2", 0.01},
                  {"sigma_g2", 0.1},
                  {"emission", "learned"}};
    d["recognition"] = {{"hidden_dim", 20}};
    d["training"] = {{"steps", 2000},
                     {"batch_size", 16},
                     {"learning_rate", 1e-3},
                     {"num_samples", 1},
                     {"seed", 0},
                     {"checkpoint_every", 0},
                     {"clip_norm", 0.0},
                     {"resume", ""}};
    d["data"] = {{"path", ""},
                 {"checkpoint", ""},
                 {"out", ""},
                 {"generator", "kink"},
                 {"episodes", 200},
                 {"length", 10},
                 {"seed", 0},
                 {"sigma_f2", 0.01},
                 {"sigma_g2", 0.1},
                 {"dt", 0.1},
                 {"full_observation", true},
                 {"action_lag", 0},
                 {"obs_noise_std", 0.0},
                 {"policy", "smooth_random"},
                 {"policy_amplitude", 5.0},
                 {"policy_period", 10.0},
                 {"cart_mass", 0.5},
                 {"pole_mass", 0.5},
                 {"pole_length", 0.5},
                 {"gravity", 9.82}};
    d["rollout"] = {{"num_samples", 30},
                    {"horizon", 30},
                    {"init_prefix", 5},
                    {"deterministic", false},
                    {"freeze_u", false},
                    {"obs_noise", false},
                    {"seed", 0},
                    {"metric", "rmse"},
                    {"pole_length", 0.5},
                    {"position_channel", 0},
                    {"angle_channel", 2}};
    d["export"] = {{"grid_min", 0.0},
                   {"grid_max", 6.0},
                   {"grid_points", 121},
                   {"channel", 0},
                   {"fill", 0.0}};
    d["output"] = {{"root", "runs"}};
    return d;
}

Json parse_config_text(const std::string& text) {
    Json parsed = Json::parse(text, nullptr, false);
    if (parsed.is_discarded()) throw ConfigError("config: malformed JSON");
    if (!parsed.is_object()) throw ConfigError("config: top level must be an object");
    return parsed;
}

Json load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot read " + path);
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_config_text(buffer.str());
}

void apply_override(Json& tree, const std::string& dotted, const std::string& value) {
    const std::vector<std::string> parts = split_path(dotted);
    if (parts.empty() || dotted.empty())
        throw ConfigError("config: empty override key");
    Json* node = &tree;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        Json& next = (*node)[parts[i]];
        if (!next.is_object()) {
            if (!next.is_null())
                throw ConfigError("config: " + dotted + " descends through a non-object");
            next = Json::object();
        }
        node = &next;
    }
    Json parsed = Json::parse(value, nullptr, false);
    (*node)[parts.back()] = parsed.is_discarded() ? Json(value) : parsed;
}

Config finalize_config(Json tree) {
    if (!tree.is_object()) throw ConfigError("config: top level must be an object");
    merge_missing(tree, default_config());
    check_schema(tree);
    return Config{std::move(tree)};
}

std::string canonical_text(const Config& config) {
    // nlohmann objects iterate in sorted key order, so a plain dump is
    // already canonical.
    return config.tree.dump();
}

std::string config_hash8(const Config& config) {
    const std::string text = canonical_text(config);
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf, 8);
}

std::string make_run_dir(const Config& config) {
    const std::string root = config.at("output.root").get<std::string>();
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm);
    const std::string base = root + "/" + config_hash8(config) + "-" + stamp;
    std::string dir = base;
    std::error_code ec;
    for (int suffix = 1; std::filesystem::exists(dir); ++suffix)
        dir = base + "-" + std::to_string(suffix);
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("config: cannot create run directory " + dir);
    return dir;
}

Kernel kernel_from_config(const Json& model, Eigen::Index input_dim, Rng& rng) {
    const std::vector<std::string> names =
        kernel_leaves(model.at("kernel").get<std::string>(), "model.kernel");
    std::vector<int> widths;
    for (const Json& w : model.at("warp_widths")) widths.push_back(w.get<int>());
    const Eigen::Index leaf_dim = widths.empty() ? input_dim : widths.back();
    const bool ard = model.at("ard").get<bool>();

    auto leaf_value = [&](const char* key, std::size_t i) {
        const Json& v = model.at(key);
        return v.is_array() ? v.at(i).get<double>() : v.get<double>();
    };
    std::vector<Kernel> leaves;
    for (std::size_t i = 0; i < names.size(); ++i) {
        const double variance = leaf_value("kernel_variance", i);
        if (names[i] == "arccos0") {
            leaves.push_back(make_arccos0(variance));
            continue;
        }
        Vector ls = Vector::Constant(ard ? leaf_dim : 1, leaf_value("kernel_lengthscale", i));
        leaves.push_back(names[i] == "rbf" ? make_rbf(variance, ls)
                                           : make_matern12(variance, ls));
    }
    Kernel k = names.size() == 1 ? std::move(leaves.front()) : make_sum(std::move(leaves));
    if (!widths.empty()) {
        std::vector<WarpLayer> warp;
        Eigen::Index in = input_dim;
        for (int w : widths) {
            WarpLayer layer;
            layer.W = rng.normal_matrix(w, in) / std::sqrt(static_cast<double>(in));
            layer.b = Vector::Zero(w);
            warp.push_back(std::move(layer));
            in = w;
        }
        k = make_warped(std::move(k), std::move(warp));
    }
    return k;
}

GpssmModel model_from_config(const Config& config, const std::vector<Episode>& episodes,
                             Eigen::Index obs_dim, Eigen::Index action_dim, Rng& rng) {
    const Json& model = config.tree.at("model");
    ModelInit init;
    init.state_dim = model.at("state_dim").get<Eigen::Index>();
    init.kernel = kernel_from_config(model, init.state_dim + action_dim, rng);
    init.num_inducing = model.at("num_inducing").get<Eigen::Index>();
    init.hidden_dim = config.at("recognition.hidden_dim").get<Eigen::Index>();
    init.sigma_f2 = model.at("sigma_f2").get<double>();
    init.sigma_g2 = model.at("sigma_g2").get<double>();
    init.learn_emission = model.at("emission").get<std::string>() == "learned";
    return init_model(init, episodes, obs_dim, action_dim, rng);
}

Dataset generate_from_config(const Config& config) {
    const Json& data = config.tree.at("data");
    const std::string generator = data.at("generator").get<std::string>();
    const int episodes = data.at("episodes").get<int>();
    const int length = data.at("length").get<int>();
    const std::uint64_t seed = data.at("seed").get<std::uint64_t>();
    if (generator == "kink")
        return kink_generate(episodes, length, data.at("sigma_f2").get<double>(),
                             data.at("sigma_g2").get<double>(), seed);

    const double amplitude = data.at("policy_amplitude").get<double>();
    ActionFn policy = data.at("policy").get<std::string>() == "sinusoid"
                          ? sinusoid_policy(amplitude, data.at("policy_period").get<double>())
                          : smooth_random_policy(seed, amplitude);
    CartPoleOptions opts;
    opts.params.cart_mass = data.at("cart_mass").get<double>();
    opts.params.pole_mass = data.at("pole_mass").get<double>();
    opts.params.pole_length = data.at("pole_length").get<double>();
    opts.params.gravity = data.at("gravity").get<double>();
    opts.full_observation = data.at("full_observation").get<bool>();
    opts.action_lag = data.at("action_lag").get<int>();
    opts.obs_noise_std = data.at("obs_noise_std").get<double>();
    return cartpole_simulate(episodes, length, data.at("dt").get<double>(), policy, seed, opts);
}

TrainConfig train_config_from(const Config& config, const std::string& run_dir) {
    const Json& t = config.tree.at("training");
    TrainConfig tc;
    tc.steps = t.at("steps").get<int>();
    tc.batch_size = t.at("batch_size").get<int>();
    tc.num_samples = t.at("num_samples").get<int>();
    tc.alpha = t.at("learning_rate").get<double>();
    tc.clip_norm = t.at("clip_norm").get<double>();
    tc.seed = t.at("seed").get<std::uint64_t>();
    tc.checkpoint_every = t.at("checkpoint_every").get<int>();
    tc.run_dir = run_dir;
    tc.config_echo = canonical_text(config);
    return tc;
}

}  // namespace gpssm

#include "gpssm/optim.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <unordered_map>

#include "gpssm/errors.hpp"

namespace gpssm {

namespace {

using json = nlohmann::json;

bool all_finite(const Matrix& m) { return m.allFinite(); }

void require_aligned(const ParamSet& a, const ParamSet& b, const std::string& what) {
    if (a.size() != b.size())
        throw InputError(what + ": expected " + std::to_string(a.size()) + " tensors, got " +
                         std::to_string(b.size()));
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].first != b[i].first)
            throw InputError(what + ": name mismatch at " + std::to_string(i) + " (" +
                             a[i].first + " vs " + b[i].first + ")");
        if (a[i].second.rows() != b[i].second.rows() || a[i].second.cols() != b[i].second.cols())
            throw InputError(what + ": shape mismatch for " + a[i].first);
    }
}

}  // namespace

const Matrix& get_param(const ParamSet& params, const std::string& name) {
    for (const auto& [n, value] : params)
        if (n == name) return value;
    throw InputError("get_param: no parameter named " + name);
}

double global_norm(const ParamSet& grads) {
    double sq = 0.0;
    for (const auto& [name, g] : grads) sq += g.squaredNorm();
    return std::sqrt(sq);
}

void clip_global_norm(ParamSet& grads, double max_norm) {
    if (max_norm <= 0.0) throw InputError("clip_global_norm: max_norm must be positive");
    const double norm = global_norm(grads);
    if (norm <= max_norm) return;
    const double scale = max_norm / norm;
    for (auto& [name, g] : grads) g *= scale;
}

GradientResult gradient(const LossGraph& loss, const ParamSet& params) {
    ad::Tape tape;
    std::vector<ad::Var> leaves;
    leaves.reserve(params.size());
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < params.size(); ++i) {
        leaves.push_back(tape.leaf(params[i].second));
        index.emplace(params[i].first, i);
    }
    auto lookup = [&](const std::string& name) -> ad::Var {
        auto it = index.find(name);
        if (it == index.end()) throw InputError("gradient: no parameter named " + name);
        return leaves[it->second];
    };

    ad::Var root = loss(tape, lookup);
    GradientResult result;
    result.value = root.scalar();
    if (!std::isfinite(result.value)) throw NumericalError("gradient: non-finite objective");
    tape.backward(root);
    result.grads.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        Matrix g = tape.grad(leaves[i]);
        if (!all_finite(g))
            throw NumericalError("gradient: non-finite gradient for " + params[i].first);
        result.grads.emplace_back(params[i].first, std::move(g));
    }
    return result;
}

AdamState init_adam(const ParamSet& params, double alpha, double beta1, double beta2,
                    double epsilon) {
    if (alpha <= 0.0 || epsilon <= 0.0 || beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 ||
        beta2 >= 1.0)
        throw InputError("init_adam: need alpha, epsilon > 0 and betas in [0, 1)");
    AdamState state;
    state.alpha = alpha;
    state.beta1 = beta1;
    state.beta2 = beta2;
    state.epsilon = epsilon;
    for (const auto& [name, value] : params) {
        state.m.emplace_back(name, Matrix::Zero(value.rows(), value.cols()));
        state.v.emplace_back(name, Matrix::Zero(value.rows(), value.cols()));
    }
    return state;
}

void adam_step(AdamState& state, ParamSet& params, const ParamSet& grads) {
    require_aligned(params, grads, "adam_step gradients");
    require_aligned(params, state.m, "adam_step first moments");
    require_aligned(params, state.v, "adam_step second moments");
    state.step += 1;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Matrix& g = grads[i].second;
        Matrix& m = state.m[i].second;
        Matrix& v = state.v[i].second;
        m = state.beta1 * m + (1.0 - state.beta1) * g;
        v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseProduct(g);
        params[i].second.array() -=
            state.alpha * (m.array() / c1) / ((v.array() / c2).sqrt() + state.epsilon);
    }
}

Checkpoint training_checkpoint(const ParamSet& params, const AdamState& adam, const Rng& rng,
                               const std::string& config_echo) {
    Checkpoint cp;
    cp.tensors = params;
    for (const auto& [name, value] : adam.m) cp.tensors.emplace_back("adam.m." + name, value);
    for (const auto& [name, value] : adam.v) cp.tensors.emplace_back("adam.v." + name, value);
    Matrix meta(1, 5);
    meta << static_cast<double>(adam.step), adam.alpha, adam.beta1, adam.beta2, adam.epsilon;
    cp.tensors.emplace_back("adam.state", meta);
    cp.config_echo = config_echo;
    cp.rng_state = rng.serialize();
    return cp;
}

namespace {

const Matrix& checkpoint_tensor(const Checkpoint& cp, const std::string& name, Eigen::Index rows,
                                Eigen::Index cols) {
    if (!cp.has_tensor(name)) throw InputError("checkpoint is missing tensor " + name);
    const Matrix& stored = cp.tensor(name);
    if (stored.rows() != rows || stored.cols() != cols)
        throw InputError("checkpoint tensor " + name + " has the wrong shape");
    return stored;
}

}  // namespace

ParamSet checkpoint_params(const GpssmModel& structure, const Checkpoint& cp) {
    ParamSet out;
    for (const auto& [name, shape] : model_raw_params(structure))
        out.emplace_back(name, checkpoint_tensor(cp, name, shape.rows(), shape.cols()));
    return out;
}

AdamState checkpoint_adam(const ParamSet& params, const Checkpoint& cp) {
    AdamState adam;
    for (const auto& [name, value] : params) {
        adam.m.emplace_back(name,
                            checkpoint_tensor(cp, "adam.m." + name, value.rows(), value.cols()));
        adam.v.emplace_back(name,
                            checkpoint_tensor(cp, "adam.v." + name, value.rows(), value.cols()));
    }
    const Matrix& meta = checkpoint_tensor(cp, "adam.state", 1, 5);
    adam.step = std::lround(meta(0, 0));
    adam.alpha = meta(0, 1);
    adam.beta1 = meta(0, 2);
    adam.beta2 = meta(0, 3);
    adam.epsilon = meta(0, 4);
    return adam;
}

GpssmModel model_from_checkpoint(const GpssmModel& structure, const Checkpoint& cp) {
    return model_from_raw(structure, [&](const std::string& name) -> Matrix {
        if (!cp.has_tensor(name)) throw InputError("checkpoint is missing tensor " + name);
        return cp.tensor(name);
    });
}

namespace {

json metrics_record(const StepRecord& r) {
    return json{{"step", r.step},
                {"elbo", r.elbo.total},
                {"emission", r.elbo.emission},
                {"transition", r.elbo.transition},
                {"entropy", r.elbo.entropy},
                {"kl_u", r.elbo.kl_u},
                {"prior_x0", r.elbo.prior_x0},
                {"grad_norm", r.grad_norm},
                {"wall_seconds", r.wall_seconds}};
}

}  // namespace

TrainResult train(const GpssmModel& init, const Dataset& dataset, const TrainConfig& config) {
    ParamSet params = model_raw_params(init);
    AdamState adam =
        init_adam(params, config.alpha, config.beta1, config.beta2, config.epsilon);
    return train_continue(init, std::move(params), std::move(adam), Rng(config.seed), dataset,
                          config);
}

TrainResult resume_training(const GpssmModel& structure, const Checkpoint& cp,
                            const Dataset& dataset, const TrainConfig& config) {
    ParamSet params = checkpoint_params(structure, cp);
    AdamState adam = checkpoint_adam(params, cp);
    Rng rng(0);
    rng.restore(cp.rng_state);
    return train_continue(structure, std::move(params), std::move(adam), std::move(rng), dataset,
                          config);
}

TrainResult train_continue(const GpssmModel& structure, ParamSet params, AdamState adam, Rng rng,
                           const Dataset& dataset, const TrainConfig& config) {
    validate(structure);
    validate(dataset);
    if (dataset.episodes.empty()) throw InputError("train: dataset has no episodes");
    if (dataset.obs_dim != structure.obs_dim() || dataset.action_dim != structure.action_dim())
        throw InputError("train: dataset dimensions do not match the model");
    if (config.steps < 0) throw InputError("train: steps must be non-negative");
    if (config.num_samples < 1) throw InputError("train: num_samples must be positive");
    require_aligned(model_raw_params(structure), params, "train parameters");
    require_aligned(params, adam.m, "train optimiser state");

    const Eigen::Index total = static_cast<Eigen::Index>(dataset.episodes.size());
    const Eigen::Index batch_size =
        config.batch_size <= 0 ? total
                               : std::min<Eigen::Index>(config.batch_size, total);

    TrainResult result;

    std::ofstream metrics;
    if (!config.run_dir.empty()) {
        std::filesystem::create_directories(config.run_dir);
        result.metrics_path = config.run_dir + "/metrics.jsonl";
        metrics.open(result.metrics_path, std::ios::app);
        if (!metrics) throw IoError("train: cannot open " + result.metrics_path);
    }

    auto materialise = [&] {
        return model_from_raw(structure,
                              [&](const std::string& name) { return get_param(params, name); });
    };
    auto write_checkpoint = [&](const std::string& filename) {
        if (config.run_dir.empty()) return;
        const std::string path = config.run_dir + "/" + filename;
        save_checkpoint(training_checkpoint(params, adam, rng, config.config_echo), path);
        result.checkpoint_path = path;
    };

    for (int it = 0; it < config.steps; ++it) {
        const auto t0 = std::chrono::steady_clock::now();

        // Uniform batch without replacement (partial Fisher-Yates); a full
        // batch keeps the episode order and draws nothing.
        std::vector<Eigen::Index> idx(total);
        std::iota(idx.begin(), idx.end(), Eigen::Index(0));
        if (batch_size < total) {
            for (Eigen::Index i = 0; i < batch_size; ++i) {
                const Eigen::Index span = total - i;
                Eigen::Index j =
                    i + std::min<Eigen::Index>(span - 1,
                                               static_cast<Eigen::Index>(rng.uniform() * span));
                std::swap(idx[i], idx[j]);
            }
            idx.resize(batch_size);
        }
        std::vector<Episode> batch;
        batch.reserve(idx.size());
        for (Eigen::Index i : idx) batch.push_back(dataset.episodes[i]);

        auto draws = draw_eps(batch, structure.state_dim(), config.num_samples, rng);

        StepRecord record;
        ParamSet grads;
        try {
            ad::Tape tape;
            std::vector<ad::Var> leaves;
            std::unordered_map<std::string, std::size_t> index;
            for (std::size_t i = 0; i < params.size(); ++i) {
                leaves.push_back(tape.leaf(params[i].second));
                index.emplace(params[i].first, i);
            }
            ModelVars mv = bind_model(
                tape, structure, [&](const std::string& name) { return leaves[index.at(name)]; });
            ElboVars ev = elbo_graph(tape, structure, mv, batch, draws, total);
            record.elbo = ev.values();
            if (!std::isfinite(record.elbo.total))
                throw NumericalError("non-finite bound at step " + std::to_string(adam.step + 1));
            tape.backward(ev.total);
            for (std::size_t i = 0; i < params.size(); ++i) {
                Matrix g = -tape.grad(leaves[i]);  // descend on the negated bound
                if (!all_finite(g))
                    throw NumericalError("non-finite gradient for " + params[i].first +
                                         " at step " + std::to_string(adam.step + 1));
                grads.emplace_back(params[i].first, std::move(g));
            }
        } catch (const NumericalError& err) {
            result.aborted = true;
            result.abort_reason = err.what();
            break;  // params still hold the last finite state
        }

        record.grad_norm = global_norm(grads);
        if (config.clip_norm > 0.0) clip_global_norm(grads, config.clip_norm);
        adam_step(adam, params, grads);

        record.step = adam.step;
        record.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back(record);
        if (metrics.is_open()) {
            metrics << metrics_record(record).dump() << '\n';
            metrics.flush();
        }
        if (config.checkpoint_every > 0 && adam.step % config.checkpoint_every == 0)
            write_checkpoint("checkpoint_latest.ckpt");
    }

    write_checkpoint("checkpoint_final.ckpt");
    result.model = materialise();
    result.adam = std::move(adam);
    result.rng = rng;
    return result;
}

}  // namespace gpssm

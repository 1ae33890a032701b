#pragma once

#include <json.hpp>
#include <string>

#include "gpssm/model.hpp"
#include "gpssm/optim.hpp"

namespace gpssm {

using Json = nlohmann::json;

/// Schema-checked configuration tree with every default filled in. Build one
/// through finalize_config; the raw tree is available for inspection.
struct Config {
    Json tree;

    const Json& at(const std::string& dotted) const;  // throws ConfigError if absent
};

/// The full tree of defaults, one JSON object per section (model,
/// recognition, training, data, rollout, export, output).
Json default_config();

/// Strict JSON parse; ConfigError on malformed text, IoError on unreadable
/// files.
Json parse_config_text(const std::string& text);
Json load_config_file(const std::string& path);

/// Sets the leaf at a dotted key path, creating objects along the way. The
/// value text is parsed as JSON when possible (numbers, bools, arrays) and
/// kept as a string otherwise.
void apply_override(Json& tree, const std::string& dotted, const std::string& value);

/// Fills defaults, then validates every key against the schema. Unknown keys
/// and type or range violations throw ConfigError naming the full key path.
Config finalize_config(Json tree);

/// Sorted-key single-line dump; equal configurations share the text.
std::string canonical_text(const Config& config);

/// First eight hex digits of a 64-bit FNV-1a hash over the canonical text.
std::string config_hash8(const Config& config);

/// Creates (and returns) <output.root>/<hash8>-<UTC timestamp>, appending a
/// numeric suffix if the directory already exists.
std::string make_run_dir(const Config& config);

/// Kernel structure from the model section: `kernel` lists leaf variants
/// joined by '+' ("rbf", "matern12", "arccos0", "rbf+matern12"), variance
/// and lengthscale initialisers apply per leaf (scalar, or one entry per
/// leaf), `ard` switches to one lengthscale per input dimension, and
/// `warp_widths` wraps the result in a tanh net with those layer widths.
Kernel kernel_from_config(const Json& model, Eigen::Index input_dim, Rng& rng);

/// Model initialisation driven by the model and recognition sections.
GpssmModel model_from_config(const Config& config, const std::vector<Episode>& episodes,
                             Eigen::Index obs_dim, Eigen::Index action_dim, Rng& rng);

/// Synthesises the dataset described by the data section (generator, counts,
/// noise, policy).
Dataset generate_from_config(const Config& config);

/// Training hyperparameters from the training section; metrics and
/// checkpoints land in run_dir.
TrainConfig train_config_from(const Config& config, const std::string& run_dir);

}  // namespace gpssm

#pragma once

#include <string>

#include "gpssm/config.hpp"

namespace gpssm {

/// Outcome of one train command: every path lives under run_dir.
struct TrainOutputs {
    std::string run_dir;
    std::string checkpoint_path;
    std::string metrics_path;
    bool aborted = false;
    std::string abort_reason;
};

/// Writes the dataset described by the data section. The file goes to
/// data.out when set, otherwise to dataset.jsonl inside a fresh run
/// directory. Returns the path written.
std::string cmd_generate(const Config& config);

/// Trains on the dataset at data.path (resuming from training.resume when
/// set) inside a fresh run directory that also receives the effective
/// config.
TrainOutputs cmd_train(const Config& config);

/// Free-simulates every episode of the dataset at data.path from the model
/// in data.checkpoint and writes per-episode metrics (rollout.metric:
/// per-channel RMSE or pendulum tip error) to eval.json in a fresh run
/// directory. Returns the metrics path.
std::string cmd_eval(const Config& config);

/// Tabulates the learned transition on the export grid from the model in
/// data.checkpoint and writes transition.csv in a fresh run directory.
/// Returns the CSV path.
std::string cmd_export(const Config& config);

/// Full entry point: parses `gpssm <generate|train|eval|export> [--config
/// file] [--set key=value ...] [--<dotted.key> value ...]` and maps errors
/// to exit codes (0 success, 2 config, 3 numerical, 4 I/O).
int run_cli(int argc, char** argv);

}  // namespace gpssm

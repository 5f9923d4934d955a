#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace flowlm {

/// Exit codes shared by all subcommands.
enum ExitCode : int {
    kExitOk = 0,
    kExitDataError = 1,
    kExitUsageOrIo = 2,
    kExitFingerprint = 3,
};

/// Built-in defaults for every section of an experiment configuration file:
/// split, discretizer, model, pretrain, finetune, eval, schema.
nlohmann::json default_experiment_config();

/// Entry point of the `flowlm` command. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace flowlm

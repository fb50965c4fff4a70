#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "mstkd/train.hpp"

namespace mstkd {

// Full run configuration: network, loss weights, optimizer and data recipe.
// Resolution order: built-in defaults, then the JSON config file, then the
// MSTKD_SEED environment variable, then command-line flags.
struct AppConfig {
    TrainConfig train;
    int data_cases = 40;
    Shape data_dims = {16, 16, 16};
    std::uint64_t data_seed = 1;
    double train_fraction = 0.8;
};

nlohmann::json config_to_json(const AppConfig& cfg);
void apply_config_json(AppConfig& cfg, const nlohmann::json& j);
AppConfig load_config_file(const std::string& path);
// Applies MSTKD_SEED (when set) to both the data seed and the train seed.
void apply_env_overrides(AppConfig& cfg);

struct RunManifest {
    std::string command;
    nlohmann::json config;
    std::uint64_t seed = 0;
    std::string revision;
    std::string started;
    std::string finished;
    std::vector<std::string> outputs;
};

std::string source_revision();
std::string timestamp_utc();
// Writes via a temp file + rename so readers never observe a partial manifest.
void write_manifest(const std::string& path, const RunManifest& m);

}  // namespace mstkd

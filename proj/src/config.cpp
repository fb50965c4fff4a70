#include "mstkd/config.hpp"

#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>

#ifndef MSTKD_REVISION
#define MSTKD_REVISION "unknown"
#endif

namespace mstkd {

nlohmann::json config_to_json(const AppConfig& cfg) {
    nlohmann::json j;
    j["net"] = {{"in_channels", cfg.train.net.in_channels},
                {"base_channels", cfg.train.net.base_channels},
                {"dims", {cfg.train.net.H, cfg.train.net.W, cfg.train.net.D}},
                {"patch", cfg.train.net.patch},
                {"embed_dim", cfg.train.net.embed_dim},
                {"heads", cfg.train.net.heads},
                {"blocks", cfg.train.net.blocks},
                {"out_regions", cfg.train.net.out_regions}};
    const auto& w = cfg.train.weights;
    j["loss"] = {{"alpha", w.alpha},
                 {"beta", w.beta},
                 {"lambda_mse", w.lambda_mse},
                 {"lambda_kd", w.lambda_kd},
                 {"tau", w.tau},
                 {"epsilon", w.epsilon},
                 {"theta", w.theta},
                 {"lambda1", w.lambda1},
                 {"lambda2", w.lambda2},
                 {"lambda3", w.lambda3},
                 {"lambda4", w.lambda4}};
    j["train"] = {{"lr", cfg.train.lr},
                  {"beta1", cfg.train.beta1},
                  {"beta2", cfg.train.beta2},
                  {"epochs", cfg.train.epochs},
                  {"batch_size", cfg.train.batch_size},
                  {"seed", cfg.train.seed},
                  {"use_ms_tkd", cfg.train.use_ms_tkd},
                  {"use_gsme", cfg.train.use_gsme},
                  {"use_slkd", cfg.train.use_slkd},
                  {"augment", cfg.train.augment}};
    j["data"] = {{"cases", cfg.data_cases},
                 {"dims", {cfg.data_dims[0], cfg.data_dims[1], cfg.data_dims[2]}},
                 {"seed", cfg.data_seed},
                 {"train_fraction", cfg.train_fraction}};
    return j;
}

namespace {

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& dst) {
    if (j.contains(key)) dst = j.at(key).get<T>();
}

void read_dims(const nlohmann::json& j, const char* key, std::int64_t& h, std::int64_t& w,
               std::int64_t& d) {
    if (!j.contains(key)) return;
    const auto& a = j.at(key);
    if (!a.is_array() || a.size() != 3) {
        throw value_error(std::string("config: '") + key + "' must be an array of three extents");
    }
    h = a[0].get<std::int64_t>();
    w = a[1].get<std::int64_t>();
    d = a[2].get<std::int64_t>();
}

}  // namespace

void apply_config_json(AppConfig& cfg, const nlohmann::json& j) {
    if (j.contains("net")) {
        const auto& n = j.at("net");
        maybe(n, "in_channels", cfg.train.net.in_channels);
        maybe(n, "base_channels", cfg.train.net.base_channels);
        read_dims(n, "dims", cfg.train.net.H, cfg.train.net.W, cfg.train.net.D);
        maybe(n, "patch", cfg.train.net.patch);
        maybe(n, "embed_dim", cfg.train.net.embed_dim);
        maybe(n, "heads", cfg.train.net.heads);
        maybe(n, "blocks", cfg.train.net.blocks);
        maybe(n, "out_regions", cfg.train.net.out_regions);
    }
    if (j.contains("loss")) {
        const auto& l = j.at("loss");
        auto& w = cfg.train.weights;
        maybe(l, "alpha", w.alpha);
        maybe(l, "beta", w.beta);
        maybe(l, "lambda_mse", w.lambda_mse);
        maybe(l, "lambda_kd", w.lambda_kd);
        maybe(l, "tau", w.tau);
        maybe(l, "epsilon", w.epsilon);
        maybe(l, "theta", w.theta);
        maybe(l, "lambda1", w.lambda1);
        maybe(l, "lambda2", w.lambda2);
        maybe(l, "lambda3", w.lambda3);
        maybe(l, "lambda4", w.lambda4);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        maybe(t, "lr", cfg.train.lr);
        maybe(t, "beta1", cfg.train.beta1);
        maybe(t, "beta2", cfg.train.beta2);
        maybe(t, "epochs", cfg.train.epochs);
        maybe(t, "batch_size", cfg.train.batch_size);
        maybe(t, "seed", cfg.train.seed);
        maybe(t, "use_ms_tkd", cfg.train.use_ms_tkd);
        maybe(t, "use_gsme", cfg.train.use_gsme);
        maybe(t, "use_slkd", cfg.train.use_slkd);
        maybe(t, "augment", cfg.train.augment);
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        maybe(d, "cases", cfg.data_cases);
        if (d.contains("dims")) {
            Shape dims(3);
            read_dims(d, "dims", dims[0], dims[1], dims[2]);
            cfg.data_dims = dims;
        }
        maybe(d, "seed", cfg.data_seed);
        maybe(d, "train_fraction", cfg.train_fraction);
    }
}

AppConfig load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw value_error("config: cannot open " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw value_error("config: " + path + " is not valid JSON: " + e.what());
    }
    AppConfig cfg;
    apply_config_json(cfg, j);
    return cfg;
}

void apply_env_overrides(AppConfig& cfg) {
    if (const char* env = std::getenv("MSTKD_SEED")) {
        try {
            const auto seed = std::stoull(env);
            cfg.train.seed = seed;
            cfg.data_seed = seed;
        } catch (const std::exception&) {
            throw value_error("MSTKD_SEED must be an unsigned integer, got '" + std::string(env) +
                              "'");
        }
    }
}

std::string source_revision() { return MSTKD_REVISION; }

std::string timestamp_utc() {
    const std::time_t now = std::time(nullptr);
    char buf[32];
    std::tm tm_utc{};
    gmtime_r(&now, &tm_utc);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

void write_manifest(const std::string& path, const RunManifest& m) {
    nlohmann::json j;
    j["command"] = m.command;
    j["config"] = m.config;
    j["seed"] = m.seed;
    j["revision"] = m.revision;
    j["started"] = m.started;
    j["finished"] = m.finished;
    j["outputs"] = m.outputs;

    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp);
        if (!os) throw value_error("manifest: cannot write " + tmp);
        os << j.dump(2) << "\n";
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace mstkd

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mstkd/config.hpp"
#include "mstkd/serialize.hpp"
#include "mstkd/synth.hpp"
#include "mstkd/train.hpp"
#include "mstkd/verify.hpp"

namespace fs = std::filesystem;
using namespace mstkd;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitCheckFailed = 4;

struct CommonArgs {
    std::string config_path;
    bool dump_config = false;
};

AppConfig resolve_config(const CommonArgs& common) {
    AppConfig cfg;
    if (!common.config_path.empty()) cfg = load_config_file(common.config_path);
    apply_env_overrides(cfg);
    return cfg;
}

bool handle_dump(const CommonArgs& common, const AppConfig& cfg) {
    if (!common.dump_config) return false;
    std::cout << config_to_json(cfg).dump(2) << "\n";
    return true;
}

RunManifest begin_manifest(const std::string& command, const AppConfig& cfg, std::uint64_t seed) {
    RunManifest m;
    m.command = command;
    m.config = config_to_json(cfg);
    m.seed = seed;
    m.revision = source_revision();
    m.started = timestamp_utc();
    return m;
}

void finish_manifest(RunManifest& m, const std::string& out_dir) {
    m.finished = timestamp_utc();
    write_manifest((fs::path(out_dir) / "manifest.json").string(), m);
}

int cmd_gen_data(const CommonArgs& common, const std::string& out_dir, int cases, int dims,
                 std::uint64_t seed, bool seed_set) {
    AppConfig cfg = resolve_config(common);
    if (cases > 0) cfg.data_cases = cases;
    if (dims > 0) cfg.data_dims = {dims, dims, dims};
    if (seed_set) cfg.data_seed = seed;
    if (handle_dump(common, cfg)) return kExitOk;

    auto manifest = begin_manifest("gen-data", cfg, cfg.data_seed);
    auto ds = build_dataset(cfg.data_cases, cfg.data_dims, cfg.data_seed, cfg.train_fraction);
    write_dataset(out_dir, ds);
    manifest.outputs = {(fs::path(out_dir) / "index.jsonl").string()};
    finish_manifest(manifest, out_dir);
    std::cout << "wrote " << ds.cases.size() << " cases (" << ds.train_ids.size() << " train / "
              << ds.test_ids.size() << " test) to " << out_dir << "\n";
    return kExitOk;
}

int cmd_train(const CommonArgs& common, const std::string& phase, const std::string& data_dir,
              const std::string& out_dir, const std::string& teacher_path, int epochs,
              std::uint64_t seed, bool seed_set, double lr, bool no_ms_tkd, bool no_gsme,
              bool no_slkd, bool augment_flag) {
    AppConfig cfg = resolve_config(common);
    if (epochs > 0) cfg.train.epochs = epochs;
    if (seed_set) cfg.train.seed = seed;
    if (lr > 0) cfg.train.lr = lr;
    if (no_ms_tkd) cfg.train.use_ms_tkd = false;
    if (no_gsme) cfg.train.use_gsme = false;
    if (no_slkd) cfg.train.use_slkd = false;
    if (augment_flag) cfg.train.augment = true;
    if (handle_dump(common, cfg)) return kExitOk;

    auto ds = read_dataset(data_dir);
    cfg.train.net.H = ds.dims[0];
    cfg.train.net.W = ds.dims[1];
    cfg.train.net.D = ds.dims[2];
    fs::create_directories(out_dir);
    auto manifest = begin_manifest("train", cfg, cfg.train.seed);

    if (phase == "teacher") {
        auto result = train_teacher(cfg.train, ds);
        const auto ckpt = (fs::path(out_dir) / "teacher.ckpt").string();
        save_checkpoint(ckpt, result.checkpoint);
        const auto log_path = (fs::path(out_dir) / "train_log.csv").string();
        write_train_log_csv(log_path, result);
        manifest.outputs = {ckpt, log_path};
        finish_manifest(manifest, out_dir);
        std::cout << "teacher: final mean dice loss "
                  << result.log.back().dice << " after " << cfg.train.epochs << " epochs\n";
    } else if (phase == "student") {
        if (teacher_path.empty()) {
            throw value_error("train --phase student requires --teacher <checkpoint>");
        }
        auto teacher_ckpt = load_checkpoint(teacher_path);
        auto result = train_student(cfg.train, ds, teacher_ckpt);
        const auto ckpt = (fs::path(out_dir) / "student.ckpt").string();
        save_checkpoint(ckpt, result.checkpoint);
        const auto log_path = (fs::path(out_dir) / "train_log.csv").string();
        write_train_log_csv(log_path, result);
        const auto hist_path = (fs::path(out_dir) / "mask_histogram.csv").string();
        write_mask_histogram_csv(hist_path, result);
        manifest.outputs = {ckpt, log_path, hist_path};
        if (!result.discriminator.empty()) {
            const auto disc = (fs::path(out_dir) / "discriminator.ckpt").string();
            save_checkpoint(disc, result.discriminator);
            manifest.outputs.push_back(disc);
        }
        finish_manifest(manifest, out_dir);
        std::cout << "student: final mean total loss " << result.log.back().total << " after "
                  << cfg.train.epochs << " epochs (teacher reads: " << result.teacher_reads
                  << ")\n";
    } else {
        throw value_error("train: --phase must be 'teacher' or 'student'");
    }
    return kExitOk;
}

int cmd_eval(const CommonArgs& common, const std::string& data_dir, const std::string& ckpt_path,
             const std::string& out_dir, bool plot) {
    AppConfig cfg = resolve_config(common);
    if (handle_dump(common, cfg)) return kExitOk;

    auto ds = read_dataset(data_dir);
    cfg.train.net.H = ds.dims[0];
    cfg.train.net.W = ds.dims[1];
    cfg.train.net.D = ds.dims[2];
    auto ckpt = load_checkpoint(ckpt_path);
    fs::create_directories(out_dir);
    auto manifest = begin_manifest("eval", cfg, cfg.train.seed);

    auto result = evaluate_model(cfg.train.net, ckpt, ds);
    const auto csv = (fs::path(out_dir) / "eval.csv").string();
    const auto md = (fs::path(out_dir) / "eval.md").string();
    write_eval_csv(csv, result);
    write_eval_markdown(md, result);
    manifest.outputs = {csv, md};
    if (plot) {
        const auto svg = (fs::path(out_dir) / "dice_bars.svg").string();
        write_dice_barchart_svg(svg, result);
        manifest.outputs.push_back(svg);
    }
    finish_manifest(manifest, out_dir);
    for (const auto& avg : result.region_averages) {
        std::cout << avg.region << " mean dice " << avg.dice;
        if (avg.hd95) std::cout << ", mean hd95 " << *avg.hd95;
        std::cout << "\n";
    }
    return kExitOk;
}

int cmd_check(const CommonArgs& common, const std::string& out_dir) {
    AppConfig cfg = resolve_config(common);
    if (handle_dump(common, cfg)) return kExitOk;
    auto manifest = begin_manifest("check", cfg, cfg.train.seed);

    Rng rng(20240917ull);
    std::vector<verify::CheckResult> all;
    const auto run_family = [&all](const char* family, std::vector<verify::CheckResult> results) {
        std::cout << "-- " << family << "\n";
        for (auto& r : results) {
            std::cout << (r.passed ? "PASS" : "FAIL") << "  " << r.name << "  [tolerance " << r.tolerance
                      << "]  " << r.detail << "\n";
            all.push_back(std::move(r));
        }
    };
    run_family("gradient checks", verify::run_gradient_suite(rng, 20));
    run_family("loss gradient checks", verify::run_loss_gradient_suite(rng, 20));
    run_family("logit standardization invariance", verify::run_kl_invariance_suite(rng, 100));
    run_family("extreme value identities", verify::run_evd_identity_suite(rng));
    run_family("style matching identities", verify::run_gram_suite(rng));
    run_family("metric oracles", verify::run_metric_oracle_suite(rng, 200));
    run_family("attention contracts", verify::run_attention_suite(rng));

    int failed = 0;
    for (const auto& r : all) failed += r.passed ? 0 : 1;
    std::cout << (failed == 0 ? "all checks passed" : "checks FAILED") << " (" << all.size() - failed
              << "/" << all.size() << ")\n";

    fs::create_directories(out_dir);
    manifest.outputs = {};
    finish_manifest(manifest, out_dir);
    return failed == 0 ? kExitOk : kExitCheckFailed;
}

EvalResult read_eval_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw value_error("report: cannot open " + path);
    std::string line;
    if (!std::getline(is, line) || line != "mask_bits,region,dice,hd95") {
        throw value_error("report: " + path + " is not an eval csv");
    }
    EvalResult out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string bits, region, dice_s, hd_s;
        std::getline(ss, bits, ',');
        std::getline(ss, region, ',');
        std::getline(ss, dice_s, ',');
        std::getline(ss, hd_s, ',');
        MetricsRow row;
        row.region = region;
        row.dice = std::stod(dice_s);
        if (hd_s != "-") row.hd95 = std::stod(hd_s);
        if (bits == "avg") {
            out.region_averages.push_back(row);
        } else {
            if (bits.size() != 4) throw value_error("report: bad mask bits '" + bits + "'");
            for (int i = 0; i < 4; ++i) row.mask.present[static_cast<std::size_t>(i)] = bits[static_cast<std::size_t>(i)] == '1';
            out.rows.push_back(row);
        }
    }
    if (out.rows.size() != 45 || out.region_averages.size() != 3) {
        throw value_error("report: expected 45 rows + 3 averages, found " +
                          std::to_string(out.rows.size()) + " + " +
                          std::to_string(out.region_averages.size()));
    }
    return out;
}

int cmd_report(const CommonArgs& common, const std::string& eval_csv, const std::string& out_dir,
               bool plot) {
    AppConfig cfg = resolve_config(common);
    if (handle_dump(common, cfg)) return kExitOk;
    auto manifest = begin_manifest("report", cfg, cfg.train.seed);

    auto result = read_eval_csv(eval_csv);
    fs::create_directories(out_dir);
    const auto md = (fs::path(out_dir) / "eval.md").string();
    write_eval_markdown(md, result);
    manifest.outputs = {md};
    if (plot) {
        const auto svg = (fs::path(out_dir) / "dice_bars.svg").string();
        write_dice_barchart_svg(svg, result);
        manifest.outputs.push_back(svg);
    }
    finish_manifest(manifest, out_dir);
    std::cout << "report written to " << out_dir << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"missing-modality distillation workbench"};
    app.require_subcommand(1);
    app.fallthrough(true);  // global options may follow the subcommand

    CommonArgs common;
    app.add_option("--config", common.config_path, "JSON configuration file")
        ->envname("MSTKD_CONFIG");
    app.add_flag("--dump-config", common.dump_config, "print the resolved configuration and exit");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    std::string gen_out;
    int gen_cases = 0, gen_dims = 0;
    std::uint64_t gen_seed = 0;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--cases", gen_cases, "number of cases");
    gen->add_option("--dims", gen_dims, "cubic extent (multiple of 8)");
    auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "generator seed");

    // train
    auto* train = app.add_subcommand("train", "train the teacher or a student");
    std::string train_phase, train_data, train_out, train_teacher_path;
    int train_epochs = 0;
    std::uint64_t train_seed = 0;
    double train_lr = 0;
    bool no_ms_tkd = false, no_gsme = false, no_slkd = false, do_augment = false;
    train->add_option("--phase", train_phase, "teacher|student")->required();
    train->add_option("--data", train_data, "dataset directory")->required();
    train->add_option("--out", train_out, "output directory")->required();
    train->add_option("--teacher", train_teacher_path, "teacher checkpoint (student phase)");
    train->add_option("--epochs", train_epochs, "training epochs");
    auto* train_seed_opt = train->add_option("--seed", train_seed, "training seed");
    train->add_option("--lr", train_lr, "learning rate");
    train->add_flag("--no-ms-tkd", no_ms_tkd, "disable attention/token distillation");
    train->add_flag("--no-gsme", no_gsme, "disable style matching and the discriminator");
    train->add_flag("--no-slkd", no_slkd, "disable the standardized-KL logit term");
    train->add_flag("--augment", do_augment, "apply random flips/rotations/crops");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint over all modality subsets");
    std::string eval_data, eval_ckpt, eval_out;
    bool eval_plot = false;
    eval->add_option("--data", eval_data, "dataset directory")->required();
    eval->add_option("--ckpt", eval_ckpt, "model checkpoint")->required();
    eval->add_option("--out", eval_out, "output directory")->required();
    eval->add_flag("--plot", eval_plot, "also write a dice bar chart (svg)");

    // check
    auto* check = app.add_subcommand("check", "run the property suite");
    std::string check_out = ".";
    check->add_option("--out", check_out, "directory for the run manifest");

    // report
    auto* report = app.add_subcommand("report", "re-render tables from an eval csv");
    std::string report_csv, report_out;
    bool report_plot = false;
    report->add_option("--eval-csv", report_csv, "eval.csv produced by the eval command")->required();
    report->add_option("--out", report_out, "output directory")->required();
    report->add_flag("--plot", report_plot, "also write a dice bar chart (svg)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (gen->parsed()) {
            return cmd_gen_data(common, gen_out, gen_cases, gen_dims, gen_seed,
                                gen_seed_opt->count() > 0);
        }
        if (train->parsed()) {
            return cmd_train(common, train_phase, train_data, train_out, train_teacher_path,
                             train_epochs, train_seed, train_seed_opt->count() > 0, train_lr,
                             no_ms_tkd, no_gsme, no_slkd, do_augment);
        }
        if (eval->parsed()) return cmd_eval(common, eval_data, eval_ckpt, eval_out, eval_plot);
        if (check->parsed()) return cmd_check(common, check_out);
        if (report->parsed()) return cmd_report(common, report_csv, report_out, report_plot);
    } catch (const numeric_error& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}

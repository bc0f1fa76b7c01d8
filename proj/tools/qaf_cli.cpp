#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "qaf/error.hpp"
#include "qaf/harness.hpp"

int main(int argc, char** argv) {
    CLI::App app{"qaf: quality-aware solver selection experiments"};
    app.require_subcommand(1, 1);

    std::string config_path, out_dir;
    std::uint64_t seed = 0;
    int threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    app.add_option("--config", config_path, "JSON experiment config")->check(CLI::ExistingFile);
    auto* seed_opt = app.add_option("--seed", seed, "master seed");
    auto* out_opt = app.add_option("--out-dir", out_dir, "artifact directory");
    app.add_option("--threads", threads, "worker threads")->check(CLI::Range(1, 1024));

    for (const auto& s : qaf::pipeline_stages()) app.add_subcommand(s, "run the " + s + " stage");
    app.add_subcommand("all", "run every stage in order");
    app.add_subcommand("print-config", "print the resolved config as JSON");

    CLI11_PARSE(app, argc, argv);
    const std::string cmd = app.get_subcommands().front()->get_name();

    qaf::ExperimentConfig cfg;
    try {
        if (!config_path.empty()) cfg = qaf::load_config(config_path);
        if (*seed_opt) cfg.seed = seed;
        if (*out_opt) cfg.out_dir = out_dir;
        cfg.validate();
    } catch (const std::exception& e) {
        std::cerr << "[config] error: " << e.what() << '\n';
        return 2;
    }

    if (cmd == "print-config") {
        std::cout << qaf::config_to_json(cfg).dump(1) << '\n';
        return 0;
    }
    try {
        if (cmd == "all") {
            qaf::run_pipeline(cfg, threads);
        } else {
            qaf::run_stage(cfg, cmd, threads);
        }
    } catch (const qaf::StageError& e) {
        std::cerr << "[" << e.stage() << "] error: " << e.cause() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "[" << cmd << "] error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

// Command-line runner. One experiment config or one manifest per invocation;
// reports land in --out (or $QBSDE_OUT, or the working directory). Exit code
// 0 all verdicts pass, 1 verdict failure, 2 config error, 3 numerical
// failure; for a manifest the max over its experiments.

#include "qbsde/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

int main(int argc, char** argv) {
    CLI::App app{"quadratic g-expectation experiment runner"};
    app.set_version_flag("--version", qbsde::cli::version());

    std::string config_path, manifest_path, out_dir;
    std::uint64_t seed = 0;
    int threads = 1;
    double tolerance_scale = 1.0;

    auto* config_opt =
        app.add_option("--config", config_path, "experiment config (JSON)")
            ->check(CLI::ExistingFile);
    auto* manifest_opt =
        app.add_option("--manifest", manifest_path, "experiment manifest (JSON)")
            ->check(CLI::ExistingFile);
    auto* seed_opt =
        app.add_option("--seed", seed, "override every config seed");
    app.add_option("--out", out_dir, "output directory (default: $QBSDE_OUT or .)");
    app.add_option("--threads", threads, "suite worker pool size")
        ->check(CLI::PositiveNumber);
    app.add_option("--tolerance-scale", tolerance_scale,
                   "multiply all verdict tolerances");
    config_opt->excludes(manifest_opt);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    if (config_opt->count() == 0 && manifest_opt->count() == 0) {
        std::cerr << "error: one of --config or --manifest is required\n";
        return 2;
    }

    qbsde::cli::RunOptions opts;
    if (seed_opt->count() > 0) opts.seed = seed;
    if (out_dir.empty()) {
        if (const char* env = std::getenv("QBSDE_OUT")) out_dir = env;
    }
    opts.out_dir = out_dir;
    opts.threads = threads;
    opts.tolerance_scale = tolerance_scale;

    try {
        if (config_opt->count() > 0) {
            nlohmann::json cfg = qbsde::cli::load_config_file(config_path);
            qbsde::cli::RunResult r = qbsde::cli::run(cfg, opts);
            if (r.exit_code >= 2) {
                std::cerr << "error: " << r.message << "\n";
            } else {
                std::cout << r.name << ": " << (r.pass ? "pass" : "fail") << " ("
                          << r.message << ")\n"
                          << "report: " << r.report_path.string() << "\n";
            }
            return r.exit_code;
        }
        nlohmann::json manifest = qbsde::cli::load_config_file(manifest_path);
        const auto results = qbsde::cli::suite(
            manifest, std::filesystem::path(manifest_path).parent_path(), opts);
        for (const auto& r : results) {
            const char* verdict = r.exit_code == 0   ? "pass"
                                  : r.exit_code == 1 ? "fail"
                                  : r.exit_code == 2 ? "config-error"
                                                     : "numerical-error";
            std::cout << r.name << ": " << verdict << " (" << r.message << ")\n";
        }
        std::cout << "summary: "
                  << ((out_dir.empty() ? std::filesystem::path(".")
                                       : std::filesystem::path(out_dir)) /
                      "summary.csv")
                         .string()
                  << "\n";
        return qbsde::cli::suite_exit_code(results);
    } catch (const qbsde::cli::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}

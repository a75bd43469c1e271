#ifndef QBSDE_CLI_HPP
#define QBSDE_CLI_HPP

// Batch front door. JSON experiment configs resolve to engine runs; every
// run writes a JSON report embedding the resolved config and a CSV table of
// plot-ready values, both atomically. Exit codes: 0 all verdicts pass,
// 1 verdict failure, 2 config error, 3 numerical failure.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace qbsde::cli {

// Anything wrong with the config itself: unreadable file, malformed JSON,
// schema violation, or parameters the engines reject up front.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RunOptions {
    std::optional<std::uint64_t> seed; // overrides every config seed
    std::filesystem::path out_dir;     // empty resolves to "."
    int threads = 1;                   // suite worker pool size
    double tolerance_scale = 1.0;      // multiplies bound/floor tolerances
};

struct RunResult {
    std::string name;
    int exit_code = 2; // pessimistic until the run gets further
    bool pass = false;
    double gap = 0.0;
    double tolerance = 0.0;
    double seconds = 0.0;
    std::filesystem::path report_path;
    std::filesystem::path table_path;
    std::string message;
};

std::string version();

// FNV-1a over the compact dump of the resolved config; reports embed it in
// hex so a table can be traced back to the exact inputs.
std::uint64_t config_hash(const nlohmann::json& config);

// Parse a JSON file, mapping syntax errors to ConfigError with line and
// column diagnostics.
nlohmann::json load_config_file(const std::filesystem::path& path);

// Run one experiment. Never throws for config, verdict, or numerical
// problems; those land in exit_code and message. The report and table files
// are written even on verdict failure (that is the interesting output), but
// not on config errors.
RunResult run(const nlohmann::json& config, const RunOptions& opts = {});

// Run a manifest {"experiments": [ {...} | {"file": "relative.json"}, ... ]}.
// Individual failures do not stop the suite; a summary.csv with one row per
// experiment {name, verdict, gap, tolerance, seconds} lands in the output
// directory. file entries resolve against manifest_dir.
std::vector<RunResult> suite(const nlohmann::json& manifest,
                             const std::filesystem::path& manifest_dir,
                             const RunOptions& opts = {});

// Max of the individual exit codes, 0 for an empty suite.
int suite_exit_code(const std::vector<RunResult>& results);

} // namespace qbsde::cli

#endif // QBSDE_CLI_HPP

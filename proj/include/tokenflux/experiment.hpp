#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tokenflux/pruning.hpp"
#include "tokenflux/scenario.hpp"

namespace tokenflux {

struct ScheduleVariant {
    std::string label;  // usually the strategy name
    PruneSchedule schedule;
};

struct ExperimentConfig {
    std::string name = "experiment";
    std::vector<ScenarioSpec> scenarios;
    std::vector<ScheduleVariant> variants;
    // Matched-budget variants must share stage layers and keep ratios so
    // drop/merge/bypass comparisons run under equal token budgets.
    bool matched_budget = false;
    std::vector<std::string> metrics;  // subset of fidelity/kl/selection_overlap/flops; empty = all
    double overlap_top_frac = 0.1;
    ScoreMode score_mode = ScoreMode::PostRope;

    void validate() const;
    bool wants(const std::string& metric) const;
};

struct ExperimentRow {
    std::string scenario_id;
    std::string variant;  // "vanilla" or a schedule label
    bool ok = true;
    std::string error;
    int survivors = 0;
    double fidelity = 0.0;
    double kl = 0.0;
    std::optional<double> selection_overlap;
    std::uint64_t flops_base = 0;
    std::uint64_t flops_overhead = 0;
};

struct AggregateRow {
    std::string variant;
    int count = 0;
    int failed = 0;
    double mean_fidelity = 0.0;
    double mean_kl = 0.0;
    std::optional<double> mean_selection_overlap;
    double mean_survivors = 0.0;
};

struct ExperimentResult {
    std::vector<ExperimentRow> rows;        // sorted by (scenario id, variant)
    std::vector<AggregateRow> aggregates;   // sorted by variant
    int failures = 0;
};

// Runs every scenario x variant (plus a vanilla baseline per scenario),
// writes results.csv, aggregate.csv, and manifest.json into out_dir, and
// isolates per-scenario failures. TOKENFLUX_THREADS caps the scenario-level
// concurrency (0 or 1 = sequential); output bytes are independent of it.
ExperimentResult run_experiment(const ExperimentConfig& config,
                                const std::filesystem::path& out_dir);

// Re-runs an experiment from a previously written manifest; outputs are
// bit-identical to the original run.
ExperimentResult run_experiment_manifest(const std::filesystem::path& manifest_path,
                                         const std::filesystem::path& out_dir);

nlohmann::json experiment_to_json(const ExperimentConfig& config);
ExperimentConfig experiment_from_json(const nlohmann::json& j);

}  // namespace tokenflux

#include "tokenflux/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "tokenflux/cost_model.hpp"
#include "tokenflux/io.hpp"
#include "tokenflux/metrics.hpp"

namespace tokenflux {

namespace {

const std::vector<std::string> kAllMetrics = {"fidelity", "kl", "selection_overlap", "flops"};

int thread_cap() {
    const char* env = std::getenv("TOKENFLUX_THREADS");
    if (!env) return std::max(1u, std::thread::hardware_concurrency());
    const int v = std::atoi(env);
    return v <= 1 ? 1 : v;
}

std::string score_mode_name(ScoreMode mode) {
    return mode == ScoreMode::PostRope ? "post_rope" : "pre_rope";
}

ScoreMode score_mode_from_name(const std::string& name) {
    if (name == "post_rope") return ScoreMode::PostRope;
    if (name == "pre_rope") return ScoreMode::PreRope;
    throw std::invalid_argument("unknown score mode: " + name);
}

}  // namespace

void ExperimentConfig::validate() const {
    for (const auto& s : scenarios) s.validate();
    for (const auto& v : variants) {
        if (v.label.empty() || v.label == "vanilla") {
            throw std::invalid_argument("ExperimentConfig: bad variant label");
        }
    }
    for (const auto& m : metrics) {
        if (std::find(kAllMetrics.begin(), kAllMetrics.end(), m) == kAllMetrics.end()) {
            throw std::invalid_argument("ExperimentConfig: unknown metric " + m);
        }
    }
    if (matched_budget && variants.size() > 1) {
        const auto& ref = variants.front().schedule.stages;
        for (const auto& v : variants) {
            const auto& st = v.schedule.stages;
            if (st.size() != ref.size()) {
                throw std::invalid_argument("ExperimentConfig: matched-budget stage count differs");
            }
            for (std::size_t i = 0; i < st.size(); ++i) {
                if (st[i].layer != ref[i].layer || st[i].keep_ratio != ref[i].keep_ratio) {
                    throw std::invalid_argument(
                        "ExperimentConfig: matched-budget variants must share stage layers and "
                        "keep ratios");
                }
            }
        }
    }
}

bool ExperimentConfig::wants(const std::string& metric) const {
    return metrics.empty() ||
           std::find(metrics.begin(), metrics.end(), metric) != metrics.end();
}

namespace {

std::vector<ExperimentRow> run_one_scenario(const ExperimentConfig& config,
                                            const ScenarioSpec& spec) {
    std::vector<ExperimentRow> rows;
    try {
        const Scenario scenario = generate_scenario(spec);
        const LayerWeights w = scenario_model(spec);
        const ForwardResult vanilla = forward_full(scenario.sequence, w, /*trace=*/true,
                                                   config.score_mode);
        const auto vanilla_last = vanilla.final_states.row(vanilla.final_states.rows - 1);

        {
            ExperimentRow row;
            row.scenario_id = spec.id;
            row.variant = "vanilla";
            row.survivors = scenario.sequence.visual_count();
            const auto rep = fidelity_report(w, vanilla_last, vanilla_last);
            row.fidelity = rep.cosine;
            row.kl = rep.kl;
            const auto cost = schedule_flops(spec.model.num_layers, spec.model.hidden_dim,
                                             spec.model.ffn_dim, spec.n_visual, spec.n_text,
                                             PruneSchedule{});
            row.flops_base = cost.base;
            row.flops_overhead = cost.overhead;
            rows.push_back(std::move(row));
        }

        for (const auto& variant : config.variants) {
            ExperimentRow row;
            row.scenario_id = spec.id;
            row.variant = variant.label;
            try {
                RunOptions opts;
                opts.score_mode = config.score_mode;
                const RunResult run =
                    run_with_schedule(scenario.sequence, w, variant.schedule, opts);
                row.survivors = static_cast<int>(run.survivor_visual_ids().size());
                const auto rep = fidelity_report(w, run.last_text_state(), vanilla_last);
                row.fidelity = rep.cosine;
                row.kl = rep.kl;
                if (!variant.schedule.stages.empty()) {
                    row.selection_overlap =
                        selection_overlap_vs_vanilla(run, vanilla.trace,
                                                     variant.schedule.stages.back().layer,
                                                     config.overlap_top_frac)
                            .ratio;
                }
                const auto cost = schedule_flops(spec.model.num_layers, spec.model.hidden_dim,
                                                 spec.model.ffn_dim, spec.n_visual, spec.n_text,
                                                 variant.schedule);
                row.flops_base = cost.base;
                row.flops_overhead = cost.overhead;
            } catch (const std::exception& e) {
                row.ok = false;
                row.error = e.what();
            }
            rows.push_back(std::move(row));
        }
    } catch (const std::exception& e) {
        ExperimentRow row;
        row.scenario_id = spec.id;
        row.variant = "vanilla";
        row.ok = false;
        row.error = e.what();
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += "\"";
    return out;
}

void write_results_csv(const std::filesystem::path& path, const ExperimentConfig& config,
                       const std::vector<ExperimentRow>& rows) {
    std::ostringstream out;
    out << "scenario_id,variant,status,survivors";
    if (config.wants("fidelity")) out << ",fidelity";
    if (config.wants("kl")) out << ",kl";
    if (config.wants("selection_overlap")) out << ",selection_overlap";
    if (config.wants("flops")) out << ",flops_base,flops_overhead,flops_total";
    out << "\n";
    for (const auto& r : rows) {
        out << csv_escape(r.scenario_id) << "," << csv_escape(r.variant) << ","
            << (r.ok ? "ok" : "failed:" + csv_escape(r.error)) << "," << r.survivors;
        if (config.wants("fidelity")) out << "," << (r.ok ? format_double(r.fidelity) : "");
        if (config.wants("kl")) out << "," << (r.ok ? format_double(r.kl) : "");
        if (config.wants("selection_overlap")) {
            out << ",";
            if (r.ok && r.selection_overlap) out << format_double(*r.selection_overlap);
        }
        if (config.wants("flops")) {
            out << "," << r.flops_base << "," << r.flops_overhead << ","
                << (r.flops_base + r.flops_overhead);
        }
        out << "\n";
    }
    write_text_file(path, out.str());
}

void write_aggregate_csv(const std::filesystem::path& path, const ExperimentConfig& config,
                         const std::vector<AggregateRow>& aggregates) {
    std::ostringstream out;
    out << "variant,count,failed,mean_survivors";
    if (config.wants("fidelity")) out << ",mean_fidelity";
    if (config.wants("kl")) out << ",mean_kl";
    if (config.wants("selection_overlap")) out << ",mean_selection_overlap";
    out << "\n";
    for (const auto& a : aggregates) {
        out << csv_escape(a.variant) << "," << a.count << "," << a.failed << ","
            << format_double(a.mean_survivors);
        if (config.wants("fidelity")) out << "," << format_double(a.mean_fidelity);
        if (config.wants("kl")) out << "," << format_double(a.mean_kl);
        if (config.wants("selection_overlap")) {
            out << ",";
            if (a.mean_selection_overlap) out << format_double(*a.mean_selection_overlap);
        }
        out << "\n";
    }
    write_text_file(path, out.str());
}

std::vector<AggregateRow> aggregate_rows(const std::vector<ExperimentRow>& rows) {
    std::vector<std::string> variants;
    for (const auto& r : rows) {
        if (std::find(variants.begin(), variants.end(), r.variant) == variants.end()) {
            variants.push_back(r.variant);
        }
    }
    std::sort(variants.begin(), variants.end());

    std::vector<AggregateRow> out;
    for (const auto& v : variants) {
        AggregateRow agg;
        agg.variant = v;
        double overlap_sum = 0.0;
        int overlap_count = 0;
        int ok_count = 0;
        for (const auto& r : rows) {
            if (r.variant != v) continue;
            ++agg.count;
            if (!r.ok) {
                ++agg.failed;
                continue;
            }
            ++ok_count;
            agg.mean_fidelity += r.fidelity;
            agg.mean_kl += r.kl;
            agg.mean_survivors += r.survivors;
            if (r.selection_overlap) {
                overlap_sum += *r.selection_overlap;
                ++overlap_count;
            }
        }
        if (ok_count > 0) {
            agg.mean_fidelity /= ok_count;
            agg.mean_kl /= ok_count;
            agg.mean_survivors /= ok_count;
        }
        if (overlap_count > 0) agg.mean_selection_overlap = overlap_sum / overlap_count;
        out.push_back(std::move(agg));
    }
    return out;
}

}  // namespace

nlohmann::json experiment_to_json(const ExperimentConfig& config) {
    nlohmann::json scenarios = nlohmann::json::array();
    for (const auto& s : config.scenarios) scenarios.push_back(scenario_to_json(s));
    nlohmann::json variants = nlohmann::json::array();
    for (const auto& v : config.variants) {
        variants.push_back({{"label", v.label}, {"schedule", schedule_to_json(v.schedule)}});
    }
    return nlohmann::json{
        {"name", config.name},
        {"scenarios", scenarios},
        {"schedules", variants},
        {"matched_budget", config.matched_budget},
        {"metrics", config.metrics},
        {"overlap_top_frac", config.overlap_top_frac},
        {"score_mode", score_mode_name(config.score_mode)},
        {"metadata",
         {{"score_tie_rule", "equal scores resolve to the lower position id"},
          {"selection_tie_rule", "equal objectives resolve to the lexicographically smallest set"},
          {"overlap_denominator", "reference (top) set size"},
          {"kl_direction", "KL(reduced || vanilla)"},
          {"token_rounding", "k = ceil(keep_ratio * pool); n_hat rounds to nearest"}}}};
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
    ExperimentConfig config;
    config.name = j.value("name", "experiment");
    for (const auto& s : j.at("scenarios")) config.scenarios.push_back(scenario_from_json(s));
    if (j.contains("schedules")) {
        for (const auto& v : j.at("schedules")) {
            config.variants.push_back(
                {v.at("label").get<std::string>(), schedule_from_json(v.at("schedule"))});
        }
    }
    config.matched_budget = j.value("matched_budget", false);
    if (j.contains("metrics")) config.metrics = j.at("metrics").get<std::vector<std::string>>();
    config.overlap_top_frac = j.value("overlap_top_frac", 0.1);
    config.score_mode = score_mode_from_name(j.value("score_mode", "post_rope"));
    config.validate();
    return config;
}

ExperimentResult run_experiment(const ExperimentConfig& config,
                                const std::filesystem::path& out_dir) {
    config.validate();
    std::filesystem::create_directories(out_dir);

    std::vector<std::vector<ExperimentRow>> per_scenario(config.scenarios.size());
    const int threads = std::min<int>(thread_cap(), std::max<std::size_t>(config.scenarios.size(), 1));
    if (threads <= 1 || config.scenarios.size() <= 1) {
        for (std::size_t i = 0; i < config.scenarios.size(); ++i) {
            per_scenario[i] = run_one_scenario(config, config.scenarios[i]);
        }
    } else {
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            for (std::size_t i = next.fetch_add(1); i < config.scenarios.size();
                 i = next.fetch_add(1)) {
                per_scenario[i] = run_one_scenario(config, config.scenarios[i]);
            }
        };
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    ExperimentResult result;
    for (auto& rows : per_scenario) {
        for (auto& r : rows) result.rows.push_back(std::move(r));
    }
    std::sort(result.rows.begin(), result.rows.end(),
              [](const ExperimentRow& a, const ExperimentRow& b) {
                  if (a.scenario_id != b.scenario_id) return a.scenario_id < b.scenario_id;
                  return a.variant < b.variant;
              });
    for (const auto& r : result.rows) result.failures += !r.ok;
    result.aggregates = aggregate_rows(result.rows);

    write_results_csv(out_dir / "results.csv", config, result.rows);
    write_aggregate_csv(out_dir / "aggregate.csv", config, result.aggregates);
    write_json_file(out_dir / "manifest.json", experiment_to_json(config));
    return result;
}

ExperimentResult run_experiment_manifest(const std::filesystem::path& manifest_path,
                                         const std::filesystem::path& out_dir) {
    return run_experiment(experiment_from_json(read_json_file(manifest_path)), out_dir);
}

}  // namespace tokenflux

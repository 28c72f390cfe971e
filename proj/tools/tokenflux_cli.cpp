#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "tokenflux/cost_model.hpp"
#include "tokenflux/experiment.hpp"
#include "tokenflux/io.hpp"
#include "tokenflux/layer_select.hpp"
#include "tokenflux/metrics.hpp"
#include "tokenflux/model.hpp"
#include "tokenflux/pruning.hpp"
#include "tokenflux/scenario.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tokenflux;

namespace {

ScoreMode parse_score_mode(const std::string& s) {
    if (s == "post" || s == "post_rope") return ScoreMode::PostRope;
    if (s == "pre" || s == "pre_rope") return ScoreMode::PreRope;
    throw CLI::ValidationError("--score-mode must be post or pre");
}

void parse_range(const std::string& s, int& lo, int& hi) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw CLI::ValidationError("range must look like lo:hi");
    lo = std::stoi(s.substr(0, colon));
    hi = std::stoi(s.substr(colon + 1));
}

std::string profile_csv(const PerformanceProfile& profile) {
    std::ostringstream out;
    out << "layer,score\n";
    for (int layer = 1; layer <= profile.num_layers(); ++layer) {
        out << layer << "," << format_double(profile.scores[layer - 1]) << "\n";
    }
    return out.str();
}

PerformanceProfile profile_from_csv(const fs::path& path) {
    std::istringstream in(read_text_file(path));
    std::string line;
    if (!std::getline(in, line) || line != "layer,score") {
        throw std::runtime_error("profile CSV must start with 'layer,score': " + path.string());
    }
    PerformanceProfile profile;
    int expected = 1;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos || std::stoi(line.substr(0, comma)) != expected) {
            throw std::runtime_error("profile CSV rows must list layers 1..L in order");
        }
        profile.scores.push_back(std::stod(line.substr(comma + 1)));
        ++expected;
    }
    profile.validate();
    return profile;
}

std::string overlap_matrix_csv(const OverlapMatrix& m) {
    std::ostringstream out;
    out << "early_layer\\late_layer";
    for (int b : m.late_layers) out << "," << b;
    out << "\n";
    for (std::size_t i = 0; i < m.early_layers.size(); ++i) {
        out << m.early_layers[i];
        for (std::size_t j = 0; j < m.late_layers.size(); ++j) {
            out << "," << format_double(m.ratios.at(i, j));
        }
        out << "\n";
    }
    return out.str();
}

int cmd_gen_model(const fs::path& config_path, std::uint64_t seed, const fs::path& out) {
    const ModelConfig config = config_from_json(read_json_file(config_path));
    save_model(init_model(config, seed), out);
    std::cout << "wrote " << out.string() << ".tflx and " << out.string() << ".json\n";
    return 0;
}

int cmd_gen_scenario(const fs::path& spec_path, const fs::path& out,
                     const fs::path& embeddings_out) {
    const ScenarioSpec spec = scenario_from_json(read_json_file(spec_path));
    const Scenario scenario = generate_scenario(spec);
    json j = scenario_to_json(spec);
    j["signal_ids"] = scenario.signal_ids;
    write_json_file(out, j);
    if (!embeddings_out.empty()) {
        Matrix emb(scenario.sequence.size(), spec.model.hidden_dim);
        for (std::size_t i = 0; i < scenario.sequence.size(); ++i) {
            const auto& e = scenario.sequence.tokens[i].embedding;
            std::copy(e.begin(), e.end(), emb.row(i).begin());
        }
        write_tensor(embeddings_out, emb);
    }
    std::cout << "wrote " << out.string() << "\n";
    return 0;
}

int cmd_run(const fs::path& config_path, const fs::path& out_dir) {
    const ExperimentResult result = run_experiment_manifest(config_path, out_dir);
    std::cout << result.rows.size() << " rows, " << result.failures << " failures -> "
              << out_dir.string() << "\n";
    return result.failures == 0 ? 0 : 1;
}

int cmd_profile_layers(const fs::path& scenario_path, double retain, const fs::path& out,
                       ScoreMode mode) {
    const ScenarioSpec spec = scenario_from_json(read_json_file(scenario_path));
    const Scenario scenario = generate_scenario(spec);
    const LayerWeights w = scenario_model(spec);
    const PerformanceProfile profile =
        profile_selection_capability(scenario.sequence, w, retain, default_fidelity_metric, mode);
    write_text_file(out, profile_csv(profile));
    std::cout << "wrote " << out.string() << "\n";
    return 0;
}

int cmd_select_layers(const std::vector<fs::path>& profile_paths, int budget, const fs::path& out) {
    std::vector<PerformanceProfile> profiles;
    for (const auto& p : profile_paths) profiles.push_back(profile_from_csv(p));
    const PerformanceProfile pooled =
        profiles.size() == 1 ? profiles.front() : pool_profiles(profiles);
    const SelectionResult sel = optimal_pruning_layers(pooled, budget);
    json j{{"layers", sel.layers},
           {"objective", sel.objective},
           {"budget", budget},
           {"metadata",
            {{"pooling", "min-max normalization per profile over layers 3..L, then mean"},
             {"placeholder_layers_1_2", "metric floor (self score minus 2)"},
             {"tie_rule", "lexicographically smallest layer set"}}}};
    write_json_file(out, j);
    std::cout << "layers:";
    for (int l : sel.layers) std::cout << " " << l;
    std::cout << "  objective: " << format_double(sel.objective) << "\n";
    return 0;
}

CostInputs cost_inputs_from_json(const json& j) {
    CostInputs in;
    in.num_layers = j.at("T").get<std::int64_t>();
    in.hidden_dim = j.at("d").get<std::int64_t>();
    in.ffn_dim = j.at("m").get<std::int64_t>();
    in.n_visual = j.at("n_v").get<std::int64_t>();
    in.n_text = j.at("n_t").get<std::int64_t>();
    in.prune_layer = j.value("K", static_cast<std::int64_t>(0));
    in.drop_fraction = j.value("D", 0.0);
    in.low_ranked = j.value("R", static_cast<std::int64_t>(0));
    in.merged = j.value("Z", static_cast<std::int64_t>(0));
    in.retained_ratio = j.value("r", 1.0);
    return in;
}

int cmd_flops(const fs::path& inputs_path, bool overhead, const fs::path& out) {
    const CostInputs in = cost_inputs_from_json(read_json_file(inputs_path));
    const std::uint64_t f = overhead ? bypass_overhead(in) : total_flops(in);
    const json j{{"flops", f}, {"tera", format_double(static_cast<double>(f) / 1e12)}};
    if (out.empty()) {
        std::cout << j.dump() << "\n";
    } else {
        write_json_file(out, j);
        std::cout << "wrote " << out.string() << "\n";
    }
    return 0;
}

int cmd_overlap(const fs::path& scenario_path, double bottom, double top,
                const std::string& early, const std::string& late, const fs::path& out,
                ScoreMode mode) {
    const ScenarioSpec spec = scenario_from_json(read_json_file(scenario_path));
    const Scenario scenario = generate_scenario(spec);
    const LayerWeights w = scenario_model(spec);
    const ForwardResult vanilla = forward_full(scenario.sequence, w, /*trace=*/true, mode);
    int early_lo, early_hi, late_lo, late_hi;
    parse_range(early, early_lo, early_hi);
    parse_range(late, late_lo, late_hi);
    const OverlapMatrix m =
        cross_layer_overlap_matrix(vanilla.trace, bottom, top, early_lo, early_hi, late_lo, late_hi);
    write_text_file(out, overlap_matrix_csv(m));
    std::cout << "wrote " << out.string() << "\n";
    return 0;
}

int cmd_offsets(const fs::path& scenario_path, const fs::path& schedule_path, const fs::path& out,
                ScoreMode mode) {
    const ScenarioSpec spec = scenario_from_json(read_json_file(scenario_path));
    const Scenario scenario = generate_scenario(spec);
    const LayerWeights w = scenario_model(spec);
    const PruneSchedule schedule = schedule_from_json(read_json_file(schedule_path));

    RunOptions opts;
    opts.score_mode = mode;
    const RunResult run = run_with_schedule(scenario.sequence, w, schedule, opts);
    const ForwardResult vanilla = forward_full(scenario.sequence, w, /*trace=*/true, mode);
    const OffsetReport report = group_offset_report(run, vanilla.trace);

    fs::create_directories(out);
    json groups = json::array();
    std::size_t member_rows = 0;
    for (const auto& g : report.groups) member_rows += g.member_ids.size();
    const std::size_t d = static_cast<std::size_t>(spec.model.hidden_dim);
    Matrix merged(report.groups.size(), d);
    Matrix vanilla_means(report.groups.size(), d);
    Matrix members(member_rows, d);
    std::size_t row = 0;
    for (std::size_t g = 0; g < report.groups.size(); ++g) {
        const auto& entry = report.groups[g];
        std::copy(entry.merged_offset.begin(), entry.merged_offset.end(), merged.row(g).begin());
        std::copy(entry.vanilla_mean_offset.begin(), entry.vanilla_mean_offset.end(),
                  vanilla_means.row(g).begin());
        for (std::size_t m = 0; m < entry.member_ids.size(); ++m) {
            auto src = entry.member_vanilla_offsets.row(m);
            std::copy(src.begin(), src.end(), members.row(row++).begin());
        }
        groups.push_back({{"group_id", entry.group_id},
                          {"origin_layer", entry.origin_layer},
                          {"restore_layer", entry.restore_layer},
                          {"member_ids", entry.member_ids},
                          {"cosine", entry.cosine},
                          {"euclidean", entry.euclidean}});
    }
    write_json_file(out / "offsets.json", json{{"groups", groups}});
    write_tensor(out / "merged_offsets.tflx", merged);
    write_tensor(out / "vanilla_mean_offsets.tflx", vanilla_means);
    write_tensor(out / "member_offsets.tflx", members);
    std::cout << "wrote " << (out / "offsets.json").string() << " and offset tensors\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tokenflux: visual-token reduction engine and diagnostics"};
    app.require_subcommand(1);

    std::string score_mode_str = "post";
    fs::path config_path, spec_path, out_path, embeddings_path, schedule_path, inputs_path;
    std::vector<fs::path> profile_paths;
    std::uint64_t seed = 0;
    double retain = 0.2, bottom = 0.5, top = 0.1;
    std::string early = "1:4", late = "5:8";
    int budget = 3;
    bool overhead = false;

    auto* gen_model = app.add_subcommand("gen-model", "Create seeded weights (TFLX + JSON mirror)");
    gen_model->add_option("--config", config_path, "model config JSON")->required();
    gen_model->add_option("--seed", seed, "weight seed");
    gen_model->add_option("--out", out_path, "output base path")->required();

    auto* gen_scenario = app.add_subcommand("gen-scenario", "Canonicalize a scenario spec");
    gen_scenario->add_option("--spec", spec_path, "scenario spec JSON")->required();
    gen_scenario->add_option("--out", out_path, "output JSON")->required();
    gen_scenario->add_option("--embeddings", embeddings_path, "optional TFLX embedding dump");

    auto* run = app.add_subcommand("run", "Run an experiment config");
    run->add_option("--config", config_path, "experiment JSON")->required();
    run->add_option("--out", out_path, "results directory")->required();

    auto* profile = app.add_subcommand("profile-layers", "Layer-wise selection capability profile");
    profile->add_option("--scenario", spec_path, "scenario spec JSON")->required();
    profile->add_option("--retain", retain, "retain fraction V in (0,1]");
    profile->add_option("--out", out_path, "profile CSV")->required();
    profile->add_option("--score-mode", score_mode_str, "post|pre RoPE scoring");

    auto* select = app.add_subcommand("select-layers", "Pick pruning layers from profiles");
    select->add_option("--profile", profile_paths, "profile CSV (repeatable; pooled when several)")
        ->required();
    select->add_option("--budget", budget, "max pruning layers");
    select->add_option("--out", out_path, "selection JSON")->required();

    auto* flops = app.add_subcommand("flops", "Analytical prefill FLOPs");
    flops->add_option("--inputs", inputs_path, "cost inputs JSON")->required();
    flops->add_flag("--overhead", overhead, "emit the bypass overhead instead");
    flops->add_option("--out", out_path, "output JSON (stdout when omitted)");

    auto* overlap = app.add_subcommand("overlap", "Cross-layer ranking overlap matrix");
    overlap->add_option("--scenario", spec_path, "scenario spec JSON")->required();
    overlap->add_option("--bottom", bottom, "bottom fraction at early layers");
    overlap->add_option("--top", top, "top fraction at late layers");
    overlap->add_option("--early", early, "early layer range lo:hi");
    overlap->add_option("--late", late, "late layer range lo:hi");
    overlap->add_option("--out", out_path, "matrix CSV")->required();
    overlap->add_option("--score-mode", score_mode_str, "post|pre RoPE scoring");

    auto* offsets = app.add_subcommand("offsets", "Group offset alignment diagnostics");
    offsets->add_option("--scenario", spec_path, "scenario spec JSON")->required();
    offsets->add_option("--schedule", schedule_path, "bypass schedule JSON")->required();
    offsets->add_option("--out", out_path, "output directory")->required();
    offsets->add_option("--score-mode", score_mode_str, "post|pre RoPE scoring");

    CLI11_PARSE(app, argc, argv);

    try {
        const ScoreMode mode = parse_score_mode(score_mode_str);
        if (gen_model->parsed()) return cmd_gen_model(config_path, seed, out_path);
        if (gen_scenario->parsed()) return cmd_gen_scenario(spec_path, out_path, embeddings_path);
        if (run->parsed()) return cmd_run(config_path, out_path);
        if (profile->parsed()) return cmd_profile_layers(spec_path, retain, out_path, mode);
        if (select->parsed()) return cmd_select_layers(profile_paths, budget, out_path);
        if (flops->parsed()) return cmd_flops(inputs_path, overhead, out_path);
        if (overlap->parsed()) {
            return cmd_overlap(spec_path, bottom, top, early, late, out_path, mode);
        }
        if (offsets->parsed()) return cmd_offsets(spec_path, schedule_path, out_path, mode);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

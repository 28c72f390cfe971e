#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "tokenflux/model.hpp"

namespace tokenflux {

// Everything needed to reproduce one synthetic input bit-exactly.
struct ScenarioSpec {
    std::string id = "scenario";
    ModelConfig model;
    std::uint64_t model_seed = 0;
    int n_visual = 0;
    int n_text = 0;
    std::uint64_t embedding_seed = 0;
    // Signal tokens get the last text embedding mixed in, giving selection a
    // ground truth: their T-V dot products sit above the random baseline.
    int signal_count = 0;
    double signal_strength = 0.0;

    void validate() const;
};

struct Scenario {
    ScenarioSpec spec;
    TokenSequence sequence;
    std::vector<int> signal_ids;  // visual position ids carrying signal
};

Scenario generate_scenario(const ScenarioSpec& spec);
LayerWeights scenario_model(const ScenarioSpec& spec);

nlohmann::json scenario_to_json(const ScenarioSpec& spec);
ScenarioSpec scenario_from_json(const nlohmann::json& j);

}  // namespace tokenflux

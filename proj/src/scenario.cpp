#include "tokenflux/scenario.hpp"

#include <stdexcept>

#include "tokenflux/io.hpp"

namespace tokenflux {

void ScenarioSpec::validate() const {
    model.validate();
    if (n_visual < 1 || n_text < 1) {
        throw std::invalid_argument("ScenarioSpec: need at least one visual and one text token");
    }
    if (signal_count < 0 || signal_count > n_visual) {
        throw std::invalid_argument("ScenarioSpec: signal_count out of [0, n_visual]");
    }
    if (id.empty()) throw std::invalid_argument("ScenarioSpec: empty id");
}

Scenario generate_scenario(const ScenarioSpec& spec) {
    spec.validate();
    const int d = spec.model.hidden_dim;
    SeededRng rng(spec.embedding_seed);

    // Text embeddings first so the signal direction (the last text token) is
    // fixed before any visual draw.
    std::vector<std::vector<double>> text(spec.n_text, std::vector<double>(d));
    for (auto& e : text) {
        for (double& v : e) v = rng.next_normal();
    }
    std::vector<std::vector<double>> visual(spec.n_visual, std::vector<double>(d));
    for (auto& e : visual) {
        for (double& v : e) v = rng.next_normal();
    }

    // Partial Fisher-Yates pick of the signal positions.
    std::vector<int> pool(spec.n_visual);
    for (int i = 0; i < spec.n_visual; ++i) pool[i] = i;
    std::vector<int> signal_ids;
    for (int i = 0; i < spec.signal_count; ++i) {
        const auto j = i + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(
                               spec.n_visual - i)));
        std::swap(pool[i], pool[j]);
        signal_ids.push_back(pool[i]);
    }
    std::sort(signal_ids.begin(), signal_ids.end());

    const std::vector<double>& query = text.back();
    for (int id : signal_ids) {
        for (int c = 0; c < d; ++c) visual[id][c] += spec.signal_strength * query[c];
    }

    Scenario scenario;
    scenario.spec = spec;
    scenario.signal_ids = std::move(signal_ids);
    scenario.sequence.tokens.reserve(spec.n_visual + spec.n_text);
    for (int i = 0; i < spec.n_visual; ++i) {
        scenario.sequence.tokens.push_back({TokenRole::Visual, i, std::move(visual[i])});
    }
    for (int i = 0; i < spec.n_text; ++i) {
        scenario.sequence.tokens.push_back({TokenRole::Text, spec.n_visual + i, std::move(text[i])});
    }
    scenario.sequence.validate(d);
    return scenario;
}

LayerWeights scenario_model(const ScenarioSpec& spec) {
    return init_model(spec.model, spec.model_seed);
}

nlohmann::json scenario_to_json(const ScenarioSpec& spec) {
    return nlohmann::json{{"id", spec.id},
                          {"model", config_to_json(spec.model)},
                          {"model_seed", spec.model_seed},
                          {"n_visual", spec.n_visual},
                          {"n_text", spec.n_text},
                          {"embedding_seed", spec.embedding_seed},
                          {"signal_count", spec.signal_count},
                          {"signal_strength", spec.signal_strength}};
}

ScenarioSpec scenario_from_json(const nlohmann::json& j) {
    ScenarioSpec spec;
    spec.id = j.value("id", "scenario");
    spec.model = config_from_json(j.at("model"));
    spec.model_seed = j.at("model_seed").get<std::uint64_t>();
    spec.n_visual = j.at("n_visual").get<int>();
    spec.n_text = j.at("n_text").get<int>();
    spec.embedding_seed = j.at("embedding_seed").get<std::uint64_t>();
    spec.signal_count = j.value("signal_count", 0);
    spec.signal_strength = j.value("signal_strength", 0.0);
    spec.validate();
    return spec;
}

}  // namespace tokenflux

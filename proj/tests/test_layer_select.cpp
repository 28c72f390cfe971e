#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "tokenflux/layer_select.hpp"
#include "tokenflux/scenario.hpp"

using namespace tokenflux;

namespace {

PerformanceProfile profile_of(std::vector<double> scores) {
    PerformanceProfile p;
    p.scores = std::move(scores);
    return p;
}

PerformanceProfile random_profile(SeededRng& rng) {
    const int l = 3 + static_cast<int>(rng.next_below(14));  // L in [3, 16]
    PerformanceProfile p;
    p.scores.resize(l);
    for (double& x : p.scores) x = rng.next_double();
    // occasional exact ties to exercise the tie rules
    if (l > 4 && rng.next_below(3) == 0) p.scores[4] = p.scores[2];
    return p;
}

}  // namespace

TEST_CASE("eligible_layers examples") {
    CHECK(eligible_layers(profile_of({0.1, 0.2, 0.9, 0.5, 0.6, 0.3})) == std::vector<int>{3});
    CHECK(eligible_layers(profile_of({0.1, 0.2, 0.3, 0.4, 0.5})) == std::vector<int>{3, 4, 5});
    CHECK(eligible_layers(profile_of({0.9, 0.8, 0.7, 0.7, 0.1})).empty());
    // eligible scores are strictly increasing by construction
    const auto elig = eligible_layers(profile_of({0.0, 0.1, 0.5, 0.2, 0.7, 0.6, 0.9}));
    CHECK(elig == std::vector<int>{3, 5, 7});
}

TEST_CASE("objective examples") {
    const PerformanceProfile p = profile_of({0.1, 0.2, 0.9, 0.5, 0.6, 0.3});

    const SelectionResult dp = optimal_pruning_layers(p, 1);
    CHECK(dp.layers == std::vector<int>{3});
    CHECK(dp.objective == doctest::Approx(0.725).epsilon(1e-12));

    const SelectionResult brute = exhaustive_selector(p, 1);
    CHECK(brute.layers == dp.layers);
    CHECK(brute.objective == dp.objective);

    // ample budget on a strictly increasing profile selects every eligible layer
    const PerformanceProfile inc = profile_of({0.1, 0.2, 0.3, 0.4, 0.5});
    const SelectionResult all = optimal_pruning_layers(inc, 5);
    CHECK(all.layers == std::vector<int>{3, 4, 5});
    CHECK(all.layers == exhaustive_selector(inc, 5).layers);

    // constant profile: nothing eligible, P equals x_2 exactly
    const PerformanceProfile flat = profile_of({0.4, 0.4, 0.4, 0.4});
    const SelectionResult none = optimal_pruning_layers(flat, 2);
    CHECK(none.layers.empty());
    CHECK(none.objective == 0.4);
}

TEST_CASE("empty selection evaluates to x_2 exactly") {
    const PerformanceProfile p = profile_of({0.13, 0.1, 0.2, 0.05});
    CHECK(selection_objective(p, std::vector<int>{}) == 0.1);
    CHECK_THROWS_AS(selection_objective(p, std::vector<int>{2}), std::invalid_argument);
    CHECK_THROWS_AS(selection_objective(p, std::vector<int>{4, 3}), std::invalid_argument);
}

TEST_CASE("dp agrees with the exhaustive oracle on 200 random profiles") {
    SeededRng rng(2024);
    for (int trial = 0; trial < 200; ++trial) {
        const PerformanceProfile p = random_profile(rng);
        const int budget = 1 + static_cast<int>(rng.next_below(3));
        const SelectionResult dp = optimal_pruning_layers(p, budget);
        const SelectionResult brute = exhaustive_selector(p, budget);
        CHECK(dp.objective == brute.objective);
        CHECK(dp.layers == brute.layers);
    }
}

TEST_CASE("budget monotonicity") {
    SeededRng rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        const PerformanceProfile p = random_profile(rng);
        double prev = optimal_pruning_layers(p, 1).objective;
        for (int m = 2; m <= 4; ++m) {
            const double cur = optimal_pruning_layers(p, m).objective;
            CHECK(cur >= prev);
            prev = cur;
        }
    }
}

TEST_CASE("objective shifts affinely with a constant offset") {
    SeededRng rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        const PerformanceProfile p = random_profile(rng);
        const double c = rng.next_double() * 4.0 - 2.0;
        PerformanceProfile shifted = p;
        for (double& x : shifted.scores) x += c;
        const SelectionResult base = optimal_pruning_layers(p, 2);
        const SelectionResult moved = optimal_pruning_layers(shifted, 2);
        CHECK(moved.layers == base.layers);
        CHECK(std::abs(moved.objective - (base.objective + c)) < 1e-12);
    }
}

TEST_CASE("exhaustive selector edge cases") {
    const PerformanceProfile p = profile_of({0.1, 0.2, 0.9, 0.5, 0.6, 0.3});
    CHECK(exhaustive_selector(p, 0).layers.empty());
    CHECK(exhaustive_selector(p, 0).objective == 0.2);

    PerformanceProfile wide;
    wide.scores.resize(25);
    for (int i = 0; i < 25; ++i) wide.scores[i] = i * 0.01;
    CHECK_THROWS_AS(exhaustive_selector(wide, 2), std::invalid_argument);
    CHECK_NOTHROW(optimal_pruning_layers(wide, 2));
}

TEST_CASE("profile_selection_capability") {
    ModelConfig c;
    c.num_layers = 5;
    c.hidden_dim = 12;
    c.ffn_dim = 24;
    c.num_heads = 2;
    c.vocab_size = 7;
    ScenarioSpec spec;
    spec.model = c;
    spec.model_seed = 5;
    spec.n_visual = 8;
    spec.n_text = 2;
    spec.embedding_seed = 6;
    const Scenario scenario = generate_scenario(spec);
    const LayerWeights w = scenario_model(spec);

    SUBCASE("retaining everything is perfect fidelity at every layer") {
        const PerformanceProfile p = profile_selection_capability(scenario.sequence, w, 1.0);
        REQUIRE(p.num_layers() == 5);
        for (int layer = 3; layer <= 5; ++layer) {
            CHECK(p.scores[layer - 1] == doctest::Approx(1.0).epsilon(1e-12));
        }
        // placeholders sit at the metric floor
        CHECK(p.scores[0] == p.scores[1]);
        CHECK(p.scores[0] == doctest::Approx(-1.0).epsilon(1e-12));
    }

    SUBCASE("deterministic and shaped like the layer stack") {
        const PerformanceProfile a = profile_selection_capability(scenario.sequence, w, 0.5);
        const PerformanceProfile b = profile_selection_capability(scenario.sequence, w, 0.5);
        CHECK(a.scores == b.scores);
        CHECK(a.num_layers() == c.num_layers);
        for (double x : a.scores) CHECK(std::isfinite(x));
    }

    SUBCASE("rejects a bad retain fraction") {
        CHECK_THROWS_AS(profile_selection_capability(scenario.sequence, w, 0.0),
                        std::invalid_argument);
    }
}

TEST_CASE("pool_profiles normalizes before averaging") {
    const PerformanceProfile a = profile_of({-1, -1, 0.0, 5.0, 10.0});
    const PerformanceProfile b = profile_of({-1, -1, 0.2, 0.3, 0.4});
    const PerformanceProfile pooled = pool_profiles(std::vector<PerformanceProfile>{a, b});
    REQUIRE(pooled.num_layers() == 5);
    CHECK(pooled.scores[0] == -1.0);
    CHECK(pooled.scores[1] == -1.0);
    // both datasets normalize to {0, 0.5, 1} over layers 3..5
    CHECK(pooled.scores[2] == doctest::Approx(0.0));
    CHECK(pooled.scores[3] == doctest::Approx(0.5));
    CHECK(pooled.scores[4] == doctest::Approx(1.0));
}

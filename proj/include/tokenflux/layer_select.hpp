#pragma once

#include <functional>
#include <span>
#include <vector>

#include "tokenflux/model.hpp"
#include "tokenflux/pruning.hpp"

namespace tokenflux {

// Per-layer selection-capability scores x_1..x_L (index i-1 holds layer i).
// Layers 1 and 2 carry placeholder scores and are never eligible.
struct PerformanceProfile {
    std::vector<double> scores;

    int num_layers() const { return static_cast<int>(scores.size()); }
    void validate() const;
};

struct SelectionResult {
    std::vector<int> layers;  // ascending, subset of eligible layers
    double objective = 0.0;
};

// Layers i >= 3 whose score strictly exceeds every earlier score. Scores of
// the returned layers are automatically strictly increasing.
std::vector<int> eligible_layers(const PerformanceProfile& profile);

// P(S) per the piecewise-constant performance model: with i_0 = 2 and
// i_{K+1} = L, P(S) = sum_k x_{i_k} * (i_{k+1} - i_k) / (L - 2). The empty
// set evaluates to x_2 exactly.
double selection_objective(const PerformanceProfile& profile, std::span<const int> layers);

// Maximizes P(S) over subsets of the eligible layers with |S| <= budget via
// dynamic programming over (layer, picks used); exact-value ties resolve to
// the lexicographically smallest layer set.
SelectionResult optimal_pruning_layers(const PerformanceProfile& profile, int budget);

// Brute-force enumeration with the same objective and tie rule; guards at 20
// eligible layers.
SelectionResult exhaustive_selector(const PerformanceProfile& profile, int budget);

using FidelityMetric =
    std::function<double(std::span<const double> reduced_last, std::span<const double> vanilla_last)>;

// Cosine of the last text token's final state (the default profiling metric).
double default_fidelity_metric(std::span<const double> reduced_last,
                               std::span<const double> vanilla_last);

// Layer-wise selection capability: for each layer l in [3, L], re-run the
// model keeping everything through layer 2 and only the top retain_fraction
// visual tokens as ranked by layer l of the vanilla trace, then score the
// reduced run against the vanilla run. Layers 1-2 get the self-fidelity
// minus 2 (the metric floor), marking them as excluded.
PerformanceProfile profile_selection_capability(const TokenSequence& seq, const LayerWeights& w,
                                                double retain_fraction,
                                                const FidelityMetric& metric = default_fidelity_metric,
                                                ScoreMode mode = ScoreMode::PostRope);

// Min-max normalize each profile over layers 3..L to [0,1] and average; the
// pooled profile keeps -1 placeholders at layers 1-2. Constant stretches
// normalize to 0.
PerformanceProfile pool_profiles(std::span<const PerformanceProfile> profiles);

}  // namespace tokenflux

#include "tokenflux/layer_select.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <stdexcept>

namespace tokenflux {

void PerformanceProfile::validate() const {
    if (num_layers() < 3) throw std::invalid_argument("PerformanceProfile: needs >= 3 layers");
    ensure_finite(scores, "PerformanceProfile scores");
}

std::vector<int> eligible_layers(const PerformanceProfile& profile) {
    profile.validate();
    std::vector<int> out;
    double prefix_max = profile.scores[0];
    for (int layer = 2; layer <= profile.num_layers(); ++layer) {
        const double x = profile.scores[layer - 1];
        if (layer >= 3 && x > prefix_max) out.push_back(layer);
        prefix_max = std::max(prefix_max, x);
    }
    return out;
}

namespace {

// Numerator of P(S), accumulated left to right. Both selectors compare this
// quantity so their tie decisions are bit-identical.
double objective_numerator(const PerformanceProfile& profile, std::span<const int> layers) {
    const int l = profile.num_layers();
    double u = 0.0;
    int prev = 2;
    double prev_score = profile.scores[1];
    for (int layer : layers) {
        u += prev_score * static_cast<double>(layer - prev);
        prev = layer;
        prev_score = profile.scores[layer - 1];
    }
    u += prev_score * static_cast<double>(l - prev);
    return u;
}

// Tie order over layer sets: element-wise ascending comparison, with a
// missing element counting as +infinity, so an extension outranks its own
// prefix ({3,4,5} beats {3,4}; the trailing layer adds zero width but is
// still selected).
bool lex_less(std::span<const int> a, std::span<const int> b) {
    const std::size_t n = std::min(a.size(), b.size());
    for (std::size_t i = 0; i < n; ++i) {
        if (a[i] != b[i]) return a[i] < b[i];
    }
    return a.size() > b.size();
}

}  // namespace

double selection_objective(const PerformanceProfile& profile, std::span<const int> layers) {
    profile.validate();
    int prev = 2;
    for (int layer : layers) {
        if (layer < 3 || layer > profile.num_layers() || layer <= prev) {
            throw std::invalid_argument("selection_objective: layers must be ascending in [3, L]");
        }
        prev = layer;
    }
    if (layers.empty()) return profile.scores[1];
    return objective_numerator(profile, layers) / static_cast<double>(profile.num_layers() - 2);
}

SelectionResult optimal_pruning_layers(const PerformanceProfile& profile, int budget) {
    profile.validate();
    if (budget < 0) throw std::invalid_argument("optimal_pruning_layers: negative budget");
    const std::vector<int> elig = eligible_layers(profile);
    const int n = static_cast<int>(elig.size());
    const int l = profile.num_layers();
    const int m = std::min(budget, n);

    // dp[j][c]: best partial numerator for a chain of c picks ending at
    // elig[j], excluding the trailing x_{elig[j]} * (L - elig[j]) term.
    std::vector<std::vector<double>> dp(n, std::vector<double>(m + 1, 0.0));
    std::vector<std::vector<int>> parent(n, std::vector<int>(m + 1, -2));  // -2 unset, -1 base

    auto chain_of = [&](int j, int c) {
        std::vector<int> layers;
        while (j >= 0) {
            layers.push_back(elig[j]);
            j = parent[j][c];
            --c;
        }
        std::reverse(layers.begin(), layers.end());
        return layers;
    };

    for (int c = 1; c <= m; ++c) {
        for (int j = 0; j < n; ++j) {
            double best = 0.0;
            int best_parent = -2;
            if (c == 1) {
                best = profile.scores[1] * static_cast<double>(elig[j] - 2);
                best_parent = -1;
            }
            for (int i = 0; i < j; ++i) {
                if (parent[i][c - 1] == -2) continue;
                const double u =
                    dp[i][c - 1] + profile.scores[elig[i] - 1] * static_cast<double>(elig[j] - elig[i]);
                if (best_parent == -2 || u > best) {
                    best = u;
                    best_parent = i;
                } else if (u == best && best_parent >= 0 &&
                           lex_less(chain_of(i, c - 1), chain_of(best_parent, c - 1))) {
                    // Equal value: keep the lexicographically smaller prefix.
                    best_parent = i;
                }
            }
            dp[j][c] = best;
            parent[j][c] = best_parent;
        }
    }

    std::vector<int> best_set;
    double best_u = objective_numerator(profile, best_set);  // empty set baseline
    for (int c = 1; c <= m; ++c) {
        for (int j = 0; j < n; ++j) {
            if (parent[j][c] == -2) continue;
            const double u = dp[j][c] + profile.scores[elig[j] - 1] * static_cast<double>(l - elig[j]);
            if (u > best_u) {
                best_u = u;
                best_set = chain_of(j, c);
            } else if (u == best_u) {
                auto candidate = chain_of(j, c);
                if (lex_less(candidate, best_set)) best_set = std::move(candidate);
            }
        }
    }
    return {best_set, selection_objective(profile, best_set)};
}

SelectionResult exhaustive_selector(const PerformanceProfile& profile, int budget) {
    profile.validate();
    if (budget < 0) throw std::invalid_argument("exhaustive_selector: negative budget");
    const std::vector<int> elig = eligible_layers(profile);
    if (elig.size() > 20) {
        throw std::invalid_argument("exhaustive_selector: more than 20 eligible layers");
    }
    const int n = static_cast<int>(elig.size());

    std::vector<int> best_set;
    double best_u = objective_numerator(profile, best_set);
    std::vector<int> candidate;
    for (std::uint32_t mask = 1; mask < (1u << n); ++mask) {
        if (std::popcount(mask) > budget) continue;
        candidate.clear();
        for (int j = 0; j < n; ++j) {
            if (mask & (1u << j)) candidate.push_back(elig[j]);
        }
        const double u = objective_numerator(profile, candidate);
        if (u > best_u || (u == best_u && lex_less(candidate, best_set))) {
            best_u = u;
            best_set = candidate;
        }
    }
    return {best_set, selection_objective(profile, best_set)};
}

double default_fidelity_metric(std::span<const double> reduced_last,
                               std::span<const double> vanilla_last) {
    return cosine_sim(reduced_last, vanilla_last);
}

PerformanceProfile profile_selection_capability(const TokenSequence& seq, const LayerWeights& w,
                                                double retain_fraction,
                                                const FidelityMetric& metric, ScoreMode mode) {
    if (!(retain_fraction > 0.0) || retain_fraction > 1.0) {
        throw std::invalid_argument("profile_selection_capability: retain_fraction in (0, 1]");
    }
    const ForwardResult vanilla = forward_full(seq, w, /*trace=*/true, mode);
    const auto vanilla_last = vanilla.final_states.row(vanilla.final_states.rows - 1);
    const int l = w.config.num_layers;

    PerformanceProfile profile;
    profile.scores.assign(l, 0.0);
    // Layers 1-2 sit at the metric floor: excluded from analysis, never the
    // prefix max.
    const double marker = metric(vanilla_last, vanilla_last) - 2.0;
    profile.scores[0] = marker;
    profile.scores[1] = marker;

    for (int layer = 3; layer <= l; ++layer) {
        const LayerRecord& rec = vanilla.trace.after_layer(layer);
        const Selection sel =
            select_topk_tokens(rec.visual_ids, rec.tv_scores, retain_fraction);
        RunOptions opts;
        opts.score_mode = mode;
        opts.trace = false;
        const RunResult reduced = run_with_keep_set(seq, w, 2, sel.selected_ids, opts);
        profile.scores[layer - 1] = metric(reduced.last_text_state(), vanilla_last);
    }
    return profile;
}

PerformanceProfile pool_profiles(std::span<const PerformanceProfile> profiles) {
    if (profiles.empty()) throw std::invalid_argument("pool_profiles: no profiles");
    const int l = profiles.front().num_layers();
    for (const auto& p : profiles) {
        p.validate();
        if (p.num_layers() != l) throw std::invalid_argument("pool_profiles: layer count mismatch");
    }
    PerformanceProfile pooled;
    pooled.scores.assign(l, -1.0);
    for (int layer = 3; layer <= l; ++layer) pooled.scores[layer - 1] = 0.0;
    for (const auto& p : profiles) {
        double lo = p.scores[2], hi = p.scores[2];
        for (int layer = 3; layer <= l; ++layer) {
            lo = std::min(lo, p.scores[layer - 1]);
            hi = std::max(hi, p.scores[layer - 1]);
        }
        for (int layer = 3; layer <= l; ++layer) {
            const double x = p.scores[layer - 1];
            pooled.scores[layer - 1] += hi > lo ? (x - lo) / (hi - lo) : 0.0;
        }
    }
    for (int layer = 3; layer <= l; ++layer) {
        pooled.scores[layer - 1] /= static_cast<double>(profiles.size());
    }
    return pooled;
}

}  // namespace tokenflux

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "tokenflux/model.hpp"
#include "tokenflux/numerics.hpp"

namespace tokenflux {

enum class Strategy { Drop, Merge, Bypass };

const char* strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);

struct PruneStage {
    int layer = 0;            // 1-based
    double keep_ratio = 1.0;  // (0, 1]
    int merge_budget = 0;     // requested Z; clamped to [1, unselected] at runtime
    Strategy strategy = Strategy::Drop;
};

// Ordered pruning stages; the final stage always hard-selects (unselected
// tokens are removed outright, never merged or bypassed onward).
struct PruneSchedule {
    std::vector<PruneStage> stages;

    void validate(int num_layers) const;
    PruneSchedule with_strategy(Strategy s) const;
};

// Keep ratios for `stages` pruning stages that take n_visual tokens to
// final_budget survivors, following a geometric progression of per-stage
// targets so the iterated ceil counts land exactly on the budget.
std::vector<double> geometric_keep_ratios(int n_visual, int stages, int final_budget);

struct TokenGroup {
    int group_id = 0;
    std::vector<int> member_ids;       // ascending original position ids
    Matrix frozen_states;              // row per member, same order
    int merged_id = 0;                 // lowest member id
    std::vector<double> merged_state;  // member mean at creation
};

struct BypassState {
    std::vector<TokenGroup> groups;
    int origin_layer = 0;  // frozen states live in "after layer origin_layer" space
};

struct Selection {
    std::vector<int> selected_ids;    // ascending
    std::vector<int> unselected_ids;  // ascending
};

// k = ceil(keep_ratio * n), clamped to [1, n]; a whisker of slack absorbs
// floating-point overshoot when the product is an exact integer.
std::size_t keep_count(double keep_ratio, std::size_t n);

// Top-k by score with k = ceil(keep_ratio * count); ties go to the lower
// position id. `ids` ascending, `scores` parallel.
Selection select_topk_tokens(std::span<const int> ids, std::span<const double> scores,
                             double keep_ratio);
Selection select_topk_count(std::span<const int> ids, std::span<const double> scores,
                            std::size_t k);

// Deterministic farthest-point grouping on cosine similarity: the first seed
// is the lowest position id, each further seed minimizes its maximum
// similarity to the chosen seeds, and every token joins its most-similar
// seed (ties to the lower seed id). Exactly Z groups.
std::vector<TokenGroup> group_tokens(std::span<const int> ids, const Matrix& states, int z);

struct MergedToken {
    int id = 0;  // lowest member position id
    std::vector<double> state;
};

std::vector<MergedToken> merge_groups(const std::vector<TokenGroup>& groups);

struct RestoredTokens {
    std::vector<int> ids;  // ascending
    Matrix states;
    std::vector<std::vector<double>> group_offsets;  // parallel to the input groups
};

// Offset alignment: each frozen member gets its group's merged-token drift
// (current merged state minus the creation-time mean) added back.
RestoredTokens align_bypassed_tokens(const BypassState& state, std::span<const int> live_ids,
                                     const Matrix& live_states);

// Last-text-token attention row under layer `layer`'s Q/K projections,
// restricted to the visual candidates. Text tokens supply the query (their
// last entry) and stay in the softmax support, so with the full visual set as
// candidates this reproduces tv_attention_scores exactly.
std::vector<double> rescore_bypassed(std::span<const int> candidate_ids,
                                     const Matrix& candidate_states,
                                     std::span<const int> text_ids, const Matrix& text_states,
                                     const LayerWeights& w, int layer,
                                     ScoreMode mode = ScoreMode::PostRope);

struct StageRecord {
    int layer = 0;
    Strategy strategy = Strategy::Drop;
    std::vector<int> candidate_ids;  // scored pool, ascending
    std::vector<double> scores;      // parallel to candidate_ids
    std::vector<int> selected_ids;
    std::vector<int> unselected_ids;
};

struct BypassRecord {
    BypassState state;
    int restore_layer = 0;  // stage layer y; alignment happened at y-1
    std::vector<std::vector<double>> group_offsets;
    std::vector<int> restored_ids;
    Matrix restored_states;
};

struct RunOptions {
    ScoreMode score_mode = ScoreMode::PostRope;
    std::optional<Strategy> strategy_override;
    bool trace = true;
};

struct RunResult {
    Matrix final_states;
    std::vector<int> final_ids;
    std::vector<TokenRole> final_roles;
    LayerTrace trace;
    std::vector<StageRecord> stages;
    std::vector<BypassRecord> bypass_history;

    std::vector<int> survivor_visual_ids() const;
    std::span<const double> last_text_state() const;
};

// Executes the schedule over a forward pass. Drop removes unselected tokens
// after the stage layer; merge replaces them with similarity-group means that
// keep participating; bypass freezes them, carries merged proxies, and
// restores them for joint re-selection before the next stage layer. The
// final stage hard-selects for every strategy.
RunResult run_with_schedule(const TokenSequence& seq, const LayerWeights& w,
                            const PruneSchedule& schedule, const RunOptions& options = {});

// Forward pass that keeps everything through `after_layer`, then drops the
// visual tokens not listed in keep_visual_ids and runs to the end.
RunResult run_with_keep_set(const TokenSequence& seq, const LayerWeights& w, int after_layer,
                            std::span<const int> keep_visual_ids,
                            const RunOptions& options = {});

}  // namespace tokenflux

#pragma once

#include <span>
#include <vector>

#include "tokenflux/model.hpp"
#include "tokenflux/pruning.hpp"

namespace tokenflux {

struct OverlapReport {
    double ratio = 0.0;
    std::size_t intersection = 0;
    std::size_t size_a = 0;
    std::size_t size_b = 0;  // reference set
};

// |A ∩ B| / |B|. B is the reference set and must be nonempty.
OverlapReport overlap_report(std::span<const int> set_a, std::span<const int> set_b);
double overlap_ratio(std::span<const int> set_a, std::span<const int> set_b);

// Top ceil(frac * n) visual tokens at a traced layer by T-V score, and the
// bottom set as its complement (the tokens a pruning pass would discard).
std::vector<int> top_fraction_ids(const LayerRecord& rec, double frac);
std::vector<int> bottom_fraction_ids(const LayerRecord& rec, double frac);

struct OverlapMatrix {
    std::vector<int> early_layers;
    std::vector<int> late_layers;
    Matrix ratios;  // early x late
};

// For each (early a, late b): overlap of the bottom-p set ranked at layer a
// against the top-q set ranked at layer b.
OverlapMatrix cross_layer_overlap_matrix(const LayerTrace& trace, double bottom_frac,
                                         double top_frac, int early_lo, int early_hi, int late_lo,
                                         int late_hi);

// Cosine of the last text token's final hidden states (reduced vs vanilla).
double fidelity(std::span<const double> reduced_last, std::span<const double> vanilla_last);

struct FidelityReport {
    double cosine = 0.0;
    double kl = 0.0;  // KL(reduced || vanilla) over softmaxed next-token logits
};

FidelityReport fidelity_report(const LayerWeights& w, std::span<const double> reduced_last,
                               std::span<const double> vanilla_last);

// Overlap of the strategy's retained set at the stage pruning at `layer`
// against the vanilla model's top-frac set at the same layer.
OverlapReport selection_overlap_vs_vanilla(const RunResult& run, const LayerTrace& vanilla,
                                           int layer, double top_frac);

struct GroupOffsetEntry {
    int origin_layer = 0;   // x: frozen space
    int restore_layer = 0;  // y: offsets measured at y-1
    int group_id = 0;
    std::vector<int> member_ids;
    std::vector<double> merged_offset;        // the run's alignment offset
    Matrix member_vanilla_offsets;            // row per member, from the vanilla trace
    std::vector<double> vanilla_mean_offset;  // mean of the rows above
    double cosine = 0.0;                      // merged vs vanilla mean
    double euclidean = 0.0;
};

struct OffsetReport {
    std::vector<GroupOffsetEntry> groups;
};

// How well each group's alignment offset tracks the vanilla run: per group,
// the merged-token offset, the members' true offsets between the same two
// layers of the vanilla trace, their mean, and agreement statistics.
OffsetReport group_offset_report(const RunResult& bypass_run, const LayerTrace& vanilla);

}  // namespace tokenflux

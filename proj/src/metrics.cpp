#include "tokenflux/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tokenflux {

OverlapReport overlap_report(std::span<const int> set_a, std::span<const int> set_b) {
    if (set_b.empty()) throw std::invalid_argument("overlap_report: empty reference set");
    std::vector<int> a(set_a.begin(), set_a.end());
    std::vector<int> b(set_b.begin(), set_b.end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::vector<int> common;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
    OverlapReport rep;
    rep.intersection = common.size();
    rep.size_a = a.size();
    rep.size_b = b.size();
    rep.ratio = static_cast<double>(common.size()) / static_cast<double>(b.size());
    return rep;
}

double overlap_ratio(std::span<const int> set_a, std::span<const int> set_b) {
    return overlap_report(set_a, set_b).ratio;
}

std::vector<int> top_fraction_ids(const LayerRecord& rec, double frac) {
    if (rec.visual_ids.empty()) throw std::invalid_argument("top_fraction_ids: no visual tokens");
    return select_topk_tokens(rec.visual_ids, rec.tv_scores, frac).selected_ids;
}

std::vector<int> bottom_fraction_ids(const LayerRecord& rec, double frac) {
    if (rec.visual_ids.empty()) {
        throw std::invalid_argument("bottom_fraction_ids: no visual tokens");
    }
    const std::size_t n = rec.visual_ids.size();
    const std::size_t bottom = keep_count(frac, n);
    if (bottom >= n) return rec.visual_ids;
    return select_topk_count(rec.visual_ids, rec.tv_scores, n - bottom).unselected_ids;
}

OverlapMatrix cross_layer_overlap_matrix(const LayerTrace& trace, double bottom_frac,
                                         double top_frac, int early_lo, int early_hi, int late_lo,
                                         int late_hi) {
    const int l = static_cast<int>(trace.layers.size());
    if (early_lo < 1 || early_hi > l || early_lo > early_hi || late_lo < 1 || late_hi > l ||
        late_lo > late_hi) {
        throw std::invalid_argument("cross_layer_overlap_matrix: layer range out of [1, L]");
    }
    OverlapMatrix out;
    for (int a = early_lo; a <= early_hi; ++a) out.early_layers.push_back(a);
    for (int b = late_lo; b <= late_hi; ++b) out.late_layers.push_back(b);
    out.ratios = Matrix(out.early_layers.size(), out.late_layers.size());
    for (std::size_t i = 0; i < out.early_layers.size(); ++i) {
        const auto bottom = bottom_fraction_ids(trace.after_layer(out.early_layers[i]), bottom_frac);
        for (std::size_t j = 0; j < out.late_layers.size(); ++j) {
            const auto top = top_fraction_ids(trace.after_layer(out.late_layers[j]), top_frac);
            out.ratios.at(i, j) = overlap_ratio(bottom, top);
        }
    }
    return out;
}

double fidelity(std::span<const double> reduced_last, std::span<const double> vanilla_last) {
    return cosine_sim(reduced_last, vanilla_last);
}

namespace {

std::vector<double> log_softmax(std::span<const double> logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

}  // namespace

FidelityReport fidelity_report(const LayerWeights& w, std::span<const double> reduced_last,
                               std::span<const double> vanilla_last) {
    FidelityReport rep;
    rep.cosine = fidelity(reduced_last, vanilla_last);
    const auto lp = log_softmax(next_token_logits(w, reduced_last));
    const auto lq = log_softmax(next_token_logits(w, vanilla_last));
    double kl = 0.0;
    for (std::size_t i = 0; i < lp.size(); ++i) kl += std::exp(lp[i]) * (lp[i] - lq[i]);
    rep.kl = std::max(kl, 0.0);
    return rep;
}

OverlapReport selection_overlap_vs_vanilla(const RunResult& run, const LayerTrace& vanilla,
                                           int layer, double top_frac) {
    const StageRecord* stage = nullptr;
    for (const auto& st : run.stages) {
        if (st.layer == layer) stage = &st;
    }
    if (!stage) {
        throw std::invalid_argument("selection_overlap_vs_vanilla: no stage at layer " +
                                    std::to_string(layer));
    }
    const auto reference = top_fraction_ids(vanilla.after_layer(layer), top_frac);
    return overlap_report(stage->selected_ids, reference);
}

OffsetReport group_offset_report(const RunResult& bypass_run, const LayerTrace& vanilla) {
    if (bypass_run.bypass_history.empty()) {
        throw std::invalid_argument("group_offset_report: run has no restored bypass stage");
    }
    OffsetReport report;
    for (const auto& rec : bypass_run.bypass_history) {
        const int x = rec.state.origin_layer;
        const int y = rec.restore_layer;
        for (std::size_t g = 0; g < rec.state.groups.size(); ++g) {
            const TokenGroup& group = rec.state.groups[g];
            GroupOffsetEntry entry;
            entry.origin_layer = x;
            entry.restore_layer = y;
            entry.group_id = group.group_id;
            entry.member_ids = group.member_ids;
            entry.merged_offset = rec.group_offsets[g];

            const std::size_t d = entry.merged_offset.size();
            entry.member_vanilla_offsets = Matrix(group.member_ids.size(), d);
            entry.vanilla_mean_offset.assign(d, 0.0);
            for (std::size_t m = 0; m < group.member_ids.size(); ++m) {
                const int id = group.member_ids[m];
                const auto before = vanilla.state_of(x, id);
                const auto after = vanilla.state_of(y - 1, id);
                for (std::size_t c = 0; c < d; ++c) {
                    const double delta = after[c] - before[c];
                    entry.member_vanilla_offsets.at(m, c) = delta;
                    entry.vanilla_mean_offset[c] += delta;
                }
            }
            for (double& v : entry.vanilla_mean_offset) {
                v /= static_cast<double>(group.member_ids.size());
            }

            entry.cosine = cosine_sim(entry.merged_offset, entry.vanilla_mean_offset);
            double dist2 = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double diff = entry.merged_offset[c] - entry.vanilla_mean_offset[c];
                dist2 += diff * diff;
            }
            entry.euclidean = std::sqrt(dist2);
            report.groups.push_back(std::move(entry));
        }
    }
    return report;
}

}  // namespace tokenflux

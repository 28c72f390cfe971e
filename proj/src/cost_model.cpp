#include "tokenflux/cost_model.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace tokenflux {

namespace {

__extension__ typedef unsigned __int128 u128;

std::uint64_t narrow(u128 v, const char* what) {
    if (v > std::numeric_limits<std::uint64_t>::max()) {
        throw std::runtime_error(std::string(what) + ": flop count overflows 64 bits");
    }
    return static_cast<std::uint64_t>(v);
}

std::uint64_t round_count(double v, const char* what) {
    if (!(v >= 0.0)) throw std::invalid_argument(std::string(what) + ": negative token count");
    return static_cast<std::uint64_t>(std::llround(v));
}

}  // namespace

void CostInputs::validate() const {
    if (num_layers < 1 || hidden_dim < 1 || ffn_dim < 1) {
        throw std::invalid_argument("CostInputs: T, d, m must be positive");
    }
    if (n_visual < 0 || n_text < 0 || n_visual + n_text < 1) {
        throw std::invalid_argument("CostInputs: token counts must be nonnegative and nonzero");
    }
    if (prune_layer < 0 || prune_layer > num_layers) {
        throw std::invalid_argument("CostInputs: prune layer must be in [0, T]");
    }
    if (!(drop_fraction >= 0.0) || drop_fraction > 1.0) {
        throw std::invalid_argument("CostInputs: drop fraction must be in [0, 1]");
    }
    if (low_ranked < 0 || merged < 0 || merged > low_ranked) {
        throw std::invalid_argument("CostInputs: need 0 <= Z <= R");
    }
    if (!(retained_ratio >= 0.0) || retained_ratio > 1.0) {
        throw std::invalid_argument("CostInputs: retained ratio must be in [0, 1]");
    }
}

std::uint64_t layer_flops(std::uint64_t n, std::uint64_t d, std::uint64_t m) {
    if (d == 0 || m == 0) throw std::invalid_argument("layer_flops: d and m must be positive");
    if (n == 0) return 0;
    const u128 nn = n, dd = d, mm = m;
    const u128 c = 4 * nn * dd * dd + 2 * nn * nn * dd + 3 * nn * dd * mm;
    return narrow(c, "layer_flops");
}

std::uint64_t total_flops(const CostInputs& in) {
    in.validate();
    const auto n = static_cast<std::uint64_t>(in.n_visual + in.n_text);
    const std::uint64_t n_hat =
        round_count((1.0 - in.drop_fraction) * static_cast<double>(in.n_visual), "total_flops") +
        static_cast<std::uint64_t>(in.n_text);
    const auto d = static_cast<std::uint64_t>(in.hidden_dim);
    const auto m = static_cast<std::uint64_t>(in.ffn_dim);
    const u128 full = static_cast<u128>(layer_flops(n, d, m)) * static_cast<u128>(in.prune_layer);
    const u128 reduced = static_cast<u128>(layer_flops(n_hat, d, m)) *
                         static_cast<u128>(in.num_layers - in.prune_layer);
    return narrow(full + reduced, "total_flops");
}

std::uint64_t bypass_overhead(const CostInputs& in) {
    in.validate();
    const u128 d = static_cast<std::uint64_t>(in.hidden_dim);
    const u128 r_cnt = static_cast<std::uint64_t>(in.low_ranked);
    const u128 z_cnt = static_cast<std::uint64_t>(in.merged);
    const u128 nv = static_cast<std::uint64_t>(in.n_visual);
    const u128 unretained =
        round_count((1.0 - in.retained_ratio) * static_cast<double>(in.n_visual), "bypass_overhead");
    const u128 f = 2 * r_cnt * z_cnt * d + r_cnt * d + 2 * nv * d + 2 * d * d +
                   2 * unretained * d * d;
    return narrow(f, "bypass_overhead");
}

ScheduleCost schedule_flops(int num_layers, int hidden_dim, int ffn_dim, int n_visual, int n_text,
                            const PruneSchedule& schedule) {
    schedule.validate(num_layers);
    if (n_visual < 0 || n_text < 0) throw std::invalid_argument("schedule_flops: bad token counts");
    const auto d = static_cast<std::uint64_t>(hidden_dim);
    const auto m = static_cast<std::uint64_t>(ffn_dim);

    ScheduleCost cost;
    u128 base = 0;
    std::size_t visual = static_cast<std::size_t>(n_visual);
    int prev_layer = 0;
    std::vector<std::size_t> counts;  // post-stage visual counts
    for (const auto& st : schedule.stages) {
        base += static_cast<u128>(layer_flops(visual + n_text, d, m)) *
                static_cast<u128>(st.layer - prev_layer);
        prev_layer = st.layer;
        visual = visual == 0 ? 0 : keep_count(st.keep_ratio, visual);
        counts.push_back(visual);
    }
    base += static_cast<u128>(layer_flops(visual + n_text, d, m)) *
            static_cast<u128>(num_layers - prev_layer);
    cost.base = narrow(base, "schedule_flops");

    u128 overhead = 0;
    for (std::size_t s = 0; s + 1 < schedule.stages.size(); ++s) {
        if (schedule.stages[s].strategy != Strategy::Bypass) continue;
        const std::size_t before = s == 0 ? static_cast<std::size_t>(n_visual) : counts[s - 1];
        const std::size_t kept = counts[s];
        CostInputs pair;
        pair.num_layers = num_layers;
        pair.hidden_dim = hidden_dim;
        pair.ffn_dim = ffn_dim;
        pair.n_visual = static_cast<std::int64_t>(before);  // candidates re-scored at the restore
        pair.n_text = n_text;
        pair.low_ranked = static_cast<std::int64_t>(before - kept);
        pair.merged = std::min<std::int64_t>(std::max(1, schedule.stages[s].merge_budget),
                                             pair.low_ranked);
        pair.retained_ratio = schedule.stages[s + 1].keep_ratio;
        overhead += bypass_overhead(pair);
    }
    cost.overhead = narrow(overhead, "schedule_flops overhead");
    return cost;
}

}  // namespace tokenflux

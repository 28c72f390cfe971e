#pragma once

#include <cstdint>

#include "tokenflux/pruning.hpp"

namespace tokenflux {

struct CostInputs {
    std::int64_t num_layers = 0;   // T
    std::int64_t hidden_dim = 0;   // d
    std::int64_t ffn_dim = 0;      // m
    std::int64_t n_visual = 0;     // n_v
    std::int64_t n_text = 0;       // n_t
    std::int64_t prune_layer = 0;  // K
    double drop_fraction = 0.0;    // D in [0, 1]
    std::int64_t low_ranked = 0;   // R
    std::int64_t merged = 0;       // Z
    double retained_ratio = 1.0;   // r in [0, 1]

    void validate() const;
};

// Per-layer prefill cost C_n = 4nd^2 + 2n^2d + 3ndm, as an exact integer.
// These are multiply-accumulate counts for the four attention projections,
// the two attention products, and a gated three-matmul FFN.
std::uint64_t layer_flops(std::uint64_t n, std::uint64_t d, std::uint64_t m);

// K full-width layers plus T-K layers at n_hat = round((1-D)*n_v) + n_t.
std::uint64_t total_flops(const CostInputs& in);

// Bypass overhead F_o = 2RZd + Rd + 2*n_v*d + 2d^2 + 2*(1-r)*n_v*d^2, with
// (1-r)*n_v rounded to the nearest token count.
std::uint64_t bypass_overhead(const CostInputs& in);

struct ScheduleCost {
    std::uint64_t base = 0;      // piecewise per-layer cost over the segments
    std::uint64_t overhead = 0;  // one bypass overhead per freeze->restore pair
    std::uint64_t total() const { return base + overhead; }
};

// Multi-stage generalization: segments between stage layers are costed at
// the nominal post-stage token counts (iterated ceil of the keep ratios),
// identically for every strategy; bypass adds one overhead term per
// consecutive stage pair.
ScheduleCost schedule_flops(int num_layers, int hidden_dim, int ffn_dim, int n_visual, int n_text,
                            const PruneSchedule& schedule);

}  // namespace tokenflux

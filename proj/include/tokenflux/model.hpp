#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tokenflux/numerics.hpp"

namespace tokenflux {

enum class TokenRole { Visual, Text };

struct Token {
    TokenRole role = TokenRole::Visual;
    int position_id = 0;
    std::vector<double> embedding;
};

// Ordered model input. Position ids are strictly increasing and survive
// pruning untouched; the final token is always a text token (the scoring
// query for T-V attention).
struct TokenSequence {
    std::vector<Token> tokens;

    void validate(int hidden_dim) const;
    std::size_t size() const { return tokens.size(); }
    int visual_count() const;
};

struct ModelConfig {
    int num_layers = 0;  // T
    int hidden_dim = 0;  // d
    int ffn_dim = 0;     // m
    int num_heads = 0;
    int vocab_size = 0;  // used by the output projection only
    double rope_base = 10000.0;

    void validate() const;
    int head_dim() const { return hidden_dim / num_heads; }
};

struct LayerParams {
    std::vector<double> attn_norm;  // d
    Matrix w_q, w_k, w_v, w_o;      // d x d
    std::vector<double> ffn_norm;   // d
    Matrix w_up;                    // d x m
    Matrix w_down;                  // m x d
};

struct LayerWeights {
    ModelConfig config;
    std::vector<LayerParams> layers;
    std::vector<double> final_norm;  // d
    Matrix w_out;                    // d x vocab
};

// Whether token-ranking scores use rotated or unrotated Q/K. Forward math is
// always post-RoPE; this flag only affects scoring.
enum class ScoreMode { PostRope, PreRope };

// Per-layer snapshot: states after the layer for every surviving token, plus
// the last text token's head-averaged attention over the visual tokens that
// were present at the layer's input (a slice of a softmax row, sums to <= 1).
struct LayerRecord {
    std::vector<int> position_ids;  // ascending
    Matrix hidden;                  // row i belongs to position_ids[i]
    std::vector<int> visual_ids;
    std::vector<double> tv_scores;  // parallel to visual_ids
};

struct LayerTrace {
    std::vector<LayerRecord> layers;  // index l-1 holds the state after layer l

    const LayerRecord& after_layer(int layer) const;
    // Hidden state of one token at a given layer; throws if absent.
    std::span<const double> state_of(int layer, int position_id) const;
};

struct ForwardResult {
    Matrix final_states;
    LayerTrace trace;  // empty when tracing is off
};

// Weights drawn from SplitMix64(seed), scaled by 1/sqrt(d); norm scales start
// at one. Deterministic per (config, seed).
LayerWeights init_model(const ModelConfig& config, std::uint64_t seed);

// One pre-norm decoder layer: causal multi-head attention with rotary Q/K at
// the original position ids, then a GELU FFN, each with a residual add.
// `layer` is 1-based and used in numeric error messages.
Matrix forward_layer(const LayerWeights& w, int layer, const Matrix& h,
                     std::span<const int> positions);

ForwardResult forward_full(const TokenSequence& seq, const LayerWeights& w, bool trace,
                           ScoreMode mode = ScoreMode::PostRope);

// Last text token's softmax attention row at layer `layer`, averaged across
// heads and restricted to visual-token columns (unnormalized after the
// restriction). `h` holds the layer's input states. Empty when no visual
// token is present.
std::vector<double> tv_attention_scores(const LayerWeights& w, int layer, const Matrix& h,
                                        std::span<const TokenRole> roles,
                                        std::span<const int> positions,
                                        ScoreMode mode = ScoreMode::PostRope);

// Full last-row attention probabilities over every token (sums to 1); the
// visual restriction above is a slice of this row.
std::vector<double> last_token_attention_row(const LayerWeights& w, int layer, const Matrix& h,
                                             std::span<const int> positions,
                                             ScoreMode mode = ScoreMode::PostRope);

// Rotates each head's (2i, 2i+1) pairs by pos * base^(-2i/head_dim). A head
// with odd dimension keeps its last component unrotated.
void apply_rope_inplace(std::span<double> row, int num_heads, int pos, double base);

// RMS-normalize one row and apply the elementwise scale.
std::vector<double> rmsnorm_row(std::span<const double> x, std::span<const double> scale);

// Final norm + output projection of one hidden state (the next-token logits).
std::vector<double> next_token_logits(const LayerWeights& w, std::span<const double> state);

}  // namespace tokenflux

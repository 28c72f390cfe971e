#include "tokenflux/model.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace tokenflux {

namespace {

constexpr double kRmsEps = 1e-6;

void fill_normal(Matrix& m, SeededRng& rng, double scale) {
    for (double& v : m.data) v = rng.next_normal() * scale;
}

// Row vector times matrix: out[j] = sum_k v[k] * m[k][j].
std::vector<double> vecmat(std::span<const double> v, const Matrix& m) {
    if (v.size() != m.rows) throw std::invalid_argument("vecmat: dimension mismatch");
    std::vector<double> out(m.cols, 0.0);
    for (std::size_t k = 0; k < m.rows; ++k) {
        const double vk = v[k];
        if (vk == 0.0) continue;
        const double* row = m.data.data() + k * m.cols;
        for (std::size_t j = 0; j < m.cols; ++j) out[j] += vk * row[j];
    }
    return out;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

void check_layer_finite(const Matrix& h, int layer) {
    for (double v : h.data) {
        if (!std::isfinite(v)) {
            throw std::runtime_error("forward_layer: non-finite state at layer " +
                                     std::to_string(layer));
        }
    }
}

Matrix rmsnorm_rows(const Matrix& h, std::span<const double> scale) {
    Matrix out(h.rows, h.cols);
    for (std::size_t i = 0; i < h.rows; ++i) {
        auto normed = rmsnorm_row(h.row(i), scale);
        std::copy(normed.begin(), normed.end(), out.row(i).begin());
    }
    return out;
}

}  // namespace

void ModelConfig::validate() const {
    if (num_layers < 3) throw std::invalid_argument("ModelConfig: num_layers must be >= 3");
    if (hidden_dim <= 0 || ffn_dim <= 0 || num_heads <= 0 || vocab_size <= 0) {
        throw std::invalid_argument("ModelConfig: dimensions must be positive");
    }
    if (hidden_dim % num_heads != 0) {
        throw std::invalid_argument("ModelConfig: hidden_dim must be divisible by num_heads");
    }
    if (!(rope_base > 0.0)) throw std::invalid_argument("ModelConfig: rope_base must be positive");
}

void TokenSequence::validate(int hidden_dim) const {
    if (tokens.empty()) throw std::invalid_argument("TokenSequence: empty");
    int prev = -1;
    bool any_text = false;
    for (const auto& t : tokens) {
        if (t.position_id <= prev) {
            throw std::invalid_argument("TokenSequence: position ids must be strictly increasing");
        }
        prev = t.position_id;
        if (static_cast<int>(t.embedding.size()) != hidden_dim) {
            throw std::invalid_argument("TokenSequence: embedding dimension mismatch");
        }
        any_text |= t.role == TokenRole::Text;
    }
    if (!any_text) throw std::invalid_argument("TokenSequence: needs at least one text token");
    if (tokens.back().role != TokenRole::Text) {
        throw std::invalid_argument("TokenSequence: final token must be a text token");
    }
}

int TokenSequence::visual_count() const {
    int n = 0;
    for (const auto& t : tokens) n += t.role == TokenRole::Visual;
    return n;
}

const LayerRecord& LayerTrace::after_layer(int layer) const {
    if (layer < 1 || layer > static_cast<int>(layers.size())) {
        throw std::invalid_argument("LayerTrace: layer out of range");
    }
    return layers[static_cast<std::size_t>(layer) - 1];
}

std::span<const double> LayerTrace::state_of(int layer, int position_id) const {
    const LayerRecord& rec = after_layer(layer);
    for (std::size_t i = 0; i < rec.position_ids.size(); ++i) {
        if (rec.position_ids[i] == position_id) return rec.hidden.row(i);
    }
    throw std::runtime_error("LayerTrace: position id " + std::to_string(position_id) +
                             " absent at layer " + std::to_string(layer));
}

LayerWeights init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    const int d = config.hidden_dim;
    const int m = config.ffn_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    SeededRng rng(seed);
    LayerWeights w;
    w.config = config;
    w.layers.resize(config.num_layers);
    for (auto& lp : w.layers) {
        lp.attn_norm.assign(d, 1.0);
        lp.ffn_norm.assign(d, 1.0);
        lp.w_q = Matrix(d, d);
        lp.w_k = Matrix(d, d);
        lp.w_v = Matrix(d, d);
        lp.w_o = Matrix(d, d);
        lp.w_up = Matrix(d, m);
        lp.w_down = Matrix(m, d);
        fill_normal(lp.w_q, rng, scale);
        fill_normal(lp.w_k, rng, scale);
        fill_normal(lp.w_v, rng, scale);
        fill_normal(lp.w_o, rng, scale);
        fill_normal(lp.w_up, rng, scale);
        fill_normal(lp.w_down, rng, scale);
    }
    w.final_norm.assign(d, 1.0);
    w.w_out = Matrix(d, config.vocab_size);
    fill_normal(w.w_out, rng, scale);
    return w;
}

std::vector<double> rmsnorm_row(std::span<const double> x, std::span<const double> scale) {
    if (x.size() != scale.size()) throw std::invalid_argument("rmsnorm_row: length mismatch");
    double ss = 0.0;
    for (double v : x) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + kRmsEps);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * scale[i];
    return out;
}

void apply_rope_inplace(std::span<double> row, int num_heads, int pos, double base) {
    const int dh = static_cast<int>(row.size()) / num_heads;
    const int pairs = dh / 2;
    for (int h = 0; h < num_heads; ++h) {
        double* head = row.data() + static_cast<std::size_t>(h) * dh;
        for (int i = 0; i < pairs; ++i) {
            const double freq = std::pow(base, -2.0 * i / static_cast<double>(dh));
            const double angle = static_cast<double>(pos) * freq;
            const double c = std::cos(angle), s = std::sin(angle);
            const double x0 = head[2 * i], x1 = head[2 * i + 1];
            head[2 * i] = x0 * c - x1 * s;
            head[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

namespace {

// Causal multi-head attention over pre-normed states; returns the sublayer
// output before the residual add.
Matrix attention_sublayer(const LayerWeights& w, const LayerParams& lp, const Matrix& h,
                          std::span<const int> positions) {
    const std::size_t n = h.rows;
    const int heads = w.config.num_heads;
    const int dh = w.config.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix normed = rmsnorm_rows(h, lp.attn_norm);
    Matrix q = matmul(normed, lp.w_q);
    Matrix k = matmul(normed, lp.w_k);
    Matrix v = matmul(normed, lp.w_v);
    for (std::size_t i = 0; i < n; ++i) {
        apply_rope_inplace(q.row(i), heads, positions[i], w.config.rope_base);
        apply_rope_inplace(k.row(i), heads, positions[i], w.config.rope_base);
    }

    Matrix ctx(n, h.cols);
    std::vector<double> logits;
    for (std::size_t i = 0; i < n; ++i) {
        logits.resize(i + 1);
        for (int hd = 0; hd < heads; ++hd) {
            const std::size_t off = static_cast<std::size_t>(hd) * dh;
            const double* qi = q.data.data() + i * q.cols + off;
            for (std::size_t j = 0; j <= i; ++j) {
                const double* kj = k.data.data() + j * k.cols + off;
                double dot = 0.0;
                for (int t = 0; t < dh; ++t) dot += qi[t] * kj[t];
                logits[j] = dot * inv_sqrt;
            }
            const auto probs = softmax_row(logits);
            double* out = ctx.data.data() + i * ctx.cols + off;
            for (std::size_t j = 0; j <= i; ++j) {
                const double* vj = v.data.data() + j * v.cols + off;
                const double p = probs[j];
                for (int t = 0; t < dh; ++t) out[t] += p * vj[t];
            }
        }
    }
    return matmul(ctx, lp.w_o);
}

Matrix ffn_sublayer(const LayerParams& lp, const Matrix& h) {
    Matrix normed = rmsnorm_rows(h, lp.ffn_norm);
    Matrix up = matmul(normed, lp.w_up);
    for (double& x : up.data) x = gelu(x);
    return matmul(up, lp.w_down);
}

}  // namespace

Matrix forward_layer(const LayerWeights& w, int layer, const Matrix& h,
                     std::span<const int> positions) {
    if (layer < 1 || layer > static_cast<int>(w.layers.size())) {
        throw std::invalid_argument("forward_layer: layer out of range");
    }
    if (h.rows != positions.size()) {
        throw std::invalid_argument("forward_layer: states/positions size mismatch");
    }
    const LayerParams& lp = w.layers[static_cast<std::size_t>(layer) - 1];

    Matrix attn = attention_sublayer(w, lp, h, positions);
    Matrix mid(h.rows, h.cols);
    for (std::size_t i = 0; i < h.data.size(); ++i) mid.data[i] = h.data[i] + attn.data[i];
    check_layer_finite(mid, layer);

    Matrix ffn = ffn_sublayer(lp, mid);
    Matrix out(h.rows, h.cols);
    for (std::size_t i = 0; i < mid.data.size(); ++i) out.data[i] = mid.data[i] + ffn.data[i];
    check_layer_finite(out, layer);
    return out;
}

std::vector<double> last_token_attention_row(const LayerWeights& w, int layer, const Matrix& h,
                                             std::span<const int> positions, ScoreMode mode) {
    if (h.rows == 0) throw std::invalid_argument("last_token_attention_row: empty states");
    if (h.rows != positions.size()) {
        throw std::invalid_argument("last_token_attention_row: states/positions size mismatch");
    }
    const LayerParams& lp = w.layers[static_cast<std::size_t>(layer) - 1];
    const std::size_t n = h.rows;
    const int heads = w.config.num_heads;
    const int dh = w.config.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix normed = rmsnorm_rows(h, lp.attn_norm);
    Matrix k = matmul(normed, lp.w_k);
    std::vector<double> q = vecmat(normed.row(n - 1), lp.w_q);
    if (mode == ScoreMode::PostRope) {
        apply_rope_inplace(q, heads, positions[n - 1], w.config.rope_base);
        for (std::size_t j = 0; j < n; ++j) {
            apply_rope_inplace(k.row(j), heads, positions[j], w.config.rope_base);
        }
    }

    std::vector<double> avg(n, 0.0);
    std::vector<double> logits(n);
    for (int hd = 0; hd < heads; ++hd) {
        const std::size_t off = static_cast<std::size_t>(hd) * dh;
        for (std::size_t j = 0; j < n; ++j) {
            const double* kj = k.data.data() + j * k.cols + off;
            double dot = 0.0;
            for (int t = 0; t < dh; ++t) dot += q[off + t] * kj[t];
            logits[j] = dot * inv_sqrt;
        }
        const auto probs = softmax_row(logits);
        for (std::size_t j = 0; j < n; ++j) avg[j] += probs[j];
    }
    for (double& p : avg) p /= static_cast<double>(heads);
    return avg;
}

std::vector<double> tv_attention_scores(const LayerWeights& w, int layer, const Matrix& h,
                                        std::span<const TokenRole> roles,
                                        std::span<const int> positions, ScoreMode mode) {
    if (roles.size() != h.rows) {
        throw std::invalid_argument("tv_attention_scores: roles size mismatch");
    }
    bool any_visual = false;
    for (TokenRole r : roles) any_visual |= r == TokenRole::Visual;
    if (!any_visual) return {};

    const auto row = last_token_attention_row(w, layer, h, positions, mode);
    std::vector<double> scores;
    for (std::size_t j = 0; j < roles.size(); ++j) {
        if (roles[j] == TokenRole::Visual) scores.push_back(row[j]);
    }
    return scores;
}

ForwardResult forward_full(const TokenSequence& seq, const LayerWeights& w, bool trace,
                           ScoreMode mode) {
    seq.validate(w.config.hidden_dim);
    const std::size_t n = seq.size();
    const int d = w.config.hidden_dim;

    Matrix h(n, d);
    std::vector<int> positions(n);
    std::vector<TokenRole> roles(n);
    std::vector<int> visual_ids;
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(seq.tokens[i].embedding.begin(), seq.tokens[i].embedding.end(),
                  h.row(i).begin());
        positions[i] = seq.tokens[i].position_id;
        roles[i] = seq.tokens[i].role;
        if (roles[i] == TokenRole::Visual) visual_ids.push_back(positions[i]);
    }

    ForwardResult result;
    if (trace) result.trace.layers.reserve(w.layers.size());
    for (int layer = 1; layer <= w.config.num_layers; ++layer) {
        std::vector<double> tv;
        if (trace) tv = tv_attention_scores(w, layer, h, roles, positions, mode);
        h = forward_layer(w, layer, h, positions);
        if (trace) {
            LayerRecord rec;
            rec.position_ids = positions;
            rec.hidden = h;
            rec.visual_ids = visual_ids;
            rec.tv_scores = std::move(tv);
            result.trace.layers.push_back(std::move(rec));
        }
    }
    result.final_states = std::move(h);
    return result;
}

std::vector<double> next_token_logits(const LayerWeights& w, std::span<const double> state) {
    const auto normed = rmsnorm_row(state, w.final_norm);
    return vecmat(normed, w.w_out);
}

}  // namespace tokenflux

#include "tokenflux/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace tokenflux {

const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::Drop: return "drop";
        case Strategy::Merge: return "merge";
        case Strategy::Bypass: return "bypass";
    }
    return "?";
}

Strategy strategy_from_name(const std::string& name) {
    if (name == "drop") return Strategy::Drop;
    if (name == "merge") return Strategy::Merge;
    if (name == "bypass") return Strategy::Bypass;
    throw std::invalid_argument("unknown strategy: " + name);
}

void PruneSchedule::validate(int num_layers) const {
    int prev = 0;
    for (const auto& st : stages) {
        if (st.layer < 3) throw std::invalid_argument("PruneSchedule: stage layer must be >= 3");
        if (st.layer >= num_layers) {
            throw std::invalid_argument("PruneSchedule: stage layer must be below num_layers");
        }
        if (st.layer <= prev) {
            throw std::invalid_argument("PruneSchedule: stage layers must be strictly increasing");
        }
        prev = st.layer;
        if (!(st.keep_ratio > 0.0) || st.keep_ratio > 1.0) {
            throw std::invalid_argument("PruneSchedule: keep_ratio must be in (0, 1]");
        }
        if (st.merge_budget < 0) {
            throw std::invalid_argument("PruneSchedule: merge_budget must be nonnegative");
        }
    }
    // Bypass restoration is chained between stages; mixing it with other
    // strategies in one schedule has no defined hand-off.
    bool any_bypass = false, all_bypass = true;
    for (const auto& st : stages) {
        any_bypass |= st.strategy == Strategy::Bypass;
        all_bypass &= st.strategy == Strategy::Bypass;
    }
    if (any_bypass && !all_bypass) {
        throw std::invalid_argument("PruneSchedule: bypass stages cannot mix with other strategies");
    }
}

PruneSchedule PruneSchedule::with_strategy(Strategy s) const {
    PruneSchedule out = *this;
    for (auto& st : out.stages) st.strategy = s;
    return out;
}

std::vector<double> geometric_keep_ratios(int n_visual, int stages, int final_budget) {
    if (n_visual < 1 || stages < 1) throw std::invalid_argument("geometric_keep_ratios: bad sizes");
    if (final_budget < 1 || final_budget > n_visual) {
        throw std::invalid_argument("geometric_keep_ratios: budget out of range");
    }
    std::vector<double> ratios(stages);
    double prev = static_cast<double>(n_visual);
    for (int s = 1; s <= stages; ++s) {
        double target = std::round(n_visual * std::pow(static_cast<double>(final_budget) / n_visual,
                                                       static_cast<double>(s) / stages));
        target = std::clamp(target, static_cast<double>(final_budget), prev);
        ratios[s - 1] = target / prev;
        prev = target;
    }
    return ratios;
}

std::size_t keep_count(double keep_ratio, std::size_t n) {
    const double k = std::ceil(keep_ratio * static_cast<double>(n) - 1e-9);
    return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(k, 0.0)), 1, n);
}

Selection select_topk_count(std::span<const int> ids, std::span<const double> scores,
                            std::size_t k) {
    if (ids.size() != scores.size()) {
        throw std::invalid_argument("select_topk: ids/scores size mismatch");
    }
    ensure_finite(scores, "select_topk scores");
    std::vector<std::size_t> order(ids.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return ids[a] < ids[b];
    });
    Selection sel;
    for (std::size_t r = 0; r < order.size(); ++r) {
        (r < k ? sel.selected_ids : sel.unselected_ids).push_back(ids[order[r]]);
    }
    std::sort(sel.selected_ids.begin(), sel.selected_ids.end());
    std::sort(sel.unselected_ids.begin(), sel.unselected_ids.end());
    return sel;
}

Selection select_topk_tokens(std::span<const int> ids, std::span<const double> scores,
                             double keep_ratio) {
    if (!(keep_ratio > 0.0) || keep_ratio > 1.0) {
        throw std::invalid_argument("select_topk: keep_ratio must be in (0, 1]");
    }
    if (ids.empty()) return {};
    return select_topk_count(ids, scores, keep_count(keep_ratio, ids.size()));
}

std::vector<TokenGroup> group_tokens(std::span<const int> ids, const Matrix& states, int z) {
    const std::size_t r = ids.size();
    if (states.rows != r) throw std::invalid_argument("group_tokens: ids/states size mismatch");
    if (r == 0) return {};
    if (z < 1 || static_cast<std::size_t>(z) > r) {
        throw std::invalid_argument("group_tokens: merge budget out of range");
    }

    // Farthest-point seeding. best_sim[i] tracks token i's maximum similarity
    // to the seeds chosen so far.
    std::vector<std::size_t> seeds{0};
    std::vector<double> best_sim(r);
    for (std::size_t i = 0; i < r; ++i) best_sim[i] = cosine_sim(states.row(i), states.row(0));
    while (seeds.size() < static_cast<std::size_t>(z)) {
        std::size_t pick = r;
        for (std::size_t i = 0; i < r; ++i) {
            if (std::find(seeds.begin(), seeds.end(), i) != seeds.end()) continue;
            if (pick == r || best_sim[i] < best_sim[pick]) pick = i;
        }
        seeds.push_back(pick);
        for (std::size_t i = 0; i < r; ++i) {
            best_sim[i] = std::max(best_sim[i], cosine_sim(states.row(i), states.row(pick)));
        }
    }

    // Assignment: seeds own themselves; everyone else joins the most similar
    // seed, ties to the lower seed position id.
    std::vector<int> assignment(r, -1);
    std::vector<std::size_t> seeds_by_id = seeds;
    std::sort(seeds_by_id.begin(), seeds_by_id.end());  // index order == id order
    for (std::size_t s = 0; s < seeds.size(); ++s) assignment[seeds[s]] = static_cast<int>(s);
    for (std::size_t i = 0; i < r; ++i) {
        if (assignment[i] >= 0) continue;
        int best = -1;
        double best_value = 0.0;
        for (std::size_t idx : seeds_by_id) {
            const double sim = cosine_sim(states.row(i), states.row(idx));
            if (best < 0 || sim > best_value) {
                best = assignment[idx];
                best_value = sim;
            }
        }
        assignment[i] = best;
    }

    std::vector<TokenGroup> groups(seeds.size());
    for (std::size_t s = 0; s < seeds.size(); ++s) groups[s].group_id = static_cast<int>(s);
    for (std::size_t i = 0; i < r; ++i) groups[assignment[i]].member_ids.push_back(ids[i]);

    const std::size_t d = states.cols;
    for (auto& g : groups) {
        std::sort(g.member_ids.begin(), g.member_ids.end());
        g.frozen_states = Matrix(g.member_ids.size(), d);
        g.merged_state.assign(d, 0.0);
        for (std::size_t m = 0; m < g.member_ids.size(); ++m) {
            const std::size_t idx =
                std::lower_bound(ids.begin(), ids.end(), g.member_ids[m]) - ids.begin();
            auto src = states.row(idx);
            std::copy(src.begin(), src.end(), g.frozen_states.row(m).begin());
            for (std::size_t c = 0; c < d; ++c) g.merged_state[c] += src[c];
        }
        for (double& v : g.merged_state) v /= static_cast<double>(g.member_ids.size());
        g.merged_id = g.member_ids.front();
    }
    return groups;
}

std::vector<MergedToken> merge_groups(const std::vector<TokenGroup>& groups) {
    std::vector<MergedToken> out;
    out.reserve(groups.size());
    for (const auto& g : groups) out.push_back({g.merged_id, g.merged_state});
    std::sort(out.begin(), out.end(),
              [](const MergedToken& a, const MergedToken& b) { return a.id < b.id; });
    return out;
}

RestoredTokens align_bypassed_tokens(const BypassState& state, std::span<const int> live_ids,
                                     const Matrix& live_states) {
    RestoredTokens out;
    out.group_offsets.reserve(state.groups.size());
    std::vector<std::pair<int, std::vector<double>>> rows;
    for (const auto& g : state.groups) {
        const auto it = std::find(live_ids.begin(), live_ids.end(), g.merged_id);
        if (it == live_ids.end()) {
            throw std::runtime_error("align_bypassed_tokens: merged token " +
                                     std::to_string(g.merged_id) + " missing from live states");
        }
        const auto current = live_states.row(static_cast<std::size_t>(it - live_ids.begin()));
        std::vector<double> offset(current.size());
        for (std::size_t c = 0; c < offset.size(); ++c) offset[c] = current[c] - g.merged_state[c];
        for (std::size_t m = 0; m < g.member_ids.size(); ++m) {
            auto frozen = g.frozen_states.row(m);
            std::vector<double> restored(offset.size());
            for (std::size_t c = 0; c < offset.size(); ++c) restored[c] = frozen[c] + offset[c];
            rows.emplace_back(g.member_ids[m], std::move(restored));
        }
        out.group_offsets.push_back(std::move(offset));
    }
    std::sort(rows.begin(), rows.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    const std::size_t d = rows.empty() ? live_states.cols : rows.front().second.size();
    out.states = Matrix(rows.size(), d);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.ids.push_back(rows[i].first);
        std::copy(rows[i].second.begin(), rows[i].second.end(), out.states.row(i).begin());
    }
    return out;
}

std::vector<double> rescore_bypassed(std::span<const int> candidate_ids,
                                     const Matrix& candidate_states,
                                     std::span<const int> text_ids, const Matrix& text_states,
                                     const LayerWeights& w, int layer, ScoreMode mode) {
    if (candidate_ids.size() != candidate_states.rows || text_ids.size() != text_states.rows) {
        throw std::invalid_argument("rescore_bypassed: ids/states size mismatch");
    }
    if (text_ids.empty()) throw std::invalid_argument("rescore_bypassed: need text tokens");

    struct Entry {
        int id;
        TokenRole role;
        std::span<const double> state;
    };
    std::vector<Entry> entries;
    entries.reserve(candidate_ids.size() + text_ids.size());
    for (std::size_t i = 0; i < candidate_ids.size(); ++i) {
        entries.push_back({candidate_ids[i], TokenRole::Visual, candidate_states.row(i)});
    }
    for (std::size_t i = 0; i < text_ids.size(); ++i) {
        entries.push_back({text_ids[i], TokenRole::Text, text_states.row(i)});
    }
    std::sort(entries.begin(), entries.end(),
              [](const Entry& a, const Entry& b) { return a.id < b.id; });

    const std::size_t n = entries.size();
    Matrix h(n, w.config.hidden_dim);
    std::vector<int> positions(n);
    std::vector<TokenRole> roles(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(entries[i].state.begin(), entries[i].state.end(), h.row(i).begin());
        positions[i] = entries[i].id;
        roles[i] = entries[i].role;
    }
    if (roles.back() != TokenRole::Text) {
        throw std::invalid_argument("rescore_bypassed: query must be the last token");
    }
    return tv_attention_scores(w, layer, h, roles, positions, mode);
}

std::vector<int> RunResult::survivor_visual_ids() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < final_ids.size(); ++i) {
        if (final_roles[i] == TokenRole::Visual) out.push_back(final_ids[i]);
    }
    return out;
}

std::span<const double> RunResult::last_text_state() const {
    if (final_states.rows == 0) throw std::runtime_error("RunResult: empty final states");
    return final_states.row(final_states.rows - 1);
}

namespace {

// Mutable token pool for a scheduled run, kept sorted by position id.
struct LiveState {
    std::vector<int> ids;
    std::vector<TokenRole> roles;
    std::vector<bool> proxy;  // bypass-created merged tokens
    Matrix h;

    static LiveState from_sequence(const TokenSequence& seq, int d) {
        LiveState s;
        const std::size_t n = seq.size();
        s.ids.resize(n);
        s.roles.resize(n);
        s.proxy.assign(n, false);
        s.h = Matrix(n, d);
        for (std::size_t i = 0; i < n; ++i) {
            s.ids[i] = seq.tokens[i].position_id;
            s.roles[i] = seq.tokens[i].role;
            std::copy(seq.tokens[i].embedding.begin(), seq.tokens[i].embedding.end(),
                      s.h.row(i).begin());
        }
        return s;
    }

    std::size_t size() const { return ids.size(); }

    std::size_t index_of(int id) const {
        const auto it = std::lower_bound(ids.begin(), ids.end(), id);
        if (it == ids.end() || *it != id) {
            throw std::runtime_error("LiveState: id " + std::to_string(id) + " not live");
        }
        return static_cast<std::size_t>(it - ids.begin());
    }

    // Visual ids currently live; with_proxies controls merged-proxy inclusion.
    std::vector<int> visual_ids(bool with_proxies) const {
        std::vector<int> out;
        for (std::size_t i = 0; i < size(); ++i) {
            if (roles[i] == TokenRole::Visual && (with_proxies || !proxy[i])) {
                out.push_back(ids[i]);
            }
        }
        return out;
    }

    void rebuild(const std::vector<int>& keep_ids,
                 const std::vector<std::pair<int, std::vector<double>>>& additions,
                 const std::vector<bool>& addition_proxy) {
        struct Row {
            int id;
            TokenRole role;
            bool proxy;
            std::vector<double> state;
        };
        std::vector<Row> rows;
        rows.reserve(keep_ids.size() + additions.size());
        for (int id : keep_ids) {
            const std::size_t i = index_of(id);
            auto r = h.row(i);
            rows.push_back({id, roles[i], proxy[i], {r.begin(), r.end()}});
        }
        for (std::size_t a = 0; a < additions.size(); ++a) {
            rows.push_back({additions[a].first, TokenRole::Visual, addition_proxy[a],
                            additions[a].second});
        }
        std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.id < b.id; });
        const std::size_t d = h.cols;
        ids.clear();
        roles.clear();
        proxy.clear();
        h = Matrix(rows.size(), d);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            ids.push_back(rows[i].id);
            roles.push_back(rows[i].role);
            proxy.push_back(rows[i].proxy);
            std::copy(rows[i].state.begin(), rows[i].state.end(), h.row(i).begin());
        }
    }

    std::vector<int> text_ids() const {
        std::vector<int> out;
        for (std::size_t i = 0; i < size(); ++i) {
            if (roles[i] == TokenRole::Text) out.push_back(ids[i]);
        }
        return out;
    }
};

int effective_merge_budget(int requested, int unselected) {
    if (unselected == 0) return 0;
    return std::clamp(requested, 1, unselected);
}

}  // namespace

RunResult run_with_schedule(const TokenSequence& seq, const LayerWeights& w,
                            const PruneSchedule& schedule, const RunOptions& options) {
    seq.validate(w.config.hidden_dim);
    PruneSchedule sched = options.strategy_override
                              ? schedule.with_strategy(*options.strategy_override)
                              : schedule;
    sched.validate(w.config.num_layers);

    LiveState live = LiveState::from_sequence(seq, w.config.hidden_dim);
    RunResult result;
    std::optional<BypassState> pending;
    std::size_t next_stage = 0;

    auto record_stage = [&](const PruneStage& st, std::vector<int> cand_ids,
                            std::vector<double> scores, Selection sel) {
        StageRecord rec;
        rec.layer = st.layer;
        rec.strategy = st.strategy;
        rec.candidate_ids = std::move(cand_ids);
        rec.scores = std::move(scores);
        rec.selected_ids = std::move(sel.selected_ids);
        rec.unselected_ids = std::move(sel.unselected_ids);
        result.stages.push_back(std::move(rec));
    };

    // Freeze `ids` (at their current live states) into a BypassState and put
    // the merged proxies into the live pool.
    auto freeze = [&](const PruneStage& st, const std::vector<int>& keep_ids,
                      const std::vector<int>& unselected, int origin_layer) {
        BypassState bs;
        bs.origin_layer = origin_layer;
        const int z = effective_merge_budget(st.merge_budget, static_cast<int>(unselected.size()));
        std::vector<std::pair<int, std::vector<double>>> additions;
        std::vector<bool> addition_proxy;
        if (z > 0) {
            Matrix states(unselected.size(), w.config.hidden_dim);
            for (std::size_t i = 0; i < unselected.size(); ++i) {
                auto r = live.h.row(live.index_of(unselected[i]));
                std::copy(r.begin(), r.end(), states.row(i).begin());
            }
            bs.groups = group_tokens(unselected, states, z);
            for (const auto& m : merge_groups(bs.groups)) {
                additions.emplace_back(m.id, m.state);
                addition_proxy.push_back(true);
            }
        }
        live.rebuild(keep_ids, additions, addition_proxy);
        pending = std::move(bs);
    };

    for (int layer = 1; layer <= w.config.num_layers; ++layer) {
        // Bypass restoration runs before the stage layer, on h^{layer-1}.
        if (next_stage < sched.stages.size() && sched.stages[next_stage].layer == layer &&
            sched.stages[next_stage].strategy == Strategy::Bypass && next_stage > 0) {
            const PruneStage& st = sched.stages[next_stage];
            const bool final_stage = next_stage + 1 == sched.stages.size();

            BypassState bs = pending ? std::move(*pending) : BypassState{};
            pending.reset();
            RestoredTokens restored = align_bypassed_tokens(bs, live.ids, live.h);

            BypassRecord brec;
            brec.state = bs;
            brec.restore_layer = layer;
            brec.group_offsets = restored.group_offsets;
            brec.restored_ids = restored.ids;
            brec.restored_states = restored.states;
            result.bypass_history.push_back(std::move(brec));

            const std::vector<int> retained = live.visual_ids(/*with_proxies=*/false);
            const std::size_t budget_pool = retained.size();

            // Candidate pool: retained tokens at their live states plus the
            // restored tokens at their aligned states.
            std::vector<int> cand_ids;
            Matrix cand_states(retained.size() + restored.ids.size(), w.config.hidden_dim);
            {
                std::vector<std::pair<int, std::span<const double>>> cand;
                for (int id : retained) cand.emplace_back(id, live.h.row(live.index_of(id)));
                for (std::size_t i = 0; i < restored.ids.size(); ++i) {
                    cand.emplace_back(restored.ids[i], restored.states.row(i));
                }
                std::sort(cand.begin(), cand.end(),
                          [](const auto& a, const auto& b) { return a.first < b.first; });
                for (std::size_t i = 0; i < cand.size(); ++i) {
                    cand_ids.push_back(cand[i].first);
                    std::copy(cand[i].second.begin(), cand[i].second.end(),
                              cand_states.row(i).begin());
                }
            }

            const std::vector<int> text = live.text_ids();
            Matrix text_states(text.size(), w.config.hidden_dim);
            for (std::size_t i = 0; i < text.size(); ++i) {
                auto r = live.h.row(live.index_of(text[i]));
                std::copy(r.begin(), r.end(), text_states.row(i).begin());
            }

            std::vector<double> scores = rescore_bypassed(cand_ids, cand_states, text, text_states,
                                                          w, layer, options.score_mode);
            Selection sel = cand_ids.empty()
                                ? Selection{}
                                : select_topk_count(cand_ids, scores,
                                                    keep_count(st.keep_ratio,
                                                               std::max<std::size_t>(budget_pool, 1)));

            // New live pool: text tokens plus selected candidates (restored
            // ones enter at their aligned states). Merged proxies vanish here.
            std::vector<std::pair<int, std::vector<double>>> additions;
            std::vector<bool> addition_proxy;
            std::vector<int> keep_ids = text;
            std::vector<int> restored_selected;
            for (int id : sel.selected_ids) {
                const bool was_restored =
                    std::binary_search(restored.ids.begin(), restored.ids.end(), id);
                if (was_restored) {
                    restored_selected.push_back(id);
                } else {
                    keep_ids.push_back(id);
                }
            }
            for (int id : restored_selected) {
                const std::size_t i =
                    std::lower_bound(restored.ids.begin(), restored.ids.end(), id) -
                    restored.ids.begin();
                auto r = restored.states.row(i);
                additions.emplace_back(id, std::vector<double>(r.begin(), r.end()));
                addition_proxy.push_back(false);
            }

            if (final_stage) {
                live.rebuild(keep_ids, additions, addition_proxy);
                pending.reset();
            } else {
                // Re-freeze the unselected candidates at their current-space
                // states for the next restoration.
                Matrix unsel_states(sel.unselected_ids.size(), w.config.hidden_dim);
                for (std::size_t i = 0; i < sel.unselected_ids.size(); ++i) {
                    const int id = sel.unselected_ids[i];
                    std::span<const double> src;
                    if (std::binary_search(restored.ids.begin(), restored.ids.end(), id)) {
                        const std::size_t j =
                            std::lower_bound(restored.ids.begin(), restored.ids.end(), id) -
                            restored.ids.begin();
                        src = restored.states.row(j);
                    } else {
                        src = live.h.row(live.index_of(id));
                    }
                    std::copy(src.begin(), src.end(), unsel_states.row(i).begin());
                }
                BypassState next;
                next.origin_layer = layer - 1;
                const int z = effective_merge_budget(st.merge_budget,
                                                     static_cast<int>(sel.unselected_ids.size()));
                if (z > 0) next.groups = group_tokens(sel.unselected_ids, unsel_states, z);
                for (const auto& m : merge_groups(next.groups)) {
                    additions.emplace_back(m.id, m.state);
                    addition_proxy.push_back(true);
                }
                live.rebuild(keep_ids, additions, addition_proxy);
                pending = std::move(next);
            }

            record_stage(st, std::move(cand_ids), std::move(scores), std::move(sel));
            ++next_stage;
        }

        // Attention scores of this layer come from its input states.
        const bool after_stage_here =
            next_stage < sched.stages.size() && sched.stages[next_stage].layer == layer &&
            (sched.stages[next_stage].strategy != Strategy::Bypass || next_stage == 0);
        std::vector<double> input_scores;
        std::vector<int> input_visual;
        if (after_stage_here) {
            input_visual = live.visual_ids(/*with_proxies=*/true);
            input_scores = tv_attention_scores(w, layer, live.h, live.roles, live.ids,
                                               options.score_mode);
        }
        std::vector<double> trace_tv;
        if (options.trace) {
            trace_tv = after_stage_here
                           ? input_scores
                           : tv_attention_scores(w, layer, live.h, live.roles, live.ids,
                                                 options.score_mode);
        }

        live.h = forward_layer(w, layer, live.h, live.ids);

        if (options.trace) {
            LayerRecord rec;
            rec.position_ids = live.ids;
            rec.hidden = live.h;
            rec.visual_ids = live.visual_ids(/*with_proxies=*/true);
            rec.tv_scores = std::move(trace_tv);
            result.trace.layers.push_back(std::move(rec));
        }

        if (after_stage_here) {
            const PruneStage& st = sched.stages[next_stage];
            const bool final_stage = next_stage + 1 == sched.stages.size();
            Selection sel = input_visual.empty()
                                ? Selection{}
                                : select_topk_tokens(input_visual, input_scores, st.keep_ratio);

            std::vector<int> keep_ids = live.text_ids();
            keep_ids.insert(keep_ids.end(), sel.selected_ids.begin(), sel.selected_ids.end());
            std::sort(keep_ids.begin(), keep_ids.end());

            if (st.strategy == Strategy::Drop || final_stage) {
                live.rebuild(keep_ids, {}, {});
                pending.reset();
            } else if (st.strategy == Strategy::Merge) {
                const int z = effective_merge_budget(st.merge_budget,
                                                     static_cast<int>(sel.unselected_ids.size()));
                std::vector<std::pair<int, std::vector<double>>> additions;
                std::vector<bool> addition_proxy;
                if (z > 0) {
                    Matrix states(sel.unselected_ids.size(), w.config.hidden_dim);
                    for (std::size_t i = 0; i < sel.unselected_ids.size(); ++i) {
                        auto r = live.h.row(live.index_of(sel.unselected_ids[i]));
                        std::copy(r.begin(), r.end(), states.row(i).begin());
                    }
                    for (const auto& m : merge_groups(group_tokens(sel.unselected_ids, states, z))) {
                        additions.emplace_back(m.id, m.state);
                        // Merge-strategy tokens are ordinary visual tokens.
                        addition_proxy.push_back(false);
                    }
                }
                live.rebuild(keep_ids, additions, addition_proxy);
            } else {  // Bypass first stage
                freeze(st, keep_ids, sel.unselected_ids, layer);
            }

            record_stage(st, std::move(input_visual), std::move(input_scores), std::move(sel));
            ++next_stage;
        }
    }

    result.final_states = std::move(live.h);
    result.final_ids = std::move(live.ids);
    result.final_roles = std::move(live.roles);
    return result;
}

RunResult run_with_keep_set(const TokenSequence& seq, const LayerWeights& w, int after_layer,
                            std::span<const int> keep_visual_ids, const RunOptions& options) {
    seq.validate(w.config.hidden_dim);
    if (after_layer < 1 || after_layer >= w.config.num_layers) {
        throw std::invalid_argument("run_with_keep_set: after_layer out of range");
    }
    LiveState live = LiveState::from_sequence(seq, w.config.hidden_dim);
    RunResult result;
    for (int layer = 1; layer <= w.config.num_layers; ++layer) {
        std::vector<double> trace_tv;
        if (options.trace) {
            trace_tv = tv_attention_scores(w, layer, live.h, live.roles, live.ids,
                                           options.score_mode);
        }
        live.h = forward_layer(w, layer, live.h, live.ids);
        if (options.trace) {
            LayerRecord rec;
            rec.position_ids = live.ids;
            rec.hidden = live.h;
            rec.visual_ids = live.visual_ids(true);
            rec.tv_scores = std::move(trace_tv);
            result.trace.layers.push_back(std::move(rec));
        }
        if (layer == after_layer) {
            std::vector<int> keep_ids = live.text_ids();
            for (int id : live.visual_ids(true)) {
                if (std::find(keep_visual_ids.begin(), keep_visual_ids.end(), id) !=
                    keep_visual_ids.end()) {
                    keep_ids.push_back(id);
                }
            }
            std::sort(keep_ids.begin(), keep_ids.end());
            live.rebuild(keep_ids, {}, {});
        }
    }
    result.final_states = std::move(live.h);
    result.final_ids = std::move(live.ids);
    result.final_roles = std::move(live.roles);
    return result;
}

}  // namespace tokenflux

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iostream>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ltmp/autodiff.hpp"
#include "ltmp/config.hpp"

namespace ltmp {

// ---------------------------------------------------------------------------
// Thresholds
// ---------------------------------------------------------------------------

inline constexpr double kDefaultTau = 0.1;

/// One merge and one prune threshold per block, plus the STE temperature.
struct ThresholdSet {
    std::vector<double> merge;
    std::vector<double> prune;
    double tau = kDefaultTau;

    /// merge = 1, prune = 0: with strict '>' nothing is reduced.
    static ThresholdSet initial(std::size_t blocks, double tau = kDefaultTau) {
        return ThresholdSet{std::vector<double>(blocks, 1.0), std::vector<double>(blocks, 0.0), tau};
    }

    std::size_t blocks() const noexcept { return merge.size(); }

    void validate() const {
        if (merge.size() != prune.size()) throw std::invalid_argument("threshold set: merge/prune length mismatch");
        if (!(tau > 0.0) || !std::isfinite(tau)) throw std::invalid_argument("threshold set: tau must be > 0");
        for (double v : merge)
            if (!std::isfinite(v)) throw std::invalid_argument("threshold set: non-finite merge threshold");
        for (double v : prune)
            if (!std::isfinite(v)) throw std::invalid_argument("threshold set: non-finite prune threshold");
    }

    bool operator==(const ThresholdSet&) const = default;
};

// ---------------------------------------------------------------------------
// Threshold masking
// ---------------------------------------------------------------------------

/// 1 where s_i > theta, else 0.
inline std::vector<double> threshold_mask(std::span<const double> scores, double theta) {
    std::vector<double> out(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] > theta ? 1.0 : 0.0;
    return out;
}

struct SteGradient {
    double d_score = 0;
    double d_theta = 0;
};

/// Derivatives of sigmoid((s - theta) / tau), the backward surrogate of the hard mask.
inline SteGradient threshold_mask_ste_grad(double score, double theta, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("threshold_mask_ste_grad: tau must be > 0");
    const double s = sigmoid((score - theta) / tau);
    const double slope = s * (1.0 - s) / tau;
    return {slope, -slope};
}

/// Tokens already removed stay removed; live tokens take the new decision.
inline std::vector<double> update_mask(std::span<const double> previous, std::span<const double> decisions) {
    if (previous.size() != decisions.size()) throw std::invalid_argument("update_mask: length mismatch");
    std::vector<double> out(previous.size());
    for (std::size_t i = 0; i < previous.size(); ++i) out[i] = previous[i] == 1.0 ? decisions[i] : previous[i];
    return out;
}

// ---------------------------------------------------------------------------
// Scores
// ---------------------------------------------------------------------------

/// s_i = sum over heads of S[h][0][i].
template <std::floating_point T>
std::vector<T> class_attention_scores(std::span<const Tensor<T>> probs) {
    if (probs.empty()) throw std::invalid_argument("class_attention_scores: no heads");
    const std::size_t n = probs[0].cols();
    std::vector<T> out(n, T(0));
    for (const auto& s : probs)
        for (std::size_t i = 0; i < n; ++i) out[i] += s(0, i);
    return out;
}

/// s_i = 1/(h * sum_k w_k) * sum_heads sum_k w_k S[h][k][i], w being the row mask.
template <std::floating_point T>
std::vector<T> mean_column_attention_scores(std::span<const Tensor<T>> probs, std::span<const T> row_weight) {
    if (probs.empty()) throw std::invalid_argument("mean_column_attention_scores: no heads");
    const std::size_t n = probs[0].cols();
    if (row_weight.size() != probs[0].rows()) throw std::invalid_argument("mean_column_attention_scores: mask length");
    T weight = 0;
    for (T w : row_weight) weight += w;
    std::vector<T> out(n, T(0));
    for (const auto& s : probs) {
        for (std::size_t k = 0; k < s.rows(); ++k) {
            if (row_weight[k] == T(0)) continue;
            const auto row = s.row(k);
            for (std::size_t i = 0; i < n; ++i) out[i] += row_weight[k] * row[i];
        }
    }
    const T norm = T(1) / (static_cast<T>(probs.size()) * weight);
    for (auto& v : out) v *= norm;
    return out;
}

/// Mean of the per-head column blocks of K[n x (h*dk)] -> [n x dk].
template <std::floating_point T>
Tensor<T> head_mean(const Tensor<T>& keys, std::size_t heads) {
    const std::size_t dk = keys.cols() / heads;
    Tensor<T> out({keys.rows(), dk});
    for (std::size_t r = 0; r < keys.rows(); ++r)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t c = 0; c < dk; ++c) out(r, c) += keys(r, h * dk + c);
    for (auto& v : out.values()) v /= T(heads);
    return out;
}

inline constexpr std::size_t kNoPartner = static_cast<std::size_t>(-1);

/// Alternating bipartite split of the kept tokens and each A token's best B partner.
struct BipartiteScores {
    std::vector<std::size_t> a_rows;       // set A, in kept order
    std::vector<std::size_t> b_rows;       // set B, CLS first
    std::vector<std::size_t> partner;      // per A row; kNoPartner for zero-norm keys
    std::vector<double> similarity;        // per A row, in [-1, 1]
};

/// Kept positions 1, 3, 5, ... go to A; 0 (CLS), 2, 4, ... go to B. Each A token
/// is scored by its maximum cosine similarity over B without CLS; ties pick the
/// lowest row. Fewer than two kept non-CLS tokens gives an empty result.
template <std::floating_point T>
BipartiteScores bipartite_similarity(const Tensor<T>& keys, std::span<const std::size_t> kept_rows) {
    BipartiteScores out;
    if (kept_rows.size() < 3) return out;
    for (std::size_t p = 0; p < kept_rows.size(); ++p) (p % 2 ? out.a_rows : out.b_rows).push_back(kept_rows[p]);

    auto norm = [&](std::size_t r) {
        T s = 0;
        for (T v : keys.row(r)) s += v * v;
        return std::sqrt(s);
    };
    std::vector<T> b_norm;
    for (std::size_t j = 1; j < out.b_rows.size(); ++j) b_norm.push_back(norm(out.b_rows[j]));

    for (std::size_t a : out.a_rows) {
        const T na = norm(a);
        double best = -2.0;
        std::size_t best_row = kNoPartner;
        if (na > T(0)) {
            for (std::size_t j = 1; j < out.b_rows.size(); ++j) {
                const std::size_t b = out.b_rows[j];
                double cosv = -1.0;
                if (b_norm[j - 1] > T(0)) {
                    T dot = 0;
                    const auto ka = keys.row(a);
                    const auto kb = keys.row(b);
                    for (std::size_t c = 0; c < ka.size(); ++c) dot += ka[c] * kb[c];
                    cosv = std::clamp(static_cast<double>(dot / (na * b_norm[j - 1])), -1.0, 1.0);
                }
                if (cosv > best) {
                    best = cosv;
                    best_row = b;
                }
            }
        } else {
            std::clog << "ltmp: zero-norm key at row " << a << ", similarity set to -1\n";
        }
        if (best_row == kNoPartner || na == T(0)) {
            out.partner.push_back(kNoPartner);
            out.similarity.push_back(-1.0);
        } else {
            out.partner.push_back(best_row);
            out.similarity.push_back(best);
        }
    }
    return out;
}

enum class TopkOrder { largest, smallest };

/// Indices of the k largest (or smallest) scores, ascending; ties go to the lower index.
inline std::vector<std::size_t> topk_select(std::span<const double> scores, std::ptrdiff_t k, TopkOrder order) {
    if (k < 0) throw std::invalid_argument("topk_select: k must be non-negative");
    if (static_cast<std::size_t>(k) > scores.size()) throw std::invalid_argument("topk_select: k exceeds candidate count");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return order == TopkOrder::largest ? scores[a] > scores[b] : scores[a] < scores[b];
    });
    idx.resize(static_cast<std::size_t>(k));
    std::sort(idx.begin(), idx.end());
    return idx;
}

// ---------------------------------------------------------------------------
// Differentiable score and gate operators
// ---------------------------------------------------------------------------

namespace ad {

template <class T>
Var importance_scores(Graph<T>& g, std::span<const Var> probs, Var mask, ImportanceScore kind) {
    std::vector<Tensor<T>> values;
    for (Var p : probs) values.push_back(g.value(p));
    std::vector<Var> parents(probs.begin(), probs.end());
    parents.push_back(mask);
    const std::vector<Var> heads(probs.begin(), probs.end());

    if (kind == ImportanceScore::class_attention) {
        auto s = class_attention_scores<T>(values);
        return g.record(Tensor<T>::vector(std::move(s)), parents, [heads](Graph<T>& gr, const Tensor<T>& go) {
            for (Var h : heads) {
                if (auto* gs = gr.grad_slot(h)) {
                    for (std::size_t i = 0; i < go.size(); ++i) (*gs)(0, i) += go[i];
                }
            }
        }, "class_attention_scores");
    }

    const auto& w = g.value(mask);
    auto s = mean_column_attention_scores<T>(values, w.data());
    Tensor<T> scores = Tensor<T>::vector(s);
    return g.record(std::move(scores), parents, [heads, mask, s = std::move(s)](Graph<T>& gr, const Tensor<T>& go) {
        const auto& w = gr.value(mask);
        T weight = 0;
        for (T v : w.values()) weight += v;
        const T h = static_cast<T>(heads.size());
        const T norm = T(1) / (h * weight);
        for (Var head : heads) {
            if (auto* gs = gr.grad_slot(head)) {
                for (std::size_t k = 0; k < gs->rows(); ++k) {
                    if (w[k] == T(0)) continue;
                    for (std::size_t i = 0; i < go.size(); ++i) (*gs)(k, i) += go[i] * w[k] * norm;
                }
            }
        }
        if (auto* gw = gr.grad_slot(mask)) {
            T gs_dot = 0;
            for (std::size_t i = 0; i < go.size(); ++i) gs_dot += go[i] * s[i];
            for (Var head : heads) {
                const auto& sv = gr.value(head);
                for (std::size_t k = 0; k < sv.rows(); ++k) {
                    T acc = 0;
                    for (std::size_t i = 0; i < go.size(); ++i) acc += go[i] * sv(k, i);
                    (*gw)[k] += acc * norm;
                }
            }
            for (std::size_t k = 0; k < gw->size(); ++k) (*gw)[k] -= gs_dot / weight;
        }
    }, "mean_column_attention_scores");
}

template <class T>
Var head_mean(Graph<T>& g, Var keys, std::size_t heads) {
    Tensor<T> out = ltmp::head_mean(g.value(keys), heads);
    return g.record(std::move(out), {keys}, [keys, heads](Graph<T>& gr, const Tensor<T>& go) {
        if (auto* gk = gr.grad_slot(keys)) {
            const std::size_t dk = go.cols();
            for (std::size_t r = 0; r < go.rows(); ++r)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t c = 0; c < dk; ++c) (*gk)(r, h * dk + c) += go(r, c) / T(heads);
        }
    }, "head_mean");
}

/// Vector over all rows: cos(k_a, k_partner(a)) at A rows, 0 elsewhere.
template <class T>
Var pair_cosine(Graph<T>& g, Var keys, const BipartiteScores& pairs) {
    const auto& kv = g.value(keys);
    Tensor<T> out({kv.rows()});
    struct Pair {
        std::size_t a, b;
    };
    std::vector<Pair> live;
    for (std::size_t i = 0; i < pairs.a_rows.size(); ++i) {
        const std::size_t a = pairs.a_rows[i];
        if (pairs.partner[i] == kNoPartner) {
            out[a] = T(-1);
            continue;
        }
        out[a] = T(pairs.similarity[i]);
        live.push_back({a, pairs.partner[i]});
    }
    return g.record(std::move(out), {keys}, [keys, live](Graph<T>& gr, const Tensor<T>& go) {
        auto* gk = gr.grad_slot(keys);
        if (!gk) return;
        const auto& kv = gr.value(keys);
        const std::size_t d = kv.cols();
        for (const auto& p : live) {
            const auto u = kv.row(p.a);
            const auto v = kv.row(p.b);
            T uu = 0, vv = 0, uv = 0;
            for (std::size_t c = 0; c < d; ++c) {
                uu += u[c] * u[c];
                vv += v[c] * v[c];
                uv += u[c] * v[c];
            }
            const T nu = std::sqrt(uu);
            const T nv = std::sqrt(vv);
            const T cosv = uv / (nu * nv);
            const T gi = go[p.a];
            for (std::size_t c = 0; c < d; ++c) {
                (*gk)(p.a, c) += gi * (v[c] / (nu * nv) - cosv * u[c] / uu);
                (*gk)(p.b, c) += gi * (u[c] / (nu * nv) - cosv * v[c] / vv);
            }
        }
    }, "pair_cosine");
}

enum class GateSense {
    keep_above,        // pruning: keep when score > theta
    remove_above,      // merging: remove (merge away) when score > theta
};

/// Keep-gate over all rows. Non-candidate rows get 1. Candidate rows get the
/// hard step (or, when `relaxed`, the sigmoid itself) of (score - theta)/tau;
/// the backward pass always uses the sigmoid slope.
template <class T>
Var threshold_gate(Graph<T>& g, Var scores, Var theta, double tau, std::vector<std::size_t> candidates, GateSense sense,
                   bool relaxed) {
    const auto& sv = g.value(scores);
    const double th = static_cast<double>(g.value(theta).item());
    Tensor<T> out({sv.size()});
    out.fill(T(1));
    for (std::size_t i : candidates) {
        const double s = static_cast<double>(sv[i]);
        const double m = relaxed ? sigmoid((s - th) / tau) : (s > th ? 1.0 : 0.0);
        out[i] = T(sense == GateSense::keep_above ? m : 1.0 - m);
    }
    return g.record(std::move(out), {scores, theta},
                    [scores, theta, tau, candidates = std::move(candidates), sense](Graph<T>& gr, const Tensor<T>& go) {
        const auto& sv = gr.value(scores);
        const double th = static_cast<double>(gr.value(theta).item());
        auto* gs = gr.grad_slot(scores);
        auto* gt = gr.grad_slot(theta);
        const double sign = sense == GateSense::keep_above ? 1.0 : -1.0;
        for (std::size_t i : candidates) {
            const auto d = threshold_mask_ste_grad(static_cast<double>(sv[i]), th, tau);
            if (gs) (*gs)[i] += go[i] * T(sign * d.d_score);
            if (gt) (*gt)[0] += go[i] * T(sign * d.d_theta);
        }
    }, "threshold_gate");
}

}  // namespace ad

// ---------------------------------------------------------------------------
// Token state and merge / prune application
// ---------------------------------------------------------------------------

/// Per-sample token buffer flowing through the blocks.
///
/// In train mode rows never move: removed tokens stay with kept == 0 and mask
/// value 0. In inference mode removed rows are gathered out after each block.
template <std::floating_point T>
struct TokenState {
    Var tokens;                          // [rows x d]
    Var mask;                            // [rows]
    std::vector<std::uint8_t> kept;      // hard keep flag per row
    std::vector<double> sizes;           // merge multiplicity per row
    std::vector<std::size_t> origin;     // original token id of each row (0 = CLS)
    std::vector<int> owner;              // per original token: origin id of its current row, -1 once pruned
    double pruned_mass = 0;

    std::size_t rows() const noexcept { return kept.size(); }

    std::vector<std::size_t> kept_rows() const {
        std::vector<std::size_t> out;
        for (std::size_t r = 0; r < kept.size(); ++r)
            if (kept[r]) out.push_back(r);
        return out;
    }

    std::size_t kept_count() const {
        return static_cast<std::size_t>(std::count(kept.begin(), kept.end(), std::uint8_t{1}));
    }

    double kept_mass() const {
        double m = 0;
        for (std::size_t r = 0; r < kept.size(); ++r)
            if (kept[r]) m += sizes[r];
        return m;
    }
};

struct MergeAssignment {
    std::size_t source;        // original token id of the merged-away row
    std::size_t destination;   // original token id of the row it folded into
};

struct ReductionOptions {
    double tau = kDefaultTau;
    bool relaxed = false;   // sigmoid-valued masks in the forward pass
    MergeWeighting weighting = MergeWeighting::size_weighted;
};

namespace detail {

template <class T>
std::vector<MergeAssignment> apply_merges(Graph<T>& g, TokenState<T>& x, const BipartiteScores& pairs,
                                          const std::vector<std::uint8_t>& selected, Var gate, MergeWeighting weighting) {
    std::vector<ad::RowMergeStep> steps;
    std::vector<MergeAssignment> assignments;
    for (std::size_t i = 0; i < pairs.a_rows.size(); ++i) {
        if (!selected[i]) continue;
        const std::size_t src = pairs.a_rows[i];
        const std::size_t dst = pairs.partner[i];
        const double sd = x.sizes[dst];
        const double ss = x.sizes[src];
        if (weighting == MergeWeighting::size_weighted) {
            steps.push_back({dst, src, sd / (sd + ss), ss / (sd + ss)});
        } else {
            steps.push_back({dst, src, 0.5, 0.5});
        }
        x.sizes[dst] = sd + ss;
        x.kept[src] = 0;
        const int from = static_cast<int>(x.origin[src]);
        const int to = static_cast<int>(x.origin[dst]);
        for (auto& o : x.owner)
            if (o == from) o = to;
        assignments.push_back({x.origin[src], x.origin[dst]});
    }
    if (!steps.empty()) x.tokens = ad::merge_rows(g, x.tokens, std::move(steps));
    x.mask = ad::mul(g, x.mask, gate);
    return assignments;
}

template <class T>
std::size_t apply_prunes(Graph<T>& g, TokenState<T>& x, const std::vector<std::size_t>& rows, Var gate) {
    for (std::size_t r : rows) {
        x.kept[r] = 0;
        x.pruned_mass += x.sizes[r];
        const int from = static_cast<int>(x.origin[r]);
        for (auto& o : x.owner)
            if (o == from) o = -1;
    }
    x.mask = ad::mul(g, x.mask, gate);
    return rows.size();
}

}  // namespace detail

/// Merge every A token whose similarity exceeds theta_merge into its partner.
template <class T>
std::vector<MergeAssignment> merge_tokens(Graph<T>& g, TokenState<T>& x, const BipartiteScores& pairs, Var similarity,
                                          Var theta_merge, const ReductionOptions& opt) {
    const double th = static_cast<double>(g.value(theta_merge).item());
    std::vector<std::uint8_t> selected(pairs.a_rows.size(), 0);
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < pairs.a_rows.size(); ++i) {
        if (pairs.partner[i] == kNoPartner) continue;
        candidates.push_back(pairs.a_rows[i]);
        selected[i] = pairs.similarity[i] > th ? 1 : 0;
    }
    Var gate = ad::threshold_gate(g, similarity, theta_merge, opt.tau, std::move(candidates), ad::GateSense::remove_above,
                                  opt.relaxed);
    return detail::apply_merges(g, x, pairs, selected, gate, opt.weighting);
}

/// Fixed-rate bipartite merging: the k most similar A tokens (clamped to the
/// number of A tokens with a partner).
template <class T>
std::vector<MergeAssignment> merge_tokens_topk(Graph<T>& g, TokenState<T>& x, const BipartiteScores& pairs,
                                               std::size_t k, const ReductionOptions& opt) {
    std::vector<double> scores;
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < pairs.a_rows.size(); ++i) {
        if (pairs.partner[i] == kNoPartner) continue;
        scores.push_back(pairs.similarity[i]);
        eligible.push_back(i);
    }
    const auto kk = static_cast<std::ptrdiff_t>(std::min(k, scores.size()));
    std::vector<std::uint8_t> selected(pairs.a_rows.size(), 0);
    Tensor<T> gate({x.rows()});
    gate.fill(T(1));
    for (std::size_t j : topk_select(scores, kk, TopkOrder::largest)) {
        selected[eligible[j]] = 1;
        gate[pairs.a_rows[eligible[j]]] = T(0);
    }
    return detail::apply_merges(g, x, pairs, selected, g.constant(std::move(gate)), opt.weighting);
}

/// Prune kept non-CLS rows whose importance is <= theta_prune. Returns the count.
template <class T>
std::size_t prune_tokens(Graph<T>& g, TokenState<T>& x, Var importance, Var theta_prune, const ReductionOptions& opt) {
    const auto& s = g.value(importance);
    const double th = static_cast<double>(g.value(theta_prune).item());
    std::vector<std::size_t> candidates;
    std::vector<std::size_t> removed;
    for (std::size_t r : x.kept_rows()) {
        if (x.origin[r] == 0) continue;
        candidates.push_back(r);
        if (!(static_cast<double>(s[r]) > th)) removed.push_back(r);
    }
    Var gate = ad::threshold_gate(g, importance, theta_prune, opt.tau, std::move(candidates), ad::GateSense::keep_above,
                                  opt.relaxed);
    return detail::apply_prunes(g, x, removed, gate);
}

/// Fixed-rate pruning of the k least important kept non-CLS rows.
template <class T>
std::size_t prune_tokens_topk(Graph<T>& g, TokenState<T>& x, Var importance, std::size_t k) {
    const auto& s = g.value(importance);
    std::vector<std::size_t> candidates;
    std::vector<double> scores;
    for (std::size_t r : x.kept_rows()) {
        if (x.origin[r] == 0) continue;
        candidates.push_back(r);
        scores.push_back(static_cast<double>(s[r]));
    }
    const auto kk = static_cast<std::ptrdiff_t>(std::min(k, candidates.size()));
    std::vector<std::size_t> removed;
    Tensor<T> gate({x.rows()});
    gate.fill(T(1));
    for (std::size_t j : topk_select(scores, kk, TopkOrder::smallest)) {
        removed.push_back(candidates[j]);
        gate[candidates[j]] = T(0);
    }
    return detail::apply_prunes(g, x, removed, g.constant(std::move(gate)));
}

// ---------------------------------------------------------------------------
// Reduction trace
// ---------------------------------------------------------------------------

struct LayerTrace {
    std::size_t layer = 0;           // 1-based
    std::size_t merged = 0;
    std::size_t pruned = 0;
    std::size_t kept = 0;            // kept rows after the reduction, CLS included
    double kept_fraction = 1;        // mean of the mask after the reduction
    std::vector<MergeAssignment> merges;
    std::vector<int> owner;          // per original token, see TokenState::owner
};

struct ReductionTrace {
    std::vector<LayerTrace> layers;
};

inline nlohmann::json to_json(const LayerTrace& t) {
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& m : t.merges) merges.push_back({m.source, m.destination});
    return {{"layer", t.layer},     {"merged", t.merged},   {"pruned", t.pruned},
            {"kept", t.kept},       {"kept_fraction", t.kept_fraction},
            {"merges", merges},     {"owner", t.owner}};
}

/// One JSON line per layer.
inline std::string to_json_lines(const ReductionTrace& trace, std::size_t sample) {
    std::string out;
    for (const auto& layer : trace.layers) {
        auto j = to_json(layer);
        j["sample"] = sample;
        out += j.dump();
        out += '\n';
    }
    return out;
}

}  // namespace ltmp

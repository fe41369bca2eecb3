#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "ltmp/autodiff.hpp"
#include "ltmp/config.hpp"
#include "ltmp/flops.hpp"
#include "ltmp/reduction.hpp"
#include "ltmp/rng.hpp"

namespace ltmp {

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Per-block parameter slots; P is Tensor<T> for storage or Var once bound to a graph.
template <class P>
struct BlockSlots {
    P ln1_gamma, ln1_beta;
    P qkv_weight, qkv_bias;     // [d x 3d], [3d]; columns are Q | K | V, heads contiguous inside each
    P proj_weight, proj_bias;   // [d x d], [d]
    P ln2_gamma, ln2_beta;
    P fc1_weight, fc1_bias;     // [d x rd], [rd]
    P fc2_weight, fc2_bias;     // [rd x d], [d]

    template <class F>
    void visit(F&& f) {
        visit_impl(*this, f);
    }
    template <class F>
    void visit(F&& f) const {
        visit_impl(*this, f);
    }

private:
    template <class Self, class F>
    static void visit_impl(Self& s, F& f) {
        f("ln1.gamma", s.ln1_gamma);
        f("ln1.beta", s.ln1_beta);
        f("attn.qkv.weight", s.qkv_weight);
        f("attn.qkv.bias", s.qkv_bias);
        f("attn.proj.weight", s.proj_weight);
        f("attn.proj.bias", s.proj_bias);
        f("ln2.gamma", s.ln2_gamma);
        f("ln2.beta", s.ln2_beta);
        f("mlp.fc1.weight", s.fc1_weight);
        f("mlp.fc1.bias", s.fc1_bias);
        f("mlp.fc2.weight", s.fc2_weight);
        f("mlp.fc2.bias", s.fc2_bias);
    }
};

/// Whole-model parameter slots in declaration order (the checkpoint order).
template <class P>
struct VitSlots {
    P patch_weight, patch_bias;   // [p*p*C x d], [d]
    P cls_token;                  // [1 x d]
    P pos_embed;                  // [(n+1) x d]
    std::vector<BlockSlots<P>> blocks;
    P norm_gamma, norm_beta;
    P head_weight, head_bias;     // [d x classes], [classes]

    template <class F>
    void visit(F&& f) {
        visit_impl(*this, f);
    }
    template <class F>
    void visit(F&& f) const {
        visit_impl(*this, f);
    }

private:
    template <class Self, class F>
    static void visit_impl(Self& s, F& f) {
        f("patch_embed.weight", s.patch_weight);
        f("patch_embed.bias", s.patch_bias);
        f("cls_token", s.cls_token);
        f("pos_embed", s.pos_embed);
        for (auto& b : s.blocks) b.visit(f);
        f("norm.gamma", s.norm_gamma);
        f("norm.beta", s.norm_beta);
        f("head.weight", s.head_weight);
        f("head.bias", s.head_bias);
    }
};

template <std::floating_point T>
using VitParams = VitSlots<Tensor<T>>;

using BoundParams = VitSlots<Var>;

/// Zero tensors with the model's parameter shapes.
template <std::floating_point T>
VitParams<T> zero_params(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.embed_dim;
    const std::size_t r = cfg.hidden_dim();
    VitParams<T> p;
    p.patch_weight = Tensor<T>({cfg.patch_dim(), d});
    p.patch_bias = Tensor<T>({d});
    p.cls_token = Tensor<T>({1, d});
    p.pos_embed = Tensor<T>({cfg.tokens(), d});
    p.blocks.resize(cfg.blocks);
    for (auto& b : p.blocks) {
        b.ln1_gamma = Tensor<T>({d});
        b.ln1_beta = Tensor<T>({d});
        b.qkv_weight = Tensor<T>({d, 3 * d});
        b.qkv_bias = Tensor<T>({3 * d});
        b.proj_weight = Tensor<T>({d, d});
        b.proj_bias = Tensor<T>({d});
        b.ln2_gamma = Tensor<T>({d});
        b.ln2_beta = Tensor<T>({d});
        b.fc1_weight = Tensor<T>({d, r});
        b.fc1_bias = Tensor<T>({r});
        b.fc2_weight = Tensor<T>({r, d});
        b.fc2_bias = Tensor<T>({d});
    }
    p.norm_gamma = Tensor<T>({d});
    p.norm_beta = Tensor<T>({d});
    p.head_weight = Tensor<T>({d, cfg.classes});
    p.head_bias = Tensor<T>({cfg.classes});
    return p;
}

/// Truncated-free N(0, 0.02) for weights and embeddings, zero biases, unit LN gains.
template <std::floating_point T>
VitParams<T> init_params(const ModelConfig& cfg, Rng& rng) {
    auto p = zero_params<T>(cfg);
    auto normal_fill = [&](Tensor<T>& t, double stddev) {
        for (auto& v : t.values()) v = T(rng.normal(0.0, stddev));
    };
    auto ones = [](Tensor<T>& t) { t.fill(T(1)); };
    normal_fill(p.patch_weight, 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())));
    normal_fill(p.cls_token, 0.02);
    normal_fill(p.pos_embed, 0.02);
    for (auto& b : p.blocks) {
        ones(b.ln1_gamma);
        ones(b.ln2_gamma);
        normal_fill(b.qkv_weight, 0.02);
        normal_fill(b.proj_weight, 0.02);
        normal_fill(b.fc1_weight, 0.02);
        normal_fill(b.fc2_weight, 0.02);
    }
    ones(p.norm_gamma);
    normal_fill(p.head_weight, 0.02);
    return p;
}

template <std::floating_point U, std::floating_point T>
VitParams<U> cast_params(const VitParams<T>& src) {
    VitParams<U> out;
    out.blocks.resize(src.blocks.size());
    std::vector<const Tensor<T>*> from;
    src.visit([&](std::string_view, const Tensor<T>& t) { from.push_back(&t); });
    std::size_t i = 0;
    out.visit([&](std::string_view, Tensor<U>& t) { t = from[i++]->template cast<U>(); });
    return out;
}

template <std::floating_point T>
std::size_t parameter_count(const VitParams<T>& p) {
    std::size_t n = 0;
    p.visit([&](std::string_view, const Tensor<T>& t) { n += t.size(); });
    return n;
}

/// Parameters and thresholds as graph leaves.
struct BoundModel {
    BoundParams params;
    std::vector<Var> theta_merge;
    std::vector<Var> theta_prune;
    double tau = kDefaultTau;
};

template <std::floating_point T>
BoundModel bind(Graph<T>& g, const VitParams<T>& params, const ThresholdSet& thresholds, bool train_backbone,
                bool train_thresholds) {
    BoundModel b;
    b.params.blocks.resize(params.blocks.size());
    std::vector<Var> vars;
    params.visit([&](std::string_view, const Tensor<T>& t) { vars.push_back(g.leaf(t, train_backbone)); });
    std::size_t i = 0;
    b.params.visit([&](std::string_view, Var& v) { v = vars[i++]; });
    for (double v : thresholds.merge) b.theta_merge.push_back(g.leaf(Tensor<T>::scalar(T(v)), train_thresholds));
    for (double v : thresholds.prune) b.theta_prune.push_back(g.leaf(Tensor<T>::scalar(T(v)), train_thresholds));
    b.tau = thresholds.tau;
    return b;
}

/// Flat list of parameter leaves in declaration order.
inline std::vector<Var> parameter_vars(const BoundParams& p) {
    std::vector<Var> out;
    p.visit([&](std::string_view, const Var& v) { out.push_back(v); });
    return out;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

enum class ExecMode {
    train,       // fixed token count, removed tokens carried with mask 0
    inference,   // removed tokens are physically dropped; one sample at a time
};

struct ForwardOptions {
    ExecMode mode = ExecMode::train;
    bool relaxed = false;   // sigmoid-valued threshold masks in the forward pass
};

/// Image [H x W x C] -> patches [(H/p)*(W/p) x p*p*C], row-major over the patch grid.
template <std::floating_point T>
Tensor<T> patchify(const Tensor<T>& image, const ModelConfig& cfg) {
    const auto& s = image.shape();
    if (s.size() != 3 || s[0] != cfg.image_size || s[1] != cfg.image_size || s[2] != cfg.channels) {
        throw ShapeError("image shape " + shape_string(s) + " does not match model config " +
                         std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) + "x" +
                         std::to_string(cfg.channels));
    }
    const std::size_t p = cfg.patch_size;
    const std::size_t grid = cfg.grid();
    const std::size_t c = cfg.channels;
    const std::size_t w = cfg.image_size;
    Tensor<T> out({grid * grid, cfg.patch_dim()});
    for (std::size_t gy = 0; gy < grid; ++gy)
        for (std::size_t gx = 0; gx < grid; ++gx) {
            auto row = out.row(gy * grid + gx);
            std::size_t k = 0;
            for (std::size_t y = 0; y < p; ++y)
                for (std::size_t x = 0; x < p; ++x)
                    for (std::size_t ch = 0; ch < c; ++ch)
                        row[k++] = image[((gy * p + y) * w + (gx * p + x)) * c + ch];
        }
    return out;
}

template <class T>
TokenState<T> patch_embed(Graph<T>& g, const Tensor<T>& image, const ModelConfig& cfg, const BoundParams& p) {
    Var patches = g.constant(patchify(image, cfg));
    Var embedded = ad::linear(g, patches, p.patch_weight, p.patch_bias);
    const Var rows[] = {p.cls_token, embedded};
    Var tokens = ad::add(g, ad::concat_rows<T>(g, rows), p.pos_embed);

    const std::size_t n = cfg.tokens();
    TokenState<T> x;
    x.tokens = tokens;
    Tensor<T> ones({n});
    ones.fill(T(1));
    x.mask = g.constant(std::move(ones));
    x.kept.assign(n, 1);
    x.sizes.assign(n, 1.0);
    x.origin.resize(n);
    x.owner.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        x.origin[i] = i;
        x.owner[i] = static_cast<int>(i);
    }
    return x;
}

/// Q, K, V, logits and masked softmax per head, kept for scoring.
struct AttentionCache {
    std::vector<Var> q, k, v;
    std::vector<Var> logits;
    std::vector<Var> probs;
    Var keys;          // K over all heads [rows x d]
    Var mask;          // the column mask the softmax used
};

template <class T>
std::vector<T> kept_gate(const TokenState<T>& x) {
    std::vector<T> gate(x.rows());
    for (std::size_t r = 0; r < gate.size(); ++r) gate[r] = x.kept[r] ? T(1) : T(0);
    return gate;
}

/// x <- x + MSA(LN(x)) for kept rows; removed rows are left untouched.
template <class T>
AttentionCache attend(Graph<T>& g, TokenState<T>& x, const BlockSlots<Var>& p, const ModelConfig& cfg) {
    const std::size_t d = cfg.embed_dim;
    const std::size_t dk = cfg.head_dim();
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));
    Var h = ad::layer_norm(g, x.tokens, p.ln1_gamma, p.ln1_beta);
    Var qkv = ad::linear(g, h, p.qkv_weight, p.qkv_bias);

    AttentionCache c;
    c.mask = x.mask;
    c.keys = ad::slice_cols(g, qkv, d, 2 * d);
    std::vector<Var> outs;
    for (std::size_t j = 0; j < cfg.heads; ++j) {
        Var q = ad::slice_cols(g, qkv, j * dk, (j + 1) * dk);
        Var k = ad::slice_cols(g, qkv, d + j * dk, d + (j + 1) * dk);
        Var v = ad::slice_cols(g, qkv, 2 * d + j * dk, 2 * d + (j + 1) * dk);
        Var a = ad::scale(g, ad::matmul_nt(g, q, k), inv_sqrt);
        Var s = ad::masked_softmax(g, a, x.mask);
        outs.push_back(ad::matmul(g, s, v));
        c.q.push_back(q);
        c.k.push_back(k);
        c.v.push_back(v);
        c.logits.push_back(a);
        c.probs.push_back(s);
    }
    Var merged = ad::concat_cols<T>(g, outs);
    Var attn = ad::linear(g, merged, p.proj_weight, p.proj_bias);
    x.tokens = ad::gated_residual(g, x.tokens, attn, kept_gate(x));
    return c;
}

/// Values observed by the reduction step of one block.
struct ScoreSnapshot {
    std::size_t layer = 0;                // 1-based
    std::vector<std::size_t> kept_rows;   // before the reduction
    std::vector<std::size_t> origin;      // per row
    std::vector<double> importance;       // per row
    BipartiteScores pairs;                // on the kept rows the merge step saw
};

using ScoreObserver = std::function<void(const ScoreSnapshot&)>;

/// Merge and/or prune per cfg.reduction_order, consuming this block's attention.
template <class T>
LayerTrace reduce(Graph<T>& g, TokenState<T>& x, const AttentionCache& cache, Var theta_merge, Var theta_prune,
                  const ModelConfig& cfg, const ReductionOptions& opt, std::size_t layer,
                  const ScoreObserver& observer = {}) {
    LayerTrace trace;
    trace.layer = layer;
    const ReductionOrder order = cfg.reduction_order;
    const bool merging = uses_merging(order);
    const bool pruning = uses_pruning(order);

    ScoreSnapshot snap;
    snap.layer = layer;
    snap.kept_rows = x.kept_rows();
    snap.origin = x.origin;

    Var importance;
    if (pruning || observer) {
        importance = ad::importance_scores<T>(g, cache.probs, cache.mask, cfg.importance_score);
        for (T v : g.value(importance).values()) snap.importance.push_back(static_cast<double>(v));
    }
    Var keys_mean;
    if (merging || observer) keys_mean = ad::head_mean(g, cache.keys, cfg.heads);

    auto do_merge = [&] {
        auto pairs = bipartite_similarity(g.value(keys_mean), x.kept_rows());
        Var sims = ad::pair_cosine(g, keys_mean, pairs);
        std::vector<MergeAssignment> merged;
        if (is_topk(order)) {
            merged = merge_tokens_topk(g, x, pairs, cfg.topk, opt);
        } else {
            merged = merge_tokens(g, x, pairs, sims, theta_merge, opt);
        }
        trace.merged = merged.size();
        trace.merges = std::move(merged);
        return pairs;
    };
    auto do_prune = [&] {
        trace.pruned = is_topk(order) ? prune_tokens_topk(g, x, importance, cfg.topk)
                                      : prune_tokens(g, x, importance, theta_prune, opt);
    };

    if (prune_first(order)) {
        if (pruning) do_prune();
        if (merging) snap.pairs = do_merge();
    } else {
        if (merging) snap.pairs = do_merge();
        if (pruning) do_prune();
    }
    if (observer) {
        if (!merging) snap.pairs = bipartite_similarity(g.value(keys_mean), snap.kept_rows);
        observer(snap);
    }
    trace.kept = x.kept_count();
    return trace;
}

/// x <- x + MLP(LN(x)) computed on kept rows only.
template <class T>
void mlp(Graph<T>& g, TokenState<T>& x, const BlockSlots<Var>& p) {
    const auto rows = x.kept_rows();
    const bool all = rows.size() == x.rows();
    Var in = all ? x.tokens : ad::gather_rows(g, x.tokens, rows);
    Var h = ad::layer_norm(g, in, p.ln2_gamma, p.ln2_beta);
    Var f = ad::gelu(g, ad::linear(g, h, p.fc1_weight, p.fc1_bias));
    Var out = ad::linear(g, f, p.fc2_weight, p.fc2_bias);
    if (all) {
        x.tokens = ad::add(g, x.tokens, out);
        return;
    }
    x.tokens = ad::add(g, x.tokens, ad::scatter_rows(g, out, rows, x.rows()));
}

/// Drops removed rows (inference mode).
template <class T>
void compact(Graph<T>& g, TokenState<T>& x) {
    const auto rows = x.kept_rows();
    if (rows.size() == x.rows()) return;
    x.tokens = ad::gather_rows(g, x.tokens, rows);
    std::vector<double> sizes;
    std::vector<std::size_t> origin;
    for (std::size_t r : rows) {
        sizes.push_back(x.sizes[r]);
        origin.push_back(x.origin[r]);
    }
    x.sizes = std::move(sizes);
    x.origin = std::move(origin);
    x.kept.assign(rows.size(), 1);
    Tensor<T> ones({rows.size()});
    ones.fill(T(1));
    x.mask = g.constant(std::move(ones));
}

/// Kept fraction of all n+1 tokens: mean of the mask in train mode, a
/// constant count ratio in inference mode.
template <class T>
Var kept_fraction(Graph<T>& g, const TokenState<T>& x, const ModelConfig& cfg, ExecMode mode) {
    if (mode == ExecMode::train) return ad::mean(g, x.mask);
    return g.constant(Tensor<T>::scalar(static_cast<T>(x.kept_count()) / static_cast<T>(cfg.tokens())));
}

template <class T>
struct ForwardResult {
    Var logits;                        // [1 x classes]
    Var r_flops;                       // scalar, differentiable through the masks
    std::vector<Var> kept_fraction;    // per block
    ReductionTrace trace;
    TokenState<T> state;               // after the last block
};

template <class T>
struct BlockResult {
    LayerTrace trace;
    Var kept_fraction;   // after the reduction
};

/// One block: attention, reduction, MLP. In inference mode removed rows are
/// dropped between the reduction and the MLP.
template <class T>
BlockResult<T> block_forward(Graph<T>& g, TokenState<T>& x, const BoundModel& m, std::size_t block,
                             const ModelConfig& cfg, const ForwardOptions& opt, const ScoreObserver& observer = {}) {
    const auto& p = m.params.blocks.at(block);
    AttentionCache cache = attend(g, x, p, cfg);
    BlockResult<T> out;
    if (cfg.reduction_order != ReductionOrder::none) {
        const ReductionOptions ro{m.tau, opt.relaxed, cfg.merge_weighting};
        out.trace = reduce(g, x, cache, m.theta_merge.at(block), m.theta_prune.at(block), cfg, ro, block + 1, observer);
        out.kept_fraction = kept_fraction(g, x, cfg, opt.mode);
    } else {
        out.trace.layer = block + 1;
        out.trace.kept = x.kept_count();
        out.kept_fraction = g.constant(Tensor<T>::scalar(T(1)));
    }
    out.trace.owner = x.owner;
    out.trace.kept_fraction = static_cast<double>(g.value(out.kept_fraction).item());
    if (opt.mode == ExecMode::inference) compact(g, x);
    mlp(g, x, p);
    return out;
}

template <class T>
Var classify(Graph<T>& g, const TokenState<T>& x, const BoundParams& p) {
    Var cls = ad::gather_rows(g, x.tokens, {0});
    Var h = ad::layer_norm(g, cls, p.norm_gamma, p.norm_beta);
    return ad::linear(g, h, p.head_weight, p.head_bias);
}

template <class T>
ForwardResult<T> model_forward(Graph<T>& g, const Tensor<T>& image, const ModelConfig& cfg, const BoundModel& m,
                               const ForwardOptions& opt, const ScoreObserver& observer = {}) {
    if (m.params.blocks.size() != cfg.blocks || m.theta_merge.size() != cfg.blocks ||
        m.theta_prune.size() != cfg.blocks) {
        throw std::invalid_argument("model_forward: thresholds must have length 2L");
    }
    ForwardResult<T> r;
    TokenState<T> x = patch_embed(g, image, cfg, m.params);
    for (std::size_t l = 0; l < cfg.blocks; ++l) {
        auto b = block_forward(g, x, m, l, cfg, opt, observer);
        r.kept_fraction.push_back(b.kept_fraction);
        r.trace.layers.push_back(std::move(b.trace));
    }
    r.logits = classify(g, x, m.params);
    r.r_flops = ad::r_flops<T>(g, r.kept_fraction, static_cast<double>(cfg.tokens()), static_cast<double>(cfg.embed_dim));
    r.state = std::move(x);
    return r;
}

template <class T>
std::vector<double> kept_fraction_values(const Graph<T>& g, const ForwardResult<T>& r) {
    std::vector<double> out;
    for (Var v : r.kept_fraction) out.push_back(static_cast<double>(g.value(v).item()));
    return out;
}

}  // namespace ltmp

#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "ltmp/autodiff.hpp"

namespace ltmp {

/// Multiply-add counts of one transformer block at `n` tokens and width `d`.
struct PhiBlock {
    double msa = 0;
    double mlp = 0;
    double block = 0;
};

/// phi_MSA = 4nd^2 + 2n^2 d, phi_MLP = 8nd^2. `n` may be fractional.
inline PhiBlock phi_block(double n, double d) {
    if (n < 0) throw std::invalid_argument("phi_block: negative token count");
    PhiBlock p;
    p.msa = 4.0 * n * d * d + 2.0 * n * n * d;
    p.mlp = 8.0 * n * d * d;
    p.block = p.msa + p.mlp;
    return p;
}

/// Fraction of unreduced block FLOPs, with the block share of the whole
/// network approximated as 1/L.
///
/// `kept` holds the kept fraction after each block's reduction (length L);
/// the fraction before block 1 is 1. `n` counts every token including CLS.
inline double r_flops(std::span<const double> kept, double n, double d) {
    if (kept.empty()) throw std::invalid_argument("r_flops: need at least one block");
    const double layers = static_cast<double>(kept.size());
    const double denom = 6.0 * n * d * d + n * n * d;
    double r = 0;
    double before = 1.0;
    for (double after : kept) {
        const double msa = 2.0 * before * n * d * d + (before * n) * (before * n) * d;
        const double mlp = 4.0 * after * n * d * d;
        r += (msa + mlp) / denom;
        before = after;
    }
    return r / layers;
}

/// dr/dkept_l for the expression above.
inline std::vector<double> r_flops_gradient(std::span<const double> kept, double n, double d) {
    const std::size_t layers = kept.size();
    const double scale = 1.0 / (static_cast<double>(layers) * (6.0 * n * d * d + n * n * d));
    std::vector<double> grad(layers, 0.0);
    for (std::size_t l = 0; l < layers; ++l) {
        grad[l] += 4.0 * n * d * d * scale;
        if (l + 1 < layers) grad[l] += (2.0 * n * d * d + 2.0 * kept[l] * n * n * d) * scale;
    }
    return grad;
}

namespace ad {

/// Differentiable r_FLOPs over per-block scalar kept fractions.
template <class T>
Var r_flops(Graph<T>& g, std::span<const Var> kept, double n, double d) {
    std::vector<double> values;
    values.reserve(kept.size());
    for (Var v : kept) values.push_back(static_cast<double>(g.value(v).item()));
    const double r = ltmp::r_flops(values, n, d);
    std::vector<Var> parents(kept.begin(), kept.end());
    return g.record(Tensor<T>::scalar(T(r)), kept, [parents, values, n, d](Graph<T>& gr, const Tensor<T>& go) {
        const auto grad = r_flops_gradient(values, n, d);
        for (std::size_t l = 0; l < parents.size(); ++l) {
            if (auto* gp = gr.grad_slot(parents[l])) (*gp)[0] += go[0] * T(grad[l]);
        }
    }, "r_flops");
}

}  // namespace ad

/// (r_target - r_FLOPs)^2
inline double reg_loss(double r, double r_target) { return (r_target - r) * (r_target - r); }

inline double total_loss(double ce, double reg, double lambda) { return ce + lambda * reg; }

/// Whole-network reduction factor including patch embedding and the single
/// classification head, which only ever processes the CLS token.
struct ExactFlopsShape {
    double tokens;       // n + 1
    double embed_dim;
    double patch_dim;    // p * p * C
    double classes;
};

inline double phi_patch_embed(const ExactFlopsShape& s) { return (s.tokens - 1.0) * s.patch_dim * s.embed_dim; }
inline double phi_head(const ExactFlopsShape& s) { return s.embed_dim * s.classes; }

inline double exact_r_flops(std::span<const double> kept, const ExactFlopsShape& s) {
    const double blk = phi_block(s.tokens, s.embed_dim).block;
    const double vit = phi_patch_embed(s) + static_cast<double>(kept.size()) * blk + phi_head(s);
    double used = phi_patch_embed(s) + phi_head(s);
    double before = 1.0;
    for (double after : kept) {
        used += phi_block(before * s.tokens, s.embed_dim).msa + phi_block(after * s.tokens, s.embed_dim).mlp;
        before = after;
    }
    return used / vit;
}

struct BlockFlops {
    double kept_fraction = 1;  // after this block's reduction
    double msa = 0;            // at the kept fraction entering the block
    double mlp = 0;            // at the kept fraction leaving the reduction
    double block = 0;
};

struct FlopsReport {
    std::vector<BlockFlops> blocks;
    double r_flops = 1;
    double total = 0;      // absolute block multiply-adds
    double baseline = 0;   // L * phi_BLK(n, d)
};

inline FlopsReport make_flops_report(std::span<const double> kept, double n, double d) {
    FlopsReport rep;
    double before = 1.0;
    for (double after : kept) {
        BlockFlops b;
        b.kept_fraction = after;
        b.msa = phi_block(before * n, d).msa;
        b.mlp = phi_block(after * n, d).mlp;
        b.block = b.msa + b.mlp;
        rep.total += b.block;
        rep.blocks.push_back(b);
        before = after;
    }
    rep.baseline = static_cast<double>(kept.size()) * phi_block(n, d).block;
    rep.r_flops = kept.empty() ? 1.0 : r_flops(kept, n, d);
    return rep;
}

inline nlohmann::json to_json(const FlopsReport& rep) {
    nlohmann::json blocks = nlohmann::json::array();
    for (std::size_t l = 0; l < rep.blocks.size(); ++l) {
        const auto& b = rep.blocks[l];
        blocks.push_back({{"layer", l + 1},
                          {"kept_fraction", b.kept_fraction},
                          {"phi_msa", b.msa},
                          {"phi_mlp", b.mlp},
                          {"phi_blk", b.block}});
    }
    return {{"blocks", blocks}, {"r_flops", rep.r_flops}, {"total_flops", rep.total}, {"baseline_flops", rep.baseline}};
}

}  // namespace ltmp

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ltmp/checkpoint.hpp"
#include "ltmp/dataset.hpp"
#include "ltmp/model.hpp"
#include "ltmp/ppm.hpp"

namespace ltmp {

// ---------------------------------------------------------------------------
// Kendall rank correlation
// ---------------------------------------------------------------------------

namespace detail {

/// Sorts v[lo, hi) with merge sort and returns the number of inversions.
inline std::uint64_t merge_count(std::vector<double>& v, std::vector<double>& tmp, std::size_t lo, std::size_t hi) {
    if (hi - lo < 2) return 0;
    const std::size_t mid = lo + (hi - lo) / 2;
    std::uint64_t swaps = merge_count(v, tmp, lo, mid) + merge_count(v, tmp, mid, hi);
    std::size_t i = lo, j = mid, k = lo;
    while (i < mid && j < hi) {
        if (v[j] < v[i]) {
            swaps += mid - i;
            tmp[k++] = v[j++];
        } else {
            tmp[k++] = v[i++];
        }
    }
    while (i < mid) tmp[k++] = v[i++];
    while (j < hi) tmp[k++] = v[j++];
    std::copy(tmp.begin() + static_cast<std::ptrdiff_t>(lo), tmp.begin() + static_cast<std::ptrdiff_t>(hi),
              v.begin() + static_cast<std::ptrdiff_t>(lo));
    return swaps;
}

/// Sum of t(t-1)/2 over runs of equal values in a sorted range.
template <class It, class Eq>
std::uint64_t tied_pairs(It first, It last, Eq eq) {
    std::uint64_t total = 0;
    while (first != last) {
        auto run = first + 1;
        while (run != last && eq(*first, *run)) ++run;
        const auto t = static_cast<std::uint64_t>(run - first);
        total += t * (t - 1) / 2;
        first = run;
    }
    return total;
}

}  // namespace detail

/// Kendall tau-b counts: n0 pairs, ties in x, ties in y, and concordant minus discordant.
struct KendallCounts {
    std::uint64_t pairs = 0;
    std::uint64_t ties_x = 0;
    std::uint64_t ties_y = 0;
    std::int64_t score = 0;   // concordant - discordant
};

inline double kendall_tau_from_counts(const KendallCounts& c) {
    if (c.ties_x == c.pairs || c.ties_y == c.pairs) {
        throw std::invalid_argument("kendall_tau: undefined for a constant input");
    }
    const double denom = std::sqrt(static_cast<double>(c.pairs - c.ties_x) * static_cast<double>(c.pairs - c.ties_y));
    return static_cast<double>(c.score) / denom;
}

/// Knight's O(n log n) counting.
inline KendallCounts kendall_counts(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw std::invalid_argument("kendall_tau: length mismatch");
    if (x.size() < 2) throw std::invalid_argument("kendall_tau: need at least two observations");
    const std::size_t n = x.size();
    std::vector<std::pair<double, double>> xy(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(x[i]) || !std::isfinite(y[i])) throw std::invalid_argument("kendall_tau: non-finite input");
        xy[i] = {x[i], y[i]};
    }
    std::sort(xy.begin(), xy.end());
    KendallCounts c;
    c.pairs = static_cast<std::uint64_t>(n) * (n - 1) / 2;
    c.ties_x = detail::tied_pairs(xy.begin(), xy.end(), [](const auto& a, const auto& b) { return a.first == b.first; });
    const std::uint64_t ties_xy = detail::tied_pairs(xy.begin(), xy.end(), [](const auto& a, const auto& b) { return a == b; });
    std::vector<double> ys(n), tmp(n);
    for (std::size_t i = 0; i < n; ++i) ys[i] = xy[i].second;
    const std::uint64_t swaps = detail::merge_count(ys, tmp, 0, n);
    c.ties_y = detail::tied_pairs(ys.begin(), ys.end(), [](double a, double b) { return a == b; });
    // concordant - discordant = pairs - ties_x - ties_y + ties_xy - 2 * discordant
    c.score = static_cast<std::int64_t>(c.pairs) - static_cast<std::int64_t>(c.ties_x) -
              static_cast<std::int64_t>(c.ties_y) + static_cast<std::int64_t>(ties_xy) -
              2 * static_cast<std::int64_t>(swaps);
    return c;
}

/// Tie-corrected Kendall tau (tau-b).
inline double kendall_tau(std::span<const double> x, std::span<const double> y) {
    return kendall_tau_from_counts(kendall_counts(x, y));
}

// ---------------------------------------------------------------------------
// Score correlation
// ---------------------------------------------------------------------------

struct CorrelationOptions {
    std::size_t k = 8;
    std::size_t samples = 0;            // 0 = whole dataset
    bool inject_identical = false;      // self-check: use importance for both vectors
};

struct LayerCorrelation {
    std::size_t layer = 0;
    double mean_tau = 0;
    std::size_t samples_used = 0;
    std::size_t skipped = 0;            // fewer than two A tokens, or a constant vector
    std::size_t clamped = 0;            // samples where fewer than k tokens were available
};

struct CorrelationReport {
    std::size_t k = 0;
    std::size_t samples = 0;
    std::vector<LayerCorrelation> layers;
};

/// Per-layer Kendall tau between importance and similarity scores of the
/// set-A tokens, computed per sample and then averaged, with the model run
/// in fixed-rate merge-then-prune mode.
inline CorrelationReport correlation_report(const Checkpoint& ck, const Dataset& ds, const CorrelationOptions& opt) {
    if (ds.empty()) throw std::invalid_argument("correlation_report: empty dataset");
    check_dataset_matches(ds, ck.config);
    ModelConfig cfg = ck.config;
    cfg.reduction_order = ReductionOrder::topk_both;
    cfg.topk = opt.k;
    const std::size_t count = opt.samples == 0 ? ds.size() : std::min(opt.samples, ds.size());

    CorrelationReport rep;
    rep.k = opt.k;
    rep.samples = count;
    rep.layers.resize(cfg.blocks);
    std::vector<double> sums(cfg.blocks, 0.0);
    for (std::size_t l = 0; l < cfg.blocks; ++l) rep.layers[l].layer = l + 1;

    for (std::size_t i = 0; i < count; ++i) {
        ScoreObserver observer = [&](const ScoreSnapshot& snap) {
            auto& row = rep.layers[snap.layer - 1];
            std::vector<double> imp, sim;
            for (std::size_t a = 0; a < snap.pairs.a_rows.size(); ++a) {
                if (snap.pairs.partner[a] == kNoPartner) continue;
                imp.push_back(snap.importance[snap.pairs.a_rows[a]]);
                sim.push_back(snap.pairs.similarity[a]);
            }
            if (imp.size() < opt.k) ++row.clamped;
            if (opt.inject_identical) sim = imp;
            if (imp.size() < 2) {
                ++row.skipped;
                return;
            }
            const auto counts = kendall_counts(imp, sim);
            if (counts.ties_x == counts.pairs || counts.ties_y == counts.pairs) {
                ++row.skipped;
                return;
            }
            sums[snap.layer - 1] += kendall_tau_from_counts(counts);
            ++row.samples_used;
        };
        Graph<double> g(false);
        BoundModel m = bind(g, ck.params, ck.thresholds, false, false);
        model_forward(g, ds.image(i), cfg, m, ForwardOptions{ExecMode::inference, false}, observer);
    }
    for (std::size_t l = 0; l < cfg.blocks; ++l) {
        auto& row = rep.layers[l];
        row.mean_tau = row.samples_used ? sums[l] / static_cast<double>(row.samples_used) : 0.0;
        if (row.clamped) {
            std::clog << "ltmp: layer " << row.layer << ": k=" << opt.k << " clamped for " << row.clamped
                      << " sample(s)\n";
        }
    }
    return rep;
}

inline nlohmann::json to_json(const CorrelationReport& rep) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : rep.layers) {
        layers.push_back({{"layer", l.layer},
                          {"mean_tau", l.mean_tau},
                          {"samples_used", l.samples_used},
                          {"skipped", l.skipped},
                          {"clamped", l.clamped}});
    }
    return {{"k", rep.k},
            {"samples", rep.samples},
            {"method", "tau-b per sample on set-A tokens, averaged over samples"},
            {"layers", layers}};
}

// ---------------------------------------------------------------------------
// Reduction count distribution
// ---------------------------------------------------------------------------

/// Quantile with linear interpolation between order statistics.
inline double quantile(std::vector<double> v, double q) {
    if (v.empty()) throw std::invalid_argument("quantile: empty input");
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct CountDistribution {
    std::map<std::size_t, std::size_t> histogram;   // count value -> samples
    double q1 = 0, median = 0, q3 = 0, mean = 0;
};

struct LayerDistribution {
    std::size_t layer = 0;
    CountDistribution merged;
    CountDistribution pruned;
};

struct KDistributionReport {
    std::size_t samples = 0;
    std::vector<LayerDistribution> layers;
    std::size_t max_removed = 0;   // largest per-sample total of merged + pruned over all layers
};

inline CountDistribution summarize_counts(const std::vector<std::size_t>& counts) {
    CountDistribution d;
    std::vector<double> v;
    for (auto c : counts) {
        ++d.histogram[c];
        v.push_back(static_cast<double>(c));
    }
    if (!v.empty()) {
        d.q1 = quantile(v, 0.25);
        d.median = quantile(v, 0.5);
        d.q3 = quantile(v, 0.75);
        double s = 0;
        for (double x : v) s += x;
        d.mean = s / static_cast<double>(v.size());
    }
    return d;
}

/// Per-layer histograms of how many tokens were merged and pruned, from inference runs.
inline KDistributionReport k_distribution_report(const Checkpoint& ck, const Dataset& ds, std::size_t samples = 0) {
    if (ds.empty()) throw std::invalid_argument("k_distribution_report: empty dataset");
    check_dataset_matches(ds, ck.config);
    const std::size_t count = samples == 0 ? ds.size() : std::min(samples, ds.size());
    const std::size_t layers = ck.config.blocks;
    std::vector<std::vector<std::size_t>> merged(layers), pruned(layers);
    KDistributionReport rep;
    rep.samples = count;
    for (std::size_t i = 0; i < count; ++i) {
        Graph<double> g(false);
        BoundModel m = bind(g, ck.params, ck.thresholds, false, false);
        auto r = model_forward(g, ds.image(i), ck.config, m, ForwardOptions{ExecMode::inference, false});
        std::size_t removed = 0;
        for (std::size_t l = 0; l < layers; ++l) {
            merged[l].push_back(r.trace.layers[l].merged);
            pruned[l].push_back(r.trace.layers[l].pruned);
            removed += r.trace.layers[l].merged + r.trace.layers[l].pruned;
        }
        rep.max_removed = std::max(rep.max_removed, removed);
    }
    for (std::size_t l = 0; l < layers; ++l) {
        rep.layers.push_back({l + 1, summarize_counts(merged[l]), summarize_counts(pruned[l])});
    }
    return rep;
}

inline nlohmann::json to_json(const CountDistribution& d) {
    nlohmann::json hist = nlohmann::json::object();
    for (const auto& [k, n] : d.histogram) hist[std::to_string(k)] = n;
    return {{"histogram", hist}, {"q1", d.q1}, {"median", d.median}, {"q3", d.q3}, {"mean", d.mean}};
}

inline nlohmann::json to_json(const KDistributionReport& rep) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : rep.layers) {
        layers.push_back({{"layer", l.layer}, {"merged", to_json(l.merged)}, {"pruned", to_json(l.pruned)}});
    }
    return {{"samples", rep.samples}, {"max_removed", rep.max_removed}, {"layers", layers}};
}

// ---------------------------------------------------------------------------
// Token retention rendering
// ---------------------------------------------------------------------------

struct RenderOptions {
    std::size_t scale = 4;                 // output pixels per input pixel
    std::uint8_t grid_value = 255;         // colour of the 1-pixel lines between patches
};

/// Deterministic colour for a merge group, keyed by the group's origin id.
inline std::array<std::uint8_t, 3> group_color(std::size_t id) {
    std::uint64_t state = 0x5EED0000ull + id;
    const std::uint64_t h = splitmix64(state);
    // Keep every channel away from black so groups never read as pruned.
    return {static_cast<std::uint8_t>(64 + (h & 0xBF)), static_cast<std::uint8_t>(64 + ((h >> 8) & 0xBF)),
            static_cast<std::uint8_t>(64 + ((h >> 16) & 0xBF))};
}

/// Renders the patch grid of `image` (H x W x 3 bytes). `owner[1 + p]` names the
/// group of patch p: -1 pruned (black), a group with two or more members gets
/// its group colour, a singleton shows its own pixels.
inline RgbImage render_tokens(std::span<const std::uint8_t> image, const ModelConfig& cfg, std::span<const int> owner,
                              const RenderOptions& ro = {}) {
    if (cfg.channels != 3) throw std::invalid_argument("render_tokens: RGB images only");
    if (image.size() != cfg.image_size * cfg.image_size * 3) throw std::invalid_argument("render_tokens: image size mismatch");
    if (owner.size() != cfg.tokens()) throw std::invalid_argument("render_tokens: owner map length");
    const std::size_t p = cfg.patch_size;
    const std::size_t grid = cfg.grid();
    const std::size_t cell = p * ro.scale;
    const std::size_t side = grid * (cell + 1) + 1;
    RgbImage out(side, side, ro.grid_value);

    std::map<int, std::size_t> group_size;
    for (std::size_t t = 1; t < owner.size(); ++t)
        if (owner[t] >= 0) ++group_size[owner[t]];

    for (std::size_t gy = 0; gy < grid; ++gy)
        for (std::size_t gx = 0; gx < grid; ++gx) {
            const int o = owner[1 + gy * grid + gx];
            const bool pruned = o < 0;
            const bool grouped = !pruned && group_size[o] > 1;
            const auto color = grouped ? group_color(static_cast<std::size_t>(o)) : std::array<std::uint8_t, 3>{0, 0, 0};
            for (std::size_t y = 0; y < cell; ++y)
                for (std::size_t x = 0; x < cell; ++x) {
                    auto* dst = out.at(1 + gx * (cell + 1) + x, 1 + gy * (cell + 1) + y);
                    if (pruned || grouped) {
                        for (std::size_t c = 0; c < 3; ++c) dst[c] = color[c];
                    } else {
                        const std::size_t iy = gy * p + y / ro.scale;
                        const std::size_t ix = gx * p + x / ro.scale;
                        for (std::size_t c = 0; c < 3; ++c) dst[c] = image[(iy * cfg.image_size + ix) * 3 + c];
                    }
                }
        }
    return out;
}

inline std::vector<int> identity_owner(std::size_t tokens) {
    std::vector<int> o(tokens);
    for (std::size_t i = 0; i < tokens; ++i) o[i] = static_cast<int>(i);
    return o;
}

struct Visualization {
    RgbImage input;
    RgbImage patchified;
    std::vector<RgbImage> layers;
    ReductionTrace trace;
};

/// Runs one image in inference mode and renders the surviving tokens after every block.
inline Visualization visualize_tokens(const Checkpoint& ck, const Dataset& ds, std::size_t index,
                                      const RenderOptions& ro = {}) {
    check_dataset_matches(ds, ck.config);
    if (index >= ds.size()) throw std::out_of_range("visualize: image index " + std::to_string(index));
    const auto raw = ds.raw(index);
    Graph<double> g(false);
    BoundModel m = bind(g, ck.params, ck.thresholds, false, false);
    auto r = model_forward(g, ds.image(index), ck.config, m, ForwardOptions{ExecMode::inference, false});

    Visualization v;
    v.input = RgbImage(ck.config.image_size, ck.config.image_size);
    v.input.pixels.assign(raw.begin(), raw.end());
    const auto ident = identity_owner(ck.config.tokens());
    v.patchified = render_tokens(raw, ck.config, ident, ro);
    for (const auto& layer : r.trace.layers) v.layers.push_back(render_tokens(raw, ck.config, layer.owner, ro));
    v.trace = std::move(r.trace);
    return v;
}

}  // namespace ltmp

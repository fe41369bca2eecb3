#include <gtest/gtest.h>

#include "ltmp/analysis.hpp"
#include "test_support.hpp"

using namespace ltmp;

namespace {

/// O(n^2) tau-b straight from the pair definition.
double brute_force_tau(const std::vector<double>& x, const std::vector<double>& y) {
    long long conc = 0, disc = 0, tx = 0, ty = 0, n0 = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t j = i + 1; j < x.size(); ++j) {
            ++n0;
            const double dx = x[i] - x[j];
            const double dy = y[i] - y[j];
            if (dx == 0) ++tx;
            if (dy == 0) ++ty;
            if (dx * dy > 0) ++conc;
            if (dx * dy < 0) ++disc;
        }
    return static_cast<double>(conc - disc) / std::sqrt(static_cast<double>(n0 - tx) * static_cast<double>(n0 - ty));
}

Checkpoint tiny_checkpoint(std::uint64_t seed) {
    auto ck = make_checkpoint(test_util::tiny_config(), seed);
    Rng rng(seed);
    ck.params = test_util::random_params(ck.config, rng);
    return ck;
}

Dataset tiny_dataset(std::size_t samples) {
    SynthDatasetSpec spec;
    spec.samples = samples;
    spec.image_size = 16;
    spec.classes = 4;
    spec.seed = 21;
    return generate_dataset(spec);
}

}  // namespace

// --- Kendall tau -----------------------------------------------------------

TEST(Kendall, Examples) {
    const std::vector<double> a{1, 2, 3, 4}, rev{4, 3, 2, 1};
    EXPECT_EQ(kendall_tau(a, a), 1.0);
    EXPECT_EQ(kendall_tau(a, rev), -1.0);
    const std::vector<double> x{1, 2, 3}, y{1, 3, 2};
    EXPECT_NEAR(kendall_tau(x, y), 1.0 / 3.0, 1e-15);
}

TEST(Kendall, TieCorrection) {
    const std::vector<double> x{1, 1, 2, 3}, y{1, 2, 2, 3};
    // n0 = 6, one tie in x, one tie in y, C = 4, D = 0
    EXPECT_NEAR(kendall_tau(x, y), 4.0 / 5.0, 1e-15);
}

TEST(Kendall, InvalidInputs) {
    const std::vector<double> c{2, 2, 2}, v{1, 2, 3}, one{1};
    EXPECT_THROW(kendall_tau(c, v), std::invalid_argument);
    EXPECT_THROW(kendall_tau(one, one), std::invalid_argument);
    EXPECT_THROW(kendall_tau(v, std::vector<double>{1, 2}), std::invalid_argument);
}

TEST(Kendall, MatchesBruteForceWithTies) {
    Rng rng(1);
    for (int t = 0; t < 300; ++t) {
        const std::size_t n = 2 + rng.below(40);
        std::vector<double> x(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = static_cast<double>(rng.below(6));
            y[i] = t % 2 ? rng.uniform() : static_cast<double>(rng.below(4));
        }
        const bool constant = std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; }) ||
                              std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; });
        if (constant) continue;
        EXPECT_NEAR(kendall_tau(x, y), brute_force_tau(x, y), 1e-12);
    }
}

TEST(Kendall, SymmetricAndBounded) {
    Rng rng(2);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> x(20), y(20);
        for (auto& v : x) v = rng.uniform();
        for (auto& v : y) v = rng.uniform();
        const double tau = kendall_tau(x, y);
        EXPECT_EQ(tau, kendall_tau(y, x));
        EXPECT_LE(std::abs(tau), 1.0);
    }
}

// --- quantiles and distributions -------------------------------------------

TEST(Quantile, LinearInterpolation) {
    EXPECT_EQ(quantile({1, 2, 3, 4}, 0.5), 2.5);
    EXPECT_EQ(quantile({5}, 0.75), 5.0);
    EXPECT_EQ(quantile({4, 1, 3, 2, 0}, 0.25), 1.0);
    EXPECT_THROW(quantile({}, 0.5), std::invalid_argument);
}

TEST(KDistribution, TopkHistogramIsAPointMass) {
    auto ck = tiny_checkpoint(3);
    ck.config.reduction_order = ReductionOrder::topk_both;
    ck.config.topk = 2;
    const auto rep = k_distribution_report(ck, tiny_dataset(6));
    EXPECT_EQ(rep.samples, 6u);
    for (const auto& l : rep.layers) {
        EXPECT_EQ(l.merged.histogram.size(), 1u);
        EXPECT_EQ(l.merged.histogram.at(2), 6u);
        EXPECT_EQ(l.pruned.median, 2.0);
    }
    EXPECT_EQ(rep.max_removed, 8u);
}

TEST(KDistribution, EmptyDatasetThrows) {
    EXPECT_THROW(k_distribution_report(tiny_checkpoint(3), Dataset{16, 16, 3, {}, {}}), std::invalid_argument);
}

// --- correlation -----------------------------------------------------------

TEST(Correlation, IdenticalVectorsGiveOne) {
    CorrelationOptions opt;
    opt.k = 1;
    opt.samples = 4;
    opt.inject_identical = true;
    const auto rep = correlation_report(tiny_checkpoint(4), tiny_dataset(4), opt);
    ASSERT_EQ(rep.layers.size(), 2u);
    for (const auto& l : rep.layers) {
        EXPECT_EQ(l.samples_used, 4u);
        EXPECT_NEAR(l.mean_tau, 1.0, 1e-15);
    }
}

TEST(Correlation, ValuesAreBoundedAndDeterministic) {
    CorrelationOptions opt;
    opt.k = 2;
    opt.samples = 5;
    const auto a = correlation_report(tiny_checkpoint(5), tiny_dataset(5), opt);
    const auto b = correlation_report(tiny_checkpoint(5), tiny_dataset(5), opt);
    EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
    for (const auto& l : a.layers) EXPECT_LE(std::abs(l.mean_tau), 1.0);
}

// --- rendering -------------------------------------------------------------

TEST(Render, UnreducedEqualsPatchified) {
    const auto ck = make_checkpoint(test_util::tiny_config(), 6);
    const auto ds = tiny_dataset(2);
    const auto v = visualize_tokens(ck, ds, 1);
    ASSERT_EQ(v.layers.size(), 2u);
    for (const auto& img : v.layers) EXPECT_EQ(img, v.patchified);
    EXPECT_EQ(v.patchified.width, 4u * (4 * 4 + 1) + 1);
    EXPECT_EQ(v.input.pixels.size(), 16u * 16 * 3);
}

TEST(Render, PrunedPatchesAreBlackAndGroupsShareAColour) {
    const auto cfg = test_util::tiny_config();
    const auto ds = tiny_dataset(1);
    auto owner = identity_owner(cfg.tokens());
    owner[1] = -1;        // patch 0 pruned
    owner[3] = 4;         // patch 2 merged into patch 3
    RenderOptions ro;
    ro.scale = 1;
    const auto img = render_tokens(ds.raw(0), cfg, owner, ro);
    const std::uint8_t* pruned = img.at(1, 1);
    EXPECT_EQ(pruned[0] + pruned[1] + pruned[2], 0);
    const auto colour = group_color(4);
    const std::uint8_t* a = img.at(1 + 2 * 5, 1);
    const std::uint8_t* b = img.at(1 + 3 * 5, 1);
    for (int c = 0; c < 3; ++c) {
        EXPECT_EQ(a[c], colour[c]);
        EXPECT_EQ(b[c], colour[c]);
        EXPECT_GE(colour[c], 64);
    }
    EXPECT_EQ(img.at(0, 0)[0], 255);   // grid line
}

TEST(Render, EverythingPrunedIsBlackInsideCells) {
    const auto cfg = test_util::tiny_config();
    const auto ds = tiny_dataset(1);
    std::vector<int> owner(cfg.tokens(), -1);
    owner[0] = 0;
    RenderOptions ro;
    ro.scale = 2;
    const auto img = render_tokens(ds.raw(0), cfg, owner, ro);
    const std::size_t cell = 8;
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
            const bool line = x % (cell + 1) == 0 || y % (cell + 1) == 0;
            EXPECT_EQ(img.at(x, y)[1], line ? 255 : 0);
        }
}

TEST(Render, RejectsBadInputs) {
    const auto cfg = test_util::tiny_config();
    const auto ds = tiny_dataset(1);
    EXPECT_THROW(render_tokens(ds.raw(0), cfg, identity_owner(3)), std::invalid_argument);
    EXPECT_THROW(visualize_tokens(make_checkpoint(cfg, 1), ds, 5), std::out_of_range);
}

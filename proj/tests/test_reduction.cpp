#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ltmp/reduction.hpp"
#include "test_support.hpp"

using namespace ltmp;
using ltmp::test_util::random_tensor;

namespace {

TokenState<double> make_state(Graph<double>& g, const Tensor<double>& tokens, std::vector<double> sizes = {}) {
    const std::size_t n = tokens.rows();
    TokenState<double> x;
    x.tokens = g.constant(tokens);
    Tensor<double> ones({n});
    ones.fill(1);
    x.mask = g.constant(ones);
    x.kept.assign(n, 1);
    x.sizes = sizes.empty() ? std::vector<double>(n, 1.0) : std::move(sizes);
    x.origin.resize(n);
    std::iota(x.origin.begin(), x.origin.end(), std::size_t{0});
    x.owner.resize(n);
    std::iota(x.owner.begin(), x.owner.end(), 0);
    return x;
}

/// Row-stochastic matrix with zero columns where the mask is 0.
Tensor<double> random_masked_probs(std::size_t n, const std::vector<double>& mask, Rng& rng) {
    const auto a = random_tensor({n, n}, rng, 1.5);
    return masked_softmax_rows(a, std::span<const double>(mask));
}

double cosine(std::span<const double> a, std::span<const double> b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return ab / std::sqrt(aa * bb);
}

}  // namespace

// --- threshold masks -------------------------------------------------------

TEST(ThresholdMask, StrictComparison) {
    const std::vector<double> s{0.7, 0.1, 0.4};
    EXPECT_EQ(threshold_mask(s, 0.4), (std::vector<double>{1, 0, 0}));
}

TEST(ThresholdMask, BelowMinimumKeepsAll) {
    const std::vector<double> s{0.7, 0.1, 0.4};
    EXPECT_EQ(threshold_mask(s, 0.05), (std::vector<double>{1, 1, 1}));
}

TEST(ThresholdMask, AtMaximumDropsArgmaxToo) {
    const std::vector<double> s{0.7, 0.1, 0.4};
    EXPECT_EQ(threshold_mask(s, 0.7), (std::vector<double>{0, 0, 0}));
}

TEST(SteGradient, AtThresholdIsMinusTwoPointFive) {
    const auto d = threshold_mask_ste_grad(0.3, 0.3, 0.1);
    EXPECT_NEAR(d.d_theta, -2.5, 1e-15);
    EXPECT_NEAR(d.d_score, 2.5, 1e-15);
}

TEST(SteGradient, ScoreAndThresholdDerivativesAreOpposite) {
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        const auto d = threshold_mask_ste_grad(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.01, 1));
        EXPECT_EQ(d.d_score, -d.d_theta);
        EXPECT_LE(d.d_theta, 0.0);
    }
}

TEST(SteGradient, SaturatesFarFromThreshold) {
    const auto d = threshold_mask_ste_grad(5.0, 0.0, 0.1);
    EXPECT_LT(std::abs(d.d_theta), 1e-18);
    EXPECT_THROW(threshold_mask_ste_grad(0, 0, 0), std::invalid_argument);
}

TEST(UpdateMask, Examples) {
    EXPECT_EQ(update_mask(std::vector<double>{1, 0, 1}, std::vector<double>{0, 1, 1}), (std::vector<double>{0, 0, 1}));
    const std::vector<double> d{0, 1, 0, 1};
    EXPECT_EQ(update_mask(std::vector<double>{1, 1, 1, 1}, d), d);
}

TEST(UpdateMask, NeverIncreases) {
    Rng rng(2);
    for (int t = 0; t < 500; ++t) {
        std::vector<double> prev(8), dec(8);
        for (auto& v : prev) v = static_cast<double>(rng.below(2));
        for (auto& v : dec) v = static_cast<double>(rng.below(2));
        const auto out = update_mask(prev, dec);
        for (std::size_t i = 0; i < 8; ++i) EXPECT_LE(out[i], prev[i]);
    }
}

TEST(ThresholdGate, RelaxedThetaDerivativeIsNeverPositive) {
    Rng rng(3);
    for (int t = 0; t < 100; ++t) {
        Graph<double> g;
        Var s = g.leaf(random_tensor({6}, rng, 0.05), false);
        Var th = g.leaf(Tensor<double>::scalar(rng.uniform(-0.1, 0.1)), true);
        Var gate = ad::threshold_gate(g, s, th, 0.1, {1, 2, 3, 4, 5}, ad::GateSense::keep_above, true);
        g.backward(ad::sum(g, gate));
        EXPECT_LE(g.grad(th).item(), 0.0);
        EXPECT_EQ(g.value(gate)[0], 1.0);
    }
}

// --- importance scores -----------------------------------------------------

TEST(ClassAttention, UniformRowScoresOneThird) {
    Tensor<double> s({3, 3});
    s.fill(1.0 / 3.0);
    const std::vector<Tensor<double>> heads{s};
    for (double v : class_attention_scores<double>(heads)) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(ClassAttention, MaskedColumnScoresZero) {
    Rng rng(4);
    const std::vector<double> mask{1, 1, 0, 1};
    const std::vector<Tensor<double>> heads{random_masked_probs(4, mask, rng), random_masked_probs(4, mask, rng)};
    EXPECT_EQ(class_attention_scores<double>(heads)[2], 0.0);
}

TEST(ClassAttention, MatchesIndexAndSum) {
    Rng rng(5);
    const std::vector<double> mask{1, 1, 0, 1, 1, 0, 1};
    std::vector<Tensor<double>> heads;
    for (int h = 0; h < 3; ++h) heads.push_back(random_masked_probs(7, mask, rng));
    const auto s = class_attention_scores<double>(heads);
    for (std::size_t i = 0; i < 7; ++i) {
        double oracle = 0;
        for (const auto& head : heads) oracle += head.values()[i];
        EXPECT_NEAR(s[i], oracle, 1e-12);
    }
}

TEST(MeanColumn, UniformTwoTokens) {
    Tensor<double> s({2, 2});
    s.fill(0.5);
    const std::vector<Tensor<double>> heads{s};
    const std::vector<double> w{1, 1};
    for (double v : mean_column_attention_scores<double>(heads, w)) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(MeanColumn, SumsToOneForOneHead) {
    Rng rng(6);
    const std::vector<double> mask{1, 0, 1, 1, 0, 1};
    const std::vector<Tensor<double>> heads{random_masked_probs(6, mask, rng)};
    const auto s = mean_column_attention_scores<double>(heads, mask);
    EXPECT_NEAR(std::accumulate(s.begin(), s.end(), 0.0), 1.0, 1e-12);
}

TEST(MeanColumn, MatchesNaiveDoubleSum) {
    Rng rng(7);
    const std::vector<double> mask{1, 1, 0, 1, 0, 1, 1, 1};
    std::vector<Tensor<double>> heads;
    for (int h = 0; h < 4; ++h) heads.push_back(random_masked_probs(8, mask, rng));
    const auto s = mean_column_attention_scores<double>(heads, mask);
    const double kept = 6.0;
    for (std::size_t i = 0; i < 8; ++i) {
        double oracle = 0;
        for (const auto& head : heads)
            for (std::size_t k = 0; k < 8; ++k)
                if (mask[k] == 1.0) oracle += head(k, i);
        oracle /= 4.0 * kept;
        EXPECT_NEAR(s[i], oracle, 1e-12);
        if (mask[i] == 0.0) EXPECT_EQ(s[i], 0.0);
    }
}

// --- bipartite similarity --------------------------------------------------

TEST(Bipartite, IdenticalTokensHaveSimilarityOne) {
    // rows: CLS, a (-> A), b (-> B) with a == b
    const auto keys = Tensor<double>::from_rows({{5, -1}, {0.3, 0.4}, {0.3, 0.4}});
    const std::vector<std::size_t> kept{0, 1, 2};
    const auto r = bipartite_similarity(keys, kept);
    ASSERT_EQ(r.a_rows, (std::vector<std::size_t>{1}));
    EXPECT_EQ(r.b_rows, (std::vector<std::size_t>{0, 2}));
    EXPECT_EQ(r.partner[0], 2u);
    EXPECT_NEAR(r.similarity[0], 1.0, 1e-15);
}

TEST(Bipartite, OrthogonalKeysScoreZero) {
    Tensor<double> keys({7, 8});
    for (std::size_t r = 0; r < 7; ++r) keys(r, r) = 1.0 + static_cast<double>(r);
    const std::vector<std::size_t> kept{0, 1, 2, 3, 4, 5, 6};
    for (double v : bipartite_similarity(keys, kept).similarity) EXPECT_EQ(v, 0.0);
}

TEST(Bipartite, MatchesExhaustivePairwiseOracle) {
    Rng rng(8);
    for (int t = 0; t < 50; ++t) {
        const auto keys = random_tensor({7, 5}, rng);
        const std::vector<std::size_t> kept{0, 1, 2, 3, 4, 5, 6};
        const auto r = bipartite_similarity(keys, kept);
        EXPECT_EQ(r.a_rows, (std::vector<std::size_t>{1, 3, 5}));
        for (std::size_t i = 0; i < r.a_rows.size(); ++i) {
            double best = -2;
            std::size_t arg = 0;
            for (std::size_t b : {2u, 4u, 6u}) {
                const double c = cosine(keys.row(r.a_rows[i]), keys.row(b));
                if (c > best) {
                    best = c;
                    arg = b;
                }
            }
            EXPECT_NEAR(r.similarity[i], best, 1e-12);
            EXPECT_EQ(r.partner[i], arg);
        }
    }
}

TEST(Bipartite, ZeroNormKeyIsNeverMerged) {
    auto keys = Tensor<double>::from_rows({{1, 0}, {0, 0}, {1, 1}, {1, 1}, {2, 1}});
    const std::vector<std::size_t> kept{0, 1, 2, 3, 4};
    const auto r = bipartite_similarity(keys, kept);
    EXPECT_EQ(r.partner[0], kNoPartner);
    EXPECT_EQ(r.similarity[0], -1.0);
}

TEST(Bipartite, TooFewTokensGivesEmptyResult) {
    const auto keys = Tensor<double>::from_rows({{1, 0}, {0, 1}});
    const std::vector<std::size_t> kept{0, 1};
    EXPECT_TRUE(bipartite_similarity(keys, kept).a_rows.empty());
}

TEST(Bipartite, KeysAreAveragedOverHeads) {
    const auto k = Tensor<double>::from_rows({{1, 2, 3, 4}, {0, 0, 2, 2}});
    EXPECT_EQ(head_mean(k, 2), Tensor<double>::from_rows({{2, 3}, {1, 1}}));
}

// --- merge and prune -------------------------------------------------------

TEST(Merge, ThetaOneMergesNothing) {
    Graph<double> g;
    const auto tokens = Tensor<double>::from_rows({{1, 0}, {1, 1}, {1, 1}, {0, 1}, {0, 1}});
    auto x = make_state(g, tokens);
    const std::vector<std::size_t> kept{0, 1, 2, 3, 4};
    const auto pairs = bipartite_similarity(tokens, kept);
    Var sims = ad::pair_cosine(g, x.tokens, pairs);
    Var theta = g.constant(Tensor<double>::scalar(1.0));
    EXPECT_TRUE(merge_tokens(g, x, pairs, sims, theta, {}).empty());
    EXPECT_EQ(x.kept_count(), 5u);
}

TEST(Merge, EqualTokensKeepValueAndDoubleSize) {
    Graph<double> g;
    const auto tokens = Tensor<double>::from_rows({{9, 9}, {0.5, 2}, {0.5, 2}});
    auto x = make_state(g, tokens);
    const std::vector<std::size_t> kept{0, 1, 2};
    const auto pairs = bipartite_similarity(tokens, kept);
    Var sims = ad::pair_cosine(g, x.tokens, pairs);
    Var theta = g.constant(Tensor<double>::scalar(0.5));
    const auto merged = merge_tokens(g, x, pairs, sims, theta, {});
    ASSERT_EQ(merged.size(), 1u);
    EXPECT_EQ(merged[0].source, 1u);
    EXPECT_EQ(merged[0].destination, 2u);
    EXPECT_EQ(g.value(x.tokens)(2, 0), 0.5);
    EXPECT_EQ(g.value(x.tokens)(2, 1), 2.0);
    EXPECT_EQ(x.sizes[2], 2.0);
    EXPECT_EQ(g.value(x.mask)[1], 0.0);
    EXPECT_EQ(x.owner[1], 2);
}

TEST(Merge, SizeWeightedAverage) {
    Graph<double> g;
    const double v = 1.0, w = 2.0;   // parallel vectors: cosine 1
    const auto tokens = Tensor<double>::from_rows({{-5, 1}, {v, v}, {w, w}});
    auto x = make_state(g, tokens, {1, 1, 3});
    const std::vector<std::size_t> kept{0, 1, 2};
    const auto pairs = bipartite_similarity(tokens, kept);
    Var sims = ad::pair_cosine(g, x.tokens, pairs);
    merge_tokens(g, x, pairs, sims, g.constant(Tensor<double>::scalar(0.9)), {});
    EXPECT_NEAR(g.value(x.tokens)(2, 0), (3 * w + v) / 4, 1e-15);
    EXPECT_EQ(x.sizes[2], 4.0);
    EXPECT_EQ(x.kept_mass(), 5.0);
}

TEST(Merge, PairwiseMeanOption) {
    Graph<double> g;
    const auto tokens = Tensor<double>::from_rows({{-5, 1}, {1, 1}, {2, 2}});
    auto x = make_state(g, tokens, {1, 1, 3});
    const std::vector<std::size_t> kept{0, 1, 2};
    const auto pairs = bipartite_similarity(tokens, kept);
    Var sims = ad::pair_cosine(g, x.tokens, pairs);
    ReductionOptions opt;
    opt.weighting = MergeWeighting::pairwise_mean;
    merge_tokens(g, x, pairs, sims, g.constant(Tensor<double>::scalar(0.9)), opt);
    EXPECT_NEAR(g.value(x.tokens)(2, 0), 1.5, 1e-15);
}

TEST(Merge, ManyToOneAppliedInSourceOrder) {
    Graph<double> g;
    // A = rows 1, 3; B = rows 0 (CLS), 2. Both A rows pick row 2.
    const auto tokens = Tensor<double>::from_rows({{-1, 0}, {1, 1}, {2, 2}, {4, 4}});
    auto x = make_state(g, tokens);
    const std::vector<std::size_t> kept{0, 1, 2, 3};
    const auto pairs = bipartite_similarity(tokens, kept);
    Var sims = ad::pair_cosine(g, x.tokens, pairs);
    const auto merged = merge_tokens(g, x, pairs, sims, g.constant(Tensor<double>::scalar(0.5)), {});
    ASSERT_EQ(merged.size(), 2u);
    EXPECT_EQ(merged[0].source, 1u);
    EXPECT_EQ(merged[1].source, 3u);
    EXPECT_NEAR(g.value(x.tokens)(2, 0), (1.0 + 2.0 + 4.0) / 3.0, 1e-15);
    EXPECT_EQ(x.sizes[2], 3.0);
}

TEST(Prune, ThetaZeroPrunesNothing) {
    Graph<double> g;
    auto x = make_state(g, Tensor<double>({4, 2}));
    Var s = g.constant(Tensor<double>::vector({0.4, 0.1, 0.2, 0.3}));
    EXPECT_EQ(prune_tokens(g, x, s, g.constant(Tensor<double>::scalar(0.0)), {}), 0u);
}

TEST(Prune, ThetaAtMaxPrunesAllButCls) {
    Graph<double> g;
    auto x = make_state(g, Tensor<double>({4, 2}));
    Var s = g.constant(Tensor<double>::vector({0.05, 0.1, 0.2, 0.3}));
    EXPECT_EQ(prune_tokens(g, x, s, g.constant(Tensor<double>::scalar(0.3)), {}), 3u);
    EXPECT_EQ(x.kept_rows(), (std::vector<std::size_t>{0}));
    EXPECT_EQ(g.value(x.mask)[0], 1.0);
    EXPECT_EQ(x.pruned_mass, 3.0);
}

TEST(Prune, PrunedSetIsScoresAtOrBelowTheta) {
    Rng rng(9);
    for (int t = 0; t < 200; ++t) {
        Graph<double> g;
        auto x = make_state(g, Tensor<double>({9, 2}));
        Tensor<double> s({9});
        for (auto& v : s.values()) v = static_cast<double>(rng.below(10)) / 10.0;   // ties likely
        const double th = static_cast<double>(rng.below(10)) / 10.0;
        prune_tokens(g, x, g.constant(s), g.constant(Tensor<double>::scalar(th)), {});
        for (std::size_t i = 1; i < 9; ++i) EXPECT_EQ(x.kept[i] == 0, s[i] <= th);
        EXPECT_EQ(x.kept[0], 1);
    }
}

// --- top-k -----------------------------------------------------------------

TEST(Topk, Examples) {
    const std::vector<double> s{3, 1, 2};
    EXPECT_EQ(topk_select(s, 2, TopkOrder::largest), (std::vector<std::size_t>{0, 2}));
    EXPECT_TRUE(topk_select(s, 0, TopkOrder::largest).empty());
    const std::vector<double> tied{5, 5, 1};
    EXPECT_EQ(topk_select(tied, 1, TopkOrder::largest), (std::vector<std::size_t>{0}));
    EXPECT_EQ(topk_select(s, 1, TopkOrder::smallest), (std::vector<std::size_t>{1}));
}

TEST(Topk, InvalidK) {
    const std::vector<double> s{3, 1, 2};
    EXPECT_THROW(topk_select(s, -1, TopkOrder::largest), std::invalid_argument);
    EXPECT_THROW(topk_select(s, 4, TopkOrder::largest), std::invalid_argument);
}

TEST(Topk, PlantedThresholdSelectsTheSameSet) {
    Rng rng(10);
    for (int t = 0; t < 500; ++t) {
        std::vector<double> s(12);
        for (auto& v : s) v = rng.uniform();
        const auto k = static_cast<std::ptrdiff_t>(rng.below(12));
        auto sorted = s;
        std::sort(sorted.begin(), sorted.end(), std::greater<>());
        const double th = k == 0 ? sorted[0] : (sorted[k - 1] + sorted[k]) / 2.0;
        const auto mask = threshold_mask(s, th);
        std::vector<std::size_t> by_threshold;
        for (std::size_t i = 0; i < s.size(); ++i)
            if (mask[i] == 1.0) by_threshold.push_back(i);
        EXPECT_EQ(by_threshold, topk_select(s, k, TopkOrder::largest));
    }
}

TEST(Trace, JsonLinesHaveOneRecordPerLayer) {
    ReductionTrace t;
    t.layers.push_back(LayerTrace{1, 2, 1, 3, 0.5, {{3, 2}, {5, 4}}, {0, 1, -1}});
    t.layers.push_back(LayerTrace{2, 0, 0, 3, 0.5, {}, {0, 1, -1}});
    const auto text = to_json_lines(t, 7);
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
    const auto first = nlohmann::json::parse(text.substr(0, text.find('\n')));
    EXPECT_EQ(first["sample"], 7);
    EXPECT_EQ(first["merges"][1][0], 5);
}

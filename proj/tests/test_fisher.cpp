#include <cmath>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "srn/fisher.hpp"

using namespace srn;

namespace {

HmmParams random_hmm(Rng& rng, std::size_t K, std::size_t D) {
    Vector x(fisher_score_length(K, D));
    for (auto& v : x) v = rng.uniform(-1.0, 1.0);
    auto h = from_unconstrained(K, D, x.span());
    for (auto& var : h.variances)
        for (auto& v : var) v = rng.uniform(0.3, 2.0);
    return h;
}

Dataset hmm_dataset(const HmmParams& h, std::size_t n, std::size_t T, Rng& rng) {
    Dataset ds;
    ds.dim = h.dim;
    for (std::size_t i = 0; i < n; ++i) {
        auto s = sample_hmm(h, T, rng, "h" + std::to_string(i));
        s.label = 0;
        ds.series.push_back(std::move(s));
    }
    return ds;
}

}  // namespace

TEST(HmmLoglik, SingleStateIsSumOfGaussians) {
    Rng rng(1);
    HmmParams h = random_hmm(rng, 1, 2);
    const auto s = oracle::random_series(rng, 6, 2);
    double expect = 0.0;
    for (const auto& f : s.frames) {
        for (std::size_t d = 0; d < 2; ++d) {
            const double diff = f[d] - h.means[0][d], var = h.variances[0][d];
            expect += -0.5 * (std::log(2.0 * M_PI * var) + diff * diff / var);
        }
    }
    EXPECT_NEAR(hmm_loglik(h, s), expect, 1e-10);
}

TEST(HmmLoglik, MatchesPathEnumeration) {
    Rng rng(2);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t K = 1 + rng.index(3), D = 1 + rng.index(2), T = 1 + rng.index(5);
        const auto h = random_hmm(rng, K, D);
        const auto s = oracle::random_series(rng, T, D);
        EXPECT_NEAR(hmm_loglik(h, s), oracle::hmm_loglik_enumerate(h, s), 1e-10) << K << " " << T;
    }
}

TEST(HmmLoglik, LongSeriesStaysFinite) {
    Rng rng(3);
    const auto h = random_hmm(rng, 3, 2);
    const auto s = sample_hmm(h, 10000, rng);
    EXPECT_TRUE(std::isfinite(hmm_loglik(h, s)));
    const auto g = fisher_score(h, s);
    EXPECT_TRUE(all_finite(g.span()));
}

TEST(HmmLoglik, DimMismatch) {
    Rng rng(4);
    const auto h = random_hmm(rng, 2, 2);
    EXPECT_THROW(hmm_loglik(h, oracle::random_series(rng, 3, 3)), std::invalid_argument);
}

TEST(FisherScore, MatchesFiniteDifferences) {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t K = trial == 0 ? 2 : 1 + rng.index(3), D = trial == 0 ? 2 : 1 + rng.index(2);
        const std::size_t T = trial == 0 ? 4 : 1 + rng.index(6);
        const auto h = random_hmm(rng, K, D);
        const auto s = oracle::random_series(rng, T, D);
        const auto g = fisher_score(h, s);
        ASSERT_EQ(g.size(), fisher_score_length(K, D));
        const auto num = finite_diff_grad(
            [&](std::span<const double> x) { return hmm_loglik(from_unconstrained(K, D, x), s); },
            to_unconstrained(h), 1e-6);
        for (std::size_t i = 0; i < g.size(); ++i) EXPECT_LT(oracle::rel_error(g[i], num[i], 1e-6), 1e-4) << i;
    }
}

TEST(FisherScore, SingleStateMeanGradient) {
    Rng rng(6);
    const auto h = random_hmm(rng, 1, 2);
    const auto s = oracle::random_series(rng, 5, 2);
    const auto g = fisher_score(h, s);
    for (std::size_t d = 0; d < 2; ++d) {
        double expect = 0.0;
        for (const auto& f : s.frames) expect += (f[d] - h.means[0][d]) / h.variances[0][d];
        EXPECT_NEAR(g[1 + d], expect, 1e-12);  // after the single transition logit
    }
}

TEST(FisherScore, ExpectedScoreIsZero) {
    Rng rng(7);
    const auto h = random_hmm(rng, 2, 1);
    const std::size_t n = 1000, T = 8;
    const std::size_t L = fisher_score_length(2, 1);
    Vector mean(L), sq(L);
    for (std::size_t k = 0; k < n; ++k) {
        const auto g = fisher_score(h, sample_hmm(h, T, rng));
        for (std::size_t i = 0; i < L; ++i) {
            mean[i] += g[i] / n;
            sq[i] += g[i] * g[i] / n;
        }
    }
    for (std::size_t i = 0; i < L; ++i) {
        const double se = std::sqrt((sq[i] - mean[i] * mean[i]) / n);
        EXPECT_LT(std::abs(mean[i]), 4.0 * se + 1e-12) << i;
    }
}

TEST(FisherScore, ReparameterizationRoundTrip) {
    Rng rng(8);
    const auto h = random_hmm(rng, 3, 2);
    const auto back = from_unconstrained(3, 2, to_unconstrained(h).span());
    for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(back.trans.span()[i], h.trans.span()[i], 1e-14);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(back.pi[k], h.pi[k], 1e-14);
}

TEST(BaumWelch, SingleStateGivesGlobalMoments) {
    const Dataset ds = synth_generate(2, 3, 2, {5, 9}, 0.3, 1);
    const auto fit = baum_welch(ds, 1, 1, 3);
    double n = 0.0;
    Vector mean(2), var(2);
    for (const auto& s : ds.series)
        for (const auto& f : s.frames) {
            for (int d = 0; d < 2; ++d) mean[d] += f[d];
            n += 1.0;
        }
    for (auto& m : mean) m /= n;
    for (const auto& s : ds.series)
        for (const auto& f : s.frames)
            for (int d = 0; d < 2; ++d) var[d] += (f[d] - mean[d]) * (f[d] - mean[d]) / n;
    for (int d = 0; d < 2; ++d) {
        EXPECT_NEAR(fit.params.means[0][d], mean[d], 1e-10);
        EXPECT_NEAR(fit.params.variances[0][d], var[d], 1e-10);
    }
}

TEST(BaumWelch, MonotoneLoglikAndStochasticRows) {
    Rng rng(9);
    for (std::size_t K : {2, 3, 4}) {
        const auto truth = random_hmm(rng, 3, 2);
        const Dataset ds = hmm_dataset(truth, 15, 20, rng);
        const auto fit = baum_welch(ds, K, 20, 100 + K);
        ASSERT_EQ(fit.loglik.size(), 21u);
        for (std::size_t i = 1; i < fit.loglik.size(); ++i)
            EXPECT_GE(fit.loglik[i], fit.loglik[i - 1] - 1e-8) << "K=" << K << " iter " << i;
        EXPECT_NO_THROW(fit.params.validate());
        for (const auto& var : fit.params.variances)
            for (double v : var) EXPECT_GE(v, kVarianceFloor);
        EXPECT_NEAR(fit.loglik.back(), hmm_loglik(fit.params, ds), 1e-8 * std::abs(fit.loglik.back()));
    }
}

TEST(BaumWelch, DeterministicAndValidated) {
    const Dataset ds = synth_generate(2, 3, 2, {5, 9}, 0.3, 1);
    const auto a = baum_welch(ds, 3, 5, 7), b = baum_welch(ds, 3, 5, 7);
    EXPECT_EQ(a.params.means, b.params.means);
    EXPECT_EQ(a.params.trans, b.params.trans);
    EXPECT_EQ(a.loglik, b.loglik);
    EXPECT_THROW(baum_welch(Dataset{}, 2, 3, 1), DataError);
    EXPECT_THROW(baum_welch(ds, 0, 3, 1), std::invalid_argument);
}

TEST(BaumWelch, VarianceFloorOnConstantData) {
    Dataset ds;
    ds.dim = 1;
    ds.series.push_back({"c", 0, {Vector{1.0}, Vector{1.0}, Vector{1.0}}});
    const auto fit = baum_welch(ds, 2, 3, 1);
    for (const auto& var : fit.params.variances) EXPECT_GE(var[0], kVarianceFloor);
}

TEST(FisherKernel, Examples) {
    EXPECT_EQ(fisher_kernel(Vector{0, 1, 0}, Vector{0, 1, 0}), 1.0);
    EXPECT_EQ(fisher_kernel(Vector{1, 0}, Vector{0, 1}), 0.0);
    EXPECT_EQ(fisher_kernel(Vector{1, 2}, Vector{3, -1}), 1.0);
    EXPECT_THROW(fisher_kernel(Vector{1, 2}, Vector{3}), std::invalid_argument);
}

TEST(FisherKernel, SymmetricAndBilinear) {
    Rng rng(10);
    for (int trial = 0; trial < 50; ++trial) {
        Vector a(7), b(7);
        for (auto& x : a) x = rng.normal();
        for (auto& x : b) x = rng.normal();
        const double s = rng.uniform(-3.0, 3.0);
        Vector sa = a;
        for (auto& x : sa) x *= s;
        EXPECT_EQ(fisher_kernel(a, b), fisher_kernel(b, a));
        EXPECT_NEAR(fisher_kernel(sa, b), s * fisher_kernel(a, b), 1e-12);
    }
}

TEST(FisherKernel, NormalizerScalesByInverseStd) {
    const FisherNormalizer n = FisherNormalizer::fit({Vector{1.0, 5.0}, Vector{3.0, 5.0}});
    EXPECT_EQ(n.scale, (Vector{1.0, 1.0}));
    const FisherNormalizer m = FisherNormalizer::fit({Vector{0.0, 0.0}, Vector{4.0, 0.0}});
    EXPECT_EQ(m.scale[0], 0.5);
    EXPECT_EQ(fisher_kernel(Vector{2.0, 1.0}, Vector{2.0, 1.0}, m), 2.0);
}

TEST(FisherVector, Examples) {
    const std::vector<FisherReference> refs{{Vector{1, 2, 3, 4}, true}, {Vector{0, 0, 0, 0}, false}};
    EXPECT_EQ(fisher_vector_score({Vector{1, 2}, Vector{3, 4}}, refs), 0.0);
    const std::vector<FisherReference> one{{Vector{0, 0}, true}};
    EXPECT_EQ(fisher_vector_score(Vector{2, 0}, one), -2.0);
    EXPECT_THROW(fisher_vector_score(Vector{2, 0}, std::vector<FisherReference>{{Vector{0, 0}, false}}),
                 std::invalid_argument);
}

TEST(FisherVector, MatchesBruteForceScan) {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<FisherReference> refs;
        for (int r = 0; r < 3; ++r) {
            Vector f(4);
            for (auto& x : f) x = rng.normal();
            refs.push_back({f, r == 0 || rng.bernoulli(0.5)});
        }
        Vector q(4);
        for (auto& x : q) x = rng.normal();
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& r : refs) {
            if (!r.similar) continue;
            double d = 0.0;
            for (int i = 0; i < 4; ++i) d += (q[i] - r.features[i]) * (q[i] - r.features[i]);
            best = std::max(best, -std::sqrt(d));
        }
        EXPECT_EQ(fisher_vector_score(q, refs), best);
    }
}

TEST(FisherVector, ConcatenationIsOrderInsensitive) {
    const Vector ga{1, 2}, gb{3, 4};
    EXPECT_EQ(concat_pair(ga, "b", gb, "a"), concat_pair(gb, "a", ga, "b"));
    EXPECT_EQ(concat_pair(ga, "a", gb, "b"), (Vector{1, 2, 3, 4}));
}

TEST(HmmCheckpoint, ReloadScoresBitIdentically) {
    oracle::TempDir dir("hmm");
    Rng rng(12);
    auto h = random_hmm(rng, 3, 2);
    h.seed = 99;
    save_hmm(h, dir / "h.json");
    const auto back = load_hmm(dir / "h.json");
    EXPECT_EQ(back.seed, 99u);
    for (int k = 0; k < 5; ++k) {
        const auto s = oracle::random_series(rng, 6, 2);
        EXPECT_EQ(hmm_loglik(back, s), hmm_loglik(h, s));
        EXPECT_EQ(fisher_score(back, s), fisher_score(h, s));
    }
}

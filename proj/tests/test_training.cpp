#include <cmath>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "srn/eval.hpp"
#include "srn/training.hpp"

using namespace srn;

namespace {

SrnParams random_params(Rng& rng, std::size_t in, std::size_t hidden, Pooling pool, bool rec) {
    auto p = init_params(in, hidden, pool, rec, rng, -1.0, 1.0);
    return p;
}

// Max relative error of backward() against central differences of the loss.
double grad_check(const SrnParams& p, const TimeSeries& a, const TimeSeries& b, bool similar,
                  const PairDropout* drop = nullptr) {
    const auto analytic = flatten(backward(p, a, b, similar, drop).grads, p.recurrent);
    const auto numeric = finite_diff_grad(
        [&](std::span<const double> x) { return backward(unflatten(p, x), a, b, similar, drop).loss; }, flatten(p),
        1e-6);
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i)
        worst = std::max(worst, oracle::rel_error(analytic[i], numeric[i], 1e-6));
    return worst;
}

Dataset easy_data(std::uint64_t seed, std::size_t per_class = 20) {
    return synth_generate(5, per_class, 3, {20, 40}, 0.05, seed);
}

}  // namespace

TEST(PairLoss, Examples) {
    EXPECT_NEAR(pair_loss(0.5, true), std::log(2.0), 1e-15);
    EXPECT_NEAR(pair_loss(0.5, false), std::log(2.0), 1e-15);
    EXPECT_LT(pair_loss(1.0 - 1e-12, true), 1e-11);
    EXPECT_NEAR(pair_loss(0.9, false), -std::log(0.1), 1e-12);
    EXPECT_NEAR(pair_loss(0.9, false), 2.3026, 1e-4);
}

TEST(PairLoss, LogitFormAgreesAndStaysFinite) {
    // the probability form loses precision in 1 - p beyond |z| ~ 15
    for (double z = -15.0; z <= 15.0; z += 0.7) {
        EXPECT_NEAR(pair_loss_from_logit(z, true), pair_loss(stable_sigmoid(z), true), 1e-9);
        EXPECT_NEAR(pair_loss_from_logit(z, false), pair_loss(stable_sigmoid(z), false), 1e-9);
    }
    EXPECT_NEAR(pair_loss_from_logit(-800.0, true), 800.0, 1e-9);
    EXPECT_TRUE(std::isfinite(pair_loss_from_logit(800.0, false)));
}

TEST(Backward, DeadNetwork) {
    SrnParams p(2, 3, Pooling::average, true);
    Rng rng(1);
    const auto a = oracle::random_series(rng, 4, 2), b = oracle::random_series(rng, 3, 2);
    for (bool sim : {true, false}) {
        const auto r = backward(p, a, b, sim);
        EXPECT_TRUE(r.grads.dW.is_zero());
        EXPECT_TRUE(r.grads.dA.is_zero());
        EXPECT_EQ(r.grads.db, Vector(3, 0.0));
        // logit = -c, so dL/dc = -(sigmoid(0) - y)
        EXPECT_EQ(r.grads.dc, -(0.5 - (sim ? 1.0 : 0.0)));
        EXPECT_NEAR(r.loss, std::log(2.0), 1e-15);
    }
}

TEST(Backward, ThreeUnitLengthFourCheck) {
    Rng rng(2);
    for (auto pool : {Pooling::last, Pooling::average}) {
        const auto p = random_params(rng, 2, 3, pool, true);
        const auto a = oracle::random_series(rng, 4, 2), b = oracle::random_series(rng, 4, 2);
        EXPECT_LT(grad_check(p, a, b, true), 1e-5);
        EXPECT_LT(grad_check(p, a, b, false), 1e-5);
    }
}

TEST(Backward, RandomConfigurationsMatchFiniteDifferences) {
    Rng rng(3);
    const std::size_t hiddens[] = {2, 3, 5};
    const std::size_t lengths[] = {1, 2, 4, 6};
    int n = 0;
    for (std::size_t h : hiddens)
        for (auto pool : {Pooling::last, Pooling::average})
            for (bool rec : {true, false}) {
                const std::size_t in = 1 + rng.index(3);
                const auto p = random_params(rng, in, h, pool, rec);
                const auto a = oracle::random_series(rng, lengths[rng.index(4)], in);
                const auto b = oracle::random_series(rng, lengths[rng.index(4)], in);
                EXPECT_LT(grad_check(p, a, b, rng.bernoulli(0.5)), 1e-4) << "h=" << h << " rec=" << rec;
                ++n;
            }
    EXPECT_EQ(n, 12);
}

TEST(Backward, DropoutMasksAreDifferentiatedExactly) {
    Rng rng(4);
    const auto p = random_params(rng, 2, 4, Pooling::average, true);
    const auto a = oracle::random_series(rng, 5, 2), b = oracle::random_series(rng, 3, 2);
    PairDropout d{0.3, draw_dropout_mask(rng, 5, 4, 0.3), draw_dropout_mask(rng, 3, 4, 0.3)};
    EXPECT_LT(grad_check(p, a, b, true, &d), 1e-5);
}

TEST(Backward, IdenticalInputsGiveTwiceOneBranch) {
    Rng rng(5);
    const auto p = random_params(rng, 2, 3, Pooling::average, true);
    const auto s = oracle::random_series(rng, 4, 2);
    const auto full = backward(p, s, s, true);
    // one branch alone: dL/dh1 = dlogit * v . h2
    const auto tr = rnn_forward(p, s);
    const Vector h = pool(tr, p.pooling);
    const double dlogit = stable_sigmoid(similarity_logit(p, h, h)) - 1.0;
    Vector dh(3);
    for (std::size_t i = 0; i < 3; ++i) dh[i] = dlogit * p.v[i] * h[i];
    auto one = Gradients::zeros_like(p);
    detail::branch_backward(p, s, tr, dh, nullptr, 0.0, one);
    for (std::size_t k = 0; k < one.dW.span().size(); ++k)
        EXPECT_NEAR(full.grads.dW.span()[k], 2.0 * one.dW.span()[k], 1e-15);
}

TEST(Backward, NonFiniteReportsStep) {
    SrnParams p(1, 1, Pooling::last, true);
    p.W(0, 0) = 1.0;
    TimeSeries s{"bad", 0, {Vector{1.0}, Vector{1.0}, Vector{std::numeric_limits<double>::infinity()}}};
    try {
        backward(p, s, s, true);
        FAIL();
    } catch (const std::domain_error& e) {
        EXPECT_NE(std::string(e.what()).find("step 2"), std::string::npos) << e.what();
    }
}

TEST(Logistic, BackwardMatchesFiniteDifferences) {
    Rng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        LogisticParams p{Vector(3), rng.uniform(-1, 1)};
        for (auto& w : p.weights) w = rng.uniform(-1, 1);
        const auto a = oracle::random_series(rng, 1 + rng.index(6), 3), b = oracle::random_series(rng, 1 + rng.index(6), 3);
        const bool sim = trial % 2 == 0;
        const auto r = logistic_backward(p, a, b, sim);
        Vector x(4);
        for (int d = 0; d < 3; ++d) x[d] = p.weights[d];
        x[3] = p.bias;
        const auto num = finite_diff_grad(
            [&](std::span<const double> q) {
                return pair_loss_from_logit(logistic_logit(Vector{q[0], q[1], q[2]}, q[3], a, b), sim);
            },
            x, 1e-6);
        for (int d = 0; d < 3; ++d) EXPECT_LT(oracle::rel_error(r.grads.dweights[d], num[d], 1e-6), 1e-5);
        EXPECT_LT(oracle::rel_error(r.grads.dbias, num[3], 1e-6), 1e-5);
    }
}

TEST(Rmsprop, ZeroGradientLeavesParams) {
    Rng rng(7);
    auto p = random_params(rng, 2, 3, Pooling::last, true);
    const auto before = p;
    auto g = Gradients::zeros_like(p);
    auto st = Gradients::zeros_like(p);
    rmsprop_step(p, g, st, 1e-3, 0.9, 1e-6);
    EXPECT_EQ(p, before);
}

TEST(Rmsprop, FirstStepAlgebra) {
    for (double g : {0.5, 3.0, -40.0}) {
        std::vector<double> param{1.0}, grad{g}, acc{0.0};
        rmsprop_update(param, grad, acc, 1e-3, 0.9, 1e-6);
        const double expected = 1e-3 * g / (std::sqrt(0.1 * g * g) + 1e-6);
        EXPECT_NEAR(1.0 - param[0], expected, 1e-15);
        // epsilon shifts the magnitude by a relative ~eps / |g|
        EXPECT_NEAR(std::abs(1.0 - param[0]), 1e-3 / std::sqrt(0.1), 1e-7);
    }
}

TEST(Rmsprop, ScaleFreeAfterWarmup) {
    std::vector<double> param{0.0, 0.0}, grad{0.2, 2.0}, acc{0.0, 0.0};
    std::vector<double> prev = param;
    for (int k = 0; k < 100; ++k) {
        prev = param;
        rmsprop_update(param, grad, acc, 1e-3, 0.9, 1e-6);
    }
    const double u0 = prev[0] - param[0], u1 = prev[1] - param[1];
    EXPECT_NEAR(u0 / u1, 1.0, 1e-4);
}

TEST(RmspropStep, NonRecurrentNeverTouchesA) {
    Rng rng(8);
    auto p = random_params(rng, 2, 3, Pooling::last, false);
    auto g = Gradients::zeros_like(p);
    g.dA = Matrix(3, 3, 1.0);
    auto st = Gradients::zeros_like(p);
    rmsprop_step(p, g, st, 1e-2, 0.9, 1e-6);
    EXPECT_TRUE(p.A.is_zero());
}

TEST(Dropout, RateZeroIsIdentity) {
    const Vector s{1.0, -2.0, 3.5};
    EXPECT_EQ(apply_dropout(s, 0.0, Vector(3, 1.0)), s);
}

TEST(Dropout, ZeroMaskGivesZero) {
    EXPECT_EQ(apply_dropout(Vector{1.0, 2.0}, 0.5, Vector(2, 0.0)), Vector(2, 0.0));
}

TEST(Dropout, ExpectationMatchesUndroppedState) {
    Rng rng(9);
    const Vector s{0.4, 1.7, 3.0, 0.9};
    Vector mean(4);
    const int n = 10000;
    for (int k = 0; k < n; ++k) {
        const auto m = draw_dropout_mask(rng, 1, 4, 0.3)[0];
        const auto out = apply_dropout(s, 0.3, m);
        for (int i = 0; i < 4; ++i) mean[i] += out[i] / n;
    }
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(mean[i] / s[i], 1.0, 0.02);
}

TEST(Gradients, ClipContainment) {
    Rng rng(10);
    for (int trial = 0; trial < 20; ++trial) {
        auto p = random_params(rng, 2, 3, Pooling::last, true);
        auto g = Gradients::zeros_like(p);
        for (auto& x : g.dW.span()) x = 30.0 * rng.normal();
        for (auto& x : g.dA.span()) x = 30.0 * rng.normal();
        for (auto& x : g.db) x = 30.0 * rng.normal();
        for (auto& x : g.dv) x = 30.0 * rng.normal();
        g.dc = 30.0 * rng.normal();
        g.clip(-5.0, 5.0);
        const auto flat = flatten(g, true);
        for (double x : flat) {
            EXPECT_GE(x, -5.0);
            EXPECT_LE(x, 5.0);
        }
    }
}

TEST(Train, LossDecreasesOnFixedBatch) {
    Rng rng(11);
    const Dataset ds = synth_generate(3, 4, 2, {5, 8}, 0.1, 12);
    const auto pairs = build_pairs(ds);
    const auto batch = sample_pair_batch(pairs, rng, 10);
    auto p = init_params(2, 4, Pooling::average, true, rng);
    auto st = Gradients::zeros_like(p);
    auto batch_loss = [&](const SrnParams& q, Gradients* out) {
        double loss = 0.0;
        auto g = Gradients::zeros_like(q);
        for (const auto& s : batch) {
            auto r = backward(q, ds[s.first], ds[s.second], s.similar);
            loss += r.loss;
            g += r.grads;
        }
        g.scale(1.0 / static_cast<double>(batch.size()));
        g.clip(-5.0, 5.0);
        if (out) *out = g;
        return loss / static_cast<double>(batch.size());
    };
    Gradients g;
    double prev = batch_loss(p, &g);
    for (int k = 0; k < 50; ++k) {
        rmsprop_step(p, g, st, 1e-3, 0.9, 1e-6);
        const double now = batch_loss(p, &g);
        EXPECT_LE(now, prev + 1e-9) << "step " << k;
        prev = now;
    }
}

TEST(Train, ZeroStepsReturnsInitialParams) {
    const Dataset ds = easy_data(1, 4);
    TrainConfig cfg;
    cfg.hidden = 4;
    cfg.max_steps = 0;
    cfg.seed = 5;
    const auto r = train(ds, ds, cfg);
    EXPECT_TRUE(r.log.records.empty());
    Rng init_rng(derive_seed(5, "init"));
    EXPECT_EQ(r.params, init_params(3, 4, Pooling::average, true, init_rng));
}

TEST(Train, DeterministicAcrossRunsAndWorkerCounts) {
    const Dataset ds = easy_data(2, 6);
    TrainConfig cfg;
    cfg.hidden = 5;
    cfg.max_steps = 60;
    cfg.eval_every = 20;
    cfg.batch = 10;
    cfg.dropout = 0.2;
    cfg.seed = 9;
    const auto a = train(ds, ds, cfg);
    const auto b = train(ds, ds, cfg);
    cfg.workers = 3;
    const auto c = train(ds, ds, cfg);
    EXPECT_EQ(a.log, b.log);
    EXPECT_EQ(a.params, b.params);
    EXPECT_EQ(a.log, c.log);
    EXPECT_EQ(a.params, c.params);
}

TEST(Train, NonRecurrentKeepsAZero) {
    const Dataset ds = easy_data(3, 6);
    TrainConfig cfg;
    cfg.hidden = 4;
    cfg.recurrent = false;
    cfg.max_steps = 50;
    cfg.batch = 10;
    const auto r = train(ds, ds, cfg);
    EXPECT_TRUE(r.params.A.is_zero());
}

TEST(Train, LogStepsIncreaseAndLrOnlyDecays) {
    const Dataset full = easy_data(4, 10);
    const Split sp = make_split(full, {SplitMode::within_domain, {}, {}, 0.7, 0.3, 4});
    TrainConfig cfg;
    cfg.hidden = 6;
    cfg.max_steps = 600;
    cfg.eval_every = 20;
    cfg.patience = 2;
    cfg.lr = 1e-2;
    const auto r = train(sp.train, sp.validation, cfg);
    ASSERT_FALSE(r.log.records.empty());
    for (std::size_t k = 1; k < r.log.records.size(); ++k) {
        EXPECT_GT(r.log.records[k].step, r.log.records[k - 1].step);
        const double ratio = r.log.records[k].lr / r.log.records[k - 1].lr;
        EXPECT_TRUE(ratio == 1.0 || std::abs(ratio - 0.4) < 1e-12) << ratio;
    }
}

TEST(Train, ReturnsBestValidationParameters) {
    const Dataset full = easy_data(5, 10);
    const Split sp = make_split(full, {SplitMode::within_domain, {}, {}, 0.7, 0.3, 5});
    TrainConfig cfg;
    cfg.hidden = 6;
    cfg.max_steps = 300;
    cfg.eval_every = 50;
    cfg.lr = 1e-2;
    cfg.seed = 3;
    const auto r = train(sp.train, sp.validation, cfg);
    double best = 0.0;
    for (const auto& rec : r.log.records) best = std::max(best, rec.val_auc);
    Rng val_rng(derive_seed(cfg.seed, "validation"));
    const auto pairs = select_pairs(build_pairs(sp.validation), cfg.val_pairs, val_rng);
    std::vector<double> scores;
    std::vector<bool> labels;
    for (const auto& p : pairs) {
        scores.push_back(
            similarity_logit(r.params, embed(r.params, sp.validation[p.first]), embed(r.params, sp.validation[p.second])));
        labels.push_back(p.similar);
    }
    EXPECT_EQ(auc(scores, labels), best);
}

TEST(Train, ValidationFallbackIsLogged) {
    const Dataset ds = easy_data(6, 4);
    Dataset tiny;
    tiny.dim = ds.dim;
    tiny.series.push_back(ds[0]);
    TrainConfig cfg;
    cfg.hidden = 3;
    cfg.max_steps = 10;
    cfg.eval_every = 5;
    cfg.batch = 4;
    const auto r = train(ds, tiny, cfg);
    EXPECT_FALSE(r.log.warnings.empty());
    EXPECT_EQ(r.log.records.size(), 2u);
}

TEST(Train, SingleClassTrainingRejected) {
    const Dataset ds = synth_generate(1, 5, 2, {5, 5}, 0.1, 1);
    TrainConfig cfg;
    cfg.max_steps = 5;
    EXPECT_THROW(train(ds, ds, cfg), DataError);
}

TEST(Train, ConfigValidation) {
    TrainConfig cfg;
    cfg.batch = 7;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.dropout = 1.0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.lr = 0.0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Train, EasySyntheticReachesHighValidationAuc) {
    const Dataset full = easy_data(7);
    const Split sp = make_split(full, {SplitMode::within_domain, {}, {}, 0.7, 0.1, 7});
    TrainConfig cfg;
    cfg.hidden = 20;
    cfg.lr = 1e-2;
    cfg.max_steps = 2000;
    cfg.seed = 7;
    const auto r = train(sp.train, sp.validation, cfg);
    double best = 0.0;
    for (const auto& rec : r.log.records) best = std::max(best, rec.val_auc);
    EXPECT_GT(best, 0.95);
}

TEST(TrainLogistic, LearnsAndIsDeterministic) {
    const Dataset ds = easy_data(8, 8);
    TrainConfig cfg;
    cfg.max_steps = 100;
    cfg.eval_every = 50;
    cfg.lr = 1e-2;
    const auto a = train_logistic(ds, ds, cfg);
    const auto b = train_logistic(ds, ds, cfg);
    EXPECT_EQ(a.params, b.params);
    EXPECT_EQ(a.params.weights.size(), 3u);
    EXPECT_EQ(a.log.records.size(), 2u);
}

TEST(TrainLog, CsvHasVersionHeader) {
    oracle::TempDir dir("log");
    TrainLog log{{{100, 0.5, 0.75, 1e-3}}, {}};
    save_train_log_csv(log, dir / "l.csv");
    std::ifstream in(dir / "l.csv");
    std::string l1, l2, l3;
    std::getline(in, l1);
    std::getline(in, l2);
    std::getline(in, l3);
    EXPECT_EQ(l1, "# srn-train-log v1");
    EXPECT_EQ(l2, "step,loss,val_auc,lr");
    EXPECT_EQ(l3, "100,0.5,0.75,0.001");
}

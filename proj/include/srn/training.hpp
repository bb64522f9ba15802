#pragma once

// Pair loss, exact backpropagation through time over both siamese branches,
// RMSprop, dropout and the validation-driven training loop.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "srn/data.hpp"
#include "srn/eval.hpp"
#include "srn/model.hpp"
#include "srn/numerics.hpp"

namespace srn {

/// -log p for a similar pair, -log(1 - p) otherwise.
inline double pair_loss(double p, bool is_similar) { return is_similar ? -std::log(p) : -std::log1p(-p); }

/// Same loss from the logit, without forming p.
inline double pair_loss_from_logit(double logit, bool is_similar) {
    return is_similar ? softplus(-logit) : softplus(logit);
}

struct Gradients {
    Matrix dW;
    Matrix dA;
    Vector db;
    Vector dv;
    double dc = 0.0;

    static Gradients zeros_like(const SrnParams& p) {
        return {Matrix(p.hidden(), p.input_dim()), Matrix(p.hidden(), p.hidden()), Vector(p.hidden()),
                Vector(p.hidden()), 0.0};
    }

    Gradients& operator+=(const Gradients& o) {
        auto add = [](std::span<double> a, std::span<const double> b) {
            for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
        };
        add(dW.span(), o.dW.span());
        add(dA.span(), o.dA.span());
        add(db.span(), o.db.span());
        add(dv.span(), o.dv.span());
        dc += o.dc;
        return *this;
    }

    void scale(double s) {
        for (auto* blk : {&dW, &dA})
            for (auto& x : blk->span()) x *= s;
        for (auto* blk : {&db, &dv})
            for (auto& x : *blk) x *= s;
        dc *= s;
    }

    void clip(double lo, double hi) {
        clip_elementwise(dW.span(), lo, hi);
        clip_elementwise(dA.span(), lo, hi);
        clip_elementwise(db.span(), lo, hi);
        clip_elementwise(dv.span(), lo, hi);
        dc = std::min(hi, std::max(lo, dc));
    }
};

/// Inverted dropout: state . mask / (1 - rate).
inline Vector apply_dropout(const Vector& state, double rate, const Vector& mask) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("apply_dropout: rate must be in [0, 1)");
    Vector out(state.size());
    const double keep_scale = 1.0 / (1.0 - rate);
    for (std::size_t i = 0; i < state.size(); ++i) out[i] = state[i] * mask[i] * keep_scale;
    return out;
}

/// Bernoulli(1 - rate) keep mask per time step.
using DropoutMask = std::vector<Vector>;

inline DropoutMask draw_dropout_mask(Rng& rng, std::size_t steps, std::size_t hidden, double rate) {
    DropoutMask m(steps, Vector(hidden));
    for (auto& step : m)
        for (auto& x : step) x = rng.bernoulli(1.0 - rate) ? 1.0 : 0.0;
    return m;
}

struct PairDropout {
    double rate = 0.0;
    DropoutMask first;
    DropoutMask second;
};

struct BackwardResult {
    double loss = 0.0;
    Gradients grads;
};

namespace detail {

struct BranchForward {
    HiddenTrace trace;
    Vector h;
};

inline BranchForward branch_forward(const SrnParams& p, const TimeSeries& s, const DropoutMask* mask, double rate) {
    BranchForward out{rnn_forward(p, s), {}};
    for (std::size_t t = 0; t < out.trace.preactivations.size(); ++t)
        if (!all_finite(out.trace.preactivations[t].span()))
            throw std::domain_error("backward: non-finite preactivation in series '" + s.id + "' at step " +
                                    std::to_string(t));
    if (mask) {
        HiddenTrace dropped;
        dropped.states.reserve(out.trace.states.size());
        for (std::size_t t = 0; t < out.trace.states.size(); ++t)
            dropped.states.push_back(apply_dropout(out.trace.states[t], rate, (*mask)[t]));
        out.h = pool(dropped, p.pooling);
    } else {
        out.h = pool(out.trace, p.pooling);
    }
    return out;
}

// Accumulates the gradient of one branch given dL/dh.
inline void branch_backward(const SrnParams& p, const TimeSeries& s, const HiddenTrace& tr, const Vector& dh,
                            const DropoutMask* mask, double rate, Gradients& g) {
    const std::size_t T = s.length();
    const std::size_t H = p.hidden();
    const double keep_scale = mask ? 1.0 / (1.0 - rate) : 1.0;
    const double pool_scale = p.pooling == Pooling::average ? 1.0 / static_cast<double>(T) : 1.0;
    Vector carry(H);  // dL/dz_t arriving through A from step t+1
    Vector da(H);
    for (std::size_t t = T; t-- > 0;) {
        const bool feeds_pool = p.pooling == Pooling::average || t == T - 1;
        for (std::size_t i = 0; i < H; ++i) {
            double dz = carry[i];
            if (feeds_pool) {
                double up = dh[i] * pool_scale;
                if (mask) up *= (*mask)[t][i] * keep_scale;
                dz += up;
            }
            da[i] = tr.preactivations[t][i] > 0.0 ? dz : 0.0;
        }
        outer_acc(g.dW, da.span(), s.frames[t].span());
        for (std::size_t i = 0; i < H; ++i) g.db[i] += da[i];
        carry.fill(0.0);
        if (p.recurrent && t > 0) {
            outer_acc(g.dA, da.span(), tr.states[t - 1].span());
            gemv_t_acc(p.A, da.span(), carry.span());
        }
    }
}

}  // namespace detail

/// Loss and exact gradient for one pair. Both branches share `params`, so
/// their contributions are summed into one Gradients.
inline BackwardResult backward(const SrnParams& p, const TimeSeries& s1, const TimeSeries& s2, bool is_similar,
                               const PairDropout* dropout = nullptr) {
    const DropoutMask* m1 = dropout && dropout->rate > 0.0 ? &dropout->first : nullptr;
    const DropoutMask* m2 = dropout && dropout->rate > 0.0 ? &dropout->second : nullptr;
    const double rate = dropout ? dropout->rate : 0.0;
    const auto b1 = detail::branch_forward(p, s1, m1, rate);
    const auto b2 = detail::branch_forward(p, s2, m2, rate);

    const double logit = similarity_logit(p, b1.h, b2.h);
    BackwardResult r{pair_loss_from_logit(logit, is_similar), Gradients::zeros_like(p)};
    const double dlogit = stable_sigmoid(logit) - (is_similar ? 1.0 : 0.0);

    const std::size_t H = p.hidden();
    Vector dh1(H), dh2(H);
    for (std::size_t i = 0; i < H; ++i) {
        r.grads.dv[i] = dlogit * (b1.h[i] * b2.h[i]);
        dh1[i] = dlogit * p.v[i] * b2.h[i];
        dh2[i] = dlogit * p.v[i] * b1.h[i];
    }
    r.grads.dc = -dlogit;
    detail::branch_backward(p, s1, b1.trace, dh1, m1, rate, r.grads);
    detail::branch_backward(p, s2, b2.trace, dh2, m2, rate, r.grads);
    if (!std::isfinite(r.loss)) throw std::domain_error("backward: non-finite loss");
    return r;
}

// ---------------------------------------------------------------------------
// Flat views, used by gradient checks. Order: W, A (recurrent only), b, v, c.

inline Vector flatten(const SrnParams& p) {
    std::vector<double> x(p.W.span().begin(), p.W.span().end());
    if (p.recurrent) x.insert(x.end(), p.A.span().begin(), p.A.span().end());
    x.insert(x.end(), p.b.begin(), p.b.end());
    x.insert(x.end(), p.v.begin(), p.v.end());
    x.push_back(p.c);
    return Vector(std::move(x));
}

inline SrnParams unflatten(const SrnParams& like, std::span<const double> x) {
    SrnParams p = like;
    std::size_t k = 0;
    for (auto& w : p.W.span()) w = x[k++];
    if (p.recurrent)
        for (auto& a : p.A.span()) a = x[k++];
    for (auto& b : p.b) b = x[k++];
    for (auto& v : p.v) v = x[k++];
    p.c = x[k++];
    if (k != x.size()) throw std::invalid_argument("unflatten: size mismatch");
    return p;
}

inline Vector flatten(const Gradients& g, bool recurrent) {
    std::vector<double> x(g.dW.span().begin(), g.dW.span().end());
    if (recurrent) x.insert(x.end(), g.dA.span().begin(), g.dA.span().end());
    x.insert(x.end(), g.db.begin(), g.db.end());
    x.insert(x.end(), g.dv.begin(), g.dv.end());
    x.push_back(g.dc);
    return Vector(std::move(x));
}

// ---------------------------------------------------------------------------
// RMSprop

/// acc <- decay * acc + (1 - decay) * g^2;  param <- param - lr * g / (sqrt(acc) + eps)
inline void rmsprop_update(std::span<double> param, std::span<const double> grad, std::span<double> acc, double lr,
                           double decay, double eps) {
    for (std::size_t i = 0; i < param.size(); ++i) {
        acc[i] = decay * acc[i] + (1.0 - decay) * grad[i] * grad[i];
        param[i] -= lr * grad[i] / (std::sqrt(acc[i]) + eps);
    }
}

/// Per-parameter squared-gradient accumulators, shaped like Gradients.
using RmsState = Gradients;

inline void rmsprop_step(SrnParams& p, const Gradients& g, RmsState& state, double lr, double decay, double eps) {
    rmsprop_update(p.W.span(), g.dW.span(), state.dW.span(), lr, decay, eps);
    if (p.recurrent) rmsprop_update(p.A.span(), g.dA.span(), state.dA.span(), lr, decay, eps);
    rmsprop_update(p.b.span(), g.db.span(), state.db.span(), lr, decay, eps);
    rmsprop_update(p.v.span(), g.dv.span(), state.dv.span(), lr, decay, eps);
    rmsprop_update(std::span<double>(&p.c, 1), std::span<const double>(&g.dc, 1), std::span<double>(&state.dc, 1), lr,
                   decay, eps);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
    std::size_t hidden = 20;
    Pooling pooling = Pooling::average;
    bool recurrent = true;
    std::size_t batch = 50;
    double lr = 1e-3;
    double rms_decay = 0.9;
    double epsilon = 1e-6;
    double clip_lo = -5.0;
    double clip_hi = 5.0;
    double dropout = 0.0;
    double lr_decay_factor = 0.4;
    std::size_t patience = 3;
    std::size_t eval_every = 100;
    std::size_t max_steps = 2000;
    std::size_t val_pairs = 2000;
    double init_range = 0.1;
    std::uint64_t seed = 0;
    std::size_t workers = 1;

    void validate() const {
        if (batch == 0 || batch % 2 != 0) throw std::invalid_argument("TrainConfig: batch must be even and positive");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("TrainConfig: dropout must be in [0, 1)");
        if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be positive");
        if (hidden == 0) throw std::invalid_argument("TrainConfig: hidden must be positive");
        if (eval_every == 0) throw std::invalid_argument("TrainConfig: eval_every must be positive");
        if (clip_lo > clip_hi) throw std::invalid_argument("TrainConfig: clip_lo > clip_hi");
        if (!(rms_decay >= 0.0 && rms_decay < 1.0)) throw std::invalid_argument("TrainConfig: rms_decay must be in [0, 1)");
    }
};

struct TrainRecord {
    std::size_t step;
    double loss;
    double val_auc;
    double lr;
    bool operator==(const TrainRecord&) const = default;
};

struct TrainLog {
    std::vector<TrainRecord> records;
    std::vector<std::string> warnings;

    bool operator==(const TrainLog& o) const { return records == o.records; }
};

inline void save_train_log_csv(const TrainLog& log, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write training log: " + path.string());
    out << "# srn-train-log v1\nstep,loss,val_auc,lr\n";
    for (const auto& r : log.records)
        out << r.step << ',' << format_real(r.loss) << ',' << format_real(r.val_auc) << ',' << format_real(r.lr) << '\n';
}

template <class Params>
struct TrainResult {
    Params params;
    TrainLog log;
};

namespace detail {

// Model-specific pieces the shared loop needs.
struct SrnModel {
    using Params = SrnParams;
    using Grads = Gradients;
    const TrainConfig& cfg;
    std::size_t input_dim;

    Params init(Rng& rng) const {
        return init_params(input_dim, cfg.hidden, cfg.pooling, cfg.recurrent, rng, -cfg.init_range, cfg.init_range);
    }
    Grads zero_state(const Params& p) const { return Gradients::zeros_like(p); }
    BackwardResult pair_grad(const Params& p, const TimeSeries& a, const TimeSeries& b, bool similar,
                             const PairDropout* d) const {
        return backward(p, a, b, similar, d);
    }
    std::size_t dropout_width(const Params& p) const { return p.hidden(); }
    void clip(Grads& g) const { g.clip(cfg.clip_lo, cfg.clip_hi); }
    void step(Params& p, const Grads& g, Grads& state, double lr) const {
        rmsprop_step(p, g, state, lr, cfg.rms_decay, cfg.epsilon);
    }
    Vector represent(const Params& p, const TimeSeries& s) const { return embed(p, s); }
    double compare(const Params& p, const Vector& a, const Vector& b) const { return similarity_logit(p, a, b); }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Naive logistic model

struct LogisticGrads {
    Vector dweights;
    double dbias = 0.0;

    LogisticGrads& operator+=(const LogisticGrads& o) {
        for (std::size_t i = 0; i < dweights.size(); ++i) dweights[i] += o.dweights[i];
        dbias += o.dbias;
        return *this;
    }
    void scale(double s) {
        for (auto& x : dweights) x *= s;
        dbias *= s;
    }
};

struct LogisticBackward {
    double loss = 0.0;
    LogisticGrads grads;
};

inline LogisticBackward logistic_backward(const LogisticParams& p, const TimeSeries& s1, const TimeSeries& s2,
                                          bool is_similar) {
    const Vector m1 = time_mean(s1);
    const Vector m2 = time_mean(s2);
    const double logit = logistic_logit(p.weights, p.bias, s1, s2);
    const double dlogit = stable_sigmoid(logit) - (is_similar ? 1.0 : 0.0);
    LogisticBackward r{pair_loss_from_logit(logit, is_similar), {Vector(p.weights.size()), dlogit}};
    for (std::size_t d = 0; d < p.weights.size(); ++d) r.grads.dweights[d] = dlogit * (m1[d] * m2[d]);
    return r;
}

namespace detail {

struct LogisticModel {
    using Params = LogisticParams;
    using Grads = LogisticGrads;
    const TrainConfig& cfg;
    std::size_t input_dim;

    Params init(Rng& rng) const {
        const Matrix w = uniform_init(rng, input_dim + 1, 1, -cfg.init_range, cfg.init_range);
        Params p{Vector(input_dim), w(input_dim, 0)};
        for (std::size_t d = 0; d < input_dim; ++d) p.weights[d] = w(d, 0);
        return p;
    }
    Grads zero_state(const Params& p) const { return {Vector(p.weights.size()), 0.0}; }
    auto pair_grad(const Params& p, const TimeSeries& a, const TimeSeries& b, bool similar, const PairDropout*) const {
        return logistic_backward(p, a, b, similar);
    }
    std::size_t dropout_width(const Params&) const { return 0; }
    void clip(Grads& g) const {
        clip_elementwise(g.dweights.span(), cfg.clip_lo, cfg.clip_hi);
        g.dbias = std::min(cfg.clip_hi, std::max(cfg.clip_lo, g.dbias));
    }
    void step(Params& p, const Grads& g, Grads& state, double lr) const {
        rmsprop_update(p.weights.span(), g.dweights.span(), state.dweights.span(), lr, cfg.rms_decay, cfg.epsilon);
        rmsprop_update(std::span<double>(&p.bias, 1), std::span<const double>(&g.dbias, 1),
                       std::span<double>(&state.dbias, 1), lr, cfg.rms_decay, cfg.epsilon);
    }
    Vector represent(const Params&, const TimeSeries& s) const { return time_mean(s); }
    double compare(const Params& p, const Vector& a, const Vector& b) const {
        double s = 0.0;
        for (std::size_t d = 0; d < a.size(); ++d) s += p.weights[d] * (a[d] * b[d]);
        return s + p.bias;
    }
};

// Validation AUC over a fixed pair sample; each series is represented once.
template <class Model>
double pair_auc(const Model& model, const typename Model::Params& p, const Dataset& ds,
                const std::vector<PairSample>& pairs) {
    std::vector<Vector> reps;
    reps.reserve(ds.size());
    for (const auto& s : ds.series) reps.push_back(model.represent(p, s));
    std::vector<double> scores(pairs.size());
    std::vector<bool> labels(pairs.size());
    for (std::size_t k = 0; k < pairs.size(); ++k) {
        scores[k] = model.compare(p, reps[pairs[k].first], reps[pairs[k].second]);
        labels[k] = pairs[k].similar;
    }
    return auc(scores, labels);
}

template <class Model>
TrainResult<typename Model::Params> fit(const Model& model, const Dataset& train_data, const Dataset& val_data,
                                        const TrainConfig& cfg, const std::optional<ForgeryMap>& forgeries) {
    cfg.validate();
    Rng init_rng(derive_seed(cfg.seed, "init"));
    Rng batch_rng(derive_seed(cfg.seed, "batch"));
    Rng dropout_rng(derive_seed(cfg.seed, "dropout"));
    Rng val_rng(derive_seed(cfg.seed, "validation"));

    TrainResult<typename Model::Params> result{model.init(init_rng), {}};
    if (cfg.max_steps == 0) return result;

    const PairSet train_pairs = build_pairs(train_data, forgeries);
    if (train_pairs.similar.empty() || train_pairs.dissimilar.empty())
        throw DataError("train: training data yields no " +
                        std::string(train_pairs.similar.empty() ? "similar" : "dissimilar") + " pairs");

    // Validation pairs follow the same rules; fall back to training pairs if
    // the validation split cannot form both kinds.
    const Dataset* sched_data = &val_data;
    PairSet val_set;
    bool val_ok = false;
    if (!val_data.empty()) {
        std::optional<ForgeryMap> val_forgeries;
        if (forgeries) val_forgeries = restrict_forgeries(*forgeries, val_data);
        val_set = build_pairs(val_data, val_forgeries);
        val_ok = !val_set.similar.empty() && !val_set.dissimilar.empty();
    }
    if (!val_ok) {
        result.log.warnings.push_back("validation split cannot form similar and dissimilar pairs; "
                                      "scheduling on training pairs");
        sched_data = &train_data;
        val_set = train_pairs;
    }
    const auto val_pairs = select_pairs(val_set, cfg.val_pairs, val_rng);

    auto params = result.params;
    auto state = model.zero_state(params);
    double lr = cfg.lr;
    double best_auc = -std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    double loss_sum = 0.0;
    std::size_t loss_count = 0;

    std::vector<decltype(model.pair_grad(params, train_data[0], train_data[0], true, nullptr))> per_pair(cfg.batch);
    std::vector<PairDropout> masks(cfg.batch);

    for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
        const auto batch = sample_pair_batch(train_pairs, batch_rng, cfg.batch);
        const bool use_dropout = cfg.dropout > 0.0 && model.dropout_width(params) > 0;
        if (use_dropout) {
            for (std::size_t k = 0; k < batch.size(); ++k) {
                const std::size_t H = model.dropout_width(params);
                masks[k].rate = cfg.dropout;
                masks[k].first = draw_dropout_mask(dropout_rng, train_data[batch[k].first].length(), H, cfg.dropout);
                masks[k].second = draw_dropout_mask(dropout_rng, train_data[batch[k].second].length(), H, cfg.dropout);
            }
        }
        parallel_for(batch.size(), cfg.workers, [&](std::size_t k) {
            per_pair[k] = model.pair_grad(params, train_data[batch[k].first], train_data[batch[k].second],
                                          batch[k].similar, use_dropout ? &masks[k] : nullptr);
        });

        auto grads = per_pair[0].grads;
        double batch_loss = per_pair[0].loss;
        for (std::size_t k = 1; k < batch.size(); ++k) {
            grads += per_pair[k].grads;
            batch_loss += per_pair[k].loss;
        }
        const double inv_b = 1.0 / static_cast<double>(batch.size());
        grads.scale(inv_b);
        model.clip(grads);
        model.step(params, grads, state, lr);
        loss_sum += batch_loss * inv_b;
        ++loss_count;

        if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
            const double val_auc = pair_auc(model, params, *sched_data, val_pairs);
            result.log.records.push_back({step, loss_sum / static_cast<double>(loss_count), val_auc, lr});
            loss_sum = 0.0;
            loss_count = 0;
            if (val_auc > best_auc) {
                best_auc = val_auc;
                result.params = params;
                since_best = 0;
            } else if (++since_best >= cfg.patience) {
                lr *= cfg.lr_decay_factor;
                since_best = 0;
            }
            if (lr < 1e-8) break;
        }
    }
    return result;
}

}  // namespace detail

/// Trains a siamese (recurrent) network and returns the parameters with the
/// best validation AUC together with the evaluation log.
inline TrainResult<SrnParams> train(const Dataset& train_data, const Dataset& val_data, const TrainConfig& cfg,
                                    const std::optional<ForgeryMap>& forgeries = std::nullopt) {
    return detail::fit(detail::SrnModel{cfg, train_data.dim}, train_data, val_data, cfg, forgeries);
}

/// Same recipe for the naive logistic model (hidden size, pooling and
/// dropout settings are ignored).
inline TrainResult<LogisticParams> train_logistic(const Dataset& train_data, const Dataset& val_data,
                                                  const TrainConfig& cfg,
                                                  const std::optional<ForgeryMap>& forgeries = std::nullopt) {
    return detail::fit(detail::LogisticModel{cfg, train_data.dim}, train_data, val_data, cfg, forgeries);
}

}  // namespace srn

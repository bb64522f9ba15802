#pragma once

// Siamese recurrent network forward pass plus the non-recurrent and naive
// logistic variants, and the JSON checkpoint format.

#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "srn/data.hpp"
#include "srn/numerics.hpp"

namespace srn {

enum class Pooling { last, average };

inline std::string to_string(Pooling p) { return p == Pooling::last ? "last" : "average"; }

inline Pooling pooling_from_string(const std::string& s) {
    if (s == "last") return Pooling::last;
    if (s == "average") return Pooling::average;
    throw std::invalid_argument("unknown pooling mode '" + s + "'");
}

/// Shared parameters of both siamese branches. With `recurrent == false`
/// the recurrent matrix stays zero and is never trained.
struct SrnParams {
    Matrix W;  // hidden x input
    Matrix A;  // hidden x hidden
    Vector b;
    Vector v;
    double c = 0.0;
    Pooling pooling = Pooling::average;
    bool recurrent = true;

    SrnParams() = default;
    SrnParams(std::size_t input_dim, std::size_t hidden, Pooling pool, bool is_recurrent)
        : W(hidden, input_dim), A(hidden, hidden), b(hidden), v(hidden), pooling(pool), recurrent(is_recurrent) {}

    std::size_t hidden() const noexcept { return W.rows(); }
    std::size_t input_dim() const noexcept { return W.cols(); }

    bool operator==(const SrnParams&) const = default;
};

/// Draws every trainable parameter from U[lo, hi]; A stays zero when the
/// model is not recurrent.
inline SrnParams init_params(std::size_t input_dim, std::size_t hidden, Pooling pooling, bool recurrent, Rng& rng,
                             double lo = -0.1, double hi = 0.1) {
    SrnParams p(input_dim, hidden, pooling, recurrent);
    p.W = uniform_init(rng, hidden, input_dim, lo, hi);
    if (recurrent) p.A = uniform_init(rng, hidden, hidden, lo, hi);
    const Matrix bv = uniform_init(rng, 2 * hidden + 1, 1, lo, hi);
    for (std::size_t i = 0; i < hidden; ++i) {
        p.b[i] = bv(i, 0);
        p.v[i] = bv(hidden + i, 0);
    }
    p.c = bv(2 * hidden, 0);
    return p;
}

struct HiddenTrace {
    std::vector<Vector> states;          // z_1..z_T
    std::vector<Vector> preactivations;  // W x_t + A z_{t-1} + b
};

inline void check_input_dim(const SrnParams& p, const TimeSeries& s) {
    if (s.length() == 0) throw std::invalid_argument("series '" + s.id + "' is empty");
    if (s.dim() != p.input_dim())
        throw std::invalid_argument("dimension mismatch for series '" + s.id + "': model expects " +
                                    std::to_string(p.input_dim()) + ", got " + std::to_string(s.dim()));
}

/// z_t = max(0, W x_t + A z_{t-1} + b) with z_0 = 0.
inline HiddenTrace rnn_forward(const SrnParams& p, const TimeSeries& s) {
    check_input_dim(p, s);
    const std::size_t H = p.hidden();
    HiddenTrace tr;
    tr.states.reserve(s.length());
    tr.preactivations.reserve(s.length());
    for (std::size_t t = 0; t < s.length(); ++t) {
        Vector pre(H);
        gemv_acc(p.W, s.frames[t].span(), pre.span());
        if (p.recurrent && t > 0) gemv_acc(p.A, tr.states[t - 1].span(), pre.span());
        for (std::size_t i = 0; i < H; ++i) pre[i] += p.b[i];
        Vector z(H);
        for (std::size_t i = 0; i < H; ++i) z[i] = pre[i] > 0.0 ? pre[i] : 0.0;
        tr.preactivations.push_back(std::move(pre));
        tr.states.push_back(std::move(z));
    }
    return tr;
}

/// Last state, or the mean over this series' own length.
inline Vector pool(const HiddenTrace& tr, Pooling mode) {
    if (tr.states.empty()) throw std::invalid_argument("pool: empty trace");
    if (mode == Pooling::last) return tr.states.back();
    Vector h(tr.states.front().size());
    for (const auto& z : tr.states)
        for (std::size_t i = 0; i < h.size(); ++i) h[i] += z[i];
    const double inv_t = 1.0 / static_cast<double>(tr.states.size());
    for (auto& x : h) x *= inv_t;
    return h;
}

/// v^T (h1 . h2) - c. The bias is subtracted, matching "+ c" inside the
/// negated exponent of the logistic.
inline double similarity_logit(const SrnParams& p, const Vector& h1, const Vector& h2) {
    if (h1.size() != p.hidden() || h2.size() != p.hidden())
        throw std::invalid_argument("similarity: representation length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < h1.size(); ++i) s += p.v[i] * (h1[i] * h2[i]);
    return s - p.c;
}

inline double similarity(const SrnParams& p, const Vector& h1, const Vector& h2) {
    return stable_sigmoid(similarity_logit(p, h1, h2));
}

inline Vector embed(const SrnParams& p, const TimeSeries& s) { return pool(rnn_forward(p, s), p.pooling); }

inline double score_pair(const SrnParams& p, const TimeSeries& s1, const TimeSeries& s2) {
    return similarity(p, embed(p, s1), embed(p, s2));
}

// ---------------------------------------------------------------------------
// Naive logistic model: no hidden units, time-averaged features.

struct LogisticParams {
    Vector weights;
    double bias = 0.0;

    bool operator==(const LogisticParams&) const = default;
};

inline Vector time_mean(const TimeSeries& s) {
    if (s.length() == 0) throw std::invalid_argument("series '" + s.id + "' is empty");
    Vector m(s.dim());
    for (const auto& f : s.frames)
        for (std::size_t d = 0; d < m.size(); ++d) m[d] += f[d];
    const double inv = 1.0 / static_cast<double>(s.length());
    for (auto& x : m) x *= inv;
    return m;
}

inline double logistic_logit(const Vector& weights, double bias, const TimeSeries& s1, const TimeSeries& s2) {
    if (s1.dim() != weights.size() || s2.dim() != weights.size())
        throw std::invalid_argument("logistic_score: dimension mismatch (weights " + std::to_string(weights.size()) +
                                    ", series " + std::to_string(s1.dim()) + "/" + std::to_string(s2.dim()) + ")");
    const Vector m1 = time_mean(s1);
    const Vector m2 = time_mean(s2);
    double s = 0.0;
    for (std::size_t d = 0; d < weights.size(); ++d) s += weights[d] * (m1[d] * m2[d]);
    return s + bias;
}

inline double logistic_score(const Vector& weights, double bias, const TimeSeries& s1, const TimeSeries& s2) {
    return stable_sigmoid(logistic_logit(weights, bias, s1, s2));
}

inline double logistic_score(const LogisticParams& p, const TimeSeries& s1, const TimeSeries& s2) {
    return logistic_score(p.weights, p.bias, s1, s2);
}

// ---------------------------------------------------------------------------
// Checkpoints

/// A trained model together with the preprocessing it expects.
struct Checkpoint {
    std::string family;  // srn-a, srn-l, sn-a, sn-l or logistic
    std::size_t window = 1;
    std::optional<ZScore> zscore;
    std::variant<SrnParams, LogisticParams> model;

    std::size_t input_dim() const {
        if (const auto* p = std::get_if<SrnParams>(&model)) return p->input_dim();
        return std::get<LogisticParams>(model).weights.size();
    }
};

namespace detail {

inline nlohmann::ordered_json matrix_to_json(const Matrix& m) {
    auto rows = nlohmann::ordered_json::array();
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j, std::size_t rows, std::size_t cols, const char* name) {
    if (!j.is_array() || j.size() != rows) throw std::runtime_error(std::string("checkpoint: bad shape for ") + name);
    Matrix m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto row = j[r].get<std::vector<double>>();
        if (row.size() != cols) throw std::runtime_error(std::string("checkpoint: bad shape for ") + name);
        std::copy(row.begin(), row.end(), m.row(r).begin());
    }
    return m;
}

inline Vector vector_from_json(const nlohmann::json& j, std::size_t n, const char* name) {
    auto v = j.get<std::vector<double>>();
    if (v.size() != n) throw std::runtime_error(std::string("checkpoint: bad length for ") + name);
    return Vector(std::move(v));
}

}  // namespace detail

inline nlohmann::ordered_json checkpoint_to_json(const Checkpoint& ck) {
    nlohmann::ordered_json j;
    j["format"] = "srn-checkpoint";
    j["version"] = 1;
    j["family"] = ck.family;
    j["window"] = ck.window;
    j["input_dim"] = ck.input_dim();
    if (const auto* p = std::get_if<SrnParams>(&ck.model)) {
        j["hidden"] = p->hidden();
        j["pooling"] = to_string(p->pooling);
        j["recurrent"] = p->recurrent;
        j["W"] = detail::matrix_to_json(p->W);
        j["A"] = detail::matrix_to_json(p->A);
        j["b"] = p->b.values();
        j["v"] = p->v.values();
        j["c"] = p->c;
    } else {
        const auto& l = std::get<LogisticParams>(ck.model);
        j["weights"] = l.weights.values();
        j["bias"] = l.bias;
    }
    if (ck.zscore) {
        j["zscore"] = {{"mean", ck.zscore->mean.values()}, {"scale", ck.zscore->scale.values()}};
    } else {
        j["zscore"] = nullptr;
    }
    return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "srn-checkpoint") throw std::runtime_error("not a model checkpoint");
    if (j.value("version", 0) != 1) throw std::runtime_error("unsupported checkpoint version");
    Checkpoint ck;
    ck.family = j.at("family").get<std::string>();
    ck.window = j.at("window").get<std::size_t>();
    const auto input_dim = j.at("input_dim").get<std::size_t>();
    if (ck.family == "logistic") {
        ck.model = LogisticParams{detail::vector_from_json(j.at("weights"), input_dim, "weights"),
                                  j.at("bias").get<double>()};
    } else {
        const auto hidden = j.at("hidden").get<std::size_t>();
        SrnParams p(input_dim, hidden, pooling_from_string(j.at("pooling").get<std::string>()),
                    j.at("recurrent").get<bool>());
        p.W = detail::matrix_from_json(j.at("W"), hidden, input_dim, "W");
        p.A = detail::matrix_from_json(j.at("A"), hidden, hidden, "A");
        p.b = detail::vector_from_json(j.at("b"), hidden, "b");
        p.v = detail::vector_from_json(j.at("v"), hidden, "v");
        p.c = j.at("c").get<double>();
        if (!p.recurrent && !p.A.is_zero()) throw std::runtime_error("checkpoint: non-recurrent model with nonzero A");
        ck.model = std::move(p);
    }
    if (j.contains("zscore") && !j["zscore"].is_null()) {
        const std::size_t raw_dim = input_dim / std::max<std::size_t>(ck.window, 1);
        ck.zscore = ZScore{detail::vector_from_json(j["zscore"].at("mean"), raw_dim, "zscore.mean"),
                           detail::vector_from_json(j["zscore"].at("scale"), raw_dim, "zscore.scale")};
    }
    return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
    out << checkpoint_to_json(ck).dump(2) << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
    return checkpoint_from_json(nlohmann::json::parse(in));
}

}  // namespace srn

#pragma once

// Gaussian-emission HMM baselines: forward log-likelihood, Baum-Welch,
// Fisher scores in unconstrained coordinates, the identity-metric Fisher
// kernel and nearest-similar-pair Fisher vector scoring.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "srn/data.hpp"
#include "srn/numerics.hpp"

namespace srn {

inline constexpr double kVarianceFloor = 1e-4;

struct HmmParams {
    std::size_t K = 0;
    std::size_t dim = 0;
    Vector pi;
    Matrix trans;
    std::vector<Vector> means;
    std::vector<Vector> variances;
    std::uint64_t seed = 0;

    void validate() const {
        if (pi.size() != K || trans.rows() != K || trans.cols() != K || means.size() != K || variances.size() != K)
            throw std::invalid_argument("HmmParams: inconsistent state count");
        double s = 0.0;
        for (double p : pi) s += p;
        if (std::abs(s - 1.0) > 1e-10) throw std::invalid_argument("HmmParams: pi does not sum to 1");
        for (std::size_t i = 0; i < K; ++i) {
            double r = 0.0;
            for (double a : trans.row(i)) r += a;
            if (std::abs(r - 1.0) > 1e-10) throw std::invalid_argument("HmmParams: transition row not stochastic");
            if (means[i].size() != dim || variances[i].size() != dim)
                throw std::invalid_argument("HmmParams: emission dimension mismatch");
            for (double v : variances[i])
                if (!(v > 0.0)) throw std::invalid_argument("HmmParams: non-positive variance");
        }
    }
};

/// Unconstrained coordinates: K*K transition logits, K*dim means,
/// K*dim log-variances, K initial-state logits, in that order.
using FisherScore = Vector;

inline std::size_t fisher_score_length(std::size_t K, std::size_t dim) { return K * K + 2 * K * dim + K; }

inline double log_gaussian(const Vector& x, const Vector& mean, const Vector& var) {
    double s = 0.0;
    for (std::size_t d = 0; d < x.size(); ++d) {
        const double diff = x[d] - mean[d];
        s += std::log(2.0 * std::numbers::pi * var[d]) + diff * diff / var[d];
    }
    return -0.5 * s;
}

namespace detail {

inline void check_dim(const HmmParams& hmm, const TimeSeries& s) {
    if (s.length() == 0) throw std::invalid_argument("hmm: empty series '" + s.id + "'");
    if (s.dim() != hmm.dim)
        throw std::invalid_argument("hmm: dimension mismatch for series '" + s.id + "': model " +
                                    std::to_string(hmm.dim) + ", series " + std::to_string(s.dim()));
}

/// Scaled forward-backward. Emissions are shifted by their per-step max
/// before exponentiating; alpha rows are normalized to sum to one.
struct Posteriors {
    double loglik = 0.0;
    std::vector<Vector> gamma;  // T x K
    Matrix xi_sum;              // K x K, summed over t
    Vector gamma_head_sum;      // K, sum of gamma over t < T
};

inline Posteriors forward_backward(const HmmParams& hmm, const TimeSeries& s, bool want_posteriors) {
    check_dim(hmm, s);
    const std::size_t T = s.length();
    const std::size_t K = hmm.K;
    std::vector<Vector> b(T, Vector(K));
    std::vector<double> scale(T);
    Posteriors post;
    for (std::size_t t = 0; t < T; ++t) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < K; ++k) {
            b[t][k] = log_gaussian(s.frames[t], hmm.means[k], hmm.variances[k]);
            m = std::max(m, b[t][k]);
        }
        for (std::size_t k = 0; k < K; ++k) b[t][k] = std::exp(b[t][k] - m);
        post.loglik += m;
    }

    std::vector<Vector> alpha(T, Vector(K));
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t j = 0; j < K; ++j) {
            double pred = 0.0;
            if (t == 0) {
                pred = hmm.pi[j];
            } else {
                for (std::size_t i = 0; i < K; ++i) pred += alpha[t - 1][i] * hmm.trans(i, j);
            }
            alpha[t][j] = pred * b[t][j];
        }
        double c = 0.0;
        for (double a : alpha[t]) c += a;
        if (!(c > 0.0)) throw std::domain_error("hmm: zero likelihood at step " + std::to_string(t));
        for (auto& a : alpha[t]) a /= c;
        scale[t] = c;
        post.loglik += std::log(c);
    }
    if (!want_posteriors) return post;

    std::vector<Vector> beta(T, Vector(K, 1.0));
    for (std::size_t t = T - 1; t-- > 0;) {
        for (std::size_t i = 0; i < K; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < K; ++j) acc += hmm.trans(i, j) * b[t + 1][j] * beta[t + 1][j];
            beta[t][i] = acc / scale[t + 1];
        }
    }
    post.gamma.assign(T, Vector(K));
    post.xi_sum = Matrix(K, K);
    post.gamma_head_sum = Vector(K);
    for (std::size_t t = 0; t < T; ++t) {
        double norm = 0.0;
        for (std::size_t k = 0; k < K; ++k) norm += post.gamma[t][k] = alpha[t][k] * beta[t][k];
        for (auto& g : post.gamma[t]) g /= norm;
        if (t + 1 < T) {
            for (std::size_t k = 0; k < K; ++k) post.gamma_head_sum[k] += post.gamma[t][k];
            for (std::size_t i = 0; i < K; ++i)
                for (std::size_t j = 0; j < K; ++j)
                    post.xi_sum(i, j) += alpha[t][i] * hmm.trans(i, j) * b[t + 1][j] * beta[t + 1][j] / scale[t + 1];
        }
    }
    return post;
}

}  // namespace detail

inline double hmm_loglik(const HmmParams& hmm, const TimeSeries& s) {
    return detail::forward_backward(hmm, s, false).loglik;
}

inline double hmm_loglik(const HmmParams& hmm, const Dataset& ds) {
    double total = 0.0;
    for (const auto& s : ds.series) total += hmm_loglik(hmm, s);
    return total;
}

/// Gradient of hmm_loglik in the unconstrained coordinates.
inline FisherScore fisher_score(const HmmParams& hmm, const TimeSeries& s) {
    const auto post = detail::forward_backward(hmm, s, true);
    const std::size_t K = hmm.K, D = hmm.dim;
    FisherScore g(fisher_score_length(K, D));
    std::size_t k0 = 0;
    for (std::size_t i = 0; i < K; ++i)
        for (std::size_t j = 0; j < K; ++j) g[k0 + i * K + j] = post.xi_sum(i, j) - hmm.trans(i, j) * post.gamma_head_sum[i];
    k0 += K * K;
    const std::size_t v0 = k0 + K * D;
    for (std::size_t t = 0; t < s.length(); ++t) {
        const auto& x = s.frames[t];
        for (std::size_t k = 0; k < K; ++k) {
            const double w = post.gamma[t][k];
            for (std::size_t d = 0; d < D; ++d) {
                const double diff = x[d] - hmm.means[k][d];
                const double var = hmm.variances[k][d];
                g[k0 + k * D + d] += w * diff / var;
                g[v0 + k * D + d] += w * 0.5 * (diff * diff / var - 1.0);
            }
        }
    }
    const std::size_t p0 = v0 + K * D;
    for (std::size_t k = 0; k < K; ++k) g[p0 + k] = post.gamma[0][k] - hmm.pi[k];
    return g;
}

/// Unconstrained coordinates of `hmm` (same layout as FisherScore).
inline Vector to_unconstrained(const HmmParams& hmm) {
    const std::size_t K = hmm.K, D = hmm.dim;
    Vector x(fisher_score_length(K, D));
    std::size_t k = 0;
    for (double a : hmm.trans.span()) x[k++] = std::log(a);
    for (const auto& m : hmm.means)
        for (double v : m) x[k++] = v;
    for (const auto& var : hmm.variances)
        for (double v : var) x[k++] = std::log(v);
    for (double p : hmm.pi) x[k++] = std::log(p);
    return x;
}

inline HmmParams from_unconstrained(std::size_t K, std::size_t D, std::span<const double> x) {
    if (x.size() != fisher_score_length(K, D)) throw std::invalid_argument("from_unconstrained: size mismatch");
    auto softmax = [](std::span<const double> z, std::span<double> out) {
        const double m = *std::max_element(z.begin(), z.end());
        double s = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) s += out[i] = std::exp(z[i] - m);
        for (auto& o : out) o /= s;
    };
    HmmParams h;
    h.K = K;
    h.dim = D;
    h.trans = Matrix(K, K);
    for (std::size_t i = 0; i < K; ++i) softmax(x.subspan(i * K, K), h.trans.row(i));
    std::size_t k = K * K;
    h.means.assign(K, Vector(D));
    for (auto& m : h.means)
        for (auto& v : m) v = x[k++];
    h.variances.assign(K, Vector(D));
    for (auto& var : h.variances)
        for (auto& v : var) v = std::exp(x[k++]);
    h.pi = Vector(K);
    softmax(x.subspan(k, K), h.pi.span());
    return h;
}

// ---------------------------------------------------------------------------
// Baum-Welch

struct HmmFit {
    HmmParams params;
    std::vector<double> loglik;  // total data log-likelihood before the first and after every iteration
};

namespace detail {

inline void floor_variances(HmmParams& h) {
    for (auto& var : h.variances)
        for (auto& v : var) v = std::max(v, kVarianceFloor);
}

// K-means style initialization: K random frames seed the centres, a few
// Lloyd rounds assign frames to states, and per-state statistics follow.
inline HmmParams kmeans_init(const Dataset& ds, std::size_t K, Rng& rng) {
    const std::size_t D = ds.dim;
    std::vector<const Vector*> frames;
    std::vector<std::pair<std::size_t, std::size_t>> origin;  // (series, t)
    for (std::size_t n = 0; n < ds.size(); ++n)
        for (std::size_t t = 0; t < ds[n].length(); ++t) {
            frames.push_back(&ds[n].frames[t]);
            origin.emplace_back(n, t);
        }
    const std::size_t F = frames.size();

    std::vector<std::size_t> order(F);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::vector<Vector> centres;
    for (std::size_t k = 0; k < K; ++k) centres.push_back(*frames[order[k % F]]);

    std::vector<std::size_t> assign(F, 0);
    auto sqdist = [&](const Vector& a, const Vector& b) {
        double s = 0.0;
        for (std::size_t d = 0; d < D; ++d) s += (a[d] - b[d]) * (a[d] - b[d]);
        return s;
    };
    for (int round = 0; round < 10; ++round) {
        for (std::size_t f = 0; f < F; ++f) {
            std::size_t best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < K; ++k) {
                const double dd = sqdist(*frames[f], centres[k]);
                if (dd < bd) bd = dd, best = k;
            }
            assign[f] = best;
        }
        std::vector<Vector> sums(K, Vector(D));
        std::vector<double> counts(K, 0.0);
        for (std::size_t f = 0; f < F; ++f) {
            for (std::size_t d = 0; d < D; ++d) sums[assign[f]][d] += (*frames[f])[d];
            counts[assign[f]] += 1.0;
        }
        for (std::size_t k = 0; k < K; ++k)
            if (counts[k] > 0.0)
                for (std::size_t d = 0; d < D; ++d) centres[k][d] = sums[k][d] / counts[k];
    }

    Vector gmean(D), gvar(D);
    for (auto* f : frames)
        for (std::size_t d = 0; d < D; ++d) gmean[d] += (*f)[d] / static_cast<double>(F);
    for (auto* f : frames)
        for (std::size_t d = 0; d < D; ++d) gvar[d] += ((*f)[d] - gmean[d]) * ((*f)[d] - gmean[d]) / static_cast<double>(F);

    HmmParams h;
    h.K = K;
    h.dim = D;
    h.pi = Vector(K, 1.0 / static_cast<double>(K));
    h.means.assign(K, Vector(D));
    h.variances.assign(K, Vector(D));
    std::vector<double> counts(K, 0.0);
    for (std::size_t f = 0; f < F; ++f) counts[assign[f]] += 1.0;
    for (std::size_t k = 0; k < K; ++k) {
        if (counts[k] == 0.0) {
            h.means[k] = centres[k];
            h.variances[k] = gvar;
            continue;
        }
        h.means[k] = centres[k];
        for (std::size_t f = 0; f < F; ++f)
            if (assign[f] == k)
                for (std::size_t d = 0; d < D; ++d) {
                    const double diff = (*frames[f])[d] - centres[k][d];
                    h.variances[k][d] += diff * diff / counts[k];
                }
    }
    floor_variances(h);

    // Transition counts from consecutive assignments, add-one smoothed.
    h.trans = Matrix(K, K, 1.0);
    for (std::size_t f = 1; f < F; ++f)
        if (origin[f].first == origin[f - 1].first) h.trans(assign[f - 1], assign[f]) += 1.0;
    for (std::size_t i = 0; i < K; ++i) {
        double r = 0.0;
        for (double a : h.trans.row(i)) r += a;
        for (auto& a : h.trans.row(i)) a /= r;
    }
    return h;
}

}  // namespace detail

inline HmmFit baum_welch(const Dataset& ds, std::size_t K, std::size_t iters, std::uint64_t seed) {
    if (K == 0) throw std::invalid_argument("baum_welch: K must be >= 1");
    if (ds.empty()) throw DataError("baum_welch: empty dataset");
    Rng rng(seed);
    HmmFit fit{detail::kmeans_init(ds, K, rng), {}};
    fit.params.seed = seed;
    const std::size_t D = ds.dim;

    for (std::size_t it = 0; it <= iters; ++it) {
        double total = 0.0;
        Vector pi_acc(K), occ(K), head_occ(K);
        Matrix xi_acc(K, K);
        std::vector<Vector> x_acc(K, Vector(D)), xx_acc(K, Vector(D));
        for (const auto& s : ds.series) {
            const auto post = detail::forward_backward(fit.params, s, true);
            total += post.loglik;
            for (std::size_t k = 0; k < K; ++k) {
                pi_acc[k] += post.gamma[0][k];
                head_occ[k] += post.gamma_head_sum[k];
            }
            for (std::size_t i = 0; i < K; ++i)
                for (std::size_t j = 0; j < K; ++j) xi_acc(i, j) += post.xi_sum(i, j);
            for (std::size_t t = 0; t < s.length(); ++t)
                for (std::size_t k = 0; k < K; ++k) {
                    const double w = post.gamma[t][k];
                    occ[k] += w;
                    for (std::size_t d = 0; d < D; ++d) {
                        x_acc[k][d] += w * s.frames[t][d];
                        xx_acc[k][d] += w * s.frames[t][d] * s.frames[t][d];
                    }
                }
        }
        fit.loglik.push_back(total);
        if (it == iters) break;

        auto& h = fit.params;
        const double n_series = static_cast<double>(ds.size());
        for (std::size_t k = 0; k < K; ++k) h.pi[k] = pi_acc[k] / n_series;
        for (std::size_t i = 0; i < K; ++i) {
            double r = 0.0;
            for (std::size_t j = 0; j < K; ++j) r += xi_acc(i, j);
            if (r > 0.0)
                for (std::size_t j = 0; j < K; ++j) h.trans(i, j) = xi_acc(i, j) / r;
        }
        for (std::size_t k = 0; k < K; ++k) {
            if (!(occ[k] > 0.0)) continue;
            for (std::size_t d = 0; d < D; ++d) {
                const double mu = x_acc[k][d] / occ[k];
                h.means[k][d] = mu;
                h.variances[k][d] = std::max(xx_acc[k][d] / occ[k] - mu * mu, kVarianceFloor);
            }
        }
    }
    return fit;
}

/// Draws a length-T series from the HMM's generative process.
inline TimeSeries sample_hmm(const HmmParams& hmm, std::size_t T, Rng& rng, std::string id = "hmm") {
    auto draw = [&](std::span<const double> probs) {
        const double u = rng.uniform();
        double acc = 0.0;
        for (std::size_t k = 0; k < probs.size(); ++k) {
            acc += probs[k];
            if (u < acc) return k;
        }
        return probs.size() - 1;
    };
    TimeSeries s{std::move(id), std::nullopt, {}};
    std::size_t state = draw(hmm.pi.span());
    for (std::size_t t = 0; t < T; ++t) {
        if (t > 0) state = draw(hmm.trans.row(state));
        Vector x(hmm.dim);
        for (std::size_t d = 0; d < hmm.dim; ++d)
            x[d] = hmm.means[state][d] + std::sqrt(hmm.variances[state][d]) * rng.normal();
        s.frames.push_back(std::move(x));
    }
    return s;
}

// ---------------------------------------------------------------------------
// Kernels

/// Per-coordinate scaling by the inverse standard deviation of a reference
/// set of scores (coordinates with zero spread are left unscaled).
struct FisherNormalizer {
    Vector scale;

    static FisherNormalizer fit(const std::vector<FisherScore>& scores) {
        if (scores.empty()) throw std::invalid_argument("FisherNormalizer: no scores");
        const std::size_t n = scores.front().size();
        Vector mean(n), var(n);
        for (const auto& g : scores)
            for (std::size_t i = 0; i < n; ++i) mean[i] += g[i] / static_cast<double>(scores.size());
        for (const auto& g : scores)
            for (std::size_t i = 0; i < n; ++i) var[i] += (g[i] - mean[i]) * (g[i] - mean[i]) / static_cast<double>(scores.size());
        FisherNormalizer f{Vector(n, 1.0)};
        for (std::size_t i = 0; i < n; ++i)
            if (var[i] > 0.0) f.scale[i] = 1.0 / std::sqrt(var[i]);
        return f;
    }

    FisherScore apply(FisherScore g) const {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= scale[i];
        return g;
    }
};

/// g1^T g2: the Fisher kernel with the information matrix replaced by I.
inline double fisher_kernel(const FisherScore& g1, const FisherScore& g2) {
    if (g1.size() != g2.size()) throw std::invalid_argument("fisher_kernel: score length mismatch");
    return dot(g1.span(), g2.span());
}

inline double fisher_kernel(const FisherScore& g1, const FisherScore& g2, const FisherNormalizer& norm) {
    return fisher_kernel(norm.apply(g1), norm.apply(g2));
}

/// Pair representation: the two scores concatenated, ordered by series id.
inline Vector concat_pair(const FisherScore& ga, const std::string& id_a, const FisherScore& gb, const std::string& id_b) {
    const bool swap = id_b < id_a;
    const auto& first = swap ? gb : ga;
    const auto& second = swap ? ga : gb;
    std::vector<double> v(first.begin(), first.end());
    v.insert(v.end(), second.begin(), second.end());
    return Vector(std::move(v));
}

struct FisherReference {
    Vector features;  // concatenated pair scores
    bool similar;
};

/// Negative Euclidean distance from the query pair to its nearest similar
/// reference pair.
inline double fisher_vector_score(const Vector& query, const std::vector<FisherReference>& refs) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& r : refs) {
        if (!r.similar) continue;
        if (r.features.size() != query.size()) throw std::invalid_argument("fisher_vector_score: length mismatch");
        double s = 0.0;
        for (std::size_t i = 0; i < query.size(); ++i) s += (query[i] - r.features[i]) * (query[i] - r.features[i]);
        best = std::min(best, s);
    }
    if (!std::isfinite(best)) throw std::invalid_argument("fisher_vector_score: no similar reference pairs");
    return -std::sqrt(best);
}

inline double fisher_vector_score(const std::pair<FisherScore, FisherScore>& query,
                                  const std::vector<FisherReference>& refs) {
    std::vector<double> q(query.first.begin(), query.first.end());
    q.insert(q.end(), query.second.begin(), query.second.end());
    return fisher_vector_score(Vector(std::move(q)), refs);
}

// ---------------------------------------------------------------------------
// Checkpoint

inline nlohmann::ordered_json hmm_to_json(const HmmParams& h) {
    nlohmann::ordered_json j;
    j["format"] = "srn-hmm";
    j["version"] = 1;
    j["K"] = h.K;
    j["dim"] = h.dim;
    j["seed"] = h.seed;
    j["pi"] = h.pi.values();
    auto trans = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < h.K; ++i) {
        auto row = h.trans.row(i);
        trans.push_back(std::vector<double>(row.begin(), row.end()));
    }
    j["trans"] = std::move(trans);
    auto means = nlohmann::ordered_json::array();
    auto vars = nlohmann::ordered_json::array();
    for (std::size_t k = 0; k < h.K; ++k) {
        means.push_back(h.means[k].values());
        vars.push_back(h.variances[k].values());
    }
    j["means"] = std::move(means);
    j["variances"] = std::move(vars);
    return j;
}

inline HmmParams hmm_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "srn-hmm") throw std::runtime_error("not an HMM checkpoint");
    HmmParams h;
    h.K = j.at("K").get<std::size_t>();
    h.dim = j.at("dim").get<std::size_t>();
    h.seed = j.at("seed").get<std::uint64_t>();
    h.pi = Vector(j.at("pi").get<std::vector<double>>());
    h.trans = Matrix(h.K, h.K);
    const auto& trans = j.at("trans");
    if (trans.size() != h.K) throw std::runtime_error("HMM checkpoint: bad transition matrix");
    for (std::size_t i = 0; i < h.K; ++i) {
        const auto row = trans[i].get<std::vector<double>>();
        if (row.size() != h.K) throw std::runtime_error("HMM checkpoint: bad transition matrix");
        std::copy(row.begin(), row.end(), h.trans.row(i).begin());
    }
    for (const auto& m : j.at("means")) h.means.emplace_back(m.get<std::vector<double>>());
    for (const auto& v : j.at("variances")) h.variances.emplace_back(v.get<std::vector<double>>());
    h.validate();
    return h;
}

inline void save_hmm(const HmmParams& h, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write HMM checkpoint: " + path.string());
    out << hmm_to_json(h).dump(2) << '\n';
}

inline HmmParams load_hmm(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open HMM checkpoint: " + path.string());
    return hmm_from_json(nlohmann::json::parse(in));
}

}  // namespace srn

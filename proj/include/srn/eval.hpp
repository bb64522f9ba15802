#pragma once

#include <algorithm>
#include <cmath>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "srn/data.hpp"
#include "srn/model.hpp"
#include "srn/numerics.hpp"

namespace srn {

/// Shortest decimal text that reads back to the same double.
inline std::string format_real(double x) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
    if (ec != std::errc{}) throw std::runtime_error("format_real: conversion failed");
    return std::string(buf, end);
}

/// Area under the ROC curve in Mann-Whitney form: the probability that a
/// random positive outscores a random negative, ties counted as one half.
/// One sort plus a pass over tie groups.
inline double auc(std::span<const double> scores, const std::vector<bool>& positive) {
    if (scores.size() != positive.size()) throw std::invalid_argument("auc: scores and labels differ in length");
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (bool p : positive) n_pos += p ? 1 : 0;
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("auc: need at least one positive and one negative");
    for (double x : scores)
        if (std::isnan(x)) throw std::invalid_argument("auc: NaN score");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Twice the rank sum of the positives (midranks), kept integral.
    std::uint64_t twice_rank_sum = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        // ranks i+1..j share the midrank (i+1+j)/2
        std::size_t pos_in_group = 0;
        for (std::size_t k = i; k < j; ++k) pos_in_group += positive[order[k]] ? 1 : 0;
        twice_rank_sum += static_cast<std::uint64_t>(pos_in_group) * (i + 1 + j);
        i = j;
    }
    // 2U = 2R - n_pos (n_pos + 1)
    const std::uint64_t twice_u = twice_rank_sum - static_cast<std::uint64_t>(n_pos) * (n_pos + 1);
    return static_cast<double>(twice_u) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

/// Balanced, seeded subsample of a pair set (without replacement). With no
/// limit every pair is returned.
inline std::vector<PairSample> select_pairs(const PairSet& pairs, std::optional<std::size_t> max_pairs, Rng& rng) {
    std::vector<PairSample> out;
    const std::size_t total = pairs.similar.size() + pairs.dissimilar.size();
    if (!max_pairs || *max_pairs >= total) {
        for (const auto& p : pairs.similar) out.push_back({p.first, p.second, true});
        for (const auto& p : pairs.dissimilar) out.push_back({p.first, p.second, false});
        return out;
    }
    const std::size_t n_sim = std::min(*max_pairs / 2, pairs.similar.size());
    const std::size_t n_dis = std::min(*max_pairs - n_sim, pairs.dissimilar.size());
    auto pick = [&](std::size_t n, std::size_t k) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.index(n - i)]);
        idx.resize(k);
        std::sort(idx.begin(), idx.end());
        return idx;
    };
    for (auto i : pick(pairs.similar.size(), n_sim)) out.push_back({pairs.similar[i].first, pairs.similar[i].second, true});
    for (auto i : pick(pairs.dissimilar.size(), n_dis))
        out.push_back({pairs.dissimilar[i].first, pairs.dissimilar[i].second, false});
    return out;
}

/// A similarity function over two series; larger means more similar.
struct Scorer {
    std::string name;
    std::function<double(const TimeSeries&, const TimeSeries&)> score;

    double operator()(const TimeSeries& a, const TimeSeries& b) const { return score(a, b); }
};

struct EvalReport {
    std::string scorer;
    std::string split;
    std::string metric;
    double value = 0.0;
    std::size_t count = 0;  // pairs for AUC, queries for one-shot
    std::uint64_t seed = 0;
};

inline nlohmann::ordered_json report_to_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    j["format"] = "srn-eval-report";
    j["version"] = 1;
    j["scorer"] = r.scorer;
    j["split"] = r.split;
    j["metric"] = r.metric;
    j["value"] = r.value;
    j["count"] = r.count;
    j["seed"] = r.seed;
    return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "srn-eval-report") throw std::runtime_error("not an evaluation report");
    return {j.at("scorer").get<std::string>(), j.at("split").get<std::string>(), j.at("metric").get<std::string>(),
            j.at("value").get<double>(),       j.at("count").get<std::size_t>(),  j.at("seed").get<std::uint64_t>()};
}

inline void save_report(const EvalReport& r, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write report: " + path.string());
    out << report_to_json(r).dump(2) << '\n';
}

namespace detail {

/// Runs body(i) for i in [0, n) across `workers` threads. Each index is
/// handled exactly once; callers write results to slot i.
template <class Body>
void parallel_for(std::size_t n, std::size_t workers, Body&& body) {
    if (workers <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    workers = std::min(workers, n);
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) body(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Scores every selected pair and reports the AUC with similar pairs as
/// positives.
inline EvalReport evaluate_pairs(const Scorer& scorer, const Dataset& ds, const PairSet& pairs,
                                 std::optional<std::size_t> max_pairs, std::uint64_t seed,
                                 std::string split_name = "test", std::size_t workers = 1) {
    if (pairs.similar.empty() || pairs.dissimilar.empty())
        throw std::invalid_argument("evaluate_pairs: need both similar and dissimilar pairs");
    Rng rng(seed);
    const auto selected = select_pairs(pairs, max_pairs, rng);
    std::vector<double> scores(selected.size());
    std::vector<bool> labels(selected.size());
    for (std::size_t k = 0; k < selected.size(); ++k) labels[k] = selected[k].similar;
    detail::parallel_for(selected.size(), workers, [&](std::size_t k) {
        scores[k] = scorer(ds[selected[k].first], ds[selected[k].second]);
    });
    return {scorer.name, std::move(split_name), "auc", auc(scores, labels), selected.size(), seed};
}

/// One-shot 1-NN accuracy with rotating exemplars. Each class's members are
/// shuffled once (seeded); fold f uses member f mod n_c of every class as
/// that class's single exemplar and classifies all remaining series. There
/// are max_c n_c folds. Score ties go to the smallest class id.
inline EvalReport one_shot(const Scorer& scorer, const Dataset& test, std::uint64_t seed, std::size_t workers = 1,
                           std::string split_name = "test") {
    auto by_class = detail::members_by_class(test);
    if (by_class.empty()) throw std::invalid_argument("one_shot: empty test set");
    for (const auto& [label, members] : by_class)
        if (members.size() < 2)
            throw DataError("one_shot: class " + std::to_string(label) + " has a single series");

    Rng rng(seed);
    std::size_t folds = 0;
    for (auto& [label, members] : by_class) {
        rng.shuffle(members);
        folds = std::max(folds, members.size());
    }

    double acc_sum = 0.0;
    std::size_t total_queries = 0;
    for (std::size_t f = 0; f < folds; ++f) {
        std::vector<std::pair<int, std::size_t>> exemplars;  // (class, index), ascending class id
        std::vector<bool> is_exemplar(test.size(), false);
        for (const auto& [label, members] : by_class) {
            const std::size_t e = members[f % members.size()];
            exemplars.emplace_back(label, e);
            is_exemplar[e] = true;
        }
        std::vector<std::size_t> queries;
        for (std::size_t i = 0; i < test.size(); ++i)
            if (!is_exemplar[i]) queries.push_back(i);

        std::vector<char> correct(queries.size(), 0);
        detail::parallel_for(queries.size(), workers, [&](std::size_t q) {
            const auto& query = test[queries[q]];
            int best_class = exemplars.front().first;
            double best = -std::numeric_limits<double>::infinity();
            for (const auto& [label, e] : exemplars) {
                const double s = scorer(query, test[e]);
                if (s > best) {
                    best = s;
                    best_class = label;
                }
            }
            correct[q] = (best_class == *query.label) ? 1 : 0;
        });
        const auto hits = std::count(correct.begin(), correct.end(), 1);
        acc_sum += static_cast<double>(hits) / static_cast<double>(queries.size());
        total_queries += queries.size();
    }
    return {scorer.name, std::move(split_name), "one-shot", acc_sum / static_cast<double>(folds), total_queries, seed};
}

/// CSV: a version comment line, a header `id,label,h_1..h_H`, then one row
/// per series. Unlabeled series leave the label field empty.
inline void export_embeddings(const SrnParams& params, const Dataset& ds, const std::filesystem::path& path) {
    if (ds.dim != params.input_dim())
        throw std::invalid_argument("export_embeddings: model expects dim " + std::to_string(params.input_dim()) +
                                    ", dataset has " + std::to_string(ds.dim));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write embeddings: " + path.string());
    out << "# srn-embeddings v1\n";
    out << "id,label";
    for (std::size_t i = 1; i <= params.hidden(); ++i) out << ",h_" << i;
    out << '\n';
    for (const auto& s : ds.series) {
        const Vector h = embed(params, s);
        out << s.id << ',';
        if (s.label) out << *s.label;
        for (double x : h) out << ',' << format_real(x);
        out << '\n';
    }
    if (!out) throw std::runtime_error("failed writing embeddings: " + path.string());
}

}  // namespace srn

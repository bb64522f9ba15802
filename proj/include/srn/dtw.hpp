#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "srn/data.hpp"

namespace srn {

enum class LocalDistance { euclidean, squared_euclidean };

struct DtwOptions {
    LocalDistance local = LocalDistance::euclidean;
    /// Sakoe-Chiba half-width; widened to |T1 - T2| so a path always exists.
    std::optional<std::size_t> band;
    bool materialize_path = false;
};

struct DtwResult {
    double cost = 0.0;
    std::size_t path_length = 0;
    std::optional<std::vector<std::pair<std::size_t, std::size_t>>> path;  // 1-based (i, j)
};

inline double local_distance(const Vector& a, const Vector& b, LocalDistance kind) {
    double s = 0.0;
    for (std::size_t d = 0; d < a.size(); ++d) {
        const double diff = a[d] - b[d];
        s += diff * diff;
    }
    return kind == LocalDistance::euclidean ? std::sqrt(s) : s;
}

/// Unconstrained (or banded) DTW with both endpoints pinned:
/// D(i,j) = local(i,j) + min(D(i-1,j), D(i,j-1), D(i-1,j-1)).
/// Two rolling rows over the shorter series unless the path is requested.
inline DtwResult dtw(const TimeSeries& s1, const TimeSeries& s2, const DtwOptions& opt = {}) {
    if (s1.length() == 0 || s2.length() == 0) throw std::invalid_argument("dtw: empty series");
    if (s1.dim() != s2.dim())
        throw std::invalid_argument("dtw: dimension mismatch (" + std::to_string(s1.dim()) + " vs " +
                                    std::to_string(s2.dim()) + ")");
    constexpr double inf = std::numeric_limits<double>::infinity();
    const std::size_t n1 = s1.length();
    const std::size_t n2 = s2.length();
    const std::size_t half_width =
        opt.band ? std::max(*opt.band, n1 > n2 ? n1 - n2 : n2 - n1) : std::numeric_limits<std::size_t>::max();
    auto in_band = [&](std::size_t i, std::size_t j) { return (i > j ? i - j : j - i) <= half_width; };

    if (opt.materialize_path) {
        std::vector<double> D(n1 * n2, inf);
        std::vector<std::size_t> L(n1 * n2, 0);
        auto at = [&](std::size_t i, std::size_t j) { return i * n2 + j; };
        for (std::size_t i = 0; i < n1; ++i) {
            for (std::size_t j = 0; j < n2; ++j) {
                if (!in_band(i, j)) continue;
                const double c = local_distance(s1.frames[i], s2.frames[j], opt.local);
                if (i == 0 && j == 0) {
                    D[at(i, j)] = c;
                    L[at(i, j)] = 1;
                    continue;
                }
                double best = inf;
                std::size_t len = 0;
                if (i > 0 && j > 0 && D[at(i - 1, j - 1)] < best) best = D[at(i - 1, j - 1)], len = L[at(i - 1, j - 1)];
                if (i > 0 && D[at(i - 1, j)] < best) best = D[at(i - 1, j)], len = L[at(i - 1, j)];
                if (j > 0 && D[at(i, j - 1)] < best) best = D[at(i, j - 1)], len = L[at(i, j - 1)];
                D[at(i, j)] = c + best;
                L[at(i, j)] = len + 1;
            }
        }
        DtwResult r{D[at(n1 - 1, n2 - 1)], L[at(n1 - 1, n2 - 1)], std::vector<std::pair<std::size_t, std::size_t>>{}};
        // Backtrack with the same preference order as the forward pass.
        std::size_t i = n1 - 1, j = n2 - 1;
        r.path->emplace_back(i + 1, j + 1);
        while (i > 0 || j > 0) {
            double best = inf;
            std::size_t bi = i, bj = j;
            if (i > 0 && j > 0 && D[at(i - 1, j - 1)] < best) best = D[at(i - 1, j - 1)], bi = i - 1, bj = j - 1;
            if (i > 0 && D[at(i - 1, j)] < best) best = D[at(i - 1, j)], bi = i - 1, bj = j;
            if (j > 0 && D[at(i, j - 1)] < best) best = D[at(i, j - 1)], bi = i, bj = j - 1;
            i = bi;
            j = bj;
            r.path->emplace_back(i + 1, j + 1);
        }
        std::reverse(r.path->begin(), r.path->end());
        return r;
    }

    // Rows run over the longer series, columns over the shorter one.
    const bool swap = n2 > n1;
    const TimeSeries& rows_s = swap ? s2 : s1;
    const TimeSeries& cols_s = swap ? s1 : s2;
    const std::size_t nr = rows_s.length();
    const std::size_t nc = cols_s.length();
    std::vector<double> prev(nc, inf), cur(nc, inf);
    std::vector<std::size_t> prev_len(nc, 0), cur_len(nc, 0);
    for (std::size_t i = 0; i < nr; ++i) {
        std::fill(cur.begin(), cur.end(), inf);
        for (std::size_t j = 0; j < nc; ++j) {
            if (!in_band(i, j)) continue;
            const double c = local_distance(rows_s.frames[i], cols_s.frames[j], opt.local);
            if (i == 0 && j == 0) {
                cur[j] = c;
                cur_len[j] = 1;
                continue;
            }
            double best = inf;
            std::size_t len = 0;
            if (i > 0 && j > 0 && prev[j - 1] < best) best = prev[j - 1], len = prev_len[j - 1];
            // Keep the tie order of the full-matrix pass in the original orientation.
            if (!swap) {
                if (i > 0 && prev[j] < best) best = prev[j], len = prev_len[j];
                if (j > 0 && cur[j - 1] < best) best = cur[j - 1], len = cur_len[j - 1];
            } else {
                if (j > 0 && cur[j - 1] < best) best = cur[j - 1], len = cur_len[j - 1];
                if (i > 0 && prev[j] < best) best = prev[j], len = prev_len[j];
            }
            cur[j] = c + best;
            cur_len[j] = len + 1;
        }
        std::swap(prev, cur);
        std::swap(prev_len, cur_len);
    }
    return {prev[nc - 1], prev_len[nc - 1], std::nullopt};
}

/// Negated DTW cost (larger is more similar), optionally divided by the
/// alignment path length.
inline double dtw_similarity(const TimeSeries& s1, const TimeSeries& s2, bool normalize = false,
                             const DtwOptions& opt = {}) {
    DtwOptions o = opt;
    o.materialize_path = false;
    const auto r = dtw(s1, s2, o);
    return normalize ? -r.cost / static_cast<double>(r.path_length) : -r.cost;
}

}  // namespace srn

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "srn/numerics.hpp"

namespace srn {

/// Error raised for malformed or inconsistent input data.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TimeSeries {
    std::string id;
    std::optional<int> label;
    std::vector<Vector> frames;

    std::size_t length() const noexcept { return frames.size(); }
    std::size_t dim() const noexcept { return frames.empty() ? 0 : frames.front().size(); }

    bool operator==(const TimeSeries&) const = default;
};

struct Dataset {
    std::vector<TimeSeries> series;
    std::size_t dim = 0;

    std::size_t size() const noexcept { return series.size(); }
    bool empty() const noexcept { return series.empty(); }
    const TimeSeries& operator[](std::size_t i) const { return series[i]; }

    std::vector<int> class_ids() const {
        std::set<int> ids;
        for (const auto& s : series)
            if (s.label) ids.insert(*s.label);
        return {ids.begin(), ids.end()};
    }

    /// Throws DataError if any invariant is broken.
    void validate() const {
        std::unordered_set<std::string> seen;
        for (std::size_t n = 0; n < series.size(); ++n) {
            const auto& s = series[n];
            if (s.frames.empty()) throw DataError("series '" + s.id + "' is empty");
            for (const auto& f : s.frames) {
                if (f.size() != dim)
                    throw DataError("series '" + s.id + "' has frame of dim " + std::to_string(f.size()) +
                                    ", expected " + std::to_string(dim));
                if (!all_finite(f.span())) throw DataError("series '" + s.id + "' has non-finite values");
            }
            if (!seen.insert(s.id).second) throw DataError("duplicate series id '" + s.id + "'");
        }
    }

    bool operator==(const Dataset&) const = default;
};

// ---------------------------------------------------------------------------
// JSON Lines I/O

inline Dataset load_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dataset file: " + path.string());

    Dataset ds;
    std::string line;
    std::size_t lineno = 0;
    bool have_dim = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            // covers syntax errors and number overflow (e.g. 1e999)
            throw DataError(where + "invalid JSON (" + e.what() + ")");
        }
        if (!rec.is_object() || !rec.contains("id") || !rec["id"].is_string() || !rec.contains("frames") ||
            !rec["frames"].is_array())
            throw DataError(where + "record needs string 'id' and array 'frames'");

        TimeSeries s;
        s.id = rec["id"].get<std::string>();
        if (rec.contains("label") && !rec["label"].is_null()) {
            if (!rec["label"].is_number_integer()) throw DataError(where + "'label' must be an integer");
            s.label = rec["label"].get<int>();
        }
        for (const auto& fr : rec["frames"]) {
            if (!fr.is_array()) throw DataError(where + "each frame must be an array of numbers");
            std::vector<double> values;
            values.reserve(fr.size());
            for (const auto& x : fr) {
                if (!x.is_number()) throw DataError(where + "frame entries must be numbers");
                const double v = x.get<double>();
                if (!std::isfinite(v)) throw DataError(where + "non-finite value");
                values.push_back(v);
            }
            if (!have_dim) {
                ds.dim = values.size();
                have_dim = true;
            }
            if (values.size() != ds.dim)
                throw DataError(where + "ragged frames: got dim " + std::to_string(values.size()) + ", expected " +
                                std::to_string(ds.dim));
            s.frames.emplace_back(std::move(values));
        }
        if (s.frames.empty()) throw DataError(where + "series has no frames");
        ds.series.push_back(std::move(s));
    }
    if (ds.series.empty()) throw DataError("dataset file is empty: " + path.string());
    if (ds.dim == 0) throw DataError("dataset has zero-dimensional frames: " + path.string());
    ds.validate();
    return ds;
}

inline void save_jsonl(const Dataset& ds, const std::filesystem::path& path) {
    ds.validate();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write dataset file: " + path.string());
    for (const auto& s : ds.series) {
        nlohmann::ordered_json rec;
        rec["id"] = s.id;
        if (s.label) rec["label"] = *s.label;
        auto frames = nlohmann::ordered_json::array();
        for (const auto& f : s.frames) frames.push_back(f.values());
        rec["frames"] = std::move(frames);
        out << rec.dump() << '\n';
    }
    if (!out) throw std::runtime_error("failed writing dataset file: " + path.string());
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Sliding window with stride 1: frame t of the result concatenates input
/// frames t..t+w-1.
inline TimeSeries window(const TimeSeries& s, std::size_t w) {
    if (w == 0) throw std::invalid_argument("window: size must be >= 1");
    if (s.length() < w)
        throw DataError("window: series '" + s.id + "' has length " + std::to_string(s.length()) +
                        " < window " + std::to_string(w));
    const std::size_t d = s.dim();
    TimeSeries out{s.id, s.label, {}};
    out.frames.reserve(s.length() - w + 1);
    for (std::size_t t = 0; t + w <= s.length(); ++t) {
        Vector f(d * w);
        for (std::size_t k = 0; k < w; ++k)
            std::copy(s.frames[t + k].begin(), s.frames[t + k].end(), f.begin() + static_cast<std::ptrdiff_t>(k * d));
        out.frames.push_back(std::move(f));
    }
    return out;
}

inline Dataset window(const Dataset& ds, std::size_t w) {
    Dataset out;
    out.dim = ds.dim * w;
    out.series.reserve(ds.size());
    for (const auto& s : ds.series) out.series.push_back(window(s, w));
    return out;
}

/// Per-dimension standardization; fitted on one dataset, applied to any.
struct ZScore {
    Vector mean;
    Vector scale;

    static ZScore fit(const Dataset& ds) {
        ZScore z{Vector(ds.dim), Vector(ds.dim, 1.0)};
        double count = 0.0;
        for (const auto& s : ds.series)
            for (const auto& f : s.frames) {
                for (std::size_t d = 0; d < ds.dim; ++d) z.mean[d] += f[d];
                count += 1.0;
            }
        if (count == 0.0) return z;
        for (auto& m : z.mean) m /= count;
        Vector var(ds.dim);
        for (const auto& s : ds.series)
            for (const auto& f : s.frames)
                for (std::size_t d = 0; d < ds.dim; ++d) var[d] += (f[d] - z.mean[d]) * (f[d] - z.mean[d]);
        for (std::size_t d = 0; d < ds.dim; ++d) {
            const double sd = std::sqrt(var[d] / count);
            z.scale[d] = sd > 0.0 ? sd : 1.0;
        }
        return z;
    }

    Dataset apply(Dataset ds) const {
        for (auto& s : ds.series)
            for (auto& f : s.frames)
                for (std::size_t d = 0; d < f.size(); ++d) f[d] = (f[d] - mean[d]) / scale[d];
        return ds;
    }
};

// ---------------------------------------------------------------------------
// Splits

enum class SplitMode { within_domain, out_of_domain };

struct SplitSpec {
    SplitMode mode = SplitMode::within_domain;
    std::vector<int> train_classes;  // out-of-domain only
    std::vector<int> test_classes;   // out-of-domain only
    double train_fraction = 0.7;     // within-domain only
    double validation_fraction = 0.1;
    std::uint64_t seed = 0;
};

struct Split {
    Dataset train;
    Dataset validation;
    Dataset test;
};

namespace detail {

inline Dataset subset(const Dataset& ds, const std::vector<std::size_t>& idx) {
    Dataset out;
    out.dim = ds.dim;
    std::vector<std::size_t> sorted = idx;
    std::sort(sorted.begin(), sorted.end());
    for (auto i : sorted) out.series.push_back(ds.series[i]);
    return out;
}

inline std::map<int, std::vector<std::size_t>> members_by_class(const Dataset& ds) {
    std::map<int, std::vector<std::size_t>> by;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (!ds[i].label) throw DataError("series '" + ds[i].id + "' is unlabeled");
        by[*ds[i].label].push_back(i);
    }
    return by;
}

// Number of validation series carved from a class with n training series.
// At least two are taken (when the class has >= 4) so validation can form
// similar pairs.
inline std::size_t validation_count(std::size_t n, double fraction) {
    if (fraction <= 0.0 || n < 2) return 0;
    auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    if (k < 2 && n >= 4) k = 2;
    return std::min(k, n - 1);
}

}  // namespace detail

inline Split make_split(const Dataset& ds, const SplitSpec& spec) {
    if (spec.validation_fraction < 0.0 || spec.validation_fraction >= 1.0)
        throw std::invalid_argument("make_split: validation_fraction must be in [0, 1)");
    Rng rng(spec.seed);
    const auto by_class = detail::members_by_class(ds);
    std::vector<std::size_t> train_idx, val_idx, test_idx;

    auto carve = [&](std::vector<std::size_t> members, std::size_t n_train) {
        // members already shuffled; first n_train go to training
        const std::size_t n_val = detail::validation_count(n_train, spec.validation_fraction);
        for (std::size_t k = 0; k < members.size(); ++k) {
            if (k < n_val)
                val_idx.push_back(members[k]);
            else if (k < n_train)
                train_idx.push_back(members[k]);
            else
                test_idx.push_back(members[k]);
        }
    };

    if (spec.mode == SplitMode::within_domain) {
        if (spec.train_fraction < 0.0 || spec.train_fraction > 1.0)
            throw std::invalid_argument("make_split: train_fraction must be in [0, 1]");
        for (const auto& [label, members] : by_class) {
            auto shuffled = members;
            rng.shuffle(shuffled);
            const auto n_train = static_cast<std::size_t>(
                std::llround(spec.train_fraction * static_cast<double>(shuffled.size())));
            carve(std::move(shuffled), n_train);
        }
    } else {
        const std::set<int> train(spec.train_classes.begin(), spec.train_classes.end());
        const std::set<int> test(spec.test_classes.begin(), spec.test_classes.end());
        for (int c : train)
            if (test.count(c)) throw std::invalid_argument("make_split: class " + std::to_string(c) +
                                                           " is in both train and test classes");
        for (int c : train)
            if (!by_class.count(c)) throw DataError("make_split: training class " + std::to_string(c) + " not in dataset");
        for (int c : test)
            if (!by_class.count(c)) throw DataError("make_split: test class " + std::to_string(c) + " not in dataset");
        for (const auto& [label, members] : by_class) {
            auto shuffled = members;
            rng.shuffle(shuffled);
            if (train.count(label)) {
                carve(std::move(shuffled), members.size());
            } else if (test.count(label)) {
                test_idx.insert(test_idx.end(), shuffled.begin(), shuffled.end());
            }
        }
    }

    Split out{detail::subset(ds, train_idx), detail::subset(ds, val_idx), detail::subset(ds, test_idx)};
    if (spec.mode == SplitMode::out_of_domain) {
        const auto a = out.train.class_ids();
        const auto b = out.test.class_ids();
        std::vector<int> both;
        std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
        if (!both.empty()) throw std::logic_error("make_split: out-of-domain label sets overlap");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pairs

enum class NegativeKind { cross_class, forgery };

struct IndexPair {
    std::size_t first;
    std::size_t second;
    bool operator==(const IndexPair&) const = default;
};

struct DissimilarPair {
    std::size_t first;
    std::size_t second;
    NegativeKind kind;
    bool operator==(const DissimilarPair&) const = default;
};

struct PairSet {
    std::vector<IndexPair> similar;
    std::vector<DissimilarPair> dissimilar;
    std::vector<std::string> warnings;
};

/// Maps a genuine series id to the ids of its forgeries.
using ForgeryMap = std::map<std::string, std::vector<std::string>>;

/// Similar pairs are all unordered same-label pairs. Without a forgery map
/// the dissimilar pairs are all different-label pairs; with one they are the
/// genuine/forgery pairs, and forged series are excluded from similar pairs.
inline PairSet build_pairs(const Dataset& ds, const std::optional<ForgeryMap>& forgeries = std::nullopt) {
    for (const auto& s : ds.series)
        if (!s.label) throw DataError("build_pairs: series '" + s.id + "' is unlabeled");

    PairSet ps;
    std::vector<bool> forged(ds.size(), false);
    std::map<std::string, std::size_t> index_of;
    if (forgeries) {
        for (std::size_t i = 0; i < ds.size(); ++i) index_of[ds[i].id] = i;
        for (const auto& [genuine, fakes] : *forgeries) {
            if (!index_of.count(genuine)) throw DataError("build_pairs: genuine id '" + genuine + "' not in dataset");
            for (const auto& f : fakes) {
                auto it = index_of.find(f);
                if (it == index_of.end()) throw DataError("build_pairs: forgery id '" + f + "' not in dataset");
                forged[it->second] = true;
            }
        }
    }

    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (forged[i]) continue;
        for (std::size_t j = i + 1; j < ds.size(); ++j) {
            if (forged[j]) continue;
            if (*ds[i].label == *ds[j].label)
                ps.similar.push_back({i, j});
            else if (!forgeries)
                ps.dissimilar.push_back({i, j, NegativeKind::cross_class});
        }
    }
    if (forgeries) {
        for (const auto& [genuine, fakes] : *forgeries) {
            const std::size_t g = index_of.at(genuine);
            for (const auto& f : fakes) {
                const std::size_t k = index_of.at(f);
                ps.dissimilar.push_back({std::min(g, k), std::max(g, k), NegativeKind::forgery});
            }
        }
    }
    if (ps.similar.empty()) ps.warnings.push_back("no similar pairs: every class has a single series");
    if (ps.dissimilar.empty()) ps.warnings.push_back("no dissimilar pairs: all series share one label");
    return ps;
}

/// Keeps only the entries whose genuine and forged ids are both in `ds`.
inline ForgeryMap restrict_forgeries(const ForgeryMap& map, const Dataset& ds) {
    std::set<std::string> ids;
    for (const auto& s : ds.series) ids.insert(s.id);
    ForgeryMap out;
    for (const auto& [genuine, fakes] : map) {
        if (!ids.count(genuine)) continue;
        for (const auto& f : fakes)
            if (ids.count(f)) out[genuine].push_back(f);
    }
    return out;
}

struct PairSample {
    std::size_t first;
    std::size_t second;
    bool similar;
    bool operator==(const PairSample&) const = default;
};

/// Half similar, half dissimilar, each drawn uniformly with replacement.
inline std::vector<PairSample> sample_pair_batch(const PairSet& pairs, Rng& rng, std::size_t batch) {
    if (pairs.similar.empty()) throw DataError("sample_pair_batch: no similar pairs");
    if (pairs.dissimilar.empty()) throw DataError("sample_pair_batch: no dissimilar pairs");
    if (batch % 2 != 0) throw std::invalid_argument("sample_pair_batch: batch size must be even");
    std::vector<PairSample> out;
    out.reserve(batch);
    for (std::size_t k = 0; k < batch / 2; ++k) {
        const auto& p = pairs.similar[rng.index(pairs.similar.size())];
        out.push_back({p.first, p.second, true});
    }
    for (std::size_t k = 0; k < batch / 2; ++k) {
        const auto& p = pairs.dissimilar[rng.index(pairs.dissimilar.size())];
        out.push_back({p.first, p.second, false});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace detail {

struct Sinusoid {
    double amplitude, frequency, phase;
};

// Smooth trajectory on [0, 1]: a sum of 2-3 sinusoids per dimension.
struct Template {
    std::vector<std::vector<Sinusoid>> per_dim;

    static Template random(Rng& rng, std::size_t dim) {
        Template t;
        t.per_dim.resize(dim);
        for (auto& comps : t.per_dim) {
            const std::size_t k = 2 + rng.index(2);
            for (std::size_t c = 0; c < k; ++c) {
                const double amp = rng.uniform(0.5, 1.5);
                const double freq = rng.uniform(0.5, 3.0);
                const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
                comps.push_back({amp, freq, phase});
            }
        }
        return t;
    }

    double at(std::size_t d, double u) const {
        double v = 0.0;
        for (const auto& c : per_dim[d]) v += c.amplitude * std::sin(2.0 * std::numbers::pi * c.frequency * u + c.phase);
        return v;
    }
};

inline std::size_t draw_length(Rng& rng, std::pair<std::size_t, std::size_t> len_range) {
    return len_range.first + rng.index(len_range.second - len_range.first + 1);
}

inline double position(std::size_t t, std::size_t len) {
    return len > 1 ? static_cast<double>(t) / static_cast<double>(len - 1) : 0.0;
}

inline void check_synth_args(std::size_t a, std::size_t b, std::size_t dim,
                             std::pair<std::size_t, std::size_t> len_range, double noise) {
    if (a == 0 || b == 0 || dim == 0) throw std::invalid_argument("synthetic generator: counts must be >= 1");
    if (len_range.first == 0) throw std::invalid_argument("synthetic generator: lengths must be >= 1");
    if (len_range.first > len_range.second)
        throw std::invalid_argument("synthetic generator: len_range is inverted");
    if (!(noise >= 0.0)) throw std::invalid_argument("synthetic generator: noise must be >= 0");
}

inline std::string series_id(int label, std::size_t k) {
    return "c" + std::to_string(label) + "_s" + std::to_string(k);
}

}  // namespace detail

/// Each class is a random sinusoidal template; samples resample it to a
/// random length and add Gaussian noise.
inline Dataset synth_generate(std::size_t n_classes, std::size_t per_class, std::size_t dim,
                              std::pair<std::size_t, std::size_t> len_range, double noise, std::uint64_t seed) {
    detail::check_synth_args(n_classes, per_class, dim, len_range, noise);
    Rng rng(seed);
    std::vector<detail::Template> templates;
    for (std::size_t c = 0; c < n_classes; ++c) templates.push_back(detail::Template::random(rng, dim));

    Dataset ds;
    ds.dim = dim;
    for (std::size_t c = 0; c < n_classes; ++c) {
        for (std::size_t k = 0; k < per_class; ++k) {
            const std::size_t len = detail::draw_length(rng, len_range);
            TimeSeries s{detail::series_id(static_cast<int>(c), k), static_cast<int>(c), {}};
            for (std::size_t t = 0; t < len; ++t) {
                Vector f(dim);
                const double u = detail::position(t, len);
                for (std::size_t d = 0; d < dim; ++d) f[d] = templates[c].at(d, u) + noise * rng.normal();
                s.frames.push_back(std::move(f));
            }
            ds.series.push_back(std::move(s));
        }
    }
    return ds;
}

/// Two classes whose samples contain the same frames in opposite temporal
/// order. Every sample is drawn from one noisy forward trajectory; class 1
/// stores it reversed, so only frame order carries the label.
inline Dataset synth_reversed(std::size_t per_class, std::size_t dim, std::pair<std::size_t, std::size_t> len_range,
                              double noise, std::uint64_t seed) {
    detail::check_synth_args(2, per_class, dim, len_range, noise);
    Rng rng(seed);
    const auto base = detail::Template::random(rng, dim);
    Dataset ds;
    ds.dim = dim;
    for (int c = 0; c < 2; ++c) {
        for (std::size_t k = 0; k < per_class; ++k) {
            const std::size_t len = detail::draw_length(rng, len_range);
            TimeSeries s{detail::series_id(c, k), c, {}};
            for (std::size_t t = 0; t < len; ++t) {
                Vector f(dim);
                const double u = detail::position(t, len);
                // ramp in dimension 0 makes the trajectory time-asymmetric
                for (std::size_t d = 0; d < dim; ++d)
                    f[d] = (d == 0 ? 2.0 * u - 1.0 : 0.0) + 0.5 * base.at(d, u) + noise * rng.normal();
                s.frames.push_back(std::move(f));
            }
            if (c == 1) std::reverse(s.frames.begin(), s.frames.end());
            ds.series.push_back(std::move(s));
        }
    }
    return ds;
}

/// Labels live in a weak per-class offset on the second half of the
/// dimensions; the first half carries large "content" trajectories chosen
/// independently of the label, which dominate the variance.
inline Dataset synth_nuisance(std::size_t n_classes, std::size_t per_class, std::size_t n_content, std::size_t dim,
                              std::pair<std::size_t, std::size_t> len_range, double noise, double content_scale,
                              std::uint64_t seed) {
    detail::check_synth_args(n_classes, per_class, dim, len_range, noise);
    if (dim < 2) throw std::invalid_argument("synth_nuisance: dim must be >= 2");
    if (n_content == 0) throw std::invalid_argument("synth_nuisance: need at least one content template");
    Rng rng(seed);
    const std::size_t content_dims = dim / 2;
    std::vector<detail::Template> contents;
    for (std::size_t m = 0; m < n_content; ++m) contents.push_back(detail::Template::random(rng, content_dims));
    std::vector<Vector> offsets;
    for (std::size_t c = 0; c < n_classes; ++c) {
        Vector o(dim - content_dims);
        for (auto& x : o) x = rng.uniform(-1.0, 1.0);
        offsets.push_back(std::move(o));
    }

    Dataset ds;
    ds.dim = dim;
    for (std::size_t c = 0; c < n_classes; ++c) {
        for (std::size_t k = 0; k < per_class; ++k) {
            const auto& content = contents[rng.index(n_content)];
            const std::size_t len = detail::draw_length(rng, len_range);
            TimeSeries s{detail::series_id(static_cast<int>(c), k), static_cast<int>(c), {}};
            for (std::size_t t = 0; t < len; ++t) {
                Vector f(dim);
                const double u = detail::position(t, len);
                for (std::size_t d = 0; d < content_dims; ++d) f[d] = content_scale * content.at(d, u);
                for (std::size_t d = content_dims; d < dim; ++d) f[d] = offsets[c][d - content_dims];
                for (auto& x : f) x += noise * rng.normal();
                s.frames.push_back(std::move(f));
            }
            ds.series.push_back(std::move(s));
        }
    }
    return ds;
}

}  // namespace srn

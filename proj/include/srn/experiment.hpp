#pragma once

// Experiment configuration, scorer construction and the command
// implementations behind the `srn` command-line tool.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "srn/data.hpp"
#include "srn/dtw.hpp"
#include "srn/eval.hpp"
#include "srn/fisher.hpp"
#include "srn/model.hpp"
#include "srn/numerics.hpp"
#include "srn/training.hpp"

namespace srn {

/// Invalid configuration or command-line usage.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline const std::vector<std::string>& model_families() {
    static const std::vector<std::string> names{"srn-a", "srn-l", "sn-a", "sn-l", "logistic", "dtw", "fisher-k", "fisher-v"};
    return names;
}

inline bool is_network_family(const std::string& f) { return f == "srn-a" || f == "srn-l" || f == "sn-a" || f == "sn-l"; }
inline bool is_trainable_family(const std::string& f) { return is_network_family(f) || f == "logistic"; }

/// Pooling and recurrence implied by a network family name.
inline void apply_family(const std::string& family, TrainConfig& cfg) {
    if (!is_network_family(family)) return;
    cfg.pooling = family.back() == 'a' ? Pooling::average : Pooling::last;
    cfg.recurrent = family.rfind("srn", 0) == 0;
}

struct SynthSpec {
    std::string task = "templates";  // templates | reversed | nuisance
    std::size_t classes = 5;
    std::size_t per_class = 20;
    std::size_t dim = 3;
    std::size_t len_min = 20;
    std::size_t len_max = 40;
    double noise = 0.05;
    std::size_t content = 4;      // nuisance only
    double content_scale = 3.0;   // nuisance only
};

inline Dataset generate(const SynthSpec& s, std::uint64_t seed) {
    const std::pair<std::size_t, std::size_t> len{s.len_min, s.len_max};
    if (s.task == "templates") return synth_generate(s.classes, s.per_class, s.dim, len, s.noise, seed);
    if (s.task == "reversed") return synth_reversed(s.per_class, s.dim, len, s.noise, seed);
    if (s.task == "nuisance")
        return synth_nuisance(s.classes, s.per_class, s.content, s.dim, len, s.noise, s.content_scale, seed);
    throw ConfigError("unknown synthetic task '" + s.task + "'");
}

struct EvalOptions {
    std::string metric = "auc";  // auc | one-shot
    std::optional<std::size_t> max_pairs = 2000;
    std::vector<std::size_t> fisher_states{2, 4, 8, 16};
    std::size_t fisher_iters = 20;
    bool fisher_normalize = false;
    std::size_t fisher_references = 500;
    bool dtw_normalize = false;
    LocalDistance dtw_local = LocalDistance::euclidean;
    std::optional<std::size_t> dtw_band;
};

struct SweepSpec {
    std::vector<std::string> models;
    std::vector<std::size_t> hidden;
    std::size_t repetitions = 5;
};

struct ExperimentConfig {
    std::optional<std::string> data_path;
    std::optional<SynthSpec> synth;
    std::optional<std::string> forgeries_path;
    std::size_t window = 1;
    bool zscore = false;
    SplitSpec split;
    std::string model = "srn-a";
    TrainConfig train;
    EvalOptions eval;
    std::optional<SweepSpec> sweep;
    std::uint64_t seed = 0;
    std::string out = "out";
    std::size_t workers = 1;
};

// ---------------------------------------------------------------------------
// Config parsing. Every object is checked for unknown keys.

namespace detail {

inline void expect_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, _] : j.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
            throw ConfigError(where + ": unknown key '" + key + "'");
    }
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(where + "." + key + ": wrong type");
    }
}

template <class T>
void read_opt(const nlohmann::json& j, const char* key, std::optional<T>& out, const std::string& where) {
    if (!j.contains(key)) return;
    if (j.at(key).is_null()) {
        out.reset();
        return;
    }
    T v{};
    read(j, key, v, where);
    out = v;
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
    using detail::expect_keys;
    using detail::read;
    ExperimentConfig c;
    expect_keys(j, {"data", "window", "zscore", "split", "model", "train", "eval", "sweep", "seed", "out", "workers"},
                "config");

    if (!j.contains("data")) throw ConfigError("config: missing 'data'");
    const auto& d = j.at("data");
    expect_keys(d, {"path", "synth", "forgeries"}, "config.data");
    detail::read_opt(d, "path", c.data_path, "config.data");
    detail::read_opt(d, "forgeries", c.forgeries_path, "config.data");
    if (d.contains("synth")) {
        const auto& s = d.at("synth");
        expect_keys(s, {"task", "classes", "per_class", "dim", "len_min", "len_max", "noise", "content", "content_scale"},
                    "config.data.synth");
        SynthSpec spec;
        read(s, "task", spec.task, "config.data.synth");
        read(s, "classes", spec.classes, "config.data.synth");
        read(s, "per_class", spec.per_class, "config.data.synth");
        read(s, "dim", spec.dim, "config.data.synth");
        read(s, "len_min", spec.len_min, "config.data.synth");
        read(s, "len_max", spec.len_max, "config.data.synth");
        read(s, "noise", spec.noise, "config.data.synth");
        read(s, "content", spec.content, "config.data.synth");
        read(s, "content_scale", spec.content_scale, "config.data.synth");
        c.synth = spec;
    }
    if (c.data_path.has_value() == c.synth.has_value())
        throw ConfigError("config.data: give exactly one of 'path' or 'synth'");

    read(j, "window", c.window, "config");
    if (c.window == 0) throw ConfigError("config.window must be >= 1");
    read(j, "zscore", c.zscore, "config");
    read(j, "seed", c.seed, "config");
    read(j, "out", c.out, "config");
    read(j, "workers", c.workers, "config");

    if (j.contains("split")) {
        const auto& s = j.at("split");
        expect_keys(s, {"mode", "train_fraction", "validation_fraction", "train_classes", "test_classes"}, "config.split");
        std::string mode = "within-domain";
        read(s, "mode", mode, "config.split");
        if (mode == "within-domain")
            c.split.mode = SplitMode::within_domain;
        else if (mode == "out-of-domain")
            c.split.mode = SplitMode::out_of_domain;
        else
            throw ConfigError("config.split.mode: unknown mode '" + mode + "'");
        read(s, "train_fraction", c.split.train_fraction, "config.split");
        read(s, "validation_fraction", c.split.validation_fraction, "config.split");
        read(s, "train_classes", c.split.train_classes, "config.split");
        read(s, "test_classes", c.split.test_classes, "config.split");
        if (c.split.mode == SplitMode::out_of_domain && (c.split.train_classes.empty() || c.split.test_classes.empty()))
            throw ConfigError("config.split: out-of-domain mode needs train_classes and test_classes");
    }

    read(j, "model", c.model, "config");
    if (std::find(model_families().begin(), model_families().end(), c.model) == model_families().end())
        throw ConfigError("config.model: unknown model family '" + c.model + "'");

    if (j.contains("train")) {
        const auto& t = j.at("train");
        expect_keys(t, {"hidden", "batch", "lr", "rms_decay", "epsilon", "clip", "dropout", "lr_decay_factor", "patience",
                        "eval_every", "max_steps", "val_pairs", "init_range"},
                    "config.train");
        auto& tc = c.train;
        read(t, "hidden", tc.hidden, "config.train");
        read(t, "batch", tc.batch, "config.train");
        read(t, "lr", tc.lr, "config.train");
        read(t, "rms_decay", tc.rms_decay, "config.train");
        read(t, "epsilon", tc.epsilon, "config.train");
        if (t.contains("clip")) {
            double clip = 5.0;
            read(t, "clip", clip, "config.train");
            if (!(clip > 0.0)) throw ConfigError("config.train.clip must be positive");
            tc.clip_lo = -clip;
            tc.clip_hi = clip;
        }
        read(t, "dropout", tc.dropout, "config.train");
        read(t, "lr_decay_factor", tc.lr_decay_factor, "config.train");
        read(t, "patience", tc.patience, "config.train");
        read(t, "eval_every", tc.eval_every, "config.train");
        read(t, "max_steps", tc.max_steps, "config.train");
        read(t, "val_pairs", tc.val_pairs, "config.train");
        read(t, "init_range", tc.init_range, "config.train");
    }
    try {
        c.train.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config.train: ") + e.what());
    }

    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        expect_keys(e, {"metric", "max_pairs", "fisher_states", "fisher_iters", "fisher_normalize", "fisher_references",
                        "dtw_normalize", "dtw_local", "dtw_band"},
                    "config.eval");
        auto& eo = c.eval;
        read(e, "metric", eo.metric, "config.eval");
        if (eo.metric != "auc" && eo.metric != "one-shot") throw ConfigError("config.eval.metric: must be auc or one-shot");
        detail::read_opt(e, "max_pairs", eo.max_pairs, "config.eval");
        read(e, "fisher_states", eo.fisher_states, "config.eval");
        if (eo.fisher_states.empty()) throw ConfigError("config.eval.fisher_states must not be empty");
        read(e, "fisher_iters", eo.fisher_iters, "config.eval");
        read(e, "fisher_normalize", eo.fisher_normalize, "config.eval");
        read(e, "fisher_references", eo.fisher_references, "config.eval");
        read(e, "dtw_normalize", eo.dtw_normalize, "config.eval");
        std::string local = "euclidean";
        read(e, "dtw_local", local, "config.eval");
        if (local == "euclidean")
            eo.dtw_local = LocalDistance::euclidean;
        else if (local == "squared-euclidean")
            eo.dtw_local = LocalDistance::squared_euclidean;
        else
            throw ConfigError("config.eval.dtw_local: unknown local distance '" + local + "'");
        detail::read_opt(e, "dtw_band", eo.dtw_band, "config.eval");
    }

    if (j.contains("sweep")) {
        const auto& s = j.at("sweep");
        expect_keys(s, {"models", "hidden", "repetitions"}, "config.sweep");
        SweepSpec sw;
        read(s, "models", sw.models, "config.sweep");
        read(s, "hidden", sw.hidden, "config.sweep");
        read(s, "repetitions", sw.repetitions, "config.sweep");
        if (sw.models.empty() || sw.hidden.empty() || sw.repetitions == 0)
            throw ConfigError("config.sweep: models, hidden and repetitions must be non-empty");
        for (const auto& m : sw.models)
            if (std::find(model_families().begin(), model_families().end(), m) == model_families().end())
                throw ConfigError("config.sweep.models: unknown model family '" + m + "'");
        c.sweep = sw;
    }
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse_config(j);
}

// ---------------------------------------------------------------------------
// Data preparation

struct PreparedData {
    Split split;  // preprocessed (z-scored, windowed)
    std::optional<ForgeryMap> forgeries;
    std::optional<ZScore> zscore;
    std::size_t raw_dim = 0;
};

inline ForgeryMap load_forgeries(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open forgery map: " + path.string());
    try {
        return nlohmann::json::parse(in).get<ForgeryMap>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError("forgery map " + path.string() + " is malformed: " + e.what());
    }
}

inline Dataset load_source(const ExperimentConfig& c) {
    if (c.data_path) {
        if (!std::filesystem::exists(*c.data_path)) throw DataError("data file not found: " + *c.data_path);
        return load_jsonl(*c.data_path);
    }
    return generate(*c.synth, derive_seed(c.seed, "data"));
}

/// Splits the raw data, fits optional z-scoring on the training part, then
/// windows every part.
inline PreparedData prepare(const ExperimentConfig& c, const Dataset& raw) {
    SplitSpec spec = c.split;
    spec.seed = derive_seed(c.seed, "split");
    PreparedData p;
    p.raw_dim = raw.dim;
    Split s = make_split(raw, spec);
    if (c.zscore) {
        p.zscore = ZScore::fit(s.train);
        s.train = p.zscore->apply(std::move(s.train));
        s.validation = p.zscore->apply(std::move(s.validation));
        s.test = p.zscore->apply(std::move(s.test));
    }
    p.split = {window(s.train, c.window), window(s.validation, c.window), window(s.test, c.window)};
    if (c.forgeries_path) p.forgeries = load_forgeries(*c.forgeries_path);
    return p;
}

inline Dataset preprocess(const Dataset& raw, std::size_t win, const std::optional<ZScore>& z) {
    return window(z ? z->apply(raw) : raw, win);
}

// ---------------------------------------------------------------------------
// Scorers

// Network scorers rank by logit: same order as the probability, without
// ties from sigmoid saturation.
inline Scorer make_srn_scorer(SrnParams params, std::string name) {
    auto p = std::make_shared<const SrnParams>(std::move(params));
    return {std::move(name), [p](const TimeSeries& a, const TimeSeries& b) {
                return similarity_logit(*p, embed(*p, a), embed(*p, b));
            }};
}

inline Scorer make_logistic_scorer(LogisticParams params) {
    auto p = std::make_shared<const LogisticParams>(std::move(params));
    return {"logistic", [p](const TimeSeries& a, const TimeSeries& b) {
                return logistic_logit(p->weights, p->bias, a, b);
            }};
}

inline Scorer make_dtw_scorer(const EvalOptions& eo) {
    DtwOptions opt{eo.dtw_local, eo.dtw_band, false};
    const bool norm = eo.dtw_normalize;
    return {"dtw", [opt, norm](const TimeSeries& a, const TimeSeries& b) { return dtw_similarity(a, b, norm, opt); }};
}

inline Scorer make_checkpoint_scorer(const Checkpoint& ck) {
    if (const auto* p = std::get_if<SrnParams>(&ck.model)) return make_srn_scorer(*p, ck.family);
    return make_logistic_scorer(std::get<LogisticParams>(ck.model));
}

/// Fisher scores computed once per series (keyed by id) for the given
/// datasets; unknown series are scored on demand.
class FisherCache {
public:
    FisherCache(HmmParams hmm, std::optional<FisherNormalizer> norm) : hmm_(std::move(hmm)), norm_(std::move(norm)) {}

    void add(const Dataset& ds) {
        for (const auto& s : ds.series)
            if (!cache_.count(s.id)) cache_.emplace(s.id, compute(s));
    }

    FisherScore get(const TimeSeries& s) const {
        auto it = cache_.find(s.id);
        return it != cache_.end() ? it->second : compute(s);
    }

    const HmmParams& hmm() const { return hmm_; }

private:
    FisherScore compute(const TimeSeries& s) const {
        auto g = fisher_score(hmm_, s);
        return norm_ ? norm_->apply(std::move(g)) : g;
    }

    HmmParams hmm_;
    std::optional<FisherNormalizer> norm_;
    std::unordered_map<std::string, FisherScore> cache_;
};

inline std::shared_ptr<FisherCache> make_fisher_cache(const HmmParams& hmm, const Dataset& train, bool normalize,
                                                      std::initializer_list<const Dataset*> extra) {
    std::optional<FisherNormalizer> norm;
    if (normalize) {
        std::vector<FisherScore> scores;
        for (const auto& s : train.series) scores.push_back(fisher_score(hmm, s));
        norm = FisherNormalizer::fit(scores);
    }
    auto cache = std::make_shared<FisherCache>(hmm, norm);
    cache->add(train);
    for (const auto* d : extra) cache->add(*d);
    return cache;
}

inline Scorer make_fisher_kernel_scorer(std::shared_ptr<const FisherCache> cache) {
    return {"fisher-k", [cache](const TimeSeries& a, const TimeSeries& b) {
                return fisher_kernel(cache->get(a), cache->get(b));
            }};
}

/// Reference pairs drawn (balanced, seeded) from the training pairs.
inline Scorer make_fisher_vector_scorer(std::shared_ptr<const FisherCache> cache, const Dataset& train,
                                        const std::optional<ForgeryMap>& forgeries, std::size_t n_refs,
                                        std::uint64_t seed) {
    std::optional<ForgeryMap> f;
    if (forgeries) f = restrict_forgeries(*forgeries, train);
    const auto pairs = build_pairs(train, f);
    Rng rng(seed);
    auto refs = std::make_shared<std::vector<FisherReference>>();
    for (const auto& p : select_pairs(pairs, n_refs, rng)) {
        const auto& a = train[p.first];
        const auto& b = train[p.second];
        refs->push_back({concat_pair(cache->get(a), a.id, cache->get(b), b.id), p.similar});
    }
    return {"fisher-v", [cache, refs](const TimeSeries& a, const TimeSeries& b) {
                return fisher_vector_score(concat_pair(cache->get(a), a.id, cache->get(b), b.id), *refs);
            }};
}

// ---------------------------------------------------------------------------
// Evaluation helpers

inline std::string split_name(const ExperimentConfig& c) {
    return c.split.mode == SplitMode::within_domain ? "within-domain" : "out-of-domain";
}

inline std::optional<ForgeryMap> restricted(const std::optional<ForgeryMap>& f, const Dataset& ds) {
    if (!f) return std::nullopt;
    return restrict_forgeries(*f, ds);
}

inline EvalReport run_metric(const Scorer& scorer, const Dataset& test, const std::optional<ForgeryMap>& forgeries,
                             const ExperimentConfig& c, std::uint64_t seed) {
    if (c.eval.metric == "one-shot") return one_shot(scorer, test, seed, c.workers, split_name(c));
    const auto pairs = build_pairs(test, restricted(forgeries, test));
    return evaluate_pairs(scorer, test, pairs, c.eval.max_pairs, seed, split_name(c), c.workers);
}

/// Fits one HMM per candidate state count on the training split and keeps
/// the one whose scorer has the best validation AUC.
inline Scorer fit_fisher_scorer(const std::string& family, const PreparedData& data, const ExperimentConfig& c,
                                std::uint64_t seed, std::ostream* log = nullptr) {
    const auto& train = data.split.train;
    const bool val_usable = [&] {
        if (data.split.validation.empty()) return false;
        const auto ps = build_pairs(data.split.validation, restricted(data.forgeries, data.split.validation));
        return !ps.similar.empty() && !ps.dissimilar.empty();
    }();
    const Dataset& val = val_usable ? data.split.validation : train;

    std::optional<Scorer> best;
    double best_auc = -1.0;
    for (std::size_t K : c.eval.fisher_states) {
        const auto fit = baum_welch(train, K, c.eval.fisher_iters, derive_seed(seed, "hmm/" + std::to_string(K)));
        auto cache = make_fisher_cache(fit.params, train, c.eval.fisher_normalize, {&val, &data.split.test});
        Scorer sc = family == "fisher-k"
                        ? make_fisher_kernel_scorer(cache)
                        : make_fisher_vector_scorer(cache, train, data.forgeries, c.eval.fisher_references,
                                                    derive_seed(seed, "fisher-refs"));
        const auto pairs = build_pairs(val, restricted(data.forgeries, val));
        const double v = evaluate_pairs(sc, val, pairs, c.eval.max_pairs, derive_seed(seed, "fisher-val"), "validation",
                                        c.workers)
                             .value;
        if (log) *log << family << ": K=" << K << " validation AUC " << format_real(v) << '\n';
        if (v > best_auc) {
            best_auc = v;
            best = sc;
        }
    }
    return *best;
}

/// Trains (network or logistic) or fits (Fisher) the named family and
/// returns its scorer on the prepared data. DTW needs no fitting.
struct FittedModel {
    Scorer scorer;
    std::optional<Checkpoint> checkpoint;
    TrainLog log;
};

inline FittedModel fit_family(const std::string& family, const PreparedData& data, const ExperimentConfig& c,
                              TrainConfig tc, std::ostream* log = nullptr) {
    tc.workers = c.workers;
    if (is_network_family(family)) {
        apply_family(family, tc);
        auto res = train(data.split.train, data.split.validation, tc, data.forgeries);
        Checkpoint ck{family, c.window, data.zscore, res.params};
        return {make_srn_scorer(res.params, family), ck, res.log};
    }
    if (family == "logistic") {
        auto res = train_logistic(data.split.train, data.split.validation, tc, data.forgeries);
        Checkpoint ck{family, c.window, data.zscore, res.params};
        return {make_logistic_scorer(res.params), ck, res.log};
    }
    if (family == "dtw") return {make_dtw_scorer(c.eval), std::nullopt, {}};
    if (family == "fisher-k" || family == "fisher-v")
        return {fit_fisher_scorer(family, data, c, tc.seed, log), std::nullopt, {}};
    throw ConfigError("unknown model family '" + family + "'");
}

// ---------------------------------------------------------------------------
// Commands

struct GenDataArgs {
    std::string task = "templates";
    std::size_t classes = 5;
    std::size_t per_class = 20;
    std::size_t dim = 3;
    std::size_t len_min = 20;
    std::size_t len_max = 40;
    double noise = 0.05;
    std::size_t content = 4;
    double content_scale = 3.0;
    std::uint64_t seed = 0;
    std::string out = "data.jsonl";
};

/// One summary line: classes, samples, dim and min/mean/max length.
inline std::string dataset_summary(const Dataset& ds) {
    std::size_t lo = std::numeric_limits<std::size_t>::max(), hi = 0, total = 0;
    for (const auto& s : ds.series) {
        lo = std::min(lo, s.length());
        hi = std::max(hi, s.length());
        total += s.length();
    }
    std::ostringstream os;
    os << "classes=" << ds.class_ids().size() << " samples=" << ds.size() << " dim=" << ds.dim << " length_min=" << lo
       << " length_mean=" << format_real(static_cast<double>(total) / static_cast<double>(ds.size()))
       << " length_max=" << hi;
    return os.str();
}

inline int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
    if (a.len_min > a.len_max) throw ConfigError("gen-data: --len-min must not exceed --len-max");
    SynthSpec spec{a.task, a.classes, a.per_class, a.dim, a.len_min, a.len_max, a.noise, a.content, a.content_scale};
    const Dataset ds = generate(spec, a.seed);
    const std::filesystem::path path(a.out);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    save_jsonl(ds, path);
    out << dataset_summary(ds) << " -> " << a.out << '\n';
    return 0;
}

inline std::filesystem::path ensure_out_dir(const ExperimentConfig& c) {
    std::filesystem::path dir(c.out);
    std::filesystem::create_directories(dir);
    return dir;
}

/// Trains the configured family; writes checkpoint.json, train_log.csv and
/// report.json (evaluated on the test split) into the output directory.
inline int cmd_train(const ExperimentConfig& c, std::ostream& out, bool verbose = false) {
    if (!is_trainable_family(c.model))
        throw ConfigError("model family '" + c.model + "' has no trainable parameters; use `eval --scorer " + c.model + "`");
    const Dataset raw = load_source(c);
    const PreparedData data = prepare(c, raw);
    TrainConfig tc = c.train;
    tc.seed = derive_seed(c.seed, "train");
    auto fitted = fit_family(c.model, data, c, tc, verbose ? &std::cerr : nullptr);
    for (const auto& w : fitted.log.warnings) std::cerr << "warning: " << w << '\n';
    if (verbose)
        for (const auto& r : fitted.log.records)
            std::cerr << "step " << r.step << " loss " << format_real(r.loss) << " val_auc " << format_real(r.val_auc)
                      << " lr " << format_real(r.lr) << '\n';

    const auto dir = ensure_out_dir(c);
    save_checkpoint(*fitted.checkpoint, dir / "checkpoint.json");
    save_train_log_csv(fitted.log, dir / "train_log.csv");
    const auto report = run_metric(fitted.scorer, data.split.test, data.forgeries, c, derive_seed(c.seed, "eval"));
    save_report(report, dir / "report.json");
    out << report_to_json(report).dump() << '\n';
    return 0;
}

struct EvalArgs {
    std::optional<std::string> checkpoint;
    std::optional<std::string> scorer;  // dtw | fisher-k | fisher-v | untrained | trained family name
    std::optional<std::string> metric;
    std::optional<std::string> report_path;
};

/// Evaluates a checkpoint or a baseline scorer on the test split.
inline int cmd_eval(ExperimentConfig c, const EvalArgs& a, std::ostream& out) {
    if (a.metric) {
        if (*a.metric != "auc" && *a.metric != "one-shot") throw ConfigError("eval: --metric must be auc or one-shot");
        c.eval.metric = *a.metric;
    }
    if (a.checkpoint.has_value() == a.scorer.has_value())
        throw ConfigError("eval: give exactly one of --checkpoint or --scorer");

    std::optional<Checkpoint> ck;
    if (a.checkpoint) {
        ck = load_checkpoint(*a.checkpoint);
        c.window = ck->window;
        c.zscore = false;  // the checkpoint's own statistics are applied below
    }
    const Dataset raw = load_source(c);
    PreparedData data = prepare(c, raw);
    if (ck && ck->zscore) {
        SplitSpec spec = c.split;
        spec.seed = derive_seed(c.seed, "split");
        const Split s = make_split(raw, spec);
        data.split = {preprocess(s.train, ck->window, ck->zscore), preprocess(s.validation, ck->window, ck->zscore),
                      preprocess(s.test, ck->window, ck->zscore)};
    }

    Scorer scorer;
    if (ck) {
        if (data.split.test.dim != ck->input_dim())
            throw ConfigError("eval: checkpoint expects input dim " + std::to_string(ck->input_dim()) + " (window " +
                              std::to_string(ck->window) + "), dataset gives " + std::to_string(data.split.test.dim));
        scorer = make_checkpoint_scorer(*ck);
    } else if (*a.scorer == "untrained") {
        if (!is_network_family(c.model)) throw ConfigError("eval: --scorer untrained needs a network model family");
        TrainConfig tc = c.train;
        apply_family(c.model, tc);
        tc.seed = derive_seed(c.seed, "train");
        tc.max_steps = 0;
        auto res = train(data.split.train, data.split.validation, tc);
        scorer = make_srn_scorer(res.params, c.model + "-untrained");
    } else {
        const std::string& fam = *a.scorer;
        if (std::find(model_families().begin(), model_families().end(), fam) == model_families().end())
            throw ConfigError("eval: unknown scorer '" + fam + "'");
        TrainConfig tc = c.train;
        tc.seed = derive_seed(c.seed, "train");
        scorer = fit_family(fam, data, c, tc).scorer;
    }

    const auto report = run_metric(scorer, data.split.test, data.forgeries, c, derive_seed(c.seed, "eval"));
    const std::filesystem::path path = a.report_path ? std::filesystem::path(*a.report_path) : ensure_out_dir(c) / "report.json";
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    save_report(report, path);
    out << report_to_json(report).dump() << '\n';
    return 0;
}

struct SweepRow {
    std::string model;
    std::size_t hidden;
    std::size_t repetition;
    std::uint64_t seed;
    std::optional<double> auc;
    std::string status;
};

inline std::uint64_t sweep_cell_seed(std::uint64_t root, const std::string& model, std::size_t hidden, std::size_t rep) {
    return derive_seed(root, "sweep/" + model + "/h" + std::to_string(hidden) + "/r" + std::to_string(rep));
}

/// Runs models x hidden sizes x repetitions on one prepared split. Writes
/// sweep.csv (one row per cell, cross-product order) and sweep_summary.csv
/// (mean/std per model and hidden size). Returns nonzero if any cell failed.
inline int cmd_sweep(const ExperimentConfig& c, std::ostream& out) {
    if (!c.sweep) throw ConfigError("sweep: config has no 'sweep' section");
    const auto& sw = *c.sweep;
    const Dataset raw = load_source(c);
    const PreparedData data = prepare(c, raw);

    std::vector<SweepRow> rows;
    for (const auto& m : sw.models)
        for (std::size_t h : sw.hidden)
            for (std::size_t r = 0; r < sw.repetitions; ++r) rows.push_back({m, h, r, sweep_cell_seed(c.seed, m, h, r), {}, ""});

    ExperimentConfig cell_cfg = c;
    cell_cfg.workers = 1;  // parallelism is across cells
    detail::parallel_for(rows.size(), c.workers, [&](std::size_t k) {
        auto& row = rows[k];
        try {
            TrainConfig tc = c.train;
            tc.hidden = row.hidden;
            tc.seed = row.seed;
            auto fitted = fit_family(row.model, data, cell_cfg, tc);
            row.auc = run_metric(fitted.scorer, data.split.test, data.forgeries, cell_cfg, derive_seed(row.seed, "eval")).value;
            row.status = "ok";
        } catch (const std::exception& e) {
            row.status = std::string("error: ") + e.what();
            std::replace(row.status.begin(), row.status.end(), ',', ';');
            std::replace(row.status.begin(), row.status.end(), '\n', ' ');
        }
    });

    const auto dir = ensure_out_dir(c);
    {
        std::ofstream f(dir / "sweep.csv", std::ios::binary | std::ios::trunc);
        f << "# srn-sweep v1\nmodel,hidden,repetition,seed,auc,status\n";
        for (const auto& r : rows)
            f << r.model << ',' << r.hidden << ',' << r.repetition << ',' << r.seed << ','
              << (r.auc ? format_real(*r.auc) : "") << ',' << r.status << '\n';
    }
    {
        std::ofstream f(dir / "sweep_summary.csv", std::ios::binary | std::ios::trunc);
        f << "# srn-sweep-summary v1\nmodel,hidden,n,mean_auc,std_auc\n";
        for (const auto& m : sw.models)
            for (std::size_t h : sw.hidden) {
                std::vector<double> v;
                for (const auto& r : rows)
                    if (r.model == m && r.hidden == h && r.auc) v.push_back(*r.auc);
                double mean = 0.0, var = 0.0;
                for (double x : v) mean += x;
                if (!v.empty()) mean /= static_cast<double>(v.size());
                for (double x : v) var += (x - mean) * (x - mean);
                // population standard deviation over repetitions
                const double sd = v.empty() ? 0.0 : std::sqrt(var / static_cast<double>(v.size()));
                f << m << ',' << h << ',' << v.size() << ',' << (v.empty() ? "" : format_real(mean)) << ','
                  << (v.empty() ? "" : format_real(sd)) << '\n';
            }
    }
    const auto failed = std::count_if(rows.begin(), rows.end(), [](const SweepRow& r) { return r.status != "ok"; });
    out << "sweep: " << rows.size() << " cells, " << failed << " failed -> " << (dir / "sweep.csv").string() << '\n';
    return failed == 0 ? 0 : 1;
}

struct ExportArgs {
    std::string checkpoint;
    std::string data;
    std::string out;
};

inline int cmd_export(const ExportArgs& a, std::ostream& out) {
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    const auto* params = std::get_if<SrnParams>(&ck.model);
    if (!params) throw ConfigError("export: checkpoint family '" + ck.family + "' has no embeddings");
    if (!std::filesystem::exists(a.data)) throw DataError("data file not found: " + a.data);
    const Dataset ds = preprocess(load_jsonl(a.data), ck.window, ck.zscore);
    const std::filesystem::path path(a.out);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    export_embeddings(*params, ds, path);
    out << "exported " << ds.size() << " embeddings of size " << params->hidden() << " -> " << a.out << '\n';
    return 0;
}

}  // namespace srn

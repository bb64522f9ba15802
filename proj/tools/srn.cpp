// srn: command-line driver for data generation, training, sweeps,
// evaluation and embedding export.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "srn/experiment.hpp"

namespace {

struct Globals {
    std::optional<std::string> config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::size_t> workers;
    bool verbose = false;
};

srn::ExperimentConfig resolve(const Globals& g, const std::optional<std::string>& model) {
    if (!g.config) throw srn::ConfigError("--config is required for this command");
    auto c = srn::load_config(*g.config);
    if (g.seed) c.seed = *g.seed;
    if (g.out) c.out = *g.out;
    if (g.workers) c.workers = *g.workers;
    if (model) {
        const auto& fams = srn::model_families();
        if (std::find(fams.begin(), fams.end(), *model) == fams.end())
            throw srn::ConfigError("--model: unknown model family '" + *model + "'");
        c.model = *model;
    }
    if (c.workers == 0) throw srn::ConfigError("--workers must be >= 1");
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Siamese recurrent networks for time-series similarity"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand
    Globals g;
    app.add_option("--config", g.config, "Experiment config (JSON)");
    app.add_option("--seed", g.seed, "Root seed (overrides config)");
    app.add_option("--out", g.out, "Output directory or file (overrides config)");
    app.add_option("--workers", g.workers, "Worker threads");
    app.add_flag("--verbose", g.verbose, "Log progress to stderr");

    srn::GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset (JSONL)");
    gen_cmd->add_option("--task", gen.task, "templates | reversed | nuisance")->capture_default_str();
    gen_cmd->add_option("--classes", gen.classes)->capture_default_str();
    gen_cmd->add_option("--per-class", gen.per_class)->capture_default_str();
    gen_cmd->add_option("--dim", gen.dim)->capture_default_str();
    gen_cmd->add_option("--len-min", gen.len_min)->capture_default_str();
    gen_cmd->add_option("--len-max", gen.len_max)->capture_default_str();
    gen_cmd->add_option("--noise", gen.noise)->capture_default_str();
    gen_cmd->add_option("--content", gen.content, "nuisance: number of content templates")->capture_default_str();
    gen_cmd->add_option("--content-scale", gen.content_scale, "nuisance: content amplitude")->capture_default_str();

    std::optional<std::string> train_model;
    auto* train_cmd = app.add_subcommand("train", "Train a model from a config");
    train_cmd->add_option("--model", train_model, "Model family (overrides config)");

    auto* sweep_cmd = app.add_subcommand("sweep", "Run a models x hidden sizes x repetitions sweep");

    srn::EvalArgs ev;
    std::optional<std::string> eval_model;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint or baseline scorer on the test split");
    eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint JSON");
    eval_cmd->add_option("--scorer", ev.scorer, "dtw | fisher-k | fisher-v | untrained | a trainable family");
    eval_cmd->add_option("--metric", ev.metric, "auc | one-shot");
    eval_cmd->add_option("--model", eval_model, "Model family for --scorer untrained");
    eval_cmd->add_option("--report", ev.report_path, "Report path (default <out>/report.json)");

    srn::ExportArgs ex;
    auto* export_cmd = app.add_subcommand("export", "Export pooled embeddings to CSV");
    export_cmd->add_option("--checkpoint", ex.checkpoint)->required();
    export_cmd->add_option("--data", ex.data, "Dataset JSONL")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen_cmd) {
            if (g.seed) gen.seed = *g.seed;
            if (g.out) gen.out = *g.out;
            return srn::cmd_gen_data(gen, std::cout);
        }
        if (*train_cmd) return srn::cmd_train(resolve(g, train_model), std::cout, g.verbose);
        if (*sweep_cmd) return srn::cmd_sweep(resolve(g, std::nullopt), std::cout);
        if (*eval_cmd) return srn::cmd_eval(resolve(g, eval_model), ev, std::cout);
        if (*export_cmd) {
            if (!g.out) throw srn::ConfigError("export: --out is required");
            ex.out = *g.out;
            return srn::cmd_export(ex, std::cout);
        }
    } catch (const srn::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

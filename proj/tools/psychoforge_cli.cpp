#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "psychoforge/pipeline.hpp"

namespace {

using namespace psychoforge;

struct Overrides {
    std::optional<std::string> config;
    std::optional<std::string> study, backend, format, embedder, aggregation;
    std::optional<int> n_agents, max_retries, tsne_iterations;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> concurrency;
    std::optional<std::string> out_dir, data_dir, input, params, model, embedding_model, embedding_cache;
    std::optional<double> noise_sd, scenario_noise_sd, temperature, perplexity;
    bool offline = false, null_mock = false, per_scenario = false, standardize = false;

    void attach(CLI::App& app) {
        app.add_option("--config", config, "JSON run configuration (flags override it)");
        app.add_option("--study", study, "study1 | study2 | study3 | study4");
        app.add_option("--backend", backend, "remote | mock");
        app.add_option("--format", format, "Likert | Expanded | both");
        app.add_option("--n-agents", n_agents, "number of simulated personas");
        app.add_option("--seed", seed, "root seed");
        app.add_option("--out-dir", out_dir, "run directory");
        app.add_flag("--offline", offline, "never call the embedding endpoint");
        app.add_option("--data-dir", data_dir, "item banks, templates and fixtures");
        app.add_option("--input", input, "BFI2 response matrix (CSV)");
        app.add_option("--params", params, "simulation parameter file (JSON)");
        app.add_option("--noise-sd", noise_sd, "mock questionnaire noise, 5-point units");
        app.add_option("--scenario-noise-sd", scenario_noise_sd, "mock scenario noise, response units");
        app.add_flag("--null-mock", null_mock, "scenario answers ignore the persona");
        app.add_option("--concurrency", concurrency, "agents in flight");
        app.add_option("--model", model, "chat model name");
        app.add_option("--temperature", temperature, "sampling temperature");
        app.add_option("--max-retries", max_retries, "network retries per request");
        app.add_option("--embedder", embedder, "local | remote");
        app.add_option("--embedding-model", embedding_model, "embedding model name");
        app.add_option("--embedding-cache", embedding_cache, "embedding cache (JSON lines)");
        app.add_option("--aggregation", aggregation, "pairwise_mean | centroid");
        app.add_option("--perplexity", perplexity, "t-SNE perplexity");
        app.add_option("--tsne-iterations", tsne_iterations, "t-SNE iterations");
        app.add_flag("--per-scenario", per_scenario, "also regress each scenario separately");
        app.add_flag("--standardize", standardize, "z-score the regression predictors");
    }

    RunConfig resolve() const {
        RunConfig c = config ? load_run_config(*config) : RunConfig{};
        if (study) c.study = parse_study(*study);
        if (backend) c.backend = parse_backend(*backend);
        if (format) c.format = parse_format_choice(*format);
        if (n_agents) c.n_agents = *n_agents;
        if (seed) c.seed = *seed;
        if (out_dir) c.out_dir = *out_dir;
        if (data_dir) c.data_dir = *data_dir;
        if (input) c.input = *input;
        if (params) c.params = *params;
        if (noise_sd) c.noise_sd = *noise_sd;
        if (scenario_noise_sd) c.scenario_noise_sd = *scenario_noise_sd;
        if (concurrency) c.concurrency = *concurrency;
        if (model) c.model_name = *model;
        if (temperature) c.temperature = *temperature;
        if (max_retries) c.max_retries = *max_retries;
        if (embedder) {
            c.embedder = parse_embedder(*embedder);
            if (c.embedder == EmbedderKind::remote && !embedding_model && c.embedding_model == LocalHashEmbedder::kModelName) {
                c.embedding_model = std::string(kDefaultEmbeddingModel);
            }
        }
        if (embedding_model) c.embedding_model = *embedding_model;
        if (embedding_cache) c.embedding_cache = *embedding_cache;
        if (aggregation) {
            auto a = parse_aggregation(*aggregation);
            if (!a) throw ConfigError("--aggregation must be pairwise_mean or centroid");
            c.aggregation = *a;
        }
        if (perplexity) c.perplexity = *perplexity;
        if (tsne_iterations) c.tsne_iterations = *tsne_iterations;
        if (offline) c.offline = true;
        if (null_mock) c.null_mock = true;
        if (per_scenario) c.per_scenario = true;
        if (standardize) c.standardize_predictors = true;
        return c;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"psychoforge: Big Five persona simulation and psychometric validation toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kToolkitVersion));
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "debug logging");

    Overrides ov;
    auto* study1 = app.add_subcommand("study1", "similarity matrices and 2-D projection of instrument items");
    auto* simulate = app.add_subcommand("simulate", "generate BFI2 responses from facet statistics");
    auto* study23 = app.add_subcommand("study23", "persona agents answer the adjective questionnaire");
    auto* study4 = app.add_subcommand("study4", "persona agents answer risk and ethics scenarios");
    auto* run = app.add_subcommand("run", "study1, study23 and study4 into one directory, then the report");
    auto* embed = app.add_subcommand("embed", "fill the embedding cache for the study1 corpus");
    for (auto* sub : {study1, simulate, study23, study4, run, embed}) ov.attach(*sub);

    auto* report = app.add_subcommand("report", "verify a run directory and render report.md");
    std::string run_dir;
    std::optional<std::string> reference;
    report->add_option("run_dir", run_dir, "run directory")->required();
    report->add_option("--reference", reference, "reference values JSON");

    auto* prompt = app.add_subcommand("prompt", "print the prompt rendered for one BFI2 answer vector");
    std::string answers_csv, prompt_kind = "persona", prompt_format = "Expanded", prompt_data = "data";
    prompt->add_option("--answers", answers_csv, "60 comma-separated BFI2 answers in item order")->required();
    prompt->add_option("--kind", prompt_kind, "persona | risk | ethics");
    prompt->add_option("--format", prompt_format, "Likert | Expanded (persona prompts)");
    prompt->add_option("--data-dir", prompt_data, "item banks and templates");

    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);
    spdlog::set_pattern("[%l] %v");

    try {
        if (report->parsed()) {
            auto text = cmd_report(run_dir, reference ? std::optional<std::filesystem::path>(*reference) : std::nullopt);
            std::cout << text;
            return EXIT_SUCCESS;
        }
        if (prompt->parsed()) {
            const auto kit = load_prompt_kit(prompt_data);
            PersonaProfile profile{"agent-0001", {kit.bfi2.name(), {}}, PromptFormat::Expanded};
            std::stringstream in(answers_csv);
            std::string cell;
            for (const auto& item : kit.bfi2.items()) {
                if (!std::getline(in, cell, ',')) throw ConfigError("--answers needs one value per BFI2 item");
                profile.bfi2.answers[item.id] = std::stoi(cell);
            }
            if (prompt_kind == "persona") {
                auto f = parse_format(prompt_format);
                if (!f) throw ConfigError("--format must be Likert or Expanded");
                profile.format = *f;
                std::cout << render_persona_prompt(profile, kit);
            } else if (auto b = parse_battery(prompt_kind)) {
                std::cout << render_scenarios(profile, *b, kit);
            } else {
                throw ConfigError("--kind must be persona, risk or ethics");
            }
            return EXIT_SUCCESS;
        }
        RunConfig cfg = ov.resolve();
        if (study1->parsed()) {
            auto r = cmd_study1(cfg);
            spdlog::info("wrote {}", r.manifest.string());
        } else if (simulate->parsed()) {
            spdlog::info("wrote {}", cmd_simulate(cfg).string());
        } else if (study23->parsed()) {
            if (cfg.study != Study::study2 && cfg.study != Study::study3) cfg.study = cfg.input ? Study::study2 : Study::study3;
            auto r = cmd_study23(cfg);
            for (const auto& [format, fr] : r.formats) {
                spdlog::info("{}: average convergent r = {:.3f} ({} failures)", format_name(format), fr.convergent.average,
                             fr.failures);
            }
            spdlog::info("wrote {}", r.manifest.string());
        } else if (study4->parsed()) {
            cfg.study = Study::study4;
            auto r = cmd_study4(cfg);
            spdlog::info("regressed {} agents; wrote {}", r.n_agents, r.manifest.string());
        } else if (run->parsed()) {
            cmd_run(cfg);
            spdlog::info("wrote {}", (cfg.out_dir / "report.md").string());
        } else if (embed->parsed()) {
            auto s = cmd_embed(cfg);
            spdlog::info("{} cached, {} fetched", s.cache_hits, s.fetched);
        }
    } catch (const ConfigError& e) {
        spdlog::error("configuration: {}", e.what());
        return 2;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return EXIT_SUCCESS;
}

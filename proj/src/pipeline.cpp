#include "psychoforge/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "psychoforge/hash.hpp"
#include "psychoforge/rng.hpp"
#include "psychoforge/table.hpp"

namespace psychoforge {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kMockStream = 0x6d6f636bULL;
constexpr std::uint64_t kTsneStream = 0x74736e65ULL;
constexpr std::uint64_t kStudy4Stream = 100;

const std::vector<std::string> kDomainColumns = {"O", "C", "E", "A", "N"};

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

std::string table_text(const Table& t) {
    std::ostringstream out;
    write_table(out, t);
    return out.str();
}

std::string response_table_text(const fs::path& scratch, const ResponseTable& table, const ScaleDefinition& scale) {
    write_response_table(scratch, table, scale);
    auto text = read_text_file(scratch);
    fs::remove(scratch);
    return text;
}

void add_kit_inputs(RunRecorder& rec, const fs::path& data_dir) {
    for (const char* f : {"bfi2.json", "mini_markers.json", "bfi2_expanded.json", "scenarios.json"}) {
        rec.add_input(data_dir / f);
    }
    std::vector<fs::path> templates;
    for (const auto& e : fs::directory_iterator(data_dir / "templates")) {
        if (e.is_regular_file()) templates.push_back(e.path());
    }
    std::sort(templates.begin(), templates.end());
    for (const auto& t : templates) rec.add_input(t);
}

}  // namespace

// ---------------------------------------------------------------- enums

std::string_view study_name(Study s) {
    switch (s) {
        case Study::study1: return "study1";
        case Study::study2: return "study2";
        case Study::study3: return "study3";
        case Study::study4: return "study4";
    }
    return "?";
}

std::string_view backend_name(BackendKind b) { return b == BackendKind::remote ? "remote" : "mock"; }

std::string_view format_choice_name(FormatChoice f) {
    switch (f) {
        case FormatChoice::Likert: return "Likert";
        case FormatChoice::Expanded: return "Expanded";
        case FormatChoice::both: return "both";
    }
    return "?";
}

std::string_view embedder_name(EmbedderKind e) { return e == EmbedderKind::remote ? "remote" : "local"; }

Study parse_study(std::string_view text) {
    for (Study s : {Study::study1, Study::study2, Study::study3, Study::study4}) {
        if (lower(text) == study_name(s)) return s;
    }
    throw ConfigError(fmt::format("unknown study '{}' (study1|study2|study3|study4)", text));
}

BackendKind parse_backend(std::string_view text) {
    if (lower(text) == "mock") return BackendKind::mock;
    if (lower(text) == "remote") return BackendKind::remote;
    throw ConfigError(fmt::format("unknown backend '{}' (remote|mock)", text));
}

FormatChoice parse_format_choice(std::string_view text) {
    if (lower(text) == "both") return FormatChoice::both;
    if (auto f = parse_format(text)) return *f == PromptFormat::Likert ? FormatChoice::Likert : FormatChoice::Expanded;
    throw ConfigError(fmt::format("unknown format '{}' (Likert|Expanded|both)", text));
}

EmbedderKind parse_embedder(std::string_view text) {
    if (lower(text) == "local") return EmbedderKind::local;
    if (lower(text) == "remote") return EmbedderKind::remote;
    throw ConfigError(fmt::format("unknown embedder '{}' (local|remote)", text));
}

std::vector<PromptFormat> formats_of(FormatChoice choice) {
    switch (choice) {
        case FormatChoice::Likert: return {PromptFormat::Likert};
        case FormatChoice::Expanded: return {PromptFormat::Expanded};
        case FormatChoice::both: break;
    }
    return {PromptFormat::Likert, PromptFormat::Expanded};
}

// ---------------------------------------------------------------- config

void RunConfig::validate() const {
    if (study != Study::study1 && study != Study::study2 && n_agents < 1) {
        throw ConfigError("n_agents must be >= 1");
    }
    if (study == Study::study2 && !input) throw ConfigError("study2 needs an input BFI2 response matrix");
    if (!std::isfinite(temperature) || temperature < 0) throw ConfigError("temperature must be finite and >= 0");
    if (max_retries < 0) throw ConfigError("max_retries must be >= 0");
    if (concurrency < 1) throw ConfigError("concurrency must be >= 1");
    if (!(noise_sd >= 0) || !(scenario_noise_sd >= 0)) throw ConfigError("mock noise sd must be >= 0");
    if (tsne_iterations < 1) throw ConfigError("tsne_iterations must be >= 1");
    if (perplexity && !(*perplexity > 0)) throw ConfigError("perplexity must be > 0");
    if (embedder == EmbedderKind::local && embedding_model != LocalHashEmbedder::kModelName) {
        throw ConfigError(fmt::format("the local embedder provides only '{}'", LocalHashEmbedder::kModelName));
    }
    const bool needs_chat = study != Study::study1 && backend == BackendKind::remote;
    const bool needs_embed = study == Study::study1 && embedder == EmbedderKind::remote && !offline;
    if ((needs_chat || needs_embed) && !remote_credentials_available()) {
        throw ConfigError(fmt::format("remote {} needs {} in the environment", needs_chat ? "backend" : "embedder",
                                      kApiKeyEnv));
    }
}

fs::path RunConfig::cache_path() const {
    return embedding_cache ? *embedding_cache : data_dir / "embeddings" / "fixture_cache.jsonl";
}

RunConfig parse_run_config(std::string_view json_text, RunConfig cfg) {
    auto doc = json::parse(json_text, nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) throw ConfigError("run config must be a JSON object");
    try {
        for (const auto& [key, v] : doc.items()) {
            if (key == "_comment") continue;
            else if (key == "study") cfg.study = parse_study(v.get<std::string>());
            else if (key == "backend") cfg.backend = parse_backend(v.get<std::string>());
            else if (key == "format") cfg.format = parse_format_choice(v.get<std::string>());
            else if (key == "n_agents") cfg.n_agents = v.get<int>();
            else if (key == "seed") cfg.seed = v.get<std::uint64_t>();
            else if (key == "data_dir") cfg.data_dir = v.get<std::string>();
            else if (key == "out_dir") cfg.out_dir = v.get<std::string>();
            else if (key == "input") cfg.input = v.is_null() ? std::nullopt : std::optional<fs::path>(v.get<std::string>());
            else if (key == "params") cfg.params = v.is_null() ? std::nullopt : std::optional<fs::path>(v.get<std::string>());
            else if (key == "model_name") cfg.model_name = v.get<std::string>();
            else if (key == "temperature") cfg.temperature = v.get<double>();
            else if (key == "max_retries") cfg.max_retries = v.get<int>();
            else if (key == "concurrency") cfg.concurrency = v.get<std::size_t>();
            else if (key == "noise_sd") cfg.noise_sd = v.get<double>();
            else if (key == "scenario_noise_sd") cfg.scenario_noise_sd = v.get<double>();
            else if (key == "null_mock") cfg.null_mock = v.get<bool>();
            else if (key == "embedder") cfg.embedder = parse_embedder(v.get<std::string>());
            else if (key == "embedding_model") cfg.embedding_model = v.get<std::string>();
            else if (key == "embedding_cache") cfg.embedding_cache = v.is_null() ? std::nullopt : std::optional<fs::path>(v.get<std::string>());
            else if (key == "offline") cfg.offline = v.get<bool>();
            else if (key == "aggregation") {
                auto a = parse_aggregation(v.get<std::string>());
                if (!a) throw ConfigError("aggregation must be pairwise_mean|centroid");
                cfg.aggregation = *a;
            }
            else if (key == "perplexity") cfg.perplexity = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
            else if (key == "tsne_iterations") cfg.tsne_iterations = v.get<int>();
            else if (key == "per_scenario") cfg.per_scenario = v.get<bool>();
            else if (key == "standardize_predictors") cfg.standardize_predictors = v.get<bool>();
            else throw ConfigError(fmt::format("unknown config key '{}'", key));
        }
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("run config: {}", e.what()));
    }
    return cfg;
}

RunConfig load_run_config(const fs::path& path, RunConfig base) {
    try {
        return parse_run_config(read_text_file(path), std::move(base));
    } catch (const ConfigError& e) {
        throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
    }
}

json run_config_to_json(const RunConfig& c) {
    auto opt_path = [](const std::optional<fs::path>& p) { return p ? json(p->generic_string()) : json(nullptr); };
    return {{"study", study_name(c.study)},
            {"backend", backend_name(c.backend)},
            {"format", format_choice_name(c.format)},
            {"n_agents", c.n_agents},
            {"seed", c.seed},
            {"data_dir", c.data_dir.generic_string()},
            {"out_dir", c.out_dir.generic_string()},
            {"input", opt_path(c.input)},
            {"params", opt_path(c.params)},
            {"model_name", c.model_name},
            {"temperature", c.temperature},
            {"max_retries", c.max_retries},
            {"concurrency", c.concurrency},
            {"noise_sd", c.noise_sd},
            {"scenario_noise_sd", c.scenario_noise_sd},
            {"null_mock", c.null_mock},
            {"embedder", embedder_name(c.embedder)},
            {"embedding_model", c.embedding_model},
            {"embedding_cache", opt_path(c.embedding_cache)},
            {"offline", c.offline},
            {"aggregation", aggregation_name(c.aggregation)},
            {"perplexity", c.perplexity ? json(*c.perplexity) : json(nullptr)},
            {"tsne_iterations", c.tsne_iterations},
            {"per_scenario", c.per_scenario},
            {"standardize_predictors", c.standardize_predictors}};
}

// ---------------------------------------------------------------- manifest

RunRecorder::RunRecorder(const RunConfig& config, fs::path out_dir)
    : config_(run_config_to_json(config)), dir_(std::move(out_dir)), started_at_(utc_timestamp()) {
    fs::create_directories(dir_);
    // A stale manifest must not vouch for outputs this run rewrites.
    fs::remove(dir_ / kManifestFile);
}

void RunRecorder::add_input(const fs::path& path) { inputs_[path.generic_string()] = sha256_file(path); }

fs::path RunRecorder::write_output(const std::string& relative, std::string_view content) {
    const auto path = dir_ / relative;
    write_text_file(path, content);
    outputs_[fs::path(relative).generic_string()] = sha256_hex(content);
    return path;
}

void RunRecorder::add_output(const fs::path& path) {
    outputs_[fs::relative(path, dir_).generic_string()] = sha256_file(path);
}

void RunRecorder::note(const std::string& key, json value) { notes_[key] = std::move(value); }

fs::path RunRecorder::finalize() {
    if (finalized_) throw Error("manifest already written");
    json manifest = {{"toolkit_version", kToolkitVersion},
                     {"config", config_},
                     {"started_at", started_at_},
                     {"finished_at", utc_timestamp()},
                     {"inputs", inputs_},
                     {"outputs", outputs_},
                     {"notes", notes_}};
    const auto final_path = dir_ / kManifestFile;
    const auto tmp = dir_ / (std::string(kManifestFile) + ".tmp");
    write_text_file(tmp, manifest.dump(2) + "\n");
    fs::rename(tmp, final_path);
    finalized_ = true;
    return final_path;
}

// ---------------------------------------------------------------- personas

PersonaSet load_personas(const RunConfig& config, const ScaleDefinition& bfi2, RunRecorder* recorder) {
    PersonaSet set;
    if (config.input) {
        auto table = read_response_table(*config.input, bfi2);
        if (recorder) recorder->add_input(*config.input);
        if (config.n_agents > 0 && static_cast<std::size_t>(config.n_agents) != table.responses.size()) {
            spdlog::info("using all {} rows of {} (n_agents = {} ignored)", table.responses.size(),
                         config.input->string(), config.n_agents);
        }
        set.agent_ids = std::move(table.agent_ids);
        set.responses = std::move(table.responses);
        return set;
    }
    const auto params_path = config.params ? *config.params : config.data_dir / "simulation_params_demo.json";
    auto params = load_simulation_params(params_path);
    if (recorder) recorder->add_input(params_path);
    params.n_agents = config.n_agents;
    params.seed = config.seed;
    auto ds = simulate_bfi2(params, bfi2);
    for (std::size_t i = 0; i < ds.responses.size(); ++i) set.agent_ids.push_back(default_agent_id(i));
    set.responses = ds.responses;
    set.simulated = std::move(ds);
    return set;
}

// ---------------------------------------------------------------- CFA per domain

CfaOutcome fit_domain_cfa(const std::vector<ResponseVector>& responses, const ScaleDefinition& scale, Domain domain) {
    const Matrix all = response_matrix(responses, scale, /*recode_reversed=*/true);
    std::vector<Eigen::Index> cols;
    std::vector<std::string> labels;
    for (auto idx : scale.items_in_domain(domain)) {
        cols.push_back(static_cast<Eigen::Index>(idx));
        labels.push_back(scale.items()[idx].id);
    }
    const auto corr = correlation_matrix(all(Eigen::all, cols), labels);
    CfaOutcome outcome;
    outcome.initial = fit_one_factor_cfa(corr);
    const CfaFit* last = &outcome.initial;
    while (!last->converged && last->collinear_pair && corr.size() - outcome.dropped.size() > 3) {
        const auto& [a, b] = *last->collinear_pair;
        outcome.dropped.push_back(*scale.index_of(a) > *scale.index_of(b) ? a : b);
        spdlog::info("{}: dropping '{}' (collinear with '{}') and refitting", domain_name(domain),
                     outcome.dropped.back(), outcome.dropped.back() == a ? b : a);
        outcome.refit = fit_one_factor_cfa(corr.without(outcome.dropped));
        last = &*outcome.refit;
    }
    return outcome;
}

// ---------------------------------------------------------------- backends

std::unique_ptr<CompletionBackend> make_backend(const RunConfig& config, const PromptKit& kit, std::uint64_t stream) {
    if (config.backend == BackendKind::remote) {
        return std::make_unique<RemoteChatBackend>(RemoteConfig::from_environment());
    }
    auto crosswalk = load_mock_crosswalk(config.data_dir / "mock_crosswalk.json");
    crosswalk.validate(kit.bfi2, kit.questionnaire, &kit.scenarios);
    if (config.null_mock) crosswalk = null_scenario_crosswalk(std::move(crosswalk));
    MockOptions options{config.noise_sd, config.scenario_noise_sd, derive_seed(config.seed, kMockStream, stream)};
    return std::make_unique<MockBackend>(kit, std::move(crosswalk), options);
}

namespace {

struct BatchRun {
    std::vector<AgentOutcome> outcomes;
    fs::path transcript;
};

BatchRun run_agents(const RunConfig& config, const CompletionBackend& backend, const AnswerSchema& schema,
                    const std::vector<std::string>& ids, const std::vector<std::string>& prompts, const fs::path& transcript) {
    std::vector<AgentSpec> specs;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        specs.push_back({ids[i], prompts[i], config.model_name, config.temperature, config.max_retries});
    }
    fs::remove(transcript);
    TranscriptStore store(transcript);
    BatchOptions options{config.concurrency, &store};
    return {run_batch(specs, backend, schema, options), transcript};
}

std::map<std::string, ScoreReport> score_all(const std::vector<std::string>& ids,
                                             const std::vector<ResponseVector>& responses,
                                             const ScaleDefinition& scale) {
    std::map<std::string, ScoreReport> out;
    for (std::size_t i = 0; i < ids.size(); ++i) out.emplace(ids[i], score(responses[i], scale));
    return out;
}

void write_personas(RunRecorder& rec, const PersonaSet& personas, const ScaleDefinition& bfi2) {
    if (personas.simulated) {
        for (const auto& p : write_simulated_dataset(rec.dir(), "personas", *personas.simulated, bfi2)) {
            rec.add_output(p);
        }
    } else {
        rec.write_output("personas.csv", response_table_text(rec.dir() / "personas.csv.tmp",
                                                             {personas.agent_ids, personas.responses}, bfi2));
    }
}

void load_kit_and_inputs(const RunConfig& config, PromptKit& kit, RunRecorder& rec) {
    kit = load_prompt_kit(config.data_dir);
    add_kit_inputs(rec, config.data_dir);
    if (config.backend == BackendKind::mock) rec.add_input(config.data_dir / "mock_crosswalk.json");
}

}  // namespace

// ---------------------------------------------------------------- study 2 / 3

Study23Result cmd_study23(const RunConfig& config) {
    if (config.study != Study::study2 && config.study != Study::study3) {
        throw ConfigError("study23 runs need study = study2 or study3");
    }
    config.validate();
    RunRecorder rec(config, config.out_dir);
    PromptKit kit;
    load_kit_and_inputs(config, kit, rec);

    const auto personas = load_personas(config, kit.bfi2, &rec);
    write_personas(rec, personas, kit.bfi2);
    const auto inputs = score_all(personas.agent_ids, personas.responses, kit.bfi2);
    const auto schema = AnswerSchema::for_scale(kit.questionnaire);

    Study23Result result;
    result.n_agents = personas.agent_ids.size();
    Table convergent{{"format", "O", "C", "E", "A", "N", "Average"}, {}};
    Table loadings{{"format", "domain", "item", "loading", "uniqueness", "heywood"}, {}};
    Table status{{"format", "domain", "stage", "items", "converged", "iterations", "fit_value", "dropped", "diagnosis"}, {}};
    Table alpha{{"format", "domain", "alpha", "k_items", "dropped"}, {}};
    Table failures{{"format", "agent_id", "error"}, {}};
    json failure_counts = json::object();

    for (PromptFormat format : formats_of(config.format)) {
        const std::string fname(format_name(format));
        const auto backend = make_backend(config, kit, static_cast<std::uint64_t>(format));
        std::vector<std::string> prompts;
        for (std::size_t i = 0; i < personas.agent_ids.size(); ++i) {
            prompts.push_back(render_persona_prompt({personas.agent_ids[i], personas.responses[i], format}, kit));
        }
        auto batch = run_agents(config, *backend, schema, personas.agent_ids, prompts,
                                rec.dir() / "transcripts" / (fname + ".jsonl"));
        rec.add_output(batch.transcript);

        FormatResults fr;
        std::map<std::string, ScoreReport> matched_inputs, outputs;
        for (const auto& o : batch.outcomes) {
            if (!o.ok()) {
                failures.rows.push_back({fname, o.agent_id, o.error});
                ++fr.failures;
                continue;
            }
            ResponseVector rv{kit.questionnaire.name(), o.result->answers};
            fr.agent_ids.push_back(o.agent_id);
            fr.answers.push_back(rv);
            matched_inputs.emplace(o.agent_id, inputs.at(o.agent_id));
            outputs.emplace(o.agent_id, score(rv, kit.questionnaire));
        }
        failure_counts[fname] = fr.failures;
        rec.write_output("mini_markers_" + fname + ".csv",
                         response_table_text(rec.dir() / "mm.csv.tmp", {fr.agent_ids, fr.answers}, kit.questionnaire));

        fr.convergent = convergent_table(matched_inputs, outputs);
        std::vector<std::string> row{fname};
        for (double r : fr.convergent.r) row.push_back(format_real(r));
        row.push_back(format_real(fr.convergent.average));
        convergent.rows.push_back(row);

        for (Domain d : kDomains) {
            const std::string dname(1, domain_code(d));
            auto cfa = fit_domain_cfa(fr.answers, kit.questionnaire, d);
            auto status_row = [&](const char* stage, const CfaFit& fit, const std::vector<std::string>& dropped) {
                std::string joined;
                for (const auto& x : dropped) joined += (joined.empty() ? "" : ";") + x;
                status.rows.push_back({fname, dname, stage, std::to_string(fit.items.size()),
                                       fit.converged ? "true" : "false", std::to_string(fit.iterations),
                                       format_real(fit.fit_value), joined, fit.diagnosis});
            };
            status_row("initial", cfa.initial, {});
            if (cfa.refit) status_row("refit", *cfa.refit, cfa.dropped);
            const auto& fit = cfa.final_fit();
            for (auto idx : kit.questionnaire.items_in_domain(d)) {
                const auto& id = kit.questionnaire.items()[idx].id;
                if (std::count(cfa.dropped.begin(), cfa.dropped.end(), id)) {
                    loadings.rows.push_back({fname, dname, id, "NA", "NA", "dropped"});
                } else if (fit.loadings.count(id)) {
                    const bool heywood = std::count(fit.heywood_flags.begin(), fit.heywood_flags.end(), id) > 0;
                    loadings.rows.push_back({fname, dname, id, format_real(fit.loadings.at(id)),
                                             format_real(fit.uniquenesses.at(id)), heywood ? "true" : "false"});
                } else {
                    loadings.rows.push_back({fname, dname, id, "NA", "NA", "not estimated"});
                }
            }
            auto a = domain_alpha(fr.answers, kit.questionnaire, d, cfa.dropped);
            std::string dropped;
            for (const auto& x : a.dropped_items) dropped += (dropped.empty() ? "" : ";") + x;
            alpha.rows.push_back({fname, dname, format_real(a.alpha), std::to_string(a.k_items), dropped});
            fr.alpha.emplace(d, std::move(a));
            fr.cfa.emplace(d, std::move(cfa));
        }
        result.formats.emplace(format, std::move(fr));
    }

    rec.write_output("convergent.csv", table_text(convergent));
    rec.write_output("cfa_loadings.csv", table_text(loadings));
    rec.write_output("cfa_status.csv", table_text(status));
    rec.write_output("alpha.csv", table_text(alpha));
    rec.write_output("failures.csv", table_text(failures));
    rec.note("n_agents", result.n_agents);
    rec.note("agent_failures", failure_counts);
    result.manifest = rec.finalize();
    return result;
}

// ---------------------------------------------------------------- simulate

fs::path cmd_simulate(const RunConfig& config) {
    config.validate();
    RunRecorder rec(config, config.out_dir);
    const auto bfi2 = load_scale(config.data_dir / "bfi2.json");
    rec.add_input(config.data_dir / "bfi2.json");
    RunConfig sim = config;
    sim.input.reset();
    const auto personas = load_personas(sim, bfi2, &rec);
    write_personas(rec, personas, bfi2);
    const auto& ds = *personas.simulated;
    Table latent{{"agent_id"}, {}};
    for (const auto& f : ds.params.facets) latent.header.push_back(f);
    for (Eigen::Index i = 0; i < ds.latent_facets.rows(); ++i) {
        std::vector<std::string> row{personas.agent_ids[static_cast<std::size_t>(i)]};
        for (Eigen::Index k = 0; k < ds.latent_facets.cols(); ++k) row.push_back(format_real(ds.latent_facets(i, k)));
        latent.rows.push_back(std::move(row));
    }
    rec.write_output("latent_facets.csv", table_text(latent));
    rec.note("ridge", ds.ridge);
    rec.note("n_agents", personas.agent_ids.size());
    return rec.finalize();
}

// ---------------------------------------------------------------- study 4

Study4Result cmd_study4(const RunConfig& config) {
    config.validate();
    RunRecorder rec(config, config.out_dir);
    PromptKit kit;
    load_kit_and_inputs(config, kit, rec);
    const auto personas = load_personas(config, kit.bfi2, &rec);
    write_personas(rec, personas, kit.bfi2);

    Study4Result result;
    std::map<std::string, std::map<std::string, int>> answers;  // agent -> scenario -> raw
    std::map<std::string, std::string> errors;
    for (Battery battery : {Battery::risk, Battery::ethics}) {
        const std::string bname(battery_name(battery));
        const auto scenarios = kit.battery(battery);
        const auto backend = make_backend(config, kit, kStudy4Stream + static_cast<std::uint64_t>(battery));
        std::vector<std::string> prompts;
        for (std::size_t i = 0; i < personas.agent_ids.size(); ++i) {
            prompts.push_back(render_scenarios({personas.agent_ids[i], personas.responses[i], PromptFormat::Expanded},
                                               battery, kit));
        }
        auto batch = run_agents(config, *backend, AnswerSchema::for_scenarios(scenarios), personas.agent_ids, prompts,
                                rec.dir() / "transcripts" / (bname + ".jsonl"));
        rec.add_output(batch.transcript);
        for (const auto& o : batch.outcomes) {
            if (o.ok()) {
                for (const auto& [k, v] : o.result->answers) answers[o.agent_id][k] = v;
            } else {
                errors[o.agent_id] += fmt::format("{}{}: {}", errors[o.agent_id].empty() ? "" : " | ", bname, o.error);
            }
        }
    }

    std::vector<std::size_t> used;
    Table responses{{"agent_id"}, {}};
    for (const auto& s : kit.scenarios) responses.header.push_back(s.name);
    Table failures{{"agent_id", "error"}, {}};
    for (std::size_t i = 0; i < personas.agent_ids.size(); ++i) {
        const auto& id = personas.agent_ids[i];
        if (errors.count(id)) {
            failures.rows.push_back({id, errors.at(id)});
            continue;
        }
        used.push_back(i);
        std::vector<std::string> row{id};
        for (const auto& s : kit.scenarios) row.push_back(std::to_string(answers.at(id).at(s.name)));
        responses.rows.push_back(std::move(row));
    }
    result.n_agents = used.size();
    result.failures = failures.rows.size();
    if (used.size() < kDomains.size() + 2) {
        throw ValidationError(fmt::format("study4: only {} complete agents, too few to regress", used.size()));
    }

    const auto n = static_cast<Eigen::Index>(used.size());
    Matrix x(n, 5);
    for (Eigen::Index r = 0; r < n; ++r) {
        const auto rep = score(personas.responses[used[static_cast<std::size_t>(r)]], kit.bfi2);
        for (Domain d : kDomains) x(r, static_cast<Eigen::Index>(domain_index(d))) = rep.domain(d);
    }
    if (config.standardize_predictors) {
        for (Eigen::Index k = 0; k < x.cols(); ++k) {
            const double mean = x.col(k).mean();
            const double sd = std::sqrt((x.col(k).array() - mean).square().sum() / static_cast<double>(n - 1));
            if (sd == 0) throw ValidationError("cannot standardize a constant predictor");
            x.col(k) = (x.col(k).array() - mean) / sd;
        }
    }
    // Outcomes recoded so that higher = more risk-taking / more principled.
    auto recoded = [&](const ScenarioDefinition& s, Eigen::Index r) {
        const auto& id = personas.agent_ids[used[static_cast<std::size_t>(r)]];
        return static_cast<double>(s.response_min + s.response_max - answers.at(id).at(s.name));
    };

    Table regression{{"model", "predictor", "beta", "std_error", "t", "p", "star"}, {}};
    Table summary{{"model", "n", "df", "r_squared", "intercept"}, {}};
    auto emit = [&](const std::string& model, const RegressionFit& fit) {
        for (const auto& p : fit.predictors) {
            regression.rows.push_back({model, p, format_real(fit.coefficients.at(p)), format_real(fit.std_errors.at(p)),
                                       format_real(fit.t_stats.at(p)), format_real(fit.p_values.at(p)),
                                       fit.significant(p) ? "*" : ""});
        }
        summary.rows.push_back({model, std::to_string(fit.n), std::to_string(fit.df), format_real(fit.r_squared),
                                format_real(fit.intercept)});
    };
    for (Battery battery : {Battery::risk, Battery::ethics}) {
        const auto scenarios = kit.battery(battery);
        Vector y = Vector::Zero(n);
        for (Eigen::Index r = 0; r < n; ++r) {
            for (const auto& s : scenarios) y(r) += recoded(s, r);
            y(r) /= static_cast<double>(scenarios.size());
        }
        const std::string bname(battery_name(battery));
        auto fit = ols_regress(y, x, kDomainColumns);
        emit(bname, fit);
        result.batteries.emplace(bname, std::move(fit));
        if (config.per_scenario) {
            for (const auto& s : scenarios) {
                Vector ys(n);
                for (Eigen::Index r = 0; r < n; ++r) ys(r) = recoded(s, r);
                auto sfit = ols_regress(ys, x, kDomainColumns);
                emit(s.name, sfit);
                result.per_scenario.emplace(s.name, std::move(sfit));
            }
        }
    }

    rec.write_output("scenario_responses.csv", table_text(responses));
    rec.write_output("regression.csv", table_text(regression));
    rec.write_output("regression_summary.csv", table_text(summary));
    rec.write_output("failures.csv", table_text(failures));
    rec.note("n_agents", personas.agent_ids.size());
    rec.note("complete_agents", result.n_agents);
    rec.note("agent_failures", result.failures);
    result.manifest = rec.finalize();
    return result;
}

// ---------------------------------------------------------------- study 1

namespace {

struct Corpus {
    std::vector<ScaleDefinition> scales;
    std::vector<std::string> texts;
};

Corpus study1_corpus(const fs::path& data_dir) {
    Corpus c;
    for (const char* f : {"bfi2.json", "mini_markers.json", "bfi.json"}) c.scales.push_back(load_scale(data_dir / f));
    for (const auto& s : c.scales) {
        for (const auto& it : s.items()) c.texts.push_back(it.text);
    }
    return c;
}

std::unique_ptr<Embedder> make_embedder(const RunConfig& config) {
    if (config.embedder == EmbedderKind::local) return std::make_unique<LocalHashEmbedder>();
    if (config.offline) return nullptr;
    return std::make_unique<RemoteEmbedder>(RemoteEmbedder::from_environment());
}

}  // namespace

EmbedStats cmd_embed(const RunConfig& config) {
    RunConfig c = config;
    c.study = Study::study1;
    c.offline = false;
    c.validate();
    const auto corpus = study1_corpus(c.data_dir);
    EmbeddingCache cache(c.cache_path());
    const auto embedder = make_embedder(c);
    EmbedStats stats;
    embed_texts(corpus.texts, c.embedding_model, cache, embedder.get(), false, &stats);
    spdlog::info("embedding cache {}: {} hits, {} fetched in {} requests", c.cache_path().string(), stats.cache_hits,
                 stats.fetched, stats.remote_requests);
    return stats;
}

Study1Result cmd_study1(const RunConfig& config) {
    RunConfig c = config;
    c.study = Study::study1;
    c.validate();
    RunRecorder rec(c, c.out_dir);
    const auto corpus = study1_corpus(c.data_dir);
    for (const char* f : {"bfi2.json", "mini_markers.json", "bfi.json"}) rec.add_input(c.data_dir / f);

    EmbeddingCache cache(c.cache_path());
    const auto embedder = make_embedder(c);
    EmbedStats stats;
    const auto records = embed_texts(corpus.texts, c.embedding_model, cache, embedder.get(), c.offline, &stats);
    rec.add_input(c.cache_path());

    Study1Result result;
    std::vector<std::string> tests;
    std::map<std::string, std::vector<EmbeddedItem>> items;
    std::vector<std::string> point_ids;
    Matrix data(static_cast<Eigen::Index>(records.size()), static_cast<Eigen::Index>(records.front().vector.size()));
    std::size_t k = 0;
    for (const auto& s : corpus.scales) {
        tests.push_back(s.name());
        for (const auto& it : s.items()) {
            const auto& rec_k = records[k];
            items[s.name()].push_back({s.name(), it.id, it.domain, rec_k.vector});
            data.row(static_cast<Eigen::Index>(k)) =
                Eigen::Map<const Eigen::RowVectorXd>(rec_k.vector.data(), static_cast<Eigen::Index>(rec_k.vector.size()));
            point_ids.push_back(it.id);
            result.point_tests.push_back(s.name());
            result.point_domains.push_back(std::string(1, domain_code(it.domain)));
            ++k;
        }
    }
    result.panels = similarity_panels(tests, items, c.aggregation);

    TsneConfig tc;
    tc.perplexity = c.perplexity;
    tc.iterations = c.tsne_iterations;
    tc.seed = derive_seed(c.seed, kTsneStream);
    result.tsne = tsne_fit(data, tc, result.point_domains);

    Table sim{{"panel", "test"}, {}};
    sim.header.insert(sim.header.end(), tests.begin(), tests.end());
    sim.header.push_back("mean_other");
    for (const auto& panel : result.panels) {
        const auto means = panel.row_means();
        for (std::size_t i = 0; i < tests.size(); ++i) {
            std::vector<std::string> row{panel.title, tests[i]};
            for (std::size_t j = 0; j < tests.size(); ++j) {
                row.push_back(format_real(panel.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))));
            }
            row.push_back(format_real(means[i]));
            sim.rows.push_back(std::move(row));
        }
    }
    Table proj{{"item_id", "test", "domain", "x", "y"}, {}};
    for (std::size_t i = 0; i < point_ids.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        proj.rows.push_back({point_ids[i], result.point_tests[i], result.point_domains[i],
                             format_real(result.tsne.points(r, 0)), format_real(result.tsne.points(r, 1))});
    }
    const double sil = silhouette(result.tsne.points, result.point_domains);
    Table tsummary{{"points", "perplexity", "iterations", "kl_exaggeration_end", "kl_final", "silhouette_domain"}, {}};
    tsummary.rows.push_back({std::to_string(point_ids.size()), format_real(result.tsne.perplexity),
                             std::to_string(c.tsne_iterations),
                             format_real(result.tsne.kl_trace[static_cast<std::size_t>(result.tsne.exaggeration_end)]),
                             format_real(result.tsne.kl_trace.back()), format_real(sil)});

    rec.write_output("similarity.csv", table_text(sim));
    rec.write_output("tsne.csv", table_text(proj));
    rec.write_output("tsne_summary.csv", table_text(tsummary));
    rec.note("embedding_model", c.embedding_model);
    rec.note("embedding_requests", stats.remote_requests);
    result.manifest = rec.finalize();
    return result;
}

// ---------------------------------------------------------------- report

namespace {

constexpr std::string_view kReferenceLabel = "published live-model reference, not an assertion target";

void verify_manifest(const fs::path& dir, const json& manifest) {
    for (const auto& [rel, hash] : manifest.at("outputs").items()) {
        const auto path = dir / rel;
        if (!fs::exists(path)) throw ValidationError(fmt::format("{}: output '{}' is missing", dir.string(), rel));
        if (sha256_file(path) != hash.get<std::string>()) {
            throw ValidationError(fmt::format("{}: hash mismatch for output '{}'", dir.string(), rel));
        }
    }
}

std::string md_row(const std::vector<std::string>& cells) {
    std::string out = "|";
    for (const auto& c : cells) out += " " + c + " |";
    return out + "\n";
}

std::string md_header(const std::vector<std::string>& cells) {
    std::string out = md_row(cells) + "|";
    for (std::size_t i = 0; i < cells.size(); ++i) out += "---|";
    return out + "\n";
}

std::string ref_cell(const json& node, const std::string& key, int decimals = 3) {
    if (!node.is_object() || !node.contains(key)) return "";
    const auto& v = node.at(key);
    if (v.is_array()) return fmt::format("{:.{}f}{}", v.at(0).get<double>(), decimals, v.at(1).get<bool>() ? "*" : "");
    return fmt::format("{:.{}f}", v.get<double>(), decimals);
}

std::string fmt3(const std::string& cell) {
    if (cell == "NA" || cell.empty()) return cell;
    try {
        return fmt::format("{:.3f}", std::stod(cell));
    } catch (const std::exception&) {
        return cell;
    }
}

json at_path(const json& root, std::initializer_list<std::string> keys) {
    const json* node = &root;
    for (const auto& k : keys) {
        if (!node->is_object() || !node->contains(k)) return json();
        node = &node->at(k);
    }
    return *node;
}

std::string render_study1(const fs::path& dir) {
    std::string out = "## Semantic similarity between instruments\n\n";
    const auto sim = read_table(dir / "similarity.csv");
    const auto panel_col = *sim.column("panel");
    std::string current;
    std::vector<std::string> tests(sim.header.begin() + 2, sim.header.end() - 1);
    for (const auto& row : sim.rows) {
        if (row[panel_col] != current) {
            current = row[panel_col];
            out += fmt::format("\n### {}\n\n", current);
            std::vector<std::string> head{"test"};
            head.insert(head.end(), tests.begin(), tests.end());
            head.push_back("mean vs others");
            out += md_header(head);
        }
        std::vector<std::string> cells{row[1]};
        for (std::size_t j = 2; j < row.size(); ++j) cells.push_back(fmt3(row[j]));
        out += md_row(cells);
    }
    const auto ts = read_table(dir / "tsne_summary.csv");
    out += "\n### Two-dimensional projection\n\n" + md_header(ts.header);
    for (const auto& row : ts.rows) out += md_row(row);
    out += "\nPoint coordinates: `tsne.csv`.\n\n";
    return out;
}

std::string render_convergent(const fs::path& dir, const json& manifest, const json& reference) {
    const std::string study = manifest.at("config").at("study").get<std::string>();
    std::string out = "## Convergent correlations: questionnaire scores vs persona BFI2 scores\n\n";
    out += md_header({"row", "O", "C", "E", "A", "N", "Average"});
    for (const auto& row : read_table(dir / "convergent.csv").rows) {
        std::vector<std::string> cells{"this run, " + row[0]};
        for (std::size_t j = 1; j < row.size(); ++j) cells.push_back(fmt3(row[j]));
        out += md_row(cells);
    }
    for (const char* fmt_name : {"Likert", "Expanded"}) {
        const auto ref = at_path(reference, {"convergent_with_bfi2", study, fmt_name});
        if (ref.is_null()) continue;
        out += md_row({fmt::format("{} ({}, {})", kReferenceLabel, study, fmt_name), ref_cell(ref, "O"),
                       ref_cell(ref, "C"), ref_cell(ref, "E"), ref_cell(ref, "A"), ref_cell(ref, "N"),
                       ref_cell(ref, "Avg")});
    }
    return out + "\n";
}

std::string render_reliability(const fs::path& dir, const json& manifest, const json& reference) {
    const std::string study = manifest.at("config").at("study").get<std::string>();
    std::string out = "## Reliability and one-factor CFA\n\n### Cronbach's alpha\n\n";
    out += md_header({"row", "O", "C", "E", "A", "N"});
    std::map<std::string, std::map<std::string, std::string>> alpha;
    std::vector<std::string> order;
    for (const auto& row : read_table(dir / "alpha.csv").rows) {
        if (!alpha.count(row[0])) order.push_back(row[0]);
        alpha[row[0]][row[1]] = fmt3(row[2]) + (row[4].empty() ? "" : fmt::format(" (without {})", row[4]));
    }
    for (const auto& f : order) {
        out += md_row({"this run, " + f, alpha[f]["O"], alpha[f]["C"], alpha[f]["E"], alpha[f]["A"], alpha[f]["N"]});
    }
    auto ref_row = [&](const std::string& label, const json& ref) {
        if (ref.is_null()) return;
        out += md_row({fmt::format("{} ({})", kReferenceLabel, label), ref_cell(ref, "O"), ref_cell(ref, "C"),
                       ref_cell(ref, "E"), ref_cell(ref, "A"), ref_cell(ref, "N")});
    };
    ref_row("human", at_path(reference, {"reliability", "Human"}));
    for (const char* f : {"Likert", "Expanded"}) ref_row(study + ", " + f, at_path(reference, {"reliability", study, f}));

    out += "\n### Model status\n\n";
    const auto status = read_table(dir / "cfa_status.csv");
    out += md_header(status.header);
    for (auto row : status.rows) {
        row[6] = fmt3(row[6]);
        out += md_row(row);
    }
    out += "\n### Standardized loadings\n\n";
    const auto loadings = read_table(dir / "cfa_loadings.csv");
    out += md_header(loadings.header);
    for (auto row : loadings.rows) {
        row[3] = fmt3(row[3]);
        row[4] = fmt3(row[4]);
        out += md_row(row);
    }
    return out + "\n";
}

std::string render_regression(const fs::path& dir, const json& reference) {
    std::string out = "## Scenario regressions on the five domain scores\n\nStars mark p < .05.\n\n";
    out += md_header({"row", "O", "C", "E", "A", "N", "R2", "n"});
    std::map<std::string, std::map<std::string, std::string>> cells;
    std::vector<std::string> order;
    for (const auto& row : read_table(dir / "regression.csv").rows) {
        if (!cells.count(row[0])) order.push_back(row[0]);
        cells[row[0]][row[1]] = fmt3(row[2]) + row[6];
    }
    std::map<std::string, std::pair<std::string, std::string>> summary;
    for (const auto& row : read_table(dir / "regression_summary.csv").rows) summary[row[0]] = {fmt3(row[3]), row[1]};
    for (const auto& m : order) {
        auto& c = cells[m];
        out += md_row({"this run, " + m, c["O"], c["C"], c["E"], c["A"], c["N"], summary[m].first, summary[m].second});
    }
    for (const char* battery : {"risk", "ethics"}) {
        for (const char* who : {"Human", "Agents"}) {
            const auto ref = at_path(reference, {"regression", battery, who});
            if (ref.is_null()) continue;
            out += md_row({fmt::format("{} ({}, {})", kReferenceLabel, battery, who), ref_cell(ref, "O"),
                           ref_cell(ref, "C"), ref_cell(ref, "E"), ref_cell(ref, "A"), ref_cell(ref, "N"), "", ""});
        }
    }
    return out + "\n";
}

}  // namespace

std::string cmd_report(const fs::path& run_dir, const std::optional<fs::path>& reference_path) {
    std::vector<fs::path> dirs;
    if (fs::exists(run_dir / kManifestFile)) dirs.push_back(run_dir);
    if (fs::is_directory(run_dir)) {
        std::vector<fs::path> subs;
        for (const auto& e : fs::directory_iterator(run_dir)) {
            if (e.is_directory() && fs::exists(e.path() / kManifestFile)) subs.push_back(e.path());
        }
        std::sort(subs.begin(), subs.end());
        dirs.insert(dirs.end(), subs.begin(), subs.end());
    }
    if (dirs.empty()) throw ValidationError(fmt::format("no {} under '{}'", kManifestFile, run_dir.string()));

    std::vector<json> manifests;
    for (const auto& d : dirs) {
        auto m = json::parse(read_text_file(d / kManifestFile), nullptr, false);
        if (m.is_discarded()) throw ParseError(fmt::format("{}: corrupt manifest", (d / kManifestFile).string()));
        verify_manifest(d, m);
        manifests.push_back(std::move(m));
    }

    json reference;
    auto ref_path = reference_path;
    if (!ref_path) {
        const auto candidate =
            fs::path(manifests.front().at("config").at("data_dir").get<std::string>()) / "reference_values.json";
        if (fs::exists(candidate)) ref_path = candidate;
    }
    if (ref_path) {
        reference = json::parse(read_text_file(*ref_path), nullptr, false);
        if (reference.is_discarded()) throw ParseError(fmt::format("{}: invalid JSON", ref_path->string()));
    }

    std::string out = fmt::format(
        "# Run report\n\nToolkit version {}. All output hashes verified against manifests.\n\n"
        "Domain scores are means of the reverse-coded items, not sums. Every statistic below is a correlation or "
        "a regression on those scores, so the difference is a constant factor at most.\n\n",
        kToolkitVersion);
    out += md_header({"run", "study", "backend", "format", "n_agents", "seed", "outputs"});
    for (std::size_t i = 0; i < dirs.size(); ++i) {
        const auto& cfg = manifests[i].at("config");
        const auto rel = dirs[i] == run_dir ? std::string(".") : fs::relative(dirs[i], run_dir).generic_string();
        out += md_row({rel, cfg.at("study").get<std::string>(), cfg.at("backend").get<std::string>(),
                       cfg.at("format").get<std::string>(), std::to_string(cfg.at("n_agents").get<int>()),
                       std::to_string(cfg.at("seed").get<std::uint64_t>()),
                       std::to_string(manifests[i].at("outputs").size())});
    }
    out += "\n";
    if (reference.is_null()) out += "No reference values found; published comparison rows omitted.\n\n";
    for (std::size_t i = 0; i < dirs.size(); ++i) {
        const auto& outputs = manifests[i].at("outputs");
        if (outputs.contains("similarity.csv")) out += render_study1(dirs[i]);
        if (outputs.contains("convergent.csv")) out += render_convergent(dirs[i], manifests[i], reference);
        if (outputs.contains("alpha.csv")) out += render_reliability(dirs[i], manifests[i], reference);
        if (outputs.contains("regression.csv")) out += render_regression(dirs[i], reference);
        if (outputs.contains("failures.csv")) {
            const auto failures = read_table(dirs[i] / "failures.csv");
            if (!failures.rows.empty()) {
                out += fmt::format("## Agent failures ({})\n\n", dirs[i].filename().generic_string());
                out += md_header(failures.header);
                for (const auto& row : failures.rows) out += md_row(row);
                out += "\n";
            }
        }
    }
    write_text_file(run_dir / "report.md", out);
    return out;
}

std::string cmd_run(const RunConfig& config) {
    RunConfig s1 = config;
    s1.study = Study::study1;
    s1.out_dir = config.out_dir / "study1";
    cmd_study1(s1);

    RunConfig s23 = config;
    s23.study = config.input ? Study::study2 : Study::study3;
    s23.out_dir = config.out_dir / "study23";
    cmd_study23(s23);

    RunConfig s4 = config;
    s4.study = Study::study4;
    s4.out_dir = config.out_dir / "study4";
    cmd_study4(s4);

    return cmd_report(config.out_dir);
}

}  // namespace psychoforge

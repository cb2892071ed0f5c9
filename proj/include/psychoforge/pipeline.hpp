#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "psychoforge/agent.hpp"
#include "psychoforge/persona.hpp"
#include "psychoforge/psychometrics.hpp"
#include "psychoforge/semantic.hpp"
#include "psychoforge/simulate.hpp"

namespace psychoforge {

enum class Study { study1, study2, study3, study4 };
enum class BackendKind { remote, mock };
enum class FormatChoice { Likert, Expanded, both };
enum class EmbedderKind { local, remote };

std::string_view study_name(Study s);
std::string_view backend_name(BackendKind b);
std::string_view format_choice_name(FormatChoice f);
std::string_view embedder_name(EmbedderKind e);
Study parse_study(std::string_view text);
BackendKind parse_backend(std::string_view text);
FormatChoice parse_format_choice(std::string_view text);
EmbedderKind parse_embedder(std::string_view text);

std::vector<PromptFormat> formats_of(FormatChoice choice);

/// Everything a run depends on. Paths are taken relative to the working
/// directory. JSON keys mirror the field names.
struct RunConfig {
    Study study = Study::study3;
    BackendKind backend = BackendKind::mock;
    FormatChoice format = FormatChoice::both;
    int n_agents = 200;
    std::uint64_t seed = 20240125;

    std::filesystem::path data_dir = "data";
    std::filesystem::path out_dir = "runs/latest";
    std::optional<std::filesystem::path> input;   // BFI2 response matrix
    std::optional<std::filesystem::path> params;  // simulation parameters

    std::string model_name{kDefaultChatModel};
    double temperature = 1.0;
    int max_retries = 3;
    std::size_t concurrency = 4;

    double noise_sd = 0.0;
    double scenario_noise_sd = 1.0;
    bool null_mock = false;

    EmbedderKind embedder = EmbedderKind::local;
    std::string embedding_model{LocalHashEmbedder::kModelName};
    std::optional<std::filesystem::path> embedding_cache;  // default <data_dir>/embeddings/fixture_cache.jsonl
    bool offline = false;
    Aggregation aggregation = Aggregation::pairwise_mean;
    std::optional<double> perplexity;
    int tsne_iterations = 1000;

    bool per_scenario = false;
    bool standardize_predictors = false;

    /// Throws ConfigError; a remote backend or embedder without credentials
    /// is rejected here, before any request is made.
    void validate() const;
    std::filesystem::path cache_path() const;
};

RunConfig parse_run_config(std::string_view json_text, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});
nlohmann::json run_config_to_json(const RunConfig& config);

/// Collects input and output hashes for one run directory and writes
/// `manifest.json` last, atomically.
class RunRecorder {
public:
    RunRecorder(const RunConfig& config, std::filesystem::path out_dir);

    void add_input(const std::filesystem::path& path);
    std::filesystem::path write_output(const std::string& relative, std::string_view content);
    void add_output(const std::filesystem::path& path);
    void note(const std::string& key, nlohmann::json value);
    std::filesystem::path finalize();

    const std::filesystem::path& dir() const { return dir_; }

private:
    nlohmann::json config_;
    std::filesystem::path dir_;
    std::string started_at_;
    std::map<std::string, std::string> inputs_;
    std::map<std::string, std::string> outputs_;
    nlohmann::json notes_ = nlohmann::json::object();
    bool finalized_ = false;
};

inline constexpr std::string_view kManifestFile = "manifest.json";

struct PersonaSet {
    std::vector<std::string> agent_ids;
    std::vector<ResponseVector> responses;
    std::optional<SimulatedDataset> simulated;
};

/// Personas from the configured response matrix, or simulated from the
/// parameter file (defaulting to the bundled demo parameters) with the run's
/// seed and agent count.
PersonaSet load_personas(const RunConfig& config, const ScaleDefinition& bfi2, RunRecorder* recorder = nullptr);

struct CfaOutcome {
    CfaFit initial;
    std::optional<CfaFit> refit;
    std::vector<std::string> dropped;

    const CfaFit& final_fit() const { return refit ? *refit : initial; }
};

/// Correlations of one domain's (recoded) questionnaire items; on a
/// collinearity diagnosis the later-listed item of the pair is dropped and
/// the model refitted.
CfaOutcome fit_domain_cfa(const std::vector<ResponseVector>& responses, const ScaleDefinition& scale, Domain domain);

struct FormatResults {
    std::vector<std::string> agent_ids;  // successful agents, input order
    std::vector<ResponseVector> answers;
    ConvergentTable convergent;
    std::map<Domain, CfaOutcome> cfa;
    std::map<Domain, AlphaReport> alpha;
    std::size_t failures = 0;
};

struct Study23Result {
    std::map<PromptFormat, FormatResults> formats;
    std::size_t n_agents = 0;
    std::filesystem::path manifest;
};

struct Study4Result {
    std::map<std::string, RegressionFit> batteries;  // "risk", "ethics"
    std::map<std::string, RegressionFit> per_scenario;
    std::size_t n_agents = 0;
    std::size_t failures = 0;
    std::filesystem::path manifest;
};

struct Study1Result {
    std::vector<SimilarityPanel> panels;
    TsneResult tsne;
    std::vector<std::string> point_tests;
    std::vector<std::string> point_domains;
    std::filesystem::path manifest;
};

std::unique_ptr<CompletionBackend> make_backend(const RunConfig& config, const PromptKit& kit, std::uint64_t stream);

Study1Result cmd_study1(const RunConfig& config);
std::filesystem::path cmd_simulate(const RunConfig& config);
Study23Result cmd_study23(const RunConfig& config);
Study4Result cmd_study4(const RunConfig& config);
/// Embeds the Study 1 corpus into the configured cache; returns fetch stats.
EmbedStats cmd_embed(const RunConfig& config);

/// Verifies every manifest under `run_dir` (itself or its immediate
/// subdirectories) and renders a Markdown report with published live-model
/// values beside the run's tables. Writes `report.md` and returns its text.
std::string cmd_report(const std::filesystem::path& run_dir,
                       const std::optional<std::filesystem::path>& reference = std::nullopt);

/// study1 + study23 + study4 into `<out_dir>/{study1,study23,study4}`, then the report.
std::string cmd_run(const RunConfig& config);

}  // namespace psychoforge

#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "psychoforge/persona.hpp"

namespace psychoforge {

inline constexpr std::string_view kDefaultChatModel = "gpt-3.5-turbo-0125";
inline constexpr std::string_view kApiBaseEnv = "PSYCHOFORGE_API_BASE";
inline constexpr std::string_view kApiKeyEnv = "PSYCHOFORGE_API_KEY";
inline constexpr std::string_view kDefaultApiBase = "https://api.openai.com/v1";

struct AgentSpec {
    std::string agent_id;
    std::string prompt;
    std::string model_name{kDefaultChatModel};
    double temperature = 1.0;
    int max_retries = 3;

    void validate() const;
};

struct Completion {
    std::string text;
    int attempts = 1;
};

class CompletionBackend {
public:
    virtual ~CompletionBackend() = default;
    /// Must be safe to call concurrently.
    virtual Completion complete(const AgentSpec& spec) const = 0;
    virtual std::string_view name() const = 0;
};

struct RemoteConfig {
    std::string api_base{kDefaultApiBase};
    std::string api_key;
    std::chrono::milliseconds initial_backoff{500};
    double backoff_factor = 2.0;
    std::chrono::seconds timeout{120};

    /// Reads PSYCHOFORGE_API_BASE / PSYCHOFORGE_API_KEY. Throws ConfigError
    /// when the key is absent.
    static RemoteConfig from_environment();
};

bool remote_credentials_available();

/// OpenAI-compatible `POST {base}/chat/completions`, prompt as one user
/// message. Network errors, 429 and 5xx are retried `max_retries` times with
/// exponential backoff; anything else fails immediately.
class RemoteChatBackend final : public CompletionBackend {
public:
    explicit RemoteChatBackend(RemoteConfig config);
    Completion complete(const AgentSpec& spec) const override;
    std::string_view name() const override { return "remote"; }

private:
    RemoteConfig config_;
};

struct CrosswalkLink {
    std::string item_id;
    int sign = 1;
};

/// Deterministic offline stand-in for the live model: a hand-made map from
/// questionnaire adjectives to BFI2 items, plus per-scenario domain weights.
struct MockCrosswalk {
    std::map<std::string, std::vector<CrosswalkLink>> adjectives;
    std::map<std::string, std::array<double, 5>> scenario_weights;

    /// Every questionnaire item mapped to >= 1 known BFI2 item, signs +1
    /// exactly when the two keyings agree, weights finite. Scenario weights
    /// are checked against `scenarios` when given.
    void validate(const ScaleDefinition& bfi2, const ScaleDefinition& questionnaire,
                  const std::vector<ScenarioDefinition>* scenarios = nullptr) const;
};

MockCrosswalk load_mock_crosswalk(const std::filesystem::path& path);

/// Same crosswalk with every scenario weight set to zero (persona-blind answers).
MockCrosswalk null_scenario_crosswalk(MockCrosswalk crosswalk);

/// Questionnaire answers as a JSON object. Each adjective takes the mean of
/// its mapped BFI2 answers (sign -1 reflects the answer), adds N(0, noise_sd)
/// in the 5-point metric, maps affinely onto the questionnaire range, rounds
/// and clamps. Adjectives with identical crosswalk rows share their noise
/// draw, so synonyms stay synonyms.
std::string mock_complete(const PersonaProfile& profile, const MockCrosswalk& crosswalk, const PromptKit& kit,
                          double noise_sd, std::uint64_t seed);

/// Scenario answers for the named scenarios. Propensity is the weighted sum of
/// centred domain scores mapped onto the response range; the value is emitted
/// on the prompt's anchor orientation (1 = the risky / permissive pole).
std::string mock_complete_scenarios(const PersonaProfile& profile, const std::vector<std::string>& scenario_names,
                                    const MockCrosswalk& crosswalk, const PromptKit& kit, double noise_sd,
                                    std::uint64_t seed);

struct MockOptions {
    double noise_sd = 0.0;
    double scenario_noise_sd = 0.0;
    std::uint64_t seed = 0;
};

/// Decodes the persona from the rendered prompt and answers through the
/// crosswalk. Per-agent seeds derive from (seed, agent_id) only.
class MockBackend final : public CompletionBackend {
public:
    MockBackend(const PromptKit& kit, MockCrosswalk crosswalk, MockOptions options);
    Completion complete(const AgentSpec& spec) const override;
    std::string_view name() const override { return "mock"; }

    std::uint64_t agent_seed(std::string_view agent_id) const;

private:
    const PromptKit& kit_;
    MockCrosswalk crosswalk_;
    MockOptions options_;
};

struct AnswerSchema {
    std::vector<std::string> keys;
    int min = 1;
    int max = 9;

    static AnswerSchema for_scale(const ScaleDefinition& scale);
    static AnswerSchema for_scenarios(const std::vector<ScenarioDefinition>& scenarios);
};

struct ParsedAnswers {
    std::map<std::string, int> answers;
    std::string raw_text;
    int attempts = 1;
};

enum class AnswerErrorKind { unparseable, missing_key, unexpected_key, duplicate_key, not_integer, out_of_range };

std::string_view answer_error_name(AnswerErrorKind kind);

struct AnswerError {
    AnswerErrorKind kind = AnswerErrorKind::unparseable;
    std::string key;
    std::string message;
};

class ParseResult {
public:
    ParseResult(ParsedAnswers value) : state_(std::move(value)) {}
    ParseResult(AnswerError error) : state_(std::move(error)) {}

    bool ok() const { return std::holds_alternative<ParsedAnswers>(state_); }
    explicit operator bool() const { return ok(); }
    const ParsedAnswers& value() const { return std::get<ParsedAnswers>(state_); }
    ParsedAnswers& value() { return std::get<ParsedAnswers>(state_); }
    const AnswerError& error() const { return std::get<AnswerError>(state_); }

private:
    std::variant<ParsedAnswers, AnswerError> state_;
};

/// Normalised key: lower-case, trimmed, runs of whitespace, '_' or '-' folded to '_'.
std::string normalize_key(std::string_view key);

/// Total over arbitrary bytes: extracts a JSON object from bare, fenced or
/// prose-wrapped text, unwraps a single enclosing object, and validates the
/// key set and integer range. Never throws.
ParseResult parse_answers(std::string_view raw, const AnswerSchema& schema);

struct TranscriptRecord {
    std::string agent_id;
    std::string timestamp;
    std::string prompt_hash;
    std::string raw_response;
    int attempts = 1;
};

/// Append-only JSON-lines transcript; appends are serialised and flushed.
class TranscriptStore {
public:
    using Clock = std::function<std::string()>;

    explicit TranscriptStore(std::filesystem::path path, Clock clock = {});
    void append(const TranscriptRecord& record);
    const std::filesystem::path& path() const { return path_; }

    static std::vector<TranscriptRecord> read(const std::filesystem::path& path);

private:
    std::filesystem::path path_;
    Clock clock_;
    std::mutex mutex_;
    std::ofstream out_;
};

std::string utc_timestamp();

struct AgentOutcome {
    std::string agent_id;
    std::optional<ParsedAnswers> result;
    std::string error;

    bool ok() const { return result.has_value(); }
};

struct BatchOptions {
    std::size_t concurrency = 4;
    TranscriptStore* transcript = nullptr;
};

/// Runs every spec (plus at most one corrective re-ask on a parse failure)
/// under a bounded worker pool. Outcomes come back in input order; a failing
/// agent is recorded, and only an all-failed batch throws.
std::vector<AgentOutcome> run_batch(const std::vector<AgentSpec>& specs, const CompletionBackend& backend,
                                    const AnswerSchema& schema, const BatchOptions& options = {});

}  // namespace psychoforge

#include "psychoforge/agent.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <thread>

#include <fmt/chrono.h>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "psychoforge/hash.hpp"
#include "psychoforge/rng.hpp"
#include "psychoforge/table.hpp"
#include "http_client.hpp"

namespace psychoforge {

namespace {

using nlohmann::json;

constexpr std::uint64_t kAgentStream = 0x6167656e74ULL;
constexpr std::uint64_t kAdjectiveNoiseStream = 0x61646a6eULL;
constexpr std::uint64_t kScenarioNoiseStream = 0x7363656eULL;

constexpr std::size_t kMaxPayloadBytes = 1 << 20;
constexpr std::size_t kMaxCandidateStarts = 64;
constexpr int kMaxNesting = 32;

std::string getenv_string(std::string_view name) {
    const char* v = std::getenv(std::string(name).c_str());
    return v ? std::string(v) : std::string();
}

int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

}  // namespace

void AgentSpec::validate() const {
    if (prompt.empty()) throw ValidationError(fmt::format("agent '{}': empty prompt", agent_id));
    if (!std::isfinite(temperature) || temperature < 0) {
        throw ValidationError(fmt::format("agent '{}': temperature must be finite and >= 0", agent_id));
    }
    if (max_retries < 0) throw ValidationError(fmt::format("agent '{}': max_retries must be >= 0", agent_id));
}

// ---------------------------------------------------------------- remote

bool remote_credentials_available() { return !getenv_string(kApiKeyEnv).empty(); }

RemoteConfig RemoteConfig::from_environment() {
    RemoteConfig config;
    config.api_key = getenv_string(kApiKeyEnv);
    if (config.api_key.empty()) {
        throw ConfigError(fmt::format("remote backend needs {} in the environment", kApiKeyEnv));
    }
    if (auto base = getenv_string(kApiBaseEnv); !base.empty()) config.api_base = base;
    return config;
}

RemoteChatBackend::RemoteChatBackend(RemoteConfig config) : config_(std::move(config)) {
    if (config_.api_key.empty()) throw ConfigError("remote backend: empty API key");
    if (config_.api_base.find("://") == std::string::npos) {
        throw ConfigError(fmt::format("remote backend: API base '{}' lacks a scheme", config_.api_base));
    }
}

Completion RemoteChatBackend::complete(const AgentSpec& spec) const {
    spec.validate();
    const json payload = {{"model", spec.model_name},
                          {"temperature", spec.temperature},
                          {"messages", json::array({{{"role", "user"}, {"content", spec.prompt}}})}};
    const detail::RetryPolicy policy{spec.max_retries, config_.initial_backoff, config_.backoff_factor, config_.timeout};
    auto res = detail::post_json(config_.api_base, "/chat/completions", config_.api_key, payload, policy,
                                 fmt::format("agent {}", spec.agent_id));
    try {
        return {res.body.at("choices").at(0).at("message").at("content").get<std::string>(), res.attempts};
    } catch (const json::exception& e) {
        throw NetworkError(fmt::format("chat endpoint response lacks message content: {}", e.what()));
    }
}

// ---------------------------------------------------------------- mock

void MockCrosswalk::validate(const ScaleDefinition& bfi2, const ScaleDefinition& questionnaire,
                             const std::vector<ScenarioDefinition>* scenarios) const {
    for (const auto& adj : questionnaire.items()) {
        auto it = adjectives.find(adj.id);
        if (it == adjectives.end() || it->second.empty()) {
            throw ValidationError(fmt::format("crosswalk: no BFI2 items for '{}'", adj.id));
        }
        for (const auto& link : it->second) {
            if (!bfi2.index_of(link.item_id)) {
                throw ValidationError(fmt::format("crosswalk: '{}' maps to unknown item '{}'", adj.id, link.item_id));
            }
            const auto& item = bfi2.item(link.item_id);
            if (item.domain != adj.domain) {
                throw ValidationError(fmt::format("crosswalk: '{}' maps across domains to '{}'", adj.id, link.item_id));
            }
            const int expected = item.keying == adj.keying ? 1 : -1;
            if (link.sign != expected) {
                throw ValidationError(fmt::format("crosswalk: sign of '{}' -> '{}' should be {:+d}", adj.id,
                                                  link.item_id, expected));
            }
        }
    }
    for (const auto& [name, links] : adjectives) {
        if (!questionnaire.index_of(name)) throw ValidationError(fmt::format("crosswalk: unknown adjective '{}'", name));
    }
    for (const auto& [name, w] : scenario_weights) {
        if (!std::all_of(w.begin(), w.end(), [](double x) { return std::isfinite(x); })) {
            throw ValidationError(fmt::format("crosswalk: non-finite weight for scenario '{}'", name));
        }
    }
    if (scenarios) {
        for (const auto& s : *scenarios) {
            if (!scenario_weights.count(s.name)) {
                throw ValidationError(fmt::format("crosswalk: no weights for scenario '{}'", s.name));
            }
        }
    }
}

MockCrosswalk load_mock_crosswalk(const std::filesystem::path& path) {
    auto doc = json::parse(read_text_file(path), nullptr, false);
    if (doc.is_discarded()) throw ParseError(fmt::format("{}: invalid JSON", path.string()));
    MockCrosswalk cw;
    try {
        for (const auto& [adj, links] : doc.at("adjectives").items()) {
            auto& out = cw.adjectives[adj];
            for (const auto& link : links) {
                out.push_back({link.at("item").get<std::string>(), link.at("sign").get<int>()});
            }
        }
        const json weights_node = doc.value("scenario_weights", json::object());
        for (const auto& [name, w] : weights_node.items()) {
            std::array<double, 5> weights{};
            for (Domain d : kDomains) weights[domain_index(d)] = w.at(std::string(1, domain_code(d))).get<double>();
            cw.scenario_weights.emplace(name, weights);
        }
    } catch (const json::exception& e) {
        throw ParseError(fmt::format("{}: {}", path.string(), e.what()));
    }
    return cw;
}

MockCrosswalk null_scenario_crosswalk(MockCrosswalk crosswalk) {
    for (auto& [name, w] : crosswalk.scenario_weights) w.fill(0.0);
    return crosswalk;
}

std::string mock_complete(const PersonaProfile& profile, const MockCrosswalk& crosswalk, const PromptKit& kit,
                          double noise_sd, std::uint64_t seed) {
    validate_responses(profile.bfi2, kit.bfi2);
    const double lo = kit.bfi2.response_min(), hi = kit.bfi2.response_max();
    const int qlo = kit.questionnaire.response_min(), qhi = kit.questionnaire.response_max();
    nlohmann::ordered_json out = nlohmann::ordered_json::object();
    for (const auto& adj : kit.questionnaire.items()) {
        auto it = crosswalk.adjectives.find(adj.id);
        if (it == crosswalk.adjectives.end() || it->second.empty()) {
            throw ValidationError(fmt::format("crosswalk: no BFI2 items for '{}'", adj.id));
        }
        double sum = 0;
        std::string signature;
        for (const auto& link : it->second) {
            const double a = profile.bfi2.answers.at(link.item_id);
            sum += link.sign > 0 ? a : lo + hi - a;
            signature += fmt::format("{}{:+d};", link.item_id, link.sign);
        }
        double x = sum / static_cast<double>(it->second.size());
        if (noise_sd > 0) {
            Rng rng(derive_seed(seed, kAdjectiveNoiseStream, fnv1a64(signature)));
            x += noise_sd * rng.normal();
        }
        const double scaled = qlo + (x - lo) * (qhi - qlo) / (hi - lo);
        out[adj.id] = std::clamp(round_half_up(scaled), qlo, qhi);
    }
    return out.dump();
}

std::string mock_complete_scenarios(const PersonaProfile& profile, const std::vector<std::string>& scenario_names,
                                    const MockCrosswalk& crosswalk, const PromptKit& kit, double noise_sd,
                                    std::uint64_t seed) {
    const auto report = score(profile.bfi2, kit.bfi2);
    const double mid = (kit.bfi2.response_min() + kit.bfi2.response_max()) / 2.0;
    const double half = (kit.bfi2.response_max() - kit.bfi2.response_min()) / 2.0;
    nlohmann::ordered_json out = nlohmann::ordered_json::object();
    for (const auto& name : scenario_names) {
        auto def = std::find_if(kit.scenarios.begin(), kit.scenarios.end(), [&](const auto& s) { return s.name == name; });
        if (def == kit.scenarios.end()) throw ValidationError(fmt::format("unknown scenario '{}'", name));
        auto w = crosswalk.scenario_weights.find(name);
        if (w == crosswalk.scenario_weights.end()) {
            throw ValidationError(fmt::format("crosswalk: no weights for scenario '{}'", name));
        }
        double z = 0, total = 0;
        for (Domain d : kDomains) {
            const double wd = w->second[domain_index(d)];
            z += wd * (report.domain(d) - mid) / half;
            total += std::abs(wd);
        }
        const double rmid = (def->response_min + def->response_max) / 2.0;
        const double rhalf = (def->response_max - def->response_min) / 2.0;
        double propensity = total > 0 ? rmid + rhalf * z / total : rmid;
        if (noise_sd > 0) {
            Rng rng(derive_seed(seed, kScenarioNoiseStream, fnv1a64(name)));
            propensity += noise_sd * rng.normal();
        }
        const int value = std::clamp(round_half_up(propensity), def->response_min, def->response_max);
        // Anchors put the risky / permissive pole at the low end.
        out[name] = def->response_min + def->response_max - value;
    }
    return out.dump();
}

MockBackend::MockBackend(const PromptKit& kit, MockCrosswalk crosswalk, MockOptions options)
    : kit_(kit), crosswalk_(std::move(crosswalk)), options_(options) {
    crosswalk_.validate(kit_.bfi2, kit_.questionnaire);
    if (options_.noise_sd < 0 || options_.scenario_noise_sd < 0) throw ConfigError("mock noise sd must be >= 0");
}

std::uint64_t MockBackend::agent_seed(std::string_view agent_id) const {
    return derive_seed(options_.seed, kAgentStream, fnv1a64(agent_id));
}

Completion MockBackend::complete(const AgentSpec& spec) const {
    spec.validate();
    const auto profile = decode_persona(spec.prompt, kit_, spec.agent_id);
    const auto seed = agent_seed(spec.agent_id);
    if (auto names = scenario_names_in_prompt(spec.prompt); !names.empty()) {
        return {mock_complete_scenarios(profile, names, crosswalk_, kit_, options_.scenario_noise_sd, seed), 1};
    }
    if (spec.prompt.find("### Questionnaire Item ###") == std::string::npos) {
        throw ParseError(fmt::format("agent '{}': prompt asks for neither questionnaire nor scenarios", spec.agent_id));
    }
    return {mock_complete(profile, crosswalk_, kit_, options_.noise_sd, seed), 1};
}

// ---------------------------------------------------------------- parsing

AnswerSchema AnswerSchema::for_scale(const ScaleDefinition& scale) {
    AnswerSchema s;
    for (const auto& it : scale.items()) s.keys.push_back(it.id);
    s.min = scale.response_min();
    s.max = scale.response_max();
    return s;
}

AnswerSchema AnswerSchema::for_scenarios(const std::vector<ScenarioDefinition>& scenarios) {
    if (scenarios.empty()) throw ValidationError("scenario schema needs at least one scenario");
    AnswerSchema s;
    s.min = scenarios.front().response_min;
    s.max = scenarios.front().response_max;
    for (const auto& sc : scenarios) {
        if (sc.response_min != s.min || sc.response_max != s.max) {
            throw ValidationError("scenarios in one schema must share a response range");
        }
        s.keys.push_back(sc.name);
    }
    return s;
}

std::string_view answer_error_name(AnswerErrorKind kind) {
    switch (kind) {
        case AnswerErrorKind::unparseable: return "unparseable";
        case AnswerErrorKind::missing_key: return "missing_key";
        case AnswerErrorKind::unexpected_key: return "unexpected_key";
        case AnswerErrorKind::duplicate_key: return "duplicate_key";
        case AnswerErrorKind::not_integer: return "not_integer";
        case AnswerErrorKind::out_of_range: return "out_of_range";
    }
    return "unknown";
}

std::string normalize_key(std::string_view key) {
    key = trim(key);
    std::string out;
    bool pending_sep = false;
    for (char ch : key) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c) || c == '_' || c == '-') {
            pending_sep = true;
            continue;
        }
        if (pending_sep && !out.empty()) out.push_back('_');
        pending_sep = false;
        out.push_back(static_cast<char>(std::tolower(c)));
    }
    return out;
}

namespace {

int nesting_depth(std::string_view text) {
    int depth = 0, max_depth = 0;
    bool in_string = false, escaped = false;
    for (char c : text) {
        if (in_string) {
            if (escaped) escaped = false;
            else if (c == '\\') escaped = true;
            else if (c == '"') in_string = false;
            continue;
        }
        if (c == '"') in_string = true;
        else if (c == '{' || c == '[') max_depth = std::max(max_depth, ++depth);
        else if (c == '}' || c == ']') --depth;
    }
    return max_depth;
}

/// The brace-balanced object starting at `start`, if it closes.
std::optional<std::string_view> balanced_object(std::string_view text, std::size_t start) {
    int depth = 0;
    bool in_string = false, escaped = false;
    for (std::size_t i = start; i < text.size(); ++i) {
        const char c = text[i];
        if (in_string) {
            if (escaped) escaped = false;
            else if (c == '\\') escaped = true;
            else if (c == '"') in_string = false;
            continue;
        }
        if (c == '"') in_string = true;
        else if (c == '{') ++depth;
        else if (c == '}' && --depth == 0) return text.substr(start, i - start + 1);
    }
    return std::nullopt;
}

std::vector<std::string_view> candidates(std::string_view raw) {
    std::vector<std::string_view> out{trim(raw)};
    for (std::size_t pos = 0; (pos = raw.find("```", pos)) != std::string_view::npos;) {
        auto body_start = raw.find('\n', pos + 3);
        if (body_start == std::string_view::npos) break;
        auto close = raw.find("```", body_start);
        if (close == std::string_view::npos) break;
        out.push_back(trim(raw.substr(body_start + 1, close - body_start - 1)));
        pos = close + 3;
    }
    std::size_t starts = 0;
    for (std::size_t pos = raw.find('{'); pos != std::string_view::npos && starts < kMaxCandidateStarts;
         pos = raw.find('{', pos + 1), ++starts) {
        if (auto obj = balanced_object(raw, pos)) out.push_back(*obj);
    }
    return out;
}

std::optional<long long> as_integer(const json& v) {
    if (v.is_number_integer()) return v.get<long long>();
    if (v.is_number_float()) {
        const double d = v.get<double>();
        if (std::isfinite(d) && std::floor(d) == d && std::abs(d) < 1e15) return static_cast<long long>(d);
        return std::nullopt;
    }
    if (v.is_string()) {
        auto s = trim(v.get_ref<const std::string&>());
        long long n = 0;
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
        if (ec == std::errc() && ptr == s.data() + s.size() && !s.empty()) return n;
    }
    return std::nullopt;
}

ParseResult validate_object(const json& root, const AnswerSchema& schema, std::string_view raw) {
    std::map<std::string, std::string> canonical;
    for (const auto& k : schema.keys) canonical.emplace(normalize_key(k), k);

    const json* obj = &root;
    for (int unwrap = 0; unwrap < 2 && obj->size() == 1; ++unwrap) {
        const auto& [key, value] = *obj->items().begin();
        if (!value.is_object() || canonical.count(normalize_key(key))) break;
        obj = &value;
    }

    ParsedAnswers parsed;
    parsed.raw_text = std::string(raw);
    for (const auto& [key, value] : obj->items()) {
        auto hit = canonical.find(normalize_key(key));
        if (hit == canonical.end()) {
            return AnswerError{AnswerErrorKind::unexpected_key, key, fmt::format("unexpected key '{}'", key)};
        }
        const auto& name = hit->second;
        if (parsed.answers.count(name)) {
            return AnswerError{AnswerErrorKind::duplicate_key, name, fmt::format("key '{}' given more than once", name)};
        }
        auto n = as_integer(value);
        if (!n) {
            return AnswerError{AnswerErrorKind::not_integer, name,
                               fmt::format("value for '{}' is not an integer", name)};
        }
        if (*n < schema.min || *n > schema.max) {
            return AnswerError{AnswerErrorKind::out_of_range, name,
                               fmt::format("value {} for '{}' outside [{}, {}]", *n, name, schema.min, schema.max)};
        }
        parsed.answers.emplace(name, static_cast<int>(*n));
    }
    for (const auto& k : schema.keys) {
        if (!parsed.answers.count(k)) {
            return AnswerError{AnswerErrorKind::missing_key, k, fmt::format("missing key '{}'", k)};
        }
    }
    return parsed;
}

}  // namespace

ParseResult parse_answers(std::string_view raw, const AnswerSchema& schema) {
    try {
        if (raw.size() > kMaxPayloadBytes) {
            return AnswerError{AnswerErrorKind::unparseable, {}, "payload too large"};
        }
        for (auto candidate : candidates(raw)) {
            if (candidate.empty() || candidate.front() != '{' || nesting_depth(candidate) > kMaxNesting) continue;
            auto doc = json::parse(candidate, nullptr, false);
            if (doc.is_discarded() || !doc.is_object()) continue;
            return validate_object(doc, schema, raw);
        }
        return AnswerError{AnswerErrorKind::unparseable, {}, "no JSON object found in response"};
    } catch (const std::exception& e) {
        return AnswerError{AnswerErrorKind::unparseable, {}, fmt::format("unreadable response: {}", e.what())};
    }
}

// ---------------------------------------------------------------- transcripts

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    return fmt::format("{:%Y-%m-%dT%H:%M:%S}.{:03d}Z", fmt::gmtime(std::chrono::system_clock::to_time_t(now)), ms);
}

TranscriptStore::TranscriptStore(std::filesystem::path path, Clock clock)
    : path_(std::move(path)), clock_(clock ? std::move(clock) : Clock(utc_timestamp)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    out_.open(path_, std::ios::app | std::ios::binary);
    if (!out_) throw Error(fmt::format("cannot open transcript '{}'", path_.string()));
}

void TranscriptStore::append(const TranscriptRecord& record) {
    json j = {{"agent_id", record.agent_id},
              {"timestamp", record.timestamp.empty() ? clock_() : record.timestamp},
              {"prompt_hash", record.prompt_hash},
              {"raw_response", record.raw_response},
              {"attempts", record.attempts}};
    const std::string line = j.dump(-1, ' ', false, json::error_handler_t::replace);
    std::lock_guard lock(mutex_);
    out_ << line << '\n';
    out_.flush();
    if (!out_) throw Error(fmt::format("write to transcript '{}' failed", path_.string()));
}

std::vector<TranscriptRecord> TranscriptStore::read(const std::filesystem::path& path) {
    std::vector<TranscriptRecord> out;
    std::istringstream in(read_text_file(path));
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        auto j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw ParseError(fmt::format("{}:{}: invalid transcript line", path.string(), lineno));
        try {
            out.push_back({j.at("agent_id").get<std::string>(), j.at("timestamp").get<std::string>(),
                           j.at("prompt_hash").get<std::string>(), j.at("raw_response").get<std::string>(),
                           j.at("attempts").get<int>()});
        } catch (const json::exception& e) {
            throw ParseError(fmt::format("{}:{}: {}", path.string(), lineno, e.what()));
        }
    }
    return out;
}

// ---------------------------------------------------------------- batch

namespace {

std::string correction_note(const AnswerError& error, const AnswerSchema& schema) {
    return fmt::format(
        "\n\n### Correction ###\nYour previous response could not be used: {}. ONLY return the JSON object with "
        "every requested key and an integer value from {} to {}.",
        error.message, schema.min, schema.max);
}

AgentOutcome run_agent(const AgentSpec& spec, const CompletionBackend& backend, const AnswerSchema& schema,
                       TranscriptStore* transcript) {
    AgentOutcome outcome{spec.agent_id, std::nullopt, {}};
    try {
        spec.validate();
        AgentSpec current = spec;
        int attempts = 0;
        for (int round = 0;; ++round) {
            const Completion completion = backend.complete(current);
            attempts += completion.attempts;
            if (transcript) {
                transcript->append({spec.agent_id, {}, sha256_hex(current.prompt), completion.text, attempts});
            }
            auto parsed = parse_answers(completion.text, schema);
            if (parsed) {
                parsed.value().attempts = attempts;
                outcome.result = std::move(parsed.value());
                return outcome;
            }
            if (round >= 1 || spec.max_retries == 0) {
                outcome.error = fmt::format("{}: {}", answer_error_name(parsed.error().kind), parsed.error().message);
                break;
            }
            current.prompt = spec.prompt + correction_note(parsed.error(), schema);
        }
    } catch (const std::exception& e) {
        outcome.error = e.what();
    }
    spdlog::warn("agent {} failed: {}", spec.agent_id, outcome.error);
    return outcome;
}

}  // namespace

std::vector<AgentOutcome> run_batch(const std::vector<AgentSpec>& specs, const CompletionBackend& backend,
                                    const AnswerSchema& schema, const BatchOptions& options) {
    if (specs.empty()) throw ValidationError("run_batch: no agents");
    std::vector<AgentOutcome> outcomes(specs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < specs.size();) {
            outcomes[i] = run_agent(specs[i], backend, schema, options.transcript);
        }
    };
    const std::size_t n_workers = std::clamp<std::size_t>(options.concurrency, 1, specs.size());
    {
        std::vector<std::jthread> pool;
        pool.reserve(n_workers);
        for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    }
    const auto failures = std::count_if(outcomes.begin(), outcomes.end(), [](const auto& o) { return !o.ok(); });
    if (static_cast<std::size_t>(failures) == outcomes.size()) {
        throw Error(fmt::format("all {} agents failed; first error: {}", outcomes.size(), outcomes.front().error));
    }
    if (failures) spdlog::info("batch finished: {} of {} agents failed", failures, outcomes.size());
    return outcomes;
}

}  // namespace psychoforge

#include "psychoforge/persona.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "psychoforge/table.hpp"

namespace psychoforge {

namespace {

constexpr std::string_view kLikertHeader = "### Your Assigned Personality ###";
constexpr std::string_view kExpandedHeaders[] = {"### Your Personality ###", "### Personality ###"};
constexpr std::string_view kScenarioNamePrefix = "Scenario Name: ";

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

/// Body of the section introduced by `header`, up to the next blank line.
std::optional<std::string_view> section_body(std::string_view prompt, std::string_view header) {
    auto pos = prompt.find(header);
    if (pos == std::string_view::npos) return std::nullopt;
    auto body = prompt.substr(pos + header.size());
    auto end = body.find("\n\n");
    if (end != std::string_view::npos) body = body.substr(0, end);
    return trim(body);
}

}  // namespace

std::string_view format_name(PromptFormat format) {
    return format == PromptFormat::Likert ? "Likert" : "Expanded";
}

std::optional<PromptFormat> parse_format(std::string_view text) {
    std::string lower(text);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == "likert") return PromptFormat::Likert;
    if (lower == "expanded") return PromptFormat::Expanded;
    return std::nullopt;
}

ExpansionTable::ExpansionTable(std::map<std::string, Ladder> entries, const ScaleDefinition& scale) {
    if (scale.response_max() - scale.response_min() + 1 != kExpansionLevels) {
        throw ValidationError(fmt::format("expansion table needs a {}-point scale", kExpansionLevels));
    }
    for (const auto& it : scale.items()) {
        if (!entries.count(it.id)) throw ValidationError(fmt::format("expansion table: no entry for item '{}'", it.id));
    }
    for (auto& [id, ladder] : entries) {
        if (!scale.index_of(id)) throw ValidationError(fmt::format("expansion table: unknown item '{}'", id));
        for (int level = 1; level <= kExpansionLevels; ++level) {
            const auto& s = ladder[static_cast<std::size_t>(level - 1)];
            const std::string where = fmt::format("expansion table: item '{}' level {}", id, level);
            if (trim(s).empty()) throw ValidationError(where + " is empty");
            if (s.rfind("I ", 0) != 0) throw ValidationError(where + " is not first-person");
            if (s.back() != '.' || s.find('.') != s.size() - 1) {
                throw ValidationError(where + " must be one sentence ending in a full stop");
            }
            if (!reverse_.emplace(s, std::make_pair(id, level)).second) {
                throw ValidationError(where + fmt::format(" duplicates another sentence: '{}'", s));
            }
        }
    }
    for (auto& [id, ladder] : entries) entries_.emplace(id, std::move(ladder));
}

const std::string& ExpansionTable::sentence(std::string_view item_id, int level) const {
    auto it = entries_.find(item_id);
    if (it == entries_.end() || level < 1 || level > kExpansionLevels) {
        throw ValidationError(fmt::format("expansion table: no sentence for item '{}' level {}", item_id, level));
    }
    return it->second[static_cast<std::size_t>(level - 1)];
}

std::optional<std::pair<std::string, int>> ExpansionTable::find(std::string_view sentence) const {
    auto it = reverse_.find(sentence);
    if (it == reverse_.end()) return std::nullopt;
    return it->second;
}

ExpansionTable load_expansion_table(const std::filesystem::path& path, const ScaleDefinition& scale) {
    auto doc = nlohmann::json::parse(read_text_file(path), nullptr, false);
    if (doc.is_discarded()) throw ParseError(fmt::format("{}: invalid JSON", path.string()));
    std::map<std::string, ExpansionTable::Ladder> entries;
    try {
        for (const auto& [id, node] : doc.at("items").items()) {
            auto sentences = node.get<std::vector<std::string>>();
            if (sentences.size() != kExpansionLevels) {
                throw ValidationError(fmt::format("{}: item '{}' needs {} sentences", path.string(), id, kExpansionLevels));
            }
            ExpansionTable::Ladder ladder;
            std::copy(sentences.begin(), sentences.end(), ladder.begin());
            entries.emplace(id, std::move(ladder));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(fmt::format("{}: {}", path.string(), e.what()));
    }
    return ExpansionTable(std::move(entries), scale);
}

std::string_view battery_name(Battery battery) { return battery == Battery::risk ? "risk" : "ethics"; }

std::optional<Battery> parse_battery(std::string_view text) {
    if (text == "risk") return Battery::risk;
    if (text == "ethics") return Battery::ethics;
    return std::nullopt;
}

std::vector<ScenarioDefinition> load_scenarios(const std::filesystem::path& path) {
    auto doc = nlohmann::json::parse(read_text_file(path), nullptr, false);
    if (doc.is_discarded()) throw ParseError(fmt::format("{}: invalid JSON", path.string()));
    std::vector<ScenarioDefinition> out;
    try {
        for (const auto& node : doc.at("scenarios")) {
            ScenarioDefinition s;
            s.name = node.at("name").get<std::string>();
            auto battery = parse_battery(node.at("battery").get<std::string>());
            if (!battery) throw ValidationError(fmt::format("scenario '{}': battery must be risk|ethics", s.name));
            s.battery = *battery;
            s.text = node.at("text").get<std::string>();
            s.anchor_low = node.at("anchor_low").get<std::string>();
            s.anchor_high = node.at("anchor_high").get<std::string>();
            s.response_min = node.value("response_min", 1);
            s.response_max = node.value("response_max", 10);
            out.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(fmt::format("{}: {}", path.string(), e.what()));
    }
    std::set<std::string> names;
    for (const auto& s : out) {
        if (!names.insert(s.name).second) throw ValidationError(fmt::format("duplicate scenario '{}'", s.name));
        if (s.name.find_first_of(" \t\n") != std::string::npos) {
            throw ValidationError(fmt::format("scenario name '{}' contains whitespace", s.name));
        }
    }
    for (Battery b : {Battery::risk, Battery::ethics}) {
        auto n = std::count_if(out.begin(), out.end(), [b](const auto& s) { return s.battery == b; });
        if (static_cast<std::size_t>(n) != kScenariosPerBattery) {
            throw ValidationError(
                fmt::format("{} battery has {} scenarios, expected {}", battery_name(b), n, kScenariosPerBattery));
        }
    }
    return out;
}

PromptTemplates load_templates(const std::filesystem::path& dir) {
    auto load = [&](const char* file) {
        std::string text = read_text_file(dir / file);
        while (!text.empty() && (text.back() == '\n' || text.back() == ' ')) text.pop_back();
        return text;
    };
    return {load("persona_likert.txt"), load("persona_expanded.txt"), load("questionnaire.txt"),
            load("scenarios_risk.txt"), load("scenarios_ethics.txt")};
}

std::vector<ScenarioDefinition> PromptKit::battery(Battery b) const {
    std::vector<ScenarioDefinition> out;
    std::copy_if(scenarios.begin(), scenarios.end(), std::back_inserter(out),
                 [b](const auto& s) { return s.battery == b; });
    return out;
}

PromptKit load_prompt_kit(const std::filesystem::path& data_dir) {
    PromptKit kit;
    kit.bfi2 = load_scale(data_dir / "bfi2.json");
    kit.questionnaire = load_scale(data_dir / "mini_markers.json");
    kit.expansions = load_expansion_table(data_dir / "bfi2_expanded.json", kit.bfi2);
    kit.scenarios = load_scenarios(data_dir / "scenarios.json");
    kit.templates = load_templates(data_dir / "templates");
    return kit;
}

std::string fill_template(std::string_view tmpl, const std::vector<std::pair<std::string, std::string>>& values) {
    std::string out(tmpl);
    for (const auto& [key, value] : values) {
        const std::string placeholder = "{{" + key + "}}";
        auto pos = out.find(placeholder);
        if (pos == std::string::npos) throw ValidationError(fmt::format("template has no '{}' placeholder", placeholder));
        while (pos != std::string::npos) {
            out.replace(pos, placeholder.size(), value);
            pos = out.find(placeholder, pos + value.size());
        }
    }
    if (auto open = out.find("{{"); open != std::string::npos && out.find("}}", open) != std::string::npos) {
        throw ValidationError(fmt::format("template placeholder left unfilled near '{}'", out.substr(open, 24)));
    }
    return out;
}

std::string render_persona_section(const PersonaProfile& profile, const PromptKit& kit) {
    validate_responses(profile.bfi2, kit.bfi2);
    std::string out;
    for (const auto& item : kit.bfi2.items()) {
        if (!out.empty()) out.push_back(' ');
        const int answer = profile.bfi2.answers.at(item.id);
        if (profile.format == PromptFormat::Likert) {
            out += fmt::format("{}: {};", item.text, answer);
        } else {
            out += kit.expansions.sentence(item.id, answer - kit.bfi2.response_min() + 1);
        }
    }
    return out;
}

std::string render_questionnaire(const PromptKit& kit) {
    std::string items;
    std::size_t n = 0;
    for (const auto& item : kit.questionnaire.items()) {
        if (n) items.push_back('\n');
        items += fmt::format("{}. {} _", ++n, item.text);
    }
    return fill_template(kit.templates.questionnaire, {{"items", items}});
}

std::string render_persona_prompt(const PersonaProfile& profile, const PromptKit& kit) {
    const auto& tmpl =
        profile.format == PromptFormat::Likert ? kit.templates.persona_likert : kit.templates.persona_expanded;
    return fill_template(tmpl, {{"persona", render_persona_section(profile, kit)},
                                {"questionnaire", render_questionnaire(kit)}});
}

std::string render_scenarios(const PersonaProfile& profile, Battery battery, const PromptKit& kit) {
    PersonaProfile expanded = profile;
    expanded.format = PromptFormat::Expanded;
    std::string blocks;
    std::size_t n = 0;
    for (const auto& s : kit.battery(battery)) {
        if (n) blocks += "\n\n";
        blocks += fmt::format("### Scenario {} ###\n{}{}\n{}", ++n, kScenarioNamePrefix, s.name, s.text);
    }
    const auto& tmpl = battery == Battery::risk ? kit.templates.scenarios_risk : kit.templates.scenarios_ethics;
    return fill_template(tmpl, {{"persona", render_persona_section(expanded, kit)}, {"scenarios", blocks}});
}

PersonaProfile decode_persona(std::string_view prompt, const PromptKit& kit, std::string agent_id) {
    PersonaProfile profile;
    profile.agent_id = std::move(agent_id);
    profile.bfi2.scale_name = kit.bfi2.name();
    auto& answers = profile.bfi2.answers;

    if (auto body = section_body(prompt, kLikertHeader)) {
        profile.format = PromptFormat::Likert;
        // The last line of the section carries the entries; earlier lines are the legend.
        auto line = body->substr(body->rfind('\n') == std::string_view::npos ? 0 : body->rfind('\n') + 1);
        std::map<std::string, std::string, std::less<>> id_by_text;
        for (const auto& it : kit.bfi2.items()) id_by_text.emplace(it.text, it.id);
        while (!line.empty()) {
            auto semi = line.find(';');
            auto entry = trim(line.substr(0, semi));
            line = semi == std::string_view::npos ? std::string_view{} : line.substr(semi + 1);
            if (entry.empty()) continue;
            auto colon = entry.rfind(':');
            if (colon == std::string_view::npos) throw ParseError(fmt::format("persona entry '{}' has no ':'", entry));
            auto text = trim(entry.substr(0, colon));
            auto number = trim(entry.substr(colon + 1));
            auto id = id_by_text.find(text);
            if (id == id_by_text.end()) throw ParseError(fmt::format("persona entry '{}' is not a BFI2 item", text));
            int value = 0;
            auto [ptr, ec] = std::from_chars(number.data(), number.data() + number.size(), value);
            if (ec != std::errc() || ptr != number.data() + number.size()) {
                throw ParseError(fmt::format("persona entry '{}' has no integer answer", entry));
            }
            if (!answers.emplace(id->second, value).second) {
                throw ParseError(fmt::format("persona lists '{}' twice", text));
            }
        }
    } else {
        std::optional<std::string_view> found;
        for (auto header : kExpandedHeaders) {
            if ((found = section_body(prompt, header))) break;
        }
        if (!found) throw ParseError("prompt carries no persona section");
        profile.format = PromptFormat::Expanded;
        auto rest = *found;
        while (!(rest = trim(rest)).empty()) {
            auto stop = rest.find('.');
            if (stop == std::string_view::npos) throw ParseError("persona paragraph ends mid-sentence");
            auto sentence = rest.substr(0, stop + 1);
            rest.remove_prefix(stop + 1);
            auto hit = kit.expansions.find(sentence);
            if (!hit) throw ParseError(fmt::format("unrecognised persona sentence '{}'", sentence));
            const int answer = hit->second + kit.bfi2.response_min() - 1;
            if (!answers.emplace(hit->first, answer).second) {
                throw ParseError(fmt::format("persona describes item '{}' twice", hit->first));
            }
        }
    }
    try {
        validate_responses(profile.bfi2, kit.bfi2);
    } catch (const ValidationError& e) {
        throw ParseError(fmt::format("incomplete persona: {}", e.what()));
    }
    return profile;
}

std::vector<std::string> scenario_names_in_prompt(std::string_view prompt) {
    std::vector<std::string> names;
    std::size_t pos = 0;
    while ((pos = prompt.find(kScenarioNamePrefix, pos)) != std::string_view::npos) {
        pos += kScenarioNamePrefix.size();
        auto end = prompt.find_first_of(" \t\r\n", pos);
        names.emplace_back(prompt.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos));
    }
    return names;
}

}  // namespace psychoforge

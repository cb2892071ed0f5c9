#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "psychoforge/scales.hpp"

namespace psychoforge {

enum class PromptFormat { Likert, Expanded };

std::string_view format_name(PromptFormat format);
std::optional<PromptFormat> parse_format(std::string_view text);

struct PersonaProfile {
    std::string agent_id;
    ResponseVector bfi2;
    PromptFormat format = PromptFormat::Expanded;
};

inline constexpr int kExpansionLevels = 5;

/// Expanded-format response options: one first-person sentence per
/// (item, Likert level). Level n is the sentence a respondent answering n to
/// the Likert item would pick.
class ExpansionTable {
public:
    using Ladder = std::array<std::string, kExpansionLevels>;

    ExpansionTable() = default;
    /// Validates completeness against `scale` and that all sentences are
    /// distinct, non-empty, first-person and free of inner full stops (the
    /// persona decoder splits on them).
    ExpansionTable(std::map<std::string, Ladder> entries, const ScaleDefinition& scale);

    const std::string& sentence(std::string_view item_id, int level) const;
    /// Inverse lookup: sentence -> (item id, level).
    std::optional<std::pair<std::string, int>> find(std::string_view sentence) const;
    std::size_t size() const { return entries_.size() * kExpansionLevels; }

private:
    std::map<std::string, Ladder, std::less<>> entries_;
    std::map<std::string, std::pair<std::string, int>, std::less<>> reverse_;
};

ExpansionTable load_expansion_table(const std::filesystem::path& path, const ScaleDefinition& scale);

enum class Battery { risk, ethics };

std::string_view battery_name(Battery battery);
std::optional<Battery> parse_battery(std::string_view text);

struct ScenarioDefinition {
    std::string name;
    Battery battery = Battery::risk;
    std::string text;
    std::string anchor_low;
    std::string anchor_high;
    int response_min = 1;
    int response_max = 10;
};

inline constexpr std::size_t kScenariosPerBattery = 5;

/// Loads `{scenarios: [...]}`; requires five uniquely named scenarios per battery.
std::vector<ScenarioDefinition> load_scenarios(const std::filesystem::path& path);

struct PromptTemplates {
    std::string persona_likert;
    std::string persona_expanded;
    std::string questionnaire;
    std::string scenarios_risk;
    std::string scenarios_ethics;
};

PromptTemplates load_templates(const std::filesystem::path& dir);

/// Everything needed to render and decode prompts.
struct PromptKit {
    ScaleDefinition bfi2;
    ScaleDefinition questionnaire;
    ExpansionTable expansions;
    std::vector<ScenarioDefinition> scenarios;
    PromptTemplates templates;

    std::vector<ScenarioDefinition> battery(Battery b) const;
};

/// Loads bfi2.json, mini_markers.json, bfi2_expanded.json, scenarios.json and
/// templates/ from a data directory.
PromptKit load_prompt_kit(const std::filesystem::path& data_dir);

/// Replaces every `{{key}}`; throws if a key has no placeholder or a
/// placeholder is left unfilled.
std::string fill_template(std::string_view tmpl, const std::vector<std::pair<std::string, std::string>>& values);

/// The 60 persona entries: "text: n;" items (Likert) or expansion sentences
/// (Expanded), space-separated on one line.
std::string render_persona_section(const PersonaProfile& profile, const PromptKit& kit);
std::string render_persona_prompt(const PersonaProfile& profile, const PromptKit& kit);
std::string render_questionnaire(const PromptKit& kit);
/// Scenario prompts always describe the persona in the Expanded format.
std::string render_scenarios(const PersonaProfile& profile, Battery battery, const PromptKit& kit);

/// Inverse of the persona section of either prompt shape. Throws ParseError
/// when the prompt does not carry a complete BFI2 persona.
PersonaProfile decode_persona(std::string_view prompt, const PromptKit& kit, std::string agent_id = {});

/// Scenario names listed in a rendered scenario prompt, in order.
std::vector<std::string> scenario_names_in_prompt(std::string_view prompt);

}  // namespace psychoforge

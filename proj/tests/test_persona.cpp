#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "psychoforge/persona.hpp"
#include "psychoforge/table.hpp"
#include "test_support.hpp"

using namespace psychoforge;
using psychoforge::support::bfi2;
using psychoforge::support::kit;

namespace {

// Persona shown in the published appendix prompts, BFI2 item order.
constexpr int kAppendixAnswers[60] = {5, 5, 2, 3, 2, 4, 5, 4, 5, 2, 2, 2, 5, 4, 4, 2, 1, 2, 3, 5,
                                      2, 2, 4, 5, 2, 2, 5, 4, 4, 4, 4, 5, 3, 4, 4, 2, 3, 4, 1, 2,
                                      5, 2, 4, 4, 2, 5, 1, 2, 2, 2, 1, 5, 4, 3, 4, 5, 5, 4, 1, 1};

PersonaProfile appendix_profile(PromptFormat format) {
    PersonaProfile p{"appendix", {bfi2().name(), {}}, format};
    for (std::size_t i = 0; i < bfi2().size(); ++i) p.bfi2.answers[bfi2().items()[i].id] = kAppendixAnswers[i];
    return p;
}

std::string golden(const std::string& name) { return read_text_file(support::fixture_dir() / "prompts" / name); }

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) out.push_back(line);
    return out;
}

bool contains(const std::string& hay, const std::string& needle) { return hay.find(needle) != std::string::npos; }

}  // namespace

TEST(PersonaGolden, LikertPromptMatchesFixture) {
    const auto prompt = render_persona_prompt(appendix_profile(PromptFormat::Likert), kit());
    EXPECT_EQ(prompt, golden("likert_appendix_a.txt"));
    EXPECT_TRUE(contains(prompt, "Is outgoing, sociable: 5;"));
}

TEST(PersonaGolden, ExpandedPromptMatchesFixture) {
    const auto prompt = render_persona_prompt(appendix_profile(PromptFormat::Expanded), kit());
    EXPECT_EQ(prompt, golden("expanded_appendix_b.txt"));
    EXPECT_TRUE(contains(prompt, "I am very outgoing, sociable."));
}

TEST(PersonaGolden, RiskPromptMatchesFixture) {
    const auto prompt = render_scenarios(appendix_profile(PromptFormat::Expanded), Battery::risk, kit());
    EXPECT_EQ(prompt, golden("risk_appendix_c.txt"));
    EXPECT_TRUE(contains(prompt, "Scenario Name: Study_Overseas"));
}

TEST(PersonaGolden, EthicsPromptMatchesFixture) {
    const auto prompt = render_scenarios(appendix_profile(PromptFormat::Expanded), Battery::ethics, kit());
    EXPECT_EQ(prompt, golden("ethics_appendix_d.txt"));
    EXPECT_TRUE(contains(prompt, "Exam_Cheating"));
}

TEST(Persona, QuestionnaireListing) {
    const auto q = render_questionnaire(kit());
    const auto lines = lines_of(q);
    EXPECT_NE(std::find(lines.begin(), lines.end(), "1. Bashful _"), lines.end());
    EXPECT_NE(std::find(lines.begin(), lines.end(), "40. Withdrawn _"), lines.end());
    EXPECT_TRUE(contains(q, "9 - Extremely Accurate"));
    EXPECT_TRUE(contains(q, "1 - Extremely Inaccurate"));
}

TEST(Persona, PersonaSectionHasSixtyEntries) {
    const auto likert = render_persona_section(appendix_profile(PromptFormat::Likert), kit());
    EXPECT_EQ(std::count(likert.begin(), likert.end(), ';'), 60);
    const auto expanded = render_persona_section(appendix_profile(PromptFormat::Expanded), kit());
    EXPECT_EQ(std::count(expanded.begin(), expanded.end(), '.'), 60);
}

TEST(Persona, BatteriesHaveFiveBlocks) {
    for (Battery b : {Battery::risk, Battery::ethics}) {
        const auto prompt = render_scenarios(appendix_profile(PromptFormat::Expanded), b, kit());
        EXPECT_EQ(scenario_names_in_prompt(prompt).size(), 5u);
        EXPECT_TRUE(contains(prompt, "choose a value between 1 and 10"));
    }
    EXPECT_EQ(kit().battery(Battery::risk).front().name, "Entrepreneurial_Venture");
}

TEST(Persona, ExpansionTableIsComplete) {
    EXPECT_EQ(kit().expansions.size(), 300u);
    EXPECT_EQ(kit().expansions.sentence("bfi2_01", 5), "I am very outgoing, sociable.");
    const auto hit = kit().expansions.find("I am very outgoing, sociable.");
    ASSERT_TRUE(hit.has_value());
    EXPECT_EQ(hit->first, "bfi2_01");
    EXPECT_EQ(hit->second, 5);
}

TEST(Persona, RenderingIsDeterministic) {
    for (PromptFormat f : {PromptFormat::Likert, PromptFormat::Expanded}) {
        EXPECT_EQ(render_persona_prompt(appendix_profile(f), kit()), render_persona_prompt(appendix_profile(f), kit()));
    }
}

TEST(Persona, SingleItemChangesAlterThePrompt) {
    for (PromptFormat f : {PromptFormat::Likert, PromptFormat::Expanded}) {
        const auto base = appendix_profile(f);
        const auto base_prompt = render_persona_prompt(base, kit());
        for (const auto& item : bfi2().items()) {
            auto other = base;
            int& v = other.bfi2.answers[item.id];
            v = v == 5 ? 4 : v + 1;
            EXPECT_NE(render_persona_prompt(other, kit()), base_prompt) << item.id;
        }
    }
}

TEST(Persona, QuestionnaireSectionLeaksNoAnswers) {
    const auto prompt = render_persona_prompt(appendix_profile(PromptFormat::Likert), kit());
    const auto at = prompt.find("### Questionnaire Item ###");
    ASSERT_NE(at, std::string::npos);
    const auto tail = prompt.substr(at);
    EXPECT_FALSE(contains(tail, ": 5;"));
    EXPECT_FALSE(contains(tail, "sociable"));
}

TEST(Persona, DecodeInvertsRenderInBothFormats) {
    std::mt19937_64 gen(21);
    for (int rep = 0; rep < 25; ++rep) {
        for (PromptFormat f : {PromptFormat::Likert, PromptFormat::Expanded}) {
            PersonaProfile p{"agent-x", support::random_responses(bfi2(), gen), f};
            const auto decoded = decode_persona(render_persona_prompt(p, kit()), kit(), "agent-x");
            EXPECT_EQ(decoded.bfi2.answers, p.bfi2.answers);
            EXPECT_EQ(decoded.format, f);
        }
        PersonaProfile p{"agent-y", support::random_responses(bfi2(), gen), PromptFormat::Expanded};
        EXPECT_EQ(decode_persona(render_scenarios(p, Battery::ethics, kit()), kit()).bfi2.answers, p.bfi2.answers);
    }
}

TEST(Persona, DecodeRejectsForeignText) {
    EXPECT_THROW(decode_persona("hello there", kit()), ParseError);
    auto prompt = render_persona_prompt(appendix_profile(PromptFormat::Expanded), kit());
    prompt.replace(prompt.find("I am very outgoing, sociable."), 29, "I am a teapot.");
    EXPECT_THROW(decode_persona(prompt, kit()), ParseError);
}

TEST(Persona, FillTemplateChecksPlaceholders) {
    EXPECT_EQ(fill_template("a {{x}} b {{x}}", {{"x", "1"}}), "a 1 b 1");
    EXPECT_THROW(fill_template("a {{x}}", {}), Error);
    EXPECT_THROW(fill_template("a", {{"x", "1"}}), Error);
}

TEST(Persona, ExpansionTableRejectsInnerFullStops) {
    std::map<std::string, ExpansionTable::Ladder> entries;
    int n = 0;
    for (const auto& item : bfi2().items()) {
        ExpansionTable::Ladder ladder;
        for (auto& s : ladder) s = "I am sentence " + std::to_string(n++) + ".";
        entries[item.id] = ladder;
    }
    EXPECT_NO_THROW(ExpansionTable(entries, bfi2()));
    entries["bfi2_07"][2] = "I am. Broken.";
    EXPECT_THROW(ExpansionTable(entries, bfi2()), Error);
}

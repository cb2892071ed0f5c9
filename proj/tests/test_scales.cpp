#include <gtest/gtest.h>

#include <random>

#include "psychoforge/scales.hpp"
#include "psychoforge/table.hpp"
#include "test_support.hpp"

using namespace psychoforge;
using psychoforge::support::bfi2;
using psychoforge::support::mini_markers;

TEST(Scales, BundledBanksHaveDocumentedShape) {
    EXPECT_EQ(bfi2().size(), 60u);
    EXPECT_EQ(bfi2().facets().size(), 15u);
    for (Domain d : kDomains) EXPECT_EQ(bfi2().items_in_domain(d).size(), 12u);
    EXPECT_EQ(mini_markers().size(), 40u);
    EXPECT_EQ(mini_markers().response_max(), 9);
    for (Domain d : kDomains) EXPECT_EQ(mini_markers().items_in_domain(d).size(), 8u);
}

TEST(Scales, CanonicalMiniMarkerKeying) {
    for (const char* id : {"Bashful", "Quiet", "Shy", "Withdrawn", "Cold", "Harsh", "Rude", "Unsympathetic", "Careless",
                           "Disorganized", "Inefficient", "Sloppy", "Relaxed", "Unenvious", "Uncreative",
                           "Unintellectual"}) {
        EXPECT_EQ(mini_markers().item(id).keying, Keying::reversed) << id;
    }
    EXPECT_EQ(mini_markers().item("Talkative").keying, Keying::positive);
}

TEST(Scales, DuplicateIdIsNamed) {
    const std::string doc = R"({"name":"Tiny","response_min":1,"response_max":5,"items":[
        {"id":"x1","text":"a","domain":"O","keying":"positive","kind":"statement"},
        {"id":"x1","text":"b","domain":"O","keying":"positive","kind":"statement"}]})";
    try {
        parse_scale(doc);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("x1"), std::string::npos) << e.what();
    }
}

TEST(Scales, DeclaredItemCountMismatchIsRejected) {
    const std::string doc = R"({"name":"Tiny","response_min":1,"response_max":5,"item_count":3,"items":[
        {"id":"x1","text":"a","domain":"O","keying":"positive","kind":"statement"},
        {"id":"x2","text":"b","domain":"O","keying":"positive","kind":"statement"}]})";
    EXPECT_THROW(parse_scale(doc), Error);
}

TEST(Scales, ReverseCodeExamples) {
    EXPECT_EQ(reverse_code(5, bfi2()), 1);
    EXPECT_EQ(reverse_code(3, bfi2()), 3);
    EXPECT_EQ(reverse_code(2, mini_markers()), 8);
    EXPECT_THROW(reverse_code(6, bfi2()), ValidationError);
    EXPECT_THROW(reverse_code(0, mini_markers()), ValidationError);
}

TEST(Scales, ReverseCodeIsAnInvolution) {
    for (const ScaleDefinition* s : {&bfi2(), &mini_markers()}) {
        for (int x = s->response_min(); x <= s->response_max(); ++x) EXPECT_EQ(reverse_code(reverse_code(x, *s), *s), x);
    }
}

TEST(Scales, MidpointVectorScoresMidpoint) {
    const ScoreReport report = score(support::constant_responses(bfi2(), 3), bfi2());
    for (Domain d : kDomains) EXPECT_DOUBLE_EQ(report.domain(d), 3.0);
    ASSERT_TRUE(report.facet_scores.has_value());
    for (const auto& [facet, value] : *report.facet_scores) EXPECT_DOUBLE_EQ(value, 3.0) << facet;

    const ScoreReport mm = score(support::constant_responses(mini_markers(), 5), mini_markers());
    for (Domain d : kDomains) EXPECT_DOUBLE_EQ(mm.domain(d), 5.0);
}

TEST(Scales, KeyedMaximumExtraversion) {
    auto r = support::constant_responses(bfi2(), 3);
    support::set_domain_keyed(r, bfi2(), Domain::E, true);
    const ScoreReport report = score(r, bfi2());
    EXPECT_DOUBLE_EQ(report.domain(Domain::E), 5.0);
    EXPECT_DOUBLE_EQ(report.domain(Domain::O), 3.0);
}

TEST(Scales, ScoreMatchesHandComputation) {
    std::mt19937_64 gen(7);
    for (int rep = 0; rep < 50; ++rep) {
        const auto r = support::random_responses(bfi2(), gen);
        const ScoreReport report = score(r, bfi2());
        for (Domain d : kDomains) {
            double sum = 0.0;
            int count = 0;
            for (const auto& item : bfi2().items()) {
                if (item.domain != d) continue;
                const int a = r.answers.at(item.id);
                sum += item.keying == Keying::reversed ? 6 - a : a;
                ++count;
            }
            EXPECT_NEAR(report.domain(d), sum / count, 1e-15);
            EXPECT_GE(report.domain(d), 1.0);
            EXPECT_LE(report.domain(d), 5.0);
        }
    }
}

TEST(Scales, ScoreIsMonotoneInKeyedDirection) {
    std::mt19937_64 gen(11);
    for (int rep = 0; rep < 20; ++rep) {
        auto r = support::random_responses(bfi2(), gen);
        for (const auto& item : bfi2().items()) {
            const int old = r.answers[item.id];
            if (old == 5) continue;
            const double before = score(r, bfi2()).domain(item.domain);
            r.answers[item.id] = old + 1;
            const double after = score(r, bfi2()).domain(item.domain);
            r.answers[item.id] = old;
            if (item.keying == Keying::positive)
                EXPECT_GE(after, before);
            else
                EXPECT_LE(after, before);
        }
    }
}

TEST(Scales, IncompleteOrOutOfRangeResponsesAreRejected) {
    auto r = support::constant_responses(bfi2(), 3);
    r.answers.erase("bfi2_17");
    try {
        score(r, bfi2());
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("bfi2_17"), std::string::npos);
    }
    r = support::constant_responses(bfi2(), 3);
    r.answers["bfi2_01"] = 7;
    EXPECT_THROW(score(r, bfi2()), ValidationError);
}

TEST(Scales, ResponseMatrixRecodesReversedColumns) {
    auto r = support::constant_responses(bfi2(), 2);
    const Matrix raw = response_matrix({r}, bfi2(), false);
    const Matrix rec = response_matrix({r}, bfi2(), true);
    for (std::size_t j = 0; j < bfi2().size(); ++j) {
        EXPECT_EQ(raw(0, j), 2.0);
        EXPECT_EQ(rec(0, j), bfi2().items()[j].keying == Keying::reversed ? 4.0 : 2.0);
    }
}

TEST(Scales, ResponseTableRoundTrip) {
    support::TempDir dir("scales");
    std::mt19937_64 gen(3);
    ResponseTable table;
    for (int i = 0; i < 5; ++i) {
        table.agent_ids.push_back(default_agent_id(i));
        table.responses.push_back(support::random_responses(bfi2(), gen));
    }
    write_response_table(dir / "r.csv", table, bfi2());
    const ResponseTable back = read_response_table(dir / "r.csv", bfi2());
    EXPECT_EQ(back.agent_ids, table.agent_ids);
    ASSERT_EQ(back.responses.size(), 5u);
    for (int i = 0; i < 5; ++i) EXPECT_EQ(back.responses[i].answers, table.responses[i].answers);
}

TEST(Scales, ResponseTableWithoutAgentColumnIsNumbered) {
    support::TempDir dir("scales");
    std::string text;
    for (std::size_t j = 0; j < bfi2().size(); ++j) text += (j ? "," : "") + bfi2().items()[j].id;
    text += "\n";
    for (int row = 0; row < 2; ++row) {
        for (std::size_t j = 0; j < bfi2().size(); ++j) text += (j ? ",4" : "4");
        text += "\n";
    }
    write_text_file(dir / "plain.csv", text);
    const ResponseTable t = read_response_table(dir / "plain.csv", bfi2());
    ASSERT_EQ(t.agent_ids.size(), 2u);
    EXPECT_EQ(t.agent_ids[0], default_agent_id(0));
    EXPECT_NE(t.agent_ids[0], t.agent_ids[1]);
}

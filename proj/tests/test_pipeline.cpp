#include <gtest/gtest.h>

#include <cstdlib>

#include <nlohmann/json.hpp>

#include "psychoforge/hash.hpp"
#include "psychoforge/pipeline.hpp"
#include "psychoforge/table.hpp"
#include "test_support.hpp"

using namespace psychoforge;
namespace fs = std::filesystem;

namespace {

RunConfig base_config(const fs::path& out, Study study) {
    RunConfig c;
    c.study = study;
    c.data_dir = support::data_dir();
    c.out_dir = out;
    c.offline = true;
    return c;
}

std::map<std::string, std::string> output_hashes(const fs::path& dir) {
    const auto manifest = nlohmann::json::parse(read_text_file(dir / kManifestFile));
    return manifest.at("outputs").get<std::map<std::string, std::string>>();
}

bool is_transcript(const std::string& rel) { return rel.rfind("transcripts/", 0) == 0; }

}  // namespace

TEST(Config, ParseOverridesAndRejectsUnknownKeys) {
    const auto c = parse_run_config(R"({"_comment": "x", "study": "study4", "n_agents": 276, "format": "Likert",
                                        "seed": 7, "noise_sd": 0.5, "perplexity": 12, "offline": true})");
    EXPECT_EQ(c.study, Study::study4);
    EXPECT_EQ(c.n_agents, 276);
    EXPECT_EQ(c.format, FormatChoice::Likert);
    EXPECT_EQ(c.seed, 7u);
    EXPECT_DOUBLE_EQ(c.noise_sd, 0.5);
    EXPECT_EQ(c.perplexity, 12.0);
    EXPECT_TRUE(c.offline);
    EXPECT_THROW(parse_run_config(R"({"n_agent": 3})"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"study": "study9"})"), ConfigError);

    RunConfig base;
    base.seed = 99;
    EXPECT_EQ(parse_run_config("{}", base).seed, 99u);

    const auto round = parse_run_config(run_config_to_json(c).dump());
    EXPECT_EQ(run_config_to_json(round), run_config_to_json(c));
}

TEST(Config, Validation) {
    RunConfig c;
    c.n_agents = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = RunConfig{};
    c.study = Study::study2;
    EXPECT_THROW(c.validate(), ConfigError);

    const char* saved = std::getenv(std::string(kApiKeyEnv).c_str());
    const std::string keep = saved ? saved : "";
    ::unsetenv(std::string(kApiKeyEnv).c_str());
    c = RunConfig{};
    c.backend = BackendKind::remote;
    EXPECT_THROW(c.validate(), ConfigError);
    c = RunConfig{};
    c.study = Study::study1;
    c.embedder = EmbedderKind::remote;
    c.embedding_model = "text-embedding-3-large";
    c.offline = false;
    EXPECT_THROW(c.validate(), ConfigError);
    if (saved) ::setenv(std::string(kApiKeyEnv).c_str(), keep.c_str(), 1);
}

TEST(Study23, SmallRunWritesTablesAndManifest) {
    support::TempDir dir("s23");
    auto cfg = base_config(dir.path(), Study::study3);
    cfg.n_agents = 80;
    const auto r = cmd_study23(cfg);
    ASSERT_EQ(r.formats.size(), 2u);
    for (const auto& [f, res] : r.formats) {
        EXPECT_EQ(res.agent_ids.size(), 80u);
        EXPECT_EQ(res.failures, 0u);
        for (Domain d : kDomains) EXPECT_GE(res.convergent.domain(d), 0.95);
        const auto& n = res.cfa.at(Domain::N);
        EXPECT_FALSE(n.initial.converged);
        ASSERT_TRUE(n.initial.collinear_pair.has_value());
        EXPECT_EQ(n.dropped, std::vector<std::string>{"Jealous"});
        ASSERT_TRUE(n.refit.has_value());
        EXPECT_TRUE(n.refit->converged) << n.refit->diagnosis;
    }
    const auto outputs = output_hashes(dir.path());
    for (const char* f : {"personas.csv", "convergent.csv", "cfa_loadings.csv", "cfa_status.csv", "alpha.csv",
                          "failures.csv", "mini_markers_Likert.csv", "mini_markers_Expanded.csv",
                          "transcripts/Likert.jsonl", "transcripts/Expanded.jsonl"}) {
        ASSERT_TRUE(outputs.contains(f)) << f;
        EXPECT_EQ(outputs.at(f), sha256_file(dir / f)) << f;
    }
    EXPECT_EQ(read_table(dir / "mini_markers_Likert.csv").rows.size(), 80u);
}

TEST(Study23, RerunIsByteIdentical) {
    support::TempDir a("s23a"), b("s23b");
    auto cfg = base_config(a.path(), Study::study3);
    cfg.n_agents = 40;
    cfg.noise_sd = 1.0;
    cmd_study23(cfg);
    cfg.out_dir = b.path();
    cfg.concurrency = 1;
    cmd_study23(cfg);
    const auto ha = output_hashes(a.path());
    const auto hb = output_hashes(b.path());
    ASSERT_EQ(ha.size(), hb.size());
    for (const auto& [rel, h] : ha) {
        if (!is_transcript(rel)) EXPECT_EQ(h, hb.at(rel)) << rel;
    }
}

TEST(Study23, InputMatrixDrivesAgentCount) {
    support::TempDir dir("s2");
    {
        auto sim = base_config(dir / "sim", Study::study3);
        sim.n_agents = 438;
        sim.seed = 5;
        cmd_simulate(sim);
    }
    auto cfg = base_config(dir / "run", Study::study2);
    cfg.input = dir / "sim" / "personas.csv";
    cfg.format = FormatChoice::Likert;
    cfg.n_agents = 3;  // ignored: the matrix decides
    const auto r = cmd_study23(cfg);
    EXPECT_EQ(r.n_agents, 438u);
    EXPECT_EQ(r.formats.at(PromptFormat::Likert).agent_ids.size(), 438u);
}

TEST(Study4, ResponseTableShapeAndSigns) {
    support::TempDir dir("s4");
    auto cfg = base_config(dir.path(), Study::study4);
    cfg.n_agents = 276;
    const auto r = cmd_study4(cfg);
    const auto table = read_table(dir / "scenario_responses.csv");
    EXPECT_EQ(table.rows.size(), 276u);
    EXPECT_EQ(table.header.size(), 11u);  // agent_id + 10 scenarios
    const auto& risk = r.batteries.at("risk");
    EXPECT_GT(risk.coefficients.at("O"), 0.0);
    EXPECT_GT(risk.coefficients.at("E"), 0.0);
    EXPECT_LT(risk.coefficients.at("N"), 0.0);
    EXPECT_TRUE(fs::exists(dir / "regression.csv"));
}

TEST(Report, TamperDetectionAndDeterminism) {
    support::TempDir dir("rep");
    auto cfg = base_config(dir / "study23", Study::study3);
    cfg.n_agents = 30;
    cmd_study23(cfg);
    auto c4 = base_config(dir / "study4", Study::study4);
    c4.n_agents = 30;
    cmd_study4(c4);

    const auto first = cmd_report(dir.path());
    const auto second = cmd_report(dir.path());
    EXPECT_EQ(first, second);
    EXPECT_EQ(read_text_file(dir / "report.md"), second);
    EXPECT_NE(first.find("not an assertion target"), std::string::npos);
    EXPECT_NE(first.find("onvergent"), std::string::npos);
    EXPECT_NE(first.find("egression"), std::string::npos);

    auto text = read_text_file(dir / "study23" / "convergent.csv");
    text[text.size() / 2] = text[text.size() / 2] == '1' ? '2' : '1';
    write_text_file(dir / "study23" / "convergent.csv", text);
    EXPECT_THROW(cmd_report(dir.path()), ValidationError);

    fs::remove(dir / "study23" / "convergent.csv");
    EXPECT_THROW(cmd_report(dir.path()), ValidationError);
    EXPECT_THROW(cmd_report(dir / "nothing-here"), ValidationError);
}

TEST(Study1, OfflineRunIsByteIdentical) {
    support::TempDir a("s1a"), b("s1b");
    auto cfg = base_config(a.path(), Study::study1);
    const auto r = cmd_study1(cfg);
    cfg.out_dir = b.path();
    cmd_study1(cfg);
    for (const char* f : {"similarity.csv", "tsne.csv", "tsne_summary.csv"}) {
        EXPECT_EQ(read_text_file(a / f), read_text_file(b / f)) << f;
    }
    ASSERT_EQ(r.panels.size(), 6u);
    for (const auto& p : r.panels) {
        EXPECT_TRUE(p.values.isApprox(p.values.transpose()));
        EXPECT_TRUE(p.values.diagonal().isOnes());
    }
    EXPECT_EQ(static_cast<std::size_t>(r.tsne.points.rows()), r.point_tests.size());
}

TEST(Study1, OfflineMissIsAConfigError) {
    support::TempDir dir("s1m");
    write_text_file(dir / "empty.jsonl", "");
    auto cfg = base_config(dir / "out", Study::study1);
    cfg.embedding_cache = dir / "empty.jsonl";
    EXPECT_THROW(cmd_study1(cfg), ConfigError);
}

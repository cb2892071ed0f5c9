#include "test_support.hpp"  // Eigen before httplib, see http_client.cpp

#include <gtest/gtest.h>
#include <httplib.h>

#include <atomic>
#include <cmath>
#include <random>
#include <thread>

#include <nlohmann/json.hpp>

#include "psychoforge/semantic.hpp"
#include "psychoforge/table.hpp"

using namespace psychoforge;

namespace {

class CountingEmbedder final : public Embedder {
public:
    std::vector<std::vector<double>> embed(const std::vector<std::string>& texts, const std::string&) const override {
        ++requests;
        fetched += texts.size();
        std::vector<std::vector<double>> out;
        for (const auto& t : texts) out.push_back(inner.embed_one(t));
        return out;
    }
    LocalHashEmbedder inner;
    mutable std::atomic<int> requests{0};
    mutable std::atomic<std::size_t> fetched{0};
};

Matrix clusters(int k, int per, int dims, double spread, double separation, std::uint64_t seed,
                std::vector<std::string>& labels) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> z(0.0, 1.0);
    Matrix centers(k, dims);
    for (int c = 0; c < k; ++c)
        for (int d = 0; d < dims; ++d) centers(c, d) = separation * z(gen);
    Matrix x(k * per, dims);
    labels.clear();
    for (int c = 0; c < k; ++c) {
        for (int i = 0; i < per; ++i) {
            for (int d = 0; d < dims; ++d) x(c * per + i, d) = centers(c, d) + spread * z(gen);
            labels.push_back("c" + std::to_string(c));
        }
    }
    return x;
}

EmbeddedItem item(const std::string& test, Domain d, std::vector<double> v) {
    return {test, test + std::to_string(v.size()), d, std::move(v)};
}

}  // namespace

TEST(Cosine, Examples) {
    EXPECT_NEAR(cosine(std::vector<double>{1, 2, 2}, std::vector<double>{2, 1, 2}), 8.0 / 9.0, 1e-15);
    EXPECT_NEAR(cosine(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 0.0, 1e-15);
    EXPECT_NEAR(cosine(std::vector<double>{3, 4}, std::vector<double>{3, 4}), 1.0, 1e-15);
    EXPECT_THROW(cosine(std::vector<double>{0, 0}, std::vector<double>{1, 0}), ValidationError);
    EXPECT_THROW(cosine(std::vector<double>{1}, std::vector<double>{1, 0}), ValidationError);
}

TEST(Cosine, SymmetricBoundedScaleInvariant) {
    std::mt19937_64 gen(1);
    std::normal_distribution<double> z;
    for (int rep = 0; rep < 100; ++rep) {
        Vector u(7), v(7);
        for (int i = 0; i < 7; ++i) {
            u[i] = z(gen);
            v[i] = z(gen);
        }
        const double c = cosine(u, v);
        EXPECT_DOUBLE_EQ(c, cosine(v, u));
        EXPECT_LE(std::abs(c), 1.0);
        EXPECT_NEAR(cosine(Vector(3.7 * u), v), c, 1e-12);
    }
}

TEST(LocalEmbedder, UnitNormDeterministicAndDiscriminating) {
    const LocalHashEmbedder e;
    const auto a = e.embed_one("Is outgoing, sociable");
    EXPECT_EQ(a.size(), LocalHashEmbedder::kDimensions);
    double n = 0.0;
    for (double x : a) n += x * x;
    EXPECT_NEAR(n, 1.0, 1e-12);
    EXPECT_EQ(a, e.embed_one("Is outgoing, sociable"));
    EXPECT_GT(cosine(a, e.embed_one("Is sociable and outgoing")), cosine(a, e.embed_one("Worries a lot")));
    EXPECT_THROW(e.embed({"x"}, "text-embedding-3-large"), ConfigError);
}

TEST(EmbedCache, SecondCallMakesNoRequests) {
    support::TempDir dir("emb");
    EmbeddingCache cache(dir / "c.jsonl");
    CountingEmbedder fetcher;
    const std::vector<std::string> texts = {"Is talkative", "Worries a lot", "Is talkative", "Is original"};
    EmbedStats s1, s2;
    const auto first = embed_texts(texts, std::string(LocalHashEmbedder::kModelName), cache, &fetcher, false, &s1, 2);
    EXPECT_EQ(s1.fetched, 3u);
    EXPECT_EQ(fetcher.requests.load(), 2);
    const auto second = embed_texts(texts, std::string(LocalHashEmbedder::kModelName), cache, &fetcher, false, &s2);
    EXPECT_EQ(s2.remote_requests, 0u);
    EXPECT_EQ(s2.cache_hits, 4u);
    EXPECT_EQ(fetcher.requests.load(), 2);
    ASSERT_EQ(first.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(first[i].text, texts[i]);
        EXPECT_EQ(first[i].vector, second[i].vector);
        EXPECT_EQ(first[i].content_hash, embedding_hash(texts[i], LocalHashEmbedder::kModelName));
    }

    EmbeddingCache reloaded(dir / "c.jsonl");
    EXPECT_EQ(reloaded.size(), 3u);
    EXPECT_NO_THROW(embed_texts(texts, std::string(LocalHashEmbedder::kModelName), reloaded, nullptr, true));
}

TEST(EmbedCache, OfflineMissNamesTheText) {
    EmbeddingCache cache;
    try {
        embed_texts({"Is a deep thinker"}, "m", cache, nullptr, true);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("Is a deep thinker"), std::string::npos);
    }
}

TEST(EmbedCache, TornTailToleratedCorruptionRejected) {
    support::TempDir dir("emb");
    {
        EmbeddingCache cache(dir / "c.jsonl");
        const LocalHashEmbedder local;
        embed_texts({"a b c", "d e f"}, std::string(LocalHashEmbedder::kModelName), cache, &local, false);
    }
    auto text = read_text_file(dir / "c.jsonl");
    write_text_file(dir / "torn.jsonl", text + "{\"hash\": \"abc");
    EXPECT_EQ(EmbeddingCache(dir / "torn.jsonl").size(), 2u);

    const auto at = text.find("a b c");
    text.replace(at, 5, "x y z");
    write_text_file(dir / "bad.jsonl", text);
    EXPECT_THROW(EmbeddingCache(dir / "bad.jsonl"), ParseError);
}

TEST(EmbedCache, FixtureCacheCoversTheCorpus) {
    EmbeddingCache cache(support::data_dir() / "embeddings" / "fixture_cache.jsonl");
    std::vector<std::string> texts;
    for (const auto* s : {&support::bfi2(), &support::mini_markers()})
        for (const auto& it : s->items()) texts.push_back(it.text);
    ASSERT_EQ(texts.size(), 100u);
    const auto recs = embed_texts(texts, std::string(LocalHashEmbedder::kModelName), cache, nullptr, true);
    ASSERT_EQ(recs.size(), 100u);
    const LocalHashEmbedder e;
    for (const auto& r : recs) {
        EXPECT_EQ(r.vector.size(), recs.front().vector.size());
        EXPECT_EQ(r.vector, e.embed_one(r.text)) << r.text;
    }
}

TEST(EmbedRemote, StubEndpoint) {
    httplib::Server server;
    std::atomic<int> hits{0};
    server.Post("/v1/embeddings", [&](const httplib::Request& req, httplib::Response& res) {
        ++hits;
        const auto body = nlohmann::json::parse(req.body);
        nlohmann::json data = nlohmann::json::array();
        const auto& input = body.at("input");
        for (std::size_t i = input.size(); i-- > 0;) {  // reversed on purpose; index decides placement
            data.push_back({{"index", i}, {"embedding", {static_cast<double>(input[i].get<std::string>().size()), 1.0}}});
        }
        res.set_content(nlohmann::json{{"data", data}}.dump(), "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread worker([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    const RemoteEmbedder remote("http://127.0.0.1:" + std::to_string(port) + "/v1", "k", 0);
    EmbeddingCache cache;
    EmbedStats stats;
    const auto recs = embed_texts({"a", "bbb", "cc"}, "text-embedding-3-large", cache, &remote, false, &stats);
    EXPECT_EQ(recs[1].vector, (std::vector<double>{3.0, 1.0}));
    EXPECT_EQ(recs[2].vector, (std::vector<double>{2.0, 1.0}));
    EXPECT_EQ(stats.remote_requests, 1u);
    EXPECT_EQ(hits.load(), 1);
    server.stop();
    worker.join();
}

TEST(DomainSimilarity, DegenerateCases) {
    const std::vector<EmbeddedItem> a = {item("A", Domain::E, {1, 2, 2})};
    const std::vector<EmbeddedItem> b = {item("B", Domain::E, {2, 1, 2})};
    EXPECT_NEAR(domain_similarity(a, b, Domain::E), 8.0 / 9.0, 1e-15);
    EXPECT_NEAR(domain_similarity(a, b, Domain::E, Aggregation::centroid), 8.0 / 9.0, 1e-15);
    const std::vector<EmbeddedItem> same = {item("A", Domain::E, {1, 1, 0}), item("A", Domain::E, {1, 1, 0})};
    EXPECT_NEAR(domain_similarity(same, same, Domain::E), 1.0, 1e-15);
    EXPECT_THROW(domain_similarity(a, b, Domain::O), ValidationError);
}

TEST(DomainSimilarity, PairwiseMeanOracle) {
    std::mt19937_64 gen(4);
    std::normal_distribution<double> z;
    std::vector<EmbeddedItem> a, b;
    for (int i = 0; i < 5; ++i) {
        for (Domain d : kDomains) {
            a.push_back(item("A", d, {z(gen), z(gen), z(gen), z(gen)}));
            if (i < 3) b.push_back(item("B", d, {z(gen), z(gen), z(gen), z(gen)}));
        }
    }
    double overall = 0.0;
    for (Domain d : kDomains) {
        double s = 0.0;
        int n = 0;
        for (const auto& x : a)
            for (const auto& y : b)
                if (x.domain == d && y.domain == d) {
                    s += cosine(x.vector, y.vector);
                    ++n;
                }
        EXPECT_NEAR(domain_similarity(a, b, d), s / n, 1e-14);
        overall += s / n / 5.0;
    }
    EXPECT_NEAR(overall_similarity(a, b), overall, 1e-14);

    const auto panels = similarity_panels({"A", "B"}, {{"A", a}, {"B", b}});
    ASSERT_EQ(panels.size(), 6u);
    EXPECT_EQ(panels[0].title, "Overall");
    for (const auto& p : panels) {
        EXPECT_TRUE(p.values.isApprox(p.values.transpose()));
        EXPECT_TRUE(p.values.diagonal().isOnes());
    }
    EXPECT_NEAR(panels[0].values(0, 1), overall, 1e-14);
    EXPECT_NEAR(panels[0].row_means()[0], overall, 1e-14);
}

TEST(Perplexity, EquidistantPointsShareSigma) {
    const int n = 12;
    Matrix d2 = Matrix::Constant(n, n, 2.0);
    d2.diagonal().setZero();
    const auto aff = conditional_affinities(d2, 3.0);
    for (int i = 1; i < n; ++i) {
        EXPECT_NEAR(aff.betas[static_cast<std::size_t>(i)], aff.betas[0], 1e-6 * aff.betas[0]);
    }
    for (int i = 0; i < n; ++i) {
        EXPECT_NEAR(aff.p.row(i).sum(), 1.0, 1e-12);
        EXPECT_EQ(aff.p(i, i), 0.0);
    }
}

TEST(Perplexity, SearchHitsTarget) {
    std::vector<std::string> labels;
    const Matrix x = clusters(5, 20, 50, 1.0, 3.0, 7, labels);
    Matrix d2(x.rows(), x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = 0; j < x.rows(); ++j) d2(i, j) = (x.row(i) - x.row(j)).squaredNorm();
    for (double perp : {5.0, 15.0, 30.0}) {
        const auto aff = conditional_affinities(d2, perp);
        for (double achieved : aff.perplexity) EXPECT_NEAR(achieved, perp, 1e-4);
    }
}

TEST(Tsne, TwoClustersSeparate) {
    std::vector<std::string> labels;
    const Matrix x = clusters(2, 10, 10, 0.5, 5.0, 3, labels);
    TsneConfig cfg;
    cfg.seed = 1;
    cfg.perplexity = 5.0;
    const auto r = tsne_fit(x, cfg, labels);
    EXPECT_GT(silhouette(r.points, labels), 0.5);
    EXPECT_TRUE(r.points.allFinite());
    for (double kl : r.kl_trace) EXPECT_GE(kl, 0.0);
    EXPECT_EQ(r.kl_trace.size(), 1000u);
    EXPECT_EQ(r.exaggeration_end, 250);
}

TEST(Tsne, DeterministicUnderSeed) {
    std::vector<std::string> labels;
    const Matrix x = clusters(3, 8, 6, 1.0, 3.0, 4, labels);
    TsneConfig cfg;
    cfg.seed = 9;
    cfg.iterations = 300;
    const auto a = tsne_fit(x, cfg, labels);
    const auto b = tsne_fit(x, cfg, labels);
    EXPECT_EQ(a.points, b.points);
    EXPECT_EQ(a.kl_trace, b.kl_trace);
    cfg.seed = 10;
    EXPECT_NE(tsne_fit(x, cfg, labels).points, a.points);
}

TEST(Tsne, FeasibilityChecks) {
    std::vector<std::string> labels;
    const Matrix x = clusters(2, 5, 4, 1.0, 3.0, 5, labels);
    EXPECT_DOUBLE_EQ(default_perplexity(10), 3.0);
    EXPECT_DOUBLE_EQ(default_perplexity(1000), 30.0);
    TsneConfig cfg;
    cfg.perplexity = 3.5;
    EXPECT_THROW(tsne_fit(x, cfg), ValidationError);
    cfg.perplexity = std::nullopt;
    cfg.iterations = 50;
    EXPECT_NO_THROW(tsne_fit(x, cfg));
    EXPECT_THROW(tsne_fit(x.topRows(3), cfg), ValidationError);
}

TEST(Silhouette, Baselines) {
    Matrix p(6, 2);
    p << 0, 0, 0.1, 0, 0, 0.1, 100, 100, 100.1, 100, 100, 100.1;
    EXPECT_GT(silhouette(p, {"a", "a", "a", "b", "b", "b"}), 0.9);

    std::vector<std::string> labels;
    const Matrix x = clusters(5, 20, 2, 1.0, 4.0, 6, labels);
    std::mt19937_64 gen(12);
    std::shuffle(labels.begin(), labels.end(), gen);
    EXPECT_LT(std::abs(silhouette(x, labels)), 0.2);

    EXPECT_THROW(silhouette(p.topRows(2), {"a", "b"}), ValidationError);
    EXPECT_THROW(silhouette(p, {"a", "a", "a", "a", "a", "a"}), ValidationError);
}

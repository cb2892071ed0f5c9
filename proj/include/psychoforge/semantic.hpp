#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "psychoforge/scales.hpp"

namespace psychoforge {

inline constexpr std::string_view kDefaultEmbeddingModel = "text-embedding-3-large";

struct EmbeddingRecord {
    std::string text;
    std::string model_name;
    std::vector<double> vector;
    std::string content_hash;
};

/// sha256 of model_name + '\n' + text.
std::string embedding_hash(std::string_view text, std::string_view model_name);

/// Content-hash keyed records in one JSON-lines file. Loading tolerates a
/// torn final line; inserts append and flush under a lock.
class EmbeddingCache {
public:
    EmbeddingCache() = default;  // memory only
    explicit EmbeddingCache(std::filesystem::path path);

    std::optional<EmbeddingRecord> find(std::string_view hash) const;
    void insert(const EmbeddingRecord& record);
    std::size_t size() const;
    const std::optional<std::filesystem::path>& path() const { return path_; }

private:
    std::optional<std::filesystem::path> path_;
    mutable std::mutex mutex_;
    std::unordered_map<std::string, EmbeddingRecord> records_;
};

class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::vector<std::vector<double>> embed(const std::vector<std::string>& texts,
                                                   const std::string& model_name) const = 0;
};

/// Deterministic, dependency-free embedder: signed feature hashing of word
/// unigrams and character trigrams, L2-normalised. Its vectors stand in for
/// a hosted model in offline fixtures and tests.
class LocalHashEmbedder final : public Embedder {
public:
    static constexpr std::string_view kModelName = "local-hash-ngram-256";
    static constexpr std::size_t kDimensions = 256;

    std::vector<std::vector<double>> embed(const std::vector<std::string>& texts,
                                           const std::string& model_name) const override;
    std::vector<double> embed_one(std::string_view text) const;
};

/// OpenAI-compatible `POST {base}/embeddings`; credentials from the
/// environment like the chat backend.
class RemoteEmbedder final : public Embedder {
public:
    RemoteEmbedder(std::string api_base, std::string api_key, int max_retries = 3);
    static RemoteEmbedder from_environment();

    std::vector<std::vector<double>> embed(const std::vector<std::string>& texts,
                                           const std::string& model_name) const override;

private:
    std::string api_base_;
    std::string api_key_;
    int max_retries_;
};

struct EmbedStats {
    std::size_t cache_hits = 0;
    std::size_t fetched = 0;
    std::size_t remote_requests = 0;
};

/// Cache-first embedding. Misses are fetched in batches through `fetcher`
/// and persisted; offline mode turns a miss into a ConfigError naming the
/// text. Output order matches input order.
std::vector<EmbeddingRecord> embed_texts(const std::vector<std::string>& texts, const std::string& model_name,
                                         EmbeddingCache& cache, const Embedder* fetcher, bool offline,
                                         EmbedStats* stats = nullptr, std::size_t batch_size = 64);

double cosine(const std::vector<double>& u, const std::vector<double>& v);
double cosine(const Vector& u, const Vector& v);

struct EmbeddedItem {
    std::string test;
    std::string item_id;
    Domain domain = Domain::O;
    std::vector<double> vector;
};

enum class Aggregation { pairwise_mean, centroid };

std::string_view aggregation_name(Aggregation a);
std::optional<Aggregation> parse_aggregation(std::string_view text);

/// Mean cosine over all cross-test item pairs within `domain` (or cosine of
/// the two domain centroids).
double domain_similarity(const std::vector<EmbeddedItem>& a, const std::vector<EmbeddedItem>& b, Domain domain,
                         Aggregation aggregation = Aggregation::pairwise_mean);
/// Mean of the five domain similarities.
double overall_similarity(const std::vector<EmbeddedItem>& a, const std::vector<EmbeddedItem>& b,
                          Aggregation aggregation = Aggregation::pairwise_mean);

struct SimilarityPanel {
    std::string title;  // "Overall" or a domain name
    std::vector<std::string> tests;
    Matrix values;      // symmetric, unit diagonal by convention

    /// Mean off-diagonal similarity of each test.
    std::vector<double> row_means() const;
};

/// Six panels: overall average then one per domain, tests in the given order.
std::vector<SimilarityPanel> similarity_panels(const std::vector<std::string>& tests,
                                               const std::map<std::string, std::vector<EmbeddedItem>>& items,
                                               Aggregation aggregation = Aggregation::pairwise_mean);

struct TsneConfig {
    std::optional<double> perplexity;  // default min(30, (n-1)/3)
    double learning_rate = 200.0;
    int iterations = 1000;
    double momentum_initial = 0.5;
    double momentum_final = 0.8;
    int momentum_switch = 250;
    double early_exaggeration = 12.0;
    std::uint64_t seed = 0;
};

struct TsneResult {
    Matrix points;  // n x 2
    std::vector<double> kl_trace;
    std::vector<std::string> labels;
    std::vector<double> sigmas;
    std::vector<double> achieved_perplexity;
    double perplexity = 0.0;
    int exaggeration_end = 0;  // first iteration without exaggeration
};

struct ConditionalAffinities {
    Matrix p;  // row-stochastic, zero diagonal
    std::vector<double> betas;
    std::vector<double> perplexity;
};

/// Per-row bisection on log(beta) (50 steps at most) matching exp(H) to
/// `perplexity`.
ConditionalAffinities conditional_affinities(const Matrix& squared_distances, double perplexity);

double default_perplexity(std::size_t n);

/// Exact t-SNE to 2-D. Rows of `data` are points.
TsneResult tsne_fit(const Matrix& data, const TsneConfig& config, std::vector<std::string> labels = {});

/// Mean silhouette coefficient, Euclidean distance.
double silhouette(const Matrix& points, const std::vector<std::string>& labels);

}  // namespace psychoforge

#include "psychoforge/semantic.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "http_client.hpp"
#include "psychoforge/hash.hpp"
#include "psychoforge/rng.hpp"
#include "psychoforge/table.hpp"

namespace psychoforge {

using nlohmann::json;

std::string embedding_hash(std::string_view text, std::string_view model_name) {
    std::string key(model_name);
    key.push_back('\n');
    key.append(text);
    return sha256_hex(key);
}

// ---------------------------------------------------------------- cache

EmbeddingCache::EmbeddingCache(std::filesystem::path path) : path_(std::move(path)) {
    if (!std::filesystem::exists(*path_)) return;
    std::istringstream in(read_text_file(*path_));
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto j = json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            if (in.peek() == std::char_traits<char>::eof()) {
                spdlog::warn("{}: ignoring torn final line {}", path_->string(), lineno);
                break;
            }
            throw ParseError(fmt::format("{}:{}: invalid cache record", path_->string(), lineno));
        }
        try {
            EmbeddingRecord r{j.at("text").get<std::string>(), j.at("model").get<std::string>(),
                              j.at("vector").get<std::vector<double>>(), j.at("hash").get<std::string>()};
            if (r.content_hash != embedding_hash(r.text, r.model_name)) {
                throw ParseError(fmt::format("{}:{}: hash does not match text/model", path_->string(), lineno));
            }
            records_.insert_or_assign(r.content_hash, std::move(r));
        } catch (const json::exception& e) {
            throw ParseError(fmt::format("{}:{}: {}", path_->string(), lineno, e.what()));
        }
    }
}

std::optional<EmbeddingRecord> EmbeddingCache::find(std::string_view hash) const {
    std::lock_guard lock(mutex_);
    auto it = records_.find(std::string(hash));
    if (it == records_.end()) return std::nullopt;
    return it->second;
}

void EmbeddingCache::insert(const EmbeddingRecord& record) {
    std::lock_guard lock(mutex_);
    if (path_) {
        if (path_->has_parent_path()) std::filesystem::create_directories(path_->parent_path());
        std::ofstream out(*path_, std::ios::app | std::ios::binary);
        json j = {{"hash", record.content_hash},
                  {"model", record.model_name},
                  {"text", record.text},
                  {"vector", record.vector}};
        out << j.dump(-1, ' ', false, json::error_handler_t::replace) << '\n';
        if (!out) throw Error(fmt::format("cannot append to embedding cache '{}'", path_->string()));
    }
    records_.insert_or_assign(record.content_hash, record);
}

std::size_t EmbeddingCache::size() const {
    std::lock_guard lock(mutex_);
    return records_.size();
}

// ---------------------------------------------------------------- embedders

std::vector<double> LocalHashEmbedder::embed_one(std::string_view text) const {
    std::vector<double> v(kDimensions, 0.0);
    auto add = [&](std::string_view feature, double weight) {
        const auto h = fnv1a64(feature);
        const double sign = (h >> 63) ? -1.0 : 1.0;
        v[static_cast<std::size_t>(h % kDimensions)] += sign * weight;
    };
    std::string token;
    auto flush = [&] {
        if (token.empty()) return;
        add("w:" + token, 1.0);
        const std::string padded = "^" + token + "$";
        for (std::size_t i = 0; i + 3 <= padded.size(); ++i) add("c:" + padded.substr(i, 3), 0.5);
        token.clear();
    };
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) token.push_back(static_cast<char>(std::tolower(c)));
        else flush();
    }
    flush();
    double norm = 0.0;
    for (double x : v) norm += x * x;
    if (norm == 0.0) throw ValidationError(fmt::format("cannot embed text without alphanumerics: '{}'", text));
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    return v;
}

std::vector<std::vector<double>> LocalHashEmbedder::embed(const std::vector<std::string>& texts,
                                                          const std::string& model_name) const {
    if (model_name != kModelName) {
        throw ConfigError(fmt::format("local embedder only provides '{}', not '{}'", kModelName, model_name));
    }
    std::vector<std::vector<double>> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(embed_one(t));
    return out;
}

RemoteEmbedder::RemoteEmbedder(std::string api_base, std::string api_key, int max_retries)
    : api_base_(std::move(api_base)), api_key_(std::move(api_key)), max_retries_(max_retries) {
    if (api_key_.empty()) throw ConfigError("remote embedder: empty API key");
}

RemoteEmbedder RemoteEmbedder::from_environment() {
    const char* key = std::getenv("PSYCHOFORGE_API_KEY");
    if (!key || !*key) throw ConfigError("remote embedder needs PSYCHOFORGE_API_KEY in the environment");
    const char* base = std::getenv("PSYCHOFORGE_API_BASE");
    return RemoteEmbedder(base && *base ? base : "https://api.openai.com/v1", key);
}

std::vector<std::vector<double>> RemoteEmbedder::embed(const std::vector<std::string>& texts,
                                                       const std::string& model_name) const {
    detail::RetryPolicy policy;
    policy.max_retries = max_retries_;
    auto res = detail::post_json(api_base_, "/embeddings", api_key_, {{"model", model_name}, {"input", texts}}, policy,
                                 "embeddings");
    std::vector<std::vector<double>> out(texts.size());
    try {
        for (const auto& d : res.body.at("data")) {
            const auto idx = d.at("index").get<std::size_t>();
            if (idx >= out.size()) throw NetworkError("embedding response index out of range");
            out[idx] = d.at("embedding").get<std::vector<double>>();
        }
    } catch (const json::exception& e) {
        throw NetworkError(fmt::format("malformed embedding response: {}", e.what()));
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (out[i].empty()) throw NetworkError(fmt::format("embedding response lacks input {}", i));
    }
    return out;
}

std::vector<EmbeddingRecord> embed_texts(const std::vector<std::string>& texts, const std::string& model_name,
                                         EmbeddingCache& cache, const Embedder* fetcher, bool offline,
                                         EmbedStats* stats, std::size_t batch_size) {
    EmbedStats local;
    EmbedStats& st = stats ? *stats : local;
    std::vector<std::string> missing;
    std::set<std::string> missing_hashes;
    for (const auto& t : texts) {
        const auto h = embedding_hash(t, model_name);
        if (cache.find(h)) {
            ++st.cache_hits;
        } else if (missing_hashes.insert(h).second) {
            missing.push_back(t);
        }
    }
    if (!missing.empty()) {
        if (offline) {
            throw ConfigError(fmt::format("offline mode: {} text(s) not in the embedding cache for model '{}', e.g. '{}'",
                                          missing.size(), model_name, missing.front()));
        }
        if (!fetcher) throw ConfigError(fmt::format("no embedder available for cache miss '{}'", missing.front()));
        batch_size = std::max<std::size_t>(batch_size, 1);
        for (std::size_t start = 0; start < missing.size(); start += batch_size) {
            const std::vector<std::string> batch(
                missing.begin() + static_cast<std::ptrdiff_t>(start),
                missing.begin() + static_cast<std::ptrdiff_t>(std::min(missing.size(), start + batch_size)));
            const auto vectors = fetcher->embed(batch, model_name);
            ++st.remote_requests;
            if (vectors.size() != batch.size()) throw NetworkError("embedder returned the wrong number of vectors");
            for (std::size_t i = 0; i < batch.size(); ++i) {
                cache.insert({batch[i], model_name, vectors[i], embedding_hash(batch[i], model_name)});
                ++st.fetched;
            }
        }
    }
    std::vector<EmbeddingRecord> out;
    out.reserve(texts.size());
    for (const auto& t : texts) {
        auto rec = cache.find(embedding_hash(t, model_name));
        if (!rec) throw Error(fmt::format("embedding for '{}' vanished from the cache", t));
        if (!out.empty() && rec->vector.size() != out.front().vector.size()) {
            throw ValidationError(fmt::format("embedding dimension {} for '{}' differs from {}", rec->vector.size(), t,
                                              out.front().vector.size()));
        }
        if (!std::all_of(rec->vector.begin(), rec->vector.end(), [](double x) { return std::isfinite(x); })) {
            throw ValidationError(fmt::format("non-finite embedding for '{}'", t));
        }
        out.push_back(std::move(*rec));
    }
    return out;
}

// ---------------------------------------------------------------- similarity

double cosine(const Vector& u, const Vector& v) {
    if (u.size() != v.size()) throw ValidationError(fmt::format("cosine: dimensions {} and {} differ", u.size(), v.size()));
    const double nu = u.norm(), nv = v.norm();
    if (nu == 0.0 || nv == 0.0) throw ValidationError("cosine: zero vector");
    return std::clamp(u.dot(v) / (nu * nv), -1.0, 1.0);
}

double cosine(const std::vector<double>& u, const std::vector<double>& v) {
    return cosine(Eigen::Map<const Vector>(u.data(), static_cast<Eigen::Index>(u.size())),
                  Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
}

std::string_view aggregation_name(Aggregation a) { return a == Aggregation::centroid ? "centroid" : "pairwise_mean"; }

std::optional<Aggregation> parse_aggregation(std::string_view text) {
    if (text == "pairwise_mean" || text == "pairwise") return Aggregation::pairwise_mean;
    if (text == "centroid") return Aggregation::centroid;
    return std::nullopt;
}

namespace {

std::vector<const EmbeddedItem*> in_domain(const std::vector<EmbeddedItem>& items, Domain d) {
    std::vector<const EmbeddedItem*> out;
    for (const auto& it : items) {
        if (it.domain == d) out.push_back(&it);
    }
    return out;
}

std::vector<double> centroid(const std::vector<const EmbeddedItem*>& items) {
    std::vector<double> c(items.front()->vector.size(), 0.0);
    for (const auto* it : items) {
        for (std::size_t k = 0; k < c.size(); ++k) c[k] += it->vector[k];
    }
    return c;
}

}  // namespace

double domain_similarity(const std::vector<EmbeddedItem>& a, const std::vector<EmbeddedItem>& b, Domain domain,
                         Aggregation aggregation) {
    const auto xa = in_domain(a, domain), xb = in_domain(b, domain);
    if (xa.empty() || xb.empty()) {
        throw ValidationError(fmt::format("domain_similarity: no {} items in one of the tests", domain_name(domain)));
    }
    if (aggregation == Aggregation::centroid) return cosine(centroid(xa), centroid(xb));
    double sum = 0.0;
    for (const auto* p : xa) {
        for (const auto* q : xb) sum += cosine(p->vector, q->vector);
    }
    return sum / static_cast<double>(xa.size() * xb.size());
}

double overall_similarity(const std::vector<EmbeddedItem>& a, const std::vector<EmbeddedItem>& b,
                          Aggregation aggregation) {
    double sum = 0.0;
    for (Domain d : kDomains) sum += domain_similarity(a, b, d, aggregation);
    return sum / static_cast<double>(kDomains.size());
}

std::vector<double> SimilarityPanel::row_means() const {
    const auto n = values.rows();
    std::vector<double> out;
    for (Eigen::Index i = 0; i < n; ++i) out.push_back((values.row(i).sum() - values(i, i)) / static_cast<double>(n - 1));
    return out;
}

std::vector<SimilarityPanel> similarity_panels(const std::vector<std::string>& tests,
                                               const std::map<std::string, std::vector<EmbeddedItem>>& items,
                                               Aggregation aggregation) {
    if (tests.size() < 2) throw ValidationError("similarity_panels: need at least two tests");
    const auto n = static_cast<Eigen::Index>(tests.size());
    std::vector<SimilarityPanel> panels;
    panels.push_back({"Overall", tests, Matrix::Identity(n, n)});
    for (Domain d : kDomains) panels.push_back({std::string(domain_name(d)), tests, Matrix::Identity(n, n)});
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const auto& a = items.at(tests[static_cast<std::size_t>(i)]);
            const auto& b = items.at(tests[static_cast<std::size_t>(j)]);
            double total = 0.0;
            for (Domain d : kDomains) {
                const double s = domain_similarity(a, b, d, aggregation);
                auto& m = panels[1 + domain_index(d)].values;
                m(i, j) = m(j, i) = s;
                total += s;
            }
            panels[0].values(i, j) = panels[0].values(j, i) = total / static_cast<double>(kDomains.size());
        }
    }
    return panels;
}

// ---------------------------------------------------------------- t-SNE

namespace {

Matrix squared_distances(const Matrix& x) {
    const Vector norms = x.rowwise().squaredNorm();
    Matrix d = (-2.0 * x * x.transpose()).colwise() + norms;
    d.rowwise() += norms.transpose();
    d = d.cwiseMax(0.0);
    d.diagonal().setZero();
    return d;
}

}  // namespace

double default_perplexity(std::size_t n) { return std::min(30.0, (static_cast<double>(n) - 1.0) / 3.0); }

ConditionalAffinities conditional_affinities(const Matrix& d2, double perplexity) {
    const auto n = d2.rows();
    const double target = std::log(perplexity);
    ConditionalAffinities out{Matrix::Zero(n, n), std::vector<double>(static_cast<std::size_t>(n)),
                              std::vector<double>(static_cast<std::size_t>(n))};
    Vector row(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double d_min = std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j != i) d_min = std::min(d_min, d2(i, j));
        }
        // Entropy of the row at precision beta; shifting by d_min avoids underflow.
        auto entropy = [&](double beta) {
            double sum = 0.0, weighted = 0.0;
            for (Eigen::Index j = 0; j < n; ++j) {
                row(j) = j == i ? 0.0 : std::exp(-beta * (d2(i, j) - d_min));
                sum += row(j);
                weighted += row(j) * (d2(i, j) - d_min);
            }
            row /= sum;
            return std::log(sum) + beta * weighted / sum;
        };
        double lo = -50.0, hi = 50.0, log_beta = 0.0;
        double h = entropy(1.0);
        for (int step = 0; step < 50 && std::abs(h - target) > 1e-7; ++step) {
            if (h > target) lo = log_beta;  // too flat: raise precision
            else hi = log_beta;
            log_beta = 0.5 * (lo + hi);
            h = entropy(std::exp(log_beta));
        }
        const auto ui = static_cast<std::size_t>(i);
        out.betas[ui] = std::exp(log_beta);
        out.perplexity[ui] = std::exp(h);
        out.p.row(i) = row.transpose();
    }
    return out;
}

TsneResult tsne_fit(const Matrix& data, const TsneConfig& config, std::vector<std::string> labels) {
    const auto n = data.rows();
    if (n < 4) throw ValidationError("tsne_fit: need at least 4 points");
    if (!data.allFinite()) throw ValidationError("tsne_fit: non-finite input");
    if (!labels.empty() && labels.size() != static_cast<std::size_t>(n)) {
        throw ValidationError("tsne_fit: one label per point required");
    }
    const double perplexity = config.perplexity.value_or(default_perplexity(static_cast<std::size_t>(n)));
    const double bound = (static_cast<double>(n) - 1.0) / 3.0;
    if (!(perplexity > 0.0) || perplexity > bound) {
        throw ValidationError(fmt::format("tsne_fit: perplexity {} infeasible for n = {} (must be in (0, {:.4g}])",
                                          perplexity, n, bound));
    }
    if (config.iterations < 1 || !(config.learning_rate > 0.0)) {
        throw ValidationError("tsne_fit: iterations and learning rate must be positive");
    }

    const auto cond = conditional_affinities(squared_distances(data), perplexity);
    Matrix p = (cond.p + cond.p.transpose()) / (2.0 * static_cast<double>(n));
    p = p.cwiseMax(1e-12);
    p.diagonal().setZero();

    TsneResult result;
    result.labels = std::move(labels);
    result.perplexity = perplexity;
    result.achieved_perplexity = cond.perplexity;
    for (double b : cond.betas) result.sigmas.push_back(std::sqrt(1.0 / (2.0 * b)));
    result.exaggeration_end = config.iterations / 4;

    Rng rng(config.seed);
    Matrix y(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
        y(i, 0) = 1e-4 * rng.normal();
        y(i, 1) = 1e-4 * rng.normal();
    }
    Matrix update = Matrix::Zero(n, 2);
    Matrix gains = Matrix::Ones(n, 2);
    Matrix num(n, n);
    Matrix grad(n, 2);

    for (int iter = 0; iter < config.iterations; ++iter) {
        const double exaggeration = iter < result.exaggeration_end ? config.early_exaggeration : 1.0;
        const double momentum = iter < config.momentum_switch ? config.momentum_initial : config.momentum_final;

        num = (squared_distances(y).array() + 1.0).inverse().matrix();
        num.diagonal().setZero();
        const double z = num.sum();

        double kl = 0.0;
        grad.setZero();
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < n; ++j) {
                if (i == j) continue;
                const double q = std::max(num(i, j) / z, 1e-300);
                kl += p(i, j) * std::log(p(i, j) / q);
                const double mult = (exaggeration * p(i, j) - num(i, j) / z) * num(i, j);
                grad.row(i) += mult * (y.row(i) - y.row(j));
            }
        }
        grad *= 4.0;
        result.kl_trace.push_back(std::max(kl, 0.0));
        if (!grad.allFinite()) throw NumericalError(fmt::format("tsne_fit: non-finite gradient at iteration {}", iter));

        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index k = 0; k < 2; ++k) {
                const bool same_sign = (grad(i, k) > 0) == (update(i, k) > 0);
                gains(i, k) = same_sign ? std::max(gains(i, k) * 0.8, 0.01) : gains(i, k) + 0.2;
            }
        }
        update = momentum * update - config.learning_rate * gains.cwiseProduct(grad);
        y += update;
        y.rowwise() -= y.colwise().mean();
    }
    result.points = y;
    return result;
}

double silhouette(const Matrix& points, const std::vector<std::string>& labels) {
    const auto n = points.rows();
    if (labels.size() != static_cast<std::size_t>(n)) throw ValidationError("silhouette: one label per point required");
    std::map<std::string, std::vector<Eigen::Index>> groups;
    for (Eigen::Index i = 0; i < n; ++i) groups[labels[static_cast<std::size_t>(i)]].push_back(i);
    if (groups.size() < 2) throw ValidationError("silhouette: need at least two labels");
    for (const auto& [label, members] : groups) {
        if (members.size() < 2) throw ValidationError(fmt::format("silhouette: label '{}' has a single point", label));
    }
    const Matrix dist = squared_distances(points).cwiseSqrt();
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& own = labels[static_cast<std::size_t>(i)];
        double a = 0.0, b = std::numeric_limits<double>::infinity();
        for (const auto& [label, members] : groups) {
            double sum = 0.0;
            for (auto j : members) sum += dist(i, j);
            if (label == own) {
                a = sum / static_cast<double>(members.size() - 1);
            } else {
                b = std::min(b, sum / static_cast<double>(members.size()));
            }
        }
        const double denom = std::max(a, b);
        total += denom > 0 ? (b - a) / denom : 0.0;
    }
    return total / static_cast<double>(n);
}

}  // namespace psychoforge

#include "psychoforge/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "psychoforge/rng.hpp"
#include "psychoforge/table.hpp"

namespace psychoforge {

namespace {

constexpr std::uint64_t kFacetStream = 0x66616365;  // "face"
constexpr std::uint64_t kItemStream = 0x6974656d;   // "item"
constexpr double kSymmetryTolerance = 1e-12;

}  // namespace

std::size_t SimulationParams::facet_position(std::string_view facet) const {
    auto it = std::find(facets.begin(), facets.end(), facet);
    if (it == facets.end()) throw ValidationError(fmt::format("simulation params: unknown facet '{}'", facet));
    return static_cast<std::size_t>(it - facets.begin());
}

void SimulationParams::validate() const {
    const auto n = static_cast<Eigen::Index>(facets.size());
    if (n == 0) throw ValidationError("simulation params: no facets");
    if (std::set<std::string>(facets.begin(), facets.end()).size() != facets.size()) {
        throw ValidationError("simulation params: duplicate facet names");
    }
    if (static_cast<Eigen::Index>(facet_domains.size()) != n || facet_means.size() != n || facet_sds.size() != n ||
        facet_corr.rows() != n || facet_corr.cols() != n) {
        throw ValidationError(fmt::format("simulation params: every facet field must have {} entries", n));
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& name = facets[static_cast<std::size_t>(i)];
        if (!std::isfinite(facet_means[i])) throw ValidationError(fmt::format("facet '{}': non-finite mean", name));
        if (!(facet_sds[i] >= 0.0) || !std::isfinite(facet_sds[i])) {
            throw ValidationError(fmt::format("facet '{}': SD must be finite and >= 0", name));
        }
        if (std::abs(facet_corr(i, i) - 1.0) > kSymmetryTolerance) {
            throw ValidationError(fmt::format("facet_corr: diagonal entry for '{}' is not 1", name));
        }
        for (Eigen::Index j = 0; j < n; ++j) {
            const double r = facet_corr(i, j);
            if (!std::isfinite(r) || r < -1.0 || r > 1.0) {
                throw ValidationError(fmt::format("facet_corr({}, {}) = {} outside [-1, 1]", i, j, r));
            }
            if (std::abs(r - facet_corr(j, i)) > kSymmetryTolerance) {
                throw ValidationError(fmt::format("facet_corr is not symmetric at ({}, {})", i, j));
            }
            if (facet_domains[static_cast<std::size_t>(i)] != facet_domains[static_cast<std::size_t>(j)] &&
                std::abs(r) > kSymmetryTolerance) {
                throw ValidationError(fmt::format(
                    "facet_corr: '{}' and '{}' belong to different domains and must be uncorrelated", name,
                    facets[static_cast<std::size_t>(j)]));
            }
        }
    }
}

SimulationParams parse_simulation_params(std::string_view json_text) {
    auto doc = nlohmann::json::parse(json_text, nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) throw ParseError("simulation params: not a JSON object");
    SimulationParams p;
    try {
        p.facets = doc.at("facets").get<std::vector<std::string>>();
        for (const auto& code : doc.at("facet_domains").get<std::vector<std::string>>()) {
            auto d = parse_domain(code);
            if (!d) throw ValidationError(fmt::format("simulation params: unknown domain '{}'", code));
            p.facet_domains.push_back(*d);
        }
        auto to_vector = [](const std::vector<double>& v) {
            return Vector(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
        };
        p.facet_means = to_vector(doc.at("facet_means").get<std::vector<double>>());
        p.facet_sds = to_vector(doc.at("facet_sds").get<std::vector<double>>());
        const auto rows = doc.at("facet_corr").get<std::vector<std::vector<double>>>();
        p.facet_corr.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size()));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].size() != rows.size()) throw ValidationError("simulation params: facet_corr is not square");
            for (std::size_t j = 0; j < rows.size(); ++j) {
                p.facet_corr(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
            }
        }
        p.intra_facet_item_corr = doc.at("intra_facet_item_corr").get<std::map<std::string, double>>();
        p.n_agents = doc.at("n_agents").get<std::size_t>();
        p.seed = doc.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(fmt::format("simulation params: {}", e.what()));
    }
    p.validate();
    return p;
}

SimulationParams load_simulation_params(const std::filesystem::path& path) {
    try {
        return parse_simulation_params(read_text_file(path));
    } catch (const ParseError& e) {
        throw ParseError(fmt::format("{}: {}", path.string(), e.what()));
    }
}

std::string simulation_params_to_json(const SimulationParams& p) {
    nlohmann::ordered_json doc;
    doc["facets"] = p.facets;
    std::vector<std::string> domains;
    for (Domain d : p.facet_domains) domains.emplace_back(1, domain_code(d));
    doc["facet_domains"] = domains;
    doc["facet_means"] = std::vector<double>(p.facet_means.data(), p.facet_means.data() + p.facet_means.size());
    doc["facet_sds"] = std::vector<double>(p.facet_sds.data(), p.facet_sds.data() + p.facet_sds.size());
    std::vector<std::vector<double>> corr;
    for (Eigen::Index i = 0; i < p.facet_corr.rows(); ++i) {
        corr.emplace_back();
        for (Eigen::Index j = 0; j < p.facet_corr.cols(); ++j) corr.back().push_back(p.facet_corr(i, j));
    }
    doc["facet_corr"] = corr;
    doc["intra_facet_item_corr"] = p.intra_facet_item_corr;
    doc["n_agents"] = p.n_agents;
    doc["seed"] = p.seed;
    return doc.dump(2);
}

CovarianceFactor build_covariance(const SimulationParams& params) {
    params.validate();
    const auto n = params.facet_corr.rows();
    const Matrix sd = params.facet_sds.asDiagonal();

    CovarianceFactor out;
    out.covariance = sd * params.facet_corr * sd;

    double ridge = 0.0;
    for (;;) {
        Matrix corr = params.facet_corr;
        corr.diagonal().array() += ridge;
        Eigen::LLT<Matrix> llt(corr);
        if (llt.info() == Eigen::Success && (llt.matrixL().toDenseMatrix().diagonal().array() > 0.0).all()) {
            out.cholesky = sd * Matrix(llt.matrixL());
            out.ridge = ridge;
            break;
        }
        ridge = ridge == 0.0 ? 1e-12 : ridge * 10.0;
        if (ridge > kMaxCorrelationRidge * (1.0 + 1e-9)) {
            throw NumericalError(fmt::format(
                "facet correlation matrix is not positive definite even with a {:g} ridge; check the input "
                "statistics",
                kMaxCorrelationRidge));
        }
    }
    if (out.ridge > 0.0) {
        spdlog::warn("facet correlation matrix repaired with ridge {:g} on the diagonal ({} facets)", out.ridge, n);
    }
    return out;
}

Matrix sample_facets(const SimulationParams& params) {
    const auto factor = build_covariance(params);
    const auto n_facets = static_cast<Eigen::Index>(params.facet_count());
    Matrix latent(static_cast<Eigen::Index>(params.n_agents), n_facets);
    Vector z(n_facets);
    for (std::size_t agent = 0; agent < params.n_agents; ++agent) {
        Rng rng(derive_seed(params.seed, kFacetStream, agent));
        for (Eigen::Index f = 0; f < n_facets; ++f) z[f] = rng.normal();
        latent.row(static_cast<Eigen::Index>(agent)) = (params.facet_means + factor.cholesky * z).transpose();
    }
    return latent;
}

double item_error_variance(double facet_sd, double rho) {
    if (!(rho > 0.0) || rho > 1.0) {
        throw ValidationError(fmt::format("intra-facet item correlation {} must lie in (0, 1]", rho));
    }
    return facet_sd * facet_sd * (1.0 - rho) / rho;
}

GeneratedItems generate_items(const Matrix& latent, const ScaleDefinition& scale, const SimulationParams& params) {
    if (!scale.has_facets()) throw ValidationError(fmt::format("scale '{}' has no facets to simulate", scale.name()));
    if (latent.cols() != static_cast<Eigen::Index>(params.facet_count())) {
        throw ValidationError("latent facet matrix does not match the parameter facets");
    }
    const auto& items = scale.items();
    std::vector<std::size_t> facet_of(items.size());
    std::vector<double> error_sd(items.size());
    for (std::size_t j = 0; j < items.size(); ++j) {
        const auto& facet = *items[j].facet;
        facet_of[j] = params.facet_position(facet);
        if (params.facet_domains[facet_of[j]] != items[j].domain) {
            throw ValidationError(fmt::format("facet '{}' is declared in a different domain than item '{}'", facet,
                                              items[j].id));
        }
        auto rho = params.intra_facet_item_corr.find(facet);
        if (rho == params.intra_facet_item_corr.end()) {
            throw ValidationError(fmt::format("no intra-facet item correlation for facet '{}'", facet));
        }
        error_sd[j] = std::sqrt(item_error_variance(params.facet_sds[static_cast<Eigen::Index>(facet_of[j])], rho->second));
    }

    const double lo = scale.response_min();
    const double hi = scale.response_max();
    GeneratedItems out;
    out.continuous.resize(latent.rows(), static_cast<Eigen::Index>(items.size()));
    out.responses.reserve(static_cast<std::size_t>(latent.rows()));
    for (Eigen::Index agent = 0; agent < latent.rows(); ++agent) {
        Rng rng(derive_seed(params.seed, kItemStream, static_cast<std::uint64_t>(agent)));
        ResponseVector rv{scale.name(), {}};
        for (std::size_t j = 0; j < items.size(); ++j) {
            const double x = latent(agent, static_cast<Eigen::Index>(facet_of[j])) + error_sd[j] * rng.normal();
            out.continuous(agent, static_cast<Eigen::Index>(j)) = x;
            const double keyed = items[j].keying == Keying::reversed ? lo + hi - x : x;
            rv.answers[items[j].id] = static_cast<int>(std::clamp(std::floor(keyed + 0.5), lo, hi));
        }
        out.responses.push_back(std::move(rv));
    }
    return out;
}

SimulatedDataset simulate_bfi2(const SimulationParams& params, const ScaleDefinition& scale) {
    SimulatedDataset ds;
    ds.params = params;
    ds.ridge = build_covariance(params).ridge;
    ds.latent_facets = sample_facets(params);
    auto items = generate_items(ds.latent_facets, scale, params);
    ds.continuous_items = std::move(items.continuous);
    ds.responses = std::move(items.responses);
    return ds;
}

std::vector<std::filesystem::path> write_simulated_dataset(const std::filesystem::path& dir, std::string_view stem,
                                                           const SimulatedDataset& dataset,
                                                           const ScaleDefinition& scale) {
    ResponseTable table;
    for (std::size_t i = 0; i < dataset.responses.size(); ++i) table.agent_ids.push_back(default_agent_id(i));
    table.responses = dataset.responses;
    const auto csv = dir / fmt::format("{}.csv", stem);
    write_response_table(csv, table, scale);

    nlohmann::ordered_json prov;
    prov["toolkit_version"] = std::string(kToolkitVersion);
    prov["seed"] = dataset.params.seed;
    prov["ridge"] = dataset.ridge;
    prov["params"] = nlohmann::ordered_json::parse(simulation_params_to_json(dataset.params));
    const auto sidecar = dir / fmt::format("{}.provenance.json", stem);
    write_text_file(sidecar, prov.dump(2) + "\n");
    return {csv, sidecar};
}

}  // namespace psychoforge

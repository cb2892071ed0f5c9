#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "psychoforge/common.hpp"
#include "psychoforge/scales.hpp"

namespace psychoforge {

/// Summary statistics that drive the parametric generator. Facet order is
/// the order of `facets`; `facet_corr` rows/columns follow it.
struct SimulationParams {
    std::vector<std::string> facets;
    std::vector<Domain> facet_domains;
    Vector facet_means;
    Vector facet_sds;
    Matrix facet_corr;
    std::map<std::string, double> intra_facet_item_corr;
    std::size_t n_agents = 0;
    std::uint64_t seed = 0;

    std::size_t facet_count() const { return facets.size(); }
    std::size_t facet_position(std::string_view facet) const;

    /// Shape, symmetry, unit diagonal, [-1,1] entries, non-negative SDs and
    /// zero cross-domain correlations (domains are independent).
    void validate() const;
};

SimulationParams parse_simulation_params(std::string_view json_text);
SimulationParams load_simulation_params(const std::filesystem::path& path);
std::string simulation_params_to_json(const SimulationParams& params);

struct CovarianceFactor {
    Matrix covariance;  ///< sd_i * sd_j * corr_ij
    Matrix cholesky;    ///< lower factor L with L L^T = covariance (+ ridge-scaled diagonal)
    double ridge = 0.0; ///< amount added to the correlation diagonal, 0 when none was needed
};

/// Largest ridge added to the correlation diagonal before giving up.
inline constexpr double kMaxCorrelationRidge = 1e-6;

/// Factors the correlation matrix (so zero SDs stay valid) and scales by the
/// SDs. Numerically non-PD correlation input gets a ridge of at most
/// kMaxCorrelationRidge; anything worse is a NumericalError.
CovarianceFactor build_covariance(const SimulationParams& params);

/// n_agents x facets draws from N(means, covariance). Row i depends only on
/// (seed, i), so any partition of the rows reproduces the same matrix.
Matrix sample_facets(const SimulationParams& params);

/// Item error variance that makes two items of the same facet correlate rho:
/// rho = sd^2 / (sd^2 + var_e)  =>  var_e = sd^2 (1 - rho) / rho.
double item_error_variance(double facet_sd, double rho);

struct GeneratedItems {
    /// Continuous positively-keyed item values before reflection and rounding.
    Matrix continuous;
    std::vector<ResponseVector> responses;
};

/// Item-level responses: facet score + Gaussian error, reversed items
/// reflected, rounded to the nearest integer and clamped to the scale range.
GeneratedItems generate_items(const Matrix& latent, const ScaleDefinition& scale, const SimulationParams& params);

struct SimulatedDataset {
    Matrix latent_facets;
    Matrix continuous_items;
    std::vector<ResponseVector> responses;
    SimulationParams params;
    double ridge = 0.0;
};

SimulatedDataset simulate_bfi2(const SimulationParams& params, const ScaleDefinition& scale);

/// Writes `<stem>.csv` (response matrix) and `<stem>.provenance.json`
/// (params, seed, toolkit version). Returns both paths.
std::vector<std::filesystem::path> write_simulated_dataset(const std::filesystem::path& dir, std::string_view stem,
                                                           const SimulatedDataset& dataset,
                                                           const ScaleDefinition& scale);

}  // namespace psychoforge

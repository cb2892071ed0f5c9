#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "psychoforge/scales.hpp"

namespace psychoforge {

/// Product-moment correlation. Throws ValidationError on length mismatch,
/// fewer than 3 points or a constant vector.
double pearson(const Vector& x, const Vector& y);
double pearson(const std::vector<double>& x, const std::vector<double>& y);

struct CorrelationMatrix {
    std::vector<std::string> labels;
    Matrix values;

    /// Square, labelled, symmetric within 1e-12, unit diagonal, entries in [-1, 1].
    void validate() const;
    std::size_t size() const { return labels.size(); }
    CorrelationMatrix without(const std::vector<std::string>& drop) const;
};

/// Column correlations of an observations x variables matrix.
CorrelationMatrix correlation_matrix(const Matrix& data, std::vector<std::string> labels);

struct ConvergentTable {
    std::array<double, 5> r{};
    double average = 0.0;

    double domain(Domain d) const { return r[domain_index(d)]; }
};

/// Per-domain Pearson r between matched agents' input and output scores.
ConvergentTable convergent_table(const std::map<std::string, ScoreReport>& inputs,
                                 const std::map<std::string, ScoreReport>& outputs);

/// alpha = k/(k-1) * (1 - sum var_j / var_total), N-1 denominators, on
/// already recoded columns.
double cronbach_alpha(const Matrix& recoded);

struct AlphaReport {
    Domain domain = Domain::O;
    double alpha = 0.0;
    int k_items = 0;
    std::vector<std::string> dropped_items;
};

/// Alpha of one domain's items (reversed items recoded, `drop` excluded).
AlphaReport domain_alpha(const std::vector<ResponseVector>& responses, const ScaleDefinition& scale, Domain domain,
                         const std::vector<std::string>& drop = {});

inline constexpr double kUniquenessFloor = 1e-4;

struct CfaOptions {
    int max_iterations = 2000;
    double gradient_tolerance = 1e-9;
    double uniqueness_floor = kUniquenessFloor;
};

struct CfaFit {
    std::vector<std::string> items;
    std::map<std::string, double> loadings;      // standardized
    std::map<std::string, double> uniquenesses;  // standardized
    double fit_value = 0.0;
    bool converged = false;
    int iterations = 0;
    std::vector<std::string> heywood_flags;
    std::string diagnosis;
    std::optional<std::pair<std::string, std::string>> collinear_pair;
};

/// F_ML = ln|S| + tr(R S^-1) - ln|R| - p with S = l l' + diag(psi). +inf when
/// S is not positive definite.
double cfa_objective(const Matrix& r, const Vector& lambda, const Vector& psi);
/// Analytic gradient: dF/dl = 2 M l, dF/dpsi_j = M_jj, M = S^-1 - S^-1 R S^-1.
void cfa_gradient(const Matrix& r, const Vector& lambda, const Vector& psi, Vector& d_lambda, Vector& d_psi);

/// One-factor ML CFA on a correlation matrix (factor variance fixed at 1).
/// Near-singular input (|R| < 1e-10 or an off-diagonal |r| >= 1 - 1e-9) is
/// reported as non-convergent with the offending pair named; so is hitting
/// the iteration cap. Loadings are signed so that they sum positive.
CfaFit fit_one_factor_cfa(const CorrelationMatrix& corr, const CfaOptions& options = {});

/// Two-sided tail probability of Student's t.
double p_value_t(double t, int df);

inline constexpr double kSignificanceLevel = 0.05;

struct RegressionFit {
    std::vector<std::string> predictors;
    std::map<std::string, double> coefficients;
    std::map<std::string, double> std_errors;
    std::map<std::string, double> t_stats;
    std::map<std::string, double> p_values;
    double intercept = 0.0;
    double intercept_se = 0.0;
    double r_squared = 0.0;
    int n = 0;
    int df = 0;

    bool significant(const std::string& predictor) const { return p_values.at(predictor) < kSignificanceLevel; }
    Vector residuals;
};

/// OLS with intercept via column-pivoted QR; SEs from s^2 (X'X)^-1 and
/// two-sided t p-values with N-p-1 df. Throws ValidationError naming the
/// collinear columns on rank deficiency.
RegressionFit ols_regress(const Vector& y, const Matrix& x, const std::vector<std::string>& names);

}  // namespace psychoforge

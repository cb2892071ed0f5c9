#include "psychoforge/psychometrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include <boost/math/special_functions/beta.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>

namespace psychoforge {

double pearson(const Vector& x, const Vector& y) {
    if (x.size() != y.size()) throw ValidationError(fmt::format("pearson: lengths {} and {} differ", x.size(), y.size()));
    if (x.size() < 3) throw ValidationError("pearson: need at least 3 observations");
    const Vector dx = x.array() - x.mean();
    const Vector dy = y.array() - y.mean();
    const double sxx = dx.squaredNorm(), syy = dy.squaredNorm();
    if (sxx == 0.0 || syy == 0.0) throw ValidationError("pearson: correlation undefined for a constant vector");
    return std::clamp(dx.dot(dy) / std::sqrt(sxx * syy), -1.0, 1.0);
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    return pearson(Eigen::Map<const Vector>(x.data(), static_cast<Eigen::Index>(x.size())),
                   Eigen::Map<const Vector>(y.data(), static_cast<Eigen::Index>(y.size())));
}

void CorrelationMatrix::validate() const {
    const auto p = static_cast<Eigen::Index>(labels.size());
    if (values.rows() != p || values.cols() != p) {
        throw ValidationError(fmt::format("correlation matrix is {}x{} for {} labels", values.rows(), values.cols(), p));
    }
    for (Eigen::Index i = 0; i < p; ++i) {
        if (std::abs(values(i, i) - 1.0) > 1e-12) throw ValidationError("correlation matrix diagonal must be 1");
        for (Eigen::Index j = 0; j < p; ++j) {
            const double v = values(i, j);
            if (!std::isfinite(v) || v < -1.0 - 1e-12 || v > 1.0 + 1e-12) {
                throw ValidationError(fmt::format("correlation {} / {} = {} outside [-1, 1]", labels[i], labels[j], v));
            }
            if (std::abs(v - values(j, i)) > 1e-12) throw ValidationError("correlation matrix is not symmetric");
        }
    }
}

CorrelationMatrix CorrelationMatrix::without(const std::vector<std::string>& drop) const {
    std::vector<Eigen::Index> keep;
    CorrelationMatrix out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (std::find(drop.begin(), drop.end(), labels[i]) == drop.end()) {
            keep.push_back(static_cast<Eigen::Index>(i));
            out.labels.push_back(labels[i]);
        }
    }
    out.values = values(keep, keep);
    return out;
}

CorrelationMatrix correlation_matrix(const Matrix& data, std::vector<std::string> labels) {
    if (static_cast<std::size_t>(data.cols()) != labels.size()) throw ValidationError("one label per column required");
    const auto p = data.cols();
    CorrelationMatrix out{std::move(labels), Matrix::Identity(p, p)};
    for (Eigen::Index i = 0; i < p; ++i) {
        for (Eigen::Index j = i + 1; j < p; ++j) {
            out.values(i, j) = out.values(j, i) = pearson(Vector(data.col(i)), Vector(data.col(j)));
        }
    }
    return out;
}

ConvergentTable convergent_table(const std::map<std::string, ScoreReport>& inputs,
                                 const std::map<std::string, ScoreReport>& outputs) {
    if (inputs.size() != outputs.size() ||
        !std::equal(inputs.begin(), inputs.end(), outputs.begin(),
                    [](const auto& a, const auto& b) { return a.first == b.first; })) {
        throw ValidationError("convergent_table: input and output agent sets differ");
    }
    ConvergentTable table;
    for (Domain d : kDomains) {
        std::vector<double> x, y;
        for (const auto& [id, report] : inputs) {
            x.push_back(report.domain(d));
            y.push_back(outputs.at(id).domain(d));
        }
        table.r[domain_index(d)] = pearson(x, y);
    }
    table.average = (table.r[0] + table.r[1] + table.r[2] + table.r[3] + table.r[4]) / 5.0;
    return table;
}

namespace {

double sample_variance(const Vector& v) {
    const double n = static_cast<double>(v.size());
    return (v.array() - v.mean()).square().sum() / (n - 1.0);
}

}  // namespace

double cronbach_alpha(const Matrix& recoded) {
    const auto k = recoded.cols();
    if (k < 2) throw ValidationError("cronbach_alpha: need at least 2 items");
    if (recoded.rows() < 3) throw ValidationError("cronbach_alpha: need at least 3 respondents");
    double item_var = 0.0;
    for (Eigen::Index j = 0; j < k; ++j) item_var += sample_variance(recoded.col(j));
    const double total_var = sample_variance(recoded.rowwise().sum());
    if (total_var == 0.0) throw ValidationError("cronbach_alpha: total score has zero variance");
    const double kd = static_cast<double>(k);
    return kd / (kd - 1.0) * (1.0 - item_var / total_var);
}

AlphaReport domain_alpha(const std::vector<ResponseVector>& responses, const ScaleDefinition& scale, Domain domain,
                         const std::vector<std::string>& drop) {
    const Matrix all = response_matrix(responses, scale, /*recode_reversed=*/true);
    std::vector<Eigen::Index> cols;
    AlphaReport report{domain, 0.0, 0, {}};
    for (auto idx : scale.items_in_domain(domain)) {
        const auto& id = scale.items()[idx].id;
        if (std::find(drop.begin(), drop.end(), id) != drop.end()) {
            report.dropped_items.push_back(id);
        } else {
            cols.push_back(static_cast<Eigen::Index>(idx));
        }
    }
    report.k_items = static_cast<int>(cols.size());
    report.alpha = cronbach_alpha(all(Eigen::all, cols));
    return report;
}

// ---------------------------------------------------------------- CFA

double cfa_objective(const Matrix& r, const Vector& lambda, const Vector& psi) {
    const Matrix sigma = lambda * lambda.transpose() + Matrix(psi.asDiagonal());
    Eigen::LLT<Matrix> llt(sigma);
    if (llt.info() != Eigen::Success) return std::numeric_limits<double>::infinity();
    const Matrix lr = llt.matrixL();
    const double log_det_sigma = 2.0 * lr.diagonal().array().log().sum();
    Eigen::LLT<Matrix> llt_r(r);
    if (llt_r.info() != Eigen::Success) return std::numeric_limits<double>::infinity();
    const Matrix lrr = llt_r.matrixL();
    const double log_det_r = 2.0 * lrr.diagonal().array().log().sum();
    const double trace = llt.solve(r).trace();
    return log_det_sigma + trace - log_det_r - static_cast<double>(r.rows());
}

void cfa_gradient(const Matrix& r, const Vector& lambda, const Vector& psi, Vector& d_lambda, Vector& d_psi) {
    const auto p = r.rows();
    const Matrix sigma = lambda * lambda.transpose() + Matrix(psi.asDiagonal());
    Eigen::LLT<Matrix> llt(sigma);
    if (llt.info() != Eigen::Success) throw NumericalError("cfa_gradient: implied covariance not positive definite");
    const Matrix inv = llt.solve(Matrix::Identity(p, p));
    const Matrix m = inv - inv * r * inv;
    d_lambda = 2.0 * m * lambda;
    d_psi = m.diagonal();
}

namespace {

struct CfaState {
    const Matrix& r;
    double floor;
    Eigen::Index p;

    // theta = [lambda, phi], psi = floor + exp(phi)
    Vector psi(const Vector& theta) const { return (theta.tail(p).array().exp() + floor).matrix(); }

    double value(const Vector& theta) const { return cfa_objective(r, theta.head(p), psi(theta)); }

    Vector gradient(const Vector& theta) const {
        Vector dl, dp;
        cfa_gradient(r, theta.head(p), psi(theta), dl, dp);
        Vector g(2 * p);
        g.head(p) = dl;
        g.tail(p) = dp.array() * theta.tail(p).array().exp();
        return g;
    }
};

std::pair<Eigen::Index, Eigen::Index> largest_offdiagonal(const Matrix& r) {
    std::pair<Eigen::Index, Eigen::Index> best{0, 1};
    double best_abs = -1.0;
    for (Eigen::Index i = 0; i < r.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < r.cols(); ++j) {
            if (std::abs(r(i, j)) > best_abs) {
                best_abs = std::abs(r(i, j));
                best = {i, j};
            }
        }
    }
    return best;
}

}  // namespace

CfaFit fit_one_factor_cfa(const CorrelationMatrix& corr, const CfaOptions& options) {
    corr.validate();
    const auto p = static_cast<Eigen::Index>(corr.size());
    if (p < 3) throw ValidationError("fit_one_factor_cfa: need at least 3 items");
    const Matrix& r = corr.values;

    CfaFit fit;
    fit.items = corr.labels;

    const auto [pi, pj] = largest_offdiagonal(r);
    const double det = r.determinant();
    if (std::abs(r(pi, pj)) >= 1.0 - 1e-9 || det < 1e-10) {
        fit.collinear_pair = std::make_pair(corr.labels[pi], corr.labels[pj]);
        fit.diagnosis = fmt::format(
            "multicollinearity: items '{}' and '{}' correlate {:.6f} (|R| = {:.3g}); the model cannot be identified",
            corr.labels[pi], corr.labels[pj], r(pi, pj), det);
        fit.fit_value = std::numeric_limits<double>::quiet_NaN();
        return fit;
    }

    // Squared multiple correlations as starting communalities.
    const Vector smc = (1.0 - 1.0 / r.inverse().diagonal().array()).matrix();
    Vector theta(2 * p);
    for (Eigen::Index j = 0; j < p; ++j) {
        const double h = std::clamp(smc(j), 0.05, 0.95);
        theta(j) = std::sqrt(h);
        theta(p + j) = std::log(std::max(1.0 - h - options.uniqueness_floor, 1e-6));
    }

    CfaState state{r, options.uniqueness_floor, p};
    double f = state.value(theta);
    Vector g = state.gradient(theta);
    Matrix h_inv = Matrix::Identity(2 * p, 2 * p);

    int iter = 0;
    for (; iter < options.max_iterations; ++iter) {
        if (g.lpNorm<Eigen::Infinity>() < options.gradient_tolerance) {
            fit.converged = true;
            break;
        }
        Vector dir = -h_inv * g;
        if (g.dot(dir) >= 0) {
            h_inv.setIdentity();
            dir = -g;
        }
        double step = 1.0;
        Vector next;
        double f_next = std::numeric_limits<double>::infinity();
        bool accepted = false;
        for (int k = 0; k < 60; ++k, step *= 0.5) {
            next = theta + step * dir;
            f_next = state.value(next);
            if (std::isfinite(f_next) && f_next <= f + 1e-4 * step * g.dot(dir)) {
                accepted = true;
                break;
            }
        }
        if (!accepted) {
            // No descent left at machine precision: a stationary point if the gradient is already tiny.
            fit.converged = g.lpNorm<Eigen::Infinity>() < 1e-5;
            break;
        }
        const Vector g_next = state.gradient(next);
        const Vector s = next - theta, y = g_next - g;
        const double sy = s.dot(y);
        if (sy > 1e-12) {
            const double rho = 1.0 / sy;
            const Matrix eye = Matrix::Identity(2 * p, 2 * p);
            h_inv = (eye - rho * s * y.transpose()) * h_inv * (eye - rho * y * s.transpose()) + rho * s * s.transpose();
        }
        theta = next;
        f = f_next;
        g = g_next;
    }
    fit.iterations = iter;
    fit.fit_value = f;
    if (!fit.converged) {
        fit.diagnosis = fmt::format("no convergence after {} iterations (max |gradient| {:.3g})", iter,
                                    g.lpNorm<Eigen::Infinity>());
    }

    Vector lambda = theta.head(p);
    const Vector psi = state.psi(theta);
    if (lambda.sum() < 0) lambda = -lambda;
    for (Eigen::Index j = 0; j < p; ++j) {
        const double var = lambda(j) * lambda(j) + psi(j);
        const auto& id = corr.labels[static_cast<std::size_t>(j)];
        fit.loadings[id] = lambda(j) / std::sqrt(var);
        fit.uniquenesses[id] = psi(j) / var;
        if (psi(j) < options.uniqueness_floor * (1.0 + 1e-3)) fit.heywood_flags.push_back(id);
    }
    return fit;
}

// ---------------------------------------------------------------- regression

double p_value_t(double t, int df) {
    if (df < 1) throw ValidationError("p_value_t: df must be >= 1");
    if (std::isnan(t)) return std::numeric_limits<double>::quiet_NaN();
    if (std::isinf(t)) return 0.0;
    const double d = static_cast<double>(df);
    return std::clamp(boost::math::ibeta(d / 2.0, 0.5, d / (d + t * t)), 0.0, 1.0);
}

RegressionFit ols_regress(const Vector& y, const Matrix& x, const std::vector<std::string>& names) {
    const auto n = x.rows();
    const auto p = x.cols();
    if (y.size() != n) throw ValidationError("ols_regress: y and X row counts differ");
    if (static_cast<std::size_t>(p) != names.size()) throw ValidationError("ols_regress: one name per predictor");
    if (n <= p + 1) throw ValidationError(fmt::format("ols_regress: N = {} must exceed p + 1 = {}", n, p + 1));
    if (!y.allFinite() || !x.allFinite()) throw ValidationError("ols_regress: non-finite input");

    Matrix design(n, p + 1);
    design.col(0).setOnes();
    design.rightCols(p) = x;
    std::vector<std::string> columns{"(intercept)"};
    columns.insert(columns.end(), names.begin(), names.end());

    Eigen::ColPivHouseholderQR<Matrix> qr(design);
    qr.setThreshold(1e-10);
    const auto rank = qr.rank();
    if (rank < p + 1) {
        const auto& perm = qr.colsPermutation().indices();
        std::set<std::string> involved;
        const Matrix basis = design(Eigen::all, perm.head(rank));
        for (Eigen::Index k = rank; k < p + 1; ++k) {
            const Vector coef = basis.colPivHouseholderQr().solve(Vector(design.col(perm(k))));
            involved.insert(columns[static_cast<std::size_t>(perm(k))]);
            for (Eigen::Index b = 0; b < rank; ++b) {
                if (std::abs(coef(b)) > 1e-8) involved.insert(columns[static_cast<std::size_t>(perm(b))]);
            }
        }
        throw ValidationError(fmt::format("ols_regress: rank deficient design ({} of {}); collinear columns: {}", rank,
                                          p + 1, fmt::join(involved, ", ")));
    }

    const Vector beta = qr.solve(y);
    RegressionFit fit;
    fit.predictors = names;
    fit.n = static_cast<int>(n);
    fit.df = static_cast<int>(n - p - 1);
    fit.residuals = y - design * beta;
    const double rss = fit.residuals.squaredNorm();
    const double tss = (y.array() - y.mean()).square().sum();
    if (tss == 0.0) throw ValidationError("ols_regress: response has zero variance");
    fit.r_squared = std::clamp(1.0 - rss / tss, 0.0, 1.0);

    // (X'X)^-1 = P R^-1 R^-T P'
    const Matrix rmat = qr.matrixR().topLeftCorner(p + 1, p + 1).triangularView<Eigen::Upper>();
    const Matrix r_inv = rmat.triangularView<Eigen::Upper>().solve(Matrix::Identity(p + 1, p + 1));
    const auto perm = qr.colsPermutation();
    const Matrix xtx_inv = perm * (r_inv * r_inv.transpose()) * perm.transpose();
    const double s2 = rss / fit.df;

    auto stat = [&](Eigen::Index k, double& se, double& t, double& pval) {
        se = std::sqrt(std::max(0.0, s2 * xtx_inv(k, k)));
        if (se > 0) t = beta(k) / se;
        else t = beta(k) == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), beta(k));
        pval = p_value_t(t, fit.df);
    };
    double t0 = 0, p0 = 0;
    fit.intercept = beta(0);
    stat(0, fit.intercept_se, t0, p0);
    for (Eigen::Index k = 1; k <= p; ++k) {
        const auto& name = names[static_cast<std::size_t>(k - 1)];
        fit.coefficients[name] = beta(k);
        stat(k, fit.std_errors[name], fit.t_stats[name], fit.p_values[name]);
    }
    return fit;
}

}  // namespace psychoforge

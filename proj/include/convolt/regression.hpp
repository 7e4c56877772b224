#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "convolt/error.hpp"

namespace convolt {

/// Row-major sample matrix: rows are observations.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/**
 * Per-feature centering and scaling learned on a training set. Features with
 * (numerically) zero spread are flagged constant: their scale is 1, their
 * standardized value is always 0 and models give them zero weight.
 */
struct Standardizer {
    std::vector<double> mean;
    std::vector<double> scale;
    std::vector<bool> constant;

    static Standardizer fit(const Matrix& X) {
        Standardizer s;
        const auto p = static_cast<std::size_t>(X.cols());
        const double n = static_cast<double>(X.rows());
        s.mean.resize(p);
        s.scale.resize(p);
        s.constant.resize(p);
        for (std::size_t c = 0; c < p; ++c) {
            const auto col = X.col(static_cast<Eigen::Index>(c));
            const double m = col.sum() / n;
            const double sd = std::sqrt((col.array() - m).square().sum() / n);
            s.mean[c] = m;
            s.constant[c] = !(sd > 1e-12 * std::max(1.0, std::abs(m)));
            s.scale[c] = s.constant[c] ? 1.0 : sd;
        }
        return s;
    }

    std::size_t size() const noexcept { return mean.size(); }

    double z(std::size_t c, double x) const noexcept { return constant[c] ? 0.0 : (x - mean[c]) / scale[c]; }

    Matrix transform(const Matrix& X) const {
        Matrix Z(X.rows(), X.cols());
        for (Eigen::Index r = 0; r < X.rows(); ++r)
            for (Eigen::Index c = 0; c < X.cols(); ++c) Z(r, c) = z(static_cast<std::size_t>(c), X(r, c));
        return Z;
    }
};

/// Linear model on standardized features: intercept + sum_c w_c * z_c(x).
struct LinearFit {
    std::vector<double> weights;
    double intercept = 0.0;

    double predict(const Standardizer& s, std::span<const double> x) const {
        if (x.size() != weights.size())
            throw ValidationError("predict: expected " + std::to_string(weights.size()) + " features, got " +
                                  std::to_string(x.size()));
        double v = intercept;
        for (std::size_t c = 0; c < weights.size(); ++c) v += weights[c] * s.z(c, x[c]);
        return v;
    }
};

/// Ridge regression with unpenalized intercept.
struct RidgeModel {
    std::vector<std::string> feature_names;
    Standardizer standardizer;
    LinearFit fit;
    double lambda = 0.0;

    double predict(std::span<const double> x) const { return fit.predict(standardizer, x); }
    const std::vector<double>& weights() const noexcept { return fit.weights; }
    double intercept() const noexcept { return fit.intercept; }
};

namespace detail {

inline void check_design(const Matrix& X, const Vector& y) {
    if (X.rows() < 2) throw ValidationError("regression needs at least 2 rows, got " + std::to_string(X.rows()));
    if (X.rows() != y.size())
        throw ValidationError("regression: " + std::to_string(X.rows()) + " rows but " + std::to_string(y.size()) +
                              " targets");
    if (!X.allFinite() || !y.allFinite()) throw ValidationError("regression: non-finite input");
}

inline std::vector<std::string> default_names(std::size_t p, std::vector<std::string> names) {
    if (names.empty())
        for (std::size_t c = 0; c < p; ++c) names.push_back("x" + std::to_string(c));
    if (names.size() != p) throw ValidationError("feature name count does not match column count");
    return names;
}

} // namespace detail

/**
 * Solves (Z'Z + lambda I) w = Z'(y - mean(y)) on standardized features Z with
 * intercept mean(y). Constant features are left out of the solve.
 */
inline RidgeModel fit_ridge(const Matrix& X, const Vector& y, double lambda, std::vector<std::string> names = {}) {
    detail::check_design(X, y);
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ValidationError("ridge penalty must be finite and >= 0");
    RidgeModel model;
    model.feature_names = detail::default_names(static_cast<std::size_t>(X.cols()), std::move(names));
    model.lambda = lambda;
    model.standardizer = Standardizer::fit(X);
    const auto& st = model.standardizer;

    std::vector<Eigen::Index> active;
    for (std::size_t c = 0; c < st.size(); ++c)
        if (!st.constant[c]) active.push_back(static_cast<Eigen::Index>(c));

    const double ybar = y.mean();
    model.fit.intercept = ybar;
    model.fit.weights.assign(st.size(), 0.0);
    if (active.empty()) return model;

    const Matrix Zall = st.transform(X);
    Matrix Z(X.rows(), static_cast<Eigen::Index>(active.size()));
    for (std::size_t a = 0; a < active.size(); ++a) Z.col(static_cast<Eigen::Index>(a)) = Zall.col(active[a]);
    const Vector yc = y.array() - ybar;
    Eigen::MatrixXd A = Z.transpose() * Z;
    A.diagonal().array() += lambda;
    const Vector b = Z.transpose() * yc;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
    if (ldlt.info() != Eigen::Success || !(ldlt.rcond() > 1e-13)) {
        throw ValidationError("ridge system is singular (collinear features); use a penalty lambda > 0");
    }
    const Vector w = ldlt.solve(b);
    if (!w.allFinite()) throw ValidationError("ridge solve produced non-finite weights; use a penalty lambda > 0");
    for (std::size_t a = 0; a < active.size(); ++a) model.fit.weights[static_cast<std::size_t>(active[a])] = w(a);
    return model;
}

inline double predict_ridge(const RidgeModel& model, std::span<const double> x) { return model.predict(x); }

/// Penalized residual sum of squares of a ridge model on its training data.
inline double ridge_objective(const RidgeModel& model, const Matrix& X, const Vector& y) {
    double rss = 0.0;
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
        std::vector<double> row(X.row(r).data(), X.row(r).data() + X.cols());
        const double e = y(r) - model.predict(row);
        rss += e * e;
    }
    double pen = 0.0;
    for (double w : model.fit.weights) pen += w * w;
    return rss + model.lambda * pen;
}

inline double pinball(double residual, double tau) noexcept {
    return residual >= 0.0 ? tau * residual : (tau - 1.0) * residual;
}

struct QuantileSolverOptions {
    int iterations = 5000;
    double step_scale = 0.1;       // eta0 = step_scale * std(y)
    double averaged_fraction = 0.2; // trailing share of iterates averaged
};

/**
 * Linear tau-quantile regression: minimizes sum_i pinball(y_i - f(x_i)) +
 * lambda*|w|^2 by full-batch subgradient descent with step eta0/sqrt(t) and
 * averaging over the trailing iterates. Deterministic.
 */
inline LinearFit fit_quantile_standardized(const Matrix& Z, const std::vector<bool>& constant, const Vector& y,
                                           double tau, double lambda, const QuantileSolverOptions& opt = {}) {
    const auto n = Z.rows();
    const auto p = Z.cols();
    const double nd = static_cast<double>(n);
    const double ybar = y.mean();
    const double ysd = std::sqrt((y.array() - ybar).square().sum() / nd);
    const double eta0 = opt.step_scale * ysd;
    const int T = std::max(1, opt.iterations);
    const int start_avg = T - std::max(1, static_cast<int>(opt.averaged_fraction * T)) + 1;

    Vector w = Vector::Zero(p);
    double b = ybar;
    Vector w_sum = Vector::Zero(p);
    double b_sum = 0.0;
    int averaged = 0;
    Vector g(n);
    for (int t = 1; t <= T; ++t) {
        const Vector r = y - Z * w - Vector::Constant(n, b);
        for (Eigen::Index i = 0; i < n; ++i) g(i) = r(i) > 0.0 ? -tau : (r(i) < 0.0 ? 1.0 - tau : 0.0);
        const double grad_b = g.sum() / nd;
        Vector grad_w = (Z.transpose() * g) / nd + (2.0 * lambda / nd) * w;
        for (Eigen::Index c = 0; c < p; ++c)
            if (constant[static_cast<std::size_t>(c)]) grad_w(c) = 0.0;
        const double eta = eta0 / std::sqrt(static_cast<double>(t));
        w -= eta * grad_w;
        b -= eta * grad_b;
        if (t >= start_avg) {
            w_sum += w;
            b_sum += b;
            ++averaged;
        }
    }
    LinearFit fit;
    fit.weights.assign(static_cast<std::size_t>(p), 0.0);
    for (Eigen::Index c = 0; c < p; ++c) fit.weights[static_cast<std::size_t>(c)] = w_sum(c) / averaged;
    fit.intercept = b_sum / averaged;
    return fit;
}

/// One quantile level with its own standardizer.
struct QuantileFit {
    Standardizer standardizer;
    LinearFit fit;
    double tau = 0.5;

    double predict(std::span<const double> x) const { return fit.predict(standardizer, x); }
};

inline QuantileFit fit_quantile(const Matrix& X, const Vector& y, double tau, double lambda = 0.01,
                                const QuantileSolverOptions& opt = {}) {
    detail::check_design(X, y);
    if (!(tau > 0.0 && tau < 1.0)) throw ValidationError("quantile level must lie in (0, 1)");
    if (!(lambda >= 0.0)) throw ValidationError("quantile penalty must be >= 0");
    QuantileFit q;
    q.tau = tau;
    q.standardizer = Standardizer::fit(X);
    q.fit = fit_quantile_standardized(q.standardizer.transform(X), q.standardizer.constant, y, tau, lambda, opt);
    return q;
}

/// Lower/upper conditional quantile pair for CQR.
struct QuantileModel {
    std::vector<std::string> feature_names;
    Standardizer standardizer;
    LinearFit lower;
    LinearFit upper;
    double tau_lo = 0.05;
    double tau_hi = 0.95;
    double lambda = 0.01;

    struct Band {
        double lo;
        double hi;
        bool crossed; // predictions came out as hi < lo and were swapped
    };

    Band predict(std::span<const double> x) const {
        double lo = lower.predict(standardizer, x);
        double hi = upper.predict(standardizer, x);
        const bool crossed = lo > hi;
        if (crossed) std::swap(lo, hi);
        return {lo, hi, crossed};
    }
};

inline QuantileModel fit_quantile_pair(const Matrix& X, const Vector& y, double tau_lo, double tau_hi,
                                       double lambda = 0.01, std::vector<std::string> names = {},
                                       const QuantileSolverOptions& opt = {}) {
    detail::check_design(X, y);
    if (!(tau_lo > 0.0 && tau_lo < tau_hi && tau_hi < 1.0))
        throw ValidationError("quantile levels must satisfy 0 < tau_lo < tau_hi < 1");
    QuantileModel m;
    m.feature_names = detail::default_names(static_cast<std::size_t>(X.cols()), std::move(names));
    m.standardizer = Standardizer::fit(X);
    m.tau_lo = tau_lo;
    m.tau_hi = tau_hi;
    m.lambda = lambda;
    const Matrix Z = m.standardizer.transform(X);
    m.lower = fit_quantile_standardized(Z, m.standardizer.constant, y, tau_lo, lambda, opt);
    m.upper = fit_quantile_standardized(Z, m.standardizer.constant, y, tau_hi, lambda, opt);
    return m;
}

// ---- serialization --------------------------------------------------------

namespace detail {

using json = nlohmann::ordered_json;

inline json standardizer_json(const Standardizer& s) {
    json j;
    j["mean"] = s.mean;
    j["scale"] = s.scale;
    j["constant"] = s.constant;
    return j;
}

inline Standardizer standardizer_from(const json& j, std::size_t p) {
    Standardizer s;
    s.mean = j.at("mean").get<std::vector<double>>();
    s.scale = j.at("scale").get<std::vector<double>>();
    s.constant = j.at("constant").get<std::vector<bool>>();
    if (s.mean.size() != p || s.scale.size() != p || s.constant.size() != p)
        throw ValidationError("model standardizer length does not match feature list");
    return s;
}

inline void check_names(const std::vector<std::string>& got, const std::vector<std::string>& expected) {
    if (!expected.empty() && got != expected)
        throw ValidationError("model feature names do not match the expected feature ordering");
}

inline json linear_json(const LinearFit& f) {
    json j;
    j["weights"] = f.weights;
    j["intercept"] = f.intercept;
    return j;
}

inline LinearFit linear_from(const json& j, std::size_t p) {
    LinearFit f;
    f.weights = j.at("weights").get<std::vector<double>>();
    f.intercept = j.at("intercept").get<double>();
    if (f.weights.size() != p) throw ValidationError("model weight length does not match feature list");
    return f;
}

} // namespace detail

inline nlohmann::ordered_json to_json(const RidgeModel& m) {
    nlohmann::ordered_json j;
    j["kind"] = "ridge";
    j["feature_names"] = m.feature_names;
    j["lambda"] = m.lambda;
    j["standardizer"] = detail::standardizer_json(m.standardizer);
    j["fit"] = detail::linear_json(m.fit);
    return j;
}

inline RidgeModel ridge_from_json(const nlohmann::ordered_json& j, const std::vector<std::string>& expected = {}) {
    try {
        if (j.at("kind") != "ridge") throw ValidationError("model kind is not ridge");
        RidgeModel m;
        m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
        detail::check_names(m.feature_names, expected);
        m.lambda = j.at("lambda").get<double>();
        m.standardizer = detail::standardizer_from(j.at("standardizer"), m.feature_names.size());
        m.fit = detail::linear_from(j.at("fit"), m.feature_names.size());
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed ridge model: ") + e.what());
    }
}

inline nlohmann::ordered_json to_json(const QuantileModel& m) {
    nlohmann::ordered_json j;
    j["kind"] = "quantile_pair";
    j["feature_names"] = m.feature_names;
    j["lambda"] = m.lambda;
    j["tau_lo"] = m.tau_lo;
    j["tau_hi"] = m.tau_hi;
    j["standardizer"] = detail::standardizer_json(m.standardizer);
    j["lower"] = detail::linear_json(m.lower);
    j["upper"] = detail::linear_json(m.upper);
    return j;
}

inline QuantileModel quantile_from_json(const nlohmann::ordered_json& j,
                                        const std::vector<std::string>& expected = {}) {
    try {
        if (j.at("kind") != "quantile_pair") throw ValidationError("model kind is not quantile_pair");
        QuantileModel m;
        m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
        detail::check_names(m.feature_names, expected);
        const auto p = m.feature_names.size();
        m.lambda = j.at("lambda").get<double>();
        m.tau_lo = j.at("tau_lo").get<double>();
        m.tau_hi = j.at("tau_hi").get<double>();
        if (!(m.tau_lo > 0.0 && m.tau_lo < m.tau_hi && m.tau_hi < 1.0))
            throw ValidationError("quantile levels must satisfy 0 < tau_lo < tau_hi < 1");
        m.standardizer = detail::standardizer_from(j.at("standardizer"), p);
        m.lower = detail::linear_from(j.at("lower"), p);
        m.upper = detail::linear_from(j.at("upper"), p);
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed quantile model: ") + e.what());
    }
}

} // namespace convolt

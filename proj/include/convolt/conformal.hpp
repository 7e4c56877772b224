#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "convolt/error.hpp"
#include "convolt/records.hpp"
#include "convolt/regression.hpp"
#include "convolt/stats.hpp"

namespace convolt {

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

// ---- split-conformal quantile --------------------------------------------

inline void check_alpha(double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("miscoverage level alpha must lie in (0, 1)");
}

/// Rank ceil((1 - alpha)(n + 1)) of the split-conformal quantile.
inline long conformal_rank(std::size_t n, double alpha) {
    return stats::ceil_rank((1.0 - alpha) * static_cast<double>(n + 1));
}

/**
 * k-th smallest score with k = ceil((1 - alpha)(n + 1)); +infinity when
 * k > n (too few calibration points for the requested level).
 */
inline double conformal_quantile(std::span<const double> scores, double alpha) {
    check_alpha(alpha);
    if (scores.empty()) throw ValidationError("conformal_quantile: empty score list");
    for (double s : scores)
        if (!std::isfinite(s)) throw ValidationError("conformal_quantile: non-finite score");
    const long k = conformal_rank(scores.size(), alpha);
    if (k > static_cast<long>(scores.size())) return kInfinity;
    std::vector<double> v(scores.begin(), scores.end());
    const auto kth = v.begin() + std::max(0L, k - 1);
    std::nth_element(v.begin(), kth, v.end());
    return *kth;
}

// ---- case-level aggregation ----------------------------------------------

struct Aggregator {
    enum class Kind { Max, Quantile };
    Kind kind = Kind::Max;
    double level = 0.9; // Quantile only

    static Aggregator max() { return {Kind::Max, 1.0}; }
    static Aggregator quantile(double level) {
        if (!(level > 0.0 && level <= 1.0)) throw ValidationError("aggregation quantile level must lie in (0, 1]");
        return {Kind::Quantile, level};
    }

    std::string name() const {
        if (kind == Kind::Max) return "max";
        return "q" + csv::format_double(level);
    }

    static Aggregator parse(const std::string& s) {
        if (s == "max") return max();
        if (s.size() > 1 && s[0] == 'q') return quantile(csv::parse_double(s.substr(1), "aggregator"));
        throw ValidationError("unknown aggregator '" + s + "' (expected max or q<level>, e.g. q0.9)");
    }
};

/// Max, or the ceil(level * L)-th smallest label score.
inline double aggregate_scores(std::span<const double> label_scores, const Aggregator& agg) {
    if (label_scores.empty()) throw ValidationError("aggregate_scores: no label scores");
    if (agg.kind == Aggregator::Kind::Max) return *std::max_element(label_scores.begin(), label_scores.end());
    const long L = static_cast<long>(label_scores.size());
    const long k = std::clamp(stats::ceil_rank(agg.level * static_cast<double>(L)), 1L, L);
    std::vector<double> v(label_scores.begin(), label_scores.end());
    std::nth_element(v.begin(), v.begin() + (k - 1), v.end());
    return v[static_cast<std::size_t>(k - 1)];
}

// ---- intervals and scores -------------------------------------------------

struct PredictionInterval {
    double lo = 0.0;
    double hi = 0.0;

    bool infinite() const noexcept { return std::isinf(lo) || std::isinf(hi); }
    double width() const noexcept { return hi - lo; }
    bool contains(double y) const noexcept { return lo <= y && y <= hi; }
};

inline double score_scp(const CaseRecord& r) {
    if (!r.y_true) throw ValidationError("targets required for calibration");
    return std::abs(*r.y_true - r.y_hat0);
}

inline PredictionInterval interval_scp(double y_hat0, double q_hat) {
    if (std::isinf(q_hat)) return {-kInfinity, kInfinity};
    return {y_hat0 - q_hat, y_hat0 + q_hat};
}

inline double score_convolt(const CaseRecord& r, const RidgeModel& ridge) {
    return std::abs(r.oracle_ratio() - ridge.predict(r.features.values));
}

/// [(beta - q) * y_hat0, (beta + q) * y_hat0] with beta = ridge(x).
inline PredictionInterval interval_convolt(std::span<const double> x, double y_hat0, const RidgeModel& ridge,
                                           double q_hat) {
    if (!(y_hat0 > 0.0)) throw ValidationError("ConVOLT needs a positive baseline volume");
    if (std::isinf(q_hat)) return {-kInfinity, kInfinity};
    const double beta = ridge.predict(x);
    return {(beta - q_hat) * y_hat0, (beta + q_hat) * y_hat0};
}

/// CQR conditions on the deformation-derived volume alone.
inline std::vector<double> cqr_covariates(const CaseRecord& r) { return {r.y_hat0}; }

inline double score_cqr(const CaseRecord& r, const QuantileModel& qm) {
    if (!r.y_true) throw ValidationError("targets required for calibration");
    const auto band = qm.predict(cqr_covariates(r));
    return std::max(band.lo - *r.y_true, *r.y_true - band.hi);
}

inline PredictionInterval interval_cqr(std::span<const double> x, const QuantileModel& qm, double q_hat) {
    if (std::isinf(q_hat)) return {-kInfinity, kInfinity};
    const auto band = qm.predict(x);
    return {band.lo - q_hat, band.hi + q_hat};
}

/// Indices of the k calibration records closest to `test` in |y_hat0|; ties
/// go to the smaller (case_id, label_id).
inline std::vector<std::size_t> lcp_neighbors(const CaseRecord& test, const std::vector<CaseRecord>& cal,
                                              std::size_t k) {
    if (cal.size() < k)
        throw ValidationError("LCP needs at least k = " + std::to_string(k) + " calibration records, got " +
                              std::to_string(cal.size()) + "; lower k");
    std::vector<std::size_t> idx(cal.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const double t = std::abs(test.y_hat0);
    const auto key = [&](std::size_t i) {
        return std::make_tuple(std::abs(std::abs(cal[i].y_hat0) - t), std::cref(cal[i].case_id), cal[i].label_id);
    };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<long>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
    idx.resize(k);
    return idx;
}

/// Local conformal quantile of absolute residuals over the k nearest records.
inline double lcp_local_quantile(const CaseRecord& test, const std::vector<CaseRecord>& cal, std::size_t k,
                                 double alpha) {
    if (k < 1) throw ValidationError("LCP neighbour count k must be >= 1");
    const auto nb = lcp_neighbors(test, cal, k);
    std::vector<double> res;
    res.reserve(k);
    for (auto i : nb) res.push_back(score_scp(cal[i]));
    return conformal_quantile(res, alpha);
}

inline PredictionInterval interval_lcp(const CaseRecord& test, const std::vector<CaseRecord>& cal, std::size_t k,
                                       double alpha) {
    return interval_scp(test.y_hat0, lcp_local_quantile(test, cal, k, alpha));
}

// ---- methods --------------------------------------------------------------

/// Output-space baselines, ConVOLT, and its ablation variants. Oracle is the
/// ConVOLT regression fitted on every available case (the harness passes the
/// whole dataset), a reference lower bound rather than a deployable method.
enum class Method { SCP, CQR, LCP, ConVOLT, Additive, NoLearning, NoFeatures, GlobalFeatures, Oracle };

inline const char* method_name(Method m) {
    switch (m) {
    case Method::SCP: return "SCP";
    case Method::CQR: return "CQR";
    case Method::LCP: return "LCP";
    case Method::ConVOLT: return "ConVOLT";
    case Method::Additive: return "Additive";
    case Method::NoLearning: return "NoLearning";
    case Method::NoFeatures: return "NoFeatures";
    case Method::GlobalFeatures: return "GlobalFeatures";
    case Method::Oracle: return "Oracle";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    for (auto m : {Method::SCP, Method::CQR, Method::LCP, Method::ConVOLT, Method::Additive, Method::NoLearning,
                   Method::NoFeatures, Method::GlobalFeatures, Method::Oracle}) {
        std::string a = method_name(m), b = s;
        std::transform(a.begin(), a.end(), a.begin(), ::tolower);
        std::transform(b.begin(), b.end(), b.begin(), ::tolower);
        b.erase(std::remove_if(b.begin(), b.end(), [](char c) { return c == '-' || c == '_'; }), b.end());
        if (a == b) return m;
    }
    throw ValidationError("unknown method '" + s + "'");
}

/// Methods whose score is |y / y_hat0 - beta(x)|.
inline bool is_ratio_method(Method m) {
    return m == Method::ConVOLT || m == Method::NoLearning || m == Method::NoFeatures ||
           m == Method::GlobalFeatures || m == Method::Oracle;
}

struct CalibrationOptions {
    double ridge_lambda = 1.0;
    double cqr_lambda = 0.01;
    QuantileSolverOptions cqr_solver{};
    int lcp_k = 50;
    bool clamp_at_zero = false;
    std::optional<Aggregator> aggregator; // case-level calibration when set
};

/// Regression stage of a method, fitted on the training split only.
struct FittedModel {
    Method method = Method::SCP;
    std::optional<RidgeModel> ridge;       // ConVOLT, GlobalFeatures, Additive, Oracle
    std::optional<QuantileModel> quantile; // CQR
    double beta_const = 1.0;               // NoLearning, NoFeatures

    std::vector<double> model_input(const CaseRecord& r) const {
        switch (method) {
        case Method::GlobalFeatures:
            if (!r.global_features)
                throw ValidationError("GlobalFeatures needs whole-mask features on record " + r.case_id);
            return {r.global_features->values.begin(), r.global_features->values.end()};
        case Method::CQR: return cqr_covariates(r);
        default: return {r.features.values.begin(), r.features.values.end()};
        }
    }

    /// Predicted ratio for ratio-space methods.
    double beta(const CaseRecord& r) const {
        if (ridge) return ridge->predict(model_input(r));
        return beta_const;
    }
};

namespace detail {

inline void require_targets(const std::vector<CaseRecord>& rs) {
    for (const auto& r : rs)
        if (!r.y_true) throw ValidationError("targets required for calibration");
}

inline Matrix design(const FittedModel& proto, const std::vector<CaseRecord>& rs) {
    if (rs.empty()) throw ValidationError("training split is empty");
    const auto p = proto.model_input(rs.front()).size();
    Matrix X(static_cast<Eigen::Index>(rs.size()), static_cast<Eigen::Index>(p));
    for (std::size_t i = 0; i < rs.size(); ++i) {
        const auto row = proto.model_input(rs[i]);
        for (std::size_t c = 0; c < p; ++c) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = row[c];
    }
    return X;
}

inline std::vector<std::string> feature_name_list() { return {kFeatureNames.begin(), kFeatureNames.end()}; }

} // namespace detail

/// Fits the regression stage of `method` on `train`.
inline FittedModel fit_method(Method method, const std::vector<CaseRecord>& train, double alpha,
                              const CalibrationOptions& opt = {}) {
    check_alpha(alpha);
    FittedModel fm;
    fm.method = method;
    switch (method) {
    case Method::SCP:
    case Method::LCP:
    case Method::NoLearning: return fm;
    default: break;
    }
    detail::require_targets(train);
    const auto n = static_cast<Eigen::Index>(train.size());
    Vector y(n);
    switch (method) {
    case Method::NoFeatures: {
        if (train.empty()) throw ValidationError("training split is empty");
        double s = 0.0;
        for (const auto& r : train) s += r.oracle_ratio();
        fm.beta_const = s / static_cast<double>(train.size());
        return fm;
    }
    case Method::ConVOLT:
    case Method::GlobalFeatures:
    case Method::Oracle: {
        for (Eigen::Index i = 0; i < n; ++i) y(i) = train[static_cast<std::size_t>(i)].oracle_ratio();
        fm.ridge = fit_ridge(detail::design(fm, train), y, opt.ridge_lambda, detail::feature_name_list());
        return fm;
    }
    case Method::Additive: {
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto& r = train[static_cast<std::size_t>(i)];
            y(i) = *r.y_true - r.y_hat0;
        }
        fm.ridge = fit_ridge(detail::design(fm, train), y, opt.ridge_lambda, detail::feature_name_list());
        return fm;
    }
    case Method::CQR: {
        for (Eigen::Index i = 0; i < n; ++i) y(i) = *train[static_cast<std::size_t>(i)].y_true;
        fm.quantile = fit_quantile_pair(detail::design(fm, train), y, alpha / 2.0, 1.0 - alpha / 2.0, opt.cqr_lambda,
                                        {"y_hat0"}, opt.cqr_solver);
        return fm;
    }
    default: break;
    }
    throw ValidationError("fit_method: unsupported method");
}

/**
 * A fitted method plus its conformal quantile. LCP keeps the calibration
 * records and computes its quantile per test point instead.
 */
struct CalibratedPredictor {
    FittedModel model;
    double alpha = 0.1;
    std::optional<double> q_hat;
    std::optional<Aggregator> aggregator;
    bool clamp_at_zero = false;
    int lcp_k = 50;
    std::vector<CaseRecord> lcp_calibration;

    Method method() const noexcept { return model.method; }

    /// Nonconformity score of a labelled record.
    double score(const CaseRecord& r) const {
        switch (model.method) {
        case Method::SCP:
        case Method::LCP: return score_scp(r);
        case Method::CQR: return score_cqr(r, *model.quantile);
        case Method::Additive: {
            if (!r.y_true) throw ValidationError("targets required for calibration");
            return std::abs((*r.y_true - r.y_hat0) - model.ridge->predict(model.model_input(r)));
        }
        default: return std::abs(r.oracle_ratio() - model.beta(r));
        }
    }

    /// Conformal quantile used for `r` (local for LCP).
    double quantile_for(const CaseRecord& r) const {
        if (model.method == Method::LCP)
            return lcp_local_quantile(r, lcp_calibration, static_cast<std::size_t>(lcp_k), alpha);
        return *q_hat;
    }

    PredictionInterval predict(const CaseRecord& r) const {
        const double q = quantile_for(r);
        PredictionInterval iv;
        switch (model.method) {
        case Method::SCP:
        case Method::LCP: iv = interval_scp(r.y_hat0, q); break;
        case Method::CQR: iv = interval_cqr(cqr_covariates(r), *model.quantile, q); break;
        case Method::Additive: {
            const double center = r.y_hat0 + model.ridge->predict(model.model_input(r));
            iv = std::isinf(q) ? PredictionInterval{-kInfinity, kInfinity}
                               : PredictionInterval{center - q, center + q};
            break;
        }
        default: {
            if (!(r.y_hat0 > 0.0)) throw ValidationError("ConVOLT needs a positive baseline volume");
            const double beta = model.beta(r);
            iv = std::isinf(q) ? PredictionInterval{-kInfinity, kInfinity}
                               : PredictionInterval{(beta - q) * r.y_hat0, (beta + q) * r.y_hat0};
        }
        }
        if (clamp_at_zero) {
            iv.lo = std::max(iv.lo, 0.0);
            iv.hi = std::max(iv.hi, iv.lo);
        }
        return iv;
    }

    /// True when the CQR quantile pair crossed at `r` and was swapped.
    bool crossed(const CaseRecord& r) const {
        return model.method == Method::CQR && model.quantile->predict(cqr_covariates(r)).crossed;
    }
};

/// Scores grouped per case (keyed by case_id) and aggregated.
inline std::vector<double> case_scores(const std::vector<double>& scores, const std::vector<CaseRecord>& records,
                                       const Aggregator& agg) {
    std::map<std::string, std::vector<double>> by_case;
    for (std::size_t i = 0; i < records.size(); ++i) by_case[records[i].case_id].push_back(scores[i]);
    std::vector<double> out;
    out.reserve(by_case.size());
    for (const auto& [id, s] : by_case) out.push_back(aggregate_scores(s, agg));
    return out;
}

/// Computes the conformal quantile of a fitted method on `cal`.
inline CalibratedPredictor conformalize(FittedModel model, const std::vector<CaseRecord>& cal, double alpha,
                                        const CalibrationOptions& opt = {}) {
    check_alpha(alpha);
    if (cal.empty()) throw ValidationError("calibration split is empty");
    detail::require_targets(cal);
    CalibratedPredictor p;
    p.model = std::move(model);
    p.alpha = alpha;
    p.aggregator = opt.aggregator;
    p.clamp_at_zero = opt.clamp_at_zero;
    p.lcp_k = opt.lcp_k;
    if (p.model.method == Method::LCP) {
        if (opt.aggregator) throw ValidationError("LCP is a per-record method and does not support case aggregation");
        if (opt.lcp_k < 1) throw ValidationError("LCP neighbour count k must be >= 1");
        if (cal.size() < static_cast<std::size_t>(opt.lcp_k))
            throw ValidationError("LCP needs at least k = " + std::to_string(opt.lcp_k) +
                                  " calibration records, got " + std::to_string(cal.size()) + "; lower k");
        p.lcp_calibration = cal;
        return p;
    }
    std::vector<double> scores;
    scores.reserve(cal.size());
    for (const auto& r : cal) scores.push_back(p.score(r));
    if (opt.aggregator) scores = case_scores(scores, cal, *opt.aggregator);
    p.q_hat = conformal_quantile(scores, alpha);
    return p;
}

/// Throws when a case id appears in both splits.
inline void check_disjoint_cases(const std::vector<CaseRecord>& train, const std::vector<CaseRecord>& cal) {
    std::set<std::string> ids;
    for (const auto& r : train) ids.insert(r.case_id);
    for (const auto& r : cal)
        if (ids.count(r.case_id))
            throw ValidationError("case " + r.case_id + " appears in both training and calibration splits");
}

/// Fits on `train`, calibrates on `cal`.
inline CalibratedPredictor calibrate(Method method, const std::vector<CaseRecord>& train,
                                     const std::vector<CaseRecord>& cal, double alpha,
                                     const CalibrationOptions& opt = {}) {
    check_disjoint_cases(train, cal);
    detail::require_targets(cal);
    return conformalize(fit_method(method, train, alpha, opt), cal, alpha, opt);
}

// ---- model.json -----------------------------------------------------------

inline nlohmann::ordered_json to_json(const CalibratedPredictor& p) {
    nlohmann::ordered_json j;
    j["format"] = "convolt-predictor";
    j["version"] = 1;
    j["method"] = method_name(p.model.method);
    j["alpha"] = p.alpha;
    if (p.q_hat) {
        if (std::isinf(*p.q_hat)) j["q_hat"] = "inf";
        else j["q_hat"] = *p.q_hat;
    } else {
        j["q_hat"] = nullptr;
    }
    j["aggregator"] = p.aggregator ? nlohmann::ordered_json(p.aggregator->name()) : nlohmann::ordered_json(nullptr);
    j["clamp_at_zero"] = p.clamp_at_zero;
    j["beta_const"] = p.model.beta_const;
    if (p.model.ridge) j["ridge"] = to_json(*p.model.ridge);
    if (p.model.quantile) j["quantile"] = to_json(*p.model.quantile);
    if (p.model.method == Method::LCP) {
        j["lcp_k"] = p.lcp_k;
        auto& cal = j["lcp_calibration"] = nlohmann::ordered_json::array();
        for (const auto& r : p.lcp_calibration) cal.push_back({r.case_id, r.label_id, r.y_hat0, *r.y_true});
    }
    return j;
}

inline CalibratedPredictor predictor_from_json(const nlohmann::ordered_json& j) {
    try {
        if (j.at("format") != "convolt-predictor") throw ValidationError("not a predictor file");
        if (j.at("version") != 1) throw ValidationError("unsupported predictor version");
        CalibratedPredictor p;
        p.model.method = parse_method(j.at("method").get<std::string>());
        p.alpha = j.at("alpha").get<double>();
        check_alpha(p.alpha);
        const auto& q = j.at("q_hat");
        if (q.is_string() && q == "inf") p.q_hat = kInfinity;
        else if (q.is_number()) p.q_hat = q.get<double>();
        if (!j.at("aggregator").is_null()) p.aggregator = Aggregator::parse(j.at("aggregator").get<std::string>());
        p.clamp_at_zero = j.at("clamp_at_zero").get<bool>();
        p.model.beta_const = j.at("beta_const").get<double>();
        const auto names = detail::feature_name_list();
        if (j.contains("ridge"))
            p.model.ridge = ridge_from_json(j["ridge"], names);
        if (j.contains("quantile")) p.model.quantile = quantile_from_json(j["quantile"], {"y_hat0"});
        if (p.model.method == Method::LCP) {
            p.lcp_k = j.at("lcp_k").get<int>();
            for (const auto& row : j.at("lcp_calibration")) {
                CaseRecord r;
                r.case_id = row.at(0).get<std::string>();
                r.label_id = row.at(1).get<LabelId>();
                r.y_hat0 = row.at(2).get<double>();
                r.y_true = row.at(3).get<double>();
                p.lcp_calibration.push_back(std::move(r));
            }
        } else if (!p.q_hat) {
            throw ValidationError("predictor is missing q_hat");
        }
        const bool needs_ridge = p.model.method == Method::ConVOLT || p.model.method == Method::GlobalFeatures ||
                                 p.model.method == Method::Additive || p.model.method == Method::Oracle;
        if (needs_ridge && !p.model.ridge) throw ValidationError("predictor is missing its ridge model");
        if (p.model.method == Method::CQR && !p.model.quantile)
            throw ValidationError("predictor is missing its quantile model");
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed predictor: ") + e.what());
    }
}

// ---- intervals.csv --------------------------------------------------------

inline constexpr const char* kIntervalsHeader = "case_id,label_id,method,y_hat0_ml,lo_ml,hi_ml,width_ml,covered,q_hat";

inline void write_intervals_csv(const std::filesystem::path& path, const CalibratedPredictor& p,
                                const std::vector<CaseRecord>& records) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << kIntervalsHeader << '\n';
    for (const auto& r : records) {
        const auto iv = p.predict(r);
        os << r.case_id << ',' << r.label_id << ',' << method_name(p.method()) << ','
           << csv::format_double(r.y_hat0) << ',' << csv::format_double(iv.lo) << ',' << csv::format_double(iv.hi)
           << ',' << csv::format_double(iv.width()) << ',';
        if (r.y_true) os << (iv.contains(*r.y_true) ? 1 : 0);
        os << ',' << csv::format_double(p.quantile_for(r)) << '\n';
    }
    if (!os) throw IoError("write failed: " + path.string());
}

} // namespace convolt

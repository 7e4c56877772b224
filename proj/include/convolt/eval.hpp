#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "convolt/conformal.hpp"
#include "convolt/error.hpp"
#include "convolt/parallel.hpp"
#include "convolt/pipeline.hpp"
#include "convolt/records.hpp"
#include "convolt/rng.hpp"
#include "convolt/stats.hpp"

namespace convolt::eval {

struct ExperimentConfig {
    double alpha = 0.1;
    int repeats = 100;
    double train_fraction = 0.4;
    double cal_fraction = 0.4;
    double test_fraction = 0.2;
    std::vector<Method> methods{Method::SCP, Method::CQR, Method::LCP, Method::ConVOLT};
    // Case-level aggregators (shells mode); empty = per-record calibration.
    std::vector<Aggregator> aggregators;
    LabelMode label_mode = LabelMode::Global;
    std::uint64_t seed = 1;
    bool retrain = false; // redraw the training split every repeat
    CalibrationOptions calibration;
    unsigned jobs = 1;

    void validate() const {
        check_alpha(alpha);
        if (repeats < 1) throw ValidationError("repeats must be >= 1");
        if (!(train_fraction > 0 && cal_fraction > 0 && test_fraction > 0))
            throw ValidationError("split fractions must be positive");
        if (train_fraction + cal_fraction + test_fraction > 1.0 + 1e-9)
            throw ValidationError("split fractions must sum to at most 1");
        if (methods.empty()) throw ValidationError("no methods selected");
        for (auto m : methods)
            if (m == Method::GlobalFeatures && label_mode != LabelMode::Shells)
                throw ValidationError("the GlobalFeatures variant needs shells label mode");
        if (!aggregators.empty() && label_mode != LabelMode::Shells)
            throw ValidationError("case-level aggregation needs shells label mode");
    }
};

struct RepeatRow {
    int repeat = 0;
    double coverage = 0.0;
    double width = 0.0;  // mean interval width, mL
    double q_hat = 0.0;  // LCP: mean local quantile
    int crossed = 0;     // CQR test points whose quantile pair was swapped
    int infinite = 0;    // test intervals with q_hat = +inf
    std::size_t n_cal = 0;
    std::size_t n_test = 0;
    std::optional<double> inflation; // % vs ConVOLT on the same split
};

struct Summary {
    Method method = Method::ConVOLT;
    std::string aggregation = "none";
    std::string label = "all";
    std::vector<RepeatRow> rows;

    double coverage_mean = 0, coverage_std = 0;
    double width_mean = 0, width_std = 0;
    std::optional<double> inflation_mean, inflation_std;
    double q_hat_min = 0, q_hat_median = 0, q_hat_max = 0;
    int crossed = 0;
    int infinite = 0;
};

/// |standardized ridge weight| statistics of one feature.
struct CoefficientRow {
    std::string label;
    std::string feature;
    double mean = 0.0;
    double std = 0.0;
};

struct Report {
    ExperimentConfig config;
    std::size_t cases = 0;
    std::size_t records = 0;
    std::vector<Summary> summaries;
    // Standardized ConVOLT weights, [label unit][repeat], when ConVOLT ran.
    std::map<std::string, std::vector<std::vector<double>>> convolt_weights;

    const Summary& find(Method m, const std::string& agg = "none", const std::string& label = "all") const {
        for (const auto& s : summaries)
            if (s.method == m && s.aggregation == agg && s.label == label) return s;
        throw ValidationError(std::string("report has no row for ") + method_name(m) + "/" + agg + "/" + label);
    }
};

namespace detail {

struct Split {
    std::vector<std::string> train, cal, test;
};

inline std::vector<std::string> case_ids(const std::vector<CaseRecord>& records) {
    std::set<std::string> ids;
    for (const auto& r : records) ids.insert(r.case_id);
    return {ids.begin(), ids.end()};
}

inline std::size_t share(double frac, std::size_t n) {
    return static_cast<std::size_t>(std::llround(frac * static_cast<double>(n)));
}

// Training split drawn once from the master seed; cal/test redrawn per repeat.
inline Split make_split(const std::vector<std::string>& ids, const ExperimentConfig& cfg, int repeat) {
    const std::size_t n = ids.size();
    const std::size_t n_train = share(cfg.train_fraction, n), n_cal = share(cfg.cal_fraction, n),
                      n_test = share(cfg.test_fraction, n);
    if (n_train < 2 || n_cal < 1 || n_test < 1 || n_train + n_cal + n_test > n)
        throw ValidationError("dataset of " + std::to_string(n) + " cases is too small for the split fractions");
    Split s;
    std::vector<std::string> all = ids;
    if (cfg.retrain) {
        auto rng = make_rng(cfg.seed, {2, static_cast<std::uint64_t>(repeat)});
        shuffle(all, rng);
        s.train.assign(all.begin(), all.begin() + static_cast<long>(n_train));
        s.cal.assign(all.begin() + static_cast<long>(n_train), all.begin() + static_cast<long>(n_train + n_cal));
        s.test.assign(all.begin() + static_cast<long>(n_train + n_cal),
                      all.begin() + static_cast<long>(n_train + n_cal + n_test));
        return s;
    }
    auto rng = make_rng(cfg.seed, {0});
    shuffle(all, rng);
    s.train.assign(all.begin(), all.begin() + static_cast<long>(n_train));
    std::vector<std::string> pool(all.begin() + static_cast<long>(n_train), all.end());
    auto rr = make_rng(cfg.seed, {1, static_cast<std::uint64_t>(repeat)});
    shuffle(pool, rr);
    s.cal.assign(pool.begin(), pool.begin() + static_cast<long>(n_cal));
    s.test.assign(pool.begin() + static_cast<long>(n_cal), pool.begin() + static_cast<long>(n_cal + n_test));
    return s;
}

// Records of a calibration unit, grouped by case id.
struct UnitData {
    std::string label;
    std::map<std::string, std::vector<CaseRecord>> by_case;

    std::vector<CaseRecord> select(const std::vector<std::string>& ids) const {
        std::vector<CaseRecord> out;
        for (const auto& id : ids) {
            auto it = by_case.find(id);
            if (it != by_case.end()) out.insert(out.end(), it->second.begin(), it->second.end());
        }
        return out;
    }
};

inline std::vector<UnitData> make_units(const std::vector<CaseRecord>& records, LabelMode mode) {
    std::vector<UnitData> units;
    if (mode != LabelMode::PerLabel) {
        UnitData u;
        u.label = "all";
        for (const auto& r : records) u.by_case[r.case_id].push_back(r);
        units.push_back(std::move(u));
        return units;
    }
    std::map<LabelId, UnitData> by_label;
    for (const auto& r : records) {
        auto& u = by_label[r.label_id];
        u.label = std::to_string(r.label_id);
        u.by_case[r.case_id].push_back(r);
    }
    for (auto& [id, u] : by_label) units.push_back(std::move(u));
    return units;
}

struct Cell {
    Method method;
    std::optional<Aggregator> agg;
    std::size_t unit;
};

inline std::string agg_name(const std::optional<Aggregator>& a) { return a ? a->name() : "none"; }

inline RepeatRow evaluate(const CalibratedPredictor& p, const std::vector<CaseRecord>& cal,
                          const std::vector<CaseRecord>& test, int repeat) {
    RepeatRow row;
    row.repeat = repeat;
    row.n_cal = cal.size();
    row.n_test = test.size();
    double wsum = 0.0, qsum = 0.0;
    std::size_t covered = 0;
    std::vector<double> scores;
    for (const auto& r : test) {
        const auto iv = p.predict(r);
        wsum += iv.width();
        if (iv.infinite()) ++row.infinite;
        if (p.crossed(r)) ++row.crossed;
        if (p.method() == Method::LCP) qsum += p.quantile_for(r);
        if (p.aggregator) scores.push_back(p.score(r));
        else if (iv.contains(*r.y_true)) ++covered;
    }
    row.width = wsum / static_cast<double>(test.size());
    row.q_hat = p.method() == Method::LCP ? qsum / static_cast<double>(test.size()) : *p.q_hat;
    if (p.aggregator) {
        // A case is covered when its aggregated score is within q_hat.
        const auto cs = case_scores(scores, test, *p.aggregator);
        for (double s : cs) covered += s <= *p.q_hat ? 1 : 0;
        row.coverage = static_cast<double>(covered) / static_cast<double>(cs.size());
    } else {
        row.coverage = static_cast<double>(covered) / static_cast<double>(test.size());
    }
    return row;
}

inline std::optional<double> finite_or_null(double v) {
    if (std::isfinite(v)) return v;
    return std::nullopt;
}

inline void summarize(Summary& s) {
    std::vector<double> cov, wid, q, infl;
    for (const auto& r : s.rows) {
        cov.push_back(r.coverage);
        wid.push_back(r.width);
        q.push_back(r.q_hat);
        if (r.inflation) infl.push_back(*r.inflation);
        s.crossed += r.crossed;
        s.infinite += r.infinite;
    }
    s.coverage_mean = stats::mean(cov);
    s.coverage_std = stats::stddev(cov);
    s.width_mean = stats::mean(wid);
    s.width_std = std::isfinite(s.width_mean) ? stats::stddev(wid) : kInfinity;
    if (infl.size() == s.rows.size() && !infl.empty()) {
        s.inflation_mean = stats::mean(infl);
        s.inflation_std = stats::stddev(infl);
    }
    std::sort(q.begin(), q.end());
    s.q_hat_min = q.front();
    s.q_hat_max = q.back();
    s.q_hat_median = std::isfinite(q.back()) ? stats::quantile_sorted(q, 0.5) : q[q.size() / 2];
}

} // namespace detail

/**
 * Repeated split-conformal evaluation. Models are fitted on the training
 * split (once, unless `retrain`); every repeat redraws calibration and test
 * cases and calibrates each (method, aggregation, label unit) cell.
 */
inline Report run_experiment(const std::vector<CaseRecord>& records, const ExperimentConfig& cfg) {
    cfg.validate();
    if (records.empty()) throw ValidationError("no records to evaluate");
    const auto ids = detail::case_ids(records);
    const auto units = detail::make_units(records, cfg.label_mode);

    std::vector<detail::Cell> cells;
    for (std::size_t u = 0; u < units.size(); ++u)
        for (auto m : cfg.methods) {
            if (cfg.aggregators.empty()) {
                cells.push_back({m, std::nullopt, u});
                continue;
            }
            for (const auto& a : cfg.aggregators) {
                if (m == Method::LCP) throw ValidationError("LCP does not support case-level aggregation");
                cells.push_back({m, a, u});
            }
        }

    // fitted[u][method index]
    const auto fit_all = [&](const detail::Split& s) {
        std::vector<std::vector<FittedModel>> fitted(units.size());
        for (std::size_t u = 0; u < units.size(); ++u) {
            const auto train = units[u].select(s.train);
            for (auto m : cfg.methods)
                fitted[u].push_back(fit_method(m, m == Method::Oracle ? units[u].select(ids) : train, cfg.alpha,
                                               cfg.calibration));
        }
        return fitted;
    };
    const auto method_slot = [&](Method m) {
        return static_cast<std::size_t>(std::find(cfg.methods.begin(), cfg.methods.end(), m) - cfg.methods.begin());
    };

    std::optional<std::vector<std::vector<FittedModel>>> shared;
    if (!cfg.retrain) shared = fit_all(detail::make_split(ids, cfg, 0));

    // rows[repeat][cell]; weights[repeat][unit]
    std::vector<std::vector<RepeatRow>> rows(static_cast<std::size_t>(cfg.repeats));
    std::vector<std::vector<std::vector<double>>> weights(static_cast<std::size_t>(cfg.repeats));
    parallel_for(rows.size(), cfg.jobs, [&](std::size_t rep) {
        const auto split = detail::make_split(ids, cfg, static_cast<int>(rep));
        const auto fitted = shared ? *shared : fit_all(split);
        std::vector<std::vector<CaseRecord>> cal(units.size()), test(units.size());
        for (std::size_t u = 0; u < units.size(); ++u) {
            cal[u] = units[u].select(split.cal);
            test[u] = units[u].select(split.test);
        }
        for (const auto& cell : cells) {
            CalibrationOptions opt = cfg.calibration;
            opt.aggregator = cell.agg;
            const auto& fm = fitted[cell.unit][method_slot(cell.method)];
            const auto p = conformalize(fm, cal[cell.unit], cfg.alpha, opt);
            rows[rep].push_back(detail::evaluate(p, cal[cell.unit], test[cell.unit], static_cast<int>(rep)));
        }
        if (std::find(cfg.methods.begin(), cfg.methods.end(), Method::ConVOLT) != cfg.methods.end())
            for (std::size_t u = 0; u < units.size(); ++u)
                weights[rep].push_back(fitted[u][method_slot(Method::ConVOLT)].ridge->weights());
    });

    Report rep;
    rep.config = cfg;
    rep.cases = ids.size();
    rep.records = records.size();
    for (std::size_t c = 0; c < cells.size(); ++c) {
        Summary s;
        s.method = cells[c].method;
        s.aggregation = detail::agg_name(cells[c].agg);
        s.label = units[cells[c].unit].label;
        for (std::size_t r = 0; r < rows.size(); ++r) s.rows.push_back(rows[r][c]);
        rep.summaries.push_back(std::move(s));
    }
    // Inflation against the ConVOLT cell with the same aggregation and unit.
    for (std::size_t c = 0; c < cells.size(); ++c) {
        std::optional<std::size_t> ref;
        for (std::size_t d = 0; d < cells.size(); ++d)
            if (cells[d].method == Method::ConVOLT && cells[d].unit == cells[c].unit &&
                detail::agg_name(cells[d].agg) == detail::agg_name(cells[c].agg))
                ref = d;
        if (!ref) continue;
        auto& s = rep.summaries[c];
        for (std::size_t r = 0; r < s.rows.size(); ++r) {
            if (c == *ref) {
                s.rows[r].inflation = 0.0;
                continue;
            }
            const double w = s.rows[r].width, w0 = rep.summaries[*ref].rows[r].width;
            if (std::isfinite(w) && std::isfinite(w0) && w0 > 0) s.rows[r].inflation = (w / w0 - 1.0) * 100.0;
        }
    }
    for (auto& s : rep.summaries) detail::summarize(s);
    for (std::size_t u = 0; u < units.size(); ++u)
        for (const auto& w : weights)
            if (!w.empty()) rep.convolt_weights[units[u].label].push_back(w[u]);
    return rep;
}

/// ConVOLT against its Additive, NoLearning, NoFeatures (and, for shells, GlobalFeatures) variants.
inline Report run_ablations(const std::vector<CaseRecord>& records, ExperimentConfig cfg, bool include_global) {
    if (include_global && cfg.label_mode != LabelMode::Shells)
        throw ValidationError("the GlobalFeatures variant needs shells label mode");
    cfg.methods = {Method::ConVOLT, Method::Additive, Method::NoLearning, Method::NoFeatures};
    if (include_global) cfg.methods.push_back(Method::GlobalFeatures);
    return run_experiment(records, cfg);
}

/// Per-feature mean/std of |coefficient| across repeats, sorted by mean (descending) per label.
inline std::vector<CoefficientRow> export_coefficients(const Report& report) {
    if (report.convolt_weights.empty()) throw ValidationError("no ConVOLT repeats to summarize");
    std::vector<CoefficientRow> out;
    // Label units in numeric order ("all" first).
    std::vector<std::string> labels;
    for (const auto& [label, _] : report.convolt_weights) labels.push_back(label);
    std::sort(labels.begin(), labels.end(), [](const std::string& a, const std::string& b) {
        if (a.size() != b.size()) return a.size() < b.size();
        return a < b;
    });
    for (const auto& label : labels) {
        const auto& reps = report.convolt_weights.at(label);
        std::vector<CoefficientRow> rows;
        for (std::size_t f = 0; f < kFeatureCount; ++f) {
            std::vector<double> v;
            for (const auto& w : reps) v.push_back(std::abs(w[f]));
            rows.push_back({label, std::string(kFeatureNames[f]), stats::mean(v), stats::stddev(v)});
        }
        std::stable_sort(rows.begin(), rows.end(),
                         [](const CoefficientRow& a, const CoefficientRow& b) { return a.mean > b.mean; });
        out.insert(out.end(), rows.begin(), rows.end());
    }
    return out;
}

// ---- outputs --------------------------------------------------------------

namespace detail {

inline nlohmann::ordered_json num(double v) {
    if (std::isfinite(v)) return v;
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return nullptr;
}

inline nlohmann::ordered_json num(const std::optional<double>& v) { return v ? num(*v) : nullptr; }

} // namespace detail

inline nlohmann::ordered_json config_json(const ExperimentConfig& c) {
    nlohmann::ordered_json j;
    j["alpha"] = c.alpha;
    j["repeats"] = c.repeats;
    j["splits"] = {c.train_fraction, c.cal_fraction, c.test_fraction};
    auto& m = j["methods"] = nlohmann::ordered_json::array();
    for (auto x : c.methods) m.push_back(method_name(x));
    auto& a = j["aggregation"] = nlohmann::ordered_json::array();
    for (const auto& x : c.aggregators) a.push_back(x.name());
    j["label_mode"] = label_mode_name(c.label_mode);
    j["seed"] = c.seed;
    j["retrain"] = c.retrain;
    j["ridge_lambda"] = c.calibration.ridge_lambda;
    j["cqr_lambda"] = c.calibration.cqr_lambda;
    j["lcp_k"] = c.calibration.lcp_k;
    j["clamp_at_zero"] = c.calibration.clamp_at_zero;
    return j;
}

/// Applies the keys of an experiment config (the config_json layout) on top
/// of `c`; unknown keys are errors.
inline ExperimentConfig config_from_json(const nlohmann::ordered_json& j, ExperimentConfig c = {}) {
    try {
        const auto known = config_json(c);
        for (auto it = j.begin(); it != j.end(); ++it)
            if (!known.contains(it.key()) && it.key() != "jobs")
                throw ValidationError("unknown experiment config key '" + it.key() + "'");
        if (j.contains("alpha")) c.alpha = j["alpha"].get<double>();
        if (j.contains("repeats")) c.repeats = j["repeats"].get<int>();
        if (j.contains("splits")) {
            const auto s = j["splits"].get<std::vector<double>>();
            if (s.size() != 3) throw ValidationError("splits needs 3 fractions (train, cal, test)");
            c.train_fraction = s[0];
            c.cal_fraction = s[1];
            c.test_fraction = s[2];
        }
        if (j.contains("methods")) {
            c.methods.clear();
            for (const auto& m : j["methods"]) c.methods.push_back(parse_method(m.get<std::string>()));
        }
        if (j.contains("aggregation")) {
            c.aggregators.clear();
            for (const auto& a : j["aggregation"]) c.aggregators.push_back(Aggregator::parse(a.get<std::string>()));
        }
        if (j.contains("label_mode")) c.label_mode = parse_label_mode(j["label_mode"].get<std::string>());
        if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("retrain")) c.retrain = j["retrain"].get<bool>();
        if (j.contains("ridge_lambda")) c.calibration.ridge_lambda = j["ridge_lambda"].get<double>();
        if (j.contains("cqr_lambda")) c.calibration.cqr_lambda = j["cqr_lambda"].get<double>();
        if (j.contains("lcp_k")) c.calibration.lcp_k = j["lcp_k"].get<int>();
        if (j.contains("clamp_at_zero")) c.calibration.clamp_at_zero = j["clamp_at_zero"].get<bool>();
        if (j.contains("jobs")) c.jobs = j["jobs"].get<unsigned>();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed experiment config: ") + e.what());
    }
}

inline nlohmann::ordered_json to_json(const Report& r) {
    nlohmann::ordered_json j;
    j["format"] = "convolt-report";
    j["version"] = 1;
    j["config"] = config_json(r.config);
    j["cases"] = r.cases;
    j["records"] = r.records;
    auto& arr = j["summaries"] = nlohmann::ordered_json::array();
    for (const auto& s : r.summaries) {
        nlohmann::ordered_json o;
        o["method"] = method_name(s.method);
        o["aggregation"] = s.aggregation;
        o["label"] = s.label;
        o["coverage_mean"] = detail::num(s.coverage_mean);
        o["coverage_std"] = detail::num(s.coverage_std);
        o["width_mean_ml"] = detail::num(s.width_mean);
        o["width_std_ml"] = detail::num(s.width_std);
        o["inflation_mean_pct"] = detail::num(s.inflation_mean);
        o["inflation_std_pct"] = detail::num(s.inflation_std);
        o["q_hat"] = {{"min", detail::num(s.q_hat_min)},
                      {"median", detail::num(s.q_hat_median)},
                      {"max", detail::num(s.q_hat_max)}};
        o["crossed_quantiles"] = s.crossed;
        o["infinite_intervals"] = s.infinite;
        auto& rows = o["repeats"] = nlohmann::ordered_json::array();
        for (const auto& row : s.rows)
            rows.push_back({{"repeat", row.repeat},
                            {"coverage", detail::num(row.coverage)},
                            {"width_ml", detail::num(row.width)},
                            {"q_hat", detail::num(row.q_hat)},
                            {"inflation_pct", detail::num(row.inflation)},
                            {"crossed", row.crossed},
                            {"infinite", row.infinite},
                            {"n_cal", row.n_cal},
                            {"n_test", row.n_test}});
        arr.push_back(std::move(o));
    }
    return j;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << text;
    if (!os) throw IoError("write failed: " + path.string());
}

inline void write_report_json(const std::filesystem::path& path, const Report& r) {
    write_text(path, to_json(r).dump(2) + "\n");
}

inline constexpr const char* kTablesHeader =
    "label_mode,method,aggregation,label,coverage_mean,coverage_std,width_mean_ml,width_std_ml,"
    "inflation_mean_pct,inflation_std_pct,q_hat_median,crossed_quantiles,infinite_intervals";

inline void write_tables_csv(const std::filesystem::path& path, const Report& r) {
    std::string out = std::string(kTablesHeader) + "\n";
    const auto opt = [](const std::optional<double>& v) { return v ? csv::format_double(*v) : std::string(); };
    for (const auto& s : r.summaries) {
        out += std::string(label_mode_name(r.config.label_mode)) + "," + method_name(s.method) + "," + s.aggregation +
               "," + s.label + "," + csv::format_double(s.coverage_mean) + "," + csv::format_double(s.coverage_std) +
               "," + csv::format_double(s.width_mean) + "," + csv::format_double(s.width_std) + "," +
               opt(s.inflation_mean) + "," + opt(s.inflation_std) + "," + csv::format_double(s.q_hat_median) + "," +
               std::to_string(s.crossed) + "," + std::to_string(s.infinite) + "\n";
    }
    write_text(path, out);
}

inline constexpr const char* kCoefficientsHeader = "label,feature,abs_coef_mean,abs_coef_std";

inline void write_coefficients_csv(const std::filesystem::path& path, const std::vector<CoefficientRow>& rows) {
    std::string out = std::string(kCoefficientsHeader) + "\n";
    for (const auto& r : rows)
        out += r.label + "," + r.feature + "," + csv::format_double(r.mean) + "," + csv::format_double(r.std) + "\n";
    write_text(path, out);
}

} // namespace convolt::eval

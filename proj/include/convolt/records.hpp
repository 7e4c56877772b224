#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "convolt/error.hpp"
#include "convolt/features.hpp"
#include "convolt/volumetry.hpp"

namespace convolt {

/// One (case, label) observation.
struct CaseRecord {
    std::string case_id;
    LabelId label_id = 0; // 0 = whole foreground
    FeatureVector features;
    double y_hat0 = 0.0;            // deformation-derived volume, mL
    std::optional<double> y_true;   // ground-truth volume, mL
    // Whole-mask features, present when records are built for the
    // global-feature ablation.
    std::optional<FeatureVector> global_features;
    // Generator-side error amplitude; only synthetic data carries it.
    std::optional<double> latent;

    /// y_true / y_hat0.
    double oracle_ratio() const {
        if (!y_true) throw ValidationError("record " + case_id + "/" + std::to_string(label_id) + " has no target");
        if (!(y_hat0 > 0.0))
            throw ValidationError("record " + case_id + "/" + std::to_string(label_id) +
                                  " has non-positive baseline volume");
        return *y_true / y_hat0;
    }
};

// ---- features.csv ---------------------------------------------------------

namespace csv {

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (std::isnan(v)) return "nan";
    char buf[32];
    for (int prec = 15; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

inline std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline double parse_double(const std::string& s, const std::string& where) {
    if (s == "inf") return INFINITY;
    if (s == "-inf") return -INFINITY;
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size()) throw ValidationError(where + ": cannot parse number '" + s + "'");
    return v;
}

inline std::string chomp(std::string line) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
}

} // namespace csv

inline std::string features_csv_header() {
    std::string h = "case_id,label_id";
    for (auto name : kFeatureNames) h += "," + std::string(name);
    h += ",y_hat0_ml,y_true_ml";
    return h;
}

inline void write_features_csv(const std::filesystem::path& path, const std::vector<CaseRecord>& records) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << features_csv_header() << '\n';
    for (const auto& r : records) {
        if (r.case_id.find(',') != std::string::npos) throw ValidationError("case id contains a comma: " + r.case_id);
        os << r.case_id << ',' << r.label_id;
        for (double v : r.features.values) os << ',' << csv::format_double(v);
        os << ',' << csv::format_double(r.y_hat0) << ',';
        if (r.y_true) os << csv::format_double(*r.y_true);
        os << '\n';
    }
    if (!os) throw IoError("write failed: " + path.string());
}

inline std::vector<CaseRecord> read_features_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(is, line)) throw ValidationError(path.string() + ": empty file");
    if (csv::chomp(line) != features_csv_header())
        throw ValidationError(path.string() + ": header does not match the feature column contract");
    std::vector<CaseRecord> out;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        line = csv::chomp(line);
        if (line.empty()) continue;
        const std::string where = path.string() + ":" + std::to_string(lineno);
        const auto cells = csv::split(line);
        if (cells.size() != kFeatureCount + 4) throw ValidationError(where + ": wrong column count");
        CaseRecord r;
        r.case_id = cells[0];
        const double label = csv::parse_double(cells[1], where);
        if (label < 0 || label > 65535 || label != std::floor(label)) throw ValidationError(where + ": bad label id");
        r.label_id = static_cast<LabelId>(label);
        for (std::size_t i = 0; i < kFeatureCount; ++i) r.features.values[i] = csv::parse_double(cells[2 + i], where);
        r.y_hat0 = csv::parse_double(cells[kFeatureCount + 2], where);
        if (!cells[kFeatureCount + 3].empty()) r.y_true = csv::parse_double(cells[kFeatureCount + 3], where);
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace convolt

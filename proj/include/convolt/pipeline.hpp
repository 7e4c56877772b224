#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "convolt/error.hpp"
#include "convolt/features.hpp"
#include "convolt/grid.hpp"
#include "convolt/parallel.hpp"
#include "convolt/records.hpp"
#include "convolt/synth.hpp"
#include "convolt/volumetry.hpp"

namespace convolt {

/// How a case becomes records.
enum class LabelMode { Global, Shells, PerLabel };

inline const char* label_mode_name(LabelMode m) {
    switch (m) {
    case LabelMode::Global: return "global";
    case LabelMode::Shells: return "shells";
    case LabelMode::PerLabel: return "per_label";
    }
    return "?";
}

inline LabelMode parse_label_mode(const std::string& s) {
    if (s == "global") return LabelMode::Global;
    if (s == "shells") return LabelMode::Shells;
    if (s == "per_label" || s == "per-label") return LabelMode::PerLabel;
    throw ValidationError("unknown label mode '" + s + "' (global, shells, per_label)");
}

struct RecordOptions {
    LabelMode mode = LabelMode::Global;
    // Region for label-wise features; Global mode always uses the foreground.
    RegionMode region = RegionMode::RegionRestricted;
    int band_radius = 2;
    BandSide band_side = BandSide::Both;
    // Also attach whole-foreground features (global-feature ablation).
    bool global_features = false;
    double log_floor = kDefaultLogJacobianFloor;

    /// Defaults per label mode: foreground, own shell, boundary band.
    static RecordOptions for_mode(LabelMode m) {
        RecordOptions o;
        o.mode = m;
        o.region = m == LabelMode::PerLabel ? RegionMode::BoundaryBand
                   : m == LabelMode::Global ? RegionMode::Global
                                            : RegionMode::RegionRestricted;
        o.global_features = m == LabelMode::Shells;
        return o;
    }
};

/**
 * Records of one case: features and baseline volume from the estimated
 * field, targets from the case's ground truth.
 */
inline std::vector<CaseRecord> build_records(const synth::SynthCase& c, const RecordOptions& opt) {
    const auto jac = jacobian_determinant(c.u_est);
    const auto warped = warp_image(c.moving, c.u_est);
    const auto maps = deformation_maps(c.u_est, jac, c.fixed, warped, opt.log_floor);
    const auto ids = c.labels.labels();
    if (ids.size() != c.y_true.size()) throw ValidationError(c.case_id + ": label count disagrees with targets");

    std::vector<CaseRecord> out;
    FeatureVector global;
    if (opt.mode == LabelMode::Global || opt.global_features)
        global = extract_features(maps, resolve_region(c.labels, {RegionMode::Global, 0, opt.band_radius, opt.band_side}));

    if (opt.mode == LabelMode::Global) {
        CaseRecord r;
        r.case_id = c.case_id;
        r.label_id = 0;
        r.features = global;
        double y = 0.0, latent = 0.0;
        for (std::size_t l = 0; l < ids.size(); ++l) {
            r.y_hat0 += baseline_volume(jac, c.labels, ids[l]);
            y += c.y_true[l];
            latent += c.latent.empty() ? 0.0 : c.latent[l];
        }
        r.y_true = y;
        if (!c.latent.empty()) r.latent = latent / static_cast<double>(ids.size());
        out.push_back(std::move(r));
        return out;
    }

    for (std::size_t l = 0; l < ids.size(); ++l) {
        CaseRecord r;
        r.case_id = c.case_id;
        r.label_id = ids[l];
        r.features = extract_features(maps, resolve_region(c.labels, {opt.region, ids[l], opt.band_radius, opt.band_side}));
        r.y_hat0 = baseline_volume(jac, c.labels, ids[l]);
        r.y_true = c.y_true[l];
        if (!c.latent.empty()) r.latent = c.latent[l];
        if (opt.global_features) r.global_features = global;
        out.push_back(std::move(r));
    }
    return out;
}

/// Records for cases [0, n) generated in memory; cases are dropped after use.
inline std::vector<CaseRecord> synthesize_records(const synth::SynthConfig& cfg, const RecordOptions& opt,
                                                  unsigned jobs = 1) {
    cfg.validate();
    std::vector<std::vector<CaseRecord>> per(static_cast<std::size_t>(cfg.cases));
    parallel_for(per.size(), jobs, [&](std::size_t i) {
        per[i] = build_records(synth::generate_case(cfg, static_cast<int>(i)), opt);
    });
    std::vector<CaseRecord> out;
    for (auto& v : per)
        for (auto& r : v) out.push_back(std::move(r));
    return out;
}

/// Records for every case of a dataset directory, in manifest order.
inline std::vector<CaseRecord> dataset_records(const std::filesystem::path& dir, const RecordOptions& opt,
                                               unsigned jobs = 1) {
    const auto idx = synth::open_dataset(dir);
    std::vector<std::vector<CaseRecord>> per(idx.size());
    parallel_for(per.size(), jobs, [&](std::size_t i) { per[i] = build_records(synth::load_case(idx, i), opt); });
    std::vector<CaseRecord> out;
    for (auto& v : per)
        for (auto& r : v) out.push_back(std::move(r));
    return out;
}

} // namespace convolt

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "convolt/error.hpp"
#include "convolt/grid.hpp"
#include "convolt/stats.hpp"
#include "convolt/volumetry.hpp"

namespace convolt {

inline constexpr std::size_t kFeatureCount = 23;

/// Column names, in on-disk order.
inline constexpr std::array<std::string_view, kFeatureCount> kFeatureNames{
    "logJ_mean",     "logJ_std",      "logJ_meanabs", "J_q10",    "J_q50",    "J_q90",
    "fold_frac_0p1", "fold_frac_0p01", "disp_mean",   "disp_q90", "disp_max", "gradlogJ_mean",
    "gradlogJ_q90",  "gradlogJ_max",  "div_mean",     "div_q90",  "div_max",  "curl_mean",
    "curl_q90",      "curl_max",      "sim_mae",      "sim_mse",  "sim_corr"};

enum class Feature : std::size_t {
    logJ_mean, logJ_std, logJ_meanabs, J_q10, J_q50, J_q90, fold_frac_0p1, fold_frac_0p01,
    disp_mean, disp_q90, disp_max, gradlogJ_mean, gradlogJ_q90, gradlogJ_max,
    div_mean, div_q90, div_max, curl_mean, curl_q90, curl_max, sim_mae, sim_mse, sim_corr
};

inline std::optional<std::size_t> feature_index(std::string_view name) {
    for (std::size_t i = 0; i < kFeatureCount; ++i)
        if (kFeatureNames[i] == name) return i;
    return std::nullopt;
}

struct FeatureVector {
    std::array<double, kFeatureCount> values{};

    double operator[](Feature f) const noexcept { return values[static_cast<std::size_t>(f)]; }
    double& operator[](Feature f) noexcept { return values[static_cast<std::size_t>(f)]; }
    friend bool operator==(const FeatureVector&, const FeatureVector&) = default;
};

enum class RegionMode { Global, RegionRestricted, BoundaryBand };
enum class BandSide { Both, Inside, Outside };

/// Which voxels a feature vector summarizes.
struct RegionSpec {
    RegionMode mode = RegionMode::RegionRestricted;
    LabelId label = 1;
    int band_radius = 2; // voxels, BoundaryBand only
    BandSide side = BandSide::Both;
};

namespace detail {

// Separable cube (Chebyshev) dilation or erosion; voxels beyond the grid are
// background.
inline std::vector<unsigned char> morph(std::vector<unsigned char> m, const VoxelGrid& g, int radius, bool dilate) {
    std::vector<unsigned char> tmp(m.size());
    for (int axis = 0; axis < 3; ++axis) {
        const std::size_t n = g.dims()[axis];
        const std::size_t step = g.stride(axis);
        for (std::size_t flat = 0; flat < m.size(); ++flat) {
            const std::size_t pos = g.coords(flat)[axis];
            unsigned char acc = dilate ? 0 : 1;
            for (long o = -radius; o <= radius; ++o) {
                const long q = static_cast<long>(pos) + o;
                unsigned char v = 0;
                if (q >= 0 && q < static_cast<long>(n)) v = m[flat + static_cast<std::size_t>(q) * step - pos * step];
                acc = dilate ? (acc | v) : (acc & v);
            }
            tmp[flat] = acc;
        }
        m.swap(tmp);
    }
    return m;
}

} // namespace detail

/// Flat indices (ascending) of the voxels a region covers.
inline std::vector<std::size_t> resolve_region(const LabelMap& labels, const RegionSpec& region) {
    const auto& g = labels.grid();
    std::vector<std::size_t> out;
    switch (region.mode) {
    case RegionMode::Global:
        for (std::size_t n = 0; n < g.size(); ++n)
            if (labels[n] != 0) out.push_back(n);
        break;
    case RegionMode::RegionRestricted:
        for (std::size_t n = 0; n < g.size(); ++n)
            if (labels[n] == region.label) out.push_back(n);
        break;
    case RegionMode::BoundaryBand: {
        if (region.band_radius < 1) throw ValidationError("boundary band radius must be >= 1");
        // Work on the label's bounding box grown by radius + 1; beyond it the
        // band is empty and the box edge behaves like background.
        Index3 lo{g.nx(), g.ny(), g.nz()}, hi{0, 0, 0};
        bool any = false;
        for (std::size_t n = 0; n < g.size(); ++n) {
            if (labels[n] != region.label) continue;
            any = true;
            const auto c = g.coords(n);
            for (int a = 0; a < 3; ++a) {
                lo[a] = std::min(lo[a], c[a]);
                hi[a] = std::max(hi[a], c[a]);
            }
        }
        if (!any) break;
        const std::size_t pad = static_cast<std::size_t>(region.band_radius) + 1;
        Index3 sub{};
        for (int a = 0; a < 3; ++a) {
            lo[a] = lo[a] > pad ? lo[a] - pad : 0;
            hi[a] = std::min(hi[a] + pad, g.dims()[a] - 1);
            while (hi[a] - lo[a] + 1 < 3) {
                if (hi[a] + 1 < g.dims()[a]) ++hi[a];
                else --lo[a];
            }
            sub[a] = hi[a] - lo[a] + 1;
        }
        const VoxelGrid sg(sub, g.spacing());
        std::vector<unsigned char> m(sg.size());
        for (std::size_t k = 0; k < sub[2]; ++k)
            for (std::size_t j = 0; j < sub[1]; ++j)
                for (std::size_t i = 0; i < sub[0]; ++i)
                    m[sg.index(i, j, k)] = labels[g.index(lo[0] + i, lo[1] + j, lo[2] + k)] == region.label ? 1 : 0;
        const auto dil = region.side == BandSide::Inside ? m : detail::morph(m, sg, region.band_radius, true);
        const auto ero = region.side == BandSide::Outside ? m : detail::morph(m, sg, region.band_radius, false);
        for (std::size_t k = 0; k < sub[2]; ++k)
            for (std::size_t j = 0; j < sub[1]; ++j)
                for (std::size_t i = 0; i < sub[0]; ++i) {
                    const auto sn = sg.index(i, j, k);
                    if (dil[sn] && !ero[sn]) out.push_back(g.index(lo[0] + i, lo[1] + j, lo[2] + k));
                }
        std::sort(out.begin(), out.end());
        break;
    }
    }
    if (out.empty()) throw ValidationError("feature region is empty for label " + std::to_string(region.label));
    return out;
}

/// Per-voxel maps shared by every region of one case.
struct DeformationMaps {
    ScalarVolume jacobian;
    ScalarVolume grad_log_jacobian;
    ScalarVolume divergence;
    ScalarVolume curl;
    ScalarVolume displacement_magnitude;
    ScalarVolume fixed;
    ScalarVolume warped;
    double log_floor = kDefaultLogJacobianFloor;
};

inline DeformationMaps deformation_maps(const DisplacementField& field, const ScalarVolume& jac,
                                        const ScalarVolume& fixed, const ScalarVolume& warped,
                                        double log_floor = kDefaultLogJacobianFloor) {
    const auto& g = field.grid();
    if (!(jac.grid() == g) || !(fixed.grid() == g) || !(warped.grid() == g))
        throw ValidationError("extract_features: input grids differ");
    DeformationMaps maps{jac, grad_log_jacobian_magnitude(jac, log_floor), divergence(field), curl_magnitude(field),
                         ScalarVolume(g), fixed, warped, log_floor};
    for (std::size_t n = 0; n < g.size(); ++n) {
        const Vec3 u = field.at(n);
        maps.displacement_magnitude[n] = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
    }
    return maps;
}

/// Summary statistics over an explicit voxel set.
inline FeatureVector extract_features(const DeformationMaps& maps, const std::vector<std::size_t>& voxels) {
    if (voxels.empty()) throw ValidationError("extract_features: empty voxel set");
    const std::size_t n = voxels.size();
    const double inv_n = 1.0 / static_cast<double>(n);
    const auto gather = [&](const ScalarVolume& v) {
        std::vector<double> out(n);
        for (std::size_t i = 0; i < n; ++i) out[i] = v[voxels[i]];
        return out;
    };
    // mean, q90 (linear interpolation) and max
    const auto summary3 = [&](std::vector<double> v, double& mean, double& q90, double& mx) {
        mean = stats::mean(v);
        std::sort(v.begin(), v.end());
        q90 = stats::quantile_sorted(v, 0.9);
        mx = v.back();
    };

    FeatureVector f;
    auto jac = gather(maps.jacobian);
    std::vector<double> logj(n);
    double fold01 = 0.0, fold001 = 0.0, meanabs = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        logj[i] = std::log(std::max(jac[i], maps.log_floor));
        meanabs += std::abs(logj[i]);
        fold01 += jac[i] < 0.1 ? 1.0 : 0.0;
        fold001 += jac[i] < 0.01 ? 1.0 : 0.0;
    }
    f[Feature::logJ_mean] = stats::mean(logj);
    f[Feature::logJ_std] = stats::stddev(logj);
    f[Feature::logJ_meanabs] = meanabs * inv_n;
    std::sort(jac.begin(), jac.end());
    f[Feature::J_q10] = stats::quantile_sorted(jac, 0.1);
    f[Feature::J_q50] = stats::quantile_sorted(jac, 0.5);
    f[Feature::J_q90] = stats::quantile_sorted(jac, 0.9);
    f[Feature::fold_frac_0p1] = fold01 * inv_n;
    f[Feature::fold_frac_0p01] = fold001 * inv_n;
    summary3(gather(maps.displacement_magnitude), f[Feature::disp_mean], f[Feature::disp_q90], f[Feature::disp_max]);
    summary3(gather(maps.grad_log_jacobian), f[Feature::gradlogJ_mean], f[Feature::gradlogJ_q90],
             f[Feature::gradlogJ_max]);
    summary3(gather(maps.divergence), f[Feature::div_mean], f[Feature::div_q90], f[Feature::div_max]);
    summary3(gather(maps.curl), f[Feature::curl_mean], f[Feature::curl_q90], f[Feature::curl_max]);

    const auto fx = gather(maps.fixed);
    const auto wx = gather(maps.warped);
    double mae = 0.0, mse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double r = fx[i] - wx[i];
        mae += std::abs(r);
        mse += r * r;
    }
    f[Feature::sim_mae] = mae * inv_n;
    f[Feature::sim_mse] = mse * inv_n;
    f[Feature::sim_corr] = stats::pearson(fx, wx);

    for (std::size_t i = 0; i < kFeatureCount; ++i) {
        if (!std::isfinite(f.values[i]))
            throw ValidationError("feature " + std::string(kFeatureNames[i]) + " is not finite");
    }
    return f;
}

/// Feature vector of one region of one case.
inline FeatureVector extract_features(const DisplacementField& field, const ScalarVolume& jac, const LabelMap& labels,
                                      const RegionSpec& region, const ScalarVolume& fixed,
                                      const ScalarVolume& warped) {
    if (!(labels.grid() == field.grid())) throw ValidationError("extract_features: input grids differ");
    const auto maps = deformation_maps(field, jac, fixed, warped);
    return extract_features(maps, resolve_region(labels, region));
}

} // namespace convolt

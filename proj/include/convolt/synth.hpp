#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "convolt/error.hpp"
#include "convolt/features.hpp"
#include "convolt/grid.hpp"
#include "convolt/io.hpp"
#include "convolt/parallel.hpp"
#include "convolt/records.hpp"
#include "convolt/rng.hpp"
#include "convolt/stats.hpp"
#include "convolt/volumetry.hpp"

namespace convolt::synth {

enum class Layout { Ball, Shells, Blobs };
enum class Driver { LogJacobianStd, CurlMean };

inline const char* layout_name(Layout l) {
    switch (l) {
    case Layout::Ball: return "ball";
    case Layout::Shells: return "shells";
    case Layout::Blobs: return "blobs";
    }
    return "?";
}

inline Layout parse_layout(const std::string& s) {
    if (s == "ball") return Layout::Ball;
    if (s == "shells") return Layout::Shells;
    if (s == "blobs") return Layout::Blobs;
    throw ValidationError("unknown label layout '" + s + "' (ball, shells, blobs)");
}

inline const char* driver_name(Driver d) { return d == Driver::LogJacobianStd ? "logj_std" : "curl_mean"; }

inline Driver parse_driver(const std::string& s) {
    if (s == "logj_std") return Driver::LogJacobianStd;
    if (s == "curl_mean") return Driver::CurlMean;
    throw ValidationError("unknown error driver '" + s + "' (logj_std, curl_mean)");
}

/**
 * Generator parameters. Lengths are in mm; bump and swirl supports are
 * fractions of the radius of the unit (ball or blob) they sit in.
 *
 * Registration error model: inside each unit the estimated field adds a
 * radial strain a*(x - c) with a = a0*(1 + gamma*h) + N(0, strain_noise),
 * where h is the unit's heterogeneity driver (std of log J_true over the
 * unit by default), plus a smooth random field of RMS noise_field_amplitude.
 * Strain noise defaults to zero, so the error the features cannot explain
 * comes from the random field. Its flux through a boundary is sign-symmetric.
 */
struct SynthConfig {
    Index3 dims{48, 48, 48};
    Vec3 spacing{1.0, 1.0, 1.0};
    int cases = 400;
    std::uint64_t seed = 1;

    Layout layout = Layout::Ball;
    int shells = 5;
    int blobs = 8;
    double radius_min = 8.0;
    double radius_max = 15.0;
    double blob_radius_min = 4.0;
    double blob_radius_max = 7.0;
    double center_jitter = 2.0;

    double scale_min = 0.9;
    double scale_max = 1.1;
    double anisotropy = 0.03;
    double translation = 1.0;

    int bump_count = 3;
    double bump_amplitude = 0.35;
    double bump_support_min = 0.6;
    double bump_support_max = 1.2;

    double swirl_amplitude = 0.0;
    double swirl_support_min = 0.8;
    double swirl_support_max = 1.6;

    double a0 = 0.03;
    double gamma = 2.0;
    Driver driver = Driver::LogJacobianStd;
    int driver_band_radius = 2;
    double strain_noise = 0.0;
    double noise_field_amplitude = 0.5;
    double noise_smoothness = 3.0; // voxels (Gaussian sigma)
    double window_margin = 3.0;
    double window_falloff = 3.0;

    double intensity_noise = 0.02;
    double texture_wavelength_min = 6.0;
    double texture_wavelength_max = 12.0;
    int texture_waves = 6;

    int supersample = 4;
    int max_retries = 8;

    VoxelGrid grid() const { return VoxelGrid(dims, spacing); }

    void validate() const {
        (void)grid();
        if (cases < 1) throw ValidationError("synth: case count must be >= 1");
        if (supersample < 2) throw ValidationError("synth: supersampling factor must be >= 2");
        if (max_retries < 0) throw ValidationError("synth: max_retries must be >= 0");
        if (layout == Layout::Shells && shells < 1) throw ValidationError("synth: shell count must be >= 1");
        if (layout == Layout::Blobs && (blobs < 1 || blobs > 65535)) throw ValidationError("synth: bad blob count");
        const double vals[] = {radius_min, radius_max, blob_radius_min, blob_radius_max, center_jitter,
                               scale_min, scale_max, anisotropy, translation, bump_amplitude,
                               bump_support_min, bump_support_max, swirl_amplitude, swirl_support_min,
                               swirl_support_max, a0, gamma, strain_noise, noise_field_amplitude,
                               noise_smoothness, window_margin, window_falloff, intensity_noise,
                               texture_wavelength_min, texture_wavelength_max};
        for (double v : vals)
            if (!std::isfinite(v)) throw ValidationError("synth: parameters must be finite");
        if (!(radius_min > 0 && radius_min <= radius_max)) throw ValidationError("synth: bad radius range");
        if (!(blob_radius_min > 0 && blob_radius_min <= blob_radius_max))
            throw ValidationError("synth: bad blob radius range");
        if (!(scale_min > 0 && scale_min <= scale_max)) throw ValidationError("synth: bad affine scale range");
        if (!(bump_support_min > 0 && bump_support_min <= bump_support_max))
            throw ValidationError("synth: bad bump support range");
        if (!(swirl_support_min > 0 && swirl_support_min <= swirl_support_max))
            throw ValidationError("synth: bad swirl support range");
        if (bump_count < 0) throw ValidationError("synth: bump count must be >= 0");
        if (!(noise_smoothness > 0) || !(window_falloff > 0)) throw ValidationError("synth: smoothness must be > 0");
        if (!(texture_wavelength_min > 0 && texture_wavelength_min <= texture_wavelength_max))
            throw ValidationError("synth: bad texture wavelength range");
        if (driver_band_radius < 1) throw ValidationError("synth: driver band radius must be >= 1");
    }
};

/// Blob layout whose error is driven by local rotation (mean |curl| in the
/// boundary band) rather than by volume change. Bumps and texture are off.
inline SynthConfig single_driver_config() {
    SynthConfig c;
    c.dims = {64, 64, 64};
    c.layout = Layout::Blobs;
    c.driver = Driver::CurlMean;
    c.a0 = 0.02;
    c.gamma = 10.0;
    c.swirl_amplitude = 0.4;
    c.swirl_support_min = 1.5;
    c.swirl_support_max = 2.5;
    c.bump_amplitude = 0.0;
    c.texture_waves = 0;
    c.noise_field_amplitude = 0.1;
    c.window_margin = 5.0;
    c.window_falloff = 4.0;
    return c;
}

// ---- analytic ground-truth field -----------------------------------------

/// Compact radial profile (1 - r^2/rho^2)^3 on r < rho, and d(profile)/d(x) / d.
struct CompactProfile {
    static double value(double r2, double rho2) noexcept {
        if (r2 >= rho2) return 0.0;
        const double t = 1.0 - r2 / rho2;
        return t * t * t;
    }
    // gradient of the profile is slope(r2, rho2) * d
    static double slope(double r2, double rho2) noexcept {
        if (r2 >= rho2) return 0.0;
        const double t = 1.0 - r2 / rho2;
        return -6.0 * t * t / rho2;
    }
};

/// Radial expansion (amplitude > 0) or contraction around a centre.
struct Bump {
    Vec3 center{};
    double support = 1.0;
    double amplitude = 0.0;
};

/// Divergence-free rotation about `axis` through `center`.
struct Swirl {
    Vec3 center{};
    Vec3 axis{0, 0, 1};
    double support = 1.0;
    double amplitude = 0.0;
};

/// u(x) = (A - I)(x - c) + b + bumps + swirls, with A diagonal.
struct AnalyticField {
    Vec3 scale{1, 1, 1};
    Vec3 center{};
    Vec3 translation{};
    std::vector<Bump> bumps;
    std::vector<Swirl> swirls;

    bool affine_only() const {
        for (const auto& b : bumps)
            if (b.amplitude != 0.0) return false;
        for (const auto& s : swirls)
            if (s.amplitude != 0.0) return false;
        return true;
    }

    double affine_det() const { return scale[0] * scale[1] * scale[2]; }

    Vec3 value(const Vec3& x) const {
        Vec3 u{};
        for (int a = 0; a < 3; ++a) u[a] = (scale[a] - 1.0) * (x[a] - center[a]) + translation[a];
        for (const auto& b : bumps) {
            const Vec3 d{x[0] - b.center[0], x[1] - b.center[1], x[2] - b.center[2]};
            const double r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            const double g = CompactProfile::value(r2, b.support * b.support);
            for (int a = 0; a < 3; ++a) u[a] += b.amplitude * g * d[a];
        }
        for (const auto& s : swirls) {
            const Vec3 d{x[0] - s.center[0], x[1] - s.center[1], x[2] - s.center[2]};
            const double r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            const double g = s.amplitude * CompactProfile::value(r2, s.support * s.support);
            const auto& k = s.axis;
            u[0] += g * (k[1] * d[2] - k[2] * d[1]);
            u[1] += g * (k[2] * d[0] - k[0] * d[2]);
            u[2] += g * (k[0] * d[1] - k[1] * d[0]);
        }
        return u;
    }

    /// G[a][b] = d u_a / d x_b.
    Mat3 gradient(const Vec3& x) const {
        Mat3 G{};
        for (int a = 0; a < 3; ++a) G[a][a] = scale[a] - 1.0;
        for (const auto& b : bumps) {
            const Vec3 d{x[0] - b.center[0], x[1] - b.center[1], x[2] - b.center[2]};
            const double r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            const double rho2 = b.support * b.support;
            if (r2 >= rho2) continue;
            const double g = CompactProfile::value(r2, rho2);
            const double sl = CompactProfile::slope(r2, rho2);
            for (int i = 0; i < 3; ++i) {
                G[i][i] += b.amplitude * g;
                for (int j = 0; j < 3; ++j) G[i][j] += b.amplitude * d[i] * sl * d[j];
            }
        }
        for (const auto& s : swirls) {
            const Vec3 d{x[0] - s.center[0], x[1] - s.center[1], x[2] - s.center[2]};
            const double r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            const double rho2 = s.support * s.support;
            if (r2 >= rho2) continue;
            const double g = CompactProfile::value(r2, rho2);
            const double sl = CompactProfile::slope(r2, rho2);
            const auto& k = s.axis;
            const Vec3 kxd{k[1] * d[2] - k[2] * d[1], k[2] * d[0] - k[0] * d[2], k[0] * d[1] - k[1] * d[0]};
            const Mat3 K{{{0.0, -k[2], k[1]}, {k[2], 0.0, -k[0]}, {-k[1], k[0], 0.0}}};
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) G[i][j] += s.amplitude * (g * K[i][j] + kxd[i] * sl * d[j]);
        }
        return G;
    }

    double jacobian(const Vec3& x) const {
        Mat3 G = gradient(x);
        for (int a = 0; a < 3; ++a) G[a][a] += 1.0;
        return det3(G);
    }
};

// ---- synthetic case -------------------------------------------------------

/// One anatomical unit: a ball (single/shell layouts) or one blob.
struct Unit {
    Vec3 center{};
    double radius = 1.0;
    double heterogeneity = 0.0; // driver value h
    double amplitude = 0.0;     // a0*(1 + gamma*h)
    double strain_noise = 0.0;  // per-case draw added to the amplitude
    std::vector<LabelId> labels;
};

struct SynthCase {
    std::string case_id;
    int index = 0;
    ScalarVolume fixed;
    ScalarVolume moving;
    DisplacementField u_true;
    DisplacementField u_est; // u_true + perturbation
    LabelMap labels;
    std::vector<double> y_true; // mL, entry l-1 for label l
    std::vector<double> latent; // error amplitude of the unit holding label l
    nlohmann::ordered_json provenance;

    std::size_t label_count() const noexcept { return y_true.size(); }
};

inline std::string case_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "case_%04d", index);
    return buf;
}

namespace detail {

inline Vec3 grid_center(const VoxelGrid& g) {
    return {0.5 * static_cast<double>(g.nx() - 1) * g.spacing()[0],
            0.5 * static_cast<double>(g.ny() - 1) * g.spacing()[1],
            0.5 * static_cast<double>(g.nz() - 1) * g.spacing()[2]};
}

inline double dist2(const Vec3& a, const Vec3& b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}

inline Vec3 random_in_ball(Rng& rng) {
    while (true) {
        const Vec3 v{uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)};
        if (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] <= 1.0) return v;
    }
}

inline Vec3 random_direction(Rng& rng) {
    while (true) {
        const Vec3 v = random_in_ball(rng);
        const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        if (n > 1e-3) return {v[0] / n, v[1] / n, v[2] / n};
    }
}

// Unit centres and radius ranges for the layout.
inline std::vector<Unit> place_units(const SynthConfig& cfg, const VoxelGrid& g, Rng& rng) {
    std::vector<Unit> units;
    const Vec3 c = grid_center(g);
    if (cfg.layout != Layout::Blobs) {
        Unit u;
        for (int a = 0; a < 3; ++a) u.center[a] = c[a] + uniform(rng, -cfg.center_jitter, cfg.center_jitter);
        u.radius = uniform(rng, cfg.radius_min, cfg.radius_max);
        units.push_back(u);
        return units;
    }
    int per_axis = 1;
    while (per_axis * per_axis * per_axis < cfg.blobs) ++per_axis;
    for (int b = 0; b < cfg.blobs; ++b) {
        const int ix = b % per_axis, iy = (b / per_axis) % per_axis, iz = b / (per_axis * per_axis);
        const std::array<int, 3> cell{ix, iy, iz};
        Unit u;
        for (int a = 0; a < 3; ++a) {
            const double extent = static_cast<double>(g.dims()[a] - 1) * g.spacing()[a];
            const double w = extent / per_axis;
            u.center[a] = (cell[a] + 0.5) * w + uniform(rng, -cfg.center_jitter, cfg.center_jitter);
        }
        u.radius = uniform(rng, cfg.blob_radius_min, cfg.blob_radius_max);
        units.push_back(u);
    }
    return units;
}

// Radial window: 1 up to r0, cosine falloff to 0 at r0 + width.
inline double window(double r, double r0, double width) {
    if (r <= r0) return 1.0;
    if (r >= r0 + width) return 0.0;
    return 0.5 * (1.0 + std::cos(3.141592653589793 * (r - r0) / width));
}

inline std::vector<double> gaussian_kernel(double sigma) {
    const int rad = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * rad + 1);
    double s = 0.0;
    for (int i = -rad; i <= rad; ++i) s += k[i + rad] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= s;
    return k;
}

// Separable Gaussian blur with clamped borders.
inline void blur(std::vector<double>& v, const VoxelGrid& g, double sigma) {
    const auto k = gaussian_kernel(sigma);
    const long rad = static_cast<long>(k.size() / 2);
    std::vector<double> line, out;
    for (int axis = 0; axis < 3; ++axis) {
        const long n = static_cast<long>(g.dims()[axis]);
        const std::size_t step = g.stride(axis);
        line.resize(static_cast<std::size_t>(n));
        out.resize(static_cast<std::size_t>(n));
        for (std::size_t start = 0; start < v.size(); ++start) {
            if (g.coords(start)[axis] != 0) continue;
            for (long i = 0; i < n; ++i) line[static_cast<std::size_t>(i)] = v[start + static_cast<std::size_t>(i) * step];
            for (long i = 0; i < n; ++i) {
                double acc = 0.0;
                for (long o = -rad; o <= rad; ++o)
                    acc += k[static_cast<std::size_t>(o + rad)] * line[static_cast<std::size_t>(std::clamp(i + o, 0L, n - 1))];
                out[static_cast<std::size_t>(i)] = acc;
            }
            for (long i = 0; i < n; ++i) v[start + static_cast<std::size_t>(i) * step] = out[static_cast<std::size_t>(i)];
        }
    }
}

struct Texture {
    std::vector<Vec3> k;
    std::vector<double> phase;

    double operator()(const Vec3& x) const {
        double s = 0.0;
        for (std::size_t m = 0; m < k.size(); ++m) s += std::cos(k[m][0] * x[0] + k[m][1] * x[1] + k[m][2] * x[2] + phase[m]);
        return k.empty() ? 0.0 : s / std::sqrt(static_cast<double>(k.size()));
    }
};

// Supersampled integral of J over the voxels of `label` in mL; nullopt if
// J <= 0 at any sample.
inline std::optional<double> integrate_jacobian(const AnalyticField& f, const LabelMap& labels, LabelId label,
                                                int K) {
    const auto& g = labels.grid();
    const auto& h = g.spacing();
    std::vector<double> offs(static_cast<std::size_t>(K));
    for (int s = 0; s < K; ++s) offs[static_cast<std::size_t>(s)] = (s + 0.5) / K - 0.5;
    double total = 0.0;
    for (std::size_t n = 0; n < g.size(); ++n) {
        if (labels[n] != label) continue;
        const auto c = g.coords(n);
        const Vec3 p = g.position(c[0], c[1], c[2]);
        double acc = 0.0;
        for (double oz : offs)
            for (double oy : offs)
                for (double ox : offs) {
                    const double J = f.jacobian({p[0] + ox * h[0], p[1] + oy * h[1], p[2] + oz * h[2]});
                    if (!(J > 0.0)) return std::nullopt;
                    acc += J;
                }
        total += acc / static_cast<double>(K * K * K);
    }
    return total * g.voxel_volume() / kMm3PerMl;
}

inline DisplacementField sample_field(const AnalyticField& f, const VoxelGrid& g) {
    DisplacementField out(g);
    for (std::size_t n = 0; n < g.size(); ++n) {
        const auto c = g.coords(n);
        out.set(n, f.value(g.position(c[0], c[1], c[2])));
    }
    return out;
}

inline nlohmann::ordered_json vec_json(const Vec3& v) { return {v[0], v[1], v[2]}; }

} // namespace detail

/// Generates case `index`; depends only on (config, index).
inline SynthCase generate_case(const SynthConfig& cfg, int index) {
    cfg.validate();
    const VoxelGrid g = cfg.grid();
    Rng rng = make_rng(cfg.seed, {static_cast<std::uint64_t>(index)});

    auto units = detail::place_units(cfg, g, rng);

    AnalyticField field;
    field.center = detail::grid_center(g);
    const double s = uniform(rng, cfg.scale_min, cfg.scale_max);
    for (int a = 0; a < 3; ++a) field.scale[a] = s * (1.0 + uniform(rng, -cfg.anisotropy, cfg.anisotropy));
    for (int a = 0; a < 3; ++a) field.translation[a] = uniform(rng, -cfg.translation, cfg.translation);

    std::vector<double> eta(units.size());
    for (std::size_t u = 0; u < units.size(); ++u) {
        eta[u] = uniform01(rng);
        for (int b = 0; b < cfg.bump_count; ++b) {
            Bump bump;
            const Vec3 v = detail::random_in_ball(rng);
            for (int a = 0; a < 3; ++a) bump.center[a] = units[u].center[a] + 0.7 * units[u].radius * v[a];
            bump.support = uniform(rng, cfg.bump_support_min, cfg.bump_support_max) * units[u].radius;
            const double sign = uniform01(rng) < 0.5 ? -1.0 : 1.0;
            bump.amplitude = eta[u] * cfg.bump_amplitude * sign * uniform(rng, 0.5, 1.0);
            field.bumps.push_back(bump);
        }
        if (cfg.swirl_amplitude > 0.0) {
            Swirl sw;
            sw.center = units[u].center;
            sw.axis = detail::random_direction(rng);
            sw.support = uniform(rng, cfg.swirl_support_min, cfg.swirl_support_max) * units[u].radius;
            sw.amplitude = cfg.swirl_amplitude * uniform01(rng);
            field.swirls.push_back(sw);
        }
    }

    // Labels in fixed space.
    LabelMap labels(g);
    for (std::size_t n = 0; n < g.size(); ++n) {
        const auto c = g.coords(n);
        const Vec3 p = g.position(c[0], c[1], c[2]);
        for (std::size_t u = 0; u < units.size(); ++u)
            if (detail::dist2(p, units[u].center) <= units[u].radius * units[u].radius)
                labels[n] = static_cast<LabelId>(u + 1);
    }
    for (std::size_t u = 0; u < units.size(); ++u)
        if (!labels.contains(static_cast<LabelId>(u + 1)))
            throw ValidationError("synth: unit " + std::to_string(u + 1) + " covers no voxel; raise the radius");
    if (cfg.layout == Layout::Shells) {
        labels = shell_partition(labels, 1, cfg.shells);
        try {
            labels.validate_contiguous();
        } catch (const ValidationError&) {
            throw ValidationError("synth: ball too small for " + std::to_string(cfg.shells) + " non-empty shells");
        }
        if (labels.labels().size() != static_cast<std::size_t>(cfg.shells))
            throw ValidationError("synth: ball too small for " + std::to_string(cfg.shells) + " non-empty shells");
        for (int l = 1; l <= cfg.shells; ++l) units[0].labels.push_back(static_cast<LabelId>(l));
    } else {
        for (std::size_t u = 0; u < units.size(); ++u) units[u].labels = {static_cast<LabelId>(u + 1)};
    }
    const auto label_ids = labels.labels();

    // Ground truth; damp the non-affine part until J_true > 0 everywhere it is integrated.
    std::vector<double> y_true(label_ids.size());
    int retries = 0;
    for (;; ++retries) {
        bool ok = true;
        for (std::size_t l = 0; l < label_ids.size() && ok; ++l) {
            if (field.affine_only()) {
                y_true[l] = field.affine_det() * mask_volume(labels, label_ids[l]);
            } else {
                const auto v = detail::integrate_jacobian(field, labels, label_ids[l], cfg.supersample);
                if (v) y_true[l] = *v;
                ok = v.has_value();
            }
        }
        if (ok) break;
        if (retries >= cfg.max_retries)
            throw ValidationError("synth: case " + std::to_string(index) +
                                  " still folds after damping; reduce bump or swirl amplitude");
        for (auto& b : field.bumps) b.amplitude *= 0.5;
        for (auto& sw : field.swirls) sw.amplitude *= 0.5;
    }

    DisplacementField u_true = detail::sample_field(field, g);
    io::round_to_f32(u_true.data());

    // Heterogeneity driver per unit.
    std::optional<ScalarVolume> curl;
    if (cfg.driver == Driver::CurlMean) curl = curl_magnitude(u_true);
    for (auto& unit : units) {
        std::vector<double> vals;
        if (cfg.driver == Driver::LogJacobianStd) {
            for (std::size_t n = 0; n < g.size(); ++n) {
                if (std::find(unit.labels.begin(), unit.labels.end(), labels[n]) == unit.labels.end()) continue;
                const auto c = g.coords(n);
                vals.push_back(std::log(field.jacobian(g.position(c[0], c[1], c[2]))));
            }
            unit.heterogeneity = stats::stddev(vals);
        } else {
            LabelMap unit_map(g);
            for (std::size_t n = 0; n < g.size(); ++n)
                if (std::find(unit.labels.begin(), unit.labels.end(), labels[n]) != unit.labels.end()) unit_map[n] = 1;
            RegionSpec band{RegionMode::BoundaryBand, 1, cfg.driver_band_radius, BandSide::Both};
            for (auto n : resolve_region(unit_map, band)) vals.push_back((*curl)[n]);
            unit.heterogeneity = stats::mean(vals);
        }
        unit.amplitude = cfg.a0 * (1.0 + cfg.gamma * unit.heterogeneity);
        unit.strain_noise = cfg.strain_noise * normal(rng);
    }

    // Estimated field: per-unit radial strain plus smooth random displacement.
    std::array<std::vector<double>, 3> noise;
    for (auto& comp : noise) {
        comp.resize(g.size());
        for (auto& v : comp) v = normal(rng);
        detail::blur(comp, g, cfg.noise_smoothness);
    }
    double rms = 0.0;
    for (std::size_t n = 0; n < g.size(); ++n)
        rms += noise[0][n] * noise[0][n] + noise[1][n] * noise[1][n] + noise[2][n] * noise[2][n];
    rms = std::sqrt(rms / static_cast<double>(g.size()));
    const double noise_gain = rms > 0.0 ? cfg.noise_field_amplitude / rms : 0.0;

    DisplacementField u_est(g);
    for (std::size_t n = 0; n < g.size(); ++n) {
        const auto c = g.coords(n);
        const Vec3 p = g.position(c[0], c[1], c[2]);
        Vec3 pert{noise_gain * noise[0][n], noise_gain * noise[1][n], noise_gain * noise[2][n]};
        for (const auto& unit : units) {
            const double r = std::sqrt(detail::dist2(p, unit.center));
            const double w = detail::window(r, unit.radius + cfg.window_margin, cfg.window_falloff);
            if (w == 0.0) continue;
            const double strain = (unit.amplitude + unit.strain_noise) * w;
            for (int a = 0; a < 3; ++a) pert[a] += strain * (p[a] - unit.center[a]);
        }
        const Vec3 ut = u_true.at(n);
        u_est.set(n, {ut[0] + pert[0], ut[1] + pert[1], ut[2] + pert[2]});
    }
    io::round_to_f32(u_est.data());

    // Intensities: fixed = T(x) + noise, moving(y) = T(y - u_true(y)) + noise.
    detail::Texture tex;
    for (int m = 0; m < cfg.texture_waves; ++m) {
        const Vec3 dir = detail::random_direction(rng);
        const double kmag = 6.283185307179586 / uniform(rng, cfg.texture_wavelength_min, cfg.texture_wavelength_max);
        tex.k.push_back({kmag * dir[0], kmag * dir[1], kmag * dir[2]});
        tex.phase.push_back(uniform(rng, 0.0, 6.283185307179586));
    }
    ScalarVolume fixed(g), moving(g);
    for (std::size_t n = 0; n < g.size(); ++n) {
        const auto c = g.coords(n);
        const Vec3 p = g.position(c[0], c[1], c[2]);
        fixed[n] = tex(p) + cfg.intensity_noise * normal(rng);
        const Vec3 ut = field.value(p);
        moving[n] = tex({p[0] - ut[0], p[1] - ut[1], p[2] - ut[2]}) + cfg.intensity_noise * normal(rng);
    }
    io::round_to_f32(fixed.data());
    io::round_to_f32(moving.data());

    SynthCase out;
    out.case_id = case_name(index);
    out.index = index;
    out.fixed = std::move(fixed);
    out.moving = std::move(moving);
    out.u_true = std::move(u_true);
    out.u_est = std::move(u_est);
    out.labels = std::move(labels);
    out.y_true = std::move(y_true);
    out.latent.assign(out.y_true.size(), 0.0);
    for (const auto& unit : units)
        for (auto l : unit.labels) out.latent[l - 1] = unit.amplitude;

    auto& pv = out.provenance;
    pv["family"] = field.affine_only() ? "affine" : (field.swirls.empty() ? "affine+bumps" : "affine+bumps+swirls");
    pv["seed"] = cfg.seed;
    pv["index"] = index;
    pv["damping_retries"] = retries;
    pv["affine_scale"] = detail::vec_json(field.scale);
    pv["translation"] = detail::vec_json(field.translation);
    auto& pu = pv["units"] = nlohmann::ordered_json::array();
    for (std::size_t u = 0; u < units.size(); ++u) {
        nlohmann::ordered_json ju;
        ju["center"] = detail::vec_json(units[u].center);
        ju["radius"] = units[u].radius;
        ju["heterogeneity_draw"] = eta[u];
        ju["driver"] = units[u].heterogeneity;
        ju["strain"] = units[u].amplitude;
        ju["strain_noise"] = units[u].strain_noise;
        ju["labels"] = units[u].labels;
        pu.push_back(ju);
    }
    auto& pb = pv["bumps"] = nlohmann::ordered_json::array();
    for (const auto& b : field.bumps)
        pb.push_back({{"center", detail::vec_json(b.center)}, {"support", b.support}, {"amplitude", b.amplitude}});
    auto& ps = pv["swirls"] = nlohmann::ordered_json::array();
    for (const auto& sw : field.swirls)
        ps.push_back({{"center", detail::vec_json(sw.center)},
                      {"axis", detail::vec_json(sw.axis)},
                      {"support", sw.support},
                      {"amplitude", sw.amplitude}});
    pv["noise_field_rms"] = cfg.noise_field_amplitude;
    return out;
}

// ---- config <-> json ------------------------------------------------------

inline nlohmann::ordered_json to_json(const SynthConfig& c) {
    nlohmann::ordered_json j;
    j["dims"] = {c.dims[0], c.dims[1], c.dims[2]};
    j["spacing"] = {c.spacing[0], c.spacing[1], c.spacing[2]};
    j["cases"] = c.cases;
    j["seed"] = c.seed;
    j["layout"] = layout_name(c.layout);
    j["shells"] = c.shells;
    j["blobs"] = c.blobs;
    j["radius_min"] = c.radius_min;
    j["radius_max"] = c.radius_max;
    j["blob_radius_min"] = c.blob_radius_min;
    j["blob_radius_max"] = c.blob_radius_max;
    j["center_jitter"] = c.center_jitter;
    j["scale_min"] = c.scale_min;
    j["scale_max"] = c.scale_max;
    j["anisotropy"] = c.anisotropy;
    j["translation"] = c.translation;
    j["bump_count"] = c.bump_count;
    j["bump_amplitude"] = c.bump_amplitude;
    j["bump_support_min"] = c.bump_support_min;
    j["bump_support_max"] = c.bump_support_max;
    j["swirl_amplitude"] = c.swirl_amplitude;
    j["swirl_support_min"] = c.swirl_support_min;
    j["swirl_support_max"] = c.swirl_support_max;
    j["a0"] = c.a0;
    j["gamma"] = c.gamma;
    j["driver"] = driver_name(c.driver);
    j["driver_band_radius"] = c.driver_band_radius;
    j["strain_noise"] = c.strain_noise;
    j["noise_field_amplitude"] = c.noise_field_amplitude;
    j["noise_smoothness"] = c.noise_smoothness;
    j["window_margin"] = c.window_margin;
    j["window_falloff"] = c.window_falloff;
    j["intensity_noise"] = c.intensity_noise;
    j["texture_wavelength_min"] = c.texture_wavelength_min;
    j["texture_wavelength_max"] = c.texture_wavelength_max;
    j["texture_waves"] = c.texture_waves;
    j["supersample"] = c.supersample;
    j["max_retries"] = c.max_retries;
    return j;
}

/// Applies the keys present in `j` on top of `base`; unknown keys are errors.
inline SynthConfig config_from_json(const nlohmann::ordered_json& j, SynthConfig c = {}) {
    try {
        const auto known = to_json(c);
        for (auto it = j.begin(); it != j.end(); ++it)
            if (!known.contains(it.key())) throw ValidationError("unknown synth config key '" + it.key() + "'");
        if (j.contains("dims")) {
            const auto d = j["dims"].get<std::vector<std::size_t>>();
            if (d.size() != 3) throw ValidationError("dims needs 3 entries");
            c.dims = {d[0], d[1], d[2]};
        }
        if (j.contains("spacing")) {
            const auto s = j["spacing"].get<std::vector<double>>();
            if (s.size() != 3) throw ValidationError("spacing needs 3 entries");
            c.spacing = {s[0], s[1], s[2]};
        }
        const auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
        };
        get("cases", c.cases);
        get("seed", c.seed);
        if (j.contains("layout")) c.layout = parse_layout(j["layout"].get<std::string>());
        get("shells", c.shells);
        get("blobs", c.blobs);
        get("radius_min", c.radius_min);
        get("radius_max", c.radius_max);
        get("blob_radius_min", c.blob_radius_min);
        get("blob_radius_max", c.blob_radius_max);
        get("center_jitter", c.center_jitter);
        get("scale_min", c.scale_min);
        get("scale_max", c.scale_max);
        get("anisotropy", c.anisotropy);
        get("translation", c.translation);
        get("bump_count", c.bump_count);
        get("bump_amplitude", c.bump_amplitude);
        get("bump_support_min", c.bump_support_min);
        get("bump_support_max", c.bump_support_max);
        get("swirl_amplitude", c.swirl_amplitude);
        get("swirl_support_min", c.swirl_support_min);
        get("swirl_support_max", c.swirl_support_max);
        get("a0", c.a0);
        get("gamma", c.gamma);
        if (j.contains("driver")) c.driver = parse_driver(j["driver"].get<std::string>());
        get("driver_band_radius", c.driver_band_radius);
        get("strain_noise", c.strain_noise);
        get("noise_field_amplitude", c.noise_field_amplitude);
        get("noise_smoothness", c.noise_smoothness);
        get("window_margin", c.window_margin);
        get("window_falloff", c.window_falloff);
        get("intensity_noise", c.intensity_noise);
        get("texture_wavelength_min", c.texture_wavelength_min);
        get("texture_wavelength_max", c.texture_wavelength_max);
        get("texture_waves", c.texture_waves);
        get("supersample", c.supersample);
        get("max_retries", c.max_retries);
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed synth config: ") + e.what());
    }
}

// ---- dataset directory ----------------------------------------------------

inline constexpr int kDatasetVersion = 1;

/// Manifest-level view of a dataset directory; cases load one at a time.
struct DatasetIndex {
    std::filesystem::path dir;
    SynthConfig config;
    std::vector<std::string> case_ids;
    std::vector<nlohmann::ordered_json> entries;

    std::size_t size() const noexcept { return case_ids.size(); }
};

inline void write_case(const SynthCase& c, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    io::write_volume(dir / "fixed", c.fixed);
    io::write_volume(dir / "moving", c.moving);
    io::write_field(dir / "u_true", c.u_true);
    io::write_field(dir / "u_est", c.u_est);
    io::write_labels(dir / "labels", c.labels);
}

inline nlohmann::ordered_json manifest_entry(const SynthCase& c) {
    nlohmann::ordered_json e;
    e["case_id"] = c.case_id;
    e["index"] = c.index;
    e["y_true_ml"] = c.y_true;
    e["latent"] = c.latent;
    e["provenance"] = c.provenance;
    return e;
}

namespace detail {

inline void write_index(const std::filesystem::path& dir, const SynthConfig& config,
                        const std::vector<nlohmann::ordered_json>& entries) {
    nlohmann::ordered_json m;
    m["format"] = "convolt-dataset";
    m["version"] = kDatasetVersion;
    m["config"] = to_json(config);
    m["cases"] = entries;
    {
        std::ofstream os(dir / "manifest.json");
        if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
        os << m.dump(2) << '\n';
        if (!os) throw IoError("write failed: " + (dir / "manifest.json").string());
    }
    std::ofstream os(dir / "cases.csv");
    if (!os) throw IoError("cannot write " + (dir / "cases.csv").string());
    os << "case_id,label_id,y_true_ml,latent\n";
    for (const auto& e : entries) {
        const auto y = e.at("y_true_ml").get<std::vector<double>>();
        const auto lat = e.at("latent").get<std::vector<double>>();
        for (std::size_t l = 0; l < y.size(); ++l)
            os << e.at("case_id").get<std::string>() << ',' << l + 1 << ',' << csv::format_double(y[l]) << ','
               << csv::format_double(lat[l]) << '\n';
    }
    if (!os) throw IoError("write failed: " + (dir / "cases.csv").string());
}

} // namespace detail

/// Writes manifest.json, cases.csv and one subdirectory per case.
inline void write_dataset(const std::vector<SynthCase>& cases, const std::filesystem::path& dir,
                          const SynthConfig& config) {
    std::filesystem::create_directories(dir);
    std::vector<nlohmann::ordered_json> entries;
    for (const auto& c : cases) {
        write_case(c, dir / c.case_id);
        entries.push_back(manifest_entry(c));
    }
    detail::write_index(dir, config, entries);
}

/// Generates all cases of `config` straight to disk, holding at most `jobs`
/// cases in memory.
inline void generate_dataset(const SynthConfig& config, const std::filesystem::path& dir, unsigned jobs = 1) {
    config.validate();
    std::filesystem::create_directories(dir);
    std::vector<nlohmann::ordered_json> entries(static_cast<std::size_t>(config.cases));
    parallel_for(entries.size(), jobs, [&](std::size_t i) {
        const auto c = generate_case(config, static_cast<int>(i));
        write_case(c, dir / c.case_id);
        entries[i] = manifest_entry(c);
    });
    detail::write_index(dir, config, entries);
}

inline DatasetIndex open_dataset(const std::filesystem::path& dir) {
    const auto mpath = dir / "manifest.json";
    std::ifstream is(mpath);
    if (!is) throw IoError("cannot open " + mpath.string() + " (not a dataset directory?)");
    DatasetIndex idx;
    idx.dir = dir;
    try {
        const auto m = nlohmann::ordered_json::parse(is);
        if (m.at("format") != "convolt-dataset") throw IoError(mpath.string() + ": not a convolt dataset manifest");
        const int version = m.at("version").get<int>();
        if (version != kDatasetVersion)
            throw IoError(mpath.string() + ": dataset version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kDatasetVersion) + ")");
        idx.config = config_from_json(m.at("config"));
        for (const auto& e : m.at("cases")) {
            idx.case_ids.push_back(e.at("case_id").get<std::string>());
            idx.entries.push_back(e);
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(mpath.string() + ": malformed manifest: " + e.what());
    }
    if (idx.case_ids.empty()) throw IoError(mpath.string() + ": dataset lists no cases");
    return idx;
}

inline SynthCase load_case(const DatasetIndex& idx, std::size_t i) {
    const auto& e = idx.entries.at(i);
    SynthCase c;
    c.case_id = idx.case_ids[i];
    const auto dir = idx.dir / c.case_id;
    c.fixed = io::read_volume(dir / "fixed");
    c.moving = io::read_volume(dir / "moving");
    c.u_true = io::read_field(dir / "u_true");
    c.u_est = io::read_field(dir / "u_est");
    c.labels = io::read_labels(dir / "labels");
    try {
        c.index = e.at("index").get<int>();
        c.y_true = e.at("y_true_ml").get<std::vector<double>>();
        c.latent = e.at("latent").get<std::vector<double>>();
        c.provenance = e.at("provenance");
    } catch (const nlohmann::json::exception& ex) {
        throw IoError((idx.dir / "manifest.json").string() + ": malformed entry for " + c.case_id + ": " + ex.what());
    }
    const auto g = idx.config.grid();
    const std::string where = (idx.dir / "manifest.json").string() + ": case " + c.case_id;
    if (!(c.fixed.grid() == g) || !(c.moving.grid() == g) || !(c.u_true.grid() == g) || !(c.u_est.grid() == g) ||
        !(c.labels.grid() == g))
        throw IoError(where + ": volume grid disagrees with the manifest config");
    if (c.labels.labels().size() != c.y_true.size() || c.latent.size() != c.y_true.size())
        throw IoError(where + ": label count disagrees with manifest targets");
    return c;
}

inline std::vector<SynthCase> read_dataset(const std::filesystem::path& dir) {
    const auto idx = open_dataset(dir);
    std::vector<SynthCase> out;
    for (std::size_t i = 0; i < idx.size(); ++i) out.push_back(load_case(idx, i));
    return out;
}

} // namespace convolt::synth

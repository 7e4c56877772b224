#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "convolt/error.hpp"

namespace convolt {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<std::array<double, 3>, 3>;
using Index3 = std::array<std::size_t, 3>;

/**
 * Regular voxel lattice with physical spacing in mm.
 *
 * Voxel (i, j, k) sits at physical position (i*dx, j*dy, k*dz) and has flat
 * index i + nx*(j + ny*k) (x fastest).
 */
class VoxelGrid {
public:
    VoxelGrid() = default;

    VoxelGrid(Index3 dims, Vec3 spacing) : dims_(dims), spacing_(spacing) {
        for (int a = 0; a < 3; ++a) {
            if (dims_[a] < 3) {
                throw ValidationError("grid dimension " + std::to_string(a) + " is " + std::to_string(dims_[a]) +
                                      "; every dimension must be >= 3");
            }
            if (!(spacing_[a] > 0.0) || !std::isfinite(spacing_[a])) {
                throw ValidationError("grid spacing component " + std::to_string(a) + " must be finite and > 0");
            }
        }
    }

    const Index3& dims() const noexcept { return dims_; }
    const Vec3& spacing() const noexcept { return spacing_; }
    std::size_t nx() const noexcept { return dims_[0]; }
    std::size_t ny() const noexcept { return dims_[1]; }
    std::size_t nz() const noexcept { return dims_[2]; }
    std::size_t size() const noexcept { return dims_[0] * dims_[1] * dims_[2]; }

    /// Voxel volume in mm^3.
    double voxel_volume() const noexcept { return spacing_[0] * spacing_[1] * spacing_[2]; }

    std::size_t index(std::size_t i, std::size_t j, std::size_t k) const noexcept {
        return i + dims_[0] * (j + dims_[1] * k);
    }

    Index3 coords(std::size_t flat) const noexcept {
        return {flat % dims_[0], (flat / dims_[0]) % dims_[1], flat / (dims_[0] * dims_[1])};
    }

    std::size_t stride(int axis) const noexcept {
        return axis == 0 ? 1 : axis == 1 ? dims_[0] : dims_[0] * dims_[1];
    }

    Vec3 position(std::size_t i, std::size_t j, std::size_t k) const noexcept {
        return {static_cast<double>(i) * spacing_[0], static_cast<double>(j) * spacing_[1],
                static_cast<double>(k) * spacing_[2]};
    }

    /// True when (i, j, k) has a neighbour on both sides along every axis.
    bool interior(std::size_t i, std::size_t j, std::size_t k) const noexcept {
        return i > 0 && j > 0 && k > 0 && i + 1 < dims_[0] && j + 1 < dims_[1] && k + 1 < dims_[2];
    }

    friend bool operator==(const VoxelGrid&, const VoxelGrid&) = default;

private:
    Index3 dims_{3, 3, 3};
    Vec3 spacing_{1.0, 1.0, 1.0};
};

inline std::string describe_voxel(const VoxelGrid& grid, std::size_t flat) {
    const auto c = grid.coords(flat);
    std::ostringstream os;
    os << "voxel (" << c[0] << ", " << c[1] << ", " << c[2] << ")";
    return os.str();
}

/// Per-voxel scalar on a grid.
class ScalarVolume {
public:
    ScalarVolume() = default;

    explicit ScalarVolume(VoxelGrid grid, double fill = 0.0) : grid_(grid), data_(grid.size(), fill) {}

    ScalarVolume(VoxelGrid grid, std::vector<double> data) : grid_(grid), data_(std::move(data)) {
        if (data_.size() != grid_.size()) {
            throw ValidationError("scalar volume has " + std::to_string(data_.size()) + " values, grid needs " +
                                  std::to_string(grid_.size()));
        }
        for (std::size_t n = 0; n < data_.size(); ++n) {
            if (!std::isfinite(data_[n])) {
                throw ValidationError("non-finite scalar value at " + describe_voxel(grid_, n));
            }
        }
    }

    const VoxelGrid& grid() const noexcept { return grid_; }
    const std::vector<double>& data() const noexcept { return data_; }
    std::vector<double>& data() noexcept { return data_; }
    double operator[](std::size_t n) const noexcept { return data_[n]; }
    double& operator[](std::size_t n) noexcept { return data_[n]; }
    double at(std::size_t i, std::size_t j, std::size_t k) const noexcept { return data_[grid_.index(i, j, k)]; }

private:
    VoxelGrid grid_;
    std::vector<double> data_;
};

/// Per-voxel displacement (mm), components interleaved: data[3*n + c].
class DisplacementField {
public:
    DisplacementField() = default;

    explicit DisplacementField(VoxelGrid grid) : grid_(grid), data_(3 * grid.size(), 0.0) {}

    DisplacementField(VoxelGrid grid, std::vector<double> data) : grid_(grid), data_(std::move(data)) {
        if (data_.size() != 3 * grid_.size()) {
            throw ValidationError("displacement field has " + std::to_string(data_.size()) +
                                  " values, grid needs " + std::to_string(3 * grid_.size()));
        }
        for (std::size_t n = 0; n < data_.size(); ++n) {
            if (!std::isfinite(data_[n])) {
                throw ValidationError("non-finite displacement component " + std::to_string(n % 3) + " at " +
                                      describe_voxel(grid_, n / 3));
            }
        }
    }

    const VoxelGrid& grid() const noexcept { return grid_; }
    const std::vector<double>& data() const noexcept { return data_; }
    std::vector<double>& data() noexcept { return data_; }

    Vec3 at(std::size_t flat) const noexcept { return {data_[3 * flat], data_[3 * flat + 1], data_[3 * flat + 2]}; }
    void set(std::size_t flat, const Vec3& v) noexcept {
        data_[3 * flat] = v[0];
        data_[3 * flat + 1] = v[1];
        data_[3 * flat + 2] = v[2];
    }

private:
    VoxelGrid grid_;
    std::vector<double> data_;
};

namespace detail {

// d/dx_axis of a strided sequence at position `pos` along `axis`; central in
// the interior, one-sided on the boundary faces.
inline double partial(const double* base, std::size_t flat, std::size_t pos, std::size_t n, std::size_t step,
                      double h) noexcept {
    if (pos == 0) return (base[(flat + step)] - base[flat]) / h;
    if (pos + 1 == n) return (base[flat] - base[flat - step]) / h;
    return (base[flat + step] - base[flat - step]) / (2.0 * h);
}

} // namespace detail

/// G[a][b] = d u_a / d x_b at voxel (i, j, k).
inline Mat3 displacement_gradient(const DisplacementField& field, std::size_t i, std::size_t j, std::size_t k) {
    const auto& g = field.grid();
    const std::size_t flat = g.index(i, j, k);
    const Index3 pos{i, j, k};
    Mat3 G{};
    for (int b = 0; b < 3; ++b) {
        const std::size_t step = 3 * g.stride(b);
        for (int a = 0; a < 3; ++a) {
            G[a][b] = detail::partial(field.data().data() + a, 3 * flat, pos[b], g.dims()[b], step, g.spacing()[b]);
        }
    }
    return G;
}

inline Vec3 scalar_gradient(const ScalarVolume& vol, std::size_t i, std::size_t j, std::size_t k) {
    const auto& g = vol.grid();
    const std::size_t flat = g.index(i, j, k);
    const Index3 pos{i, j, k};
    Vec3 out{};
    for (int b = 0; b < 3; ++b) {
        out[b] = detail::partial(vol.data().data(), flat, pos[b], g.dims()[b], g.stride(b), g.spacing()[b]);
    }
    return out;
}

inline double det3(const Mat3& m) noexcept {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

namespace detail {

template <typename Fn>
ScalarVolume map_field_gradient(const DisplacementField& field, Fn&& fn) {
    const auto& g = field.grid();
    ScalarVolume out(g);
    for (std::size_t k = 0; k < g.nz(); ++k)
        for (std::size_t j = 0; j < g.ny(); ++j)
            for (std::size_t i = 0; i < g.nx(); ++i)
                out[g.index(i, j, k)] = fn(displacement_gradient(field, i, j, k));
    return out;
}

} // namespace detail

/// det(I + grad u) per voxel.
inline ScalarVolume jacobian_determinant(const DisplacementField& field) {
    return detail::map_field_gradient(field, [](Mat3 G) {
        for (int a = 0; a < 3; ++a) G[a][a] += 1.0;
        return det3(G);
    });
}

inline ScalarVolume divergence(const DisplacementField& field) {
    return detail::map_field_gradient(field, [](const Mat3& G) { return G[0][0] + G[1][1] + G[2][2]; });
}

inline ScalarVolume curl_magnitude(const DisplacementField& field) {
    return detail::map_field_gradient(field, [](const Mat3& G) {
        const double cx = G[2][1] - G[1][2];
        const double cy = G[0][2] - G[2][0];
        const double cz = G[1][0] - G[0][1];
        return std::sqrt(cx * cx + cy * cy + cz * cz);
    });
}

inline constexpr double kDefaultLogJacobianFloor = 1e-6;

/// |grad log(max(J, floor))| per voxel.
inline ScalarVolume grad_log_jacobian_magnitude(const ScalarVolume& jac, double floor = kDefaultLogJacobianFloor) {
    if (!(floor > 0.0)) throw ValidationError("log-Jacobian floor must be > 0");
    const auto& g = jac.grid();
    ScalarVolume logj(g);
    for (std::size_t n = 0; n < g.size(); ++n) logj[n] = std::log(std::max(jac[n], floor));
    ScalarVolume out(g);
    for (std::size_t k = 0; k < g.nz(); ++k)
        for (std::size_t j = 0; j < g.ny(); ++j)
            for (std::size_t i = 0; i < g.nx(); ++i) {
                const Vec3 d = scalar_gradient(logj, i, j, k);
                out[g.index(i, j, k)] = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
            }
    return out;
}

/// Trilinear sample at continuous index coordinates, clamped to the lattice.
inline double sample_trilinear(const ScalarVolume& vol, double fi, double fj, double fk) noexcept {
    const auto& g = vol.grid();
    const std::array<double, 3> f{fi, fj, fk};
    std::array<std::size_t, 3> lo{};
    std::array<std::size_t, 3> hi{};
    std::array<double, 3> t{};
    for (int a = 0; a < 3; ++a) {
        const double maxc = static_cast<double>(g.dims()[a] - 1);
        const double c = std::clamp(f[a], 0.0, maxc);
        const double fl = std::floor(c);
        lo[a] = static_cast<std::size_t>(fl);
        hi[a] = std::min(lo[a] + 1, g.dims()[a] - 1);
        t[a] = c - fl;
    }
    const auto v = [&](std::size_t i, std::size_t j, std::size_t k) { return vol.at(i, j, k); };
    const double c00 = v(lo[0], lo[1], lo[2]) * (1.0 - t[0]) + v(hi[0], lo[1], lo[2]) * t[0];
    const double c10 = v(lo[0], hi[1], lo[2]) * (1.0 - t[0]) + v(hi[0], hi[1], lo[2]) * t[0];
    const double c01 = v(lo[0], lo[1], hi[2]) * (1.0 - t[0]) + v(hi[0], lo[1], hi[2]) * t[0];
    const double c11 = v(lo[0], hi[1], hi[2]) * (1.0 - t[0]) + v(hi[0], hi[1], hi[2]) * t[0];
    const double c0 = c00 * (1.0 - t[1]) + c10 * t[1];
    const double c1 = c01 * (1.0 - t[1]) + c11 * t[1];
    return c0 * (1.0 - t[2]) + c1 * t[2];
}

/// out(x) = moving(x + u(x)), sampled trilinearly in physical coordinates.
inline ScalarVolume warp_image(const ScalarVolume& moving, const DisplacementField& field) {
    if (!(moving.grid() == field.grid())) throw ValidationError("warp_image: image and field grids differ");
    const auto& g = moving.grid();
    const auto& h = g.spacing();
    ScalarVolume out(g);
    for (std::size_t k = 0; k < g.nz(); ++k)
        for (std::size_t j = 0; j < g.ny(); ++j)
            for (std::size_t i = 0; i < g.nx(); ++i) {
                const std::size_t n = g.index(i, j, k);
                const Vec3 u = field.at(n);
                out[n] = sample_trilinear(moving, static_cast<double>(i) + u[0] / h[0],
                                          static_cast<double>(j) + u[1] / h[1], static_cast<double>(k) + u[2] / h[2]);
            }
    return out;
}

namespace detail {

// Exact 1-D squared distance transform (lower envelope of parabolas),
// d(q) = min_p w2*(q-p)^2 + f(p). Entries equal to +inf are ignored.
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d, double w2, std::vector<std::size_t>& v,
                   std::vector<double>& z) {
    const std::size_t n = f.size();
    constexpr double inf = std::numeric_limits<double>::infinity();
    v.assign(n, 0);
    z.assign(n + 1, 0.0);
    std::size_t kk = 0;
    bool any = false;
    for (std::size_t q = 0; q < n; ++q) {
        if (f[q] == inf) continue;
        if (!any) {
            v[0] = q;
            z[0] = -inf;
            z[1] = inf;
            any = true;
            continue;
        }
        const double fq = f[q] + w2 * static_cast<double>(q) * static_cast<double>(q);
        while (true) {
            const double p = static_cast<double>(v[kk]);
            const double s = (fq - (f[v[kk]] + w2 * p * p)) / (2.0 * w2 * (static_cast<double>(q) - p));
            if (s <= z[kk]) {
                if (kk == 0) {
                    v[0] = q;
                    z[0] = -inf;
                    z[1] = inf;
                    break;
                }
                --kk;
                continue;
            }
            ++kk;
            v[kk] = q;
            z[kk] = s;
            z[kk + 1] = inf;
            break;
        }
    }
    d.assign(n, inf);
    if (!any) return;
    kk = 0;
    for (std::size_t q = 0; q < n; ++q) {
        while (z[kk + 1] < static_cast<double>(q)) ++kk;
        const double dq = static_cast<double>(q) - static_cast<double>(v[kk]);
        d[q] = w2 * dq * dq + f[v[kk]];
    }
}

} // namespace detail

/**
 * Euclidean distance (mm) from each in-mask voxel centre to the nearest
 * out-of-mask voxel centre; 0 outside the mask. Voxels beyond the grid count
 * as background. Separable exact transform, one lower-envelope pass per axis.
 */
inline ScalarVolume distance_to_boundary(const ScalarVolume& mask) {
    const auto& g = mask.grid();
    bool any = false;
    for (double m : mask.data()) {
        if (m != 0.0 && m != 1.0) throw ValidationError("distance_to_boundary: mask values must be 0 or 1");
        any = any || m == 1.0;
    }
    if (!any) throw ValidationError("distance_to_boundary: mask is empty");

    // One background voxel of padding on every side.
    const Index3 pd{g.nx() + 2, g.ny() + 2, g.nz() + 2};
    const auto pidx = [&](std::size_t i, std::size_t j, std::size_t k) { return i + pd[0] * (j + pd[1] * k); };
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> sq(pd[0] * pd[1] * pd[2], 0.0);
    for (std::size_t k = 0; k < g.nz(); ++k)
        for (std::size_t j = 0; j < g.ny(); ++j)
            for (std::size_t i = 0; i < g.nx(); ++i)
                if (mask.at(i, j, k) == 1.0) sq[pidx(i + 1, j + 1, k + 1)] = inf;

    std::vector<double> line, out;
    std::vector<std::size_t> v;
    std::vector<double> z;
    for (int axis = 0; axis < 3; ++axis) {
        const double w2 = g.spacing()[axis] * g.spacing()[axis];
        const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
        for (std::size_t p2 = 0; p2 < pd[a2]; ++p2)
            for (std::size_t p1 = 0; p1 < pd[a1]; ++p1) {
                line.resize(pd[axis]);
                Index3 c{};
                c[a1] = p1;
                c[a2] = p2;
                for (std::size_t q = 0; q < pd[axis]; ++q) {
                    c[axis] = q;
                    line[q] = sq[pidx(c[0], c[1], c[2])];
                }
                detail::edt_1d(line, out, w2, v, z);
                for (std::size_t q = 0; q < pd[axis]; ++q) {
                    c[axis] = q;
                    sq[pidx(c[0], c[1], c[2])] = out[q];
                }
            }
    }

    ScalarVolume dist(g);
    for (std::size_t k = 0; k < g.nz(); ++k)
        for (std::size_t j = 0; j < g.ny(); ++j)
            for (std::size_t i = 0; i < g.nx(); ++i)
                if (mask.at(i, j, k) == 1.0) dist[g.index(i, j, k)] = std::sqrt(sq[pidx(i + 1, j + 1, k + 1)]);
    return dist;
}

} // namespace convolt

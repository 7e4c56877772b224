#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "convolt/grid.hpp"
#include "test_util.hpp"

using namespace convolt;
using testutil::random_field;
using testutil::random_volume;

namespace {

VoxelGrid cube(std::size_t n, Vec3 h = {1, 1, 1}) { return VoxelGrid({n, n, n}, h); }

DisplacementField field_from(const VoxelGrid& g, const auto& fn) {
    DisplacementField f(g);
    for (std::size_t n = 0; n < g.size(); ++n) {
        const auto c = g.coords(n);
        f.set(n, fn(g.position(c[0], c[1], c[2])));
    }
    return f;
}

// Derivative of component `comp` along `axis`, written out per position.
double stencil(const DisplacementField& f, int comp, int axis, std::size_t i, std::size_t j, std::size_t k) {
    const auto& g = f.grid();
    std::array<std::size_t, 3> p{i, j, k};
    const std::size_t n = g.dims()[axis];
    const double h = g.spacing()[axis];
    auto val = [&](std::size_t q) {
        auto pp = p;
        pp[axis] = q;
        return f.data()[3 * g.index(pp[0], pp[1], pp[2]) + comp];
    };
    if (p[axis] == 0) return (val(1) - val(0)) / h;
    if (p[axis] == n - 1) return (val(n - 1) - val(n - 2)) / h;
    return (val(p[axis] + 1) - val(p[axis] - 1)) / (2 * h);
}

double stencil_scalar(const ScalarVolume& v, int axis, std::size_t i, std::size_t j, std::size_t k) {
    const auto& g = v.grid();
    std::array<std::size_t, 3> p{i, j, k};
    const std::size_t n = g.dims()[axis];
    const double h = g.spacing()[axis];
    auto val = [&](std::size_t q) {
        auto pp = p;
        pp[axis] = q;
        return v.at(pp[0], pp[1], pp[2]);
    };
    if (p[axis] == 0) return (val(1) - val(0)) / h;
    if (p[axis] == n - 1) return (val(n - 1) - val(n - 2)) / h;
    return (val(p[axis] + 1) - val(p[axis] - 1)) / (2 * h);
}

// Determinant by cofactor expansion along the first row.
double cofactor_det(const double m[3][3]) {
    double det = 0;
    for (int c = 0; c < 3; ++c) {
        double minor[2][2];
        for (int r = 1; r < 3; ++r) {
            int cc = 0;
            for (int q = 0; q < 3; ++q)
                if (q != c) minor[r - 1][cc++] = m[r][q];
        }
        const double sign = c % 2 == 0 ? 1.0 : -1.0;
        det += sign * m[0][c] * (minor[0][0] * minor[1][1] - minor[0][1] * minor[1][0]);
    }
    return det;
}

} // namespace

TEST(VoxelGrid, RejectsThinDimsAndBadSpacing) {
    EXPECT_THROW(VoxelGrid({2, 5, 5}, {1, 1, 1}), ValidationError);
    EXPECT_THROW(VoxelGrid({5, 5, 5}, {1, 0, 1}), ValidationError);
    EXPECT_THROW(VoxelGrid({5, 5, 5}, {1, 1, -2}), ValidationError);
    EXPECT_DOUBLE_EQ(VoxelGrid({3, 4, 5}, {1, 2, 3}).voxel_volume(), 6.0);
}

TEST(VoxelGrid, FlatIndexIsXFastest) {
    VoxelGrid g({4, 5, 6}, {1, 1, 1});
    EXPECT_EQ(g.index(1, 0, 0), 1u);
    EXPECT_EQ(g.index(0, 1, 0), 4u);
    EXPECT_EQ(g.index(0, 0, 1), 20u);
    const auto c = g.coords(g.index(3, 2, 5));
    EXPECT_EQ(c, (Index3{3, 2, 5}));
}

TEST(Volumes, RejectNonFiniteWithVoxelLocation) {
    auto g = cube(4);
    std::vector<double> d(3 * g.size(), 0.0);
    d[3 * g.index(1, 2, 3) + 1] = std::numeric_limits<double>::quiet_NaN();
    try {
        DisplacementField f(g, d);
        FAIL() << "expected rejection";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("voxel (1, 2, 3)"), std::string::npos) << e.what();
    }
    std::vector<double> s(g.size(), 1.0);
    s[5] = INFINITY;
    EXPECT_THROW(ScalarVolume(g, s), ValidationError);
    EXPECT_THROW(ScalarVolume(g, std::vector<double>(7)), ValidationError);
}

TEST(Jacobian, ZeroFieldIsOne) {
    VoxelGrid g({5, 6, 7}, {0.5, 1, 2});
    const auto J = jacobian_determinant(DisplacementField(g));
    for (double v : J.data()) EXPECT_EQ(v, 1.0);
}

TEST(Jacobian, UniformScalingInterior) {
    auto g = cube(16);
    const double s = 1.1;
    const auto f = field_from(g, [&](Vec3 x) { return Vec3{(s - 1) * x[0], (s - 1) * x[1], (s - 1) * x[2]}; });
    const auto J = jacobian_determinant(f);
    for (std::size_t k = 1; k + 1 < 16; ++k)
        for (std::size_t j = 1; j + 1 < 16; ++j)
            for (std::size_t i = 1; i + 1 < 16; ++i) EXPECT_NEAR(J.at(i, j, k), 1.331, 1e-9);
}

TEST(Jacobian, AffineFieldGivesDetA) {
    VoxelGrid g({9, 10, 11}, {0.7, 1.3, 2.0});
    const double A[3][3] = {{1.05, 0.02, -0.03}, {0.01, 0.93, 0.04}, {-0.02, 0.05, 1.12}};
    const Vec3 b{0.3, -1.2, 2.5};
    const auto f = field_from(g, [&](Vec3 x) {
        Vec3 u{};
        for (int r = 0; r < 3; ++r) {
            u[r] = b[r] - x[r];
            for (int c = 0; c < 3; ++c) u[r] += A[r][c] * x[c];
        }
        return u;
    });
    const double detA = cofactor_det(A);
    const auto J = jacobian_determinant(f);
    // One-sided differences are also exact for linear fields.
    for (double v : J.data()) EXPECT_NEAR(v, detA, 1e-9);
}

TEST(Jacobian, MatchesCofactorOracleOnRandomField) {
    VoxelGrid g({10, 9, 8}, {1.0, 0.8, 1.5});
    const auto f = random_field(g, 7, 0.6);
    const auto J = jacobian_determinant(f);
    double maxdiff = 0;
    for (std::size_t k = 0; k < g.nz(); ++k)
        for (std::size_t j = 0; j < g.ny(); ++j)
            for (std::size_t i = 0; i < g.nx(); ++i) {
                double m[3][3];
                for (int a = 0; a < 3; ++a)
                    for (int b = 0; b < 3; ++b) m[a][b] = (a == b ? 1.0 : 0.0) + stencil(f, a, b, i, j, k);
                maxdiff = std::max(maxdiff, std::abs(cofactor_det(m) - J.at(i, j, k)));
            }
    EXPECT_LT(maxdiff, 1e-12);
}

TEST(Divergence, ZeroAndLinear) {
    auto g = cube(8);
    for (double v : divergence(DisplacementField(g)).data()) EXPECT_EQ(v, 0.0);
    const auto f = field_from(g, [](Vec3 x) { return Vec3{0.1 * x[0], 0.1 * x[1], 0.1 * x[2]}; });
    const auto d = divergence(f);
    for (std::size_t k = 1; k < 7; ++k)
        for (std::size_t j = 1; j < 7; ++j)
            for (std::size_t i = 1; i < 7; ++i) EXPECT_NEAR(d.at(i, j, k), 0.3, 1e-12);
}

TEST(Divergence, IsTraceOfSameStencil) {
    VoxelGrid g({8, 9, 10}, {1.2, 1.0, 0.9});
    const auto f = random_field(g, 11, 0.5);
    const auto d = divergence(f);
    for (std::size_t k = 0; k < g.nz(); ++k)
        for (std::size_t j = 0; j < g.ny(); ++j)
            for (std::size_t i = 0; i < g.nx(); ++i) {
                const double tr = stencil(f, 0, 0, i, j, k) + stencil(f, 1, 1, i, j, k) + stencil(f, 2, 2, i, j, k);
                EXPECT_NEAR(d.at(i, j, k), tr, 1e-12);
            }
}

TEST(Curl, ZeroGradientAndRotation) {
    auto g = cube(9);
    for (double v : curl_magnitude(DisplacementField(g)).data()) EXPECT_EQ(v, 0.0);
    const auto grad = field_from(g, [](Vec3 x) { return Vec3{2 * x[0], 2 * x[1], 2 * x[2]}; });
    const auto rot = field_from(g, [](Vec3 x) { return Vec3{-x[1], x[0], 0.0}; });
    const auto cg = curl_magnitude(grad), cr = curl_magnitude(rot);
    for (std::size_t k = 1; k < 8; ++k)
        for (std::size_t j = 1; j < 8; ++j)
            for (std::size_t i = 1; i < 8; ++i) {
                EXPECT_NEAR(cg.at(i, j, k), 0.0, 1e-9);
                EXPECT_NEAR(cr.at(i, j, k), 2.0, 1e-12);
            }
}

TEST(Curl, MatchesStencilOracle) {
    VoxelGrid g({7, 8, 9}, {1.0, 2.0, 0.5});
    const auto f = random_field(g, 5, 0.8);
    const auto c = curl_magnitude(f);
    for (std::size_t k = 0; k < g.nz(); ++k)
        for (std::size_t j = 0; j < g.ny(); ++j)
            for (std::size_t i = 0; i < g.nx(); ++i) {
                const double cx = stencil(f, 2, 1, i, j, k) - stencil(f, 1, 2, i, j, k);
                const double cy = stencil(f, 0, 2, i, j, k) - stencil(f, 2, 0, i, j, k);
                const double cz = stencil(f, 1, 0, i, j, k) - stencil(f, 0, 1, i, j, k);
                EXPECT_NEAR(c.at(i, j, k), std::sqrt(cx * cx + cy * cy + cz * cz), 1e-12);
            }
}

TEST(GradLogJacobian, ConstantIsZero) {
    auto g = cube(6);
    for (double c : {1.0, 0.37, 4.2}) {
        const auto out = grad_log_jacobian_magnitude(ScalarVolume(g, c));
        for (double v : out.data()) EXPECT_EQ(v, 0.0);
    }
}

TEST(GradLogJacobian, MatchesLogThenStencilOracle) {
    VoxelGrid g({8, 7, 9}, {0.9, 1.1, 1.4});
    auto J = random_volume(g, 3, 0.8, 1.0);
    J[0] = -0.5; // folded voxel exercises the floor
    const double floor = 1e-6;
    const auto out = grad_log_jacobian_magnitude(J, floor);
    ScalarVolume L(g);
    for (std::size_t n = 0; n < g.size(); ++n) L[n] = std::log(std::max(J[n], floor));
    for (std::size_t k = 0; k < g.nz(); ++k)
        for (std::size_t j = 0; j < g.ny(); ++j)
            for (std::size_t i = 0; i < g.nx(); ++i) {
                double s = 0;
                for (int a = 0; a < 3; ++a) s += std::pow(stencil_scalar(L, a, i, j, k), 2);
                EXPECT_NEAR(out.at(i, j, k), std::sqrt(s), 1e-12);
            }
}

TEST(Warp, ZeroFieldIsIdentityBitwise) {
    VoxelGrid g({6, 7, 8}, {1, 1, 1});
    const auto img = random_volume(g, 2);
    const auto out = warp_image(img, DisplacementField(g));
    EXPECT_EQ(out.data(), img.data());
}

TEST(Warp, OneVoxelShiftAlongX) {
    VoxelGrid g({6, 5, 5}, {2, 1, 1});
    const auto img = random_volume(g, 4);
    const auto f = field_from(g, [](Vec3) { return Vec3{2.0, 0, 0}; });
    const auto out = warp_image(img, f);
    for (std::size_t k = 0; k < 5; ++k)
        for (std::size_t j = 0; j < 5; ++j)
            for (std::size_t i = 0; i < 6; ++i)
                EXPECT_EQ(out.at(i, j, k), img.at(std::min<std::size_t>(i + 1, 5), j, k));
}

TEST(Warp, MatchesTrilinearOracle) {
    VoxelGrid g({7, 6, 8}, {1.0, 0.5, 2.0});
    const auto img = random_volume(g, 9);
    const auto f = random_field(g, 10, 3.0);
    const auto out = warp_image(img, f);
    for (std::size_t k = 0; k < g.nz(); ++k)
        for (std::size_t j = 0; j < g.ny(); ++j)
            for (std::size_t i = 0; i < g.nx(); ++i) {
                const auto u = f.at(g.index(i, j, k));
                const double p[3] = {i + u[0] / 1.0, j + u[1] / 0.5, k + u[2] / 2.0};
                double acc = 0;
                // Sum of the eight corner weights.
                int base[3];
                double t[3];
                for (int a = 0; a < 3; ++a) {
                    const double c = std::clamp(p[a], 0.0, double(g.dims()[a] - 1));
                    base[a] = int(std::floor(c));
                    t[a] = c - base[a];
                }
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const double w = (dx ? t[0] : 1 - t[0]) * (dy ? t[1] : 1 - t[1]) * (dz ? t[2] : 1 - t[2]);
                            const std::size_t ii = std::min<std::size_t>(base[0] + dx, g.nx() - 1);
                            const std::size_t jj = std::min<std::size_t>(base[1] + dy, g.ny() - 1);
                            const std::size_t kk = std::min<std::size_t>(base[2] + dz, g.nz() - 1);
                            acc += w * img.at(ii, jj, kk);
                        }
                EXPECT_NEAR(out.at(i, j, k), acc, 1e-12);
            }
}

TEST(Warp, GridMismatchRejected) {
    EXPECT_THROW(warp_image(ScalarVolume(cube(4)), DisplacementField(cube(5))), ValidationError);
}

TEST(DistanceTransform, AllOnesUsesGridBorder) {
    VoxelGrid g({5, 7, 9}, {1, 1, 1});
    const auto d = distance_to_boundary(ScalarVolume(g, 1.0));
    for (std::size_t k = 0; k < g.nz(); ++k)
        for (std::size_t j = 0; j < g.ny(); ++j)
            for (std::size_t i = 0; i < g.nx(); ++i) {
                const double m = std::min({i + 1, 5 - i, j + 1, 7 - j, k + 1, 9 - k});
                EXPECT_DOUBLE_EQ(d.at(i, j, k), m);
            }
}

TEST(DistanceTransform, SingleVoxelIsMinSpacing) {
    VoxelGrid g({5, 5, 5}, {1.5, 0.7, 2.0});
    ScalarVolume m(g);
    m[g.index(2, 2, 2)] = 1;
    const auto d = distance_to_boundary(m);
    EXPECT_DOUBLE_EQ(d.at(2, 2, 2), 0.7);
    EXPECT_EQ(d.at(1, 2, 2), 0.0);
}

TEST(DistanceTransform, MatchesBruteForce) {
    for (unsigned seed : {1u, 2u, 3u}) {
        VoxelGrid g({16, 16, 16}, {1.0, 1.25, 0.8});
        std::mt19937 rng(seed);
        ScalarVolume m(g);
        const auto noise = random_volume(g, seed);
        for (std::size_t n = 0; n < g.size(); ++n) m[n] = noise[n] > -0.1 ? 1.0 : 0.0;
        const auto d = distance_to_boundary(m);
        for (std::size_t n = 0; n < g.size(); ++n) {
            if (m[n] == 0.0) {
                EXPECT_EQ(d[n], 0.0);
                continue;
            }
            const auto c = g.coords(n);
            double best = INFINITY;
            // Background includes the ring just outside the grid.
            for (long k = -1; k <= 16; ++k)
                for (long j = -1; j <= 16; ++j)
                    for (long i = -1; i <= 16; ++i) {
                        const bool outside = i < 0 || j < 0 || k < 0 || i > 15 || j > 15 || k > 15;
                        if (!outside && m.at(i, j, k) == 1.0) continue;
                        const double dx = (i - long(c[0])) * 1.0, dy = (j - long(c[1])) * 1.25,
                                     dz = (k - long(c[2])) * 0.8;
                        best = std::min(best, dx * dx + dy * dy + dz * dz);
                    }
            ASSERT_DOUBLE_EQ(d[n], std::sqrt(best)) << "voxel " << n;
        }
    }
}

TEST(DistanceTransform, LipschitzAndRejections) {
    VoxelGrid g({12, 12, 12}, {1.0, 1.0, 1.0});
    const auto blob = testutil::random_blob(g, 4);
    ScalarVolume m(g);
    for (std::size_t n = 0; n < g.size(); ++n) m[n] = blob[n] ? 1.0 : 0.0;
    const auto d = distance_to_boundary(m);
    for (std::size_t n = 0; n < g.size(); ++n) {
        EXPECT_GE(d[n], 0.0);
        const auto c = g.coords(n);
        if (c[0] + 1 < 12 && m[n] == 1 && m[n + 1] == 1) {
            EXPECT_LE(std::abs(d[n] - d[n + 1]), 1.0 + 1e-12);
        }
    }
    EXPECT_THROW(distance_to_boundary(ScalarVolume(g)), ValidationError);
    ScalarVolume bad(g);
    bad[3] = 0.5;
    EXPECT_THROW(distance_to_boundary(bad), ValidationError);
}

TEST(Operators, Deterministic) {
    auto g = cube(8);
    const auto f = random_field(g, 21);
    EXPECT_EQ(jacobian_determinant(f).data(), jacobian_determinant(f).data());
    EXPECT_EQ(curl_magnitude(f).data(), curl_magnitude(f).data());
}

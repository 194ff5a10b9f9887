#include <catch2/catch_amalgamated.hpp>

#include "microhom/rng.hpp"
#include "microhom/two_scale.hpp"

using namespace microhom;

namespace {

constexpr double kPi = 3.14159265358979323846;

VectorField random_field(const Grid& g, int ncomp, std::uint64_t seed) {
    VectorField f(g, ncomp);
    const CounterRng rng{seed};
    for (std::size_t i = 0; i < f.data.size(); ++i) f.data[i] = rng.uniform(i, -1.0, 1.0);
    return f;
}

} // namespace

TEST_CASE("unfolding is an exact discrete isometry") {
    const Grid g = unit_cell_grid(48);
    const VectorField u = random_field(g, 3, 2024);
    CHECK(isometry_residual(u, 1.0 / 8.0, 2.0) < 1e-13);
    CHECK(isometry_residual(u, 1.0 / 8.0, 4.0) < 1e-13);
    CHECK(isometry_residual(u, 1.0 / 6.0, 2.0) < 1e-13);

    // norms agree, not just the residual bookkeeping
    const TwoScaleField ts = unfold(u, 0.125);
    CHECK(ts_l2_norm(ts) == Catch::Approx(l2_norm(u)).margin(1e-13));
}

TEST_CASE("unfold rejects incompatible scales") {
    const Grid g = unit_cell_grid(48);
    const VectorField u = random_field(g, 1, 3);
    CHECK_THROWS_AS(unfold(u, 0.3), PreconditionError); // 0.3 / (1/48) is not an integer
}

TEST_CASE("fold inverts unfold exactly") {
    const Grid g = unit_cell_grid(24);
    const VectorField u = random_field(g, 3, 77);
    const TwoScaleField ts = unfold(u, 0.25);
    const VectorField back = fold(ts, g);
    CHECK(back.data == u.data);
}

TEST_CASE("unfolding is multiplicative node by node") {
    const Grid g = unit_cell_grid(24);
    const VectorField u = random_field(g, 1, 5);
    const VectorField v = random_field(g, 1, 6);
    VectorField uv = u;
    for (std::size_t i = 0; i < uv.data.size(); ++i) uv.data[i] *= v.data[i];
    const TwoScaleField su = unfold(u, 0.25), sv = unfold(v, 0.25), suv = unfold(uv, 0.25);
    for (std::size_t i = 0; i < suv.data.size(); ++i)
        CHECK(suv.data[i] == su.data[i] * sv.data[i]); // exact: pure re-indexing
}

TEST_CASE("partially covered cells are flagged and zero-extended") {
    Grid g = box_grid({0.0, 0.0, 0.0}, {1.5, 1.0, 1.0}, {18, 12, 12});
    const VectorField u = random_field(g, 1, 9);
    const TwoScaleField ts = unfold(u, 0.5); // 3 blocks of 6 along x? 18/6 = 3 exactly
    CHECK(ts.cells == Int3{3, 2, 2});
    for (std::uint8_t flag : ts.interior) CHECK(flag == 1);

    Grid cut = box_grid({0.0, 0.0, 0.0}, {1.25, 1.0, 1.0}, {15, 12, 12});
    const VectorField v = random_field(cut, 1, 10);
    const TwoScaleField ts2 = unfold(v, 0.5); // 15/6 = 2.5 blocks along x
    CHECK(ts2.cells == Int3{3, 2, 2});
    CHECK(ts2.interior[ts2.cell_flat(0, 0, 0)] == 1);
    CHECK(ts2.interior[ts2.cell_flat(2, 0, 0)] == 0);
    // zero-extension: the isometry still holds because missing samples read 0
    CHECK(std::fabs(ts_lp_power(ts2, 2.0) - lp_power_integral(v, 2.0)) < 1e-13);
}

TEST_CASE("oscillating pairings hit their two-scale limits exactly when aligned") {
    const Grid g = unit_cell_grid(48);
    const double eps = 1.0 / 8.0;

    // u(x) = cos(2 pi x1/eps) e1 against psi(x,z) = cos(2 pi z1) e1: mean of cos^2
    const VectorField u = sample_vec(g, [&](const Vec3& x) {
        return Vec3{std::cos(2.0 * kPi * x[0] / eps), 0.0, 0.0};
    });
    auto psi = [](const Vec3&, const Vec3& z, double* out) {
        out[0] = std::cos(2.0 * kPi * z[0]);
        out[1] = 0.0;
        out[2] = 0.0;
    };
    CHECK(two_scale_pairing(u, eps, psi) == Catch::Approx(0.5).margin(1e-13));

    // the sampled two-scale limit m(x,z) = cos(2 pi z1) e1 pairs identically
    const TwoScaleField m = sample_two_scale(g, eps, 3, [](const Vec3&, const Vec3& z, double* out) {
        out[0] = std::cos(2.0 * kPi * z[0]);
        out[1] = 0.0;
        out[2] = 0.0;
    });
    CHECK(limit_pairing(m, psi) == Catch::Approx(0.5).margin(1e-13));

    // orthogonal oscillation pairs to zero
    auto psi_orth = [](const Vec3&, const Vec3& z, double* out) {
        out[0] = std::sin(2.0 * kPi * z[1]);
        out[1] = 0.0;
        out[2] = 0.0;
    };
    CHECK(two_scale_pairing(u, eps, psi_orth) == Catch::Approx(0.0).margin(1e-13));
}

TEST_CASE("macro-modulated pairing converges to the product of averages") {
    auto psi = [](const Vec3& x, const Vec3& z, double* out) {
        out[0] = (1.0 + x[0] * x[0]) * std::cos(2.0 * kPi * z[0]);
        out[1] = 0.0;
        out[2] = 0.0;
    };
    // u(x) = cos(2 pi x1/eps) e1; limit = 1/2 integral (1 + x1^2) dx = 2/3.
    // Refine eps and the grid together (fixed nodes per cell).
    auto gap = [&](int cells, int n) {
        const Grid g = unit_cell_grid(n);
        const double eps = 1.0 / cells;
        const VectorField u = sample_vec(g, [&](const Vec3& x) {
            return Vec3{std::cos(2.0 * kPi * x[0] / eps), 0.0, 0.0};
        });
        return std::fabs(two_scale_pairing(u, eps, psi) - 2.0 / 3.0);
    };
    const double g1 = gap(4, 48), g2 = gap(8, 96), g3 = gap(16, 192);
    CHECK(g2 < 0.5 * g1);
    CHECK(g3 < 0.5 * g2);
    CHECK(g3 < 1e-3);
}

TEST_CASE("gradient and unfolding commute under matched stencils") {
    const Grid g = unit_cell_grid(48);
    const double eps = 1.0 / 8.0;

    SECTION("affine fields, clamped central stencils") {
        const VectorField u = sample_vec(g, [](const Vec3& x) {
            return Vec3{1.0 + 2.0 * x[0], x[1] - x[2], 0.5 * x[2]};
        });
        CHECK(gradient_commutation_residual(u, eps, CommutationScheme::central) < 1e-10);
    }
    SECTION("cell-periodic single mode, spectral differentiation") {
        const VectorField u = sample_vec(g, [&](const Vec3& x) {
            return Vec3{std::sin(2.0 * kPi * x[0] / eps), 0.0, std::cos(2.0 * kPi * x[2] / eps)};
        });
        CHECK(gradient_commutation_residual(u, eps, CommutationScheme::spectral) < 1e-10);
    }
    SECTION("arbitrary data, blocked stencils: exact by construction") {
        const VectorField u = random_field(g, 3, 42);
        CHECK(gradient_commutation_residual(u, eps, CommutationScheme::blocked) < 1e-13);
    }
}

TEST_CASE("per-cell spectral micro gradient is exact on cell-periodic modes") {
    const Grid g = unit_cell_grid(48);
    const double eps = 1.0 / 8.0;
    const ScalarField u =
        sample_scalar(g, [&](const Vec3& x) { return std::sin(2.0 * kPi * x[0] / eps); });
    const TwoScaleField dz = ts_zgradient(unfold(u, eps), CellGradScheme::spectral);
    double worst = 0.0;
    for_each_ts_sample(dz, [&](const Int3&, std::size_t, int lx, int, int, std::size_t s) {
        const double z1 = (lx + 0.5) / dz.micro.n[0];
        const double want = (2.0 * kPi / eps) * std::cos(2.0 * kPi * z1);
        worst = std::max(worst, std::fabs(dz.data[s * 3 + 0] - want));
    });
    CHECK(worst < 1e-9 * (2.0 * kPi / eps));
}

TEST_CASE("cell averages contract the two-scale norm and are exact on affine data") {
    const Grid g = unit_cell_grid(48);
    const double eps = 1.0 / 8.0;
    const VectorField u = random_field(g, 3, 11);
    const TwoScaleField ts = unfold(u, eps);
    const VectorField avg = cell_average(ts);
    CHECK(l2_norm(avg) <= ts_l2_norm(ts) + 1e-12); // Jensen

    const ScalarField lin = sample_scalar(g, [](const Vec3& x) { return x[0]; });
    const VectorField lavg = cell_average(unfold(lin, eps));
    for_each_node(lavg.grid, [&](int ix, int iy, int iz, std::size_t node) {
        (void)iy;
        (void)iz;
        CHECK(lavg.data[node] == Catch::Approx(lavg.grid.coord(0, ix)).margin(1e-13));
    });
}

TEST_CASE("two-scale distance to a sampled target vanishes for matched oscillations") {
    const Grid g = unit_cell_grid(48);
    const double eps = 1.0 / 8.0;
    auto profile = [](const Vec3& x, const Vec3& z, double* out) {
        out[0] = (1.0 + 0.5 * x[1]) * std::sin(2.0 * kPi * z[0]);
        out[1] = std::cos(2.0 * kPi * z[2]);
        out[2] = x[0];
    };
    // macro realization u(x) = f(x, x/eps) sampled on the grid
    const VectorField u = sample(g, 3, [&](const Vec3& x, double* out) {
        Vec3 z;
        for (int a = 0; a < 3; ++a) {
            double frac = x[a] / eps - std::floor(x[a] / eps);
            z[a] = frac;
        }
        profile(x, z, out);
    });
    const TwoScaleField target = sample_two_scale(g, eps, 3, profile);
    CHECK(strong_ts_distance(unfold(u, eps), target) < 1e-13);
}

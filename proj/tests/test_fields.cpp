#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "microhom/field.hpp"
#include "microhom/gradient.hpp"
#include "microhom/mollify.hpp"
#include "microhom/rng.hpp"

using namespace microhom;

namespace {
constexpr double kPi = 3.14159265358979323846;
}

TEST_CASE("midpoint grid layout and quadrature") {
    Grid g = unit_cell_grid(8);
    CHECK(g.spacing(0) == Catch::Approx(0.125));
    CHECK(g.coord(0, 0) == Catch::Approx(0.0625));
    CHECK(g.coord(0, 7) == Catch::Approx(1.0 - 0.0625));
    CHECK(g.cell_volume() == Catch::Approx(1.0 / 512.0));

    Grid ne = g;
    ne.periodic = {false, false, false};
    CHECK(ne.spacing(0) == Catch::Approx(1.0 / 7.0));
    CHECK(ne.coord(0, 0) == 0.0);
    CHECK(ne.coord(0, 7) == Catch::Approx(1.0));
    CHECK(ne.axis_weight(0, 0) == Catch::Approx(0.5 / 7.0));
    CHECK(ne.axis_weight(0, 3) == Catch::Approx(1.0 / 7.0));

    Grid bad = g;
    bad.n[1] = 0;
    CHECK_THROWS_AS(bad.validate(), PreconditionError);
}

TEST_CASE("midpoint quadrature integrates trigonometric squares exactly") {
    const Grid g = unit_cell_grid(32);
    const ScalarField f = sample_scalar(g, [](const Vec3& x) { return std::sin(2.0 * kPi * x[0]); });
    CHECK(lp_power_integral(f, 2.0) == Catch::Approx(0.5).margin(1e-14));
    const ScalarField one = sample_scalar(g, [](const Vec3&) { return 1.0; });
    CHECK(lp_power_integral(one, 2.0) == Catch::Approx(1.0).margin(1e-14));
    CHECK(mean_value(f) == Catch::Approx(0.0).margin(1e-14));
}

TEST_CASE("masked integrals restrict the quadrature") {
    const Grid g = unit_cell_grid(16);
    const ScalarField one = sample_scalar(g, [](const Vec3&) { return 1.0; });
    const ScalarField half = sample_scalar(g, [](const Vec3& x) { return x[0] < 0.5 ? 1.0 : 0.0; });
    CHECK(lp_power_integral(one, 2.0, &half) == Catch::Approx(0.5).margin(1e-14));
    CHECK(l2_inner(one, one, &half) == Catch::Approx(0.5).margin(1e-14));
}

TEST_CASE("spectral gradient is exact on band-limited fields") {
    const Grid g = unit_cell_grid(24);
    const ScalarField f = sample_scalar(g, [](const Vec3& x) {
        return std::sin(2.0 * kPi * x[0]) * std::cos(4.0 * kPi * x[1]);
    });
    const VectorField df = gradient(f, GradScheme::spectral);
    double worst = 0.0;
    for_each_node(g, [&](int ix, int iy, int iz, std::size_t node) {
        const Vec3 x = g.node(ix, iy, iz);
        const double gx = 2.0 * kPi * std::cos(2.0 * kPi * x[0]) * std::cos(4.0 * kPi * x[1]);
        const double gy = -4.0 * kPi * std::sin(2.0 * kPi * x[0]) * std::sin(4.0 * kPi * x[1]);
        worst = std::max(worst, std::fabs(df.data[node * 3 + 0] - gx));
        worst = std::max(worst, std::fabs(df.data[node * 3 + 1] - gy));
        worst = std::max(worst, std::fabs(df.data[node * 3 + 2]));
    });
    CHECK(worst < 1e-10);
}

TEST_CASE("central gradients are exact on affine data") {
    Grid g = box_grid({0.0, 0.0, 0.0}, {1.0, 2.0, 1.0}, {9, 7, 8});
    g.periodic = {false, false, false};
    const ScalarField f =
        sample_scalar(g, [](const Vec3& x) { return 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[2]; });
    const VectorField df = gradient(f, GradScheme::central);
    for (std::size_t i = 0; i < g.num_nodes(); ++i) {
        CHECK(df.data[i * 3 + 0] == Catch::Approx(2.0).margin(1e-12));
        CHECK(df.data[i * 3 + 1] == Catch::Approx(-1.0).margin(1e-12));
        CHECK(df.data[i * 3 + 2] == Catch::Approx(0.5).margin(1e-12));
    }

    // clamped variant: same exactness on a midpoint-sampled grid
    const Grid gp = unit_cell_grid(12);
    const ScalarField fp =
        sample_scalar(gp, [](const Vec3& x) { return 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[2]; });
    const VectorField dfp = gradient(fp, GradScheme::central_clamped);
    for (std::size_t i = 0; i < gp.num_nodes(); ++i) {
        CHECK(dfp.data[i * 3 + 0] == Catch::Approx(2.0).margin(1e-11));
        CHECK(dfp.data[i * 3 + 1] == Catch::Approx(-1.0).margin(1e-11));
        CHECK(dfp.data[i * 3 + 2] == Catch::Approx(0.5).margin(1e-11));
    }
}

TEST_CASE("masked gradient never reaches across the mask boundary") {
    const Grid g = unit_cell_grid(16);
    const ScalarField mask = sample_scalar(g, [](const Vec3& x) { return x[0] < 0.5 ? 1.0 : 0.0; });
    // field is affine inside the mask, garbage outside: stencil containment
    // means the garbage can never leak into masked rows
    ScalarField f = sample_scalar(g, [](const Vec3& x) { return 3.0 * x[0] + x[2]; });
    for_each_node(g, [&](int ix, int iy, int iz, std::size_t node) {
        if (mask.data[node] == 0.0) f.data[node] = 1e6 * std::sin(double(ix * 31 + iy * 17 + iz));
        (void)iz;
    });
    const VectorField df = gradient_masked(f, mask);
    for_each_node(g, [&](int ix, int iy, int iz, std::size_t node) {
        (void)ix;
        (void)iy;
        (void)iz;
        if (mask.data[node] == 0.0) {
            CHECK(df.data[node * 3 + 0] == 0.0);
        } else {
            CHECK(df.data[node * 3 + 0] == Catch::Approx(3.0).margin(1e-9));
            CHECK(df.data[node * 3 + 2] == Catch::Approx(1.0).margin(1e-9));
        }
    });
}

TEST_CASE("mollifier preserves means and constants") {
    const Grid g = unit_cell_grid(32);
    const ScalarField f = sample_scalar(g, [](const Vec3& x) {
        return 0.3 + std::sin(2.0 * kPi * x[0]) * std::cos(2.0 * kPi * x[2]);
    });
    const ScalarField mf = mollify(f, 0.15);
    CHECK(mean_value(mf) == Catch::Approx(mean_value(f)).margin(1e-14));

    const ScalarField c = sample_scalar(g, [](const Vec3&) { return 0.7; });
    const ScalarField mc = mollify(c, 0.2);
    for (double v : mc.data) CHECK(v == Catch::Approx(0.7).margin(1e-13));

    CHECK(mollify(f, 0.0).data == f.data);
    CHECK_THROWS_AS(mollify(f, 0.7), PreconditionError);
    CHECK_THROWS_AS(mollify(f, 1e-4), PreconditionError); // kernel below grid resolution
}

TEST_CASE("mollification error decays quadratically in the radius") {
    const Grid g = unit_cell_grid(64);
    const ScalarField f = sample_scalar(g, [](const Vec3& x) { return std::sin(2.0 * kPi * x[0]); });
    auto err = [&](double radius) {
        const ScalarField mf = mollify(f, radius);
        double acc = 0.0;
        for (std::size_t i = 0; i < f.data.size(); ++i) {
            const double d = mf.data[i] - f.data[i];
            acc += d * d;
        }
        return std::sqrt(acc * g.cell_volume());
    };
    const double e1 = err(0.2), e2 = err(0.1);
    CHECK(e1 > e2);
    CHECK(e1 / e2 == Catch::Approx(4.0).margin(1.8)); // second-order decay
}

TEST_CASE("support ramp is monotone with the right plateaus") {
    CHECK(support_ramp(-1.0, 0.0, 1.0) == 0.0);
    CHECK(support_ramp(0.0, 0.0, 1.0) == 0.0);
    CHECK(support_ramp(1.0, 0.0, 1.0) == 1.0);
    CHECK(support_ramp(0.5, 0.0, 1.0) == Catch::Approx(0.5));
    CHECK(support_ramp(0.25, 0.0, 1.0) < support_ramp(0.75, 0.0, 1.0));
}

TEST_CASE("counter rng is a pure function of seed and counter") {
    const CounterRng rng{12345};
    const CounterRng same{12345};
    const CounterRng other{54321};
    CHECK(rng.bits(7) == same.bits(7));
    CHECK(rng.bits(7) != other.bits(7));
    for (std::uint64_t i = 0; i < 100; ++i) {
        const double u = rng.uniform(i);
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        const Vec3 p = rng.ball_point(i, 0.25);
        CHECK(norm(p) < 0.25);
        CHECK(norm(rng.sphere_point(i)) == Catch::Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("sphere field certifies unit length") {
    const Grid g = unit_cell_grid(4);
    VectorField ok = sample_vec(g, [](const Vec3&) { return Vec3{0.0, 0.0, 1.0}; });
    CHECK_NOTHROW(SphereField(ok));
    VectorField bad = ok;
    bad.data[0] = 1.5;
    CHECK_THROWS_AS(SphereField(bad), PreconditionError);
    CHECK(norm(sphere_project({0.0, 0.0, 2.5})) == Catch::Approx(1.0));
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "microhom/recovery.hpp"

using namespace microhom;

namespace {

constexpr double kPi = 3.14159265358979323846;

/** Centered box hole with broad clearance on all sides. */
CellGeometry wide_hole_cell() { return build_cell({Box{{0.1, 0.1, 0.1}, {0.9, 0.9, 0.9}}}, 16); }

/** The canonical centered hole of half width 1/4. */
CellGeometry standard_cell() { return build_cell({Box{{0.25, 0.25, 0.25}, {0.75, 0.75, 0.75}}}, 16); }

/** Smooth bump of the squared distance to the cell center, radius given. */
double center_bump(const Vec3& z, double radius) {
    const double r2 = (z[0] - 0.5) * (z[0] - 0.5) + (z[1] - 0.5) * (z[1] - 0.5) +
                      (z[2] - 0.5) * (z[2] - 0.5);
    return friedrichs_bump(r2 / (radius * radius));
}

TwoScaleField sample_profile(const Grid& g, double eps, const ProfileFn& w) {
    return sample_two_scale(g, eps, 3, [&](const Vec3& x, const Vec3& z, double* o) {
        const Vec3 v = w(x, z);
        for (int c = 0; c < 3; ++c) o[c] = v[c];
    });
}

VectorField constant_field(const Grid& g, const Vec3& s) {
    VectorField f(g, 3);
    for (std::size_t i = 0; i < g.num_nodes(); ++i) f.set_vec(i, s);
    return f;
}

/** Planar rotation pair: mtilde = R(alpha(x)) e3, w turns it further by a
 *  hole-supported angle, so |mtilde + w| = 1 exactly on the holes. */
struct PlanarPair {
    double a0, t0, radius;
    double phase = 0.0; // phase of the macro factor of the turning angle
    Vec3 mtilde(const Vec3& x) const {
        const double al = a0 * std::sin(2.0 * kPi * x[0]);
        return {std::sin(al), 0.0, std::cos(al)};
    }
    Vec3 w(const Vec3& x, const Vec3& z) const {
        const double al = a0 * std::sin(2.0 * kPi * x[0]);
        const double th = t0 * std::cos(2.0 * kPi * x[0] + phase) * center_bump(z, radius);
        return {std::sin(al + th) - std::sin(al), 0.0, std::cos(al + th) - std::cos(al)};
    }
    RecoveryInput input(const Grid& g, const CellGeometry& cell) const {
        VectorField f(g, 3);
        for_each_node(g, [&](int ix, int iy, int iz, std::size_t node) {
            f.set_vec(node, mtilde(g.node(ix, iy, iz)));
        });
        RecoveryInput in;
        in.mtilde = SphereField(std::move(f));
        in.cell = cell;
        in.w = [*this](const Vec3& x, const Vec3& z) { return w(x, z); };
        in.saturated = true;
        return in;
    }
};

} // namespace

TEST_CASE("profile smoothing damps near boundaries and converges with the level") {
    const CellGeometry cell = wide_hole_cell();
    const Grid g = unit_cell_grid(64);
    const double eps = 0.125;
    const ProfileFn wfn = [](const Vec3&, const Vec3& z) {
        return Vec3{center_bump(z, 0.35), 0.0, -0.5 * center_bump(z, 0.35)};
    };
    const TwoScaleField w = sample_profile(g, eps, wfn);

    double prev = std::numeric_limits<double>::infinity();
    for (int j = 0; j <= 1; ++j) {
        const TwoScaleField wj = approximate_w(w, j, cell);
        const double dist = strong_ts_distance(wj, w);
        CHECK(dist <= prev + 1e-14);
        prev = dist;

        // support must stay inside the holes at every level
        for_each_ts_sample(wj, [&](const Int3&, std::size_t, int lx, int ly, int lz, std::size_t s) {
            const double mag = std::fabs(wj.data[s * 3 + 0]) + std::fabs(wj.data[s * 3 + 2]);
            if (mag > 0.0) REQUIRE(cell.in_holes(wj.micro.node(lx, ly, lz)));
        });
    }
    CHECK(prev > 0.0); // coarse levels genuinely perturb the profile
    CHECK(strong_ts_distance(approximate_w(w, 6, cell), w) <= 1e-3);
}

TEST_CASE("profile smoothing of zero is zero and thin holes are rejected") {
    const CellGeometry cell = wide_hole_cell();
    const Grid g = unit_cell_grid(32);
    TwoScaleField zero = sample_profile(g, 0.25, [](const Vec3&, const Vec3&) {
        return Vec3{0.0, 0.0, 0.0};
    });
    const TwoScaleField out = approximate_w(zero, 2, cell);
    for (double v : out.data) REQUIRE(v == 0.0);

    // a slab hole of thickness 0.1 cannot host a level-0 ramp (margin 0.45)
    const CellGeometry thin = build_cell({Box{{0.45, 0.45, 0.45}, {0.55, 0.55, 0.55}}}, 16);
    const TwoScaleField w = sample_profile(g, 0.25, [](const Vec3&, const Vec3& z) {
        return Vec3{center_bump(z, 0.04), 0.0, 0.0};
    });
    CHECK_THROWS_AS(approximate_w(w, 0, thin), PreconditionError);
    CHECK_NOTHROW(approximate_w(w, 5, thin));
}

TEST_CASE("cube averaging is exact for affine macro dependence") {
    const Grid g = unit_cell_grid(32);
    const double eps = 0.25;
    auto gz = [](const Vec3& z) { return std::sin(2.0 * kPi * z[0]) * center_bump(z, 0.3); };

    // fine sampling at eps/2, block averaging to eps: exact mean of x1
    const TwoScaleField fine = recovery_detail::sample_cell_profiles(
        g, eps / 2.0, 3, [&](const Vec3& x, const Vec3& z, double* o) {
            o[0] = x[0] * gz(z);
            o[1] = 0.0;
            o[2] = 0.0;
        });
    const TwoScaleField coarse = cube_average(fine, eps);
    REQUIRE(coarse.cells == Int3{4, 4, 4});
    double worst = 0.0;
    for_each_ts_sample(coarse, [&](const Int3& t, std::size_t, int lx, int ly, int lz, std::size_t s) {
        const Vec3 z = coarse.micro.node(lx, ly, lz);
        const double expect = (t[0] + 0.5) * eps * gz(z);
        worst = std::max(worst, std::fabs(coarse.data[s * 3 + 0] - expect));
    });
    CHECK(worst <= 1e-12);

    // matching scales: x-constant profiles pass through unchanged
    const TwoScaleField xc = sample_profile(g, eps, [&](const Vec3&, const Vec3& z) {
        return Vec3{gz(z), 0.0, 2.0 * gz(z)};
    });
    const TwoScaleField same = cube_average(xc, eps);
    REQUIRE(same.same_shape(xc));
    for (std::size_t i = 0; i < xc.data.size(); ++i) REQUIRE(same.data[i] == xc.data[i]);
}

TEST_CASE("cube averaging zeroes cells whose cube is not fully covered") {
    // 10 nodes at spacing 0.1 with eps = 0.4: the third cell sticks out
    const Grid g{{0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}, {10, 10, 10}, {true, true, true}};
    VectorField u(g, 3);
    for (std::size_t i = 0; i < u.data.size(); ++i) u.data[i] = 1.0;
    const TwoScaleField ts = unfold(u, 0.4);
    REQUIRE(ts.cells == Int3{3, 3, 3});
    const TwoScaleField avg = cube_average(ts, 0.4);
    for_each_ts_sample(avg, [&](const Int3& t, std::size_t cf, int, int, int, std::size_t s) {
        const bool full = t[0] < 2 && t[1] < 2 && t[2] < 2;
        REQUIRE(avg.interior[cf] == (full ? 1 : 0));
        for (int c = 0; c < 3; ++c) REQUIRE(avg.data[s * 3 + c] == (full ? 1.0 : 0.0));
    });
    CHECK_THROWS_AS(cube_average(ts, 0.6), PreconditionError); // 1.5 x sampling scale
}

TEST_CASE("oscillation injection is the exact inverse of unfolding") {
    const Grid g = unit_cell_grid(24);
    const double eps = 1.0 / 6.0;

    // random per-cell profiles: re-blocking identity
    TwoScaleField w = sample_profile(g, eps, [](const Vec3&, const Vec3&) {
        return Vec3{0.0, 0.0, 0.0};
    });
    const CounterRng rng{77};
    for (std::size_t i = 0; i < w.data.size(); ++i) w.data[i] = rng.uniform(i, -1.0, 1.0);
    const VectorField v = oscillate(w, eps);
    CHECK(strong_ts_distance(unfold(v, eps), w) <= 1e-12);

    // x-constant profile: direct formula
    const VectorField vg = oscillate(sample_profile(g, eps, [](const Vec3&, const Vec3& z) {
        return Vec3{std::sin(2.0 * kPi * z[1]), 0.0, 0.0};
    }), eps);
    double worst = 0.0;
    for_each_node(g, [&](int ix, int iy, int iz, std::size_t node) {
        const Vec3 x = g.node(ix, iy, iz);
        const double z1 = x[1] / eps - std::floor(x[1] / eps);
        worst = std::max(worst, std::fabs(vg.data[node * 3] - std::sin(2.0 * kPi * z1)));
    });
    CHECK(worst <= 1e-12);

    CHECK_THROWS_AS(oscillate(w, eps / 2.0), PreconditionError);
}

TEST_CASE("diagonal level selection follows the two-times-optimum rule") {
    // geometric table: every row passes the bar, so the finest level wins
    std::vector<double> eps_list;
    std::vector<std::vector<double>> table(11);
    for (int k = 0; k < 7; ++k) eps_list.push_back(std::pow(2.0, -k));
    for (int j = 0; j <= 10; ++j)
        for (int k = 0; k < 7; ++k) table[j].push_back(std::pow(2.0, -j) + std::pow(2.0, -k));
    const std::vector<int> pick = diagonal_select(table, eps_list);
    double prev = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 7; ++k) {
        CHECK(pick[k] == 10);
        const double diag = table[std::size_t(pick[k])][std::size_t(k)];
        CHECK(diag < prev);
        prev = diag;
    }

    // single row: nothing to choose
    const std::vector<int> single = diagonal_select({{0.3, 0.2, 0.1}}, {0.5, 0.25, 0.125});
    CHECK(single == std::vector<int>{0, 0, 0});

    // constant table: degenerate but legal, finest level, error surfaced as-is
    const std::vector<int> flat = diagonal_select({{1.0, 1.0}, {1.0, 1.0}}, {0.5, 0.25});
    CHECK(flat == std::vector<int>{1, 1});

    // monotonicity enforcement: the raw rule would fall back to level 0 at k=1
    const std::vector<int> mono = diagonal_select({{0.5, 0.1}, {0.05, 1.0}}, {0.5, 0.25});
    CHECK(mono == std::vector<int>{1, 1});

    CHECK_THROWS_AS(diagonal_select({}, {0.5}), PreconditionError);
    CHECK_THROWS_AS(diagonal_select({{1.0}}, std::vector<double>{}), PreconditionError);
}

TEST_CASE("presequence of a constant pair is the constant") {
    const Grid g = unit_cell_grid(24);
    RecoveryInput in;
    in.mtilde = SphereField(constant_field(g, {0.0, 0.6, 0.8}));
    in.cell = standard_cell();
    in.saturated = true;
    const PreSequence pre = build_presequence(in, 0.25, 3);
    double worst = 0.0, gworst = 0.0;
    for (std::size_t i = 0; i < g.num_nodes(); ++i) {
        worst = std::max(worst, norm(pre.v.vec_at(i) - Vec3{0.0, 0.6, 0.8}));
        for (int c = 0; c < 9; ++c) gworst = std::max(gworst, std::fabs(pre.grad_scaled.data[i * 9 + c]));
    }
    CHECK(worst <= 1e-13);
    CHECK(gworst <= 1e-11);
    CHECK(pre.approx_distance == 0.0);
}

TEST_CASE("presequence injects the perturbation at scale eps") {
    const Grid g = unit_cell_grid(32);
    const double eps = 0.125;
    RecoveryInput in;
    in.mtilde = SphereField(constant_field(g, {0.0, 0.0, 1.0}));
    in.cell = standard_cell();
    in.psi = [](const Vec3& x, const Vec3& z) {
        const double eta = std::sin(kPi * x[0]) * std::sin(kPi * x[0]);
        return Vec3{eta * std::sin(2.0 * kPi * z[0]), 0.0, 0.0};
    };
    const PreSequence pre = build_presequence(in, eps, 3);
    double worst = 0.0, sup = 0.0;
    for_each_node(g, [&](int ix, int iy, int iz, std::size_t node) {
        const Vec3 x = g.node(ix, iy, iz);
        const double eta = std::sin(kPi * x[0]) * std::sin(kPi * x[0]);
        const double z1 = x[0] / eps - std::floor(x[0] / eps);
        const Vec3 expect{eps * eta * std::sin(2.0 * kPi * z1), 0.0, 1.0};
        worst = std::max(worst, norm(pre.v.vec_at(node) - expect));
        sup = std::max(sup, norm(pre.v.vec_at(node) - Vec3{0.0, 0.0, 1.0}));
    });
    CHECK(worst <= 1e-13);
    CHECK(sup <= eps + 1e-13); // ||eta||_inf = 1
}

TEST_CASE("presequence approaches the saturated limit pair") {
    const Grid g = unit_cell_grid(48);
    const CellGeometry cell = standard_cell();
    // x-constant rotation bump: theta smooth, supported in the hole
    const ProfileFn wfn = [](const Vec3&, const Vec3& z) {
        const double th = 0.8 * center_bump(z, 0.2);
        return Vec3{std::sin(th), 0.0, std::cos(th) - 1.0};
    };
    RecoveryInput in;
    in.mtilde = SphereField(constant_field(g, {0.0, 0.0, 1.0}));
    in.cell = cell;
    in.w = wfn;
    in.saturated = true;

    double prev = std::numeric_limits<double>::infinity();
    for (const double eps : {0.25, 0.125}) {
        const PreSequence pre = build_presequence(in, eps, 6);
        const TwoScaleField target = sample_profile(g, eps, [&](const Vec3& x, const Vec3& z) {
            const Vec3 wv = cell.in_holes(z) ? wfn(x, z) : Vec3{0.0, 0.0, 0.0};
            return Vec3{wv[0], wv[1], 1.0 + wv[2]};
        });
        const double dist = strong_ts_distance(unfold(pre.v, eps), target);
        CHECK(dist <= 1e-10); // level-6 smoothing is below both lattices
        CHECK(dist <= prev);
        prev = dist;
    }
    // a coarse level genuinely perturbs, a fine one does not
    const double coarse = build_presequence(in, 0.25, 1).approx_distance;
    const double fine = build_presequence(in, 0.25, 6).approx_distance;
    CHECK(coarse > 1e-3);
    CHECK(fine <= 1e-12);
}

TEST_CASE("rejected profiles: support leaking outside the holes") {
    const Grid g = unit_cell_grid(24);
    RecoveryInput in;
    in.mtilde = SphereField(constant_field(g, {0.0, 0.0, 1.0}));
    in.cell = standard_cell();
    in.w = [](const Vec3&, const Vec3& z) {
        return Vec3{std::sin(2.0 * kPi * z[0]), 0.0, 0.0}; // global support
    };
    in.saturated = true;
    CHECK_THROWS_AS(build_presequence(in, 0.25, 3), PreconditionError);
}

TEST_CASE("shift selection is deterministic and avoids the field image") {
    const Grid g = unit_cell_grid(16);

    // constant far field: the near set is empty for every candidate, so the
    // margin is vacuous and the first trial wins
    const VectorField cu = constant_field(g, {0.0, 0.0, 2.0});
    const ShiftedProjection s1 = select_shift(cu, 0.1, 11, 8);
    const ShiftedProjection s2 = select_shift(cu, 0.1, 11, 8);
    CHECK(std::isinf(s1.margin));
    const Vec3 first = CounterRng{11}.ball_point(0, 0.25);
    CHECK(s1.a[0] == first[0]);
    CHECK(s1.a[1] == first[1]);
    CHECK(s1.a[2] == first[2]);
    CHECK(s1.a[0] == s2.a[0]);
    CHECK(s1.a[1] == s2.a[1]);
    CHECK(s1.a[2] == s2.a[2]);
    CHECK(norm(s1.a) < 0.25);

    // planar image: values fill a sheet through the shift ball
    VectorField sheet(g, 3);
    for_each_node(g, [&](int ix, int iy, int iz, std::size_t node) {
        const Vec3 x = g.node(ix, iy, iz);
        sheet.set_vec(node, {x[0] - 0.5, x[1] - 0.5, 0.05});
    });
    const double h = g.spacing(0);
    const ShiftedProjection sp = select_shift(sheet, 0.1, 29, 64);
    REQUIRE(sp.margin >= h);
    double measured = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < g.num_nodes(); ++i) {
        const double q = norm(sheet.vec_at(i) - sp.a);
        if (q < 0.9) measured = std::min(measured, q);
    }
    CHECK(measured == Catch::Approx(sp.margin).epsilon(1e-12));

    // a dense 3D image leaves no admissible shift at this resolution
    VectorField dense(g, 3);
    for_each_node(g, [&](int ix, int iy, int iz, std::size_t node) {
        const Vec3 x = g.node(ix, iy, iz);
        dense.set_vec(node, {x[0] - 0.5, x[1] - 0.5, x[2] - 0.5});
    });
    CHECK_THROWS_AS(select_shift(dense, 0.1, 5, 32), SolverError);

    CHECK_THROWS_AS(select_shift(cu, 0.1, 1, 0), PreconditionError);
    CHECK_THROWS_AS(select_shift(cu, 0.6, 1, 4), PreconditionError);
}

TEST_CASE("shifted projection: identity on unit fields, shifted inside V") {
    const Grid g = unit_cell_grid(12);

    // already unit: projection only renormalizes, a round-off no-op
    const CounterRng rng{3};
    VectorField u(g, 3);
    for (std::size_t i = 0; i < g.num_nodes(); ++i) {
        Vec3 p = rng.sphere_point(i);
        u.set_vec(i, p);
    }
    const ProjectionResult idr = shifted_project(u, ShiftedProjection{{0.05, 0.0, 0.0}, 0.1, 0.0});
    double shiftw = 0.0;
    for (std::size_t i = 0; i < g.num_nodes(); ++i)
        shiftw = std::max(shiftw, norm(idr.m.f.vec_at(i) - u.vec_at(i)));
    CHECK(shiftw <= 1e-14);
    CHECK(idr.measure_v == 0.0);
    CHECK(idr.singular_count == 0);

    // pinned arithmetic: v = 0.5 e3, a = (0.1,0,0)
    const VectorField half = constant_field(g, {0.0, 0.0, 0.5});
    const ProjectionResult pr = shifted_project(half, ShiftedProjection{{0.1, 0.0, 0.0}, 0.1, 0.0});
    const double q = std::sqrt(0.26);
    double worst = 0.0;
    for (std::size_t i = 0; i < g.num_nodes(); ++i)
        worst = std::max(worst, norm(pr.m.f.vec_at(i) - Vec3{-0.1 / q, 0.0, 0.5 / q}));
    CHECK(worst <= 1e-15);
    CHECK(pr.measure_v == Catch::Approx(1.0)); // whole torus is low-modulus

    CHECK_THROWS_AS(shifted_project(half, ShiftedProjection{{0.3, 0.0, 0.0}, 0.1, 0.0}),
                    PreconditionError);
}

TEST_CASE("shifted projection counts isolated singular nodes") {
    const Grid g = unit_cell_grid(16);
    VectorField v(g, 3);
    for_each_node(g, [&](int ix, int iy, int iz, std::size_t node) {
        const Vec3 x = g.node(ix, iy, iz);
        v.set_vec(node, {x[0] - 0.5, x[1] - 0.5, x[2] - 0.5}); // hedgehog around a node value
    });
    // place the shift exactly on the image of the central grid node
    const std::size_t hit = g.node_index(8, 8, 8);
    const Vec3 a = v.vec_at(hit);
    REQUIRE(norm(a) < 0.25);
    const ProjectionResult pr = shifted_project(v, ShiftedProjection{a, 0.1, 0.0});
    CHECK(pr.singular_count == 1);
    CHECK(pr.excluded[hit] == 1);
    CHECK(pr.m.max_norm_defect() <= 1e-12);
    CHECK(pr.grad_v_on_v > 0.0);
    CHECK(pr.grad_m_on_v > 0.0);
}

TEST_CASE("radial projection Jacobian matches finite differences and bounds") {
    const CounterRng rng{9};
    const double t = 1e-6;
    for (int trial = 0; trial < 32; ++trial) {
        Vec3 u = rng.ball_point(trial, 1.0);
        const double q = norm(u);
        if (q < 0.3) continue;
        const Mat3 p = nearest_point_jacobian(u);
        // tangency and finite-difference agreement
        for (int a = 0; a < 3; ++a) {
            Vec3 up = u, um = u;
            up[a] += t;
            um[a] -= t;
            const Vec3 fd = (1.0 / (2.0 * t)) * (sphere_project(up) - sphere_project(um));
            for (int c = 0; c < 3; ++c) CHECK(std::fabs(fd[c] - p(c, a)) <= 1e-6);
        }
    }
    CHECK_THROWS_AS(nearest_point_jacobian(Vec3{0.0, 0.0, 0.0}), PreconditionError);
}

TEST_CASE("projection is Lipschitz on the outer shell with constant 1/(1-delta)") {
    const double delta = 0.1;
    const double bound = 1.0 / (1.0 - delta);
    const CounterRng rng{41};
    for (int i = 0; i < 500; ++i) {
        // v in the shell {1-delta <= |v| <= 1.2}, u on the sphere
        Vec3 v = rng.sphere_point(2 * i);
        const double q = rng.uniform(3000 + i, 1.0 - delta, 1.2);
        v = q * v;
        const Vec3 u = rng.sphere_point(2 * i + 1);
        const double lhs = norm(sphere_project(v) - u);
        const double rhs = bound * norm(v - u);
        REQUIRE(lhs <= rhs + 1e-12);
    }
}

TEST_CASE("recovery of a constant saturated pair is exact") {
    const Grid g = unit_cell_grid(24);
    RecoveryInput in;
    in.mtilde = SphereField(constant_field(g, {0.0, 0.0, 1.0}));
    in.cell = standard_cell();
    in.saturated = true;
    const RecoverySequence seq = run_recovery(in, {0.25, 0.125}, 0.1, 7);
    REQUIRE(seq.steps.size() == 2);
    for (const RecoveryStep& st : seq.steps) {
        CHECK(st.d1 <= 1e-12);
        CHECK(st.d2 <= 1e-11);
        CHECK(st.d3 <= 1e-11);
        CHECK(st.sphere_residual <= 1e-12);
        CHECK(st.singular_count == 0);
        CHECK(st.measure_v == 0.0);
        CHECK(st.measure_w == 0.0);
    }
}

TEST_CASE("recovery distances decrease along the planar rotation scenario") {
    const Grid g = unit_cell_grid(48);
    const PlanarPair pair{0.15, 1.2, 0.2};
    const RecoveryInput in = pair.input(g, standard_cell());
    const RecoverySequence seq = run_recovery(in, {0.5, 0.25, 0.125}, 0.1, 2026);
    REQUIRE(seq.steps.size() == 3);
    for (std::size_t k = 0; k < 3; ++k) {
        const RecoveryStep& st = seq.steps[k];
        INFO("k=" << k << " d1=" << st.d1 << " d2=" << st.d2 << " d3=" << st.d3
                  << " level=" << st.level << " |V|=" << st.measure_v);
        CHECK(st.sphere_residual <= 1e-12);
        CHECK(st.d1 > 0.0);
        CHECK(st.d2 > 0.0);
        CHECK(st.d3 > 0.0);
        CHECK(st.measure_w <= st.measure_a + 1e-9);
        CHECK(st.mass_w_d1 <= 2.0 * std::sqrt(st.measure_a) + 1e-9);
        if (k > 0) {
            CHECK(st.d1 < seq.steps[k - 1].d1);
            CHECK(st.d2 < seq.steps[k - 1].d2);
            CHECK(st.d3 < seq.steps[k - 1].d3);
            CHECK(st.level >= seq.steps[k - 1].level);
        }
    }
}

TEST_CASE("recovery reports the low-modulus set when averaging is coarse") {
    // the quarter-period phase puts the full turning amplitude on the cell
    // centers of the single coarse scale
    const Grid g = unit_cell_grid(24);
    const PlanarPair pair{0.3, 6.0, 0.2, -0.5 * kPi};
    const RecoveryInput in = pair.input(g, standard_cell());
    const RecoverySequence seq = run_recovery(in, {0.5}, 0.1, 4);
    const RecoveryStep& st = seq.steps[0];
    INFO("|V|=" << st.measure_v << " |W|=" << st.measure_w << " |A|=" << st.measure_a);
    CHECK(st.measure_w > 0.0);
    CHECK(st.measure_w <= st.measure_a + 1e-9);
    CHECK(st.mass_w_d1 <= (2.0 + 1e-8) * std::sqrt(st.measure_a) + 1e-12);
    CHECK(st.sphere_residual <= 1e-12);
    CHECK(st.grad_ratio > 0.0);
}

TEST_CASE("recovery validates its hypotheses") {
    const Grid g = unit_cell_grid(24);
    RecoveryInput in;
    in.mtilde = SphereField(constant_field(g, {0.0, 0.0, 1.0}));
    in.cell = standard_cell();
    in.saturated = true;

    RecoveryInput unflagged = in;
    unflagged.saturated = false;
    CHECK_THROWS_AS(run_recovery(unflagged, {0.25}, 0.1, 1), PreconditionError);

    CHECK_THROWS_AS(run_recovery(in, {0.125, 0.25}, 0.1, 1), PreconditionError);
    CHECK_THROWS_AS(run_recovery(in, {}, 0.1, 1), PreconditionError);
    CHECK_THROWS_AS(run_recovery(in, {0.25}, 0.7, 1), PreconditionError);

    RecoveryInput no_grad = in;
    no_grad.psi = [](const Vec3&, const Vec3&) { return Vec3{0.0, 0.0, 0.0}; };
    CHECK_THROWS_AS(run_recovery(no_grad, {0.25}, 0.1, 1), PreconditionError);

    // saturation violated: w does not keep |mtilde + w| on the sphere
    RecoveryInput bad = in;
    bad.w = [](const Vec3&, const Vec3& z) {
        return Vec3{0.5 * center_bump(z, 0.2), 0.0, 0.0};
    };
    CHECK_THROWS_AS(run_recovery(bad, {0.25}, 0.1, 1), PreconditionError);
}

TEST_CASE("alternating tessellation: weak pairings converge without saturation") {
    const Grid g = unit_cell_grid(32);
    const double eps = 0.125;
    const CellGeometry cell = standard_cell();
    const double amp = 0.5 * kPi;
    auto phi = [&](const Vec3& z) {
        return amp * support_ramp(cell.hole_inner_distance(z), 0.02, 0.1);
    };

    // alternating-cell rotation field: unit norm, weak limit rotates by the
    // cosine average only
    VectorField m(g, 3);
    Int3 r, cells;
    ts_detail::cells_and_rate(g, eps, r, cells);
    for_each_node(g, [&](int ix, int iy, int iz, std::size_t node) {
        const int i[3] = {ix, iy, iz};
        Vec3 z;
        int parity = 0;
        for (int a = 0; a < 3; ++a) {
            parity += i[a] / r[a];
            z[a] = (i[a] % r[a] + 0.5) / r[a];
        }
        const double th = (parity % 2 == 0 ? 1.0 : -1.0) * phi(z);
        m.set_vec(node, {std::sin(th), 0.0, std::cos(th)});
    });
    const SphereField mk(std::move(m));

    // averaged two-scale limit: s cos(phi(z)); its hole part is w
    const TwoScaleField limit = sample_profile(g, eps, [&](const Vec3&, const Vec3& z) {
        return Vec3{0.0, 0.0, std::cos(phi(z))};
    });

    const std::vector<std::function<void(const Vec3&, const Vec3&, double*)>> dict = {
        [](const Vec3& x, const Vec3& z, double* o) {
            o[0] = std::sin(2.0 * kPi * x[0]) * std::cos(2.0 * kPi * z[2]);
            o[1] = 0.0;
            o[2] = std::cos(2.0 * kPi * x[1]);
        },
        [](const Vec3& x, const Vec3& z, double* o) {
            o[0] = 1.0;
            o[1] = std::sin(2.0 * kPi * z[0]) * std::sin(2.0 * kPi * x[2]);
            o[2] = std::cos(2.0 * kPi * (x[0] + z[1]));
        },
        [](const Vec3&, const Vec3& z, double* o) {
            o[0] = std::cos(2.0 * kPi * z[0]);
            o[1] = std::sin(2.0 * kPi * z[1]);
            o[2] = 1.0;
        },
    };
    for (const auto& psi : dict) {
        const double got = two_scale_pairing(mk.f, eps, psi);
        const double want = limit_pairing(limit, psi);
        CHECK(std::fabs(got - want) <= 1e-3 * (1.0 + std::fabs(want)));
    }

    // the limit pair is not saturated: |mtilde + w| = cos(phi) < 1 on the holes
    double defect2 = 0.0;
    const double wgt = limit.sample_weight();
    for_each_ts_sample(limit, [&](const Int3&, std::size_t, int lx, int ly, int lz, std::size_t s) {
        const Vec3 z = limit.micro.node(lx, ly, lz);
        if (!cell.in_holes(z)) return;
        const Vec3 val{limit.data[s * 3], limit.data[s * 3 + 1], limit.data[s * 3 + 2]};
        const double d = std::fabs(norm(val) - 1.0);
        defect2 += wgt * d * d;
    });
    CHECK(std::sqrt(defect2) >= 0.1);
    CHECK(mk.max_norm_defect() <= 1e-12);
}

TEST_CASE("corrector perturbation: zero jet gives zero, cache is consistent") {
    const Grid g = unit_cell_grid(8);
    const CellGeometry cell = build_cell({Box{{0.25, 0.25, 0.25}, {0.75, 0.75, 0.75}}}, 12);

    // constant macro field: zero gradient jet everywhere
    const SphereField cm(constant_field(g, {0.0, 0.0, 1.0}));
    const CorrectorPerturbation cz = build_corrector_perturbation(cm, cell);
    const Vec3 p0 = cz.psi({0.3, 0.3, 0.3}, {0.4, 0.6, 0.5});
    CHECK(norm(p0) == 0.0);

    // smoothly varying field: corrector is tangent up to the quantization step
    VectorField vr(g, 3);
    for_each_node(g, [&](int ix, int iy, int iz, std::size_t node) {
        const Vec3 x = g.node(ix, iy, iz);
        const double al = 0.3 * std::sin(2.0 * kPi * x[0]);
        vr.set_vec(node, {std::sin(al), 0.0, std::cos(al)});
    });
    const SphereField sm(std::move(vr));
    CorrectorPerturbationOptions opts;
    opts.fhom.tol = 1e-8;
    const CorrectorPerturbation cp = build_corrector_perturbation(sm, cell, opts);

    const Vec3 x{0.4, 0.1, 0.7};
    const Vec3 z{0.37, 0.52, 0.61};
    const Vec3 psi1 = cp.psi(x, z);
    const Vec3 psi2 = cp.psi(x, z);
    CHECK(norm(psi1 - psi2) == 0.0); // cached solve, bitwise reproducible
    CHECK(norm(psi1) > 0.0);

    // z-periodicity of the interpolant
    const Vec3 shifted = cp.psi(x, {z[0] - 1.0, z[1] + 1.0, z[2]});
    CHECK(norm(psi1 - shifted) <= 1e-12);

    // micro Jacobian agrees with finite differences of the interpolant away
    // from interpolation-cell boundaries
    const Mat3 jz = cp.psi_zgrad(x, z);
    double scale = 0.0;
    for (int c = 0; c < 3; ++c)
        for (int a = 0; a < 3; ++a) scale = std::max(scale, std::fabs(jz(c, a)));
    const double t = 1e-4;
    for (int a = 0; a < 3; ++a) {
        Vec3 zp = z, zm = z;
        zp[a] += t;
        zm[a] -= t;
        const Vec3 fd = (1.0 / (2.0 * t)) * (cp.psi(x, zp) - cp.psi(x, zm));
        for (int c = 0; c < 3; ++c) CHECK(std::fabs(fd[c] - jz(c, a)) <= 0.2 * (1.0 + scale));
    }

    // tangency to the macro direction at the jet's node, within quantization
    const Vec3 mt = sm.f.vec_at(g.node_index(3, 0, 5));
    double tproj = 0.0;
    for (int c = 0; c < 3; ++c) tproj += psi1[c] * mt[c];
    CHECK(std::fabs(tproj) <= 0.05 * (1.0 + norm(psi1)));
}

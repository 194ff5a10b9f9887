#include <catch2/catch_amalgamated.hpp>

#include "microhom/geometry.hpp"

using namespace microhom;

TEST_CASE("cell construction validates holes and produces exact masks") {
    const Box hole{{0.25, 0.25, 0.25}, {0.75, 0.75, 0.75}};
    const CellGeometry cell = build_cell({hole}, 8);
    CHECK(cell.vol_q0 == Catch::Approx(0.125).margin(1e-15)); // midpoint-aligned: exact
    CHECK(cell.margin == Catch::Approx(0.25));
    CHECK(cell.inradius() == Catch::Approx(0.25));
    CHECK(cell.in_holes({0.5, 0.5, 0.5}));
    CHECK_FALSE(cell.in_holes({0.1, 0.5, 0.5}));
    CHECK(cell.hole_inner_distance({0.5, 0.5, 0.5}) == Catch::Approx(0.25));
    CHECK(cell.hole_inner_distance({0.3, 0.5, 0.5}) == Catch::Approx(0.05));
    CHECK(cell.hole_inner_distance({0.1, 0.5, 0.5}) == 0.0);

    // chi0 + chi1 = 1 everywhere
    for (std::size_t i = 0; i < cell.chi0.data.size(); ++i)
        CHECK(cell.chi0.data[i] + cell.chi1.data[i] == 1.0);

    CHECK_THROWS_AS(build_cell({Box{{0.0, 0.25, 0.25}, {0.5, 0.75, 0.75}}}, 8), PreconditionError);
    CHECK_THROWS_AS(build_cell({Box{{0.5, 0.5, 0.5}, {0.5, 0.75, 0.75}}}, 8), PreconditionError);
    CHECK_THROWS_AS(build_cell({}, 8), PreconditionError);
}

TEST_CASE("admissible lattice over the unit box, quarter-scale cells") {
    const CellGeometry cell = build_cell({Box{{0.25, 0.25, 0.25}, {0.75, 0.75, 0.75}}}, 8);
    const CompositeGeometry comp = build_composite_aligned(cell, 0.25, 32);
    CHECK(comp.lattice.size() == 64); // every scaled hole fits strictly inside
    CHECK(comp.r == Int3{8, 8, 8});
    CHECK(comp.vol_holes == Catch::Approx(64.0 * 0.125 / 64.0).margin(1e-14));
    const MaskCheckResult mc = unfold_mask_check(comp);
    CHECK(mc.max_interior == 0.0);
    CHECK(mc.max_zero_extended == 0.0);
}

TEST_CASE("half-scale composite with a fat hole") {
    const CellGeometry cell = build_cell({Box{{0.1, 0.1, 0.1}, {0.9, 0.9, 0.9}}}, 20);
    const CompositeGeometry comp = build_composite_aligned(cell, 0.5, 40);
    CHECK(comp.lattice.size() == 8);
    CHECK(comp.vol_holes == Catch::Approx(0.512).margin(1e-14)); // 8 * (1/8) * 0.8^3
    for (std::size_t i = 0; i < comp.chi0_eps.data.size(); ++i)
        CHECK(comp.chi0_eps.data[i] + comp.chi1_eps.data[i] == 1.0);
}

TEST_CASE("boundary-straddling cells join the lattice only if their hole fits") {
    // domain of extent 1.5 with unit cells: the second block per axis is cut
    const CellGeometry cell = build_cell({Box{{0.1, 0.1, 0.1}, {0.9, 0.9, 0.9}}}, 16);
    Grid omega = box_grid({0.0, 0.0, 0.0}, {1.5, 1.5, 1.5}, {48, 48, 48});
    const CompositeGeometry comp = build_composite(cell, 1.0, omega);
    CHECK(comp.ncells == Int3{2, 2, 2});
    CHECK(comp.lattice.size() == 1); // only the origin cell's hole fits inside
    CHECK(comp.cell_interior[comp.cell_index(0, 0, 0)] == 1);
    CHECK(comp.cell_interior[comp.cell_index(1, 1, 1)] == 0);

    const MaskCheckResult mc = unfold_mask_check(comp);
    CHECK(mc.max_interior == 0.0);      // covered cells match the reference mask
    CHECK(mc.max_zero_extended == 1.0); // truncated cells are visibly off-lattice

    // a hole reaching past the domain boundary must not enter the lattice
    Grid small = box_grid({0.0, 0.0, 0.0}, {1.25, 1.25, 1.25}, {40, 40, 40});
    const CompositeGeometry comp2 = build_composite(cell, 1.0, small);
    CHECK(comp2.lattice.size() == 1);
}

TEST_CASE("composite construction rejects incompatible grids") {
    const CellGeometry cell = build_cell({Box{{0.25, 0.25, 0.25}, {0.75, 0.75, 0.75}}}, 8);
    CHECK_THROWS_AS(build_composite_aligned(cell, 0.25, 30), PreconditionError); // 30 % 4 != 0
    CHECK_THROWS_AS(build_composite_aligned(cell, 0.3, 30), PreconditionError);  // 1/eps not integer
    Grid nonperiodic = unit_cell_grid(16);
    nonperiodic.periodic[1] = false;
    CHECK_THROWS_AS(build_composite(cell, 0.25, nonperiodic), PreconditionError);
}

TEST_CASE("multiple disjoint holes accumulate volume and distances") {
    const std::vector<Box> holes{Box{{0.1, 0.1, 0.1}, {0.3, 0.3, 0.3}},
                                 Box{{0.6, 0.6, 0.6}, {0.9, 0.9, 0.9}}};
    const CellGeometry cell = build_cell(holes, 20);
    CHECK(cell.vol_q0 == Catch::Approx(0.2 * 0.2 * 0.2 + 0.3 * 0.3 * 0.3).margin(1e-14));
    CHECK(cell.margin == Catch::Approx(0.1));
    CHECK(cell.hole_inner_distance({0.2, 0.2, 0.2}) == Catch::Approx(0.1));
    CHECK(cell.hole_inner_distance({0.75, 0.75, 0.75}) == Catch::Approx(0.15));
}

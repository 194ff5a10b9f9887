#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "microhom/field.hpp"

namespace microhom {

/** Open axis-aligned box, used for perforation holes in the unit cell. */
struct Box {
    Vec3 lo{0.0, 0.0, 0.0};
    Vec3 hi{1.0, 1.0, 1.0};

    bool contains(const Vec3& z) const {
        for (int a = 0; a < 3; ++a)
            if (!(z[a] > lo[a] && z[a] < hi[a])) return false;
        return true;
    }

    /** L-inf distance to the box boundary, positive inside, 0 outside. */
    double inner_distance(const Vec3& z) const {
        double d = 1e300;
        for (int a = 0; a < 3; ++a) {
            d = std::min(d, std::min(z[a] - lo[a], hi[a] - z[a]));
        }
        return std::max(d, 0.0);
    }

    double min_half_side() const {
        double s = 1e300;
        for (int a = 0; a < 3; ++a) s = std::min(s, 0.5 * (hi[a] - lo[a]));
        return s;
    }
};

/**
 * Periodicity cell Q = (0,1)^3 with a perforation Q0 (union of boxes held
 * strictly inside Q) and matrix part Q1 = Q \ Q0.  Carries exact indicator
 * masks on a midpoint-sampled micro grid.
 */
struct CellGeometry {
    std::vector<Box> holes;
    Grid micro;
    ScalarField chi0; // 1 on the holes
    ScalarField chi1; // 1 on the matrix
    double vol_q0 = 0.0;
    double margin = 0.0; // distance from the holes to the cell boundary

    bool in_holes(const Vec3& z) const {
        for (const Box& b : holes)
            if (b.contains(z)) return true;
        return false;
    }

    /** Distance to the perforation boundary from inside (exact for disjoint boxes). */
    double hole_inner_distance(const Vec3& z) const {
        double d = 0.0;
        for (const Box& b : holes) d = std::max(d, b.inner_distance(z));
        return d;
    }

    double inradius() const {
        double r = 0.0;
        for (const Box& b : holes) r = std::max(r, b.min_half_side());
        return r;
    }
};

inline CellGeometry build_cell(const std::vector<Box>& holes, int micro_n) {
    require(!holes.empty(), "cell: hole list must be non-empty");
    require(micro_n >= 2, "cell: micro resolution too small");
    CellGeometry c;
    c.holes = holes;
    c.margin = 1e300;
    for (const Box& b : holes) {
        for (int a = 0; a < 3; ++a) {
            require(b.hi[a] > b.lo[a], "cell: hole box is empty");
            const double m = std::min(b.lo[a], 1.0 - b.hi[a]);
            require(m > 0.0, "cell: hole must lie strictly inside the unit cell");
            c.margin = std::min(c.margin, m);
        }
    }
    c.micro = unit_cell_grid(micro_n);
    c.chi0 = sample_scalar(c.micro, [&](const Vec3& z) { return c.in_holes(z) ? 1.0 : 0.0; });
    c.chi1 = c.chi0;
    for (double& v : c.chi1.data) v = 1.0 - v;
    c.vol_q0 = 0.0;
    for (double v : c.chi0.data) c.vol_q0 += v;
    c.vol_q0 *= c.micro.cell_volume();
    require(c.vol_q0 > 0.0 && c.vol_q0 < 1.0, "cell: perforation volume must be in (0,1)");
    return c;
}

/**
 * Perforated composite at scale eps over a box domain.  The admissible
 * lattice Z collects the integer shifts t whose scaled holes, with closure,
 * fit strictly inside the domain; this deliberately admits shifts whose
 * surrounding cell straddles the boundary.  Macro masks are built from the
 * lattice and are exact for grids aligned with the scaled cell structure.
 */
struct CompositeGeometry {
    CellGeometry cell;
    Grid omega;
    double eps = 0.0;
    Int3 r{0, 0, 0};          // grid nodes per cell and axis
    Int3 ncells{0, 0, 0};     // lattice extent covering the grid
    std::vector<Int3> lattice; // members of Z, lexicographic
    std::vector<std::uint8_t> in_z;       // per covering cell
    std::vector<std::uint8_t> cell_interior; // cell fully covered by grid nodes
    ScalarField chi0_eps, chi1_eps;
    double vol_holes = 0.0;

    std::size_t cell_index(int tx, int ty, int tz) const {
        return (std::size_t(tx) * ncells[1] + ty) * ncells[2] + tz;
    }

    bool lattice_member(int tx, int ty, int tz) const {
        if (tx < 0 || ty < 0 || tz < 0 || tx >= ncells[0] || ty >= ncells[1] || tz >= ncells[2])
            return false;
        return in_z[cell_index(tx, ty, tz)] != 0;
    }
};

inline CompositeGeometry build_composite(const CellGeometry& cell, double eps, const Grid& omega) {
    CompositeGeometry g;
    g.cell = cell;
    g.omega = omega;
    g.eps = eps;
    require(eps > 0.0, "composite: eps must be positive");
    for (int a = 0; a < 3; ++a) {
        require(omega.periodic[a], "composite: midpoint-sampled (periodic-layout) grid required");
        const double ratio = eps / omega.spacing(a);
        const double rounded = std::round(ratio);
        require(std::fabs(ratio - rounded) < 1e-9 && rounded >= 1.0,
                "composite: eps must be an integer multiple of the grid spacing");
        g.r[a] = int(rounded);
        g.ncells[a] = int(std::ceil(double(omega.n[a]) / g.r[a] - 1e-12));
    }

    g.in_z.assign(std::size_t(g.ncells[0]) * g.ncells[1] * g.ncells[2], 0);
    g.cell_interior.assign(g.in_z.size(), 0);
    for (int tx = 0; tx < g.ncells[0]; ++tx)
        for (int ty = 0; ty < g.ncells[1]; ++ty)
            for (int tz = 0; tz < g.ncells[2]; ++tz) {
                const int t[3] = {tx, ty, tz};
                bool member = true;
                for (const Box& b : cell.holes) {
                    for (int a = 0; a < 3; ++a) {
                        const double lo = eps * (t[a] + b.lo[a]) + omega.origin[a];
                        const double hi = eps * (t[a] + b.hi[a]) + omega.origin[a];
                        if (!(lo > omega.origin[a] && hi < omega.origin[a] + omega.extent[a]))
                            member = false;
                    }
                    if (!member) break;
                }
                const std::size_t ci = g.cell_index(tx, ty, tz);
                if (member) {
                    g.in_z[ci] = 1;
                    g.lattice.push_back({tx, ty, tz});
                }
                bool interior = true;
                for (int a = 0; a < 3; ++a)
                    if ((t[a] + 1) * g.r[a] > omega.n[a]) interior = false;
                g.cell_interior[ci] = interior ? 1 : 0;
            }

    g.chi0_eps = ScalarField(omega, 1);
    for_each_node(omega, [&](int ix, int iy, int iz, std::size_t node) {
        const int i[3] = {ix, iy, iz};
        int t[3], l[3];
        for (int a = 0; a < 3; ++a) {
            t[a] = i[a] / g.r[a];
            l[a] = i[a] - t[a] * g.r[a];
        }
        if (!g.lattice_member(t[0], t[1], t[2])) return;
        const Vec3 z{(l[0] + 0.5) / g.r[0], (l[1] + 0.5) / g.r[1], (l[2] + 0.5) / g.r[2]};
        if (cell.in_holes(z)) g.chi0_eps.data[node] = 1.0;
    });
    g.chi1_eps = g.chi0_eps;
    for (double& v : g.chi1_eps.data) v = 1.0 - v;

    g.vol_holes = 0.0;
    for (double v : g.chi0_eps.data) g.vol_holes += v;
    g.vol_holes *= omega.cell_volume();
    return g;
}

/** Aligned certified regime: Omega = (0,1)^3, eps = 1/M, N a multiple of M. */
inline CompositeGeometry build_composite_aligned(const CellGeometry& cell, double eps, int macro_n) {
    const double m = 1.0 / eps;
    require(std::fabs(m - std::round(m)) < 1e-9, "composite: eps must be the reciprocal of an integer");
    const int M = int(std::round(m));
    require(macro_n % M == 0, "composite: macro resolution must be a multiple of 1/eps");
    return build_composite(cell, eps, unit_cell_grid(macro_n));
}

struct MaskCheckResult {
    double max_interior = 0.0;      // residual over fully covered cells
    double max_zero_extended = 0.0; // residual over all cells, missing nodes read as 0
};

/**
 * Compares the unfolded macro hole mask against the reference cell mask at
 * the matching micro sampling.  Zero in the aligned regime; the
 * zero-extension residual flags cells outside the admissible lattice.
 */
inline MaskCheckResult unfold_mask_check(const CompositeGeometry& g) {
    MaskCheckResult res;
    for (int tx = 0; tx < g.ncells[0]; ++tx)
        for (int ty = 0; ty < g.ncells[1]; ++ty)
            for (int tz = 0; tz < g.ncells[2]; ++tz) {
                const int t[3] = {tx, ty, tz};
                const bool interior = g.cell_interior[g.cell_index(tx, ty, tz)] != 0;
                for (int lx = 0; lx < g.r[0]; ++lx)
                    for (int ly = 0; ly < g.r[1]; ++ly)
                        for (int lz = 0; lz < g.r[2]; ++lz) {
                            const int l[3] = {lx, ly, lz};
                            int i[3];
                            bool present = true;
                            for (int a = 0; a < 3; ++a) {
                                i[a] = t[a] * g.r[a] + l[a];
                                if (i[a] >= g.omega.n[a]) present = false;
                            }
                            const Vec3 z{(lx + 0.5) / g.r[0], (ly + 0.5) / g.r[1], (lz + 0.5) / g.r[2]};
                            const double ref = g.cell.in_holes(z) ? 1.0 : 0.0;
                            const double val = present ? g.chi0_eps.at(i[0], i[1], i[2], 0) : 0.0;
                            const double d = std::fabs(val - ref);
                            res.max_zero_extended = std::max(res.max_zero_extended, d);
                            if (interior) res.max_interior = std::max(res.max_interior, d);
                        }
            }
    return res;
}

} // namespace microhom

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "microhom/energies.hpp"
#include "microhom/geometry.hpp"
#include "microhom/mollify.hpp"
#include "microhom/recovery.hpp"

namespace microhom {

/**
 * Built-in demonstration inputs.  Each scenario fixes an analytic limit
 * pair (mtilde, w) on a canonical centered-cube perforation; the
 * non-saturated tessellation also carries an explicit oscillating sequence
 * whose weak two-scale limit is the pair (the pair itself is out of reach
 * of the saturated recovery construction, which is the point of the demo).
 */
struct Scenario {
    std::string name;
    RecoveryInput input;
    std::function<SphereField(const Grid&, double)> sequence; // tessellation only
};

inline std::vector<std::string> scenario_names() { return {"constant", "bump", "tessellation"}; }

namespace scenario_detail {

// Frozen constants of the saturated-bump scenario (rotation angles in
// radians).  The micro window is deliberately low-bandwidth -- a separable
// raised cosine whose support is exactly the centered hole -- so that the
// oscillation stays resolvable at the coarse per-cell sampling rates the
// scale studies reach at their finest eps.
constexpr double kMacroAmp = 0.15; // macro in-plane rotation amplitude
constexpr double kOscAmp = 0.5;    // micro rotation scale
constexpr double kWinHalf = 0.25;  // half-width of the centered hole window

inline double macro_angle(double x0) { return kMacroAmp * std::sin(2.0 * M_PI * x0); }

/** C^1 raised-cosine window supported exactly on the open centered hole. */
inline double hole_window(const Vec3& z) {
    double w = 1.0;
    for (int a = 0; a < 3; ++a) {
        const double u = (z[a] - 0.5) / kWinHalf;
        if (std::fabs(u) >= 1.0) return 0.0;
        const double c = std::cos(0.5 * M_PI * u);
        w *= c * c;
    }
    return w;
}

inline double micro_angle(const Vec3& x, const Vec3& z) {
    return kOscAmp * std::cos(2.0 * M_PI * x[0]) * hole_window(z);
}

/** Unit vector rotated by `angle` in the (e1, e3) plane. */
inline Vec3 tilted(double angle) { return Vec3{std::sin(angle), 0.0, std::cos(angle)}; }

} // namespace scenario_detail

/** The canonical perforation shared by all scenarios: a centered cube hole. */
inline CellGeometry scenario_cell(int micro_n) {
    return build_cell({Box{{0.25, 0.25, 0.25}, {0.75, 0.75, 0.75}}}, micro_n);
}

/**
 * Alternating tessellation sequence: +e3 on the matrix part of every
 * eps-cube, and inside the perforation copies the sign flips with the
 * parity of the cube index.  Each member is exactly unit-norm; the cell
 * counts must be even per axis so the alternation averages out exactly.
 */
inline SphereField checkerboard_sequence(const Grid& g, double eps, const CellGeometry& cell) {
    Int3 r, cells;
    ts_detail::cells_and_rate(g, eps, r, cells);
    for (int a = 0; a < 3; ++a)
        require(cells[a] % 2 == 0,
                "tessellation: an even number of eps-cubes per axis is required for the "
                "alternation to average out");
    VectorField f(g, 3);
    for_each_node(g, [&](int ix, int iy, int iz, std::size_t node) {
        const int i[3] = {ix, iy, iz};
        int t[3], l[3];
        for (int a = 0; a < 3; ++a) {
            t[a] = i[a] / r[a];
            l[a] = i[a] - t[a] * r[a];
        }
        const Vec3 z{(l[0] + 0.5) / r[0], (l[1] + 0.5) / r[1], (l[2] + 0.5) / r[2]};
        double sign = 1.0;
        if (cell.in_holes(z) && ((t[0] + t[1] + t[2]) % 2 == 1)) sign = -1.0;
        f.set_vec(node, Vec3{0.0, 0.0, sign});
    });
    return SphereField(std::move(f));
}

/**
 * Construct a named scenario on the given macro grid.
 *
 *  - constant:     mtilde = e3, w = 0; saturated.
 *  - bump:         mtilde tilted in-plane by a smooth macro angle; w rotates
 *                  it further by a micro angle supported in the perforation,
 *                  so |mtilde + w| = 1 identically; saturated.
 *  - tessellation: mtilde = e3 and w = -e3 on the perforation, the weak
 *                  limit of the alternating checkerboard sequence; the pair
 *                  vanishes on the perforation, so it is not saturated.
 */
inline Scenario make_scenario(const std::string& name, const Grid& omega, int micro_n = 16) {
    Scenario sc;
    sc.name = name;
    sc.input.cell = scenario_cell(micro_n);

    if (name == "constant") {
        VectorField f(omega, 3);
        for_each_node(omega, [&](int, int, int, std::size_t node) {
            f.set_vec(node, Vec3{0.0, 0.0, 1.0});
        });
        sc.input.mtilde = SphereField(std::move(f));
        sc.input.saturated = true;
        return sc;
    }
    if (name == "bump") {
        using namespace scenario_detail;
        VectorField f(omega, 3);
        for_each_node(omega, [&](int ix, int iy, int iz, std::size_t node) {
            (void)iy;
            (void)iz;
            f.set_vec(node, tilted(macro_angle(omega.node(ix, iy, iz)[0])));
        });
        sc.input.mtilde = SphereField(std::move(f));
        sc.input.w = [](const Vec3& x, const Vec3& z) -> Vec3 {
            const double a = macro_angle(x[0]);
            const double t = micro_angle(x, z);
            if (t == 0.0) return Vec3{0.0, 0.0, 0.0};
            return tilted(a + t) - tilted(a);
        };
        sc.input.saturated = true;
        return sc;
    }
    if (name == "tessellation") {
        VectorField f(omega, 3);
        for_each_node(omega, [&](int, int, int, std::size_t node) {
            f.set_vec(node, Vec3{0.0, 0.0, 1.0});
        });
        sc.input.mtilde = SphereField(std::move(f));
        const CellGeometry cell = sc.input.cell;
        sc.input.w = [cell](const Vec3&, const Vec3& z) -> Vec3 {
            return cell.in_holes(z) ? Vec3{0.0, 0.0, -1.0} : Vec3{0.0, 0.0, 0.0};
        };
        sc.input.saturated = false;
        sc.sequence = [cell](const Grid& g, double eps) {
            return checkerboard_sequence(g, eps, cell);
        };
        return sc;
    }
    throw PreconditionError("scenario: unknown name '" + name +
                            "' (available: constant, bump, tessellation)");
}

} // namespace microhom

#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <utility>
#include <vector>

#include "microhom/cellsolve.hpp"
#include "microhom/fft.hpp"
#include "microhom/field.hpp"
#include "microhom/geometry.hpp"
#include "microhom/gradient.hpp"
#include "microhom/mollify.hpp"
#include "microhom/rng.hpp"
#include "microhom/two_scale.hpp"

/**
 * Recovery pipeline: builds unit-sphere-valued magnetizations m_k on Omega
 * whose two-scale behaviour matches a prescribed limit pair (mtilde, w):
 *
 *   smooth the macro field, smooth and cube-average the perforation profile,
 *   inject it as an oscillation at scale eps_k, optionally add a small
 *   corrector perturbation eps_k psi(x, x/eps_k), then project onto the
 *   sphere through a randomly shifted radial projection whose shift is
 *   chosen so that grid values keep a safe distance from the projection
 *   singularity.
 *
 * The run driver measures, per eps_k, the strong two-scale distances of
 *   m_k            to  mtilde(x) + w(x,z) chi0(z),
 *   eps_k grad m_k to  grad_z w(x,z) chi0(z),
 *   grad m_k chi1_k to (grad mtilde(x) + dpi(mtilde) grad_z psi) chi1(z),
 * together with the measures of the low-modulus set and its unfolded copy.
 */

namespace microhom {

/** Smooth limit profile evaluated at a macro/micro position pair. */
using ProfileFn = std::function<Vec3(const Vec3& x, const Vec3& z)>;
/** Micro Jacobian of a profile: entry (r,c) = d profile_r / d z_c. */
using ProfileJacobianFn = std::function<Mat3(const Vec3& x, const Vec3& z)>;

/**
 * Limit pair fed to the recovery pipeline.  The profiles are callables so
 * that every scale eps_k can sample them on its own aligned two-scale
 * layout (midpoint micro grids at different rates share no nodes, so a
 * single pre-sampled field cannot serve several scales).  `w` must vanish
 * outside the perforations; `psi` is optional and needs its micro Jacobian
 * for the matrix-part distance target.
 */
struct RecoveryInput {
    SphereField mtilde;        // macro field on Omega, |mtilde| = 1 nodewise
    CellGeometry cell;         // perforation geometry defining Q0 inside Q
    ProfileFn w;               // oscillation profile; null means 0
    ProfileFn psi;             // perturbation profile; null means 0
    ProfileJacobianFn psi_zgrad; // micro Jacobian of psi; required with psi
    bool saturated = false;    // asserts |mtilde(x) + w(x,z)| = 1 on the holes
};

/** Shift/threshold pair of the singularity-avoiding radial projection. */
struct ShiftedProjection {
    Vec3 a{0.0, 0.0, 0.0}; // |a| < 1/4
    double delta = 0.1;    // modulus threshold, in (0, 1/2)
    /** Smallest grid value of |v - a| over nodes with |v - a| < 1 - delta;
     *  +infinity when no node comes that close (vacuously safe shift). */
    double margin = 0.0;
};

/** Projection output with the per-node set membership used by diagnostics. */
struct ProjectionResult {
    SphereField m;
    std::vector<std::uint8_t> in_v;     // 1 where |v| < 1 - delta
    std::vector<std::uint8_t> excluded; // 1 on masked singular nodes
    int singular_count = 0;
    double measure_v = 0.0;   // grid measure of {|v| < 1 - delta}
    double grad_m_on_v = 0.0; // forward-difference L2 norm of grad m over V
    double grad_v_on_v = 0.0; // same stencil applied to the input field
};

/** Pre-projection field of one scale together with its scaled gradient. */
struct PreSequence {
    VectorField v;           // smoothed macro + eps psi + injected oscillation
    VectorField grad_scaled; // eps * grad v, 9 components
    VectorField mollified;   // the smoothed macro part alone
    VectorField oscillation; // the injected profile part alone
    double approx_distance = 0.0; // L2 gap between smoothed and raw profile
    int level = 0;                // smoothing level used for the profile
};

/** Per-scale diagnostics of the recovered sequence. */
struct RecoveryStep {
    double eps = 0.0;
    int level = 0;          // profile smoothing level chosen for this scale
    SphereField m;
    Vec3 shift{0.0, 0.0, 0.0};
    double shift_margin = 0.0;
    int singular_count = 0;
    double d1 = 0.0; // m_k vs mtilde + w chi0
    double d2 = 0.0; // eps grad m_k vs grad_z w chi0
    double d3 = 0.0; // grad m_k chi1_eps vs (grad mtilde + dpi grad_z psi) chi1
    double sphere_residual = 0.0;  // max | |m|-1 | over non-excluded nodes
    double approx_distance = 0.0;  // profile smoothing gap at this level
    double measure_v = 0.0;        // |{ |v| < 1-delta }| on Omega
    double measure_a = 0.0;        // unfolded measure of { |S(v) - target| >= delta }
    double measure_w = 0.0;        // unfolded copy of the low-modulus set
    double mass_w_d1 = 0.0;        // d1 integrand mass carried by that copy
    double grad_ratio = 0.0;       // |grad m|_{L2(V)} / |grad v|_{L2(V)}
};

struct RecoverySequence {
    double delta = 0.1;
    std::vector<RecoveryStep> steps;
};

/** Jacobian of the radial projection x -> x/|x|: (I - n n^T)/|x|. */
inline Mat3 nearest_point_jacobian(const Vec3& v) {
    const double r = norm(v);
    require(r > 0.0, "projection jacobian: undefined at the origin");
    const Vec3 n{v[0] / r, v[1] / r, v[2] / r};
    Mat3 p;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) p(i, j) = ((i == j ? 1.0 : 0.0) - n[i] * n[j]) / r;
    return p;
}

namespace recovery_detail {

/**
 * Sample a profile on the two-scale layout of (macro, eps), evaluating the
 * macro argument at the eps-cube centers.  Center sampling equals the exact
 * cube mean for affine macro dependence, which is the quadrature the
 * cube-averaging stage assumes.
 */
inline TwoScaleField sample_cell_profiles(
    const Grid& macro, double eps, int ncomp,
    const std::function<void(const Vec3& x_center, const Vec3& z, double* out)>& f) {
    TwoScaleField ts;
    Int3 r;
    ts_detail::cells_and_rate(macro, eps, r, ts.cells);
    ts.micro = Grid{{0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}, r, {true, true, true}};
    ts.eps = eps;
    ts.omega_origin = macro.origin;
    ts.ncomp = ncomp;
    ts.allocate();
    for_each_ts_sample(ts, [&](const Int3& t, std::size_t cflat, int lx, int ly, int lz, std::size_t s) {
        const Vec3 xc{macro.origin[0] + eps * (t[0] + 0.5), macro.origin[1] + eps * (t[1] + 0.5),
                      macro.origin[2] + eps * (t[2] + 0.5)};
        const Vec3 z = ts.micro.node(lx, ly, lz);
        f(xc, z, ts.data.data() + s * ncomp);
        const int ix = t[0] * r[0] + lx, iy = t[1] * r[1] + ly, iz = t[2] * r[2] + lz;
        if (ix >= macro.n[0] || iy >= macro.n[1] || iz >= macro.n[2]) ts.interior[cflat] = 0;
    });
    return ts;
}

/** Normalized bump kernel on a periodic grid, in Fourier space.  Returns
 *  false (and no kernel) when the radius resolves fewer than two nodes, in
 *  which case smoothing at this radius is invisible on the lattice. */
inline bool bump_kernel_hat(const Grid& g, double radius, Fft3& fft,
                            std::vector<std::complex<double>>& khat) {
    std::vector<double> kernel(g.num_nodes(), 0.0);
    double ksum = 0.0;
    std::size_t support = 0, node = 0;
    for (int ix = 0; ix < g.n[0]; ++ix)
        for (int iy = 0; iy < g.n[1]; ++iy)
            for (int iz = 0; iz < g.n[2]; ++iz, ++node) {
                const int ii[3] = {ix, iy, iz};
                double r2 = 0.0;
                for (int a = 0; a < 3; ++a) {
                    double d = ii[a] * g.spacing(a);
                    if (d > 0.5 * g.extent[a]) d -= g.extent[a];
                    r2 += d * d;
                }
                const double v = friedrichs_bump(r2 / (radius * radius));
                kernel[node] = v;
                ksum += v;
                if (v > 0.0) ++support;
            }
    if (support < 2) return false;
    for (double& v : kernel) v /= ksum;
    khat.resize(fft.cplx_size());
    fft.forward(kernel.data(), khat.data());
    return true;
}

/** Distance from a point to the boundary of the box [o, o+ext], measured
 *  positively inward (0 outside). */
inline double box_inner_distance(const Vec3& p, const Vec3& o, const Vec3& ext) {
    double d = 1e300;
    for (int a = 0; a < 3; ++a) d = std::min(d, std::min(p[a] - o[a], o[a] + ext[a] - p[a]));
    return std::max(d, 0.0);
}

/** Periodic trilinear interpolation on a midpoint-sampled grid. */
inline void periodic_trilerp(const VectorField& f, const Vec3& z, double* out) {
    const Grid& g = f.grid;
    int i0[3];
    double fr[3];
    for (int a = 0; a < 3; ++a) {
        const double u = (z[a] - g.origin[a]) / g.spacing(a) - 0.5;
        const double fl = std::floor(u);
        i0[a] = int(fl);
        fr[a] = u - fl;
    }
    auto wrap = [&](int i, int a) {
        const int n = g.n[a];
        return ((i % n) + n) % n;
    };
    for (int c = 0; c < f.ncomp; ++c) out[c] = 0.0;
    for (int dx = 0; dx < 2; ++dx)
        for (int dy = 0; dy < 2; ++dy)
            for (int dz = 0; dz < 2; ++dz) {
                const double wgt = (dx ? fr[0] : 1.0 - fr[0]) * (dy ? fr[1] : 1.0 - fr[1]) *
                                   (dz ? fr[2] : 1.0 - fr[2]);
                const std::size_t node =
                    (std::size_t(wrap(i0[0] + dx, 0)) * g.n[1] + wrap(i0[1] + dy, 1)) * g.n[2] +
                    wrap(i0[2] + dz, 2);
                for (int c = 0; c < f.ncomp; ++c) out[c] += wgt * f.data[node * f.ncomp + c];
            }
}

/** Replace masked nodes by the mean of their unmasked 6-neighbours so local
 *  difference stencils stay bounded; isolated masked points only. */
inline VectorField patch_masked_nodes(const VectorField& f, const std::vector<std::uint8_t>& mask) {
    VectorField out = f;
    const Grid& g = f.grid;
    for_each_node(g, [&](int ix, int iy, int iz, std::size_t node) {
        if (!mask[node]) return;
        double acc[3] = {0.0, 0.0, 0.0};
        int cnt = 0;
        const int i[3] = {ix, iy, iz};
        for (int a = 0; a < 3; ++a)
            for (int sgn = -1; sgn <= 1; sgn += 2) {
                int j[3] = {i[0], i[1], i[2]};
                j[a] = ((j[a] + sgn) % g.n[a] + g.n[a]) % g.n[a];
                const std::size_t nb = (std::size_t(j[0]) * g.n[1] + j[1]) * g.n[2] + j[2];
                if (mask[nb]) continue;
                for (int c = 0; c < f.ncomp; ++c) acc[c] += f.data[nb * f.ncomp + c];
                ++cnt;
            }
        if (cnt == 0) return;
        for (int c = 0; c < f.ncomp; ++c) out.data[node * f.ncomp + c] = acc[c] / cnt;
    });
    return out;
}

} // namespace recovery_detail

/**
 * Smooth a perforation profile at level j: damp it near the hole boundaries
 * and near the domain boundary, convolve with a bump of radius
 * r_j = 2^{-j} * (cell margin) in both the macro and the micro variable,
 * then cut off exactly so the support stays compactly inside Omega x Q0.
 * Convolutions whose kernel falls below the lattice resolution are skipped:
 * smoothing finer than the grid is invisible, so large levels converge to
 * the damped input itself.
 */
inline TwoScaleField approximate_w(const TwoScaleField& w, int j, const CellGeometry& cell) {
    require(j >= 0, "approximate_w: level must be non-negative");
    require(w.num_cells() > 0 && w.micro.num_nodes() > 0, "approximate_w: empty field");
    const double rj = std::ldexp(cell.margin, -j); // 2^{-j} * margin
    const double inradius = cell.inradius();
    require(1.5 * rj < inradius,
            "approximate_w: smoothing radius " + cell_detail::format_double(rj) +
                " needs holes deeper than " + cell_detail::format_double(1.5 * rj) +
                ", but the deepest inner radius is " + cell_detail::format_double(inradius) +
                " (hole too thin for this level)");

    TwoScaleField out = w;
    const std::size_t mn = w.micro_nodes();

    // support damping: micro ramp from the hole boundaries, macro ramp from
    // the domain boundary, evaluated at the eps-cube centers
    std::vector<double> zramp(mn);
    {
        std::size_t l = 0;
        for (int lx = 0; lx < w.micro.n[0]; ++lx)
            for (int ly = 0; ly < w.micro.n[1]; ++ly)
                for (int lz = 0; lz < w.micro.n[2]; ++lz, ++l)
                    zramp[l] = support_ramp(cell.hole_inner_distance(w.micro.node(lx, ly, lz)),
                                            1.5 * rj, 2.5 * rj);
    }
    const Vec3 ext{w.eps * w.cells[0], w.eps * w.cells[1], w.eps * w.cells[2]};
    for (int tx = 0; tx < w.cells[0]; ++tx)
        for (int ty = 0; ty < w.cells[1]; ++ty)
            for (int tz = 0; tz < w.cells[2]; ++tz) {
                const Vec3 xc{w.omega_origin[0] + w.eps * (tx + 0.5),
                              w.omega_origin[1] + w.eps * (ty + 0.5),
                              w.omega_origin[2] + w.eps * (tz + 0.5)};
                const double xramp = support_ramp(
                    recovery_detail::box_inner_distance(xc, w.omega_origin, ext), 1.5 * rj, 2.5 * rj);
                double* cd = out.cell_data(out.cell_flat(tx, ty, tz));
                for (std::size_t l = 0; l < mn; ++l) {
                    const double f = xramp * zramp[l];
                    for (int c = 0; c < w.ncomp; ++c) cd[l * w.ncomp + c] *= f;
                }
            }

    // micro convolution, one shared plan over all cells
    {
        Fft3 fft(w.micro.n, w.micro.extent);
        std::vector<std::complex<double>> khat;
        if (recovery_detail::bump_kernel_hat(w.micro, rj, fft, khat)) {
            std::vector<double> comp(mn), conv(mn);
            std::vector<std::complex<double>> hat(fft.cplx_size());
            for (std::size_t cf = 0; cf < out.num_cells(); ++cf) {
                double* cd = out.cell_data(cf);
                for (int c = 0; c < w.ncomp; ++c) {
                    for (std::size_t l = 0; l < mn; ++l) comp[l] = cd[l * w.ncomp + c];
                    fft.forward(comp.data(), hat.data());
                    for (std::size_t m = 0; m < hat.size(); ++m) hat[m] *= khat[m];
                    fft.inverse(hat.data(), conv.data());
                    for (std::size_t l = 0; l < mn; ++l) cd[l * w.ncomp + c] = conv[l];
                }
            }
        }
    }

    // macro convolution across the cell lattice (spacing eps); safe as a
    // periodic convolution because the damped field vanishes near the
    // domain boundary
    {
        const Grid lat{w.omega_origin, ext, w.cells, {true, true, true}};
        Fft3 fft(lat.n, lat.extent);
        std::vector<std::complex<double>> khat;
        if (recovery_detail::bump_kernel_hat(lat, rj, fft, khat)) {
            const std::size_t nc = out.num_cells();
            std::vector<double> comp(nc), conv(nc);
            std::vector<std::complex<double>> hat(fft.cplx_size());
            for (std::size_t l = 0; l < mn; ++l)
                for (int c = 0; c < w.ncomp; ++c) {
                    for (std::size_t cf = 0; cf < nc; ++cf)
                        comp[cf] = out.data[(cf * mn + l) * w.ncomp + c];
                    fft.forward(comp.data(), hat.data());
                    for (std::size_t m = 0; m < hat.size(); ++m) hat[m] *= khat[m];
                    fft.inverse(hat.data(), conv.data());
                    for (std::size_t cf = 0; cf < nc; ++cf)
                        out.data[(cf * mn + l) * w.ncomp + c] = conv[cf];
                }
        }
    }

    // exact support cutoff: the convolution result is guaranteed to vanish
    // within half a radius of the support boundary, so zeroing there only
    // removes transform round-off and keeps the support strictly inside
    std::vector<std::uint8_t> zkeep(mn);
    {
        std::size_t l = 0;
        for (int lx = 0; lx < w.micro.n[0]; ++lx)
            for (int ly = 0; ly < w.micro.n[1]; ++ly)
                for (int lz = 0; lz < w.micro.n[2]; ++lz, ++l)
                    zkeep[l] =
                        cell.hole_inner_distance(w.micro.node(lx, ly, lz)) >= 0.5 * rj ? 1 : 0;
    }
    for (int tx = 0; tx < w.cells[0]; ++tx)
        for (int ty = 0; ty < w.cells[1]; ++ty)
            for (int tz = 0; tz < w.cells[2]; ++tz) {
                const Vec3 xc{w.omega_origin[0] + w.eps * (tx + 0.5),
                              w.omega_origin[1] + w.eps * (ty + 0.5),
                              w.omega_origin[2] + w.eps * (tz + 0.5)};
                const bool xkeep =
                    recovery_detail::box_inner_distance(xc, w.omega_origin, ext) >= 0.5 * rj;
                double* cd = out.cell_data(out.cell_flat(tx, ty, tz));
                for (std::size_t l = 0; l < mn; ++l)
                    if (!xkeep || !zkeep[l])
                        for (int c = 0; c < w.ncomp; ++c) cd[l * w.ncomp + c] = 0.0;
            }
    return out;
}

/**
 * Average a two-scale profile over eps-cubes.  The profile representation is
 * constant in the macro variable within each cell, so for matching eps the
 * averaging reduces to restricting to the cells whose cube lies inside the
 * domain (encoded by the coverage flags); profiles sampled on a finer macro
 * lattice (eps an integer multiple of the sampling scale) are block-averaged
 * exactly.  Cells outside the admissible set are set to zero.
 */
inline TwoScaleField cube_average(const TwoScaleField& w_j, double eps) {
    require(w_j.eps > 0.0 && eps > 0.0, "cube averaging: scales must be positive");
    const double ratio = eps / w_j.eps;
    const int alpha = int(std::lround(ratio));
    require(std::fabs(ratio - alpha) <= 1e-9 * ratio && alpha >= 1,
            "cube averaging: requested scale " + cell_detail::format_double(eps) +
                " is not an integer multiple of the sampling scale " +
                cell_detail::format_double(w_j.eps));
    if (alpha == 1) {
        TwoScaleField out = w_j;
        const std::size_t mn = out.micro_nodes();
        for (std::size_t cf = 0; cf < out.num_cells(); ++cf)
            if (!out.interior[cf]) {
                double* cd = out.cell_data(cf);
                for (std::size_t i = 0; i < mn * out.ncomp; ++i) cd[i] = 0.0;
            }
        return out;
    }
    for (int a = 0; a < 3; ++a)
        require(w_j.cells[a] % alpha == 0,
                "cube averaging: the sampling lattice does not tile the requested cubes");
    TwoScaleField out;
    out.cells = {w_j.cells[0] / alpha, w_j.cells[1] / alpha, w_j.cells[2] / alpha};
    out.micro = w_j.micro;
    out.eps = eps;
    out.omega_origin = w_j.omega_origin;
    out.ncomp = w_j.ncomp;
    out.allocate();
    const std::size_t mn = out.micro_nodes();
    const double inv = 1.0 / (double(alpha) * alpha * alpha);
    for (int tx = 0; tx < out.cells[0]; ++tx)
        for (int ty = 0; ty < out.cells[1]; ++ty)
            for (int tz = 0; tz < out.cells[2]; ++tz) {
                const std::size_t cf = out.cell_flat(tx, ty, tz);
                bool inside = true;
                double* cd = out.cell_data(cf);
                for (int bx = 0; bx < alpha; ++bx)
                    for (int by = 0; by < alpha; ++by)
                        for (int bz = 0; bz < alpha; ++bz) {
                            const std::size_t ff =
                                w_j.cell_flat(tx * alpha + bx, ty * alpha + by, tz * alpha + bz);
                            if (!w_j.interior[ff]) inside = false;
                            const double* fd = w_j.cell_data(ff);
                            for (std::size_t i = 0; i < mn * out.ncomp; ++i) cd[i] += inv * fd[i];
                        }
                if (!inside) {
                    out.interior[cf] = 0;
                    for (std::size_t i = 0; i < mn * out.ncomp; ++i) cd[i] = 0.0;
                }
            }
    return out;
}

/**
 * Turn a two-scale profile into the single-scale oscillation
 * v(x) = W(cell(x), frac(x/eps)).  In the aligned regime this is an exact
 * index mapping (the inverse of unfolding), so unfold(oscillate(W)) == W on
 * fully covered cells.
 */
inline VectorField oscillate(const TwoScaleField& w_k_j, double eps) {
    require(w_k_j.eps > 0.0 && std::fabs(w_k_j.eps - eps) <= 1e-12 * eps,
            "oscillation: profile sampled at eps = " + cell_detail::format_double(w_k_j.eps) +
                ", requested eps = " + cell_detail::format_double(eps) +
                " (aligned scales required)");
    Int3 n;
    Vec3 ext;
    for (int a = 0; a < 3; ++a) {
        n[a] = w_k_j.cells[a] * w_k_j.micro.n[a];
        ext[a] = eps * w_k_j.cells[a];
    }
    const Grid macro{w_k_j.omega_origin, ext, n, {true, true, true}};
    return fold(w_k_j, macro);
}

/**
 * Pick one smoothing level per scale from a table err[level][scale]:
 * the largest level whose error is within a factor two of the column
 * optimum plus the scale itself as slack, made monotone so later scales
 * never fall back to coarser smoothing.
 */
inline std::vector<int> diagonal_select(const std::vector<std::vector<double>>& error_table,
                                        const std::vector<double>& eps_list) {
    require(!error_table.empty(), "diagonal selection: empty error table");
    const std::size_t nk = eps_list.size();
    require(nk > 0, "diagonal selection: empty scale list");
    for (const auto& row : error_table)
        require(row.size() == nk, "diagonal selection: table row length does not match the scales");
    std::vector<int> pick(nk, 0);
    int floor_level = 0;
    for (std::size_t k = 0; k < nk; ++k) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& row : error_table) best = std::min(best, row[k]);
        const double bar = 2.0 * best + eps_list[k];
        int sel = 0;
        for (std::size_t j = 0; j < error_table.size(); ++j)
            if (error_table[j][k] <= bar) sel = int(j);
        floor_level = std::max(floor_level, sel);
        pick[k] = floor_level;
    }
    return pick;
}

/**
 * Assemble the pre-projection field of one scale:
 *   v = mollify(mtilde, eps) + eps * psi(x, x/eps) + oscillation(level),
 * where the oscillation runs through profile smoothing, cube averaging and
 * exact injection.  Also returns eps * grad v (trigonometric derivative;
 * every ingredient is smooth and periodic-compatible by construction).
 */
inline PreSequence build_presequence(const RecoveryInput& input, double eps, int level) {
    const VectorField& mt = input.mtilde.f;
    require(mt.ncomp == 3, "presequence: macro field must have 3 components");
    Int3 r, cells;
    ts_detail::cells_and_rate(mt.grid, eps, r, cells);

    PreSequence out;
    out.level = level;
    const int rmin = std::min(std::min(r[0], r[1]), r[2]);
    // a kernel needs at least two lattice nodes; below that the smoothing
    // radius eps is invisible on the grid and mollification degenerates
    out.mollified = mollify(mt, rmin >= 2 ? eps : 0.0);
    out.v = out.mollified;

    if (input.w) {
        TwoScaleField wts = recovery_detail::sample_cell_profiles(
            mt.grid, eps, 3, [&](const Vec3& x, const Vec3& z, double* o) {
                const Vec3 val = input.w(x, z);
                for (int c = 0; c < 3; ++c) o[c] = val[c];
            });
        // the profile must live on the perforations only
        double wmax = 0.0;
        for (double v : wts.data) wmax = std::max(wmax, std::fabs(v));
        std::size_t l = 0;
        std::vector<std::uint8_t> inhole(wts.micro_nodes());
        for (int lx = 0; lx < wts.micro.n[0]; ++lx)
            for (int ly = 0; ly < wts.micro.n[1]; ++ly)
                for (int lz = 0; lz < wts.micro.n[2]; ++lz, ++l)
                    inhole[l] = input.cell.in_holes(wts.micro.node(lx, ly, lz)) ? 1 : 0;
        const std::size_t mn = wts.micro_nodes();
        for (std::size_t cf = 0; cf < wts.num_cells(); ++cf) {
            double* cd = wts.cell_data(cf);
            for (std::size_t i = 0; i < mn; ++i)
                if (!inhole[i])
                    for (int c = 0; c < 3; ++c) {
                        require(std::fabs(cd[i * 3 + c]) <= 1e-10 * (1.0 + wmax),
                                "recovery input: the oscillation profile has support outside the "
                                "perforations");
                        cd[i * 3 + c] = 0.0;
                    }
        }
        TwoScaleField wj = approximate_w(wts, level, input.cell);
        out.approx_distance = strong_ts_distance(wj, wts);
        out.oscillation = oscillate(cube_average(wj, eps), eps);
    } else {
        out.oscillation = VectorField(mt.grid, 3);
    }

    for (std::size_t i = 0; i < out.v.data.size(); ++i) out.v.data[i] += out.oscillation.data[i];
    if (input.psi) {
        for_each_node(mt.grid, [&](int ix, int iy, int iz, std::size_t node) {
            const int i[3] = {ix, iy, iz};
            Vec3 z;
            for (int a = 0; a < 3; ++a) z[a] = (i[a] % r[a] + 0.5) / r[a];
            const Vec3 p = input.psi(mt.grid.node(ix, iy, iz), z);
            for (int c = 0; c < 3; ++c) out.v.data[node * 3 + c] += eps * p[c];
        });
    }

    out.grad_scaled = gradient(out.v, GradScheme::spectral);
    for (double& g : out.grad_scaled.data) g *= eps;
    return out;
}

/**
 * Choose a projection shift a in the ball of radius 1/4: sample seeded
 * uniform candidates and keep the first one maximizing the smallest grid
 * value of |v - a| among nodes with |v - a| < 1 - delta (+infinity when no
 * node comes that close).  The winner must clear one grid spacing h, so the
 * discrete gradient of the shifted projection stays bounded by ~1/h.
 */
inline ShiftedProjection select_shift_points(const std::vector<Vec3>& values, double h,
                                             double delta, std::uint64_t seed, int trials) {
    require(delta > 0.0 && delta < 0.5, "shift selection: delta must lie in (0, 1/2)");
    require(trials >= 1, "shift selection: at least one trial required");
    const CounterRng rng{seed};
    Vec3 best_a{0.0, 0.0, 0.0};
    double best_margin = -1.0;
    int best_trial = -1;
    for (int t = 0; t < trials; ++t) {
        const Vec3 a = rng.ball_point(std::uint64_t(t), 0.25);
        double margin = std::numeric_limits<double>::infinity();
        for (const Vec3& v : values) {
            const Vec3 d = v - a;
            const double q = norm(d);
            if (q < 1.0 - delta) margin = std::min(margin, q);
        }
        if (margin > best_margin) {
            best_margin = margin;
            best_a = a;
            best_trial = t;
        }
    }
    if (best_margin < h)
        throw SolverError("shift selection: no trial clears the grid margin h = " +
                          cell_detail::format_double(h) + "; best margin " +
                          cell_detail::format_double(best_margin) + " at trial " +
                          std::to_string(best_trial) +
                          " (the zero set of the field is unresolved at this spacing)");
    return ShiftedProjection{best_a, delta, best_margin};
}

inline ShiftedProjection select_shift(const VectorField& v, double delta, std::uint64_t seed,
                                      int trials) {
    require(v.ncomp == 3, "shift selection: 3-component field required");
    const double h =
        std::max(std::max(v.grid.spacing(0), v.grid.spacing(1)), v.grid.spacing(2));
    const std::size_t nn = v.grid.num_nodes();
    std::vector<Vec3> values(nn);
    for (std::size_t i = 0; i < nn; ++i) values[i] = v.vec_at(i);
    return select_shift_points(values, h, delta, seed, trials);
}

/**
 * Project a field onto the unit sphere while avoiding its small values:
 * on V = {|v| < 1 - delta} project the shifted vector v - a radially; off V
 * project v itself.  Nodes of V closer than h/2 to the shift are the
 * (finitely many) singular points: they are masked, counted, and given a
 * placeholder direction.  Records forward-difference gradient norms of the
 * output and the input over V, whose ratio is the empirical stability
 * constant of the projection.
 */
inline ProjectionResult shifted_project(const VectorField& v, const ShiftedProjection& shift) {
    require(v.ncomp == 3, "shifted projection: 3-component field required");
    require(norm(shift.a) < 0.25, "shifted projection: |a| = " +
                                      cell_detail::format_double(norm(shift.a)) +
                                      " must stay below 1/4");
    require(shift.delta > 0.0 && shift.delta < 0.5,
            "shifted projection: delta must lie in (0, 1/2)");
    const Grid& g = v.grid;
    const double h = std::max(std::max(g.spacing(0), g.spacing(1)), g.spacing(2));
    const std::size_t nn = g.num_nodes();

    ProjectionResult out;
    VectorField m(g, 3);
    out.in_v.assign(nn, 0);
    out.excluded.assign(nn, 0);
    for (std::size_t i = 0; i < nn; ++i) {
        const Vec3 vv = v.vec_at(i);
        const double q = norm(vv);
        if (q < 1.0 - shift.delta) {
            out.in_v[i] = 1;
            const Vec3 d = vv - shift.a;
            const double qa = norm(d);
            if (qa < 0.5 * h) {
                out.excluded[i] = 1;
                ++out.singular_count;
                m.set_vec(i, {0.0, 0.0, 1.0});
            } else {
                m.set_vec(i, {d[0] / qa, d[1] / qa, d[2] / qa});
            }
        } else {
            m.set_vec(i, {vv[0] / q, vv[1] / q, vv[2] / q});
        }
    }

    std::size_t count_v = 0;
    for (std::size_t i = 0; i < nn; ++i) count_v += out.in_v[i];
    out.measure_v = double(count_v) * g.cell_volume();

    // forward differences between pairs inside V, skipping masked nodes
    double g2m = 0.0, g2v = 0.0;
    const double vol = g.cell_volume();
    for_each_node(g, [&](int ix, int iy, int iz, std::size_t node) {
        if (!out.in_v[node] || out.excluded[node]) return;
        const int i[3] = {ix, iy, iz};
        for (int a = 0; a < 3; ++a) {
            int j[3] = {i[0], i[1], i[2]};
            j[a] = (j[a] + 1) % g.n[a];
            const std::size_t nb = (std::size_t(j[0]) * g.n[1] + j[1]) * g.n[2] + j[2];
            if (!out.in_v[nb] || out.excluded[nb]) continue;
            const double inv_h = 1.0 / g.spacing(a);
            for (int c = 0; c < 3; ++c) {
                const double dm = (m.data[nb * 3 + c] - m.data[node * 3 + c]) * inv_h;
                const double dv = (v.data[nb * 3 + c] - v.data[node * 3 + c]) * inv_h;
                g2m += vol * dm * dm;
                g2v += vol * dv * dv;
            }
        }
    });
    out.grad_m_on_v = std::sqrt(g2m);
    out.grad_v_on_v = std::sqrt(g2v);
    out.m = SphereField(std::move(m));
    return out;
}

/** Perturbation profile assembled from tangential cell correctors. */
struct CorrectorPerturbation {
    ProfileFn psi;
    ProfileJacobianFn psi_zgrad;
};

struct CorrectorPerturbationOptions {
    double quantum = 1e-2; // jet quantization step keying the corrector cache
    FhomOptions fhom;      // cell solver controls
};

/**
 * Build the perturbation psi(x, z) = corrector of the tangential cell
 * problem at the local jet (mtilde(x), grad mtilde(x)).  Jets are quantized
 * so nearby macro points share one cell solve; each distinct quantized jet
 * triggers one solve whose corrector (and its micro gradient) is cached and
 * evaluated by periodic trilinear interpolation.  Intended for slowly
 * varying macro fields; psi is tangent to mtilde up to the quantization
 * step.  The macro field must be smooth and periodic-compatible, since its
 * gradient is taken trigonometrically.
 */
inline CorrectorPerturbation build_corrector_perturbation(
    const SphereField& mtilde, const CellGeometry& cell,
    const CorrectorPerturbationOptions& opts = {}) {
    require(opts.quantum > 0.0, "corrector perturbation: quantization step must be positive");

    struct Entry {
        VectorField phi;  // 3 components on the micro grid
        VectorField gphi; // 9 components, micro Jacobian of phi
    };
    struct State {
        VectorField mt;
        VectorField grad_mt;
        CellGeometry cell;
        CorrectorPerturbationOptions opts;
        std::map<std::array<long long, 12>, std::shared_ptr<const Entry>> cache;
        std::mutex lock;

        std::shared_ptr<const Entry> jet_entry(const Vec3& x) {
            const Grid& g = mt.grid;
            std::size_t idx[3];
            for (int a = 0; a < 3; ++a) {
                const long long n = g.n[a];
                long long i = std::llround((x[a] - g.origin[a]) / g.spacing(a) - 0.5);
                idx[a] = std::size_t(((i % n) + n) % n);
            }
            const std::size_t node = (idx[0] * g.n[1] + idx[1]) * g.n[2] + idx[2];
            std::array<long long, 12> key;
            Vec3 s;
            Mat3 xi;
            for (int c = 0; c < 3; ++c) {
                s[c] = mt.data[node * 3 + c];
                key[c] = std::llround(s[c] / opts.quantum);
                for (int a = 0; a < 3; ++a) {
                    xi(c, a) = grad_mt.data[node * 9 + c * 3 + a];
                    key[3 + c * 3 + a] = std::llround(xi(c, a) / opts.quantum);
                }
            }
            std::lock_guard<std::mutex> guard(lock);
            auto it = cache.find(key);
            if (it != cache.end()) return it->second;
            // solve at the quantized jet so equal keys give equal correctors
            Vec3 sq;
            Mat3 xq;
            double sn = 0.0;
            for (int c = 0; c < 3; ++c) {
                sq[c] = key[c] * opts.quantum;
                sn += sq[c] * sq[c];
                for (int a = 0; a < 3; ++a) xq(c, a) = key[3 + c * 3 + a] * opts.quantum;
            }
            sn = std::sqrt(sn);
            for (int c = 0; c < 3; ++c) sq[c] = sn > 0.0 ? sq[c] / sn : (c == 2 ? 1.0 : 0.0);
            auto e = std::make_shared<Entry>();
            if (frob_norm2(xq) == 0.0) {
                e->phi = VectorField(cell.micro, 3);
                e->gphi = VectorField(cell.micro, 9);
            } else {
                const FhomResult fr = fhom(sq, xq, cell, opts.fhom);
                e->phi = fr.corrector.phi;
                e->gphi = gradient(e->phi, GradScheme::spectral);
            }
            cache.emplace(key, e);
            return e;
        }
    };

    auto st = std::make_shared<State>();
    st->mt = mtilde.f;
    st->grad_mt = gradient(mtilde.f, GradScheme::spectral);
    st->cell = cell;
    st->opts = opts;

    CorrectorPerturbation cp;
    cp.psi = [st](const Vec3& x, const Vec3& z) {
        const auto e = st->jet_entry(x);
        Vec3 out;
        recovery_detail::periodic_trilerp(e->phi, z, out.data());
        return out;
    };
    cp.psi_zgrad = [st](const Vec3& x, const Vec3& z) {
        const auto e = st->jet_entry(x);
        Mat3 out;
        recovery_detail::periodic_trilerp(e->gphi, z, out.a.data());
        return out;
    };
    return cp;
}

/**
 * Full pipeline over a decreasing list of scales.  Per scale: choose the
 * profile smoothing level by diagonal selection over the measured
 * smoothing-error table, assemble the pre-projection field, select a safe
 * shift, project, and measure the three strong two-scale distances against
 * the limit targets together with the set-measure diagnostics.
 */
inline RecoverySequence run_recovery(const RecoveryInput& input,
                                     const std::vector<double>& eps_list, double delta,
                                     std::uint64_t seed) {
    require(input.saturated,
            "recovery: the saturation flag must be set (the limit pair has to satisfy "
            "|mtilde + w| = 1 on the perforations)");
    require(input.mtilde.f.ncomp == 3, "recovery: macro field must have 3 components");
    require(!eps_list.empty(), "recovery: empty scale list");
    for (std::size_t k = 1; k < eps_list.size(); ++k)
        require(eps_list[k] < eps_list[k - 1], "recovery: scales must decrease strictly");
    require(delta > 0.0 && delta < 0.5, "recovery: delta must lie in (0, 1/2)");
    if (input.psi)
        require(bool(input.psi_zgrad),
                "recovery: psi provided without its micro Jacobian (needed for the matrix-part "
                "distance target)");

    const Grid& g = input.mtilde.f.grid;

    // feasible smoothing levels: the support ramp must leave room in the holes
    constexpr int kMaxLevel = 8;
    std::vector<int> levels;
    for (int j = 0; j <= kMaxLevel; ++j)
        if (1.5 * std::ldexp(input.cell.margin, -j) < input.cell.inradius()) levels.push_back(j);
    require(!levels.empty() || !input.w,
            "recovery: no smoothing level fits inside the perforation (margin " +
                cell_detail::format_double(input.cell.margin) + " vs inner radius " +
                cell_detail::format_double(input.cell.inradius()) + ")");

    // smoothing-error table over (level, scale), then diagonal selection
    std::vector<int> chosen(eps_list.size(), 0);
    if (input.w) {
        std::vector<std::vector<double>> table(levels.size(),
                                               std::vector<double>(eps_list.size(), 0.0));
        for (std::size_t k = 0; k < eps_list.size(); ++k) {
            TwoScaleField wts = recovery_detail::sample_cell_profiles(
                g, eps_list[k], 3, [&](const Vec3& x, const Vec3& z, double* o) {
                    const Vec3 val = input.w(x, z);
                    for (int c = 0; c < 3; ++c) o[c] = val[c];
                });
            for (std::size_t r = 0; r < levels.size(); ++r)
                table[r][k] = strong_ts_distance(approximate_w(wts, levels[r], input.cell), wts);
        }
        const std::vector<int> rows = diagonal_select(table, eps_list);
        for (std::size_t k = 0; k < eps_list.size(); ++k) chosen[k] = levels[std::size_t(rows[k])];
    }

    // macro-gradient part of the matrix target, same stencil as the
    // recovered field's gradient so the comparison is scheme-consistent
    const VectorField grad_mt = gradient(input.mtilde.f, GradScheme::central);

    RecoverySequence seq;
    seq.delta = delta;
    for (std::size_t k = 0; k < eps_list.size(); ++k) {
        const double eps = eps_list[k];
        RecoveryStep step;
        step.eps = eps;
        step.level = chosen[k];

        PreSequence pre = build_presequence(input, eps, chosen[k]);
        step.approx_distance = pre.approx_distance;

        const ShiftedProjection shift = select_shift(pre.v, delta, seed + k, 64);
        step.shift = shift.a;
        step.shift_margin = shift.margin;
        ProjectionResult proj = shifted_project(pre.v, shift);
        step.singular_count = proj.singular_count;
        step.measure_v = proj.measure_v;
        step.grad_ratio =
            proj.grad_v_on_v > 0.0 ? proj.grad_m_on_v / proj.grad_v_on_v : 0.0;

        // local difference gradients: the projected field is only piecewise
        // smooth across the V boundary, so trigonometric derivatives would
        // smear that seam over the whole box
        const VectorField mp = recovery_detail::patch_masked_nodes(proj.m.f, proj.excluded);
        const VectorField gm = gradient(mp, GradScheme::central);

        TwoScaleField um = unfold(proj.m.f, eps);
        TwoScaleField uv = unfold(pre.v, eps);
        TwoScaleField ugm = unfold(gm, eps);

        // node-sampled profile and its per-cell difference gradient; the
        // micro-gradient target is discretized with the same central stencil
        // that differentiates the recovered field, so the distance measures
        // the theorem's gap rather than the disagreement of two derivative
        // discretizations (the discrete derivative of a hole-supported
        // profile legitimately lives on a one-node dilation of the holes,
        // so no indicator re-masking is applied to it)
        TwoScaleField wnode, wgz;
        if (input.w) {
            wnode = sample_two_scale(g, eps, 3, [&](const Vec3& x, const Vec3& z, double* o) {
                const Vec3 val = input.w(x, z);
                for (int c = 0; c < 3; ++c) o[c] = val[c];
            });
            wgz = ts_zgradient(wnode, CellGradScheme::central_wrap);
        }

        const Int3 r = um.micro.n;
        const double wgt = um.sample_weight();
        double acc1 = 0.0, acc2 = 0.0, acc3 = 0.0, accw = 0.0;
        double meas_a = 0.0, meas_w = 0.0;
        double sat_worst = 0.0;
        for_each_ts_sample(um, [&](const Int3& t, std::size_t cflat, int lx, int ly, int lz,
                                   std::size_t s) {
            if (!um.interior[cflat]) return;
            const int ix = t[0] * r[0] + lx, iy = t[1] * r[1] + ly, iz = t[2] * r[2] + lz;
            const std::size_t node = (std::size_t(ix) * g.n[1] + iy) * g.n[2] + iz;
            const Vec3 z = um.micro.node(lx, ly, lz);
            const Vec3 x = g.node(ix, iy, iz);
            const bool hole = input.cell.in_holes(z);
            const Vec3 mt = input.mtilde.f.vec_at(node);

            // value target: macro field plus the profile on the holes
            Vec3 t1 = mt;
            if (hole && input.w) {
                t1 = t1 + Vec3{wnode.data[s * 3 + 0], wnode.data[s * 3 + 1], wnode.data[s * 3 + 2]};
                sat_worst = std::max(sat_worst, std::fabs(norm(t1) - 1.0));
            }

            // set measures from the pre-projection field
            const Vec3 sv{uv.data[s * 3 + 0], uv.data[s * 3 + 1], uv.data[s * 3 + 2]};
            if (norm(sv - t1) >= delta) meas_a += wgt;
            const bool in_w = norm(sv) < 1.0 - delta;
            if (in_w) meas_w += wgt;

            if (proj.excluded[node]) return; // masked singular points
            const Vec3 sm{um.data[s * 3 + 0], um.data[s * 3 + 1], um.data[s * 3 + 2]};
            const double e1 = dot(sm - t1, sm - t1);
            acc1 += wgt * e1;
            if (in_w) accw += wgt * e1;

            // scaled-gradient target
            for (int c = 0; c < 3; ++c)
                for (int a = 0; a < 3; ++a) {
                    const double lhs2 = eps * ugm.data[s * 9 + c * 3 + a];
                    const double rhs2 = input.w ? eps * wgz.data[s * 9 + c * 3 + a] : 0.0;
                    acc2 += wgt * (lhs2 - rhs2) * (lhs2 - rhs2);
                }

            // matrix-part target, measured away from the phase boundary:
            // samples whose difference stencil reaches into a hole would
            // compare a cross-phase stencil against a one-phase target, a
            // fixed-spacing artifact that grows as the micro resolution
            // coarsens, so the indicator is eroded by one stencil node
            if (!hole) {
                bool clear = true;
                for (int a = 0; a < 3 && clear; ++a)
                    for (int sgn = -1; sgn <= 1 && clear; sgn += 2) {
                        Vec3 q = z;
                        q[a] += sgn * um.micro.spacing(a);
                        q[a] -= std::floor(q[a]);
                        if (input.cell.in_holes(q)) clear = false;
                    }
                if (clear) {
                    Mat3 t3{};
                    if (input.psi) t3 = mat_mul(nearest_point_jacobian(mt), input.psi_zgrad(x, z));
                    for (int c = 0; c < 3; ++c)
                        for (int a = 0; a < 3; ++a) {
                            const double diff = ugm.data[s * 9 + c * 3 + a] -
                                                (grad_mt.data[node * 9 + c * 3 + a] + t3(c, a));
                            acc3 += wgt * diff * diff;
                        }
                }
            }
        });

        require(!(input.w && input.saturated) || sat_worst <= 1e-8,
                "recovery input: |mtilde + w| deviates from 1 by " +
                    cell_detail::format_double(sat_worst) +
                    " on the perforations (saturation hypothesis violated)");

        step.d1 = std::sqrt(acc1);
        step.d2 = std::sqrt(acc2);
        step.d3 = std::sqrt(acc3);
        step.measure_a = meas_a;
        step.measure_w = meas_w;
        step.mass_w_d1 = std::sqrt(accw);

        step.m = std::move(proj.m);
        step.sphere_residual = 0.0;
        const std::size_t nn = g.num_nodes();
        for (std::size_t i = 0; i < nn; ++i) {
            if (proj.excluded[i]) continue;
            step.sphere_residual =
                std::max(step.sphere_residual, std::fabs(norm(step.m.f.vec_at(i)) - 1.0));
        }
        seq.steps.push_back(std::move(step));
    }
    return seq;
}

} // namespace microhom

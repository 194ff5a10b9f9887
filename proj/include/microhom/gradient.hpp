#pragma once

#include <vector>

#include "microhom/fft.hpp"

namespace microhom {

enum class GradScheme { central, central_clamped, spectral };

namespace detail {

inline int wrap(int i, int n) { return (i % n + n) % n; }

/** One derivative along `axis` at a node: central inside, 3-point one-sided
 *  at ends.  Periodic axes wrap unless `clamp_ends` forces the one-sided
 *  stencil at the domain boundary (seam-free for non-periodic data held on a
 *  midpoint-sampled grid). */
inline double central_axis_deriv(const VectorField& f, int c, int ix, int iy, int iz, int axis,
                                 bool clamp_ends) {
    const Grid& g = f.grid;
    const double h = g.spacing(axis);
    int i[3] = {ix, iy, iz};
    auto val = [&](int shifted) {
        int j[3] = {i[0], i[1], i[2]};
        j[axis] = shifted;
        return f.at(j[0], j[1], j[2], c);
    };
    const int na = g.n[axis];
    const int p = i[axis];
    if (g.periodic[axis] && !clamp_ends) return (val(wrap(p + 1, na)) - val(wrap(p - 1, na))) / (2.0 * h);
    if (na == 2) return (val(1) - val(0)) / h;
    if (p == 0) return (-3.0 * val(0) + 4.0 * val(1) - val(2)) / (2.0 * h);
    if (p == na - 1) return (3.0 * val(na - 1) - 4.0 * val(na - 2) + val(na - 3)) / (2.0 * h);
    return (val(p + 1) - val(p - 1)) / (2.0 * h);
}

} // namespace detail

/**
 * Discrete gradient; result has ncomp*3 components laid out as
 * (component c, axis a) -> c*3 + a.
 *
 * central: second-order stencils, wrap-around on periodic axes, one-sided at
 * non-periodic boundaries (exact on affine data).
 * central_clamped: like central but one-sided at the ends of every axis;
 * use for non-periodic data held on a midpoint-sampled grid.
 * spectral: trigonometric differentiation; all axes must be periodic.
 */
inline VectorField gradient(const VectorField& f, GradScheme scheme = GradScheme::central) {
    VectorField out(f.grid, f.ncomp == 1 ? 3 : 9);
    require(f.ncomp == 1 || f.ncomp == 3, "gradient: input must have 1 or 3 components");
    if (scheme == GradScheme::central || scheme == GradScheme::central_clamped) {
        const bool clamp = scheme == GradScheme::central_clamped;
        for_each_node(f.grid, [&](int ix, int iy, int iz, std::size_t node) {
            for (int c = 0; c < f.ncomp; ++c)
                for (int a = 0; a < 3; ++a)
                    out.data[node * out.ncomp + c * 3 + a] =
                        detail::central_axis_deriv(f, c, ix, iy, iz, a, clamp);
        });
        return out;
    }
    for (int a = 0; a < 3; ++a)
        require(f.grid.periodic[a], "gradient: spectral scheme needs a fully periodic grid");
    Fft3 fft(f.grid.n, f.grid.extent);
    std::vector<double> comp, deriv(fft.real_size());
    std::vector<std::complex<double>> hat(fft.cplx_size()), dhat(fft.cplx_size());
    for (int c = 0; c < f.ncomp; ++c) {
        gather_component(f, c, comp);
        fft.forward(comp.data(), hat.data());
        for (int a = 0; a < 3; ++a) {
            fft.for_each_mode([&](int kx, int ky, int kz, std::size_t m) {
                const int kk[3] = {kx, ky, kz};
                dhat[m] = hat[m] * std::complex<double>(0.0, fft.kappa_deriv(a, kk[a]));
            });
            fft.inverse(dhat.data(), deriv.data());
            const std::size_t nn = f.grid.num_nodes();
            for (std::size_t i = 0; i < nn; ++i) out.data[i * out.ncomp + c * 3 + a] = deriv[i];
        }
    }
    return out;
}

/**
 * Gradient that never reaches across the boundary of {mask != 0}: central
 * where both axis neighbours lie in the mask, one-sided (3-point where
 * possible) otherwise, zero where no masked neighbour exists.  Rows at
 * unmasked nodes are zero.  This realizes the gradient of the restriction
 * of f to the masked region.  Domain ends are treated one-sided as well:
 * data on a midpoint-layout grid is not assumed periodic here.
 */
inline VectorField gradient_masked(const VectorField& f, const ScalarField& mask) {
    require(mask.grid.same_layout(f.grid) && mask.ncomp == 1, "gradient_masked: mask mismatch");
    require(f.ncomp == 1 || f.ncomp == 3, "gradient_masked: input must have 1 or 3 components");
    VectorField out(f.grid, f.ncomp == 1 ? 3 : 9);
    const Grid& g = f.grid;
    auto inside = [&](int jx, int jy, int jz) { return mask.at(jx, jy, jz, 0) != 0.0; };
    for_each_node(g, [&](int ix, int iy, int iz, std::size_t node) {
        if (!inside(ix, iy, iz)) return;
        int i[3] = {ix, iy, iz};
        for (int a = 0; a < 3; ++a) {
            const int na = g.n[a];
            const double h = g.spacing(a);
            auto neighbour = [&](int step, int* jout) {
                int j[3] = {i[0], i[1], i[2]};
                const int p = j[a] + step;
                if (p < 0 || p >= na) return false;
                j[a] = p;
                if (!inside(j[0], j[1], j[2])) return false;
                jout[0] = j[0];
                jout[1] = j[1];
                jout[2] = j[2];
                return true;
            };
            int jp[3], jm[3], j2[3];
            const bool hasp = neighbour(+1, jp), hasm = neighbour(-1, jm);
            for (int c = 0; c < f.ncomp; ++c) {
                const double v0 = f.at(ix, iy, iz, c);
                double d = 0.0;
                if (hasp && hasm) {
                    d = (f.at(jp[0], jp[1], jp[2], c) - f.at(jm[0], jm[1], jm[2], c)) / (2.0 * h);
                } else if (hasp) {
                    d = neighbour(+2, j2)
                            ? (-3.0 * v0 + 4.0 * f.at(jp[0], jp[1], jp[2], c) - f.at(j2[0], j2[1], j2[2], c)) / (2.0 * h)
                            : (f.at(jp[0], jp[1], jp[2], c) - v0) / h;
                } else if (hasm) {
                    d = neighbour(-2, j2)
                            ? (3.0 * v0 - 4.0 * f.at(jm[0], jm[1], jm[2], c) + f.at(j2[0], j2[1], j2[2], c)) / (2.0 * h)
                            : (v0 - f.at(jm[0], jm[1], jm[2], c)) / h;
                }
                out.data[node * out.ncomp + c * 3 + a] = d;
            }
        }
    });
    return out;
}

} // namespace microhom

#pragma once

#include <vector>

#include "microhom/fft.hpp"

namespace microhom {

/** Smooth compactly supported bump, support |u| < 1, not normalized. */
inline double friedrichs_bump(double u2) {
    return (u2 < 1.0) ? std::exp(-1.0 / (1.0 - u2)) : 0.0;
}

/**
 * Mollification by periodic convolution with the Friedrichs bump of the
 * given radius.  The sampled kernel is renormalized so its discrete sum is
 * exactly one: constants and means are preserved to round-off.  radius == 0
 * returns the input unchanged.
 */
inline VectorField mollify(const VectorField& f, double radius) {
    if (radius == 0.0) return f;
    require(radius > 0.0, "mollify: radius must be >= 0");
    const Grid& g = f.grid;
    for (int a = 0; a < 3; ++a) {
        require(g.periodic[a], "mollify: periodic grid required");
        require(radius <= 0.5 * g.extent[a], "mollify: radius exceeds half the domain extent");
    }

    // kernel sampled at periodic lattice offsets (minimum image)
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
    // a kernel supported only at the origin is a delta: no smoothing happens
    require(support >= 2, "mollify: radius below grid resolution leaves a degenerate kernel");
    for (double& v : kernel) v /= ksum;

    Fft3 fft(g.n, g.extent);
    std::vector<std::complex<double>> khat(fft.cplx_size()), fhat(fft.cplx_size());
    fft.forward(kernel.data(), khat.data());

    VectorField out(g, f.ncomp);
    std::vector<double> comp, conv(fft.real_size());
    for (int c = 0; c < f.ncomp; ++c) {
        gather_component(f, c, comp);
        fft.forward(comp.data(), fhat.data());
        for (std::size_t m = 0; m < fhat.size(); ++m) fhat[m] *= khat[m];
        fft.inverse(fhat.data(), conv.data());
        scatter_component(conv, c, out);
    }
    return out;
}

/**
 * Damping ramp for support-preserving cutoffs: 0 for d <= lo, 1 for
 * d >= hi, C^1 monotone in between.  d is a distance to the support
 * boundary, measured positively inward.
 */
inline double support_ramp(double d, double lo, double hi) {
    if (d <= lo) return 0.0;
    if (d >= hi) return 1.0;
    const double u = (d - lo) / (hi - lo);
    return u * u * (3.0 - 2.0 * u);
}

} // namespace microhom

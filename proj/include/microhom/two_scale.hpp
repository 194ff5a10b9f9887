#pragma once

#include <functional>
#include <vector>

#include "microhom/field_io.hpp"
#include "microhom/gradient.hpp"

namespace microhom {

/**
 * Field on the product of an eps-cell lattice and the unit periodicity cell:
 * value(t, z) for lattice cell t and micro node z.  Produced by the
 * unfolding operator; micro sampling is midpoint at r = eps/h nodes per
 * axis, so unfolding a matching macro field is pure re-indexing.
 *
 * Storage: [cell][micro node][component], cells lexicographic, micro z
 * fastest, component innermost.  Cells not fully covered by the macro grid
 * are kept (zero-extension) and flagged non-interior.
 */
struct TwoScaleField {
    Int3 cells{0, 0, 0};
    Grid micro;        // midpoint grid on (0,1)^3
    double eps = 0.0;
    Vec3 omega_origin{0.0, 0.0, 0.0};
    int ncomp = 1;
    std::vector<double> data;
    std::vector<std::uint8_t> interior;

    std::size_t num_cells() const { return std::size_t(cells[0]) * cells[1] * cells[2]; }
    std::size_t micro_nodes() const { return micro.num_nodes(); }

    std::size_t cell_flat(int tx, int ty, int tz) const {
        return (std::size_t(tx) * cells[1] + ty) * cells[2] + tz;
    }

    double* cell_data(std::size_t cflat) { return data.data() + cflat * micro_nodes() * ncomp; }
    const double* cell_data(std::size_t cflat) const {
        return data.data() + cflat * micro_nodes() * ncomp;
    }

    /** Quadrature weight per (cell, micro node) sample for the product measure. */
    double sample_weight() const {
        return eps * eps * eps / double(micro_nodes());
    }

    /** Macro position of the sample (t, l): the original grid node. */
    Vec3 macro_position(const Int3& t, int lx, int ly, int lz) const {
        return {omega_origin[0] + eps * (t[0] + micro.coord(0, lx)),
                omega_origin[1] + eps * (t[1] + micro.coord(1, ly)),
                omega_origin[2] + eps * (t[2] + micro.coord(2, lz))};
    }

    void allocate() {
        micro.validate();
        data.assign(num_cells() * micro_nodes() * std::size_t(ncomp), 0.0);
        interior.assign(num_cells(), 1);
    }

    bool same_shape(const TwoScaleField& o) const {
        return cells == o.cells && micro.n == o.micro.n && ncomp == o.ncomp && eps == o.eps;
    }
};

template <class F>
void for_each_ts_sample(const TwoScaleField& ts, F&& fn) {
    std::size_t s = 0;
    for (int tx = 0; tx < ts.cells[0]; ++tx)
        for (int ty = 0; ty < ts.cells[1]; ++ty)
            for (int tz = 0; tz < ts.cells[2]; ++tz) {
                const Int3 t{tx, ty, tz};
                const std::size_t cflat = ts.cell_flat(tx, ty, tz);
                for (int lx = 0; lx < ts.micro.n[0]; ++lx)
                    for (int ly = 0; ly < ts.micro.n[1]; ++ly)
                        for (int lz = 0; lz < ts.micro.n[2]; ++lz, ++s) fn(t, cflat, lx, ly, lz, s);
            }
}

namespace ts_detail {

inline void cells_and_rate(const Grid& g, double eps, Int3& r, Int3& cells) {
    for (int a = 0; a < 3; ++a) {
        require(g.periodic[a], "unfold: midpoint-sampled grid required");
        const double ratio = eps / g.spacing(a);
        const double rounded = std::round(ratio);
        require(std::fabs(ratio - rounded) < 1e-9 && rounded >= 1.0,
                "unfold: eps must be an integer multiple of the grid spacing");
        r[a] = int(rounded);
        cells[a] = int(std::ceil(double(g.n[a]) / r[a] - 1e-12));
    }
}

} // namespace ts_detail

/**
 * Unfolding operator: (S u)(t, z) = u(eps t + eps z) realized as exact
 * re-blocking of grid nodes.  Nodes beyond the grid are read as zero and the
 * affected cells flagged non-interior.
 */
inline TwoScaleField unfold(const VectorField& u, double eps) {
    TwoScaleField ts;
    Int3 r;
    ts_detail::cells_and_rate(u.grid, eps, r, ts.cells);
    ts.micro = Grid{{0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}, r, {true, true, true}};
    ts.eps = eps;
    ts.omega_origin = u.grid.origin;
    ts.ncomp = u.ncomp;
    ts.allocate();
    for_each_ts_sample(ts, [&](const Int3& t, std::size_t cflat, int lx, int ly, int lz, std::size_t s) {
        const int ix = t[0] * r[0] + lx, iy = t[1] * r[1] + ly, iz = t[2] * r[2] + lz;
        if (ix >= u.grid.n[0] || iy >= u.grid.n[1] || iz >= u.grid.n[2]) {
            ts.interior[cflat] = 0;
            return;
        }
        const std::size_t node = u.grid.node_index(ix, iy, iz);
        for (int c = 0; c < ts.ncomp; ++c) ts.data[s * ts.ncomp + c] = u.data[node * u.ncomp + c];
    });
    return ts;
}

/** Inverse re-indexing onto a macro grid: v(x) = ts(cell(x), frac(x/eps)). */
inline VectorField fold(const TwoScaleField& ts, const Grid& g) {
    Int3 r, cells;
    ts_detail::cells_and_rate(g, ts.eps, r, cells);
    require(r == ts.micro.n && cells == ts.cells, "fold: grid incompatible with the two-scale layout");
    VectorField out(g, ts.ncomp);
    for_each_node(g, [&](int ix, int iy, int iz, std::size_t node) {
        const int i[3] = {ix, iy, iz};
        int t[3], l[3];
        for (int a = 0; a < 3; ++a) {
            t[a] = i[a] / r[a];
            l[a] = i[a] - t[a] * r[a];
        }
        const std::size_t s = (ts.cell_flat(t[0], t[1], t[2]) * ts.micro_nodes() +
                               ts.micro.node_index(l[0], l[1], l[2]));
        for (int c = 0; c < ts.ncomp; ++c) out.data[node * out.ncomp + c] = ts.data[s * ts.ncomp + c];
    });
    return out;
}

/** Sample a callable (x, z) -> components at the unfold-consistent positions. */
inline TwoScaleField sample_two_scale(const Grid& macro, double eps, int ncomp,
                                      const std::function<void(const Vec3&, const Vec3&, double*)>& f) {
    TwoScaleField ts;
    Int3 r;
    ts_detail::cells_and_rate(macro, eps, r, ts.cells);
    ts.micro = Grid{{0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}, r, {true, true, true}};
    ts.eps = eps;
    ts.omega_origin = macro.origin;
    ts.ncomp = ncomp;
    ts.allocate();
    for_each_ts_sample(ts, [&](const Int3& t, std::size_t cflat, int lx, int ly, int lz, std::size_t s) {
        for (int a = 0; a < 3; ++a)
            if (t[a] * r[a] + (a == 0 ? lx : a == 1 ? ly : lz) >= macro.n[a]) ts.interior[cflat] = 0;
        const Vec3 z = ts.micro.node(lx, ly, lz);
        const Vec3 x = ts.macro_position(t, lx, ly, lz);
        f(x, z, ts.data.data() + s * ncomp);
    });
    return ts;
}

inline double ts_lp_power(const TwoScaleField& ts, double p, bool interior_only = false) {
    const double w = ts.sample_weight();
    double acc = 0.0;
    for_each_ts_sample(ts, [&](const Int3&, std::size_t cflat, int, int, int, std::size_t s) {
        if (interior_only && !ts.interior[cflat]) return;
        double m2 = 0.0;
        for (int c = 0; c < ts.ncomp; ++c) {
            const double v = ts.data[s * ts.ncomp + c];
            m2 += v * v;
        }
        acc += w * ((p == 2.0) ? m2 : std::pow(std::sqrt(m2), p));
    });
    return acc;
}

inline double ts_l2_norm(const TwoScaleField& ts, bool interior_only = false) {
    return std::sqrt(ts_lp_power(ts, 2.0, interior_only));
}

/**
 * Relative defect of the unfolding isometry in L^p: the two quadratures are
 * re-orderings of the same sum, so this is round-off level whenever
 * eps-cells tile the grid exactly.
 */
inline double isometry_residual(const VectorField& u, double eps, double p = 2.0) {
    const double a = lp_power_integral(u, p);
    const double b = ts_lp_power(unfold(u, eps), p, false);
    return std::fabs(a - b) / std::max(a, 1e-300);
}

/** L^2 distance between two-scale fields over interior cells. */
inline double strong_ts_distance(const TwoScaleField& a, const TwoScaleField& b) {
    require(a.same_shape(b), "ts distance: shape mismatch");
    const double w = a.sample_weight();
    double acc = 0.0;
    for_each_ts_sample(a, [&](const Int3&, std::size_t cflat, int, int, int, std::size_t s) {
        if (!a.interior[cflat] || !b.interior[cflat]) return;
        for (int c = 0; c < a.ncomp; ++c) {
            const double d = a.data[s * a.ncomp + c] - b.data[s * a.ncomp + c];
            acc += w * d * d;
        }
    });
    return std::sqrt(acc);
}

/** Cell averages as a field on the lattice-of-cells grid (nodes at cell centers). */
inline VectorField cell_average(const TwoScaleField& ts) {
    Grid cg;
    cg.origin = ts.omega_origin;
    cg.extent = {ts.eps * ts.cells[0], ts.eps * ts.cells[1], ts.eps * ts.cells[2]};
    cg.n = ts.cells;
    VectorField out(cg, ts.ncomp);
    const double inv = 1.0 / double(ts.micro_nodes());
    for_each_ts_sample(ts, [&](const Int3&, std::size_t cflat, int, int, int, std::size_t s) {
        for (int c = 0; c < ts.ncomp; ++c) out.data[cflat * ts.ncomp + c] += inv * ts.data[s * ts.ncomp + c];
    });
    return out;
}

/** Pairing of a macro field with an oscillating test function psi(x, x/eps). */
inline double two_scale_pairing(const VectorField& u, double eps,
                                const std::function<void(const Vec3&, const Vec3&, double*)>& psi) {
    Int3 r, cells;
    ts_detail::cells_and_rate(u.grid, eps, r, cells);
    const double w = u.grid.cell_volume();
    std::vector<double> pv(std::size_t(u.ncomp));
    double acc = 0.0;
    for_each_node(u.grid, [&](int ix, int iy, int iz, std::size_t node) {
        const int i[3] = {ix, iy, iz};
        Vec3 z;
        for (int a = 0; a < 3; ++a) {
            const int l = i[a] % r[a];
            z[a] = (l + 0.5) / r[a];
        }
        psi(u.grid.node(ix, iy, iz), z, pv.data());
        double s = 0.0;
        for (int c = 0; c < u.ncomp; ++c) s += u.data[node * u.ncomp + c] * pv[c];
        acc += w * s;
    });
    return acc;
}

/** Pairing of a two-scale limit with the same test function and quadrature. */
inline double limit_pairing(const TwoScaleField& m,
                            const std::function<void(const Vec3&, const Vec3&, double*)>& psi) {
    const double w = m.sample_weight();
    std::vector<double> pv(std::size_t(m.ncomp));
    double acc = 0.0;
    for_each_ts_sample(m, [&](const Int3& t, std::size_t cflat, int lx, int ly, int lz, std::size_t s) {
        if (!m.interior[cflat]) return;
        const Vec3 z = m.micro.node(lx, ly, lz);
        psi(m.macro_position(t, lx, ly, lz), z, pv.data());
        double sum = 0.0;
        for (int c = 0; c < m.ncomp; ++c) sum += m.data[s * m.ncomp + c] * pv[c];
        acc += w * sum;
    });
    return acc;
}

enum class CellGradScheme { central_blocked, central_wrap, spectral };

/**
 * Micro gradient cell by cell.  central_blocked never reaches across cell
 * faces (translation covariant, cell interior); central_wrap treats each
 * cell as periodic; spectral differentiates the per-cell trigonometric
 * interpolant.  Output components: (c, axis) -> c*3 + a.
 */
inline TwoScaleField ts_zgradient(const TwoScaleField& ts, CellGradScheme scheme) {
    require(ts.ncomp == 1 || ts.ncomp == 3, "ts gradient: 1 or 3 components expected");
    TwoScaleField out = ts;
    out.ncomp = ts.ncomp * 3;
    out.allocate();
    out.interior = ts.interior;

    const std::size_t mn = ts.micro_nodes();
    if (scheme == CellGradScheme::spectral) {
        Fft3 fft(ts.micro.n, ts.micro.extent);
        std::vector<double> comp(mn), deriv(mn);
        std::vector<std::complex<double>> hat(fft.cplx_size()), dhat(fft.cplx_size());
        for (std::size_t cf = 0; cf < ts.num_cells(); ++cf) {
            const double* src = ts.cell_data(cf);
            double* dst = out.cell_data(cf);
            for (int c = 0; c < ts.ncomp; ++c) {
                for (std::size_t i = 0; i < mn; ++i) comp[i] = src[i * ts.ncomp + c];
                fft.forward(comp.data(), hat.data());
                for (int a = 0; a < 3; ++a) {
                    fft.for_each_mode([&](int kx, int ky, int kz, std::size_t m) {
                        const int kk[3] = {kx, ky, kz};
                        dhat[m] = hat[m] * std::complex<double>(0.0, fft.kappa_deriv(a, kk[a]) / ts.eps);
                    });
                    fft.inverse(dhat.data(), deriv.data());
                    for (std::size_t i = 0; i < mn; ++i) dst[i * out.ncomp + c * 3 + a] = deriv[i];
                }
            }
        }
        return out;
    }

    // finite differences per cell; spacing in macro units is eps * h_micro
    for (std::size_t cf = 0; cf < ts.num_cells(); ++cf) {
        const double* src = ts.cell_data(cf);
        double* dst = out.cell_data(cf);
        for (int lx = 0; lx < ts.micro.n[0]; ++lx)
            for (int ly = 0; ly < ts.micro.n[1]; ++ly)
                for (int lz = 0; lz < ts.micro.n[2]; ++lz) {
                    const int l[3] = {lx, ly, lz};
                    const std::size_t here = ts.micro.node_index(lx, ly, lz);
                    for (int a = 0; a < 3; ++a) {
                        const int na = ts.micro.n[a];
                        const double h = ts.eps * ts.micro.spacing(a);
                        auto value = [&](int p, int c) {
                            int j[3] = {l[0], l[1], l[2]};
                            j[a] = p;
                            return src[ts.micro.node_index(j[0], j[1], j[2]) * ts.ncomp + c];
                        };
                        for (int c = 0; c < ts.ncomp; ++c) {
                            double d;
                            const int p = l[a];
                            if (na == 1) {
                                d = 0.0;
                            } else if (scheme == CellGradScheme::central_wrap) {
                                d = (value((p + 1) % na, c) - value((p + na - 1) % na, c)) / (2.0 * h);
                            } else if (p > 0 && p < na - 1) {
                                d = (value(p + 1, c) - value(p - 1, c)) / (2.0 * h);
                            } else if (p == 0) {
                                d = (na >= 3) ? (-3.0 * value(0, c) + 4.0 * value(1, c) - value(2, c)) / (2.0 * h)
                                              : (value(1, c) - value(0, c)) / h;
                            } else {
                                d = (na >= 3)
                                        ? (3.0 * value(na - 1, c) - 4.0 * value(na - 2, c) + value(na - 3, c)) / (2.0 * h)
                                        : (value(na - 1, c) - value(na - 2, c)) / h;
                            }
                            dst[here * out.ncomp + c * 3 + a] = d;
                        }
                    }
                }
    }
    return out;
}

/** Macro gradient whose stencils never cross eps-cell faces. */
inline VectorField gradient_blocked(const VectorField& u, double eps) {
    // d/dx = (1/eps) d/dz is already applied through the eps-scaled spacing
    return fold(ts_zgradient(unfold(u, eps), CellGradScheme::central_blocked), u.grid);
}

enum class CommutationScheme { central, spectral, blocked };

/**
 * Residual of the exchange identity S(eps grad u) = grad_z S(u), relative to
 * the larger side.  blocked evaluates both sides with the cell-interior
 * stencil and is exact for arbitrary data; central pairs the global central
 * stencil with the per-cell one (exact on affine data); spectral pairs
 * global and per-cell trigonometric differentiation (exact for cell-periodic
 * data).  Only interior cells enter the residual.
 */
inline double gradient_commutation_residual(const VectorField& u, double eps,
                                            CommutationScheme scheme) {
    TwoScaleField lhs; // S(eps grad u)
    if (scheme == CommutationScheme::blocked) {
        lhs = unfold(gradient_blocked(u, eps), eps);
    } else {
        lhs = unfold(gradient(u, scheme == CommutationScheme::spectral
                                     ? GradScheme::spectral
                                     : GradScheme::central_clamped),
                     eps);
    }
    for (double& v : lhs.data) v *= eps;
    const TwoScaleField rhs =
        ts_zgradient(unfold(u, eps), scheme == CommutationScheme::spectral
                                         ? CellGradScheme::spectral
                                         : CellGradScheme::central_blocked);
    TwoScaleField scaled = rhs;
    for (double& v : scaled.data) v *= eps; // grad_z = eps * (1/eps) grad_z in macro units
    const double num = strong_ts_distance(lhs, scaled);
    const double den = std::max(ts_l2_norm(lhs, true), ts_l2_norm(scaled, true));
    return den > 0.0 ? num / den : num;
}

// ---- TS2F serialization ----------------------------------------------------
// TSF1 with a rank-6 header: magic "TS2F" | u8 ncomp | u8 flags |
// 3x u32 cell dims | 3x u32 micro dims | 3x f64 origin | 3x f64 extent
// (extent = eps * cells) | u8 interior[num_cells] | payload f64.

inline void write_ts2f(std::ostream& os, const TwoScaleField& ts) {
    io_detail::put_bytes(os, "TS2F", 4);
    const std::uint8_t nc = std::uint8_t(ts.ncomp), flags = 1; // bit0: interior block present
    io_detail::put_bytes(os, &nc, 1);
    io_detail::put_bytes(os, &flags, 1);
    for (int a = 0; a < 3; ++a) {
        const std::uint32_t n = std::uint32_t(ts.cells[a]);
        io_detail::put_bytes(os, &n, 4);
    }
    for (int a = 0; a < 3; ++a) {
        const std::uint32_t n = std::uint32_t(ts.micro.n[a]);
        io_detail::put_bytes(os, &n, 4);
    }
    io_detail::put_bytes(os, ts.omega_origin.data(), 3 * sizeof(double));
    const Vec3 extent{ts.eps * ts.cells[0], ts.eps * ts.cells[1], ts.eps * ts.cells[2]};
    io_detail::put_bytes(os, extent.data(), 3 * sizeof(double));
    io_detail::put_bytes(os, ts.interior.data(), ts.interior.size());
    io_detail::put_bytes(os, ts.data.data(), ts.data.size() * sizeof(double));
    if (!os) throw FormatError("write failed");
}

inline TwoScaleField read_ts2f(std::istream& is) {
    char magic[4];
    io_detail::get_bytes(is, magic, 4, "magic");
    if (std::memcmp(magic, "TS2F", 4) != 0)
        throw FormatError("bad magic at offset 0: expected TS2F");
    std::uint8_t nc = 0, flags = 0;
    io_detail::get_bytes(is, &nc, 1, "ncomp");
    io_detail::get_bytes(is, &flags, 1, "flags");
    if (!(nc == 1 || nc == 3 || nc == 9)) throw FormatError("unsupported component count");
    TwoScaleField ts;
    ts.ncomp = int(nc);
    std::uint64_t total = nc;
    Int3 micro_n;
    for (int a = 0; a < 3; ++a) {
        std::uint32_t n = 0;
        io_detail::get_bytes(is, &n, 4, "cell dims");
        if (n == 0) throw FormatError("zero dimension");
        total *= n;
        ts.cells[a] = int(n);
    }
    for (int a = 0; a < 3; ++a) {
        std::uint32_t n = 0;
        io_detail::get_bytes(is, &n, 4, "micro dims");
        if (n == 0) throw FormatError("zero dimension");
        total *= n;
        if (total > io_detail::kMaxElements) throw FormatError("dimension overflow");
        micro_n[a] = int(n);
    }
    Vec3 extent;
    io_detail::get_bytes(is, ts.omega_origin.data(), 3 * sizeof(double), "origin");
    io_detail::get_bytes(is, extent.data(), 3 * sizeof(double), "extent");
    ts.eps = extent[0] / ts.cells[0];
    ts.micro = Grid{{0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}, micro_n, {true, true, true}};
    ts.allocate();
    if (flags & 1u) io_detail::get_bytes(is, ts.interior.data(), ts.interior.size(), "interior flags");
    io_detail::get_bytes(is, ts.data.data(), ts.data.size() * sizeof(double), "payload");
    return ts;
}

inline void save_ts2f(const std::string& path, const TwoScaleField& ts) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open for writing: " + path);
    write_ts2f(os, ts);
}

inline TwoScaleField load_ts2f(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open for reading: " + path);
    return read_ts2f(is);
}

} // namespace microhom

#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "microhom/fft.hpp"
#include "microhom/geometry.hpp"
#include "microhom/gradient.hpp"

namespace microhom {

namespace cell_detail {

inline void require_periodic(const Grid& g, const char* who) {
    g.validate();
    for (int a = 0; a < 3; ++a)
        require(g.periodic[a], std::string(who) + ": needs a fully periodic grid");
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace cell_detail

/**
 * Zero-mean solution of -lap r = rhs on the periodic cell (trigonometric
 * collocation).  The compatibility condition "rhs integrates to zero" must
 * hold, since the constant mode is not invertible; the returned potential is
 * the mean-zero representative of the solution class.
 */
inline ScalarField solve_cell_poisson(const ScalarField& rhs) {
    require(rhs.ncomp == 1, "cell poisson: rhs must be a scalar field");
    cell_detail::require_periodic(rhs.grid, "cell poisson");
    const Grid& g = rhs.grid;
    const double volume = g.extent[0] * g.extent[1] * g.extent[2];
    const double integral = mean_value(rhs) * volume;
    if (std::abs(integral) > 1e-10)
        throw PreconditionError("cell poisson: rhs integrates to " +
                                cell_detail::format_double(integral) +
                                ", not 0; the periodic problem has no solution");
    Fft3 fft(g.n, g.extent);
    std::vector<std::complex<double>> hat(fft.cplx_size());
    fft.forward(rhs.data.data(), hat.data());
    fft.for_each_mode([&](int kx, int ky, int kz, std::size_t m) {
        const double k2 = fft.kappa(0, kx) * fft.kappa(0, kx) +
                          fft.kappa(1, ky) * fft.kappa(1, ky) +
                          fft.kappa(2, kz) * fft.kappa(2, kz);
        hat[m] = (k2 == 0.0) ? std::complex<double>(0.0) : hat[m] / k2;
    });
    ScalarField r(g, 1);
    fft.inverse(hat.data(), r.data.data());
    return r;
}

/**
 * Oscillatory stray field on the periodic cell: h = grad r where r is the
 * periodic potential with -lap r = div m, i.e. minus the L2(Q)-orthogonal
 * projection of m onto gradients of periodic scalars.  In Fourier space
 * h^ = -kappa (kappa . m^)/|kappa|^2.  The zero mode is dropped, so the
 * output always has zero cell mean, and div(m + h) = 0 holds weakly.
 */
inline VectorField hdz(const VectorField& m) {
    require(m.ncomp == 3, "hdz: input must have 3 components");
    cell_detail::require_periodic(m.grid, "hdz");
    const Grid& g = m.grid;
    Fft3 fft(g.n, g.extent);
    std::array<std::vector<std::complex<double>>, 3> hat;
    std::vector<double> scratch;
    for (int c = 0; c < 3; ++c) {
        hat[c].resize(fft.cplx_size());
        gather_component(m, c, scratch);
        fft.forward(scratch.data(), hat[c].data());
    }
    fft.for_each_mode([&](int kx, int ky, int kz, std::size_t idx) {
        const Vec3 k{fft.kappa(0, kx), fft.kappa(1, ky), fft.kappa(2, kz)};
        const double k2 = dot(k, k);
        if (k2 == 0.0) {
            for (int c = 0; c < 3; ++c) hat[c][idx] = 0.0;
            return;
        }
        const std::complex<double> kdotm =
            k[0] * hat[0][idx] + k[1] * hat[1][idx] + k[2] * hat[2][idx];
        for (int c = 0; c < 3; ++c) hat[c][idx] = -(k[c] / k2) * kdotm;
    });
    VectorField h(g, 3);
    scratch.resize(fft.real_size());
    for (int c = 0; c < 3; ++c) {
        fft.inverse(hat[c].data(), scratch.data());
        scatter_component(scratch, c, h);
    }
    return h;
}

/** Orthonormal right-handed frame (s, tau1, tau2) of the tangent plane at s. */
struct TangentBasis {
    Vec3 s{0.0, 0.0, 1.0};
    Vec3 tau1{0.0, -1.0, 0.0};
    Vec3 tau2{1.0, 0.0, 0.0};
};

/**
 * Deterministic tangent frame: tau1 = normalize(e_k x s) with e_k the
 * canonical axis minimizing |s . e_k| (ties resolved toward the lowest
 * index), tau2 = s x tau1.  The triple (s, tau1, tau2) is right-handed.
 */
inline TangentBasis tangent_basis(const Vec3& s) {
    require(std::abs(norm(s) - 1.0) <= 1e-8,
            "tangent_basis: |s| = " + cell_detail::format_double(norm(s)) +
                ", need a unit vector");
    int k = 0;
    double best = std::abs(s[0]);
    for (int a = 1; a < 3; ++a)
        if (std::abs(s[a]) < best) {
            best = std::abs(s[a]);
            k = a;
        }
    Vec3 ek{0.0, 0.0, 0.0};
    ek[k] = 1.0;
    Vec3 t1 = cross(ek, s);
    t1 = (1.0 / norm(t1)) * t1;
    Vec3 t2 = cross(s, t1);
    t2 = (1.0 / norm(t2)) * t2;
    return {s, t1, t2};
}

/** Minimizer of the tangential cell energy: a periodic 3-component field
 *  phi = phi1 tau1 + phi2 tau2, pointwise tangent to s by construction. */
struct Corrector {
    VectorField phi;
    TangentBasis basis;
    Mat3 xi;
};

struct FhomOptions {
    double tol = 1e-10; // relative residual target of the conjugate-gradient solve
    int max_iter = 400;
    bool smooth_chi = false; // 7-point average of the stiffness indicator (Gibbs damping)
};

struct FhomResult {
    double value = 0.0;
    Corrector corrector;
    int iterations = 0;                   // summed over the two tangent directions
    double residual = 0.0;                // worst final relative residual
    std::vector<double> residual_history; // concatenated over the scalar solves
};

namespace cell_detail {

/** Stiffness weights for the cell quadratic: the matrix indicator sampled at
 *  midpoints, optionally averaged over the 7-point stencil. */
inline std::vector<double> stiffness_weights(const CellGeometry& cell, bool smooth) {
    const Grid& g = cell.micro;
    const std::size_t nn = g.num_nodes();
    std::vector<double> chi(nn);
    for (std::size_t i = 0; i < nn; ++i) chi[i] = cell.chi1.data[i];
    if (!smooth) return chi;
    std::vector<double> out(nn);
    for_each_node(g, [&](int ix, int iy, int iz, std::size_t idx) {
        double sum = chi[idx];
        const int i[3] = {ix, iy, iz};
        for (int a = 0; a < 3; ++a)
            for (int step : {-1, +1}) {
                int j[3] = {i[0], i[1], i[2]};
                j[a] = detail::wrap(j[a] + step, g.n[a]);
                sum += chi[g.node_index(j[0], j[1], j[2])];
            }
        out[idx] = sum / 7.0;
    });
    return out;
}

/**
 * Matrix-free context for the quadratics  E(phi) = 1/2 int chi |b + grad phi|^2
 * over mean-free periodic scalars phi.  Applies the normal operator
 * K = -div(chi grad .) spectrally and preconditions with the inverse
 * unperforated Laplacian (mean projected out).
 */
class CellQuadratic {
  public:
    CellQuadratic(const Grid& g, std::vector<double> chi)
        : g_(g), chi_(std::move(chi)), fft_(g.n, g.extent), nn_(g.num_nodes()) {
        require(chi_.size() == nn_, "cell quadratic: stiffness size mismatch");
        hat_.resize(fft_.cplx_size());
        tmp_.resize(fft_.cplx_size());
        acc_.resize(fft_.cplx_size());
        for (auto& v : grad_) v.resize(nn_);
    }

    const Grid& grid() const { return g_; }

    /** Quadrature volume carried by the stiffness weights. */
    double chi_volume() const {
        double s = 0.0;
        for (double c : chi_) s += c;
        return s * g_.cell_volume();
    }

    /** out = -div(chi grad in); exactly symmetric (same spectral derivative
     *  on both sides, which is real antisymmetric). */
    void apply(const std::vector<double>& in, std::vector<double>& out) {
        fft_.forward(in.data(), hat_.data());
        for (int a = 0; a < 3; ++a) {
            fft_.for_each_mode([&](int kx, int ky, int kz, std::size_t m) {
                const int kk[3] = {kx, ky, kz};
                tmp_[m] = hat_[m] * std::complex<double>(0.0, fft_.kappa_deriv(a, kk[a]));
            });
            fft_.inverse(tmp_.data(), grad_[a].data());
            for (std::size_t i = 0; i < nn_; ++i) grad_[a][i] *= chi_[i];
        }
        std::fill(acc_.begin(), acc_.end(), std::complex<double>(0.0));
        for (int a = 0; a < 3; ++a) {
            fft_.forward(grad_[a].data(), hat_.data());
            fft_.for_each_mode([&](int kx, int ky, int kz, std::size_t m) {
                const int kk[3] = {kx, ky, kz};
                acc_[m] -= hat_[m] * std::complex<double>(0.0, fft_.kappa_deriv(a, kk[a]));
            });
        }
        out.resize(nn_);
        fft_.inverse(acc_.data(), out.data());
    }

    /** Right-hand side of the stationarity equation -div(chi grad phi) =
     *  div(chi b) satisfied by the minimizer of (1/2) int chi |b + grad phi|^2;
     *  mean-free, so the periodic system is consistent. */
    void rhs_for(const Vec3& b, std::vector<double>& out) {
        std::fill(acc_.begin(), acc_.end(), std::complex<double>(0.0));
        for (int a = 0; a < 3; ++a) {
            if (b[a] == 0.0) continue;
            for (std::size_t i = 0; i < nn_; ++i) grad_[0][i] = chi_[i] * b[a];
            fft_.forward(grad_[0].data(), hat_.data());
            fft_.for_each_mode([&](int kx, int ky, int kz, std::size_t m) {
                const int kk[3] = {kx, ky, kz};
                acc_[m] += hat_[m] * std::complex<double>(0.0, fft_.kappa_deriv(a, kk[a]));
            });
        }
        out.resize(nn_);
        fft_.inverse(acc_.data(), out.data());
    }

    /** z = (-lap)^{-1} r using the same Nyquist-free derivative as the
     *  operator, so preconditioner and operator share one kernel (constants
     *  and pure alternating-sign modes), which is projected out.  Matching
     *  the derivative convention keeps the preconditioned spectrum inside
     *  the geometric equivalence bounds on the active subspace. */
    void precondition(const std::vector<double>& r, std::vector<double>& z) {
        fft_.forward(r.data(), hat_.data());
        fft_.for_each_mode([&](int kx, int ky, int kz, std::size_t m) {
            const double k2 = fft_.kappa_deriv(0, kx) * fft_.kappa_deriv(0, kx) +
                              fft_.kappa_deriv(1, ky) * fft_.kappa_deriv(1, ky) +
                              fft_.kappa_deriv(2, kz) * fft_.kappa_deriv(2, kz);
            hat_[m] = (k2 == 0.0) ? std::complex<double>(0.0) : hat_[m] / k2;
        });
        z.resize(nn_);
        fft_.inverse(hat_.data(), z.data());
    }

    /** E = 1/2 int chi |b + grad phi|^2 (midpoint rule, spectral gradient). */
    double energy(const Vec3& b, const std::vector<double>& phi) {
        fft_.forward(phi.data(), hat_.data());
        for (int a = 0; a < 3; ++a) {
            fft_.for_each_mode([&](int kx, int ky, int kz, std::size_t m) {
                const int kk[3] = {kx, ky, kz};
                tmp_[m] = hat_[m] * std::complex<double>(0.0, fft_.kappa_deriv(a, kk[a]));
            });
            fft_.inverse(tmp_.data(), grad_[a].data());
        }
        double sum = 0.0;
        for (std::size_t i = 0; i < nn_; ++i) {
            const double gx = b[0] + grad_[0][i];
            const double gy = b[1] + grad_[1][i];
            const double gz = b[2] + grad_[2][i];
            sum += chi_[i] * (gx * gx + gy * gy + gz * gz);
        }
        return 0.5 * sum * g_.cell_volume();
    }

  private:
    Grid g_;
    std::vector<double> chi_;
    Fft3 fft_;
    std::size_t nn_;
    std::vector<std::complex<double>> hat_, tmp_, acc_;
    std::array<std::vector<double>, 3> grad_;
};

struct ScalarSolve {
    std::vector<double> phi;
    int iterations = 0;
    double residual = 0.0;
    std::vector<double> history;
    double energy = 0.0;
};

/** Preconditioned conjugate gradient for one direction b.  The system
 *  K phi = -div(chi b) is consistent (rhs lies in the range of K), the
 *  start iterate is zero, and both operator and preconditioner preserve the
 *  orthogonal complement of ker K, so the iterates never pick up kernel
 *  components and the reported minimum is well defined. */
inline ScalarSolve minimize_direction(CellQuadratic& op, const Vec3& b, double tol, int max_iter) {
    const std::size_t nn = op.grid().num_nodes();
    ScalarSolve out;
    out.phi.assign(nn, 0.0);
    const double bscale = norm(b);
    if (bscale == 0.0) {
        out.energy = op.energy(b, out.phi);
        return out;
    }
    std::vector<double> rhs;
    op.rhs_for(b, rhs);
    auto dot_v = [](const std::vector<double>& x, const std::vector<double>& y) {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
        return s;
    };
    const double rhs_norm = std::sqrt(dot_v(rhs, rhs));
    // A constant-in-space stiffness produces a zero linear term up to FFT
    // round-off; iterating on that noise would stall, so treat it as zero.
    if (rhs_norm <= 1e-13 * bscale * double(nn)) {
        out.energy = op.energy(b, out.phi);
        return out;
    }
    std::vector<double> r = rhs, z, p, q;
    op.precondition(r, z);
    p = z;
    double rz = dot_v(r, z);
    for (int it = 1; it <= max_iter; ++it) {
        op.apply(p, q);
        const double pq = dot_v(p, q);
        if (!(pq > 0.0))
            throw SolverError("cell quadratic: conjugate-gradient direction lost positivity "
                              "(p.Kp = " +
                              format_double(pq) + " at iteration " + std::to_string(it) + ")");
        const double alpha = rz / pq;
        for (std::size_t i = 0; i < nn; ++i) {
            out.phi[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        const double rel = std::sqrt(dot_v(r, r)) / rhs_norm;
        out.history.push_back(rel);
        out.iterations = it;
        out.residual = rel;
        if (rel <= tol) break;
        op.precondition(r, z);
        const double rz2 = dot_v(r, z);
        const double beta = rz2 / rz;
        rz = rz2;
        for (std::size_t i = 0; i < nn; ++i) p[i] = z[i] + beta * p[i];
    }
    if (out.residual > tol) {
        std::string hist;
        const std::size_t nh = out.history.size();
        for (std::size_t i = 0; i < nh; ++i) {
            if (nh > 9 && i == 3) {
                hist += " ...";
                i = nh - 6;
                continue;
            }
            hist += " " + format_double(out.history[i]);
        }
        throw SolverError("cell quadratic: conjugate gradient stopped at relative residual " +
                          format_double(out.residual) + " > " + format_double(tol) + " after " +
                          std::to_string(out.iterations) + " iterations; history:" + hist);
    }
    out.energy = op.energy(b, out.phi);
    return out;
}

inline void require_finite(const Mat3& xi, const char* who) {
    for (double v : xi.a) require(std::isfinite(v), std::string(who) + ": xi must be finite");
}

} // namespace cell_detail

/**
 * Tangential cell energy
 *     fhom(s, xi) = inf over periodic phi tangent to s of
 *                   1/2 int_{Q1} |xi + grad phi|^2 dz.
 * Working in tangent coefficients phi = phi1 tau1 + phi2 tau2 keeps the
 * constraint exact and decouples the problem into two scalar solves with
 * constant drifts b_a = xi^T tau_a; the component of xi along s only enters
 * through the fixed term  1/2 |Q1| |xi^T s|^2.
 */
inline FhomResult fhom(const Vec3& s, const Mat3& xi, const CellGeometry& cell,
                       const FhomOptions& opts = {}) {
    cell_detail::require_finite(xi, "fhom");
    cell_detail::require_periodic(cell.micro, "fhom");
    const TangentBasis tb = tangent_basis(s);
    cell_detail::CellQuadratic op(cell.micro,
                                  cell_detail::stiffness_weights(cell, opts.smooth_chi));
    const Vec3 bn = matT_vec(xi, tb.s);
    const Vec3 b1 = matT_vec(xi, tb.tau1);
    const Vec3 b2 = matT_vec(xi, tb.tau2);
    cell_detail::ScalarSolve s1 = cell_detail::minimize_direction(op, b1, opts.tol, opts.max_iter);
    cell_detail::ScalarSolve s2 = cell_detail::minimize_direction(op, b2, opts.tol, opts.max_iter);
    FhomResult res;
    res.value = 0.5 * op.chi_volume() * dot(bn, bn) + s1.energy + s2.energy;
    res.iterations = s1.iterations + s2.iterations;
    res.residual = std::max(s1.residual, s2.residual);
    res.residual_history = s1.history;
    res.residual_history.insert(res.residual_history.end(), s2.history.begin(), s2.history.end());
    VectorField phi(cell.micro, 3);
    const std::size_t nn = cell.micro.num_nodes();
    for (std::size_t i = 0; i < nn; ++i)
        for (int c = 0; c < 3; ++c)
            phi.data[i * 3 + c] = s1.phi[i] * tb.tau1[c] + s2.phi[i] * tb.tau2[c];
    res.corrector = Corrector{std::move(phi), tb, xi};
    return res;
}

/**
 * The same cell quadratic minimized over all periodic 3-component fields
 * (no tangency constraint).  Decouples into one scalar solve per row of xi;
 * the result can only be smaller than the tangent-constrained minimum.
 */
inline double fhom_unconstrained(const Mat3& xi, const CellGeometry& cell,
                                 const FhomOptions& opts = {}) {
    cell_detail::require_finite(xi, "fhom_unconstrained");
    cell_detail::require_periodic(cell.micro, "fhom_unconstrained");
    cell_detail::CellQuadratic op(cell.micro,
                                  cell_detail::stiffness_weights(cell, opts.smooth_chi));
    double total = 0.0;
    for (int c = 0; c < 3; ++c) {
        const Vec3 b{xi(c, 0), xi(c, 1), xi(c, 2)};
        total += cell_detail::minimize_direction(op, b, opts.tol, opts.max_iter).energy;
    }
    return total;
}

struct ClosedFormReport {
    double value = 0.0;              // energy produced by the closed-form shortcut
    double reference = 0.0;          // direct-minimization value (ground truth)
    double discrepancy = 0.0;        // value - reference
    double solvability_defect = 0.0; // cell mean of the shortcut's Poisson rhs: nonzero
                                     // means the shortcut problem has no periodic solution
                                     // and the mean-projected problem was solved instead
};

/**
 * Closed-form shortcut for the cell energy, transcribed as stated rather
 * than repaired: solve -lap g = chi_{Q1} componentwise (a scalar source for
 * a 3-component potential, so all components coincide), form
 * phi[s,xi] = (phi . (xi tau1)) tau1 + (phi . (xi tau2)) tau2, and assemble
 *     1/2 |Q1| |xi|^2  -  int_{Q1} grad phi[s,xi] dz.
 * Two defects of the shortcut are handled explicitly: the source chi_{Q1}
 * has nonzero cell mean (reported as solvability_defect; the mean-projected
 * source is what gets solved), and the assembly subtracts a matrix from a
 * scalar (the matrix is contracted against xi, the only scale-consistent
 * pairing).  This is a cross-check that documents its discrepancy against
 * `fhom`; it is not ground truth.
 */
inline ClosedFormReport fhom_closed_form(const Vec3& s, const Mat3& xi, const CellGeometry& cell,
                                         const FhomOptions& opts = {}) {
    cell_detail::require_finite(xi, "fhom_closed_form");
    cell_detail::require_periodic(cell.micro, "fhom_closed_form");
    const TangentBasis tb = tangent_basis(s);
    const Grid& g = cell.micro;
    const std::size_t nn = g.num_nodes();
    const double volume = g.extent[0] * g.extent[1] * g.extent[2];

    ClosedFormReport rep;
    ScalarField rhs(g, 1);
    for (std::size_t i = 0; i < nn; ++i) rhs.data[i] = cell.chi1.data[i];
    rep.solvability_defect = mean_value(rhs) * volume;
    const double shift = rep.solvability_defect / volume;
    for (std::size_t i = 0; i < nn; ++i) rhs.data[i] -= shift;
    const ScalarField gpot = solve_cell_poisson(rhs);

    const VectorField gg = gradient(gpot, GradScheme::spectral);
    Vec3 ig{0.0, 0.0, 0.0};
    const double w = g.cell_volume();
    for (std::size_t i = 0; i < nn; ++i) {
        if (cell.chi1.data[i] == 0.0) continue;
        for (int a = 0; a < 3; ++a) ig[a] += w * gg.data[i * 3 + a];
    }

    const Vec3 ones{1.0, 1.0, 1.0};
    const double c1 = dot(ones, mat_vec(xi, tb.tau1));
    const double c2 = dot(ones, mat_vec(xi, tb.tau2));
    const Vec3 t = c1 * tb.tau1 + c2 * tb.tau2;
    const Mat3 mean_grad = outer(t, ig);

    double q1vol = 0.0;
    for (std::size_t i = 0; i < nn; ++i) q1vol += cell.chi1.data[i];
    q1vol *= w;

    rep.value = 0.5 * q1vol * frob_norm2(xi) - frob_inner(xi, mean_grad);
    rep.reference = fhom(s, xi, cell, opts).value;
    rep.discrepancy = rep.value - rep.reference;
    return rep;
}

} // namespace microhom

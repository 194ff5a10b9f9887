#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "microhom/grid.hpp"

namespace microhom {

/**
 * Sampled field on a Grid.  Storage order: x slowest, z fastest, component
 * innermost, i.e. data[((ix*ny+iy)*nz+iz)*ncomp + c].
 *
 * ncomp is 1 for scalars, 3 for vector fields, 9 for (row-major) gradients.
 */
struct VectorField {
    Grid grid;
    int ncomp = 1;
    std::vector<double> data;

    VectorField() = default;
    VectorField(const Grid& g, int nc) : grid(g), ncomp(nc) {
        require(nc == 1 || nc == 3 || nc == 9, "field: ncomp must be 1, 3 or 9");
        grid.validate();
        data.assign(grid.num_nodes() * std::size_t(nc), 0.0);
    }

    std::size_t size() const { return data.size(); }

    double& at(int ix, int iy, int iz, int c) { return data[grid.node_index(ix, iy, iz) * ncomp + c]; }
    double at(int ix, int iy, int iz, int c) const { return data[grid.node_index(ix, iy, iz) * ncomp + c]; }

    Vec3 vec_at(std::size_t node) const {
        return {data[node * 3], data[node * 3 + 1], data[node * 3 + 2]};
    }
    void set_vec(std::size_t node, const Vec3& v) {
        data[node * 3] = v[0];
        data[node * 3 + 1] = v[1];
        data[node * 3 + 2] = v[2];
    }
};

using ScalarField = VectorField;

template <class F>
void for_each_node(const Grid& g, F&& fn) {
    std::size_t node = 0;
    for (int ix = 0; ix < g.n[0]; ++ix)
        for (int iy = 0; iy < g.n[1]; ++iy)
            for (int iz = 0; iz < g.n[2]; ++iz, ++node) fn(ix, iy, iz, node);
}

/** Sample a callable (x -> value per component) onto a grid. */
inline VectorField sample(const Grid& g, int ncomp, const std::function<void(const Vec3&, double*)>& f) {
    VectorField out(g, ncomp);
    for_each_node(g, [&](int ix, int iy, int iz, std::size_t node) {
        f(g.node(ix, iy, iz), out.data.data() + node * ncomp);
    });
    return out;
}

inline VectorField sample_vec(const Grid& g, const std::function<Vec3(const Vec3&)>& f) {
    return sample(g, 3, [&](const Vec3& x, double* v) {
        const Vec3 y = f(x);
        v[0] = y[0];
        v[1] = y[1];
        v[2] = y[2];
    });
}

inline ScalarField sample_scalar(const Grid& g, const std::function<double(const Vec3&)>& f) {
    return sample(g, 1, [&](const Vec3& x, double* v) { v[0] = f(x); });
}

/** Quadrature weight of one node (product of the axis rules). */
inline double node_weight(const Grid& g, int ix, int iy, int iz) {
    return g.axis_weight(0, ix) * g.axis_weight(1, iy) * g.axis_weight(2, iz);
}

/** integral of |f|^p, optionally against a scalar mask; fixed summation order. */
inline double lp_power_integral(const VectorField& f, double p, const ScalarField* mask = nullptr) {
    if (mask) require(mask->grid.same_layout(f.grid) && mask->ncomp == 1, "lp: mask grid mismatch");
    double acc = 0.0;
    for_each_node(f.grid, [&](int ix, int iy, int iz, std::size_t node) {
        double m2 = 0.0;
        for (int c = 0; c < f.ncomp; ++c) {
            const double v = f.data[node * f.ncomp + c];
            m2 += v * v;
        }
        double term = (p == 2.0) ? m2 : std::pow(std::sqrt(m2), p);
        if (mask) term *= mask->data[node];
        acc += node_weight(f.grid, ix, iy, iz) * term;
    });
    return acc;
}

inline double l2_norm(const VectorField& f, const ScalarField* mask = nullptr) {
    return std::sqrt(lp_power_integral(f, 2.0, mask));
}

inline double l2_distance(const VectorField& f, const VectorField& g,
                          const ScalarField* mask = nullptr) {
    require(f.grid.same_layout(g.grid) && f.ncomp == g.ncomp, "distance: field mismatch");
    if (mask) require(mask->grid.same_layout(f.grid) && mask->ncomp == 1, "distance: mask mismatch");
    double acc = 0.0;
    for_each_node(f.grid, [&](int ix, int iy, int iz, std::size_t node) {
        double m2 = 0.0;
        for (int c = 0; c < f.ncomp; ++c) {
            const double d = f.data[node * f.ncomp + c] - g.data[node * f.ncomp + c];
            m2 += d * d;
        }
        if (mask) m2 *= mask->data[node];
        acc += node_weight(f.grid, ix, iy, iz) * m2;
    });
    return std::sqrt(acc);
}

inline double l2_inner(const VectorField& f, const VectorField& g, const ScalarField* mask = nullptr) {
    require(f.grid.same_layout(g.grid) && f.ncomp == g.ncomp, "inner: field mismatch");
    if (mask) require(mask->grid.same_layout(f.grid) && mask->ncomp == 1, "inner: mask mismatch");
    double acc = 0.0;
    for_each_node(f.grid, [&](int ix, int iy, int iz, std::size_t node) {
        double s = 0.0;
        for (int c = 0; c < f.ncomp; ++c) s += f.data[node * f.ncomp + c] * g.data[node * f.ncomp + c];
        if (mask) s *= mask->data[node];
        acc += node_weight(f.grid, ix, iy, iz) * s;
    });
    return acc;
}

inline double mean_value(const ScalarField& f) {
    require(f.ncomp == 1, "mean: scalar field expected");
    double acc = 0.0, vol = 0.0;
    for_each_node(f.grid, [&](int ix, int iy, int iz, std::size_t node) {
        const double w = node_weight(f.grid, ix, iy, iz);
        acc += w * f.data[node];
        vol += w;
    });
    return acc / vol;
}

inline VectorField axpy(double a, const VectorField& x, const VectorField& y) {
    require(x.grid.same_layout(y.grid) && x.ncomp == y.ncomp, "axpy: field mismatch");
    VectorField out = y;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += a * x.data[i];
    return out;
}

/**
 * Unit-sphere valued field.  Wraps a 3-component VectorField and certifies
 * |m| = 1 at every node within tol.
 */
struct SphereField {
    VectorField f;

    static constexpr double kNormTol = 1e-12;

    SphereField() = default;
    explicit SphereField(VectorField v, double tol = kNormTol) : f(std::move(v)) {
        require(f.ncomp == 3, "sphere field: 3 components required");
        require(max_norm_defect() <= tol, "sphere field: |m|=1 violated beyond tolerance");
    }

    double max_norm_defect() const {
        double worst = 0.0;
        const std::size_t nn = f.grid.num_nodes();
        for (std::size_t i = 0; i < nn; ++i) {
            const double d = std::fabs(norm(f.vec_at(i)) - 1.0);
            if (d > worst) worst = d;
        }
        return worst;
    }
};

/** Radial projection x/|x|; the caller guards |x| away from 0. */
inline Vec3 sphere_project(const Vec3& v) {
    const double r = norm(v);
    return {v[0] / r, v[1] / r, v[2] / r};
}

} // namespace microhom

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>

#include "microhom/errors.hpp"

namespace microhom {

using Vec3 = std::array<double, 3>;
using Int3 = std::array<int, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

/** Row-major 3x3 matrix; entry (r,c) models the derivative of component r
 *  along axis c, matching the c*3+a layout of gradient fields. */
struct Mat3 {
    std::array<double, 9> a{};
    double& operator()(int r, int c) { return a[r * 3 + c]; }
    double operator()(int r, int c) const { return a[r * 3 + c]; }
};

inline Mat3 operator+(const Mat3& x, const Mat3& y) {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.a[i] = x.a[i] + y.a[i];
    return r;
}
inline Mat3 operator*(double s, const Mat3& x) {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.a[i] = s * x.a[i];
    return r;
}
/** m v */
inline Vec3 mat_vec(const Mat3& m, const Vec3& v) {
    return {m(0, 0) * v[0] + m(0, 1) * v[1] + m(0, 2) * v[2],
            m(1, 0) * v[0] + m(1, 1) * v[1] + m(1, 2) * v[2],
            m(2, 0) * v[0] + m(2, 1) * v[1] + m(2, 2) * v[2]};
}
/** m^T v */
inline Vec3 matT_vec(const Mat3& m, const Vec3& v) {
    return {m(0, 0) * v[0] + m(1, 0) * v[1] + m(2, 0) * v[2],
            m(0, 1) * v[0] + m(1, 1) * v[1] + m(2, 1) * v[2],
            m(0, 2) * v[0] + m(1, 2) * v[1] + m(2, 2) * v[2]};
}
/** u v^T */
inline Mat3 outer(const Vec3& u, const Vec3& v) {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r(i, j) = u[i] * v[j];
    return r;
}
inline double frob_inner(const Mat3& x, const Mat3& y) {
    double s = 0.0;
    for (int i = 0; i < 9; ++i) s += x.a[i] * y.a[i];
    return s;
}
inline double frob_norm2(const Mat3& x) { return frob_inner(x, x); }
/** x y */
inline Mat3 mat_mul(const Mat3& x, const Mat3& y) {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r(i, j) = x(i, 0) * y(0, j) + x(i, 1) * y(1, j) + x(i, 2) * y(2, j);
    return r;
}

/**
 * Axis-aligned sampling grid on a box.
 *
 * Periodic axes use midpoint sampling: n cells of width extent/n with the
 * node at the cell center (i+1/2)*h.  This makes cell-aligned indicators
 * exact and the midpoint rule the natural quadrature.  Non-periodic axes
 * carry endpoint nodes, spacing extent/(n-1), trapezoidal weights.
 */
struct Grid {
    Vec3 origin{0.0, 0.0, 0.0};
    Vec3 extent{1.0, 1.0, 1.0};
    Int3 n{1, 1, 1};
    std::array<bool, 3> periodic{true, true, true};

    void validate() const {
        for (int a = 0; a < 3; ++a) {
            require(n[a] >= 1, "grid: need at least one node per axis");
            require(extent[a] > 0.0, "grid: extent must be positive");
            if (!periodic[a]) require(n[a] >= 2, "grid: non-periodic axis needs >= 2 nodes");
        }
    }

    double spacing(int axis) const {
        return periodic[axis] ? extent[axis] / n[axis] : extent[axis] / (n[axis] - 1);
    }

    double coord(int axis, int i) const {
        const double h = spacing(axis);
        return origin[axis] + (periodic[axis] ? (i + 0.5) * h : i * h);
    }

    Vec3 node(int ix, int iy, int iz) const { return {coord(0, ix), coord(1, iy), coord(2, iz)}; }

    /** Quadrature weight of the 1-d rule along one axis. */
    double axis_weight(int axis, int i) const {
        const double h = spacing(axis);
        if (periodic[axis]) return h;
        return (i == 0 || i == n[axis] - 1) ? 0.5 * h : h;
    }

    double cell_volume() const { return spacing(0) * spacing(1) * spacing(2); }

    std::size_t num_nodes() const {
        return std::size_t(n[0]) * std::size_t(n[1]) * std::size_t(n[2]);
    }

    std::size_t node_index(int ix, int iy, int iz) const {
        return (std::size_t(ix) * n[1] + iy) * n[2] + iz;
    }

    bool same_layout(const Grid& o) const {
        return n == o.n && periodic == o.periodic && origin == o.origin && extent == o.extent;
    }
};

inline Grid unit_cell_grid(int n) {
    Grid g;
    g.n = {n, n, n};
    return g;
}

inline Grid box_grid(const Vec3& origin, const Vec3& extent, const Int3& n) {
    Grid g;
    g.origin = origin;
    g.extent = extent;
    g.n = n;
    return g;
}

} // namespace microhom

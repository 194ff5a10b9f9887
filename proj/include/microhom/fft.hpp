#pragma once

#include <complex>
#include <cstring>
#include <mutex>
#include <vector>

#include <fftw3.h>

#include "microhom/field.hpp"

namespace microhom {

inline std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}

/**
 * Real 3-d FFT pair on a periodic box, row-major (x slowest, z fastest).
 * Plans use FFTW_ESTIMATE so the chosen algorithm depends only on the
 * dimensions, never on timing runs; results are reproducible bit for bit.
 * One instance owns its buffers; use one instance per thread.
 */
class Fft3 {
  public:
    Fft3(const Int3& n, const Vec3& extent) : n_(n), extent_(extent) {
        nreal_ = std::size_t(n[0]) * n[1] * n[2];
        ncplx_ = std::size_t(n[0]) * n[1] * (n[2] / 2 + 1);
        real_ = fftw_alloc_real(nreal_);
        cplx_ = fftw_alloc_complex(ncplx_);
        std::lock_guard<std::mutex> lock(fftw_planner_mutex());
        fwd_ = fftw_plan_dft_r2c_3d(n[0], n[1], n[2], real_, cplx_, FFTW_ESTIMATE);
        bwd_ = fftw_plan_dft_c2r_3d(n[0], n[1], n[2], cplx_, real_, FFTW_ESTIMATE);
        require(fwd_ && bwd_, "fft: plan creation failed");
    }

    ~Fft3() {
        std::lock_guard<std::mutex> lock(fftw_planner_mutex());
        fftw_destroy_plan(fwd_);
        fftw_destroy_plan(bwd_);
        fftw_free(real_);
        fftw_free(cplx_);
    }

    Fft3(const Fft3&) = delete;
    Fft3& operator=(const Fft3&) = delete;

    std::size_t real_size() const { return nreal_; }
    std::size_t cplx_size() const { return ncplx_; }
    const Int3& dims() const { return n_; }

    void forward(const double* src, std::complex<double>* dst) {
        std::memcpy(real_, src, nreal_ * sizeof(double));
        fftw_execute(fwd_);
        std::memcpy(dst, cplx_, ncplx_ * sizeof(fftw_complex));
    }

    /** Inverse transform including the 1/N normalization. */
    void inverse(const std::complex<double>* src, double* dst) {
        std::memcpy(cplx_, src, ncplx_ * sizeof(fftw_complex));
        fftw_execute(bwd_);
        const double scale = 1.0 / double(nreal_);
        for (std::size_t i = 0; i < nreal_; ++i) dst[i] = real_[i] * scale;
    }

    /** Signed integer frequency of index k along an axis. */
    int ifreq(int axis, int k) const { return (k <= n_[axis] / 2) ? k : k - n_[axis]; }

    /** Angular wavenumber 2*pi*f/L. */
    double kappa(int axis, int k) const {
        return 2.0 * M_PI * double(ifreq(axis, k)) / extent_[axis];
    }

    /** Wavenumber for first derivatives: the Nyquist mode is dropped. */
    double kappa_deriv(int axis, int k) const {
        if (n_[axis] % 2 == 0 && k == n_[axis] / 2) return 0.0;
        return kappa(axis, k);
    }

    /** Iterate over complex modes: fn(kx,ky,kz, flat_index). */
    template <class F>
    void for_each_mode(F&& fn) const {
        std::size_t idx = 0;
        for (int kx = 0; kx < n_[0]; ++kx)
            for (int ky = 0; ky < n_[1]; ++ky)
                for (int kz = 0; kz <= n_[2] / 2; ++kz, ++idx) fn(kx, ky, kz, idx);
    }

  private:
    Int3 n_;
    Vec3 extent_;
    std::size_t nreal_ = 0, ncplx_ = 0;
    double* real_ = nullptr;
    fftw_complex* cplx_ = nullptr;
    fftw_plan fwd_ = nullptr, bwd_ = nullptr;
};

/** Extract one component of an interleaved field into a contiguous scratch. */
inline void gather_component(const VectorField& f, int c, std::vector<double>& out) {
    const std::size_t nn = f.grid.num_nodes();
    out.resize(nn);
    for (std::size_t i = 0; i < nn; ++i) out[i] = f.data[i * f.ncomp + c];
}

inline void scatter_component(const std::vector<double>& src, int c, VectorField& f) {
    const std::size_t nn = f.grid.num_nodes();
    for (std::size_t i = 0; i < nn; ++i) f.data[i * f.ncomp + c] = src[i];
}

} // namespace microhom

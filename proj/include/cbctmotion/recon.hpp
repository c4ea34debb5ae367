#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <mutex>
#include <optional>
#include <span>
#include <vector>

#include <fftw3.h>

#include "common.hpp"
#include "geometry.hpp"
#include "volume.hpp"

namespace cbctmotion {

namespace detail {

inline std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}

/// Smallest 2^a 3^b 5^c not below n.
inline int fft_friendly_size(int n) {
    for (int m = std::max(n, 1);; ++m) {
        int r = m;
        for (int p : {2, 3, 5})
            while (r % p == 0) r /= p;
        if (r == 1) return m;
    }
}

} // namespace detail

/// Band-limited ramp kernel sampled at integer offsets n with spacing tau:
/// 1/(4 tau^2) at n = 0, zero at even n, -1/(pi^2 n^2 tau^2) at odd n.
inline double ramp_kernel(int n, double tau) {
    if (n == 0) return 1.0 / (4.0 * tau * tau);
    if (n % 2 == 0) return 0.0;
    return -1.0 / (kPi * kPi * static_cast<double>(n) * n * tau * tau);
}

/// Row-wise linear convolution with the ramp kernel, evaluated by FFT on a
/// zero-padded buffer of at least twice the row length.
class RampFilter {
  public:
    RampFilter(int length, double tau) : n_(length), tau_(tau) {
        require(length >= 1, "ramp filter length must be positive");
        padded_ = detail::fft_friendly_size(2 * length);
        const int nc = padded_ / 2 + 1;
        std::vector<double> h(padded_);
        for (int j = 0; j < padded_; ++j) h[j] = ramp_kernel(j <= padded_ / 2 ? j : j - padded_, tau);
        std::vector<std::complex<double>> H(nc);
        {
            std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
            const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
            forward_ = fftw_plan_dft_r2c_1d(padded_, h.data(),
                                            reinterpret_cast<fftw_complex*>(H.data()), flags);
            std::vector<double> tmp(padded_);
            backward_ = fftw_plan_dft_c2r_1d(padded_, reinterpret_cast<fftw_complex*>(H.data()),
                                             tmp.data(), flags | FFTW_DESTROY_INPUT);
        }
        fftw_execute_dft_r2c(forward_, h.data(), reinterpret_cast<fftw_complex*>(H.data()));
        spectrum_.resize(nc);
        for (int j = 0; j < nc; ++j) spectrum_[j] = H[j].real() / padded_;
    }

    RampFilter(const RampFilter&) = delete;
    RampFilter& operator=(const RampFilter&) = delete;

    ~RampFilter() {
        std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
        fftw_destroy_plan(forward_);
        fftw_destroy_plan(backward_);
    }

    int length() const { return n_; }
    int padded_length() const { return padded_; }
    double tau() const { return tau_; }

    /// out[m] = sum_j in[j] h[m - j]. Safe to call concurrently.
    template <typename In, typename Out>
    void apply(const In* in, Out* out) const {
        std::vector<double> buf(padded_, 0.0);
        std::vector<std::complex<double>> spec(padded_ / 2 + 1);
        for (int i = 0; i < n_; ++i) buf[i] = static_cast<double>(in[i]);
        fftw_execute_dft_r2c(forward_, buf.data(), reinterpret_cast<fftw_complex*>(spec.data()));
        for (std::size_t j = 0; j < spec.size(); ++j) spec[j] *= spectrum_[j];
        fftw_execute_dft_c2r(backward_, reinterpret_cast<fftw_complex*>(spec.data()), buf.data());
        for (int i = 0; i < n_; ++i) out[i] = static_cast<Out>(buf[i]);
    }

  private:
    int n_;
    double tau_;
    int padded_ = 0;
    fftw_plan forward_ = nullptr;
    fftw_plan backward_ = nullptr;
    std::vector<double> spectrum_;
};

/// Every row of the stack convolved with the ramp kernel for pitch `tau`.
inline ProjectionStack ramp_filter(const ProjectionStack& stack, double tau, unsigned workers = 0) {
    ProjectionStack out(stack.frames, stack.rows, stack.cols);
    const RampFilter filter(stack.cols, tau);
    parallel_for(static_cast<std::size_t>(stack.frames) * stack.rows, [&](std::size_t i) {
        const int f = static_cast<int>(i / stack.rows), r = static_cast<int>(i % stack.rows);
        filter.apply(stack.row(f, r), out.row(f, r));
    }, workers);
    return out;
}

/// FDK pre-weight sdd / sqrt(sdd^2 + u^2 + v^2) for a detector pixel.
inline double cosine_weight_at(const ScanGeometry& geom, double col, double row) {
    const double u = (col - geom.principal_u()) * geom.pixel_pitch;
    const double v = (row - geom.principal_v()) * geom.pixel_pitch;
    return geom.sdd / std::sqrt(geom.sdd * geom.sdd + u * u + v * v);
}

inline ProjectionStack cosine_weight(const ProjectionStack& stack, const ScanGeometry& geom) {
    require(stack.rows == geom.det_rows && stack.cols == geom.det_cols,
            "stack does not match the detector geometry");
    ProjectionStack out = stack;
    for (int f = 0; f < stack.frames; ++f)
        for (int r = 0; r < stack.rows; ++r)
            for (int c = 0; c < stack.cols; ++c)
                out.at(f, r, c) = static_cast<float>(stack.at(f, r, c) * cosine_weight_at(geom, c, r));
    return out;
}

struct ReconOptions {
    unsigned workers = 0;
    bool mask_fov = true;
};

/// Parker-weighted FDK. With a view, only its frames are used and weighted
/// by Parker's short-scan weights; without one all frames are used with the
/// full-scan redundancy weight 1/2. The grid is reconstructed voxel by voxel
/// with bilinear detector sampling and (sad/U)^2 distance weighting;
/// accumulation runs in double precision in frame order.
inline Volume fdk_reconstruct(const ProjectionStack& stack, const Trajectory& traj,
                              const std::optional<ShortScanView>& view, const Grid& grid,
                              const ReconOptions& options = {}) {
    const ScanGeometry& geom = traj.geometry;
    require(stack.frames == static_cast<int>(traj.frames.size()),
            "stack frame count does not match the trajectory");
    require(stack.rows == geom.det_rows && stack.cols == geom.det_cols,
            "stack does not match the detector geometry");
    for (int a = 0; a < 3; ++a) require(grid.dims[a] >= 8, "grid dims must be >= 8 per axis");

    std::vector<int> frames;
    std::vector<std::vector<double>> weights;
    if (view) {
        frames = view->frame_indices;
        weights = parker_weights(traj, *view);
    } else {
        frames.resize(stack.frames);
        for (int k = 0; k < stack.frames; ++k) frames[k] = k;
        weights.assign(frames.size(), std::vector<double>(geom.det_cols, 0.5));
    }

    const int rows = geom.det_rows, cols = geom.det_cols;
    // filtered projections stored column-major with a one-pixel zero border:
    // element (row, col) sits at (col + 1) * prow + (row + 1)
    const int prow = rows + 2, pcol = cols + 2;
    const std::size_t frame_size = static_cast<std::size_t>(prow) * pcol;
    std::vector<float> filtered(frames.size() * frame_size, 0.0f);
    const double scale = geom.pixel_pitch * geom.magnification() * geom.frame_spacing_rad();
    {
        const RampFilter filter(cols, geom.pixel_pitch);
        std::vector<double> cosw(static_cast<std::size_t>(rows) * cols);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c)
                cosw[static_cast<std::size_t>(r) * cols + c] = cosine_weight_at(geom, c, r);
        parallel_for(frames.size() * rows, [&](std::size_t i) {
            const std::size_t j = i / rows;
            const int r = static_cast<int>(i % rows);
            const float* src = stack.row(frames[j], r);
            std::vector<double> in(cols), out(cols);
            for (int c = 0; c < cols; ++c)
                in[c] = src[c] * cosw[static_cast<std::size_t>(r) * cols + c] * weights[j][c];
            filter.apply(in.data(), out.data());
            float* dst = filtered.data() + j * frame_size;
            for (int c = 0; c < cols; ++c)
                dst[static_cast<std::size_t>(c + 1) * prow + (r + 1)] = static_cast<float>(out[c] * scale);
        }, options.workers);
    }

    // On a circular orbit the detector column and the depth of a voxel do
    // not depend on its z coordinate, so each (x, y) column of voxels maps
    // to one detector column.
    bool axial_columns = true;
    for (int k : frames) {
        const ProjectionMatrix& P = traj.frames[k].P;
        axial_columns = axial_columns && P(0, 2) == 0.0 && P(2, 2) == 0.0;
    }

    Volume vol(grid);
    const int nx = grid.dims[0], ny = grid.dims[1], nz = grid.dims[2];
    const double sad2 = geom.sad * geom.sad;
    const double r2 = geom.fov_radius * geom.fov_radius;
    parallel_for(static_cast<std::size_t>(ny), [&](std::size_t yi) {
        const int y = static_cast<int>(yi);
        std::vector<double> acc(static_cast<std::size_t>(nx) * nz, 0.0); // x-major, z fastest
        std::vector<unsigned char> inside(nx, 1);
        if (options.mask_fov) {
            for (int x = 0; x < nx; ++x) {
                const Vec3 c = grid.voxel_center(x, y, 0);
                inside[x] = c.x() * c.x() + c.y() * c.y() <= r2;
            }
        }
        for (std::size_t j = 0; j < frames.size(); ++j) {
            const ProjectionMatrix& P = traj.frames[frames[j]].P;
            const float* img = filtered.data() + j * frame_size;
            const Vec3 dz = P.col(2) * grid.spacing.z();
            for (int x = 0; x < nx; ++x) {
                if (!inside[x]) continue;
                const Vec3 h0 = P.leftCols<3>() * grid.voxel_center(x, y, 0) + P.col(3);
                double* col_acc = acc.data() + static_cast<std::size_t>(x) * nz;
                if (axial_columns) {
                    if (h0.z() <= 0.0) continue;
                    const double inv = 1.0 / h0.z();
                    const double u = h0.x() * inv;
                    if (!(u > -1.0 && u < cols)) continue;
                    const int iu = static_cast<int>(u + 1.0) - 1;
                    const double wu = u - iu;
                    const float* c0 = img + static_cast<std::size_t>(iu + 1) * prow + 1;
                    const float* c1 = c0 + prow;
                    const double w = sad2 * inv * inv;
                    const double dv = dz.y() * inv;
                    const double v0 = h0.y() * inv;
                    for (int z = 0; z < nz; ++z) {
                        const double v = v0 + z * dv;
                        if (!(v > -1.0 && v < rows)) continue;
                        const int iv = static_cast<int>(v + 1.0) - 1;
                        const double wv = v - iv;
                        const double a = c0[iv] + wv * (c0[iv + 1] - c0[iv]);
                        const double b = c1[iv] + wv * (c1[iv + 1] - c1[iv]);
                        col_acc[z] += w * (a + wu * (b - a));
                    }
                } else {
                    for (int z = 0; z < nz; ++z) {
                        const Vec3 h = h0 + z * dz;
                        if (h.z() <= 0.0) continue;
                        const double inv = 1.0 / h.z();
                        const double u = h.x() * inv, v = h.y() * inv;
                        if (!(u > -1.0 && u < cols && v > -1.0 && v < rows)) continue;
                        const int iu = static_cast<int>(u + 1.0) - 1;
                        const int iv = static_cast<int>(v + 1.0) - 1;
                        const double wu = u - iu, wv = v - iv;
                        const float* c0 = img + static_cast<std::size_t>(iu + 1) * prow + 1;
                        const float* c1 = c0 + prow;
                        const double a = c0[iv] + wv * (c0[iv + 1] - c0[iv]);
                        const double b = c1[iv] + wv * (c1[iv + 1] - c1[iv]);
                        col_acc[z] += sad2 * inv * inv * (a + wu * (b - a));
                    }
                }
            }
        }
        for (int z = 0; z < nz; ++z)
            for (int x = 0; x < nx; ++x)
                vol.at(x, y, z) = static_cast<float>(acc[static_cast<std::size_t>(x) * nz + z]);
    }, options.workers);
    return vol;
}

/// Voxels inside the central cylinder whose radius and half-height are
/// `fraction` of the reconstructable radius and of the grid half-height.
inline std::vector<std::size_t> central_roi(const Grid& grid, double fov_radius, double fraction = 0.6) {
    const Vec3 lo = grid.voxel_center(0, 0, 0);
    const Vec3 hi = grid.voxel_center(grid.dims[0] - 1, grid.dims[1] - 1, grid.dims[2] - 1);
    const Vec3 mid = 0.5 * (lo + hi);
    const double half_xy = 0.5 * std::min(hi.x() - lo.x(), hi.y() - lo.y());
    const double r = fraction * std::min(fov_radius, half_xy);
    const double hz = fraction * 0.5 * (hi.z() - lo.z());
    std::vector<std::size_t> idx;
    for (int z = 0; z < grid.dims[2]; ++z)
        for (int y = 0; y < grid.dims[1]; ++y)
            for (int x = 0; x < grid.dims[0]; ++x) {
                const Vec3 c = grid.voxel_center(x, y, z) - mid;
                if (c.x() * c.x() + c.y() * c.y() <= r * r && std::abs(c.z()) <= hz)
                    idx.push_back((static_cast<std::size_t>(z) * grid.dims[1] + y) * grid.dims[0] + x);
            }
    return idx;
}

/// Root-mean-square error over `roi` divided by the value range of `ref` there.
inline double nrmse(const Volume& vol, const Volume& ref, std::span<const std::size_t> roi) {
    require(vol.grid == ref.grid, "nrmse needs volumes on the same grid");
    require(!roi.empty(), "nrmse needs a non-empty region");
    double se = 0.0, lo = ref.values[roi[0]], hi = lo;
    for (std::size_t i : roi) {
        const double d = static_cast<double>(vol.values[i]) - ref.values[i];
        se += d * d;
        lo = std::min(lo, static_cast<double>(ref.values[i]));
        hi = std::max(hi, static_cast<double>(ref.values[i]));
    }
    require(hi > lo, "nrmse reference is constant over the region");
    return std::sqrt(se / static_cast<double>(roi.size())) / (hi - lo);
}

inline double mean_abs_diff(const Volume& vol, const Volume& ref, std::span<const std::size_t> roi) {
    require(vol.grid == ref.grid, "mean_abs_diff needs volumes on the same grid");
    require(!roi.empty(), "mean_abs_diff needs a non-empty region");
    double s = 0.0;
    for (std::size_t i : roi) s += std::abs(static_cast<double>(vol.values[i]) - ref.values[i]);
    return s / static_cast<double>(roi.size());
}

} // namespace cbctmotion

#pragma once

#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <optional>
#include <string>

#include "common.hpp"
#include "geometry.hpp"
#include "volume.hpp"

namespace cbctmotion {

enum class TruncationPolicy { Warn, Error };

/// Transmission-domain noise: Poisson counts at `incident_counts` per pixel,
/// log-converted back to line integrals.
struct NoiseModel {
    double incident_counts = 1e5;
    std::uint64_t seed = 0;
};

struct ProjectorOptions {
    TruncationPolicy truncation = TruncationPolicy::Warn;
    std::optional<NoiseModel> noise;
    unsigned workers = 0;
};

/// Ray marcher over a voxel grid. Samples are taken at t = k * step from the
/// ray origin (step = half the smallest voxel pitch) with trilinear
/// interpolation; the volume is zero outside the grid. Sample positions do not
/// depend on where the ray enters the grid, so clipping to the non-zero
/// bounding box leaves the result unchanged.
class RayIntegrator {
  public:
    explicit RayIntegrator(const Volume& vol)
        : nx_(vol.nx()), ny_(vol.ny()), nz_(vol.nz()), spacing_(vol.grid.spacing),
          origin_(vol.grid.origin), step_(0.5 * vol.grid.spacing.minCoeff()) {
        px_ = nx_ + 3;
        py_ = ny_ + 3;
        padded_.assign(static_cast<std::size_t>(px_) * py_ * (nz_ + 3), 0.0f);
        lo_ = {nx_, ny_, nz_};
        hi_ = {-1, -1, -1};
        for (int z = 0; z < nz_; ++z)
            for (int y = 0; y < ny_; ++y)
                for (int x = 0; x < nx_; ++x) {
                    const float v = vol.at(x, y, z);
                    if (v == 0.0f) continue;
                    padded_[pindex(x, y, z)] = v;
                    lo_ = {std::min(lo_[0], x), std::min(lo_[1], y), std::min(lo_[2], z)};
                    hi_ = {std::max(hi_[0], x), std::max(hi_[1], y), std::max(hi_[2], z)};
                }
        empty_ = hi_[0] < 0;
    }

    double step() const { return step_; }
    bool empty() const { return empty_; }

    /// Line integral of mu along source + t * direction, t >= 0. `direction`
    /// must be a unit vector.
    double integrate(const Vec3& source, const Vec3& direction) const {
        if (empty_) return 0.0;
        double p0[3], d[3];
        for (int a = 0; a < 3; ++a) {
            p0[a] = (source[a] - origin_[a]) / spacing_[a];
            d[a] = direction[a] / spacing_[a];
        }
        double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
        for (int a = 0; a < 3; ++a) {
            const double lo = lo_[a] - 1.0, hi = hi_[a] + 1.0;
            if (d[a] == 0.0) {
                if (p0[a] <= lo || p0[a] >= hi) return 0.0;
                continue;
            }
            double ta = (lo - p0[a]) / d[a];
            double tb = (hi - p0[a]) / d[a];
            if (ta > tb) std::swap(ta, tb);
            t0 = std::max(t0, ta);
            t1 = std::min(t1, tb);
        }
        if (!(t1 > t0)) return 0.0;
        const auto k0 = static_cast<long>(std::ceil(t0 / step_));
        const auto k1 = static_cast<long>(std::floor(t1 / step_));
        double sum = 0.0;
        for (long k = k0; k <= k1; ++k) {
            const double t = static_cast<double>(k) * step_;
            sum += sample_inside(p0[0] + t * d[0], p0[1] + t * d[1], p0[2] + t * d[2]);
        }
        return sum * step_;
    }

    /// Trilinear interpolation at continuous index coordinates.
    double sample(double x, double y, double z) const {
        if (x <= -1.0 || y <= -1.0 || z <= -1.0 || x >= nx_ || y >= ny_ || z >= nz_) return 0.0;
        // arguments exceed -1, so truncation of (x + 1) is a floor
        const int ix = static_cast<int>(x + 1.0) - 1;
        const int iy = static_cast<int>(y + 1.0) - 1;
        const int iz = static_cast<int>(z + 1.0) - 1;
        const double wx = x - ix, wy = y - iy, wz = z - iz;
        const float* c = padded_.data() + pindex(ix, iy, iz);
        const std::size_t sy = static_cast<std::size_t>(px_);
        const std::size_t sz = static_cast<std::size_t>(px_) * py_;
        const double c00 = c[0] + wx * (c[1] - c[0]);
        const double c10 = c[sy] + wx * (c[sy + 1] - c[sy]);
        const double c01 = c[sz] + wx * (c[sz + 1] - c[sz]);
        const double c11 = c[sz + sy] + wx * (c[sz + sy + 1] - c[sz + sy]);
        const double c0 = c00 + wy * (c10 - c00);
        const double c1 = c01 + wy * (c11 - c01);
        return c0 + wz * (c1 - c0);
    }

  private:
    // Coordinates lie within [lo - 1, hi + 1] up to rounding, so every
    // neighbour read stays inside the zero padding.
    float sample_inside(double x, double y, double z) const {
        const int ix = static_cast<int>(x + 1.0) - 1;
        const int iy = static_cast<int>(y + 1.0) - 1;
        const int iz = static_cast<int>(z + 1.0) - 1;
        const float wx = static_cast<float>(x - ix);
        const float wy = static_cast<float>(y - iy);
        const float wz = static_cast<float>(z - iz);
        const float* c = padded_.data() + pindex(ix, iy, iz);
        const std::size_t sy = static_cast<std::size_t>(px_);
        const std::size_t sz = static_cast<std::size_t>(px_) * py_;
        const float c00 = c[0] + wx * (c[1] - c[0]);
        const float c10 = c[sy] + wx * (c[sy + 1] - c[sy]);
        const float c01 = c[sz] + wx * (c[sz + 1] - c[sz]);
        const float c11 = c[sz + sy] + wx * (c[sz + sy + 1] - c[sz + sy]);
        const float c0 = c00 + wy * (c10 - c00);
        const float c1 = c01 + wy * (c11 - c01);
        return c0 + wz * (c1 - c0);
    }

    std::size_t pindex(int x, int y, int z) const {
        return (static_cast<std::size_t>(z + 1) * py_ + (y + 1)) * px_ + (x + 1);
    }

    int nx_, ny_, nz_;
    int px_ = 0, py_ = 0;
    Vec3 spacing_, origin_;
    double step_;
    std::vector<float> padded_;
    std::array<int, 3> lo_{}, hi_{};
    bool empty_ = true;
};

inline double integrate_ray(const Volume& volume, const Vec3& source, const Vec3& direction) {
    return RayIntegrator(volume).integrate(source, direction);
}

/// Number of non-zero voxels whose axial distance exceeds the FOV radius.
inline std::size_t voxels_outside_fov(const Volume& volume, double fov_radius) {
    std::size_t n = 0;
    const Grid& g = volume.grid;
    for (int z = 0; z < volume.nz(); ++z)
        for (int y = 0; y < volume.ny(); ++y)
            for (int x = 0; x < volume.nx(); ++x) {
                if (volume.at(x, y, z) == 0.0f) continue;
                const Vec3 c = g.voxel_center(x, y, z);
                if (std::hypot(c.x(), c.y()) > fov_radius) ++n;
            }
    return n;
}

namespace detail {

inline double poisson_draw(Rng& rng, double lambda) {
    if (lambda < 30.0) {
        const double limit = std::exp(-lambda);
        double prod = rng.uniform();
        int k = 0;
        while (prod > limit) {
            ++k;
            prod *= rng.uniform();
        }
        return k;
    }
    return std::max(0.0, std::round(lambda + std::sqrt(lambda) * rng.normal()));
}

} // namespace detail

/// Cone-beam line integrals of `volume` for every frame of `traj`. Rays run
/// from the source encoded by each projection matrix through the pixel
/// centers. Work is split over (frame, row) pairs; each ray is evaluated in a
/// fixed order, so the output does not depend on the worker count.
inline ProjectionStack forward_project(const Volume& volume, const Trajectory& traj,
                                       const ProjectorOptions& options = {}) {
    const ScanGeometry& geom = traj.geometry;
    const std::size_t outside = voxels_outside_fov(volume, geom.fov_radius);
    if (outside > 0) {
        const std::string msg = std::to_string(outside) +
                                " non-zero voxels lie outside the field-of-view cylinder";
        if (options.truncation == TruncationPolicy::Error) throw ValidationError(msg);
        std::cerr << "warning: " << msg << "\n";
    }

    const int n_frames = static_cast<int>(traj.frames.size());
    ProjectionStack stack(n_frames, geom.det_rows, geom.det_cols);
    const RayIntegrator integrator(volume);

    struct FrameRays {
        Vec3 source;
        Mat3 inv;
    };
    std::vector<FrameRays> rays(n_frames);
    for (int k = 0; k < n_frames; ++k) {
        const ProjectionMatrix& P = traj.frames[k].P;
        rays[k].inv = P.leftCols<3>().inverse();
        rays[k].source = -rays[k].inv * P.col(3);
    }

    const std::size_t tiles = static_cast<std::size_t>(n_frames) * geom.det_rows;
    parallel_for(tiles, [&](std::size_t tile) {
        const int k = static_cast<int>(tile / geom.det_rows);
        const int r = static_cast<int>(tile % geom.det_rows);
        const FrameRays& fr = rays[k];
        float* out = stack.row(k, r);
        const Vec3 base = fr.inv.col(1) * r + fr.inv.col(2);
        for (int c = 0; c < geom.det_cols; ++c) {
            const Vec3 dir = (fr.inv.col(0) * c + base).normalized();
            out[c] = static_cast<float>(integrator.integrate(fr.source, dir));
        }
        if (options.noise) {
            Rng rng(mix_seed(options.noise->seed, static_cast<std::uint64_t>(k),
                             static_cast<std::uint64_t>(r)));
            const double i0 = options.noise->incident_counts;
            for (int c = 0; c < geom.det_cols; ++c) {
                const double counts = detail::poisson_draw(rng, i0 * std::exp(-out[c]));
                out[c] = static_cast<float>(std::max(0.0, -std::log(std::max(counts, 1.0) / i0)));
            }
        }
    }, options.workers);
    return stack;
}

} // namespace cbctmotion

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "common.hpp"

namespace cbctmotion {

/// Regular voxel grid. `origin` is the world position (mm) of the center of
/// voxel (0, 0, 0); x varies fastest in memory, then y, then z.
struct Grid {
    std::array<int, 3> dims{0, 0, 0};
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 origin{0.0, 0.0, 0.0};

    std::size_t voxel_count() const {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }

    Vec3 voxel_center(int x, int y, int z) const {
        return {origin.x() + x * spacing.x(), origin.y() + y * spacing.y(),
                origin.z() + z * spacing.z()};
    }

    /// Grid of `n` voxels per axis at isotropic `voxel_mm`, centered on the
    /// isocenter.
    static Grid centered(std::array<int, 3> n, double voxel_mm) {
        Grid g;
        g.dims = n;
        g.spacing = Vec3::Constant(voxel_mm);
        for (int a = 0; a < 3; ++a) g.origin[a] = -0.5 * (n[a] - 1) * voxel_mm;
        return g;
    }

    bool operator==(const Grid& o) const {
        return dims == o.dims && spacing == o.spacing && origin == o.origin;
    }
};

struct Volume {
    Grid grid;
    std::vector<float> values;

    Volume() = default;
    explicit Volume(const Grid& g) : grid(g), values(g.voxel_count(), 0.0f) {}

    int nx() const { return grid.dims[0]; }
    int ny() const { return grid.dims[1]; }
    int nz() const { return grid.dims[2]; }

    std::size_t index(int x, int y, int z) const {
        return (static_cast<std::size_t>(z) * ny() + y) * nx() + x;
    }
    float& at(int x, int y, int z) { return values[index(x, y, z)]; }
    float at(int x, int y, int z) const { return values[index(x, y, z)]; }

    void validate() const {
        for (int a = 0; a < 3; ++a)
            require(grid.dims[a] >= 8, "volume dims must be >= 8 per axis");
        require(values.size() == grid.voxel_count(), "volume payload size mismatch");
        for (float v : values)
            if (!std::isfinite(v)) throw NumericError("volume contains non-finite values");
    }
};

/// frames x rows x cols line integrals; cols vary fastest.
struct ProjectionStack {
    int frames = 0;
    int rows = 0;
    int cols = 0;
    std::vector<float> values;

    ProjectionStack() = default;
    ProjectionStack(int f, int r, int c)
        : frames(f), rows(r), cols(c),
          values(static_cast<std::size_t>(f) * r * c, 0.0f) {}

    std::size_t index(int f, int r, int c) const {
        return (static_cast<std::size_t>(f) * rows + r) * cols + c;
    }
    float& at(int f, int r, int c) { return values[index(f, r, c)]; }
    float at(int f, int r, int c) const { return values[index(f, r, c)]; }

    float* row(int f, int r) { return values.data() + index(f, r, 0); }
    const float* row(int f, int r) const { return values.data() + index(f, r, 0); }
};

/// Single-channel 2D image, row-major.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<double> pixels;

    Image() = default;
    Image(int w, int h, double fill = 0.0)
        : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

    double& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    double at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

} // namespace cbctmotion

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "common.hpp"
#include "volume.hpp"

namespace cbctmotion {

enum class Shape { Ellipsoid, Cylinder, Sphere };

inline const char* to_string(Shape s) {
    switch (s) {
    case Shape::Ellipsoid: return "ellipsoid";
    case Shape::Cylinder: return "cylinder";
    case Shape::Sphere: return "sphere";
    }
    return "?";
}

inline Shape parse_shape(const std::string& s) {
    if (s == "ellipsoid") return Shape::Ellipsoid;
    if (s == "cylinder") return Shape::Cylinder;
    if (s == "sphere") return Shape::Sphere;
    throw ValidationError("unknown primitive shape: " + s);
}

namespace attenuation {
inline constexpr double soft_tissue = 0.02;
inline constexpr double bone = 0.05;
inline constexpr double teeth = 0.08;
inline constexpr double metal = 1.0;
} // namespace attenuation

/// Analytic solid. `extent` holds the ellipsoid semi-axes, the cylinder
/// cross-section semi-axes and half-height (local z is the cylinder axis), or
/// the sphere radius in extent.x(). Local axes are the columns of
/// `orientation`.
struct Primitive {
    Shape shape = Shape::Sphere;
    Vec3 center = Vec3::Zero();
    Vec3 extent = Vec3::Ones();
    Mat3 orientation = Mat3::Identity();
    double attenuation = 0.0;
    bool additive = true;

    bool contains(const Vec3& x) const {
        const Vec3 q = orientation.transpose() * (x - center);
        switch (shape) {
        case Shape::Sphere: return q.squaredNorm() <= extent.x() * extent.x();
        case Shape::Ellipsoid: {
            const double u = q.x() / extent.x(), v = q.y() / extent.y(), w = q.z() / extent.z();
            return u * u + v * v + w * w <= 1.0;
        }
        case Shape::Cylinder: {
            const double u = q.x() / extent.x(), v = q.y() / extent.y();
            return u * u + v * v <= 1.0 && std::abs(q.z()) <= extent.z();
        }
        }
        return false;
    }

    /// Half-width of the primitive along unit direction n (support function).
    double support(const Vec3& n) const {
        const Vec3 l = orientation.transpose() * n;
        switch (shape) {
        case Shape::Sphere: return extent.x();
        case Shape::Ellipsoid:
            return std::sqrt(std::pow(extent.x() * l.x(), 2) + std::pow(extent.y() * l.y(), 2) +
                             std::pow(extent.z() * l.z(), 2));
        case Shape::Cylinder:
            return std::sqrt(std::pow(extent.x() * l.x(), 2) + std::pow(extent.y() * l.y(), 2)) +
                   extent.z() * std::abs(l.z());
        }
        return 0.0;
    }

    bool operator==(const Primitive&) const = default;
};

struct PhantomSpec {
    std::vector<Primitive> primitives;
    std::uint64_t seed = 0;
    bool metal = false;

    bool operator==(const PhantomSpec&) const = default;

    void validate() const {
        bool has_metal = false;
        for (const auto& p : primitives) {
            require(p.attenuation >= 0.0, "primitive attenuation must be >= 0");
            require(p.extent.minCoeff() > 0.0, "primitive extents must be positive");
            has_metal = has_metal || p.attenuation >= 10.0 * attenuation::bone;
        }
        require(!metal || has_metal, "metal phantom needs inserts of >= 10x bone attenuation");
    }

    /// Largest distance from the rotation axis reached by any additive
    /// primitive, in mm.
    double bounding_radius() const {
        double r = 0.0;
        for (const auto& p : primitives) {
            if (!p.additive) continue;
            for (int k = 0; k < 720; ++k) {
                const double a = 2.0 * kPi * k / 720.0;
                const Vec3 n(std::cos(a), std::sin(a), 0.0);
                r = std::max(r, p.center.dot(n) + p.support(n));
            }
        }
        return r;
    }
};

enum class PhantomKind { Small, Medium, Large };

inline const char* to_string(PhantomKind k) {
    switch (k) {
    case PhantomKind::Small: return "small";
    case PhantomKind::Medium: return "medium";
    case PhantomKind::Large: return "large";
    }
    return "?";
}

inline PhantomKind parse_phantom_kind(const std::string& s) {
    if (s == "small") return PhantomKind::Small;
    if (s == "medium") return PhantomKind::Medium;
    if (s == "large") return PhantomKind::Large;
    throw ValidationError("unknown phantom kind: " + s);
}

/// Rotation applying x, then y, then z rotations (angles in degrees).
inline Mat3 rotation_xyz(const Vec3& deg) {
    using Eigen::AngleAxisd;
    return (AngleAxisd(deg_to_rad(deg.z()), Vec3::UnitZ()) *
            AngleAxisd(deg_to_rad(deg.y()), Vec3::UnitY()) *
            AngleAxisd(deg_to_rad(deg.x()), Vec3::UnitX()))
        .toRotationMatrix();
}

namespace detail {

inline Primitive make(Shape s, Vec3 c, Vec3 e, double mu, bool additive = true,
                      Mat3 orient = Mat3::Identity()) {
    Primitive p;
    p.shape = s;
    p.center = c;
    p.extent = e;
    p.orientation = orient;
    p.attenuation = mu;
    p.additive = additive;
    return p;
}

/// Point on the dental arch at parameter phi (radians, 0 = incisors).
inline Vec3 arch_point(double half_width, double depth, double phi, double z) {
    return {half_width * std::sin(phi), -depth * std::cos(phi), z};
}

} // namespace detail

/// Dental-head phantom built from analytic primitives: soft tissue, a skull
/// shell, maxilla and mandible arcs, a spine segment, an airway and a row of
/// teeth along the dental arch. `metal` appends crown/filling beads.
inline PhantomSpec default_phantom(PhantomKind kind, bool metal, std::uint64_t seed) {
    using detail::make;
    namespace mu = attenuation;
    Rng rng(mix_seed(seed, 0x70a7, static_cast<std::uint64_t>(kind)));

    const double s = kind == PhantomKind::Small ? 0.82 : kind == PhantomKind::Medium ? 0.91 : 1.0;
    const double jitter = rng.uniform(0.96, 1.04);
    const double a = s * jitter;

    PhantomSpec spec;
    spec.seed = seed;
    spec.metal = metal;
    auto& P = spec.primitives;

    // soft tissue extends past the top and bottom of the reconstruction grid
    P.push_back(make(Shape::Ellipsoid, {0, 0, 0}, {34 * a, 40 * a, 60}, mu::soft_tissue));

    // skull shell
    P.push_back(make(Shape::Ellipsoid, {0, 3 * a, 12}, {31 * a, 36 * a, 52}, mu::bone));
    P.push_back(make(Shape::Ellipsoid, {0, 3 * a, 12}, {28 * a, 33 * a, 49}, mu::bone, false));

    // airway and spine
    P.push_back(make(Shape::Cylinder, {0, 12 * a, -12}, {4.5 * a, 6 * a, 34}, mu::soft_tissue,
                     false));
    P.push_back(make(Shape::Cylinder, {0, 24 * a, -14}, {7 * a, 6.5 * a, 34}, mu::bone));

    const double arch_w = 25 * a;
    const double arch_d = 28 * a;
    const double z_upper = 15 * a;
    const double z_lower = -19 * a;

    // maxilla and mandible: overlapping vertical cylinders along the arch
    const int n_bone = 9;
    for (int i = 0; i < n_bone; ++i) {
        const double phi = deg_to_rad(-84.0 + 168.0 * i / (n_bone - 1));
        P.push_back(make(Shape::Cylinder, detail::arch_point(arch_w, arch_d, phi, z_upper),
                         {5.5 * a, 5.5 * a, 5.5 * a}, mu::bone));
        P.push_back(make(Shape::Cylinder, detail::arch_point(arch_w, arch_d, phi, z_lower),
                         {6 * a, 5 * a, 8 * a}, mu::bone));
    }
    // mandibular rami
    for (double side : {-1.0, 1.0}) {
        const Mat3 tilt = rotation_xyz({-12.0, 0.0, 0.0});
        P.push_back(make(Shape::Ellipsoid, {side * 26 * a, 6 * a, -8 * a}, {3.5 * a, 8 * a, 20 * a},
                         mu::bone, true, tilt));
    }

    // teeth
    const int n_teeth = rng.uniform_int(12, 16);
    std::vector<Vec3> crowns;
    for (int i = 0; i < n_teeth; ++i) {
        const double phi = deg_to_rad(-76.0 + 152.0 * i / (n_teeth - 1));
        const double r = 2.6 * a * rng.uniform(0.9, 1.1);
        const double zc = -2 * a + rng.uniform(-1.0, 1.0);
        Vec3 c = detail::arch_point(arch_w - 1.5 * a, arch_d - 1.5 * a, phi, zc);
        P.push_back(make(Shape::Cylinder, c, {r, r, 10 * a}, mu::teeth));
        crowns.push_back(c);
    }

    if (metal) {
        const int n_beads = rng.uniform_int(2, 4);
        std::vector<int> used;
        for (int b = 0; b < n_beads; ++b) {
            int t;
            do {
                t = rng.uniform_int(0, n_teeth - 1);
            } while (std::find(used.begin(), used.end(), t) != used.end());
            used.push_back(t);
            Vec3 c = crowns[t];
            c.z() += (b % 2 == 0 ? 1.0 : -1.0) * 3.0 * a;
            P.push_back(make(Shape::Sphere, c, Vec3::Constant(1.6), mu::metal));
        }
    }
    return spec;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentSpec {
    double scale = 1.0;
    Vec3 rotation_deg = Vec3::Zero();
    Vec3 translation_mm = Vec3::Zero();

    void validate() const {
        require(scale >= 0.8 && scale <= 1.2, "augmentation scale must lie in [0.8, 1.2]");
        require(rotation_deg.cwiseAbs().maxCoeff() <= 5.0,
                "augmentation rotations must not exceed 5 degrees");
        require(translation_mm.cwiseAbs().maxCoeff() <= 5.0,
                "augmentation translations must not exceed 5 mm");
    }

    static AugmentSpec random(Rng& rng) {
        AugmentSpec a;
        a.scale = rng.uniform(0.8, 1.2);
        for (int i = 0; i < 3; ++i) a.rotation_deg[i] = rng.uniform(-5.0, 5.0);
        for (int i = 0; i < 3; ++i) a.translation_mm[i] = rng.uniform(-5.0, 5.0);
        return a;
    }
};

/// x -> rotation * (scale * x) + translation applied to every primitive.
/// Unchecked; `augment` validates the ranges first.
inline PhantomSpec transform_phantom(const PhantomSpec& spec, double scale, const Mat3& rotation,
                                     const Vec3& translation) {
    PhantomSpec out = spec;
    for (auto& p : out.primitives) {
        p.center = rotation * (scale * p.center) + translation;
        p.extent *= scale;
        p.orientation = rotation * p.orientation;
    }
    return out;
}

inline PhantomSpec augment(const PhantomSpec& spec, const AugmentSpec& aug) {
    aug.validate();
    return transform_phantom(spec, aug.scale, rotation_xyz(aug.rotation_deg), aug.translation_mm);
}

// ---------------------------------------------------------------------------
// Evaluation

/// Sum of additive attenuations containing x minus subtractive ones, clamped
/// at zero. Primitives are visited in list order.
inline double sample_attenuation(const PhantomSpec& spec, const Vec3& x) {
    double mu = 0.0;
    for (const auto& p : spec.primitives)
        if (p.contains(x)) mu += p.additive ? p.attenuation : -p.attenuation;
    return std::max(mu, 0.0);
}

/// Voxel-center point sampling of the phantom on `grid`. Produces exactly
/// sample_attenuation at every voxel center.
inline Volume rasterize(const PhantomSpec& spec, const Grid& grid, unsigned workers = 0) {
    for (int a = 0; a < 3; ++a) require(grid.dims[a] >= 8, "grid dims must be >= 8 per axis");
    Volume vol(grid);
    const int nx = grid.dims[0], ny = grid.dims[1], nz = grid.dims[2];

    struct Box {
        std::array<int, 3> lo, hi;
    };
    std::vector<Box> boxes;
    for (const auto& p : spec.primitives) {
        Box b{};
        for (int a = 0; a < 3; ++a) {
            const double half = p.support(Vec3::Unit(a)) + 1e-6;
            const double lo = (p.center[a] - half - grid.origin[a]) / grid.spacing[a];
            const double hi = (p.center[a] + half - grid.origin[a]) / grid.spacing[a];
            b.lo[a] = std::max(0, static_cast<int>(std::floor(lo)));
            b.hi[a] = std::min(grid.dims[a] - 1, static_cast<int>(std::ceil(hi)));
        }
        boxes.push_back(b);
    }

    parallel_for(static_cast<std::size_t>(nz), [&](std::size_t zi) {
        const int z = static_cast<int>(zi);
        std::vector<double> acc(static_cast<std::size_t>(nx) * ny, 0.0);
        for (std::size_t i = 0; i < spec.primitives.size(); ++i) {
            const auto& p = spec.primitives[i];
            const Box& b = boxes[i];
            if (z < b.lo[2] || z > b.hi[2]) continue;
            const double signed_mu = p.additive ? p.attenuation : -p.attenuation;
            for (int y = b.lo[1]; y <= b.hi[1]; ++y)
                for (int x = b.lo[0]; x <= b.hi[0]; ++x)
                    if (p.contains(grid.voxel_center(x, y, z)))
                        acc[static_cast<std::size_t>(y) * nx + x] += signed_mu;
        }
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x)
                vol.at(x, y, z) =
                    static_cast<float>(std::max(acc[static_cast<std::size_t>(y) * nx + x], 0.0));
    }, workers);
    return vol;
}

} // namespace cbctmotion

#pragma once

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"
#include "geometry.hpp"

namespace cbctmotion {

/// Nod rotates about x (left-right), Tilt about y (anterior-posterior), LR
/// and Trem about z (axial).
enum class MotionType { Nod, Tilt, LR, Trem };

/// SF: move and stay. RI: move and return to the initial pose. RD: move and
/// return to a different pose.
enum class MotionPattern { SF, RI, RD };

inline const char* to_string(MotionType t) {
    switch (t) {
    case MotionType::Nod: return "Nod";
    case MotionType::Tilt: return "Tilt";
    case MotionType::LR: return "LR";
    case MotionType::Trem: return "Trem";
    }
    return "?";
}

inline const char* to_string(MotionPattern p) {
    switch (p) {
    case MotionPattern::SF: return "sf";
    case MotionPattern::RI: return "ri";
    case MotionPattern::RD: return "rd";
    }
    return "?";
}

inline int rotation_axis(MotionType t) {
    switch (t) {
    case MotionType::Nod: return 0;
    case MotionType::Tilt: return 1;
    default: return 2;
    }
}

struct MotionSpec {
    MotionType type = MotionType::LR;
    MotionPattern pattern = MotionPattern::SF;
    double amplitude = 5.0; ///< signed degrees (and mm per unit of translation_direction)
    double t_start = 8.0;
    double t_end = 10.0;
    double tremor_frequency = 4.0;
    double rd_fraction = 0.5;
    double transition_time = 0.3;
    /// Translation per unit envelope, in mm per degree of amplitude. Zero for
    /// rotation-only motion.
    Vec3 translation_direction = Vec3::Zero();
    /// Rotation center relative to the isocenter.
    Vec3 pivot = Vec3::Zero();
    /// Permits amplitudes outside [3, 8] and windows outside [1, 5] s.
    bool allow_override = false;

    /// Scenario identifier, e.g. "LR-sf" or "Trem".
    std::string scenario() const {
        if (type == MotionType::Trem) return "Trem";
        return std::string(to_string(type)) + "-" + to_string(pattern);
    }

    void validate(double scan_duration) const {
        require(t_start >= 0.0 && t_end <= scan_duration + 1e-9 && t_end > t_start,
                "motion window must lie inside the scan");
        require(transition_time > 0.0, "transition_time must be positive");
        require(rd_fraction > 0.0 && rd_fraction < 1.0, "rd_fraction must lie in (0, 1)");
        require(tremor_frequency > 0.0, "tremor_frequency must be positive");
        if (!allow_override) {
            require(std::abs(amplitude) >= 3.0 && std::abs(amplitude) <= 8.0,
                    "motion amplitude magnitude must lie in [3, 8]");
            const double d = t_end - t_start;
            require(d >= 1.0 - 1e-9 && d <= 5.0 + 1e-9, "motion window must last between 1 and 5 s");
        }
    }
};

/// The ten scenario identifiers in result-table order.
inline const std::array<std::string, 10>& scenario_names() {
    static const std::array<std::string, 10> names = {"Nod-sf",  "Nod-ri",  "Nod-rd", "Tilt-sf",
                                                      "Tilt-ri", "Tilt-rd", "LR-sf",  "LR-ri",
                                                      "LR-rd",   "Trem"};
    return names;
}

/// Sets type and pattern from a scenario identifier.
inline void apply_scenario(MotionSpec& spec, const std::string& name) {
    const auto dash = name.find('-');
    const std::string t = name.substr(0, dash);
    if (t == "Trem" && dash == std::string::npos) {
        spec.type = MotionType::Trem;
        spec.pattern = MotionPattern::RI;
        return;
    }
    require(dash != std::string::npos, "unknown motion scenario: " + name);
    const std::string p = name.substr(dash + 1);
    if (t == "Nod") spec.type = MotionType::Nod;
    else if (t == "Tilt") spec.type = MotionType::Tilt;
    else if (t == "LR") spec.type = MotionType::LR;
    else throw ValidationError("unknown motion scenario: " + name);
    if (p == "sf") spec.pattern = MotionPattern::SF;
    else if (p == "ri") spec.pattern = MotionPattern::RI;
    else if (p == "rd") spec.pattern = MotionPattern::RD;
    else throw ValidationError("unknown motion scenario: " + name);
}

struct RigidMotionFrame {
    int frame = 0;
    Vec3 rotation_deg = Vec3::Zero();
    Vec3 translation_mm = Vec3::Zero();
    Vec3 pivot = Vec3::Zero();

    bool is_identity() const {
        return rotation_deg.isZero(0.0) && translation_mm.isZero(0.0);
    }

    /// x -> R (x - pivot) + pivot + translation, R = Rz Ry Rx.
    Mat4 matrix() const {
        Mat4 M = Mat4::Identity();
        if (is_identity()) return M;
        using Eigen::AngleAxisd;
        const Mat3 R = (AngleAxisd(deg_to_rad(rotation_deg.z()), Vec3::UnitZ()) *
                        AngleAxisd(deg_to_rad(rotation_deg.y()), Vec3::UnitY()) *
                        AngleAxisd(deg_to_rad(rotation_deg.x()), Vec3::UnitX()))
                           .toRotationMatrix();
        M.topLeftCorner<3, 3>() = R;
        M.topRightCorner<3, 1>() = pivot - R * pivot + translation_mm;
        return M;
    }
};

inline double smoothstep(double u) {
    if (u <= 0.0) return 0.0;
    if (u >= 1.0) return 1.0;
    return u * u * (3.0 - 2.0 * u);
}

/// Signed motion amplitude at time t (degrees).
inline double motion_envelope(const MotionSpec& s, double t) {
    const double A = s.amplitude;
    const double tt = s.transition_time;
    const double rise = smoothstep((t - s.t_start) / tt);
    const double fall = smoothstep((s.t_end - t) / tt);
    if (s.type == MotionType::Trem) {
        const double env = std::min(rise, fall);
        if (env == 0.0) return 0.0;
        return A * env * std::sin(2.0 * kPi * s.tremor_frequency * (t - s.t_start));
    }
    switch (s.pattern) {
    case MotionPattern::SF: return A * rise;
    case MotionPattern::RI: return A * std::min(rise, fall);
    case MotionPattern::RD:
        if (t < s.t_end - tt) return A * rise;
        return A * (s.rd_fraction + (1.0 - s.rd_fraction) * fall);
    }
    return 0.0;
}

inline std::vector<RigidMotionFrame> sample_motion(const MotionSpec& spec, const Trajectory& traj) {
    spec.validate(traj.geometry.scan_duration);
    std::vector<RigidMotionFrame> out;
    out.reserve(traj.frames.size());
    const int axis = rotation_axis(spec.type);
    for (const auto& f : traj.frames) {
        RigidMotionFrame m;
        m.frame = f.index;
        m.pivot = spec.pivot;
        const double a = motion_envelope(spec, f.time);
        if (a != 0.0) {
            m.rotation_deg[axis] = a;
            m.translation_mm = a * spec.translation_direction;
        }
        out.push_back(m);
    }
    return out;
}

/// Identity motion for every frame.
inline std::vector<RigidMotionFrame> no_motion(const Trajectory& traj) {
    std::vector<RigidMotionFrame> out(traj.frames.size());
    for (std::size_t k = 0; k < out.size(); ++k) out[k].frame = static_cast<int>(k);
    return out;
}

/// P'_k = P_k M_k: the object is moved by M_k in world coordinates while the
/// scanner keeps its nominal geometry.
inline Trajectory apply_motion(const Trajectory& traj, std::span<const Mat4> motions) {
    require(motions.size() == traj.frames.size(), "one motion matrix per frame is required");
    Trajectory out = traj;
    for (std::size_t k = 0; k < out.frames.size(); ++k) out.frames[k].P = traj.frames[k].P * motions[k];
    return out;
}

inline Trajectory apply_motion(const Trajectory& traj, std::span<const RigidMotionFrame> motions) {
    require(motions.size() == traj.frames.size(), "one motion entry per frame is required");
    std::vector<Mat4> m;
    m.reserve(motions.size());
    for (const auto& f : motions) m.push_back(f.matrix());
    return apply_motion(traj, std::span<const Mat4>(m));
}

/// max |M x - x| over the sphere of the given radius about the isocenter.
/// For a rotation by theta about axis n plus offset b this is
/// sqrt(|b_par|^2 + (2 r sin(theta / 2) + |b_perp|)^2).
inline double frame_displacement(const Mat4& M, double radius) {
    const Mat3 R = M.topLeftCorner<3, 3>();
    const Vec3 b = M.topRightCorner<3, 1>();
    const Eigen::AngleAxisd aa(R);
    const double theta = std::abs(aa.angle());
    if (theta == 0.0) return b.norm();
    const Vec3 n = aa.axis().normalized();
    const double b_par = b.dot(n);
    const double b_perp = (b - b_par * n).norm();
    const double chord = 2.0 * radius * std::sin(0.5 * theta);
    return std::sqrt(b_par * b_par + (chord + b_perp) * (chord + b_perp));
}

inline double max_displacement(std::span<const RigidMotionFrame> motions, double radius) {
    double d = 0.0;
    for (const auto& m : motions)
        if (!m.is_identity()) d = std::max(d, frame_displacement(m.matrix(), radius));
    return d;
}

namespace detail {

inline std::vector<ViewLabel> label_from_displacements(const std::vector<ShortScanView>& views,
                                                       const std::vector<double>& disp, double threshold_mm) {
    std::vector<ViewLabel> labels;
    for (const auto& v : views) {
        bool positive = false;
        for (int k : v.frame_indices) positive = positive || disp.at(k) > threshold_mm;
        labels.push_back(positive ? ViewLabel::Positive : ViewLabel::Negative);
    }
    return labels;
}

} // namespace detail

/// A view is positive when any of its frames displaces the FOV sphere by
/// more than `threshold_mm`.
inline std::vector<ViewLabel> label_views(const std::vector<ShortScanView>& views,
                                          std::span<const RigidMotionFrame> motions,
                                          const Trajectory& traj, double threshold_mm = 0.5) {
    require(motions.size() == traj.frames.size(), "one motion entry per frame is required");
    const double radius = traj.geometry.fov_radius;
    std::vector<double> disp(motions.size(), 0.0);
    for (std::size_t k = 0; k < motions.size(); ++k)
        if (!motions[k].is_identity()) disp[k] = frame_displacement(motions[k].matrix(), radius);
    return detail::label_from_displacements(views, disp, threshold_mm);
}

inline std::vector<ViewLabel> label_views(const std::vector<ShortScanView>& views, std::span<const Mat4> motions,
                                          const Trajectory& traj, double threshold_mm = 0.5) {
    require(motions.size() == traj.frames.size(), "one motion matrix per frame is required");
    std::vector<double> disp(motions.size(), 0.0);
    for (std::size_t k = 0; k < motions.size(); ++k)
        if (motions[k] != Mat4::Identity()) disp[k] = frame_displacement(motions[k], traj.geometry.fov_radius);
    return detail::label_from_displacements(views, disp, threshold_mm);
}

} // namespace cbctmotion

#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "common.hpp"

namespace cbctmotion {

/// Circular cone-beam acquisition. Lengths in mm, angles in degrees, time in
/// seconds. Defaults describe the dental scanner at full scale; the detector
/// size and SAD are not published and are chosen to cover the 105 x 110 mm
/// field of view.
struct ScanGeometry {
    double sdd = 741.0;
    double sad = 430.0;
    int det_rows = 944;
    int det_cols = 896;
    double pixel_pitch = 0.24;
    double fov_radius = 52.5;
    double fov_height = 110.0;
    double scan_arc = 360.0;
    double scan_duration = 24.0;
    int n_frames = 360;

    double magnification() const { return sdd / sad; }
    double frame_spacing_rad() const { return deg_to_rad(scan_arc) / n_frames; }
    double principal_u() const { return 0.5 * (det_cols - 1); }
    double principal_v() const { return 0.5 * (det_rows - 1); }

    void validate() const {
        if (!(sdd > sad && sad > fov_radius && fov_radius > 0.0))
            throw ConfigError("geometry requires sdd > sad > fov_radius > 0");
        if (!(pixel_pitch > 0.0)) throw ConfigError("pixel_pitch must be positive");
        if (n_frames < 2) throw ConfigError("n_frames must be >= 2");
        if (det_rows < 1 || det_cols < 1) throw ConfigError("detector must have pixels");
        if (!(scan_arc > 0.0 && scan_duration > 0.0))
            throw ConfigError("scan arc and duration must be positive");
        if (det_cols * pixel_pitch < 2.0 * fov_radius * magnification())
            throw ConfigError("detector width does not cover the magnified field of view");
    }

    bool operator==(const ScanGeometry&) const = default;
};

struct FrameGeometry {
    int index = 0;
    double beta = 0.0; ///< gantry angle, radians
    double time = 0.0; ///< seconds from scan start
    ProjectionMatrix P = ProjectionMatrix::Zero();
};

struct Trajectory {
    ScanGeometry geometry;
    std::vector<FrameGeometry> frames;
};

enum class ViewLabel { Negative, Positive };

inline const char* to_string(ViewLabel l) {
    return l == ViewLabel::Positive ? "positive" : "negative";
}

struct ShortScanView {
    int view_index = 0;
    double beta_start = 0.0; ///< radians
    double span = 0.0;       ///< radians, pi + 2 * half fan angle
    std::vector<int> frame_indices;
    std::optional<ViewLabel> label;
};

// ---------------------------------------------------------------------------

/// Half fan angle asin(fov_radius / sad) subtending the field of view.
inline double fan_angle(const ScanGeometry& geom) {
    if (!(geom.fov_radius >= 0.0) || geom.fov_radius >= geom.sad)
        throw ConfigError("fan angle requires 0 <= fov_radius < sad");
    return std::asin(geom.fov_radius / geom.sad);
}

/// Angular span of a short scan: 180 degrees plus the full fan angle.
inline double short_scan_span(const ScanGeometry& geom) { return kPi + 2.0 * fan_angle(geom); }

/// Source position (mm) for gantry angle beta on the nominal circle.
inline Vec3 source_position(const ScanGeometry& geom, double beta) {
    return {geom.sad * std::cos(beta), geom.sad * std::sin(beta), 0.0};
}

/// Rotation whose rows are the detector u axis, the detector v axis and the
/// viewing direction. v follows world +z.
inline Mat3 detector_frame(double beta) {
    Mat3 R;
    R.row(0) << std::sin(beta), -std::cos(beta), 0.0;
    R.row(1) << 0.0, 0.0, 1.0;
    R.row(2) << -std::cos(beta), -std::sin(beta), 0.0;
    return R;
}

inline Mat3 intrinsics(const ScanGeometry& geom) {
    const double f = geom.sdd / geom.pixel_pitch;
    Mat3 K;
    K << f, 0.0, geom.principal_u(), 0.0, f, geom.principal_v(), 0.0, 0.0, 1.0;
    return K;
}

inline ProjectionMatrix projection_matrix(const ScanGeometry& geom, double beta) {
    const Mat3 R = detector_frame(beta);
    const Vec3 t = -R * source_position(geom, beta);
    ProjectionMatrix Rt;
    Rt.leftCols<3>() = R;
    Rt.col(3) = t;
    return intrinsics(geom) * Rt;
}

inline Trajectory build_circular_trajectory(const ScanGeometry& geom) {
    geom.validate();
    Trajectory traj;
    traj.geometry = geom;
    traj.frames.reserve(geom.n_frames);
    const double dbeta = geom.frame_spacing_rad();
    const double dt = geom.scan_duration / geom.n_frames;
    for (int k = 0; k < geom.n_frames; ++k) {
        FrameGeometry f;
        f.index = k;
        f.beta = k * dbeta;
        f.time = k * dt;
        f.P = projection_matrix(geom, f.beta);
        traj.frames.push_back(f);
    }
    return traj;
}

/// Dehomogenized P * [x; 1]. No clamping to the detector bounds.
inline Vec2 project_point(const ProjectionMatrix& P, const Vec3& x) {
    const Vec3 h = P.leftCols<3>() * x + P.col(3);
    if (!(h.z() > 0.0)) throw BehindSourceError("point lies behind the source");
    return {h.x() / h.z(), h.y() / h.z()};
}

inline Vec2 project_point(const FrameGeometry& frame, const Vec3& x) {
    return project_point(frame.P, x);
}

/// Source position encoded by a projection matrix (its right null vector).
inline Vec3 source_from_matrix(const ProjectionMatrix& P) {
    return -P.leftCols<3>().inverse() * P.col(3);
}

struct CameraDecomposition {
    Mat3 K;
    Mat3 R;
    Vec3 t;
};

/// RQ-decomposes P = K [R | t] with K upper triangular, positive diagonal and
/// R a proper rotation. The scale of P is preserved in K.
inline CameraDecomposition decompose_projection(const ProjectionMatrix& P) {
    const Mat3 M = P.leftCols<3>();
    Mat3 flip = Mat3::Zero();
    flip(0, 2) = flip(1, 1) = flip(2, 0) = 1.0;
    Eigen::HouseholderQR<Mat3> qr((flip * M).transpose());
    const Mat3 Q = qr.householderQ();
    const Mat3 U = qr.matrixQR().triangularView<Eigen::Upper>();
    Mat3 K = flip * U.transpose() * flip;
    Mat3 R = flip * Q.transpose();
    const Mat3 D = K.diagonal().array().sign().matrix().asDiagonal();
    K = K * D;
    R = D * R;
    if (R.determinant() < 0.0) throw NumericError("projection matrix has negative orientation");
    CameraDecomposition out{K, R, K.inverse() * P.col(3)};
    return out;
}

// ---------------------------------------------------------------------------
// Short-scan windows

/// Angle in [0, 2 pi).
inline double wrap_angle(double a) {
    double r = std::fmod(a, 2.0 * kPi);
    if (r < 0.0) r += 2.0 * kPi;
    if (r >= 2.0 * kPi) r -= 2.0 * kPi;
    return r;
}

/// Local angle of `beta` measured from `start`, snapped to zero when the two
/// coincide up to rounding.
inline double local_angle(double beta, double start) {
    double d = wrap_angle(beta - start);
    if (2.0 * kPi - d < 1e-9) d = 0.0;
    return d;
}

inline std::vector<ShortScanView> select_short_scan_views(const Trajectory& traj, int n_views = 4) {
    const ScanGeometry& geom = traj.geometry;
    if (geom.scan_arc < 360.0 - 1e-9)
        throw ValidationError("short-scan view selection requires a full 360 degree scan");
    require(n_views >= 1, "n_views must be positive");
    const double span = short_scan_span(geom);
    require(span <= 2.0 * kPi, "short-scan span exceeds a full rotation");

    std::vector<ShortScanView> views;
    for (int i = 0; i < n_views; ++i) {
        ShortScanView v;
        v.view_index = i;
        v.beta_start = i * (2.0 * kPi / n_views);
        v.span = span;
        std::vector<std::pair<double, int>> members;
        for (const auto& f : traj.frames) {
            const double local = local_angle(f.beta, v.beta_start);
            if (local < span) members.emplace_back(local, f.index);
        }
        std::sort(members.begin(), members.end());
        for (const auto& m : members) v.frame_indices.push_back(m.second);
        views.push_back(std::move(v));
    }
    return views;
}

// ---------------------------------------------------------------------------
// Parker short-scan weights

/// Parker weight for local scan angle `beta` (radians from the view start,
/// taken modulo 2 pi) and fan coordinate `gamma` in [-delta, delta]. Rays
/// (beta, gamma) and (beta + pi - 2 gamma, -gamma) are the same line; their
/// weights sum to one.
inline double parker_weight(double beta, double gamma, double delta) {
    beta = wrap_angle(beta);
    gamma = std::clamp(gamma, -delta, delta);
    const double end = kPi + 2.0 * delta;
    if (beta > end) return 0.0;
    const double rise = 2.0 * delta + 2.0 * gamma;
    const double fall = kPi + 2.0 * gamma;
    if (beta <= rise) {
        if (delta + gamma <= 0.0) return 0.0;
        const double s = std::sin(0.25 * kPi * beta / (delta + gamma));
        return s * s;
    }
    if (beta <= fall) return 1.0;
    if (delta - gamma <= 0.0) return 1.0;
    const double s = std::sin(0.25 * kPi * (end - beta) / (delta - gamma));
    return s * s;
}

/// Fan coordinate of a detector column, signed so that the conjugate of the
/// ray at (beta, gamma) is (beta + pi - 2 gamma, -gamma) on this trajectory.
inline double column_fan_angle(const ScanGeometry& geom, double col) {
    return std::atan((geom.principal_u() - col) * geom.pixel_pitch / geom.sdd);
}

/// Weights indexed [position in view.frame_indices][detector column].
inline std::vector<std::vector<double>> parker_weights(const Trajectory& traj,
                                                       const ShortScanView& view) {
    const ScanGeometry& geom = traj.geometry;
    const double delta = fan_angle(geom);
    std::vector<double> gammas(geom.det_cols);
    for (int c = 0; c < geom.det_cols; ++c) gammas[c] = column_fan_angle(geom, c);
    std::vector<std::vector<double>> w;
    w.reserve(view.frame_indices.size());
    for (int k : view.frame_indices) {
        const double local = local_angle(traj.frames.at(k).beta, view.beta_start);
        std::vector<double> row(geom.det_cols);
        for (int c = 0; c < geom.det_cols; ++c) row[c] = parker_weight(local, gammas[c], delta);
        w.push_back(std::move(row));
    }
    return w;
}

} // namespace cbctmotion
